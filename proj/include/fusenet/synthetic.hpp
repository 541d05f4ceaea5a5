// synthetic.hpp -- seeded two-class texture generator. Class 0 images carry
// many small bright blobs, class 1 few large ones, over a noisy background,
// so the classes differ in spatial frequency rather than a single pixel
// statistic.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fusenet/data.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"

namespace fusenet {

inline Image synthetic_image(std::size_t h, std::size_t w, int label, Rng& rng) {
    std::vector<double> canvas(h * w);
    for (auto& v : canvas) v = 30.0 + rng.uniform(0.0, 20.0);

    const std::size_t blobs = label == 0 ? 6 + rng.next_below(3)  // 6..8 small
                                         : 2 + rng.next_below(2); // 2..3 large
    for (std::size_t b = 0; b < blobs; ++b) {
        const double cy = rng.uniform(0.15, 0.85) * double(h);
        const double cx = rng.uniform(0.15, 0.85) * double(w);
        const double sigma = label == 0 ? rng.uniform(2.0, 3.5) : rng.uniform(6.0, 9.0);
        const double amp = rng.uniform(60.0, 110.0);
        const double inv = 1.0 / (2.0 * sigma * sigma);
        const long reach = std::lround(3.0 * sigma);
        const long y0 = std::max(0L, std::lround(cy) - reach);
        const long y1 = std::min(long(h) - 1, std::lround(cy) + reach);
        const long x0 = std::max(0L, std::lround(cx) - reach);
        const long x1 = std::min(long(w) - 1, std::lround(cx) + reach);
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
                const double d2 = (double(y) - cy) * (double(y) - cy) +
                                  (double(x) - cx) * (double(x) - cx);
                canvas[std::size_t(y) * w + std::size_t(x)] += amp * std::exp(-d2 * inv);
            }
    }

    Image img;
    img.h = h;
    img.w = w;
    img.pixels.resize(h * w);
    for (std::size_t i = 0; i < canvas.size(); ++i)
        img.pixels[i] = std::uint8_t(std::clamp(canvas[i], 0.0, 255.0));
    return img;
}

// Alternating labels (even index = class 0); image i is generated from its
// own derived seed, so any subset is reproducible independently.
inline Dataset make_synthetic_dataset(std::size_t count, std::size_t h, std::size_t w,
                                      std::uint64_t seed) {
    if (count == 0) throw UsageError("synthetic: count must be positive");
    Dataset ds;
    ds.image_h = h;
    ds.image_w = w;
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, i));
        const int label = int(i % 2);
        const Image img = synthetic_image(h, w, label, rng);
        Sample s;
        auto t = normalize<float>(img);
        s.values.assign(t.values().begin(), t.values().end());
        s.h = h;
        s.w = w;
        s.label = label;
        s.source_path = "synthetic:" + std::to_string(i);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Writes count PGM files plus manifest.csv into dir; returns the manifest
// path. Loading that manifest reproduces make_synthetic_dataset bit-exactly
// (pixels are quantized to bytes before normalization either way).
inline std::string write_synthetic_dataset(const std::string& dir, std::size_t count,
                                           std::size_t h, std::size_t w, std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string manifest = "path,label\n";
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, i));
        const int label = int(i % 2);
        const Image img = synthetic_image(h, w, label, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.pgm", i);
        const fs::path file = fs::path(dir) / name;
        std::ofstream out(file, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("synthetic: cannot write " + file.string());
        const std::string bytes = encode_pgm(img);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        manifest += std::string(name) + "," + std::to_string(label) + "\n";
    }
    const fs::path mpath = fs::path(dir) / "manifest.csv";
    std::ofstream mout(mpath, std::ios::binary | std::ios::trunc);
    if (!mout) throw DataError("synthetic: cannot write " + mpath.string());
    mout << manifest;
    return mpath.string();
}

} // namespace fusenet
