// data.hpp -- PGM images, dataset manifests, seeded split plans.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

struct Image {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> pixels; // row-major, h*w entries
};

namespace detail {

inline void skip_pgm_space(std::string_view bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const char c = bytes[pos];
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f') {
            ++pos;
        } else {
            break;
        }
    }
}

inline unsigned long parse_pgm_field(std::string_view bytes, std::size_t& pos, const char* what) {
    skip_pgm_space(bytes, pos);
    std::size_t end = pos;
    while (end < bytes.size() && bytes[end] >= '0' && bytes[end] <= '9') ++end;
    unsigned long value = 0;
    const auto [ptr, ec] = std::from_chars(bytes.data() + pos, bytes.data() + end, value);
    if (ec != std::errc() || ptr == bytes.data() + pos)
        throw FormatError(std::string("pgm: bad ") + what + " field");
    pos = end;
    return value;
}

} // namespace detail

inline Image decode_pgm(std::string_view bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
        throw FormatError("pgm: missing P5 magic");
    std::size_t pos = 2;
    const unsigned long w = detail::parse_pgm_field(bytes, pos, "width");
    const unsigned long h = detail::parse_pgm_field(bytes, pos, "height");
    const unsigned long maxval = detail::parse_pgm_field(bytes, pos, "maxval");
    if (w == 0 || h == 0) throw FormatError("pgm: zero dimension");
    if (maxval == 0 || maxval > 255)
        throw FormatError("pgm: maxval " + std::to_string(maxval) + " out of byte range");
    if (pos >= bytes.size() || !(bytes[pos] == ' ' || bytes[pos] == '\t' || bytes[pos] == '\r' ||
                                 bytes[pos] == '\n'))
        throw FormatError("pgm: raster must start after a single whitespace byte");
    ++pos;
    const std::size_t want = std::size_t(w) * std::size_t(h);
    if (bytes.size() - pos < want)
        throw FormatError("pgm: raster truncated, expected " + std::to_string(want) +
                          " bytes, got " + std::to_string(bytes.size() - pos));
    if (bytes.size() - pos > want)
        throw FormatError("pgm: " + std::to_string(bytes.size() - pos - want) +
                          " trailing bytes after raster");
    Image img;
    img.w = w;
    img.h = h;
    img.pixels.assign(bytes.begin() + std::string_view::difference_type(pos), bytes.end());
    return img;
}

inline std::string encode_pgm(const Image& img) {
    if (img.pixels.size() != img.h * img.w) throw UsageError("encode_pgm: pixel count mismatch");
    std::string out = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

// [0,255] bytes -> [0,1] reals (divide by 255); optionally re-centered to
// mean 0 / sd 1 per image. The moments are taken in double regardless of T.
template <typename T>
Tensor<T> normalize(const Image& img, bool standardize = false) {
    std::vector<T> vals(img.pixels.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = T(img.pixels[i]) / T(255);
    if (standardize) {
        double mean = 0.0;
        for (auto v : vals) mean += double(v);
        mean /= double(vals.size());
        double var = 0.0;
        for (auto v : vals) var += (double(v) - mean) * (double(v) - mean);
        var /= double(vals.size());
        const double sd = std::sqrt(var);
        for (auto& v : vals)
            v = sd > 0.0 ? T((double(v) - mean) / sd) : T(0);
    }
    return Tensor<T>({1, img.h, img.w}, std::move(vals), false);
}

struct Sample {
    std::vector<float> values; // normalized, h*w entries
    std::size_t h = 0;
    std::size_t w = 0;
    int label = 0; // 0 = negative, 1 = positive
    std::string source_path;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t image_h = 0;
    std::size_t image_w = 0;

    std::size_t size() const { return samples.size(); }
    // (negatives, positives)
    std::pair<std::int64_t, std::int64_t> class_counts() const {
        std::pair<std::int64_t, std::int64_t> counts{0, 0};
        for (const auto& s : samples) (s.label == 1 ? counts.second : counts.first) += 1;
        return counts;
    }
    Dataset subset(const std::vector<std::size_t>& indices) const {
        Dataset out;
        out.image_h = image_h;
        out.image_w = image_w;
        out.samples.reserve(indices.size());
        for (auto i : indices) {
            if (i >= samples.size())
                throw UsageError("subset: index " + std::to_string(i) + " out of range");
            out.samples.push_back(samples[i]);
        }
        return out;
    }
};

struct ManifestRow {
    std::string path; // resolved against the manifest directory
    int label = 0;
    std::size_t row = 0; // 1-based line number in the file
};

inline std::vector<ManifestRow> read_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("manifest: cannot open " + manifest_path);
    const auto base = std::filesystem::path(manifest_path).parent_path();

    auto strip = [](std::string s) {
        while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t'))
            s.pop_back();
        std::size_t b = 0;
        while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
        return s.substr(b);
    };

    std::string line;
    if (!std::getline(in, line) || strip(line) != "path,label")
        throw DataError("manifest: first line must be the header \"path,label\"");

    std::vector<ManifestRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = strip(line);
        if (t.empty()) continue;
        const std::size_t comma = t.rfind(',');
        if (comma == std::string::npos || comma == 0)
            throw DataError("manifest row " + std::to_string(lineno) + ": expected path,label");
        const std::string path = strip(t.substr(0, comma));
        const std::string label = strip(t.substr(comma + 1));
        if (label != "0" && label != "1")
            throw DataError("manifest row " + std::to_string(lineno) + ": label \"" + label +
                            "\" is not 0 or 1");
        std::filesystem::path p(path);
        if (p.is_relative()) p = base / p;
        rows.push_back({p.string(), label == "1" ? 1 : 0, lineno});
    }
    return rows;
}

inline Dataset load_manifest(const std::string& manifest_path, bool standardize = false) {
    Dataset ds;
    for (const auto& row : read_manifest(manifest_path)) {
        std::ifstream f(row.path, std::ios::binary);
        if (!f)
            throw DataError("manifest row " + std::to_string(row.row) + ": cannot open image " +
                            row.path);
        std::ostringstream buf;
        buf << f.rdbuf();
        Image img;
        try {
            img = decode_pgm(buf.str());
        } catch (const FormatError& e) {
            throw DataError("manifest row " + std::to_string(row.row) + ": " + row.path + ": " +
                            e.what());
        }
        if (ds.samples.empty()) {
            ds.image_h = img.h;
            ds.image_w = img.w;
        } else if (img.h != ds.image_h || img.w != ds.image_w) {
            throw DataError("manifest row " + std::to_string(row.row) + ": image is " +
                            std::to_string(img.w) + "x" + std::to_string(img.h) +
                            ", dataset is " + std::to_string(ds.image_w) + "x" +
                            std::to_string(ds.image_h));
        }
        Sample s;
        auto t = normalize<float>(img, standardize);
        s.values.assign(t.values().begin(), t.values().end());
        s.h = img.h;
        s.w = img.w;
        s.label = row.label;
        s.source_path = row.path;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

struct SplitPlan {
    std::uint64_t seed = 0;
    std::size_t n_val = 0;
    std::size_t n_test = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;

    std::size_t total() const { return train.size() + val.size() + test.size(); }

    // The three index lists must partition 0..n-1.
    void validate(std::size_t n) const {
        if (total() != n)
            throw DataError("split plan covers " + std::to_string(total()) + " indices, dataset has " +
                            std::to_string(n));
        std::vector<char> seen(n, 0);
        for (const auto* part : {&train, &val, &test})
            for (auto i : *part) {
                if (i >= n)
                    throw DataError("split plan index " + std::to_string(i) + " out of range");
                if (seen[i]) throw DataError("split plan repeats index " + std::to_string(i));
                seen[i] = 1;
            }
        if (val.size() != n_val || test.size() != n_test)
            throw DataError("split plan sizes disagree with n_val/n_test fields");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["n_val"] = n_val;
        j["n_test"] = n_test;
        j["train"] = train;
        j["val"] = val;
        j["test"] = test;
        return j;
    }
    static SplitPlan from_json(const nlohmann::json& j) {
        SplitPlan p;
        try {
            p.seed = j.at("seed").get<std::uint64_t>();
            p.n_val = j.at("n_val").get<std::size_t>();
            p.n_test = j.at("n_test").get<std::size_t>();
            p.train = j.at("train").get<std::vector<std::size_t>>();
            p.val = j.at("val").get<std::vector<std::size_t>>();
            p.test = j.at("test").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("split plan: ") + e.what());
        }
        return p;
    }
};

namespace detail {

// Largest-remainder allocation of k slots across class buckets.
inline std::vector<std::size_t> proportional_quota(const std::vector<std::size_t>& sizes,
                                                   std::size_t k, std::size_t n) {
    std::vector<std::size_t> quota(sizes.size());
    std::vector<std::pair<std::size_t, std::size_t>> rema; // (remainder*, class)
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
        quota[c] = sizes[c] * k / n;
        assigned += quota[c];
        rema.push_back({sizes[c] * k % n, c});
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t i = 0; assigned < k; ++i, ++assigned) quota[rema[i % rema.size()].second] += 1;
    return quota;
}

} // namespace detail

// Seeded Fisher-Yates shuffle of 0..n-1; the first n_val indices become the
// validation split, the next n_test the test split, the remainder the train
// split. With stratify, the same protocol runs per class and the per-class
// quotas follow the class proportions (largest remainder).
inline SplitPlan split_dataset(const Dataset& ds, std::size_t n_val, std::size_t n_test,
                               std::uint64_t seed, bool stratify = false) {
    const std::size_t n = ds.size();
    if (n_val + n_test >= n)
        throw UsageError("split: n_val + n_test = " + std::to_string(n_val + n_test) +
                         " leaves no training data out of " + std::to_string(n));
    SplitPlan plan;
    plan.seed = seed;
    plan.n_val = n_val;
    plan.n_test = n_test;
    Rng rng(seed);
    if (!stratify) {
        auto idx = iota_indices(n);
        rng.shuffle(idx);
        plan.val.assign(idx.begin(), idx.begin() + std::ptrdiff_t(n_val));
        plan.test.assign(idx.begin() + std::ptrdiff_t(n_val),
                         idx.begin() + std::ptrdiff_t(n_val + n_test));
        plan.train.assign(idx.begin() + std::ptrdiff_t(n_val + n_test), idx.end());
    } else {
        std::vector<std::vector<std::size_t>> by_class(2);
        for (std::size_t i = 0; i < n; ++i) by_class[ds.samples[i].label == 1].push_back(i);
        const std::vector<std::size_t> sizes{by_class[0].size(), by_class[1].size()};
        const auto val_quota = detail::proportional_quota(sizes, n_val, n);
        const auto test_quota = detail::proportional_quota(sizes, n_test, n);
        for (std::size_t c = 0; c < 2; ++c) {
            if (val_quota[c] + test_quota[c] > sizes[c])
                throw UsageError("split: stratified quota exceeds class " + std::to_string(c) +
                                 " population");
            rng.shuffle(by_class[c]);
            std::size_t at = 0;
            for (std::size_t k = 0; k < val_quota[c]; ++k) plan.val.push_back(by_class[c][at++]);
            for (std::size_t k = 0; k < test_quota[c]; ++k) plan.test.push_back(by_class[c][at++]);
            while (at < sizes[c]) plan.train.push_back(by_class[c][at++]);
        }
    }
    return plan;
}

inline void save_split(const SplitPlan& plan, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("split: cannot write " + path);
    out << plan.to_json().dump(2) << "\n";
}

inline SplitPlan load_split(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("split: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("split: " + path + ": " + e.what());
    }
    return SplitPlan::from_json(j);
}

} // namespace fusenet
