#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fusenet/data.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/synthetic.hpp"

using namespace fusenet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    const fs::path dir =
        fs::temp_directory_path() / ("fusenet_data_" + tag + "_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

std::string pgm_bytes(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& px) {
    Image img;
    img.h = h;
    img.w = w;
    img.pixels = px;
    return encode_pgm(img);
}

} // namespace

TEST_CASE("decode_pgm reads a hand-built file") {
    const std::string raw = std::string("P5\n2 2\n255\n") +
                            std::string("\x00\x80\xff\x40", 4);
    auto img = decode_pgm(raw);
    CHECK(img.w == 2);
    CHECK(img.h == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 255, 64});
}

TEST_CASE("decode_pgm skips comment lines between fields") {
    const std::string raw = std::string("P5\n# scanner model X\n2 2\n# maxval next\n255\n") +
                            std::string("\x00\x80\xff\x40", 4);
    auto img = decode_pgm(raw);
    CHECK(img.w == 2);
    CHECK(img.h == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 255, 64});
}

TEST_CASE("decode_pgm rejects malformed files") {
    const std::string px4(4, '\x10');
    CHECK_THROWS_AS(decode_pgm("P6\n2 2\n255\n" + px4), FormatError);   // wrong magic
    CHECK_THROWS_AS(decode_pgm(""), FormatError);
    CHECK_THROWS_AS(decode_pgm("P5\n2 2\n255\n" + px4.substr(0, 3)), FormatError); // short
    CHECK_THROWS_AS(decode_pgm("P5\n2 2\n255\n" + px4 + "x"), FormatError);        // trailing
    CHECK_THROWS_AS(decode_pgm("P5\n2 2\n65535\n" + px4), FormatError); // wide maxval
    CHECK_THROWS_AS(decode_pgm("P5\n2 2\n0\n" + px4), FormatError);
    CHECK_THROWS_AS(decode_pgm("P5\n0 2\n255\n"), FormatError);         // zero dimension
    CHECK_THROWS_AS(decode_pgm("P5\nzz 2\n255\n" + px4), FormatError);  // non-numeric field
}

TEST_CASE("encode then decode is the identity on random images") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        Image img;
        img.h = 1 + rng.next_below(16);
        img.w = 1 + rng.next_below(16);
        img.pixels.resize(img.h * img.w);
        for (auto& p : img.pixels) p = std::uint8_t(rng.next_below(256));
        auto back = decode_pgm(encode_pgm(img));
        CHECK(back.h == img.h);
        CHECK(back.w == img.w);
        CHECK(back.pixels == img.pixels);
    }
}

TEST_CASE("normalize scales bytes by 255") {
    Image img;
    img.h = 1;
    img.w = 3;
    img.pixels = {0, 255, 51};
    auto t = normalize<float>(img);
    CHECK(t.shape() == Shape{1, 1, 3});
    CHECK(t.values()[0] == 0.0f);
    CHECK(t.values()[1] == 1.0f); // endpoint maps exactly
    CHECK(t.values()[2] == Catch::Approx(51.0 / 255.0));

    Image zero;
    zero.h = 2;
    zero.w = 2;
    zero.pixels = {0, 0, 0, 0};
    auto z = normalize<float>(zero);
    for (float v : z.values()) CHECK(v == 0.0f);
}

TEST_CASE("standardization recenters to zero mean unit sd") {
    Rng rng(77);
    Image img;
    img.h = 8;
    img.w = 8;
    img.pixels.resize(64);
    for (auto& p : img.pixels) p = std::uint8_t(rng.next_below(256));
    auto t = normalize<double>(img, true);
    double mean = 0.0;
    for (double v : t.values()) mean += v;
    mean /= 64.0;
    double var = 0.0;
    for (double v : t.values()) var += (v - mean) * (v - mean);
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);

    // constant image has sd 0; the convention is all zeros, not NaN
    Image flat;
    flat.h = 2;
    flat.w = 2;
    flat.pixels = {9, 9, 9, 9};
    auto f = normalize<double>(flat, true);
    for (double v : f.values()) CHECK(v == 0.0);
}

TEST_CASE("load_manifest returns samples in row order with resolved paths") {
    const auto dir = fresh_dir("order");
    write_file(dir / "a.pgm", pgm_bytes(2, 2, {10, 20, 30, 40}));
    write_file(dir / "b.pgm", pgm_bytes(2, 2, {50, 60, 70, 80}));
    write_file(dir / "manifest.csv", "path,label\na.pgm,0\nb.pgm,1\n");

    auto ds = load_manifest((dir / "manifest.csv").string());
    REQUIRE(ds.size() == 2);
    CHECK(ds.image_h == 2);
    CHECK(ds.image_w == 2);
    CHECK(ds.samples[0].label == 0);
    CHECK(ds.samples[1].label == 1);
    CHECK(ds.samples[0].source_path == (dir / "a.pgm").string());
    CHECK(ds.samples[0].values[0] == Catch::Approx(10.0 / 255.0));
    CHECK(ds.samples[1].values[3] == Catch::Approx(80.0 / 255.0));
    CHECK(ds.class_counts() == std::pair<std::int64_t, std::int64_t>{1, 1});

    // reload is bit-identical
    auto again = load_manifest((dir / "manifest.csv").string());
    REQUIRE(again.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(again.samples[i].values == ds.samples[i].values);
        CHECK(again.samples[i].label == ds.samples[i].label);
        CHECK(again.samples[i].source_path == ds.samples[i].source_path);
    }
}

TEST_CASE("manifest errors name the offending row") {
    const auto dir = fresh_dir("errors");
    write_file(dir / "ok.pgm", pgm_bytes(2, 2, {1, 2, 3, 4}));
    write_file(dir / "wide.pgm", pgm_bytes(2, 3, {1, 2, 3, 4, 5, 6}));
    write_file(dir / "broken.pgm", "P5\n2 2\n255\nxy"); // truncated raster

    write_file(dir / "bad_label.csv", "path,label\nok.pgm,0\nok.pgm,2\n");
    try {
        load_manifest((dir / "bad_label.csv").string());
        FAIL("expected data error");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("row 3") != std::string::npos);
        CHECK(msg.find("2") != std::string::npos);
    }

    write_file(dir / "missing.csv", "path,label\nok.pgm,0\nnot_there.pgm,1\n");
    try {
        load_manifest((dir / "missing.csv").string());
        FAIL("expected data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }

    write_file(dir / "mixed.csv", "path,label\nok.pgm,0\nwide.pgm,1\n");
    try {
        load_manifest((dir / "mixed.csv").string());
        FAIL("expected data error");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("row 3") != std::string::npos);
        CHECK(msg.find("3x2") != std::string::npos);
    }

    write_file(dir / "corrupt.csv", "path,label\nbroken.pgm,0\n");
    try {
        load_manifest((dir / "corrupt.csv").string());
        FAIL("expected data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }

    write_file(dir / "no_header.csv", "ok.pgm,0\n");
    CHECK_THROWS_AS(load_manifest((dir / "no_header.csv").string()), DataError);
    CHECK_THROWS_AS(load_manifest((dir / "does_not_exist.csv").string()), DataError);
}

TEST_CASE("manifest tolerates blank lines and CRLF") {
    const auto dir = fresh_dir("crlf");
    write_file(dir / "ok.pgm", pgm_bytes(1, 1, {42}));
    write_file(dir / "manifest.csv", "path,label\r\n\r\nok.pgm,1\r\n\n");
    auto ds = load_manifest((dir / "manifest.csv").string());
    REQUIRE(ds.size() == 1);
    CHECK(ds.samples[0].label == 1);
}

TEST_CASE("full-size manifest reproduces the expected class balance") {
    const auto dir = fresh_dir("counts");
    write_file(dir / "px.pgm", pgm_bytes(1, 1, {7}));
    std::string manifest = "path,label\n";
    for (int i = 0; i < 2482; ++i)
        manifest += "px.pgm," + std::string(i < 1252 ? "1" : "0") + "\n";
    write_file(dir / "manifest.csv", manifest);
    auto ds = load_manifest((dir / "manifest.csv").string());
    CHECK(ds.size() == 2482);
    CHECK(ds.class_counts() == std::pair<std::int64_t, std::int64_t>{1230, 1252});
}

namespace {

Dataset label_only_dataset(std::size_t n, std::size_t positives) {
    Dataset ds;
    ds.image_h = 1;
    ds.image_w = 1;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.values = {0.0f};
        s.h = 1;
        s.w = 1;
        s.label = i < positives ? 1 : 0;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace

TEST_CASE("split sizes follow the val/test/train protocol") {
    auto ds = label_only_dataset(2482, 1252);
    auto plan = split_dataset(ds, 250, 250, 42);
    CHECK(plan.val.size() == 250);
    CHECK(plan.test.size() == 250);
    CHECK(plan.train.size() == 1982);
    plan.validate(2482); // partition, disjointness, size fields
}

TEST_CASE("split order comes from the seeded shuffle") {
    // shuffle(seed 7) of 0..9 is [4,0,6,2,1,3,9,5,7,8]; the plan slices it
    auto ds = label_only_dataset(10, 5);
    auto plan = split_dataset(ds, 3, 3, 7);
    CHECK(plan.val == std::vector<std::size_t>{4, 0, 6});
    CHECK(plan.test == std::vector<std::size_t>{2, 1, 3});
    CHECK(plan.train == std::vector<std::size_t>{9, 5, 7, 8});
}

TEST_CASE("split determinism and seed sensitivity") {
    auto ds = label_only_dataset(100, 40);
    auto a = split_dataset(ds, 20, 20, 5);
    auto b = split_dataset(ds, 20, 20, 5);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    auto c = split_dataset(ds, 20, 20, 6);
    CHECK(a.val != c.val);
}

TEST_CASE("split rejects oversubscription, allows empty validation") {
    auto ds = label_only_dataset(10, 5);
    CHECK_THROWS_AS(split_dataset(ds, 5, 5, 1), UsageError);
    CHECK_THROWS_AS(split_dataset(ds, 8, 3, 1), UsageError);
    auto plan = split_dataset(ds, 0, 3, 1);
    CHECK(plan.val.empty());
    CHECK(plan.train.size() == 7);
    plan.validate(10);
}

TEST_CASE("stratified split honors largest-remainder quotas") {
    // 4 negatives + 6 positives, 5 validation slots -> exactly 2 + 3
    auto ds = label_only_dataset(10, 6);
    auto plan = split_dataset(ds, 5, 2, 11, true);
    plan.validate(10);
    int val_pos = 0;
    for (auto i : plan.val) val_pos += ds.samples[i].label;
    CHECK(plan.val.size() == 5);
    CHECK(val_pos == 3);

    // remainder tie: 3 negatives + 7 positives, 5 slots -> quotas 2 + 3
    auto ds2 = label_only_dataset(10, 7);
    auto plan2 = split_dataset(ds2, 5, 2, 11, true);
    plan2.validate(10);
    int val_pos2 = 0;
    for (auto i : plan2.val) val_pos2 += ds2.samples[i].label;
    CHECK(val_pos2 == 3);

    // both splits cannot draw two samples from a one-sample class
    auto ds3 = label_only_dataset(100, 99);
    CHECK_THROWS_AS(split_dataset(ds3, 50, 50, 11, true), UsageError);
}

TEST_CASE("split plan json round trip") {
    auto ds = label_only_dataset(30, 10);
    auto plan = split_dataset(ds, 5, 5, 99);
    auto back = SplitPlan::from_json(plan.to_json());
    CHECK(back.seed == plan.seed);
    CHECK(back.n_val == plan.n_val);
    CHECK(back.n_test == plan.n_test);
    CHECK(back.train == plan.train);
    CHECK(back.val == plan.val);
    CHECK(back.test == plan.test);

    const auto dir = fresh_dir("splitjson");
    save_split(plan, (dir / "split.json").string());
    auto loaded = load_split((dir / "split.json").string());
    CHECK(loaded.train == plan.train);
    CHECK(loaded.val == plan.val);
    CHECK(loaded.test == plan.test);

    CHECK_THROWS_AS(SplitPlan::from_json(nlohmann::json{{"seed", 1}}), DataError);
    CHECK_THROWS_AS(load_split((dir / "nope.json").string()), DataError);
    write_file(dir / "garbage.json", "{not json");
    CHECK_THROWS_AS(load_split((dir / "garbage.json").string()), DataError);
}

TEST_CASE("split plan validation catches tampering") {
    auto ds = label_only_dataset(12, 6);
    auto plan = split_dataset(ds, 3, 3, 4);
    auto dup = plan;
    dup.train[0] = dup.val[0];
    CHECK_THROWS_AS(dup.validate(12), DataError);
    auto out_of_range = plan;
    out_of_range.test[0] = 50;
    CHECK_THROWS_AS(out_of_range.validate(12), DataError);
    auto short_plan = plan;
    short_plan.train.pop_back();
    CHECK_THROWS_AS(short_plan.validate(12), DataError);
    CHECK_THROWS_AS(plan.validate(13), DataError);
}

TEST_CASE("dataset subset keeps order and rejects bad indices") {
    auto ds = label_only_dataset(5, 2);
    for (std::size_t i = 0; i < 5; ++i) ds.samples[i].values = {float(i)};
    auto sub = ds.subset({3, 0, 4});
    REQUIRE(sub.size() == 3);
    CHECK(sub.samples[0].values[0] == 3.0f);
    CHECK(sub.samples[1].values[0] == 0.0f);
    CHECK(sub.samples[2].values[0] == 4.0f);
    CHECK_THROWS_AS(ds.subset({5}), UsageError);
}

TEST_CASE("synthetic dataset alternates labels and reproduces from its seed") {
    auto ds = make_synthetic_dataset(6, 16, 16, 9);
    REQUIRE(ds.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(ds.samples[i].label == int(i % 2));
    CHECK(ds.class_counts() == std::pair<std::int64_t, std::int64_t>{3, 3});

    auto again = make_synthetic_dataset(6, 16, 16, 9);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(again.samples[i].values == ds.samples[i].values);

    auto other = make_synthetic_dataset(6, 16, 16, 10);
    CHECK(other.samples[0].values != ds.samples[0].values);

    CHECK_THROWS_AS(make_synthetic_dataset(0, 16, 16, 9), UsageError);
}

TEST_CASE("synthetic files round trip through the manifest loader bit-exactly") {
    const auto dir = fresh_dir("synth");
    const std::string manifest = write_synthetic_dataset(dir.string(), 8, 12, 12, 33);
    auto from_files = load_manifest(manifest);
    auto in_memory = make_synthetic_dataset(8, 12, 12, 33);
    REQUIRE(from_files.size() == in_memory.size());
    for (std::size_t i = 0; i < from_files.size(); ++i) {
        CHECK(from_files.samples[i].label == in_memory.samples[i].label);
        CHECK(from_files.samples[i].values == in_memory.samples[i].values);
    }
}

TEST_CASE("synthetic classes are visually distinct in pixel statistics") {
    // class 1 concentrates brightness into few large blobs; a crude high-value
    // pixel count separates the classes on average, which is what makes the
    // dataset learnable at all
    auto ds = make_synthetic_dataset(40, 32, 32, 123);
    double bright[2] = {0, 0};
    int n[2] = {0, 0};
    for (const auto& s : ds.samples) {
        int hot = 0;
        for (float v : s.values) hot += v > 0.5f;
        bright[s.label] += hot;
        n[s.label] += 1;
    }
    CHECK(bright[1] / n[1] > bright[0] / n[0] * 1.2);
}
