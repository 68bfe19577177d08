#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "decrop/data.hpp"
#include "decrop/io.hpp"
#include "decrop/rng.hpp"

using namespace decrop;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    TempDir() {
        p = fs::temp_directory_path() / ("decrop-test-" + std::to_string(std::rand()) + std::to_string(::getpid()));
        fs::create_directories(p);
    }
    ~TempDir() { fs::remove_all(p); }
};

std::vector<char> read_all(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("tensor container round-trips values and metadata bitwise") {
    TempDir tmp;
    Rng rng(5);
    TensorData a = TensorData::zeros({3, 4});
    for (float& v : a.v) v = float(rng.normal());
    TensorData b = TensorData::zeros({2, 1, 5});
    for (float& v : b.v) v = float(rng.normal());
    json meta = {{"purpose", "test"}, {"count", 2}};
    save_tensors(tmp.p / "c.bin", {{"alpha", a}, {"beta", b}}, meta);

    TensorContainer c = load_tensors(tmp.p / "c.bin");
    REQUIRE(c.blocks.size() == 2);
    REQUIRE(c.blocks[0].first == "alpha");
    REQUIRE(c.get("alpha").shape == Shape{3, 4});
    REQUIRE(c.get("alpha").v == a.v); // bitwise
    REQUIRE(c.get("beta").v == b.v);
    REQUIRE(c.meta.at("purpose") == "test");
    REQUIRE(c.has("beta"));
    REQUIRE_FALSE(c.has("gamma"));
    REQUIRE_THROWS_AS(c.get("gamma"), FormatError);
}

TEST_CASE("container header is a single JSON line followed by LE payload") {
    TempDir tmp;
    TensorData t({2}, {1.0f, -2.5f});
    save_tensors(tmp.p / "c.bin", {{"x", t}});
    std::vector<char> raw = read_all(tmp.p / "c.bin");
    auto nl = std::find(raw.begin(), raw.end(), '\n');
    REQUIRE(nl != raw.end());
    json header = json::parse(std::string(raw.begin(), nl));
    REQUIRE(header.at("format_version") == 1);
    REQUIRE(header.at("dtype") == "f32");
    REQUIRE(header.at("payload_bytes") == 8);
    REQUIRE(header.at("blocks")[0].at("offset") == 0);
    // known little-endian byte pattern: 1.0f = 00 00 80 3f, -2.5f = 00 00 20 c0
    const unsigned char want[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
    REQUIRE(size_t(raw.end() - (nl + 1)) == 8);
    for (int i = 0; i < 8; ++i) REQUIRE((unsigned char)*(nl + 1 + i) == want[i]);
}

TEST_CASE("container rejects truncation, garbage headers, and duplicates") {
    TempDir tmp;
    TensorData t = TensorData::full({4, 4}, 1.5f);
    save_tensors(tmp.p / "c.bin", {{"x", t}});
    std::vector<char> raw = read_all(tmp.p / "c.bin");

    { // truncated payload
        std::ofstream f(tmp.p / "trunc.bin", std::ios::binary);
        f.write(raw.data(), std::streamsize(raw.size() - 7));
    }
    REQUIRE_THROWS_AS(load_tensors(tmp.p / "trunc.bin"), FormatError);

    { // trailing garbage
        std::ofstream f(tmp.p / "extra.bin", std::ios::binary);
        f.write(raw.data(), std::streamsize(raw.size()));
        f << "junk";
    }
    REQUIRE_THROWS_AS(load_tensors(tmp.p / "extra.bin"), FormatError);

    { // mangled header
        std::ofstream f(tmp.p / "bad.bin", std::ios::binary);
        f << "{not json\n";
    }
    REQUIRE_THROWS_AS(load_tensors(tmp.p / "bad.bin"), FormatError);

    REQUIRE_THROWS_AS(load_tensors(tmp.p / "missing.bin"), FormatError);
    REQUIRE_THROWS_AS(save_tensors(tmp.p / "dup.bin", {{"x", t}, {"x", t}}), std::invalid_argument);
}

TEST_CASE("byte swap helper reverses f32 byte order") {
    std::vector<char> buf = {1, 2, 3, 4, 5, 6, 7, 8};
    detail::swap_f32_bytes(buf);
    REQUIRE(buf == std::vector<char>{4, 3, 2, 1, 8, 7, 6, 5});
    detail::swap_f32_bytes(buf);
    REQUIRE(buf == std::vector<char>{1, 2, 3, 4, 5, 6, 7, 8});
}

TEST_CASE("synthetic dataset has the declared shape and range") {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.per_class = 6;
    spec.test_per_class = 3;
    spec.image_size = 8;
    auto [train, test] = make_synthetic_dataset(spec);
    REQUIRE(train.size() == 24);
    REQUIRE(test.size() == 12);
    REQUIRE(train.num_classes == 4);
    REQUIRE(train.images.shape == Shape{24, 3, 8, 8});
    for (float v : train.images.v) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }
    std::vector<int> counts(4, 0);
    for (int y : train.labels) counts[size_t(y)]++;
    REQUIRE(counts == std::vector<int>{6, 6, 6, 6});
    // determinism
    auto [train2, test2] = make_synthetic_dataset(spec);
    REQUIRE(train2.images.v == train.images.v);
    REQUIRE(test2.labels == test.labels);
    // different seed, different pixels
    spec.seed = 99;
    auto [train3, test3] = make_synthetic_dataset(spec);
    REQUIRE(train3.images.v != train.images.v);
}

TEST_CASE("dataset save/load round-trip") {
    TempDir tmp;
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.per_class = 5;
    spec.test_per_class = 2;
    spec.image_size = 8;
    auto [train, test] = make_synthetic_dataset(spec);
    save_dataset(tmp.p / "d.bin", train);
    Dataset back = load_dataset(tmp.p / "d.bin");
    REQUIRE(back.images.v == train.images.v);
    REQUIRE(back.labels == train.labels);
    REQUIRE(back.num_classes == 3);
    REQUIRE(back.split == train.split);
}

TEST_CASE("balanced subsampling: floor(k% per class), minimum one, deterministic") {
    SyntheticSpec spec;
    spec.num_classes = 5;
    spec.per_class = 40;
    spec.test_per_class = 1;
    spec.image_size = 8;
    auto [train, test] = make_synthetic_dataset(spec);

    LimitedDataset lim = subsample_balanced(train, 10.0, 123);
    REQUIRE(lim.size() == 20); // floor(0.10 * 40) = 4 per class
    REQUIRE(lim.per_class_counts == std::vector<int>(5, 4));
    for (size_t i = 1; i < lim.indices.size(); ++i) REQUIRE(lim.indices[i] > lim.indices[i - 1]);
    std::vector<int> counts(5, 0);
    for (int idx : lim.indices) counts[size_t(train.labels[size_t(idx)])]++;
    REQUIRE(counts == std::vector<int>(5, 4));

    // floor would be zero at 1% of 40; the budget still keeps one per class
    LimitedDataset tiny = subsample_balanced(train, 1.0, 123);
    REQUIRE(tiny.per_class_counts == std::vector<int>(5, 1));

    LimitedDataset again = subsample_balanced(train, 10.0, 123);
    REQUIRE(again.indices == lim.indices);
    LimitedDataset other = subsample_balanced(train, 10.0, 124);
    REQUIRE(other.indices != lim.indices);

    REQUIRE_THROWS_AS(subsample_balanced(train, 0.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(subsample_balanced(train, 101.0, 1), std::invalid_argument);

    LimitedDataset full = subsample_balanced(train, 100.0, 5);
    REQUIRE(full.size() == train.size());
}
