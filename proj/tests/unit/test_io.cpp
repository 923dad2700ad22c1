#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "protego/io.hpp"

using namespace protego;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("blob round trip and magic check") {
    TempDir dir("protego_test_blob");
    const std::vector<double> data{1.0, -2.5, 3.25, 1e-300, 6.0, 7.0};
    io::write_blob(dir.path / "a.bin", "PRTGTEST", 3, {2, 3}, data);
    const auto blob = io::read_blob(dir.path / "a.bin", "PRTGTEST");
    CHECK(blob.version == 3u);
    CHECK(blob.dims == std::vector<std::uint64_t>{2, 3});
    CHECK(blob.data == data);
    CHECK_THROWS_AS(io::read_blob(dir.path / "a.bin", "PRTGOTHR"), FormatError);
    CHECK_THROWS_AS(io::write_blob(dir.path / "b.bin", "PRTGTEST", 1, {4}, data), ShapeError);

    const auto bytes = io::read_text(dir.path / "a.bin");
    io::write_text(dir.path / "cut.bin", bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(io::read_blob(dir.path / "cut.bin", "PRTGTEST"), FormatError);
    CHECK_THROWS_AS(io::read_blob(dir.path / "none.bin", "PRTGTEST"), DependencyError);
}

TEST_CASE("png round trip quantizes to 8 bits") {
    TempDir dir("protego_test_png");
    Rng rng(3);
    for (int ch : {1, 3}) {
        const Image img = testing::random_image(9, 13, ch, rng);
        io::write_png(dir.path / "x.png", img);
        const Image back = io::read_png(dir.path / "x.png");
        REQUIRE(back.same_shape(img));
        CHECK(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
        io::write_png(dir.path / "y.png", back);
        CHECK(io::read_png(dir.path / "y.png") == back);
    }
    io::write_text(dir.path / "fake.png", "not a png");
    CHECK_THROWS_AS(io::read_png(dir.path / "fake.png"), FormatError);
}

TEST_CASE("uv png round trip") {
    TempDir dir("protego_test_uv");
    const auto w = sample_world(1, 0, 5, 3, testing::small_world(24));
    const UVMap& uv = w.users[0].query_images[0].uv;
    io::write_uv_png(dir.path / "uv.png", uv);
    const UVMap back = io::read_uv_png(dir.path / "uv.png");
    CHECK(back.mask == uv.mask);
    for (std::size_t p = 0; p < uv.pixel_count(); ++p) {
        if (uv.mask[p]) {
            CHECK(std::abs(back.u[p] - uv.u[p]) <= 0.5 / 65535.0 + 1e-12);
            CHECK(std::abs(back.v[p] - uv.v[p]) <= 0.5 / 65535.0 + 1e-12);
        } else {
            CHECK(back.u[p] == UVMap::kSentinel);
        }
    }
}

TEST_CASE("json and text helpers") {
    TempDir dir("protego_test_json");
    io::json j = {{"a", 1}, {"b", {1.5, 2.5}}};
    io::write_json(dir.path / "j.json", j);
    CHECK(io::read_json(dir.path / "j.json") == j);
    io::write_text(dir.path / "bad.json", "{oops");
    CHECK_THROWS_AS(io::read_json(dir.path / "bad.json"), FormatError);
    CHECK(io::fnv1a_hex("") == "cbf29ce484222325");
    CHECK(io::fnv1a_hex("a") == "af63dc4c8601ec8c");
    io::write_text(dir.path / "t.txt", "a");
    CHECK(io::file_hash(dir.path / "t.txt") == "af63dc4c8601ec8c");
}
