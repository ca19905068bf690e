#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "prvr/features_io.hpp"

using namespace prvr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("prvr_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

}  // namespace

TEST_CASE("feature file round trip is exact at float32") {
    TempDir tmp;
    // Values chosen representable in float32 so the round trip is the identity.
    Tensor m = Tensor::matrix(3, 4, {1, 2, 3, 4, 0.5, -0.25, 8, -16, 0, 1024, -2, 0.125});
    write_features(tmp.file("m.prvf"), m);
    Tensor back = load_features(tmp.file("m.prvf"));
    REQUIRE(back.shape() == m.shape());
    for (size_t i = 0; i < m.numel(); ++i) CHECK(back.data()[i] == m.data()[i]);
}

TEST_CASE("bad magic, truncation, and trailing bytes are distinct errors") {
    TempDir tmp;
    {
        std::ofstream os(tmp.file("bad.prvf"), std::ios::binary);
        os << "NOPE" << std::string(12, '\0');
    }
    CHECK_THROWS_WITH_AS(load_features(tmp.file("bad.prvf")), doctest::Contains("bad magic"),
                         IoError);

    Tensor m = Tensor::matrix(10, 2, std::vector<double>(20, 1.0));
    write_features(tmp.file("t.prvf"), m);
    // Drop the last row's bytes: header says 10 rows, payload holds 9.
    auto size = fs::file_size(tmp.file("t.prvf"));
    fs::resize_file(tmp.file("t.prvf"), size - 2 * sizeof(float));
    CHECK_THROWS_WITH_AS(load_features(tmp.file("t.prvf")), doctest::Contains("truncated"),
                         IoError);

    write_features(tmp.file("x.prvf"), m);
    {
        std::ofstream os(tmp.file("x.prvf"), std::ios::binary | std::ios::app);
        os << "zz";
    }
    CHECK_THROWS_WITH_AS(load_features(tmp.file("x.prvf")), doctest::Contains("trailing"),
                         IoError);

    CHECK_THROWS_AS(load_features(tmp.file("missing.prvf")), IoError);
}

TEST_CASE("section container preserves order, names, and float64 payloads exactly") {
    TempDir tmp;
    Sections s;
    s.emplace_back("b/second", Tensor::matrix(1, 3, {0.1, 0.2, 0.3}));
    s.emplace_back("a/first", Tensor::matrix(2, 2, {1e-17, 2, 3, 4}));
    write_sections(tmp.file("c.prvs"), s, Dtype::f64);
    Sections back = load_sections(tmp.file("c.prvs"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].first == "b/second");
    CHECK(back[1].first == "a/first");
    for (size_t i = 0; i < 4; ++i) CHECK(back[1].second.data()[i] == s[1].second.data()[i]);

    CHECK_THROWS_WITH_AS(load_sections(tmp.file("missing.prvs")), doctest::Contains("cannot open"),
                         IoError);
}
