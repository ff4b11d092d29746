#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "jointinv/errors.hpp"
#include "jointinv/io.hpp"
#include "jointinv/rng.hpp"

using namespace jointinv;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("jointinv_io_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

ScalarField random_field(int m, double off, std::uint64_t seed) {
    ScalarField f(Grid{m, off});
    Rng rng(seed, 0);
    for (auto& v : f.values) v = rng.uniform(-1.0, 1.0) * std::pow(10.0, rng.uniform(-8.0, 8.0));
    return f;
}

}  // namespace

TEST_CASE("scalar field csv round trip is exact and byte-stable") {
    TempDir td;
    ScalarField f = random_field(9, -1.0, 4);
    const std::string p1 = td.file("f.csv"), p2 = td.file("f2.csv");
    io::write_field_csv(p1, f);
    ScalarField g = io::read_field_csv(p1);
    REQUIRE(g.grid.m == f.grid.m);
    CHECK(g.grid.y_offset == f.grid.y_offset);
    for (std::size_t k = 0; k < f.values.size(); ++k) CHECK(g.values[k] == f.values[k]);
    io::write_field_csv(p2, g);
    CHECK(io::read_text(p1) == io::read_text(p2));
}

TEST_CASE("scalar field binary round trip") {
    TempDir td;
    ScalarField f = random_field(13, 0.0, 5);
    const std::string p = td.file("f.bin");
    io::write_field_bin(p, f);
    ScalarField g = io::read_field_bin(p);
    REQUIRE(g.grid.m == 13);
    for (std::size_t k = 0; k < f.values.size(); ++k) CHECK(g.values[k] == f.values[k]);
    // header is 8 bytes of M plus the payload
    CHECK(std::filesystem::file_size(p) == 8 + f.values.size() * sizeof(double));
}

TEST_CASE("coeffs csv carries the offset row") {
    TempDir td;
    SpectralCoeffs c(3);
    Rng rng(6, 0);
    for (auto& v : c.values) v = rng.uniform(-2.0, 2.0);
    c.offset = 0.125;
    const std::string p1 = td.file("c.csv"), p2 = td.file("c2.csv");
    io::write_coeffs_csv(p1, c);
    SpectralCoeffs d = io::read_coeffs_csv(p1);
    REQUIRE(d.kmax == 3);
    CHECK(d.offset == 0.125);
    for (int k = 0; k < c.dim(); ++k) CHECK(d.values[k] == c.values[k]);
    io::write_coeffs_csv(p2, d);
    CHECK(io::read_text(p1) == io::read_text(p2));
}

TEST_CASE("trace round trips in both formats") {
    TempDir td;
    BoundaryTrace t(6, 11, 0.01);
    Rng rng(7, 0);
    for (auto& v : t.values) v = rng.uniform(-1.0, 1.0);
    io::write_trace_csv(td.file("t.csv"), t);
    BoundaryTrace r = io::read_trace_csv(td.file("t.csv"));
    REQUIRE(r.m == 6);
    REQUIRE(r.steps == 11);
    CHECK(r.dt == 0.01);
    for (std::size_t k = 0; k < t.values.size(); ++k) CHECK(r.values[k] == t.values[k]);

    io::write_trace_bin(td.file("t.bin"), t);
    BoundaryTrace rb = io::read_trace_bin(td.file("t.bin"), 0.01);
    REQUIRE(rb.rows() == 12);
    REQUIRE(rb.cols() == 7);
    for (std::size_t k = 0; k < t.values.size(); ++k) CHECK(rb.values[k] == t.values[k]);
}

TEST_CASE("missing files raise io errors, malformed content config errors") {
    TempDir td;
    CHECK_THROWS_AS((void)io::read_field_csv(td.file("absent.csv")), IoError);
    CHECK_THROWS_AS((void)io::read_trace_bin(td.file("absent.bin"), 0.1), IoError);

    io::write_text(td.file("bad.csv"), "i,j,x,y,value\n0,0,0,0,1\n0,oops,0,0,1\n");
    try {
        (void)io::read_field_csv(td.file("bad.csv"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        // line-precise diagnostics
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
}

TEST_CASE("format_double survives round trip through parse") {
    for (double v : {0.1, -1.0 / 3.0, 1e-300, 123456.789, 0.0}) {
        CHECK(std::stod(io::format_double(v)) == v);
    }
}
