#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numbers>

#include "jointinv/basis.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/rng.hpp"

using namespace jointinv;
using basis::ModeIndex;

namespace {

SpectralCoeffs random_coeffs(int kmax, std::uint64_t seed) {
    Rng rng(seed, 0);
    SpectralCoeffs c(kmax);
    for (auto& v : c.values) v = rng.uniform(-1.0, 1.0);
    return c;
}

// Independent projection oracle: plain trapezoid quadrature written from the
// definition, no shared code with basis::analyze.
double oracle_project(const ScalarField& f, int kx, int kz) {
    const Grid& g = f.grid;
    const double h = g.h();
    double s = 0.0;
    for (int i = 0; i <= g.m; ++i)
        for (int j = 0; j <= g.m; ++j) {
            double w = h * h;
            if (i == 0 || i == g.m) w /= 2;
            if (j == 0 || j == g.m) w /= 2;
            s += w * f.at(i, j) * std::cos(kx * std::numbers::pi * g.x(i)) *
                 std::cos(kz * std::numbers::pi * g.z(j));
        }
    double q = 1.0;
    if (kx > 0) q /= 2;
    if (kz > 0) q /= 2;
    return s / q;
}

}  // namespace

TEST_CASE("eigenfunction and eigenvalue frozen values") {
    // cos(0.2 pi) * cos(0.6 pi) = -1/4 exactly.
    CHECK(basis::eigenfunction_value({2, 3}, 0.1, 0.2) == doctest::Approx(-0.25).epsilon(1e-14));
    CHECK(basis::eigenfunction_value({0, 0}, 0.37, 0.91) == 1.0);
    CHECK(basis::eigenvalue({0, 0}) == 0.0);
    CHECK(basis::eigenvalue({1, 2}) == doctest::Approx(5.0 * std::numbers::pi * std::numbers::pi)
                                           .epsilon(1e-15));
}

TEST_CASE("synthesize constant mode and offset") {
    Grid g{8, 0.0};
    SpectralCoeffs c(2);
    c.at(0, 0) = 1.5;
    c.offset = 0.25;
    ScalarField f = basis::synthesize(c, g);
    for (double v : f.values) CHECK(v == doctest::Approx(1.75).epsilon(1e-15));
}

TEST_CASE("analyze inverts synthesize inside the band") {
    Grid g{24, 0.0};
    SpectralCoeffs c = random_coeffs(5, 31);
    ScalarField f = basis::synthesize(c, g);
    SpectralCoeffs back = basis::analyze(f, 5);
    CHECK(back.offset == 0.0);
    for (int k = 0; k < c.dim(); ++k)
        CHECK(back.values[k] == doctest::Approx(c.values[k]).epsilon(1e-8));
}

TEST_CASE("offset folds into the mean mode under analysis") {
    Grid g{16, -1.0};  // wave-domain offset grid: analysis uses z = y + 1
    SpectralCoeffs c = random_coeffs(3, 77);
    c.offset = 0.4;
    ScalarField f = basis::synthesize(c, g);
    SpectralCoeffs back = basis::analyze(f, 3);
    CHECK(back.offset == 0.0);
    CHECK(back.at(0, 0) == doctest::Approx(c.at(0, 0) + 0.4).epsilon(1e-10));
    CHECK(back.at(2, 1) == doctest::Approx(c.at(2, 1)).epsilon(1e-10));
}

TEST_CASE("discrete orthogonality of the modes") {
    Grid g{32, 0.0};
    for (int kx = 0; kx <= 4; ++kx)
        for (int kz = 0; kz <= 4; ++kz) {
            SpectralCoeffs e(4);
            e.at(kx, kz) = 1.0;
            SpectralCoeffs back = basis::analyze(basis::synthesize(e, g), 4);
            for (int qx = 0; qx <= 4; ++qx)
                for (int qz = 0; qz <= 4; ++qz) {
                    const double want = (qx == kx && qz == kz) ? 1.0 : 0.0;
                    CHECK(back.at(qx, qz) == doctest::Approx(want).epsilon(1e-12));
                }
        }
}

TEST_CASE("analyze agrees with the quadrature oracle off band") {
    // A field that is not band-limited: projections still must match the
    // plain trapezoid definition.
    Grid g{20, 0.0};
    ScalarField f(g);
    for (int i = 0; i <= g.m; ++i)
        for (int j = 0; j <= g.m; ++j)
            f.at(i, j) = std::exp(g.x(i)) * (1.0 + 0.3 * g.z(j) * g.z(j));
    SpectralCoeffs c = basis::analyze(f, 4);
    for (int kx = 0; kx <= 4; ++kx)
        for (int kz = 0; kz <= 4; ++kz)
            CHECK(c.at(kx, kz) ==
                  doctest::Approx(oracle_project(f, kx, kz)).epsilon(1e-12));
}

TEST_CASE("analyze rejects grids below the anti-aliasing bound") {
    Grid g{16, 0.0};
    ScalarField f(g, 1.0);
    CHECK_THROWS_AS((void)basis::analyze(f, 5), ConfigError);
    CHECK_NOTHROW((void)basis::analyze(f, 4));
}

TEST_CASE("serial and parallel kernels are bit-identical") {
    Grid g{40, 0.0};
    SpectralCoeffs c = random_coeffs(6, 5150);
    ScalarField fp = basis::synthesize(c, g, Exec::parallel);
    ScalarField fs = basis::synthesize(c, g, Exec::serial);
    REQUIRE(fp.values.size() == fs.values.size());
    CHECK(std::memcmp(fp.values.data(), fs.values.data(),
                      fp.values.size() * sizeof(double)) == 0);

    SpectralCoeffs ap = basis::analyze(fp, 6, Exec::parallel);
    SpectralCoeffs as = basis::analyze(fp, 6, Exec::serial);
    CHECK(std::memcmp(ap.values.data(), as.values.data(),
                      ap.values.size() * sizeof(double)) == 0);
}

TEST_CASE("synthesize_transpose is the adjoint of synthesize") {
    Grid g{20, 0.0};
    const int kmax = 4;
    SpectralCoeffs c = random_coeffs(kmax, 9);
    Rng rng(10, 0);
    ScalarField w(g);
    for (auto& v : w.values) v = rng.uniform(-1.0, 1.0);

    ScalarField sc = basis::synthesize(c, g);
    SpectralCoeffs st = basis::synthesize_transpose(w, kmax);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t k = 0; k < sc.values.size(); ++k) lhs += sc.values[k] * w.values[k];
    for (int k = 0; k < c.dim(); ++k) rhs += c.values[k] * st.values[k];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}
