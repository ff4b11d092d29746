#include "jointinv/basis.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "jointinv/errors.hpp"

namespace jointinv::basis {

namespace {

// cos(k*pi*i/M) for k = 0..K, i = 0..M, row-major by (k, i). Shared by the
// x and z directions since the grid is square.
std::vector<double> cosine_table(int kmax, int m) {
    std::vector<double> t(static_cast<std::size_t>(kmax + 1) * (m + 1));
    for (int k = 0; k <= kmax; ++k)
        for (int i = 0; i <= m; ++i)
            t[static_cast<std::size_t>(k) * (m + 1) + i] =
                std::cos(k * std::numbers::pi * i / m);
    return t;
}

// 1 / integral of phi_k^2 over the unit square: 1 for (0,0), 2 when exactly
// one index is zero, 4 when neither is.
double projection_scale(int kx, int kz) {
    return (kx == 0 ? 1.0 : 2.0) * (kz == 0 ? 1.0 : 2.0);
}

}  // namespace

double eigenfunction_value(ModeIndex k, double x, double z) {
    return std::cos(k.kx * std::numbers::pi * x) * std::cos(k.kz * std::numbers::pi * z);
}

double eigenvalue(ModeIndex k) {
    return std::numbers::pi * std::numbers::pi *
           (static_cast<double>(k.kx) * k.kx + static_cast<double>(k.kz) * k.kz);
}

ScalarField synthesize(const SpectralCoeffs& coeffs, const Grid& grid, Exec exec) {
    const int m = grid.m;
    const int kmax = coeffs.kmax;
    const std::vector<double> tab = cosine_table(kmax, m);
    ScalarField out(grid);

    // Each node is an independent output: the OpenMP split is bit-identical
    // to the serial loop for any thread count.
    auto node_value = [&](int i, int j) {
        double s = coeffs.offset;
        for (int kx = 0; kx <= kmax; ++kx) {
            const double cx = tab[static_cast<std::size_t>(kx) * (m + 1) + i];
            double inner = 0.0;
            for (int kz = 0; kz <= kmax; ++kz)
                inner += coeffs.at(kx, kz) * tab[static_cast<std::size_t>(kz) * (m + 1) + j];
            s += cx * inner;
        }
        return s;
    };

    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i <= m; ++i)
            for (int j = 0; j <= m; ++j) out.at(i, j) = node_value(i, j);
    } else {
        for (int i = 0; i <= m; ++i)
            for (int j = 0; j <= m; ++j) out.at(i, j) = node_value(i, j);
    }
    return out;
}

namespace {

// Shared core of analyze/synthesize_transpose: weighted projections
// sum_ij w_ij f_ij phi_k(ij), with w either trapezoid weights (analyze) or
// all ones (transpose). Parallel over modes; the inner node sum runs in a
// fixed order so results do not depend on the thread count.
SpectralCoeffs project(const ScalarField& field, int kmax, bool trapezoid, Exec exec) {
    const Grid& g = field.grid;
    const int m = g.m;
    const std::vector<double> tab = cosine_table(kmax, m);
    SpectralCoeffs out(kmax);

    auto mode_value = [&](int kx, int kz) {
        double s = 0.0;
        for (int i = 0; i <= m; ++i) {
            const double cx = tab[static_cast<std::size_t>(kx) * (m + 1) + i];
            double inner = 0.0;
            for (int j = 0; j <= m; ++j) {
                double w = 1.0;
                if (trapezoid) {
                    w = (i == 0 || i == m) ? 0.5 : 1.0;
                    w *= (j == 0 || j == m) ? 0.5 : 1.0;
                }
                inner += w * field.at(i, j) * tab[static_cast<std::size_t>(kz) * (m + 1) + j];
            }
            s += cx * inner;
        }
        if (trapezoid) s *= g.h() * g.h() * projection_scale(kx, kz);
        return s;
    };

    const int nmodes = (kmax + 1) * (kmax + 1);
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
        for (int k = 0; k < nmodes; ++k)
            out.values[k] = mode_value(k / (kmax + 1), k % (kmax + 1));
    } else {
        for (int k = 0; k < nmodes; ++k)
            out.values[k] = mode_value(k / (kmax + 1), k % (kmax + 1));
    }
    return out;
}

}  // namespace

SpectralCoeffs analyze(const ScalarField& field, int kmax, Exec exec) {
    if (kmax < 0) throw ConfigError("analyze: negative mode count");
    if (field.grid.m < 4 * kmax)
        throw ConfigError("analyze: grid resolution M = " + std::to_string(field.grid.m) +
                          " is below the anti-aliasing bound 4K = " + std::to_string(4 * kmax));
    return project(field, kmax, /*trapezoid=*/true, exec);
}

SpectralCoeffs synthesize_transpose(const ScalarField& grad, int kmax, Exec exec) {
    return project(grad, kmax, /*trapezoid=*/false, exec);
}

}  // namespace jointinv::basis
