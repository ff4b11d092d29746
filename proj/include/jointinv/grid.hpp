#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "jointinv/errors.hpp"

namespace jointinv {

// Uniform (M+1) x (M+1) nodal grid on [0,1] x [y_offset, y_offset+1].
// The diffusion experiments live on the unit square (y_offset = 0); the wave
// experiments use y in [-1,0] (y_offset = -1). Basis evaluations always use
// the shifted ordinate z = y - y_offset in [0,1].
struct Grid {
    int m = 0;              // number of cells per side
    double y_offset = 0.0;  // y coordinate of the j = 0 row

    int nodes_per_side() const { return m + 1; }
    std::size_t num_nodes() const { return static_cast<std::size_t>(m + 1) * (m + 1); }
    double h() const { return 1.0 / m; }
    double x(int i) const { return i * h(); }
    double y(int j) const { return y_offset + j * h(); }
    double z(int j) const { return j * h(); }

    bool operator==(const Grid&) const = default;
};

// Nodal scalar field, row-major by (i, j): index = i*(M+1) + j, where i walks
// x and j walks y.
struct ScalarField {
    Grid grid;
    std::vector<double> values;

    ScalarField() = default;
    explicit ScalarField(Grid g, double fill = 0.0)
        : grid(g), values(g.num_nodes(), fill) {}

    double& at(int i, int j) { return values[static_cast<std::size_t>(i) * (grid.m + 1) + j]; }
    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * (grid.m + 1) + j]; }
};

// Band-limited cosine expansion, modes k = (kx, kz) with 0 <= kx, kz <= K,
// flattened row-major by (kx, kz). `offset` is an additive constant applied
// at synthesis; analysis folds any constant into the (0,0) coefficient and
// reports offset = 0.
struct SpectralCoeffs {
    int kmax = 0;
    double offset = 0.0;
    std::vector<double> values;

    SpectralCoeffs() = default;
    explicit SpectralCoeffs(int k)
        : kmax(k), values(static_cast<std::size_t>(k + 1) * (k + 1), 0.0) {}

    double& at(int kx, int kz) { return values[static_cast<std::size_t>(kx) * (kmax + 1) + kz]; }
    double at(int kx, int kz) const { return values[static_cast<std::size_t>(kx) * (kmax + 1) + kz]; }
    int dim() const { return (kmax + 1) * (kmax + 1); }
};

// Trapezoidal quadrature weight of node (i,j), including the cell area h^2.
// Corner nodes weigh h^2/4, edge nodes h^2/2, interior nodes h^2.
inline double trapezoid_weight(const Grid& g, int i, int j) {
    double w = g.h() * g.h();
    if (i == 0 || i == g.m) w *= 0.5;
    if (j == 0 || j == g.m) w *= 0.5;
    return w;
}

// Trapezoidal L2 norm over the grid.
inline double l2_norm(const ScalarField& f) {
    double s = 0.0;
    for (int i = 0; i <= f.grid.m; ++i)
        for (int j = 0; j <= f.grid.m; ++j) {
            double v = f.at(i, j);
            s += trapezoid_weight(f.grid, i, j) * v * v;
        }
    return std::sqrt(s);
}

inline ScalarField operator-(const ScalarField& a, const ScalarField& b) {
    if (a.grid != b.grid) throw ConfigError("field difference: grids differ");
    ScalarField out(a.grid);
    for (std::size_t n = 0; n < a.values.size(); ++n) out.values[n] = a.values[n] - b.values[n];
    return out;
}

}  // namespace jointinv
