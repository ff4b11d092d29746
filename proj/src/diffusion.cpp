#include "jointinv/diffusion.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <string>

#include "jointinv/errors.hpp"

namespace jointinv::diffusion {

namespace {

using SpMat = Eigen::SparseMatrix<double>;
using Vec = Eigen::VectorXd;

inline int node(const Grid& g, int i, int j) { return i * (g.m + 1) + j; }

// Local P1 stiffness of the two right triangles of a cell, diagonal a-c:
//   T1 = (a, b, c) = ((i,j), (i+1,j), (i+1,j+1)),
//   T2 = (a, c, d) = ((i,j), (i+1,j+1), (i,j+1)).
// Both are independent of h in 2D.
constexpr double kT1[3][3] = {{0.5, -0.5, 0.0}, {-0.5, 1.0, -0.5}, {0.0, -0.5, 0.5}};
constexpr double kT2[3][3] = {{0.5, 0.0, -0.5}, {0.0, 0.5, -0.5}, {-0.5, -0.5, 1.0}};

// Filled in place by assemble(); SimplicialLDLT is not movable.
struct Assembly {
    SpMat A;
    Eigen::SimplicialLDLT<SpMat> factor;
    std::vector<double> lump;         // lumped nodal areas (sum of |T|/3)
    std::vector<double> robin_lump;   // lumped boundary-edge weights (no ell)
};

void check_coercivity(const ScalarField& gamma) {
    double lo = gamma.values.empty() ? -1.0
                                     : *std::min_element(gamma.values.begin(), gamma.values.end());
    if (!(lo > 0.0))
        throw NumericalError("diffusion solve: gamma must be strictly positive (min = " +
                             std::to_string(lo) + ")");
}

// Visit both triangles of every cell: cb(nodes[3], unit_stiffness).
template <class F>
void for_each_triangle(const Grid& g, F&& cb) {
    for (int i = 0; i < g.m; ++i)
        for (int j = 0; j < g.m; ++j) {
            const int a = node(g, i, j), b = node(g, i + 1, j);
            const int c = node(g, i + 1, j + 1), d = node(g, i, j + 1);
            const int t1[3] = {a, b, c};
            const int t2[3] = {a, c, d};
            cb(t1, kT1);
            cb(t2, kT2);
        }
}

void assemble(const DiffusionProblem& p, Assembly& asm_) {
    check_coercivity(p.gamma);
    const Grid& g = p.grid;
    const int n = static_cast<int>(g.num_nodes());
    const double h = g.h();
    const double tri_area = 0.5 * h * h;

    asm_.lump.assign(n, 0.0);
    asm_.robin_lump.assign(n, 0.0);

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(n) * 8);

    for_each_triangle(g, [&](const int* t, const double(&K)[3][3]) {
        const double gbar =
            (p.gamma.values[t[0]] + p.gamma.values[t[1]] + p.gamma.values[t[2]]) / 3.0;
        for (int r = 0; r < 3; ++r) {
            asm_.lump[t[r]] += tri_area / 3.0;
            for (int c = 0; c < 3; ++c)
                if (K[r][c] != 0.0) trip.emplace_back(t[r], t[c], gbar * K[r][c]);
        }
    });

    // Lumped absorption mass on the diagonal.
    for (int k = 0; k < n; ++k)
        if (p.sigma.values[k] != 0.0) trip.emplace_back(k, k, p.sigma.values[k] * asm_.lump[k]);

    // Lumped Robin edge masses: every boundary edge gives h/2 to each
    // endpoint. Corner nodes sit on two sides and collect from both.
    auto robin_edge = [&](int p0, int p1) {
        asm_.robin_lump[p0] += 0.5 * h;
        asm_.robin_lump[p1] += 0.5 * h;
    };
    for (int i = 0; i < g.m; ++i) {
        robin_edge(node(g, i, 0), node(g, i + 1, 0));          // bottom
        robin_edge(node(g, i, g.m), node(g, i + 1, g.m));      // top
        robin_edge(node(g, 0, i), node(g, 0, i + 1));          // left
        robin_edge(node(g, g.m, i), node(g, g.m, i + 1));      // right
    }
    for (int k = 0; k < n; ++k)
        if (asm_.robin_lump[k] != 0.0) trip.emplace_back(k, k, p.robin_ell * asm_.robin_lump[k]);

    asm_.A.resize(n, n);
    asm_.A.setFromTriplets(trip.begin(), trip.end());
    asm_.factor.compute(asm_.A);
    if (asm_.factor.info() != Eigen::Success) {
        double dmin = 1e300, dmax = 0.0;
        for (int k = 0; k < n; ++k) {
            const double d = std::abs(asm_.A.coeff(k, k));
            dmin = std::min(dmin, d);
            dmax = std::max(dmax, d);
        }
        throw NumericalError(
            "diffusion solve: sparse Cholesky failed; diagonal ratio estimate cond >= " +
            std::to_string(dmax / std::max(dmin, 1e-300)));
    }
}

// Right-hand side for one boundary source (lumped edge quadrature), plus the
// optional volume source.
Vec rhs_for(const DiffusionProblem& p, const Assembly& asm_, const BoundarySource& s) {
    const Grid& g = p.grid;
    const double h = g.h();
    Vec b = Vec::Zero(g.num_nodes());

    auto add_side = [&](const std::vector<double>& prof, auto&& node_of) {
        if (prof.empty()) return;
        if (static_cast<int>(prof.size()) != g.m + 1)
            throw ConfigError("boundary source profile has wrong length");
        for (int e = 0; e < g.m; ++e) {
            b[node_of(e)] += 0.5 * h * prof[e];
            b[node_of(e + 1)] += 0.5 * h * prof[e + 1];
        }
    };
    add_side(s.bottom, [&](int i) { return node(g, i, 0); });
    add_side(s.top, [&](int i) { return node(g, i, g.m); });
    add_side(s.left, [&](int j) { return node(g, 0, j); });
    add_side(s.right, [&](int j) { return node(g, g.m, j); });

    if (!p.volume_source.values.empty())
        for (std::size_t k = 0; k < p.volume_source.values.size(); ++k)
            b[static_cast<Eigen::Index>(k)] += p.volume_source.values[k] * asm_.lump[k];
    return b;
}

ScalarField to_field(const Grid& g, const Vec& v) {
    ScalarField f(g);
    for (std::size_t k = 0; k < f.values.size(); ++k) f.values[k] = v[static_cast<Eigen::Index>(k)];
    return f;
}

}  // namespace

BoundarySource gaussian_side_source(const Grid& grid, Side side) {
    std::vector<double> prof(grid.m + 1);
    for (int i = 0; i <= grid.m; ++i) {
        const double t = grid.x(i) - 0.5;
        prof[i] = std::exp(-t * t / 0.25);
    }
    BoundarySource s;
    switch (side) {
        case Side::bottom: s.bottom = prof; break;
        case Side::top: s.top = prof; break;
        case Side::left: s.left = prof; break;
        case Side::right: s.right = prof; break;
    }
    return s;
}

std::vector<BoundarySource> four_side_sources(const Grid& grid) {
    return {gaussian_side_source(grid, Side::bottom), gaussian_side_source(grid, Side::top),
            gaussian_side_source(grid, Side::left), gaussian_side_source(grid, Side::right)};
}

ScalarField solve(const DiffusionProblem& p, int source_index) {
    if (source_index < 0 || source_index >= static_cast<int>(p.sources.size()))
        throw ConfigError("diffusion solve: source index out of range");
    Assembly asm_;
    assemble(p, asm_);
    Vec u = asm_.factor.solve(rhs_for(p, asm_, p.sources[source_index]));
    return to_field(p.grid, u);
}

InternalData internal_data(const DiffusionProblem& p, Exec exec) {
    Assembly asm_;
    assemble(p, asm_);
    const int ns = static_cast<int>(p.sources.size());
    InternalData out;
    out.fields.assign(ns, ScalarField(p.grid));

    // Sources are independent; each writes its own slot. The factorization
    // solve is reentrant (read-only), so this parallelises cleanly.
    auto run = [&](int h) {
        Vec u = asm_.factor.solve(rhs_for(p, asm_, p.sources[h]));
        ScalarField& H = out.fields[h];
        for (std::size_t k = 0; k < H.values.size(); ++k)
            H.values[k] = p.sigma.values[k] * u[static_cast<Eigen::Index>(k)];
    };
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
        for (int h = 0; h < ns; ++h) run(h);
    } else {
        for (int h = 0; h < ns; ++h) run(h);
    }
    return out;
}

Misfit internal_misfit(const DiffusionProblem& p, const InternalData& observed,
                       bool want_gradient, Exec exec) {
    const Grid& g = p.grid;
    const int ns = static_cast<int>(p.sources.size());
    if (static_cast<int>(observed.fields.size()) != ns)
        throw ConfigError("internal_misfit: observation count != source count");
    Assembly asm_;
    assemble(p, asm_);
    const int n = static_cast<int>(g.num_nodes());

    std::vector<double> w(n);  // trapezoid weights of the data norm
    for (int i = 0; i <= g.m; ++i)
        for (int j = 0; j <= g.m; ++j) w[node(g, i, j)] = trapezoid_weight(g, i, j);

    struct PerSource {
        double value = 0.0;
        std::vector<double> gg, gs;
    };
    std::vector<PerSource> parts(ns);

    auto run = [&](int h) {
        PerSource& out = parts[h];
        Vec u = asm_.factor.solve(rhs_for(p, asm_, p.sources[h]));
        Vec r(n);  // sigma*u - H
        double val = 0.0;
        for (int k = 0; k < n; ++k) {
            r[k] = p.sigma.values[k] * u[k] - observed.fields[h].values[k];
            val += w[k] * r[k] * r[k];
        }
        out.value = val / (2.0 * ns);
        if (!want_gradient) return;

        // Adjoint: A lambda = -dJ/du; A is symmetric so the same
        // factorization serves.
        Vec rhs(n);
        for (int k = 0; k < n; ++k) rhs[k] = -(p.sigma.values[k] * w[k] * r[k]) / ns;
        Vec lam = asm_.factor.solve(rhs);

        out.gg.assign(n, 0.0);
        out.gs.assign(n, 0.0);
        for (int k = 0; k < n; ++k)
            out.gs[k] = (w[k] * u[k] * r[k]) / ns + asm_.lump[k] * u[k] * lam[k];
        // d/dgamma of the stiffness: each triangle's mean-gamma weight
        // spreads 1/3 to its three vertices.
        for_each_triangle(g, [&](const int* t, const double(&K)[3][3]) {
            double s = 0.0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) s += lam[t[a]] * K[a][b] * u[t[b]];
            for (int a = 0; a < 3; ++a) out.gg[t[a]] += s / 3.0;
        });
    };

    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
        for (int h = 0; h < ns; ++h) run(h);
    } else {
        for (int h = 0; h < ns; ++h) run(h);
    }

    // Fixed-order combination across sources keeps the result independent of
    // the thread count.
    Misfit m;
    m.grad_gamma = ScalarField(g);
    m.grad_sigma = ScalarField(g);
    for (int h = 0; h < ns; ++h) {
        m.value += parts[h].value;
        if (!want_gradient) continue;
        for (int k = 0; k < n; ++k) {
            m.grad_gamma.values[k] += parts[h].gg[k];
            m.grad_sigma.values[k] += parts[h].gs[k];
        }
    }
    return m;
}

}  // namespace jointinv::diffusion
