#include "jointinv/wave.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "jointinv/errors.hpp"

namespace jointinv::wave {

namespace {

// The periodic seam makes column M a copy of column 0, so the marching state
// lives on a reduced grid of mx = M columns and my = M+1 rows, j-major:
// k = j*mx + i. Face coefficients b = 1/rho are arithmetic means of 1/rho
// (harmonic means of rho); the ghost faces used by the Neumann rows reuse
// the boundary node's own rho.
struct Stencil {
    int mx = 0, my = 0;
    double inv_dx2 = 0.0, inv_dy2 = 0.0;
    std::vector<double> kappa, inv_rho;
    std::vector<double> bx;    // face (i,j)->(i+1 mod mx, j), all nodes
    std::vector<double> by;    // face (i,j)->(i,j+1), j < my-1
    std::vector<double> bbot;  // ghost face below row 0
    std::vector<double> btop;  // ghost face above row my-1

    int at(int i, int j) const { return j * mx + i; }
};

template <class F>
void for_nodes(int n, Exec exec, F&& f) {
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
        for (int k = 0; k < n; ++k) f(k);
    } else {
        for (int k = 0; k < n; ++k) f(k);
    }
}

Stencil make_stencil(const WaveProblem& p) {
    const Grid& g = p.grid;
    if (g.m < 2) throw ConfigError("wave: grid must have at least 2 cells per side");
    Stencil s;
    s.mx = g.m;
    s.my = g.m + 1;
    s.inv_dx2 = 1.0 / (g.h() * g.h());
    s.inv_dy2 = s.inv_dx2;
    const int n = s.mx * s.my;
    s.kappa.resize(n);
    s.inv_rho.resize(n);
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i < s.mx; ++i) {
            const double k = p.kappa.at(i, j);
            const double r = p.rho.at(i, j);
            if (!(k > 0.0) || !(r > 0.0))
                throw NumericalError("wave: kappa and rho must be strictly positive");
            s.kappa[s.at(i, j)] = k;
            s.inv_rho[s.at(i, j)] = 1.0 / r;
        }
    s.bx.resize(n);
    s.by.resize(static_cast<std::size_t>(s.mx) * (s.my - 1));
    s.bbot.resize(s.mx);
    s.btop.resize(s.mx);
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i < s.mx; ++i) {
            const int ip = (i + 1) % s.mx;
            s.bx[s.at(i, j)] = 0.5 * (s.inv_rho[s.at(i, j)] + s.inv_rho[s.at(ip, j)]);
            if (j + 1 < s.my)
                s.by[s.at(i, j)] = 0.5 * (s.inv_rho[s.at(i, j)] + s.inv_rho[s.at(i, j + 1)]);
        }
    for (int i = 0; i < s.mx; ++i) {
        s.bbot[i] = s.inv_rho[s.at(i, 0)];
        s.btop[i] = s.inv_rho[s.at(i, s.my - 1)];
    }
    return s;
}

// Largest local signal speed seen by the stencil: c^2 = kappa * b over the
// faces adjacent to each node (ghost faces included).
double max_speed(const Stencil& s) {
    double c2 = 0.0;
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i < s.mx; ++i) {
            const int im = (i + s.mx - 1) % s.mx;
            double b = std::max(s.bx[s.at(i, j)], s.bx[s.at(im, j)]);
            if (j > 0) b = std::max(b, s.by[s.at(i, j - 1)]);
            if (j + 1 < s.my) b = std::max(b, s.by[s.at(i, j)]);
            if (j == 0) b = std::max(b, s.bbot[i]);
            if (j == s.my - 1) b = std::max(b, s.btop[i]);
            c2 = std::max(c2, s.kappa[s.at(i, j)] * b);
        }
    return std::sqrt(c2);
}

double apply_L_at(const Stencil& s, const std::vector<double>& u, int i, int j) {
    const int ip = (i + 1) % s.mx;
    const int im = (i + s.mx - 1) % s.mx;
    const double uc = u[s.at(i, j)];
    double lx = s.bx[s.at(i, j)] * (u[s.at(ip, j)] - uc) -
                s.bx[s.at(im, j)] * (uc - u[s.at(im, j)]);
    lx *= s.inv_dx2;
    double ly;
    if (j == 0) {
        ly = (s.by[s.at(i, 0)] + s.bbot[i]) * (u[s.at(i, 1)] - uc);
    } else if (j == s.my - 1) {
        ly = (s.by[s.at(i, j - 1)] + s.btop[i]) * (u[s.at(i, j - 1)] - uc);
    } else {
        ly = s.by[s.at(i, j)] * (u[s.at(i, j + 1)] - uc) -
             s.by[s.at(i, j - 1)] * (uc - u[s.at(i, j - 1)]);
    }
    ly *= s.inv_dy2;
    return lx + ly;
}

// Transpose of apply_L in the plain Euclidean inner product. Only the
// vertical part is asymmetric (the ghost closure doubles the off-diagonal of
// the boundary rows), so rows 0,1 and my-2,my-1 differ from apply_L.
double apply_LT_at(const Stencil& s, const std::vector<double>& v, int i, int j) {
    const int ip = (i + 1) % s.mx;
    const int im = (i + s.mx - 1) % s.mx;
    const double vc = v[s.at(i, j)];
    double lx = s.bx[s.at(i, j)] * (v[s.at(ip, j)] - vc) -
                s.bx[s.at(im, j)] * (vc - v[s.at(im, j)]);
    lx *= s.inv_dx2;

    const int top = s.my - 1;
    double ly = 0.0;
    if (j == 0) {
        ly = -(s.by[s.at(i, 0)] + s.bbot[i]) * vc + s.by[s.at(i, 0)] * v[s.at(i, 1)];
    } else if (j == top) {
        ly = s.by[s.at(i, top - 1)] * v[s.at(i, top - 1)] -
             (s.by[s.at(i, top - 1)] + s.btop[i]) * vc;
    } else {
        double lower = s.by[s.at(i, j - 1)] * v[s.at(i, j - 1)];
        if (j == 1) lower += s.bbot[i] * v[s.at(i, 0)];
        double upper = s.by[s.at(i, j)] * v[s.at(i, j + 1)];
        if (j == top - 1) upper += s.btop[i] * v[s.at(i, top)];
        ly = lower - (s.by[s.at(i, j - 1)] + s.by[s.at(i, j)]) * vc + upper;
    }
    ly *= s.inv_dy2;
    return lx + ly;
}

void check_problem(const WaveProblem& p, const Stencil& s) {
    for (const auto& src : p.sources)
        if (static_cast<int>(src.profile.size()) != p.grid.m + 1)
            throw ConfigError("wave: source profile must have M+1 entries");
    const double cmax = max_speed(s);
    const double bound = p.cfl_safety * p.grid.h() / (std::numbers::sqrt2 * cmax);
    if (p.dt > bound * (1.0 + 1e-12))
        throw NumericalError("wave: CFL violated, dt = " + std::to_string(p.dt) +
                             " exceeds admissible dt = " + std::to_string(bound));
}

// Source injection for the ghost-closed top row: q = kappa * 2 S(t,x) / dy.
void add_source(const Stencil& s, const TimeSource& src, double t, double dy,
                std::vector<double>& accum) {
    const double env = src.envelope_at(t);
    if (env == 0.0) return;
    const int top = s.my - 1;
    for (int i = 0; i < s.mx; ++i)
        accum[s.at(i, top)] += s.kappa[s.at(i, top)] * 2.0 * env * src.profile[i] / dy;
}

// One leapfrog step: unew = 2u - uold + dt^2 (kappa L u + q(t_n)).
void step(const Stencil& s, const TimeSource& src, double t, double dt, double dy,
          const std::vector<double>& uold, const std::vector<double>& u,
          std::vector<double>& unew, Exec exec) {
    const double dt2 = dt * dt;
    const double env = src.envelope_at(t);
    const int top = s.my - 1;
    for_nodes(s.mx * s.my, exec, [&](int k) {
        const int j = k / s.mx;
        const int i = k - j * s.mx;
        double acc = s.kappa[k] * apply_L_at(s, u, i, j);
        if (j == top && env != 0.0)
            acc += s.kappa[k] * 2.0 * env * src.profile[i] / dy;
        unew[k] = 2.0 * u[k] - uold[k] + dt2 * acc;
    });
}

std::vector<std::vector<double>> march(const WaveProblem& p, const Stencil& s,
                                       int source_index, Exec exec) {
    if (source_index < 0 || source_index >= static_cast<int>(p.sources.size()))
        throw ConfigError("wave: source index out of range");
    const TimeSource& src = p.sources[source_index];
    const int n_steps = p.steps();
    const int n = s.mx * s.my;
    const double dy = p.grid.h();

    std::vector<std::vector<double>> states(n_steps + 1, std::vector<double>(n, 0.0));
    // Second-order start from zero initial data: u^1 = (dt^2/2) q(0).
    std::vector<double> q0(n, 0.0);
    add_source(s, src, 0.0, dy, q0);
    for (int k = 0; k < n; ++k) states[1][k] = 0.5 * p.dt * p.dt * q0[k];
    for (int nstep = 1; nstep < n_steps; ++nstep)
        step(s, src, nstep * p.dt, p.dt, dy, states[nstep - 1], states[nstep],
             states[nstep + 1], exec);
    return states;
}

ScalarField to_full(const Grid& g, const Stencil& s, const std::vector<double>& u) {
    ScalarField f(g);
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i <= g.m; ++i) f.at(i, j) = u[s.at(i % s.mx, j)];
    return f;
}

}  // namespace

double TimeSource::envelope_at(double t) const {
    if (envelope == Envelope::step) return 1.0;
    if (t >= ramp_length) return 1.0;
    if (t <= 0.0) return 0.0;
    return 0.5 * (1.0 - std::cos(std::numbers::pi * t / ramp_length));
}

TimeSource standard_source(const Grid& grid) {
    TimeSource s;
    s.profile.resize(grid.m + 1);
    for (int i = 0; i <= grid.m; ++i) {
        const double x = grid.x(i);
        const double a = (x - 0.8) / 0.1;
        const double b = (x - 0.2) / 0.1;
        s.profile[i] = std::exp(-a * a) - std::exp(-b * b);
    }
    return s;
}

int WaveProblem::steps() const {
    if (!(dt > 0.0) || !(t_end > 0.0)) throw ConfigError("wave: dt and t_end must be positive");
    const long long n = std::llround(t_end / dt);
    if (std::abs(static_cast<double>(n) * dt - t_end) > 1e-9 * std::max(1.0, t_end))
        throw ConfigError("wave: t_end must be an integral number of steps of dt");
    return static_cast<int>(n);
}

double admissible_dt(const WaveProblem& p) {
    Stencil s = make_stencil(p);
    return p.cfl_safety * p.grid.h() / (std::numbers::sqrt2 * max_speed(s));
}

BoundaryTrace propagate(const WaveProblem& p, int source_index, Exec exec) {
    Stencil s = make_stencil(p);
    check_problem(p, s);
    auto states = march(p, s, source_index, exec);
    BoundaryTrace tr(p.grid.m, p.steps(), p.dt);
    for (int n = 0; n <= p.steps(); ++n)
        for (int i = 0; i <= p.grid.m; ++i) tr.at(n, i) = states[n][s.at(i % s.mx, 0)];
    return tr;
}

std::vector<ScalarField> propagate_full(const WaveProblem& p, int source_index, Exec exec) {
    Stencil s = make_stencil(p);
    check_problem(p, s);
    auto states = march(p, s, source_index, exec);
    std::vector<ScalarField> out;
    out.reserve(states.size());
    for (const auto& u : states) out.push_back(to_full(p.grid, s, u));
    return out;
}

double discrete_energy(const WaveProblem& p, const ScalarField& u_curr,
                       const ScalarField& u_next) {
    Stencil s = make_stencil(p);
    const double h = p.grid.h();
    std::vector<double> uc(s.mx * s.my), un(s.mx * s.my);
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i < s.mx; ++i) {
            uc[s.at(i, j)] = u_curr.at(i, j);
            un[s.at(i, j)] = u_next.at(i, j);
        }
    // E = 1/2 <m v, v>_w - 1/2 <L u^n, u^{n+1}>_w with m = 1/kappa and the
    // trapezoid weight in y (x is periodic and uniformly weighted).
    double e = 0.0;
    for (int j = 0; j < s.my; ++j)
        for (int i = 0; i < s.mx; ++i) {
            const int k = s.at(i, j);
            const double w = h * h * ((j == 0 || j == s.my - 1) ? 0.5 : 1.0);
            const double v = (un[k] - uc[k]) / p.dt;
            e += 0.5 * w * v * v / s.kappa[k];
            e -= 0.5 * w * un[k] * apply_L_at(s, uc, i, j);
        }
    return e;
}

Misfit trace_misfit(const WaveProblem& p, const std::vector<BoundaryTrace>& observed,
                    bool want_gradient, Exec exec) {
    Stencil s = make_stencil(p);
    check_problem(p, s);
    const int ns = static_cast<int>(p.sources.size());
    if (static_cast<int>(observed.size()) != ns)
        throw ConfigError("trace_misfit: observation count != source count");
    const int n_steps = p.steps();
    const int m = p.grid.m;
    const double dx = p.grid.h();
    const int n = s.mx * s.my;

    Misfit out;
    out.grad_kappa = ScalarField(p.grid);
    out.grad_rho = ScalarField(p.grid);

    // Receiver weight xi_i (trapezoid in x over the full row of M+1 nodes)
    // and time weight tau_n (trapezoid over steps).
    auto xi = [&](int i) { return dx * ((i == 0 || i == m) ? 0.5 : 1.0); };
    auto tau = [&](int nstep) {
        return p.dt * ((nstep == 0 || nstep == n_steps) ? 0.5 : 1.0);
    };

    std::vector<double> gk(n), gr(n);  // reduced-grid accumulators
    for (int h = 0; h < ns; ++h) {
        const auto& H = observed[h];
        if (H.steps != n_steps || H.m != m)
            throw ConfigError("trace_misfit: observed trace shape mismatch");
        auto states = march(p, s, h, exec);

        for (int nstep = 0; nstep <= n_steps; ++nstep) {
            double acc = 0.0;
            for (int i = 0; i <= m; ++i) {
                const double r = states[nstep][s.at(i % s.mx, 0)] - H.at(nstep, i);
                acc += xi(i) * r * r;
            }
            out.value += tau(nstep) * acc / (2.0 * ns);
        }
        if (!want_gradient) continue;

        // dJ/du^n concentrated on the bottom row; receiver M aliases
        // receiver 0 through the periodic seam.
        auto inject_g = [&](int nstep, std::vector<double>& g) {
            std::fill(g.begin(), g.end(), 0.0);
            const double tn = tau(nstep) / ns;
            for (int i = 0; i < s.mx; ++i) {
                double v = xi(i) * (states[nstep][s.at(i, 0)] - H.at(nstep, i));
                if (i == 0) v += xi(m) * (states[nstep][s.at(0, 0)] - H.at(nstep, m));
                g[s.at(i, 0)] = tn * v;
            }
        };

        // Backward leapfrog with the transposed operator:
        //   lam^n = -g^n + 2 lam^{n+1} + dt^2 A^T lam^{n+1} - lam^{n+2}.
        std::vector<double> lam_np2(n, 0.0), lam_np1(n, 0.0), lam_n(n, 0.0), g(n), v(n);
        const double dt2 = p.dt * p.dt;

        // Parameter contributions of constraint n+1 (multiplier mu):
        //   kappa: -c * mu .* (L u^n + B s^n), recovered from the second
        //   time difference of the checkpoints; rho: via the face bilinear
        //   forms on (kappa mu, u^n), gathered per node (no races).
        auto accumulate = [&](const std::vector<double>& mu, int nstep) {
            const auto& u = states[nstep];
            for (int k = 0; k < n; ++k) v[k] = s.kappa[k] * mu[k];
            if (nstep == 0) {
                // Start constraint u^1 = (dt^2/2) kappa (L u^0 + B s^0) with
                // u^0 = 0: its weight dt^2/2 cancels against recovering
                // (L u^0 + B s^0) = 2 u^1/(dt^2 kappa), and rho drops out.
                const auto& u1 = states[1];
                for_nodes(n, exec, [&](int k) { gk[k] -= mu[k] * u1[k] / s.kappa[k]; });
                return;
            }
            const auto& up = states[nstep + 1];
            const auto& um = states[nstep - 1];
            for_nodes(n, exec, [&](int k) {
                gk[k] -= mu[k] * (up[k] - 2.0 * u[k] + um[k]) / s.kappa[k];

                const int j = k / s.mx;
                const int i = k - j * s.mx;
                const int ip = (i + 1) % s.mx;
                const int im = (i + s.mx - 1) % s.mx;
                // d b_face / d rho_node = -1/(2 rho^2) (interior faces) or
                // -1/rho^2 (ghost faces); the outer minus of dJ/dp flips it.
                double acc = 0.0;
                const double uc = u[k], vc = v[k];
                acc += 0.5 * (vc - v[s.at(ip, j)]) * (u[s.at(ip, j)] - uc) * s.inv_dx2;
                acc += 0.5 * (vc - v[s.at(im, j)]) * (u[s.at(im, j)] - uc) * s.inv_dx2;
                if (j + 1 < s.my)
                    acc += 0.5 * (vc - v[s.at(i, j + 1)]) * (u[s.at(i, j + 1)] - uc) * s.inv_dy2;
                if (j > 0)
                    acc += 0.5 * (vc - v[s.at(i, j - 1)]) * (u[s.at(i, j - 1)] - uc) * s.inv_dy2;
                if (j == 0) acc += vc * (u[s.at(i, 1)] - uc) * s.inv_dy2;
                if (j == s.my - 1) acc += vc * (u[s.at(i, s.my - 2)] - uc) * s.inv_dy2;
                const double irho = s.inv_rho[k];
                gr[k] += dt2 * acc * irho * irho;
            });
        };

        std::fill(gk.begin(), gk.end(), 0.0);
        std::fill(gr.begin(), gr.end(), 0.0);

        inject_g(n_steps, g);
        for (int k = 0; k < n; ++k) lam_np1[k] = -g[k];
        accumulate(lam_np1, n_steps - 1);
        for (int nstep = n_steps - 1; nstep >= 1; --nstep) {
            inject_g(nstep, g);
            for_nodes(n, exec, [&](int k) {
                const int j = k / s.mx;
                const int i = k - j * s.mx;
                lam_n[k] = -g[k] + 2.0 * lam_np1[k] + dt2 * apply_LT_at(s, v, i, j) -
                           lam_np2[k];
            });
            // apply_LT consumes v = kappa .* lam_np1, prepared by the last
            // accumulate() call for the same multiplier.
            std::swap(lam_np2, lam_np1);
            std::swap(lam_np1, lam_n);
            accumulate(lam_np1, nstep - 1);
        }

        // Fold the reduced-grid accumulators back to the full grid. The
        // seam column M never enters the scheme, so its gradient is 0.
        for (int i = 0; i <= m; ++i)
            for (int j = 0; j < s.my; ++j) {
                const int k = s.at(i % s.mx, j);
                out.grad_kappa.at(i, j) += (i < s.mx) ? gk[k] : 0.0;
                out.grad_rho.at(i, j) += (i < s.mx) ? gr[k] : 0.0;
            }
    }
    return out;
}

}  // namespace jointinv::wave
