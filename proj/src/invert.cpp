#include "jointinv/invert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "json.hpp"

#include "jointinv/diffusion.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/io.hpp"
#include "jointinv/rng.hpp"
#include "jointinv/wave.hpp"

namespace jointinv::invert {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double inf_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

double relative_l2_error(const ScalarField& a, const ScalarField& b) {
    if (a.grid != b.grid) throw ConfigError("relative_l2_error: grids differ");
    const double denom = l2_norm(b);
    if (denom == 0.0) throw ConfigError("relative_l2_error: zero-norm reference field");
    return l2_norm(a - b) / denom;
}

double gradient_check(const Objective& obj, const std::vector<double>& x, int num_dirs,
                      std::uint64_t seed, double step) {
    std::vector<double> g(x.size());
    if (!std::isfinite(obj.eval(x, &g)))
        throw NumericalError("gradient_check: objective not finite at the base point");
    Rng rng(seed, 0);
    double worst = 0.0;
    std::vector<double> xp = x;
    for (int t = 0; t < num_dirs; ++t) {
        std::vector<double> dir(x.size());
        double norm = 0.0;
        for (double& d : dir) {
            d = rng.normal01();
            norm += d * d;
        }
        norm = std::sqrt(norm);
        for (double& d : dir) d /= norm;

        const double analytic = dot(g, dir);
        for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + step * dir[i];
        const double fp = obj.eval(xp, nullptr);
        for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] - step * dir[i];
        const double fm = obj.eval(xp, nullptr);
        const double fd = (fp - fm) / (2.0 * step);
        worst = std::max(worst,
                         std::abs(analytic - fd) / std::max({1e-10, std::abs(analytic),
                                                             std::abs(fd)}));
    }
    return worst;
}

// --- BFGS -----------------------------------------------------------------

namespace {

struct ProbeResult {
    double a = 0.0;
    double f = kInf;
    double dphi = 0.0;
    std::vector<double> x, g;
};

// Strong-Wolfe search along p from (x0, f0, g0); dphi0 = g0 . p < 0, a_init
// is the first trial step. Shared evaluation budget between bracketing and
// zoom. Throws LineSearchStall with the best finite point seen when the
// budget runs out or the bracket degenerates.
ProbeResult wolfe_search(const Objective& obj, const std::vector<double>& x0, double f0,
                         double dphi0, const std::vector<double>& p, double a_init) {
    constexpr double c1 = 1e-4, c2 = 0.9;
    constexpr int budget = 40;
    const std::size_t n = x0.size();

    int evals = 0;
    double best_f = f0;
    std::vector<double> best_x = x0;

    ProbeResult cur, lo, prev;
    auto probe = [&](double a) {
        cur.a = a;
        cur.x.resize(n);
        for (std::size_t i = 0; i < n; ++i) cur.x[i] = x0[i] + a * p[i];
        cur.g.resize(n);
        cur.f = obj.eval(cur.x, &cur.g);
        cur.dphi = std::isfinite(cur.f) ? dot(cur.g, p) : 0.0;
        ++evals;
        if (std::isfinite(cur.f) && cur.f < best_f) {
            best_f = cur.f;
            best_x = cur.x;
        }
    };
    auto stall = [&]() {
        throw LineSearchStall("line search found no acceptable step within 40 evaluations",
                              best_x, best_f);
    };
    auto armijo_fails = [&](const ProbeResult& r) {
        return !std::isfinite(r.f) || r.f > f0 + c1 * r.a * dphi0;
    };
    auto wolfe_holds = [&](const ProbeResult& r) { return std::abs(r.dphi) <= -c2 * dphi0; };
    // Near the minimum the predicted decrease drops below the rounding noise
    // of f itself and strict Armijo can never pass again. Accept curvature
    // points that do not increase f beyond that noise; gradients are computed
    // directly, so the curvature test stays reliable there.
    const double f_noise = 1e-14 * std::abs(f0);
    auto acceptable = [&](const ProbeResult& r) {
        return std::isfinite(r.f) && wolfe_holds(r) && r.f <= f0 + f_noise;
    };

    // zoom keeps the invariant: lo satisfies Armijo and has the lowest such
    // value; the minimizer lies between lo and hi.
    auto zoom = [&](ProbeResult lo_in, double a_hi, double f_hi) -> ProbeResult {
        lo = std::move(lo_in);
        while (evals < budget) {
            const double d = a_hi - lo.a;
            if (std::abs(d) <= 1e-14 * std::max(1.0, std::abs(lo.a))) {
                // The bracket collapsed to machine precision. A positive lo.a
                // is a genuine sufficient decrease, so accept it; the caller's
                // curvature guard skips the BFGS update if it has to.
                if (lo.a > 0.0) return std::move(lo);
                break;
            }
            // Quadratic interpolation through (lo.f, lo.dphi, f_hi), falling
            // back to bisection when the model degenerates or the candidate
            // leaves the safeguarded middle of the bracket.
            double aj = lo.a + 0.5 * d;
            if (std::isfinite(f_hi)) {
                const double curv = (f_hi - lo.f - lo.dphi * d) / (d * d);
                if (curv > 0.0) {
                    const double cand = lo.a - 0.5 * lo.dphi / curv;
                    const double t = (cand - lo.a) / d;
                    if (t >= 0.1 && t <= 0.9) aj = cand;
                }
            }
            probe(aj);
            if (acceptable(cur)) return cur;
            if (armijo_fails(cur) || cur.f >= lo.f) {
                a_hi = aj;
                f_hi = cur.f;
                continue;
            }
            if (wolfe_holds(cur)) return cur;
            if (cur.dphi * (a_hi - lo.a) >= 0.0) {
                a_hi = lo.a;
                f_hi = lo.f;
            }
            lo = cur;
        }
        // Out of budget inside a valid bracket: lo is a genuine decrease but
        // the curvature condition was never met.
        stall();
        return {};  // unreachable
    };

    prev.a = 0.0;
    prev.f = f0;
    prev.dphi = dphi0;
    double a = a_init;
    bool first = true;
    while (evals < budget) {
        probe(a);
        if (acceptable(cur)) return cur;
        if (armijo_fails(cur) || (!first && cur.f >= prev.f)) return zoom(prev, a, cur.f);
        if (wolfe_holds(cur)) return cur;
        if (cur.dphi >= 0.0) return zoom(cur, prev.a, prev.f);
        if (a >= 1e6) break;  // absurdly long step and still going downhill
        prev = cur;
        a *= 2.0;
        first = false;
    }
    stall();
    return {};  // unreachable
}

}  // namespace

BfgsResult bfgs_minimize(const Objective& obj, std::vector<double> x0, double tol_grad,
                         double tol_step, int max_iters) {
    if (!obj.eval) throw ConfigError("bfgs_minimize: empty objective");
    if (static_cast<int>(x0.size()) != obj.dim)
        throw ConfigError("bfgs_minimize: x0 length != objective dimension");
    if (tol_grad < 0.0 || tol_step < 0.0 || max_iters < 0)
        throw ConfigError("bfgs_minimize: negative tolerance or iteration budget");
    const std::size_t n = x0.size();

    BfgsResult res;
    res.x = std::move(x0);
    res.grad.assign(n, 0.0);
    res.value = obj.eval(res.x, &res.grad);
    if (!std::isfinite(res.value))
        throw NumericalError("bfgs_minimize: objective not finite at the initial point");
    double ginf = inf_norm(res.grad);
    res.history.push_back({0, res.value, ginf, 0.0});

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                                  static_cast<Eigen::Index>(n));
    std::vector<double> p(n);
    double prev_decrease = -1.0;  // < 0 until the first step lands
    for (int iter = 1;; ++iter) {
        if (ginf <= tol_grad) {
            res.reason = BfgsResult::Stop::grad_tol;
            break;
        }
        if (iter > max_iters) {
            res.reason = BfgsResult::Stop::max_iters;
            break;
        }

        Eigen::Map<const Eigen::VectorXd> gv(res.grad.data(), static_cast<Eigen::Index>(n));
        Eigen::Map<Eigen::VectorXd> pv(p.data(), static_cast<Eigen::Index>(n));
        pv = -(H * gv);
        double dphi0 = dot(res.grad, p);
        if (dphi0 >= 0.0) {
            // Curvature information went bad; restart from steepest descent.
            H.setIdentity();
            for (std::size_t i = 0; i < n; ++i) p[i] = -res.grad[i];
            dphi0 = -gv.squaredNorm();
            if (dphi0 >= 0.0) {
                res.reason = BfgsResult::Stop::grad_tol;
                break;
            }
        }

        // First trial step: 1 on the opening iteration, afterwards the step
        // that would reproduce the previous decrease on the local quadratic
        // model, capped at 1 so Newton-like steps stay unit-length.
        double a0 = 1.0;
        if (prev_decrease > 0.0) {
            a0 = std::min(1.0, 1.01 * 2.0 * prev_decrease / (-dphi0));
            if (!(a0 > 0.0) || !std::isfinite(a0)) a0 = 1.0;
        }
        const ProbeResult ls = wolfe_search(obj, res.x, res.value, dphi0, p, a0);
        prev_decrease = res.value - ls.f;

        Eigen::VectorXd s(static_cast<Eigen::Index>(n)), y(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            s(static_cast<Eigen::Index>(i)) = ls.x[i] - res.x[i];
            y(static_cast<Eigen::Index>(i)) = ls.g[i] - res.grad[i];
        }
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const double rho = 1.0 / sy;
            const Eigen::VectorXd Hy = H * y;
            H -= rho * (s * Hy.transpose() + Hy * s.transpose());
            H += (rho * rho * y.dot(Hy) + rho) * (s * s.transpose());
        }

        res.x = ls.x;
        res.value = ls.f;
        res.grad = ls.g;
        ginf = inf_norm(res.grad);
        const double snorm = s.norm();
        res.history.push_back({iter, res.value, ginf, snorm});
        if (snorm <= tol_step) {
            res.reason = BfgsResult::Stop::step_tol;
            break;
        }
    }
    return res;
}

// --- misfit at fields -------------------------------------------------------

namespace {

struct FieldMisfit {
    double value = 0.0;
    ScalarField grad_f, grad_g;  // nodal cotangents
};

void check_problem(const Problem& prob, bool need_pullback_g) {
    if (prob.dim_f <= 0 || prob.dim_g <= 0)
        throw ConfigError("inversion problem: parameter dimensions must be positive");
    if (!prob.recipe.build_f || !prob.recipe.build_g)
        throw ConfigError("inversion problem: recipe is missing a field builder");
    if (!prob.recipe.pullback_f)
        throw ConfigError("inversion problem: recipe has no pullback for f");
    if (need_pullback_g && !prob.recipe.pullback_g)
        throw ConfigError("inversion problem: recipe has no pullback for g");
    if (prob.data.empty()) throw ConfigError("inversion problem: no measurement data");
    if (prob.recipe.kind == synth::ForwardRecipe::Kind::diffusion) {
        if (prob.data.size() != 4)
            throw ConfigError("inversion problem: diffusion data needs one array per side");
        for (const auto& arr : prob.data)
            if (arr.size() != prob.recipe.grid.num_nodes())
                throw ConfigError("inversion problem: data length != node count");
    } else {
        wave::WaveProblem tmp;
        tmp.t_end = prob.recipe.t_end;
        tmp.dt = prob.recipe.dt;
        const std::size_t want = (static_cast<std::size_t>(tmp.steps()) + 1) *
                                 static_cast<std::size_t>(prob.recipe.grid.m + 1);
        if (prob.data.size() != 1)
            throw ConfigError("inversion problem: wave data is a single trace");
        if (prob.data[0].size() != want)
            throw ConfigError("inversion problem: trace length != (steps+1)*(M+1)");
    }
}

FieldMisfit misfit_fields(const Problem& prob, const ScalarField& F, const ScalarField& G,
                          bool want_grad, Exec exec) {
    FieldMisfit out;
    if (prob.recipe.kind == synth::ForwardRecipe::Kind::diffusion) {
        diffusion::DiffusionProblem p;
        p.grid = prob.recipe.grid;
        p.gamma = F;
        p.sigma = G;
        p.robin_ell = prob.recipe.robin_ell;
        p.sources = diffusion::four_side_sources(p.grid);
        diffusion::InternalData obs;
        obs.fields.reserve(prob.data.size());
        for (const auto& arr : prob.data) {
            ScalarField fld(p.grid);
            fld.values = arr;
            obs.fields.push_back(std::move(fld));
        }
        diffusion::Misfit m = diffusion::internal_misfit(p, obs, want_grad, exec);
        out.value = m.value;
        out.grad_f = std::move(m.grad_gamma);
        out.grad_g = std::move(m.grad_sigma);
    } else {
        wave::WaveProblem p;
        p.grid = prob.recipe.grid;
        p.rho = F;
        p.kappa = G;
        p.sources = {wave::standard_source(p.grid)};
        p.t_end = prob.recipe.t_end;
        p.dt = prob.recipe.dt;
        std::vector<BoundaryTrace> obs(1, BoundaryTrace(p.grid.m, p.steps(), p.dt));
        obs[0].values = prob.data[0];
        wave::Misfit m = wave::trace_misfit(p, obs, want_grad, exec);
        out.value = m.value;
        out.grad_f = std::move(m.grad_rho);
        out.grad_g = std::move(m.grad_kappa);
    }
    return out;
}

// weight * sum_n w_n max(0, -V_n)^2 and its nodal gradient (accumulated).
double hinge_penalty(const ScalarField& V, double weight, ScalarField* dV) {
    if (weight == 0.0) return 0.0;
    double val = 0.0;
    for (int i = 0; i <= V.grid.m; ++i)
        for (int j = 0; j <= V.grid.m; ++j) {
            const double neg = std::max(0.0, -V.at(i, j));
            if (neg == 0.0) continue;
            const double w = trapezoid_weight(V.grid, i, j);
            val += weight * w * neg * neg;
            if (dV) dV->at(i, j) += -2.0 * weight * w * neg;
        }
    return val;
}

void add_scaled(std::vector<double>& into, const std::vector<double>& v, double s) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += s * v[i];
}

}  // namespace

MisfitResult data_misfit(const Problem& prob, const std::vector<double>& f,
                         const std::vector<double>& g, bool want_grad, Exec exec) {
    check_problem(prob, want_grad);
    MisfitResult out;
    const ScalarField F = prob.recipe.build_f(f);
    const ScalarField G = prob.recipe.build_g(g);
    FieldMisfit fm = misfit_fields(prob, F, G, want_grad, exec);
    out.value = fm.value;
    if (want_grad) {
        out.grad_f = prob.recipe.pullback_f(f, fm.grad_f);
        out.grad_g = prob.recipe.pullback_g(g, fm.grad_g);
    }
    return out;
}

// --- objectives --------------------------------------------------------------

Objective make_phi0(const Problem& prob, const learn::LearnedRelation& rel, Penalties pen,
                    Exec exec) {
    const bool pointwise = rel.variant == learn::LearnedRelation::Variant::pointwise_cubic;
    check_problem(prob, !pointwise);
    if (!pointwise && rel.in_dim() != prob.dim_f)
        throw ConfigError("phi0: relation input dimension != dim_f");
    if (!pointwise && rel.out_dim() != prob.dim_g)
        throw ConfigError("phi0: relation output dimension != dim_g");

    Objective obj;
    obj.dim = prob.dim_f;
    obj.eval = [prob, rel, pen, pointwise, exec](const std::vector<double>& x,
                                                 std::vector<double>* grad) -> double {
        try {
            const ScalarField F = prob.recipe.build_f(x);
            std::vector<double> gpar;
            ScalarField G(F.grid);
            if (pointwise) {
                G.values = rel.predict(F.values);
            } else {
                gpar = rel.predict(x);
                G = prob.recipe.build_g(gpar);
            }
            FieldMisfit fm = misfit_fields(prob, F, G, grad != nullptr, exec);
            ScalarField* dF = grad ? &fm.grad_f : nullptr;
            ScalarField* dG = grad ? &fm.grad_g : nullptr;
            double value = fm.value;
            value += hinge_penalty(F, pen.positivity, dF);
            value += hinge_penalty(G, pen.positivity, dG);
            value += 0.5 * pen.tikhonov * dot(x, x);
            if (!std::isfinite(value)) return kInf;
            if (grad) {
                if (pointwise) {
                    // dG flows back to the f-field through the nodewise map.
                    const std::vector<double> chain = rel.input_vjp(F.values, dG->values);
                    for (std::size_t nn = 0; nn < chain.size(); ++nn)
                        dF->values[nn] += chain[nn];
                    *grad = prob.recipe.pullback_f(x, *dF);
                } else {
                    *grad = prob.recipe.pullback_f(x, *dF);
                    const std::vector<double> dgpar = prob.recipe.pullback_g(gpar, *dG);
                    add_scaled(*grad, rel.input_vjp(x, dgpar), 1.0);
                }
                add_scaled(*grad, x, pen.tikhonov);
            }
            return value;
        } catch (const NumericalError&) {
            return kInf;  // infeasible probe; the line search backs off
        } catch (const ConfigError&) {
            return kInf;  // e.g. a bump width driven nonpositive
        }
    };
    return obj;
}

Objective make_phij(const Problem& prob, const learn::LearnedRelation& rel, double alpha,
                    Penalties pen, Exec exec) {
    const bool pointwise = rel.variant == learn::LearnedRelation::Variant::pointwise_cubic;
    check_problem(prob, true);
    if (alpha < 0.0) throw ConfigError("phij: negative relation weight");
    if (!pointwise && (rel.in_dim() != prob.dim_f || rel.out_dim() != prob.dim_g))
        throw ConfigError("phij: relation dimensions do not match the problem");

    Objective obj;
    obj.dim = prob.dim_f + prob.dim_g;
    const int df = prob.dim_f, dg = prob.dim_g;
    obj.eval = [prob, rel, alpha, pen, pointwise, df, dg,
                exec](const std::vector<double>& x, std::vector<double>* grad) -> double {
        try {
            const std::vector<double> f(x.begin(), x.begin() + df);
            const std::vector<double> g(x.begin() + df, x.end());
            const ScalarField F = prob.recipe.build_f(f);
            const ScalarField G = prob.recipe.build_g(g);
            FieldMisfit fm = misfit_fields(prob, F, G, grad != nullptr, exec);
            ScalarField* dF = grad ? &fm.grad_f : nullptr;
            ScalarField* dG = grad ? &fm.grad_g : nullptr;
            double value = fm.value;
            value += hinge_penalty(F, pen.positivity, dF);
            value += hinge_penalty(G, pen.positivity, dG);
            value += 0.5 * pen.tikhonov * dot(x, x);

            std::vector<double> rel_residual;  // vector relations
            ScalarField field_residual;        // pointwise relations, alpha*w-weighted
            if (alpha > 0.0) {
                if (pointwise) {
                    const std::vector<double> pred = rel.predict(F.values);
                    field_residual = ScalarField(F.grid);
                    for (int i = 0; i <= F.grid.m; ++i)
                        for (int j = 0; j <= F.grid.m; ++j) {
                            const double r = G.at(i, j) -
                                             pred[static_cast<std::size_t>(i) * (F.grid.m + 1) +
                                                  j];
                            const double w = trapezoid_weight(F.grid, i, j);
                            value += 0.5 * alpha * w * r * r;
                            field_residual.at(i, j) = alpha * w * r;
                        }
                } else {
                    rel_residual = rel.predict(f);
                    for (int k = 0; k < dg; ++k) {
                        rel_residual[static_cast<std::size_t>(k)] =
                            g[static_cast<std::size_t>(k)] -
                            rel_residual[static_cast<std::size_t>(k)];
                        value += 0.5 * alpha * rel_residual[static_cast<std::size_t>(k)] *
                                 rel_residual[static_cast<std::size_t>(k)];
                    }
                }
            }
            if (!std::isfinite(value)) return kInf;

            if (grad) {
                if (alpha > 0.0) {
                    if (pointwise) {
                        const std::vector<double> chain =
                            rel.input_vjp(F.values, field_residual.values);
                        for (std::size_t nn = 0; nn < chain.size(); ++nn) {
                            dF->values[nn] -= chain[nn];
                            dG->values[nn] += field_residual.values[nn];
                        }
                    }
                }
                std::vector<double> grad_f = prob.recipe.pullback_f(f, *dF);
                std::vector<double> grad_g = prob.recipe.pullback_g(g, *dG);
                if (alpha > 0.0 && !pointwise) {
                    add_scaled(grad_f, rel.input_vjp(f, rel_residual), -alpha);
                    add_scaled(grad_g, rel_residual, alpha);
                }
                add_scaled(grad_f, f, pen.tikhonov);
                add_scaled(grad_g, g, pen.tikhonov);
                grad->assign(x.size(), 0.0);
                std::copy(grad_f.begin(), grad_f.end(), grad->begin());
                std::copy(grad_g.begin(), grad_g.end(), grad->begin() + df);
            }
            return value;
        } catch (const NumericalError&) {
            return kInf;
        } catch (const ConfigError&) {
            return kInf;
        }
    };
    return obj;
}

// --- staged driver -------------------------------------------------------------

namespace {

void validate_config(const InversionConfig& cfg) {
    if (cfg.J < 1) throw ConfigError("inversion config: J must be >= 1");
    if (cfg.alpha0 < 0.0) throw ConfigError("inversion config: alpha0 must be >= 0");
    if (cfg.tol_grad <= 0.0 || cfg.tol_step <= 0.0)
        throw ConfigError("inversion config: tolerances must be positive");
    if (cfg.max_bfgs_iters < 1) throw ConfigError("inversion config: max_bfgs_iters must be >= 1");
    if (cfg.reg_gamma < 0.0 || cfg.positivity_weight < 0.0)
        throw ConfigError("inversion config: penalty weights must be >= 0");
}

// Runs one stage, recovering from a line-search stall by keeping the best
// iterate the search saw.
std::vector<double> run_stage(const Objective& obj, const std::vector<double>& start,
                              const InversionConfig& cfg, StageResult& st) {
    try {
        BfgsResult r = bfgs_minimize(obj, start, cfg.tol_grad, cfg.tol_step, cfg.max_bfgs_iters);
        st.objective = r.value;
        st.history = std::move(r.history);
        return std::move(r.x);
    } catch (const LineSearchStall& e) {
        st.note = "line search stalled; kept the best iterate";
        std::vector<double> g(e.best_x.size());
        const double v = obj.eval(e.best_x, &g);
        st.objective = v;
        st.history.push_back({0, v, inf_norm(g), 0.0});
        return e.best_x;
    }
}

}  // namespace

InversionReport joint_invert(const Problem& prob, const learn::LearnedRelation& rel,
                             const InversionConfig& cfg, const ScalarField* f_truth,
                             const ScalarField* g_truth, const std::vector<double>* f_init,
                             Exec exec) {
    validate_config(cfg);
    const bool pointwise = rel.variant == learn::LearnedRelation::Variant::pointwise_cubic;
    check_problem(prob, true);

    std::vector<double> x0(static_cast<std::size_t>(prob.dim_f), 0.0);
    if (f_init) {
        if (static_cast<int>(f_init->size()) != prob.dim_f)
            throw ConfigError("joint_invert: f_init length != dim_f");
        x0 = *f_init;
    }

    InversionReport rep;
    rep.cfg = cfg;
    // Penalty weights are relative to the misfit at the initial guess, which
    // fixes their absolute size once per run.
    {
        const Objective probe = make_phi0(prob, rel, Penalties{}, exec);
        rep.data_scale = probe.eval(x0, nullptr);
        if (!std::isfinite(rep.data_scale))
            throw NumericalError("joint_invert: forward model fails at the initial guess");
    }
    rep.penalties.tikhonov = cfg.reg_gamma * rep.data_scale;
    rep.penalties.positivity = cfg.positivity_weight * rep.data_scale;

    auto record_errors = [&](StageResult& st) {
        st.err_f = kNaN;
        st.err_g = kNaN;
        if (f_truth) st.err_f = relative_l2_error(prob.recipe.build_f(st.f), *f_truth);
        if (g_truth) st.err_g = relative_l2_error(prob.recipe.build_g(st.g), *g_truth);
    };

    // Stage one: fhat alone, relation enforced exactly.
    StageResult st0;
    st0.index = 0;
    try {
        const Objective obj0 = make_phi0(prob, rel, rep.penalties, exec);
        st0.f = run_stage(obj0, x0, cfg, st0);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("stage 0: ") + e.what());
    }
    if (pointwise) {
        if (!prob.project_g)
            throw ConfigError("joint_invert: pointwise relation needs project_g to seed ghat");
        const ScalarField F0 = prob.recipe.build_f(st0.f);
        ScalarField G0(F0.grid);
        G0.values = rel.predict(F0.values);
        st0.g = prob.project_g(G0);
        if (static_cast<int>(st0.g.size()) != prob.dim_g)
            throw ConfigError("joint_invert: project_g returned the wrong dimension");
    } else {
        st0.g = rel.predict(st0.f);
    }
    record_errors(st0);
    rep.stages.push_back(std::move(st0));

    // Stages 1..J: alpha halves, the previous pair warm-starts.
    std::vector<double> x(static_cast<std::size_t>(prob.dim_f + prob.dim_g));
    std::copy(rep.stages[0].f.begin(), rep.stages[0].f.end(), x.begin());
    std::copy(rep.stages[0].g.begin(), rep.stages[0].g.end(), x.begin() + prob.dim_f);
    double alpha = cfg.alpha0;
    for (int j = 1; j <= cfg.J; ++j) {
        alpha *= 0.5;
        StageResult st;
        st.index = j;
        st.alpha = alpha;
        try {
            const Objective obj = make_phij(prob, rel, alpha, rep.penalties, exec);
            x = run_stage(obj, x, cfg, st);
        } catch (const NumericalError& e) {
            throw NumericalError("stage " + std::to_string(j) + ": " + e.what());
        }
        st.f.assign(x.begin(), x.begin() + prob.dim_f);
        st.g.assign(x.begin() + prob.dim_f, x.end());
        record_errors(st);
        rep.stages.push_back(std::move(st));
    }
    return rep;
}

void save_report(const std::string& dir, const InversionReport& rep, const Problem& prob) {
    io::ensure_dir(dir);
    nlohmann::ordered_json j;
    j["format"] = "jointinv-report";
    j["version"] = 1;
    j["config"] = {{"J", rep.cfg.J},
                   {"alpha0", rep.cfg.alpha0},
                   {"reg_gamma", rep.cfg.reg_gamma},
                   {"positivity_weight", rep.cfg.positivity_weight},
                   {"tol_grad", rep.cfg.tol_grad},
                   {"tol_step", rep.cfg.tol_step},
                   {"max_bfgs_iters", rep.cfg.max_bfgs_iters},
                   {"K", rep.cfg.K}};
    j["data_scale"] = rep.data_scale;
    j["penalties"] = {{"tikhonov", rep.penalties.tikhonov},
                      {"positivity", rep.penalties.positivity}};
    j["stages"] = nlohmann::ordered_json::array();
    for (const StageResult& st : rep.stages) {
        nlohmann::ordered_json sj;
        sj["index"] = st.index;
        if (st.index > 0)
            sj["alpha"] = st.alpha;
        else
            sj["alpha"] = nullptr;  // stage one enforces the relation exactly
        sj["objective"] = st.objective;
        sj["err_f"] = st.err_f;  // NaN serialises as null
        sj["err_g"] = st.err_g;
        sj["note"] = st.note;
        sj["f"] = st.f;
        sj["g"] = st.g;
        nlohmann::ordered_json hist = nlohmann::ordered_json::array();
        for (const IterRow& r : st.history)
            hist.push_back({{"iter", r.iter},
                            {"value", r.value},
                            {"grad_inf", r.grad_inf},
                            {"step", r.step}});
        sj["history"] = std::move(hist);
        j["stages"].push_back(std::move(sj));
    }
    io::write_text(dir + "/report.json", j.dump(2) + "\n");
    for (const StageResult& st : rep.stages) {
        const std::string tag = "stage" + std::to_string(st.index);
        io::write_field_csv(dir + "/" + tag + "_f.csv", prob.recipe.build_f(st.f));
        io::write_field_csv(dir + "/" + tag + "_g.csv", prob.recipe.build_g(st.g));
    }
}

}  // namespace jointinv::invert
