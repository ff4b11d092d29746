#include "jointinv/learn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include <Eigen/Dense>

#include "json.hpp"

#include "jointinv/errors.hpp"
#include "jointinv/io.hpp"

namespace jointinv::learn {

namespace {

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace

// --- polynomial features -----------------------------------------------------

std::vector<std::vector<int>> multi_indices(int d, int n) {
    if (d <= 0 || n < 0) throw ConfigError("multi_indices: need d >= 1, n >= 0");
    std::vector<std::vector<int>> out;
    std::vector<int> exps(static_cast<std::size_t>(d), 0);
    // Distribute `left` over positions pos..d-1, leading position largest
    // first; by degree this emits the graded-lex order.
    auto rec = [&](auto&& self, int pos, int left) -> void {
        if (pos == d - 1) {
            exps[static_cast<std::size_t>(pos)] = left;
            out.push_back(exps);
            return;
        }
        for (int e = left; e >= 0; --e) {
            exps[static_cast<std::size_t>(pos)] = e;
            self(self, pos + 1, left - e);
        }
    };
    for (int deg = 0; deg <= n; ++deg) rec(rec, 0, deg);
    return out;
}

std::size_t num_monomials(int d, int n) {
    // C(d+n, n), computed incrementally so intermediate values stay integral.
    std::size_t r = 1;
    for (int i = 1; i <= n; ++i)
        r = r * static_cast<std::size_t>(d + i) / static_cast<std::size_t>(i);
    return r;
}

std::vector<double> poly_features(const std::vector<double>& fhat, int n) {
    const int d = static_cast<int>(fhat.size());
    if (!all_finite(fhat)) throw ConfigError("poly_features: non-finite input");
    const auto indices = multi_indices(d, n);
    std::vector<double> feats(indices.size());
    for (std::size_t a = 0; a < indices.size(); ++a) {
        double p = 1.0;
        for (int k = 0; k < d; ++k)
            for (int e = 0; e < indices[a][static_cast<std::size_t>(k)]; ++e)
                p *= fhat[static_cast<std::size_t>(k)];
        feats[a] = p;
    }
    return feats;
}

// --- PolynomialRelation --------------------------------------------------------

std::vector<double> PolynomialRelation::predict(const std::vector<double>& fhat) const {
    if (static_cast<int>(fhat.size()) != d)
        throw ConfigError("polynomial predict: input dimension mismatch");
    const std::vector<double> feats = poly_features(fhat, n);
    std::vector<double> out(static_cast<std::size_t>(out_dim), 0.0);
    for (int j = 0; j < out_dim; ++j) {
        double s = 0.0;
        const double* row = theta.data() + static_cast<std::size_t>(j) * feats.size();
        for (std::size_t a = 0; a < feats.size(); ++a) s += row[a] * feats[a];
        out[static_cast<std::size_t>(j)] = s;
    }
    return out;
}

std::vector<double> PolynomialRelation::input_vjp(const std::vector<double>& fhat,
                                                  const std::vector<double>& cot) const {
    if (static_cast<int>(fhat.size()) != d || static_cast<int>(cot.size()) != out_dim)
        throw ConfigError("polynomial input_vjp: dimension mismatch");
    const auto indices = multi_indices(d, n);
    // Contract the cotangent with theta once: w_a = sum_j cot_j theta_{j,a}.
    std::vector<double> w(indices.size(), 0.0);
    for (int j = 0; j < out_dim; ++j) {
        const double* row = theta.data() + static_cast<std::size_t>(j) * indices.size();
        const double c = cot[static_cast<std::size_t>(j)];
        if (c == 0.0) continue;
        for (std::size_t a = 0; a < indices.size(); ++a) w[a] += c * row[a];
    }
    std::vector<double> grad(static_cast<std::size_t>(d), 0.0);
    for (std::size_t a = 0; a < indices.size(); ++a) {
        if (w[a] == 0.0) continue;
        const auto& alpha = indices[a];
        for (int i = 0; i < d; ++i) {
            const int ai = alpha[static_cast<std::size_t>(i)];
            if (ai == 0) continue;
            // dP/df_i = alpha_i * f^(alpha - e_i)
            double p = static_cast<double>(ai);
            for (int k = 0; k < d; ++k) {
                const int e = alpha[static_cast<std::size_t>(k)] - (k == i ? 1 : 0);
                for (int r = 0; r < e; ++r) p *= fhat[static_cast<std::size_t>(k)];
            }
            grad[static_cast<std::size_t>(i)] += w[a] * p;
        }
    }
    return grad;
}

// --- fit_polynomial ------------------------------------------------------------

namespace {

// Mean-over-nodes hinge penalty on the synthesized output field and its
// pullback to the prediction vector.
double bound_penalty(const synth::ForwardRecipe& recipe, const std::vector<double>& ghat,
                     double lo, double hi, std::vector<double>* grad) {
    const ScalarField field = recipe.build_g(ghat);
    const double inv = 1.0 / static_cast<double>(field.values.size());
    double val = 0.0;
    ScalarField cot(field.grid);
    for (std::size_t k = 0; k < field.values.size(); ++k) {
        const double below = std::max(0.0, lo - field.values[k]);
        const double above = std::max(0.0, field.values[k] - hi);
        val += (below * below + above * above) * inv;
        cot.values[k] = 2.0 * (above - below) * inv;
    }
    if (grad) *grad = recipe.pullback_g(ghat, cot);
    return val;
}

}  // namespace

PolynomialRelation fit_polynomial(const synth::TrainingDataset& ds, const PolyFitOptions& opt,
                                  const synth::ForwardRecipe* recipe) {
    const int d = ds.feature_dim;
    const int t_sz = static_cast<int>(ds.train_idx.size());
    if (d <= 0 || t_sz == 0) throw ConfigError("fit_polynomial: empty dataset");
    const std::size_t nf = num_monomials(d, opt.degree);
    // With a positive ridge the normal equations stay full rank even for
    // T < num_monomials; without one the system is genuinely rank-deficient.
    if (opt.ridge <= 0.0 && static_cast<std::size_t>(t_sz) < nf)
        throw NumericalError("fit_polynomial: underdetermined (" + std::to_string(t_sz) +
                             " train samples < " + std::to_string(nf) +
                             " monomials) and no ridge");

    PolynomialRelation rel;
    rel.d = d;
    rel.n = opt.degree;
    rel.out_dim = d;
    rel.g_lo = ds.g_lo;
    rel.g_hi = ds.g_hi;

    // Stage 1: ridge normal equations, one shared Gram for all output rows.
    Eigen::MatrixXd phi(t_sz, static_cast<Eigen::Index>(nf));
    Eigen::MatrixXd y(t_sz, d);
    for (int r = 0; r < t_sz; ++r) {
        const auto& f = ds.f[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(r)])];
        const auto& g = ds.g[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(r)])];
        const std::vector<double> feats = poly_features(f, opt.degree);
        for (std::size_t a = 0; a < nf; ++a) phi(r, static_cast<Eigen::Index>(a)) = feats[a];
        for (int j = 0; j < d; ++j) y(r, j) = g[static_cast<std::size_t>(j)];
    }
    Eigen::MatrixXd gram = phi.transpose() * phi;
    gram.diagonal().array() += opt.ridge;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    if (ldlt.info() != Eigen::Success)
        throw NumericalError("fit_polynomial: normal equations factorization failed");
    const Eigen::MatrixXd coef = ldlt.solve(phi.transpose() * y);  // nf x d

    rel.theta.assign(static_cast<std::size_t>(d) * nf, 0.0);
    for (int j = 0; j < d; ++j)
        for (std::size_t a = 0; a < nf; ++a) {
            double v = coef(static_cast<Eigen::Index>(a), j);
            if (std::abs(v) < opt.threshold) v = 0.0;
            rel.theta[static_cast<std::size_t>(j) * nf + a] = v;
        }
    if (!all_finite(rel.theta)) throw NumericalError("fit_polynomial: non-finite coefficients");
    if (opt.consistency_weight <= 0.0) return rel;

    // Stage 2: minibatch refinement of the full loss. Needs the simulated
    // measurements and a recipe that can pull gradients back to ghat.
    if (!recipe || !recipe->pullback_g)
        throw ConfigError("fit_polynomial: consistency refinement needs a forward recipe");
    if (ds.measurements.empty())
        throw ConfigError("fit_polynomial: consistency refinement needs stored measurements");
    const bool have_bounds = rel.g_hi > rel.g_lo;

    const std::size_t np = rel.theta.size();
    std::vector<double> m(np, 0.0), v(np, 0.0);
    Rng rng = make_rng(opt.seed, SeedPhase::training, 1);
    const int bsz = std::min(opt.minibatch, t_sz);
    for (int it = 1; it <= opt.refine_iters; ++it) {
        std::vector<double> grad(np, 0.0);
        for (int b = 0; b < bsz; ++b) {
            const int k = ds.train_idx[static_cast<std::size_t>(
                rng.next_u64() % static_cast<std::uint64_t>(t_sz))];
            const auto& f = ds.f[static_cast<std::size_t>(k)];
            const auto& g = ds.g[static_cast<std::size_t>(k)];
            const std::vector<double> feats = poly_features(f, opt.degree);
            std::vector<double> pred(static_cast<std::size_t>(d), 0.0);
            for (int j = 0; j < d; ++j) {
                const double* row = rel.theta.data() + static_cast<std::size_t>(j) * nf;
                double s = 0.0;
                for (std::size_t a = 0; a < nf; ++a) s += row[a] * feats[a];
                pred[static_cast<std::size_t>(j)] = s;
            }
            // d(loss)/d(pred): data term, consistency term, bound penalty.
            std::vector<double> dpred(static_cast<std::size_t>(d), 0.0);
            for (int j = 0; j < d; ++j)
                dpred[static_cast<std::size_t>(j)] =
                    pred[static_cast<std::size_t>(j)] - g[static_cast<std::size_t>(j)];
            synth::ConsistencyResult cr = synth::consistency_misfit(
                *recipe, f, pred, ds.measurements[static_cast<std::size_t>(k)]);
            for (int j = 0; j < d; ++j)
                dpred[static_cast<std::size_t>(j)] +=
                    opt.consistency_weight * cr.grad_g[static_cast<std::size_t>(j)];
            if (have_bounds) {
                std::vector<double> bg;
                bound_penalty(*recipe, pred, rel.g_lo, rel.g_hi, &bg);
                for (int j = 0; j < d; ++j)
                    dpred[static_cast<std::size_t>(j)] +=
                        opt.bound_weight * bg[static_cast<std::size_t>(j)];
            }
            // Chain through the linear-in-theta prediction.
            const double inv_b = 1.0 / bsz;
            for (int j = 0; j < d; ++j) {
                const double dj = dpred[static_cast<std::size_t>(j)] * inv_b;
                if (dj == 0.0) continue;
                double* row = grad.data() + static_cast<std::size_t>(j) * nf;
                for (std::size_t a = 0; a < nf; ++a) row[a] += dj * feats[a];
            }
        }
        // Adam step.
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
        for (std::size_t p = 0; p < np; ++p) {
            m[p] = b1 * m[p] + (1.0 - b1) * grad[p];
            v[p] = b2 * v[p] + (1.0 - b2) * grad[p] * grad[p];
            rel.theta[p] -= opt.refine_lr * (m[p] / c1) / (std::sqrt(v[p] / c2) + eps);
        }
        if (!all_finite(rel.theta))
            throw NumericalError("fit_polynomial: refinement diverged at iteration " +
                                 std::to_string(it));
    }
    return rel;
}

// --- Mlp forward/backward ------------------------------------------------------

namespace {

struct Tape {
    // acts[0] is the input; acts[l+1] the output of layer l.
    std::vector<std::vector<double>> acts;
};

std::vector<double> forward_tape(const Mlp& m, const std::vector<double>& x, Tape* tape) {
    if (static_cast<int>(x.size()) != m.in_dim())
        throw ConfigError("mlp forward: input dimension mismatch");
    if (tape) {
        tape->acts.clear();
        tape->acts.push_back(x);
    }
    std::vector<double> cur = x;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const Layer& L = m.layers[l];
        std::vector<double> nxt(static_cast<std::size_t>(L.out));
        for (int r = 0; r < L.out; ++r) {
            double s = L.b[static_cast<std::size_t>(r)];
            const double* wr = L.w.data() + static_cast<std::size_t>(r) * L.in;
            for (int c = 0; c < L.in; ++c) s += wr[c] * cur[static_cast<std::size_t>(c)];
            nxt[static_cast<std::size_t>(r)] = s;
        }
        if (l + 1 < m.layers.size())
            for (double& vv : nxt) vv = std::tanh(vv);
        cur = std::move(nxt);
        if (tape) tape->acts.push_back(cur);
    }
    return cur;
}

// Accumulates parameter gradients into `grads` (same shapes, may be null)
// and returns the cotangent with respect to the input.
std::vector<double> backward_tape(const Mlp& m, const Tape& tape, std::vector<double> cot,
                                  Mlp* grads) {
    for (std::size_t li = m.layers.size(); li-- > 0;) {
        const Layer& L = m.layers[li];
        // Outputs of hidden layers passed through tanh; convert the cotangent
        // on the activation to one on the pre-activation.
        if (li + 1 < m.layers.size()) {
            const std::vector<double>& a = tape.acts[li + 1];
            for (int r = 0; r < L.out; ++r)
                cot[static_cast<std::size_t>(r)] *=
                    1.0 - a[static_cast<std::size_t>(r)] * a[static_cast<std::size_t>(r)];
        }
        const std::vector<double>& in = tape.acts[li];
        if (grads) {
            Layer& G = grads->layers[li];
            for (int r = 0; r < L.out; ++r) {
                const double dz = cot[static_cast<std::size_t>(r)];
                G.b[static_cast<std::size_t>(r)] += dz;
                double* gw = G.w.data() + static_cast<std::size_t>(r) * L.in;
                for (int c = 0; c < L.in; ++c) gw[c] += dz * in[static_cast<std::size_t>(c)];
            }
        }
        std::vector<double> prev(static_cast<std::size_t>(L.in), 0.0);
        for (int r = 0; r < L.out; ++r) {
            const double dz = cot[static_cast<std::size_t>(r)];
            const double* wr = L.w.data() + static_cast<std::size_t>(r) * L.in;
            for (int c = 0; c < L.in; ++c) prev[static_cast<std::size_t>(c)] += wr[c] * dz;
        }
        cot = std::move(prev);
    }
    return cot;
}

Layer make_layer(int in, int out) {
    Layer L;
    L.in = in;
    L.out = out;
    L.w.assign(static_cast<std::size_t>(in) * out, 0.0);
    L.b.assign(static_cast<std::size_t>(out), 0.0);
    return L;
}

void xavier_fill(Layer& L, Rng& rng) {
    const double s = std::sqrt(6.0 / (L.in + L.out));
    for (double& v : L.w) v = rng.uniform(-s, s);
}

Mlp zero_like(const Mlp& m) {
    Mlp z;
    z.layers.reserve(m.layers.size());
    for (const Layer& L : m.layers) z.layers.push_back(make_layer(L.in, L.out));
    return z;
}

void zero_grads(Mlp& g) {
    for (Layer& L : g.layers) {
        std::fill(L.w.begin(), L.w.end(), 0.0);
        std::fill(L.b.begin(), L.b.end(), 0.0);
    }
}

// One Adam update over every parameter of one substructure.
void adam_step(Mlp& p, const Mlp& g, Mlp& m, Mlp& v, double lr, int t) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        auto upd = [&](std::vector<double>& pp, const std::vector<double>& gg,
                       std::vector<double>& mm, std::vector<double>& vv) {
            for (std::size_t i = 0; i < pp.size(); ++i) {
                mm[i] = b1 * mm[i] + (1.0 - b1) * gg[i];
                vv[i] = b2 * vv[i] + (1.0 - b2) * gg[i] * gg[i];
                pp[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
            }
        };
        upd(p.layers[li].w, g.layers[li].w, m.layers[li].w, v.layers[li].w);
        upd(p.layers[li].b, g.layers[li].b, m.layers[li].b, v.layers[li].b);
    }
}

}  // namespace

std::vector<double> Mlp::forward(const std::vector<double>& x) const {
    return forward_tape(*this, x, nullptr);
}

std::vector<double> MlpRelation::predict(const std::vector<double>& fhat) const {
    return predictor.forward(encoder.forward(fhat));
}

std::vector<double> MlpRelation::reconstruct(const std::vector<double>& fhat) const {
    return decoder.forward(encoder.forward(fhat));
}

std::vector<double> MlpRelation::input_vjp(const std::vector<double>& fhat,
                                           const std::vector<double>& cot) const {
    Tape te, tp;
    const std::vector<double> lat = forward_tape(encoder, fhat, &te);
    forward_tape(predictor, lat, &tp);
    const std::vector<double> dlat = backward_tape(predictor, tp, cot, nullptr);
    return backward_tape(encoder, te, dlat, nullptr);
}

MlpRelation init_mlp(int in_dim, int hidden, int latent, Rng& rng) {
    if (in_dim <= 0 || hidden <= 0 || latent <= 0)
        throw ConfigError("init_mlp: dimensions must be positive");
    MlpRelation m;
    m.encoder.layers = {make_layer(in_dim, hidden), make_layer(hidden, latent)};
    m.decoder.layers = {make_layer(latent, hidden), make_layer(hidden, in_dim)};
    m.predictor.layers = {make_layer(latent, hidden), make_layer(hidden, in_dim)};
    // Draw order is fixed: encoder (both layers), decoder hidden, predictor
    // hidden. The decoder and predictor output layers stay at zero so the
    // untrained model predicts 0 and the epoch-0 loss is the data variance.
    xavier_fill(m.encoder.layers[0], rng);
    xavier_fill(m.encoder.layers[1], rng);
    xavier_fill(m.decoder.layers[0], rng);
    xavier_fill(m.predictor.layers[0], rng);
    return m;
}

namespace {

// Mean prediction + reconstruction losses over an index list:
// term2 = mean .5||g - P(E(f))||^2, term3 = mean .5||f - D(E(f))||^2.
std::pair<double, double> data_terms(const MlpRelation& m, const synth::TrainingDataset& ds,
                                     const std::vector<int>& idx) {
    double t2 = 0.0, t3 = 0.0;
    for (int k : idx) {
        const auto& f = ds.f[static_cast<std::size_t>(k)];
        const auto& g = ds.g[static_cast<std::size_t>(k)];
        const std::vector<double> lat = m.encoder.forward(f);
        const std::vector<double> p = m.predictor.forward(lat);
        const std::vector<double> r = m.decoder.forward(lat);
        for (std::size_t j = 0; j < g.size(); ++j) {
            t2 += 0.5 * (g[j] - p[j]) * (g[j] - p[j]);
            t3 += 0.5 * (f[j] - r[j]) * (f[j] - r[j]);
        }
    }
    const double inv = idx.empty() ? 0.0 : 1.0 / static_cast<double>(idx.size());
    return {t2 * inv, t3 * inv};
}

}  // namespace

MlpRelation train_mlp(const synth::TrainingDataset& ds, const TrainOptions& opt,
                      const synth::ForwardRecipe* recipe, std::vector<LossRow>* curve) {
    const int d = ds.feature_dim;
    if (d <= 0 || ds.train_idx.empty()) throw ConfigError("train_mlp: empty train split");
    const bool consistency = opt.consistency_weight > 0.0 && recipe != nullptr;
    if (consistency && ds.measurements.empty())
        throw ConfigError("train_mlp: consistency term needs stored measurements");
    if (consistency && !recipe->pullback_g)
        throw ConfigError("train_mlp: consistency term needs a recipe pullback for g");

    Rng init_rng = make_rng(opt.seed, SeedPhase::training, 0);
    MlpRelation model = init_mlp(d, opt.hidden, opt.latent, init_rng);
    model.g_lo = ds.g_lo;
    model.g_hi = ds.g_hi;

    Mlp ge = zero_like(model.encoder), gd = zero_like(model.decoder),
        gp = zero_like(model.predictor);
    Mlp me = zero_like(ge), ve = zero_like(ge);
    Mlp md = zero_like(gd), vd = zero_like(gd);
    Mlp mp = zero_like(gp), vp = zero_like(gp);

    Rng shuffle_rng = make_rng(opt.seed, SeedPhase::training, 1);
    Rng pair_rng = make_rng(opt.seed, SeedPhase::training, 2);
    const int t_sz = static_cast<int>(ds.train_idx.size());
    const int bsz = std::min(opt.batch, t_sz);
    const int n_pairs = std::min(opt.consistency_pairs, t_sz);

    // Unbiased per-epoch estimate of the consistency term on n_pairs fresh
    // draws, with the gradient accumulated on the predictor/encoder.
    auto consistency_pass = [&](bool want_grad) {
        double est = 0.0;
        for (int s = 0; s < n_pairs; ++s) {
            const int k = ds.train_idx[static_cast<std::size_t>(
                pair_rng.next_u64() % static_cast<std::uint64_t>(t_sz))];
            const auto& f = ds.f[static_cast<std::size_t>(k)];
            Tape te, tp;
            const std::vector<double> lat = forward_tape(model.encoder, f, &te);
            const std::vector<double> pred = forward_tape(model.predictor, lat, &tp);
            synth::ConsistencyResult cr =
                synth::consistency_misfit(*recipe, f, pred,
                                          ds.measurements[static_cast<std::size_t>(k)], want_grad);
            est += cr.value / n_pairs;
            if (want_grad) {
                std::vector<double> dpred = cr.grad_g;
                const double scale = opt.consistency_weight / n_pairs;
                for (double& vv : dpred) vv *= scale;
                const std::vector<double> dlat = backward_tape(model.predictor, tp, dpred, &gp);
                backward_tape(model.encoder, te, dlat, &ge);
            }
        }
        return opt.consistency_weight * est;
    };

    std::vector<LossRow> rows;
    auto record = [&](int epoch, double term1) {
        LossRow row;
        row.epoch = epoch;
        row.term1 = term1;
        std::tie(row.term2, row.term3) = data_terms(model, ds, ds.train_idx);
        auto [v2, v3] = data_terms(model, ds, ds.test_idx);
        row.val_loss = v2 + v3;
        row.train_loss = row.term1 + row.term2 + row.term3;
        if (!std::isfinite(row.train_loss) || !std::isfinite(row.val_loss))
            throw NumericalError("train_mlp: loss diverged at epoch " + std::to_string(epoch));
        rows.push_back(row);
        return row;
    };

    // Epoch 0: the untrained model (consistency estimated but not stepped).
    double best_val = record(0, consistency ? consistency_pass(false) : 0.0).val_loss;
    MlpRelation best = model;
    int stale = 0, t = 0;

    std::vector<int> order = ds.train_idx;
    for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
        for (int i = t_sz - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.next_u64() %
                                           static_cast<std::uint64_t>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        for (int start = 0; start < t_sz; start += bsz) {
            const int stop = std::min(start + bsz, t_sz);
            const double inv_b = 1.0 / (stop - start);
            zero_grads(ge);
            zero_grads(gd);
            zero_grads(gp);
            for (int s = start; s < stop; ++s) {
                const auto& f = ds.f[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
                const auto& g = ds.g[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
                Tape te, tp, td;
                const std::vector<double> lat = forward_tape(model.encoder, f, &te);
                const std::vector<double> p = forward_tape(model.predictor, lat, &tp);
                const std::vector<double> r = forward_tape(model.decoder, lat, &td);
                std::vector<double> dp(p.size()), dr(r.size());
                for (std::size_t j = 0; j < p.size(); ++j) {
                    dp[j] = (p[j] - g[j]) * inv_b;
                    dr[j] = (r[j] - f[j]) * inv_b;
                }
                std::vector<double> dlat = backward_tape(model.predictor, tp, dp, &gp);
                const std::vector<double> dlat2 = backward_tape(model.decoder, td, dr, &gd);
                for (std::size_t j = 0; j < dlat.size(); ++j) dlat[j] += dlat2[j];
                backward_tape(model.encoder, te, dlat, &ge);
            }
            ++t;
            adam_step(model.encoder, ge, me, ve, opt.lr, t);
            adam_step(model.decoder, gd, md, vd, opt.lr, t);
            adam_step(model.predictor, gp, mp, vp, opt.lr, t);
        }

        double term1 = 0.0;
        if (consistency) {
            zero_grads(ge);
            zero_grads(gp);
            term1 = consistency_pass(true);
            ++t;
            adam_step(model.encoder, ge, me, ve, opt.lr, t);
            adam_step(model.predictor, gp, mp, vp, opt.lr, t);
        }

        const LossRow row = record(epoch, term1);
        if (row.val_loss < best_val) {
            best_val = row.val_loss;
            best = model;
            stale = 0;
        } else if (++stale >= opt.patience) {
            break;
        }
    }
    if (curve) *curve = std::move(rows);
    return best;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve) {
    std::ostringstream out;
    out << "epoch,train_loss,val_loss,term1,term2,term3\n";
    for (const LossRow& r : curve)
        out << r.epoch << ',' << io::format_double(r.train_loss) << ','
            << io::format_double(r.val_loss) << ',' << io::format_double(r.term1) << ','
            << io::format_double(r.term2) << ',' << io::format_double(r.term3) << '\n';
    io::write_text(path, out.str());
}

double mlp_gradient_check(const MlpRelation& model, const std::vector<double>& f,
                          const std::vector<double>& g, int num_params, std::uint64_t seed) {
    // Data-term loss only: L = .5||g - P(E(f))||^2 + .5||f - D(E(f))||^2.
    MlpRelation m = model;
    auto loss = [&]() {
        const std::vector<double> lat = m.encoder.forward(f);
        const std::vector<double> p = m.predictor.forward(lat);
        const std::vector<double> r = m.decoder.forward(lat);
        double s = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) s += 0.5 * (g[j] - p[j]) * (g[j] - p[j]);
        for (std::size_t j = 0; j < r.size(); ++j) s += 0.5 * (f[j] - r[j]) * (f[j] - r[j]);
        return s;
    };

    Mlp ge = zero_like(m.encoder), gd = zero_like(m.decoder), gp = zero_like(m.predictor);
    {
        Tape te, tp, td;
        const std::vector<double> lat = forward_tape(m.encoder, f, &te);
        const std::vector<double> p = forward_tape(m.predictor, lat, &tp);
        const std::vector<double> r = forward_tape(m.decoder, lat, &td);
        std::vector<double> dp(p.size()), dr(r.size());
        for (std::size_t j = 0; j < p.size(); ++j) dp[j] = p[j] - g[j];
        for (std::size_t j = 0; j < r.size(); ++j) dr[j] = r[j] - f[j];
        std::vector<double> dlat = backward_tape(m.predictor, tp, dp, &gp);
        const std::vector<double> dlat2 = backward_tape(m.decoder, td, dr, &gd);
        for (std::size_t j = 0; j < dlat.size(); ++j) dlat[j] += dlat2[j];
        backward_tape(m.encoder, te, dlat, &ge);
    }

    // Flat views over (substructure, layer, weight-or-bias, index).
    struct Slot {
        std::vector<double>* param;
        const std::vector<double>* grad;
    };
    std::vector<Slot> slots;
    auto collect = [&](Mlp& params, const Mlp& grads) {
        for (std::size_t li = 0; li < params.layers.size(); ++li) {
            slots.push_back({&params.layers[li].w, &grads.layers[li].w});
            slots.push_back({&params.layers[li].b, &grads.layers[li].b});
        }
    };
    collect(m.encoder, ge);
    collect(m.decoder, gd);
    collect(m.predictor, gp);
    std::size_t total = 0;
    for (const Slot& s : slots) total += s.param->size();

    Rng rng(seed, 0);
    double worst = 0.0;
    const double step = 1e-6;
    for (int trial = 0; trial < num_params; ++trial) {
        std::size_t pick = static_cast<std::size_t>(rng.next_u64() % total);
        std::size_t si = 0;
        while (pick >= slots[si].param->size()) {
            pick -= slots[si].param->size();
            ++si;
        }
        double& p = (*slots[si].param)[pick];
        const double analytic = (*slots[si].grad)[pick];
        const double keep = p;
        p = keep + step;
        const double hi = loss();
        p = keep - step;
        const double lo = loss();
        p = keep;
        const double fd = (hi - lo) / (2.0 * step);
        const double scale = std::max({1.0, std::abs(analytic), std::abs(fd)});
        worst = std::max(worst, std::abs(analytic - fd) / scale);
    }
    return worst;
}

// --- LearnedRelation -------------------------------------------------------

int LearnedRelation::in_dim() const {
    switch (variant) {
        case Variant::polynomial: return poly.d;
        case Variant::mlp: return mlp.in_dim();
        case Variant::pointwise_cubic: return 0;
    }
    return 0;
}

int LearnedRelation::out_dim() const {
    switch (variant) {
        case Variant::polynomial: return poly.out_dim;
        case Variant::mlp: return mlp.out_dim();
        case Variant::pointwise_cubic: return 0;
    }
    return 0;
}

std::vector<double> LearnedRelation::predict(const std::vector<double>& fhat) const {
    switch (variant) {
        case Variant::polynomial: return poly.predict(fhat);
        case Variant::mlp: return mlp.predict(fhat);
        case Variant::pointwise_cubic: {
            std::vector<double> out(fhat.size());
            for (std::size_t i = 0; i < fhat.size(); ++i) {
                const double x = fhat[i];
                out[i] = ((cubic[3] * x + cubic[2]) * x + cubic[1]) * x + cubic[0];
            }
            return out;
        }
    }
    throw ConfigError("LearnedRelation: unknown variant");
}

std::vector<double> LearnedRelation::input_vjp(const std::vector<double>& fhat,
                                               const std::vector<double>& cot) const {
    switch (variant) {
        case Variant::polynomial: return poly.input_vjp(fhat, cot);
        case Variant::mlp: return mlp.input_vjp(fhat, cot);
        case Variant::pointwise_cubic: {
            if (cot.size() != fhat.size())
                throw ConfigError("pointwise input_vjp: dimension mismatch");
            std::vector<double> out(fhat.size());
            for (std::size_t i = 0; i < fhat.size(); ++i) {
                const double x = fhat[i];
                out[i] = cot[i] * ((3.0 * cubic[3] * x + 2.0 * cubic[2]) * x + cubic[1]);
            }
            return out;
        }
    }
    throw ConfigError("LearnedRelation: unknown variant");
}

LearnedRelation make_polynomial_relation(PolynomialRelation poly) {
    LearnedRelation rel;
    rel.variant = LearnedRelation::Variant::polynomial;
    rel.poly = std::move(poly);
    return rel;
}

LearnedRelation make_mlp_relation(MlpRelation mlp) {
    LearnedRelation rel;
    rel.variant = LearnedRelation::Variant::mlp;
    rel.mlp = std::move(mlp);
    return rel;
}

LearnedRelation make_pointwise_cubic(const std::array<double, 4>& coeffs) {
    LearnedRelation rel;
    rel.variant = LearnedRelation::Variant::pointwise_cubic;
    rel.cubic = coeffs;
    return rel;
}

// --- (de)serialisation -------------------------------------------------------

namespace {

const char* variant_name(LearnedRelation::Variant v) {
    switch (v) {
        case LearnedRelation::Variant::polynomial: return "polynomial";
        case LearnedRelation::Variant::mlp: return "mlp";
        case LearnedRelation::Variant::pointwise_cubic: return "pointwise-cubic";
    }
    throw ConfigError("unknown relation variant");
}

nlohmann::ordered_json mlp_shapes(const Mlp& m) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const Layer& L : m.layers) arr.push_back({L.in, L.out});
    return arr;
}

void append_mlp(std::vector<double>& blob, const Mlp& m) {
    for (const Layer& L : m.layers) {
        blob.insert(blob.end(), L.w.begin(), L.w.end());
        blob.insert(blob.end(), L.b.begin(), L.b.end());
    }
}

Mlp mlp_from(const nlohmann::json& shapes, const std::vector<double>& blob, std::size_t& pos,
             const std::string& path) {
    Mlp m;
    for (const auto& s : shapes) {
        Layer L = make_layer(s.at(0).get<int>(), s.at(1).get<int>());
        if (pos + L.w.size() + L.b.size() > blob.size())
            throw ConfigError(path + ": weight blob shorter than the declared shapes");
        std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(pos), L.w.size(), L.w.begin());
        pos += L.w.size();
        std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(pos), L.b.size(), L.b.begin());
        pos += L.b.size();
        m.layers.push_back(std::move(L));
    }
    return m;
}

}  // namespace

void save_relation(const std::string& dir, const LearnedRelation& rel) {
    io::ensure_dir(dir);
    nlohmann::ordered_json man;
    man["format"] = "jointinv-relation";
    man["version"] = 1;
    man["variant"] = variant_name(rel.variant);
    man["provenance"] = rel.provenance;
    std::vector<double> blob;
    switch (rel.variant) {
        case LearnedRelation::Variant::polynomial:
            man["d"] = rel.poly.d;
            man["degree"] = rel.poly.n;
            man["out_dim"] = rel.poly.out_dim;
            man["ordering"] = "graded-lex";
            man["g_lo"] = rel.poly.g_lo;
            man["g_hi"] = rel.poly.g_hi;
            blob = rel.poly.theta;
            break;
        case LearnedRelation::Variant::mlp:
            man["encoder"] = mlp_shapes(rel.mlp.encoder);
            man["decoder"] = mlp_shapes(rel.mlp.decoder);
            man["predictor"] = mlp_shapes(rel.mlp.predictor);
            man["g_lo"] = rel.mlp.g_lo;
            man["g_hi"] = rel.mlp.g_hi;
            append_mlp(blob, rel.mlp.encoder);
            append_mlp(blob, rel.mlp.decoder);
            append_mlp(blob, rel.mlp.predictor);
            break;
        case LearnedRelation::Variant::pointwise_cubic:
            man["coefficients"] = rel.cubic;
            break;
    }
    man["blob_len"] = blob.size();
    io::write_text(dir + "/model.json", man.dump(2) + "\n");
    if (!blob.empty()) io::write_blob(dir + "/weights.bin", {blob.size()}, blob);
}

LearnedRelation load_relation(const std::string& dir) {
    const std::string man_path = dir + "/model.json";
    nlohmann::json man;
    try {
        man = nlohmann::json::parse(io::read_text(man_path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(man_path + ": " + e.what());
    }
    LearnedRelation rel;
    try {
        if (man.at("format") != "jointinv-relation")
            throw ConfigError(man_path + ": not a relation file");
        rel.provenance = man.value("provenance", "");
        const std::string variant = man.at("variant").get<std::string>();
        std::vector<double> blob;
        const std::size_t blob_len = man.at("blob_len").get<std::size_t>();
        if (blob_len > 0) {
            auto [header, payload] = io::read_blob(dir + "/weights.bin", 1);
            if (header[0] != blob_len || payload.size() != blob_len)
                throw ConfigError(dir + "/weights.bin: length does not match the manifest");
            blob = std::move(payload);
        }
        if (variant == "polynomial") {
            rel.variant = LearnedRelation::Variant::polynomial;
            rel.poly.d = man.at("d").get<int>();
            rel.poly.n = man.at("degree").get<int>();
            rel.poly.out_dim = man.at("out_dim").get<int>();
            rel.poly.g_lo = man.at("g_lo").get<double>();
            rel.poly.g_hi = man.at("g_hi").get<double>();
            const std::size_t want =
                static_cast<std::size_t>(rel.poly.out_dim) * num_monomials(rel.poly.d, rel.poly.n);
            if (blob.size() != want)
                throw ConfigError(man_path + ": theta length does not match d/degree");
            rel.poly.theta = std::move(blob);
        } else if (variant == "mlp") {
            rel.variant = LearnedRelation::Variant::mlp;
            std::size_t pos = 0;
            rel.mlp.encoder = mlp_from(man.at("encoder"), blob, pos, man_path);
            rel.mlp.decoder = mlp_from(man.at("decoder"), blob, pos, man_path);
            rel.mlp.predictor = mlp_from(man.at("predictor"), blob, pos, man_path);
            if (pos != blob.size())
                throw ConfigError(man_path + ": weight blob longer than the declared shapes");
            rel.mlp.g_lo = man.at("g_lo").get<double>();
            rel.mlp.g_hi = man.at("g_hi").get<double>();
        } else if (variant == "pointwise-cubic") {
            rel.variant = LearnedRelation::Variant::pointwise_cubic;
            const auto coeffs = man.at("coefficients").get<std::vector<double>>();
            if (coeffs.size() != rel.cubic.size())
                throw ConfigError(man_path + ": expected 4 cubic coefficients");
            std::copy(coeffs.begin(), coeffs.end(), rel.cubic.begin());
        } else {
            throw ConfigError(man_path + ": unknown variant '" + variant + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(man_path + ": " + e.what());
    }
    return rel;
}

}  // namespace jointinv::learn
