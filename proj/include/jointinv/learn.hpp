#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "jointinv/rng.hpp"
#include "jointinv/synth.hpp"

namespace jointinv::learn {

// ---------------------------------------------------------------------------
// Multivariate polynomial relation.
// ---------------------------------------------------------------------------

// All multi-indices of dimension d with total degree <= n, in graded
// lexicographic order: by degree first, then lexicographically by exponent
// vector (descending on the leading position). The monomial basis, the theta
// layout, and the feature vector all share this order.
std::vector<std::vector<int>> multi_indices(int d, int n);
std::size_t num_monomials(int d, int n);  // C(d+n, n)

// Feature vector [P_alpha(fhat)] over that enumeration.
std::vector<double> poly_features(const std::vector<double>& fhat, int n);

struct PolynomialRelation {
    int d = 0;        // input dimension
    int n = 0;        // total degree
    int out_dim = 0;  // output dimension
    // out_dim x num_monomials(d, n), row-major.
    std::vector<double> theta;
    // Bounds on the synthesized output field, enforced as a penalty during
    // consistency refinement and carried along for the inversion stage.
    double g_lo = 0.0, g_hi = 0.0;

    std::size_t num_features() const { return num_monomials(d, n); }
    std::vector<double> predict(const std::vector<double>& fhat) const;
    // d(cot . predict)/d fhat.
    std::vector<double> input_vjp(const std::vector<double>& fhat,
                                  const std::vector<double>& cot) const;
};

struct PolyFitOptions {
    int degree = 3;
    double ridge = 1e-12;
    // Entries of theta below this magnitude are zeroed after the ridge fit.
    double threshold = 1e-8;
    // > 0 switches on the gradient refinement against the simulated-data
    // term; it needs a recipe and a dataset with stored measurements.
    double consistency_weight = 0.0;
    int refine_iters = 60;
    int minibatch = 8;
    double refine_lr = 1e-3;
    // Weight of the max(0, violation)^2 field-bound penalty in refinement.
    double bound_weight = 1e3;
    std::uint64_t seed = 0;
};

// Stage 1: per-output-row ridge least squares over the train split (closed
// form, normal equations), then hard thresholding. Stage 2 (optional):
// minibatch first-order refinement of the full two-term loss. The dataset's
// g_lo/g_hi become the relation's bounds.
PolynomialRelation fit_polynomial(const synth::TrainingDataset& ds, const PolyFitOptions& opt,
                                  const synth::ForwardRecipe* recipe = nullptr);

// ---------------------------------------------------------------------------
// Encoder/decoder/predictor network.
// ---------------------------------------------------------------------------

struct Layer {
    int in = 0, out = 0;
    std::vector<double> w;  // out x in, row-major
    std::vector<double> b;  // out
};

// Fully connected stack, tanh on every layer except the last (identity).
struct Mlp {
    std::vector<Layer> layers;

    int in_dim() const { return layers.empty() ? 0 : layers.front().in; }
    int out_dim() const { return layers.empty() ? 0 : layers.back().out; }
    std::vector<double> forward(const std::vector<double>& x) const;
};

struct MlpRelation {
    Mlp encoder, decoder, predictor;
    double g_lo = 0.0, g_hi = 0.0;

    int in_dim() const { return encoder.in_dim(); }
    int latent_dim() const { return encoder.out_dim(); }
    int out_dim() const { return predictor.out_dim(); }

    // predictor(encoder(x)) and decoder(encoder(x)).
    std::vector<double> predict(const std::vector<double>& fhat) const;
    std::vector<double> reconstruct(const std::vector<double>& fhat) const;
    std::vector<double> input_vjp(const std::vector<double>& fhat,
                                  const std::vector<double>& cot) const;
};

// Draw order: encoder (both layers), decoder hidden, predictor hidden, each
// uniform Xavier with zero biases. The decoder and predictor output layers
// start at exactly zero so the untrained model predicts 0 and the epoch-0
// loss equals the data-variance baseline.
MlpRelation init_mlp(int in_dim, int hidden, int latent, Rng& rng);

struct TrainOptions {
    int hidden = 64;
    int latent = 16;
    double lr = 1e-3;
    int batch = 128;
    int max_epochs = 500;
    // Stop after this many epochs without a validation improvement; the
    // returned model carries the best-validation weights.
    int patience = 25;
    // Multiplier on the model-consistency term; 0 disables the PDE solves.
    double consistency_weight = 1.0;
    // The consistency term is estimated on this many freshly drawn train
    // pairs per epoch (scaled to stay unbiased for the full mean).
    int consistency_pairs = 8;
    std::uint64_t seed = 0;
};

// One row per epoch; epoch 0 is the untrained model. term1 is the epoch's
// consistency estimate (0 when disabled), term2/term3 the prediction and
// reconstruction means over the train split; val_loss is term2+term3 on the
// validation (= test) split.
struct LossRow {
    int epoch = 0;
    double train_loss = 0.0, val_loss = 0.0;
    double term1 = 0.0, term2 = 0.0, term3 = 0.0;
};

// Minibatch Adam on all three substructures against the three-term loss.
// The consistency term runs only when both a recipe and a positive weight
// are supplied; the epoch-0 row estimates it without taking a step. Throws
// NumericalError (with the epoch index) if the loss turns non-finite.
MlpRelation train_mlp(const synth::TrainingDataset& ds, const TrainOptions& opt,
                      const synth::ForwardRecipe* recipe = nullptr,
                      std::vector<LossRow>* curve = nullptr);

// CSV: "epoch,train_loss,val_loss,term1,term2,term3".
void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve);

// Max relative disagreement between backprop and central finite differences
// of the data-term loss (prediction + reconstruction) at one sample, over
// `num_params` randomly chosen parameters.
double mlp_gradient_check(const MlpRelation& model, const std::vector<double>& f,
                          const std::vector<double>& g, int num_params = 50,
                          std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Unified handle used by the inversion stage.
// ---------------------------------------------------------------------------

struct LearnedRelation {
    enum class Variant { polynomial, mlp, pointwise_cubic };
    Variant variant = Variant::polynomial;
    PolynomialRelation poly;
    MlpRelation mlp;
    // Pointwise surrogate g = sum_i cubic[i] f^i applied nodewise (any
    // length; in_dim/out_dim report 0 to mean "unconstrained").
    std::array<double, 4> cubic{};
    // Free-form training metadata (generator, fit options, seed), stored in
    // model.json and restored on load.
    std::string provenance;

    int in_dim() const;
    int out_dim() const;
    std::vector<double> predict(const std::vector<double>& fhat) const;
    std::vector<double> input_vjp(const std::vector<double>& fhat,
                                  const std::vector<double>& cot) const;
};

LearnedRelation make_polynomial_relation(PolynomialRelation poly);
LearnedRelation make_mlp_relation(MlpRelation mlp);
LearnedRelation make_pointwise_cubic(const std::array<double, 4>& coeffs);

// Directory layout: model.json (variant, dims, degree, bounds, layer shapes)
// + weights.bin (f64 little-endian; theta row-major, or layers in
// encoder/decoder/predictor order, each W row-major then b).
void save_relation(const std::string& dir, const LearnedRelation& rel);
LearnedRelation load_relation(const std::string& dir);

}  // namespace jointinv::learn
