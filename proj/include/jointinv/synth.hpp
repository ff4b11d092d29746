#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jointinv/basis.hpp"
#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/rng.hpp"

namespace jointinv::synth {

// ---------------------------------------------------------------------------
// Experiment I: band-limited cosine fields whose coefficient vectors are
// coupled through sigma_k = sum_{k'} a_{k,k'} sin(pi (2 + gamma_{k'})^{kx+kz}).
// ---------------------------------------------------------------------------

struct RelationSpecExpI {
    int kmax = 5;
    // a_{k,k'} >= 0, row-major over (target mode, source mode), both flattened
    // kx*(kmax+1)+kz like SpectralCoeffs.
    std::vector<double> a;

    int dim() const { return (kmax + 1) * (kmax + 1); }
    double at(int target, int source) const { return a[static_cast<std::size_t>(target) * dim() + source]; }
    double sum() const;
};

// Entries iid U[0, 0.1]; the relation is fixed once per dataset.
RelationSpecExpI sample_relation_exp1(int kmax, Rng& rng);

// The raw coefficients live on fixed ranges (gamma in [-0.5, 0.5]^d, sigma in
// [-sum a, sum a]^d rowwise), so one affine map per coefficient puts every
// possible sample's synthesized field inside its physical band:
// gamma in [0.5e-3, 1.5e-3], sigma in [0.01, 0.06]. The map is a dataset
// constant and travels in the manifest.
struct RescaleExpI {
    double f_scale = 1.0, f_offset = 0.0;  // gamma
    double g_scale = 1.0, g_offset = 0.0;  // sigma
};
RescaleExpI exp1_rescale(const RelationSpecExpI& spec);

// sigma_k from gamma_k before any rescaling.
std::vector<double> exp1_relation_raw(const RelationSpecExpI& spec,
                                      const std::vector<double>& gamma_raw);

struct CoeffPair {
    SpectralCoeffs f, g;
};
CoeffPair gen_pair_exp1(const RelationSpecExpI& spec, const RescaleExpI& rs, Rng& rng);

// ---------------------------------------------------------------------------
// Experiment II: five-parameter Gaussian bumps p1 + p2 exp(-(|x - (p4,p5)|^2)
// / (2 p3^2)) with a piecewise map b -> c. The region switches read the bump
// center (b4, b5): that is the only reading under which c is a single point
// in parameter space and sigma peaks at (c4, c5).
// ---------------------------------------------------------------------------

using Params5 = std::array<double, 5>;

struct RelationSpecExpII {
    std::array<double, 25> a{};  // a_{ij}, i,j = 1..5, row-major, U[0, 0.1]
    double at(int i, int j) const { return a[static_cast<std::size_t>(i) * 5 + j]; }
};
RelationSpecExpII sample_relation_exp2(Rng& rng);

Params5 exp2_relation(const RelationSpecExpII& spec, const Params5& b);
ScalarField gaussian_bump(const Grid& grid, const Params5& p);
// Partial derivatives of the bump field with respect to the five parameters,
// contracted against a nodal cotangent: grad_p += sum_nodes cot * dfield/dp.
void gaussian_bump_pullback(const Grid& grid, const Params5& p, const ScalarField& cot,
                            Params5& grad_p);

struct ParamPair {
    Params5 b, c;
};
ParamPair gen_pair_exp2(const RelationSpecExpII& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Experiment III: a fixed two-bump density, a piecewise-shifted cubic bulk
// modulus, and its node-perturbed variant used as the data-generating truth.
// ---------------------------------------------------------------------------

// c0..c3 of kappa = sum c_i rho^i.
std::array<double, 4> exp3_cubic_coeffs();
double exp3_cubic(double rho);

double exp3_density_at(double x, double y);
ScalarField exp3_density(const Grid& grid);        // wave grid, y in [-1, 0]
ScalarField exp3_modulus_clean(const Grid& grid);  // with the two region shifts
// Each node independently gains N(0, 0.1) with probability 1/2; the periodic
// seam column M is copied from column 0 afterwards so the stored field equals
// what the propagator sees.
ScalarField exp3_modulus_perturbed(const Grid& grid, Rng& rng);

// ---------------------------------------------------------------------------
// Measurement noise.
// ---------------------------------------------------------------------------

struct NoiseSpec {
    enum class Kind { none, additive, multiplicative };
    Kind kind = Kind::none;
    double level = 0.0;  // delta in [0, 1)
    std::uint64_t seed = 0;
};

const char* noise_kind_name(NoiseSpec::Kind k);
NoiseSpec::Kind noise_kind_from_name(const std::string& name);

// additive: d + delta*rms(d)*xi, multiplicative: d*(1 + delta*xi), xi iid
// N(0,1) from the noise phase of `spec.seed` with substream `stream_index`
// (one substream per measurement array).
std::vector<double> add_noise(const std::vector<double>& data, const NoiseSpec& spec,
                              std::uint64_t stream_index = 0);

// ---------------------------------------------------------------------------
// Dataset assembly.
// ---------------------------------------------------------------------------

// Simulates the measurement arrays (one flat array per illumination) for a
// coefficient pair given as parameter vectors plus builders to their fields.
struct ForwardRecipe {
    enum class Kind { diffusion, wave };
    Kind kind = Kind::diffusion;
    Grid grid{32, 0.0};
    std::function<ScalarField(const std::vector<double>&)> build_f, build_g;
    // Transposes of the build_* linearisations at `params`, contracting a
    // nodal cotangent back to parameter space. pullback_g is needed by
    // consistency-constrained learning, both by the inversion; simulation
    // alone requires neither.
    using Pullback =
        std::function<std::vector<double>(const std::vector<double>& params, const ScalarField&)>;
    Pullback pullback_f, pullback_g;
    double robin_ell = 1.0;            // diffusion
    double t_end = 5.0, dt = 0.005;    // wave
};
std::vector<std::vector<double>> simulate_measurements(const ForwardRecipe& recipe,
                                                       const std::vector<double>& f,
                                                       const std::vector<double>& g,
                                                       Exec exec = Exec::parallel);

// Misfit of the recipe's prediction at (f, g) against stored measurement
// arrays, 1/(2|H|) sum_h ||pred_h - obs_h||^2 in the solver's own norm, with
// the gradient pulled back to the g parameter vector through `pullback_g`.
struct ConsistencyResult {
    double value = 0.0;
    std::vector<double> grad_g;
};
ConsistencyResult consistency_misfit(const ForwardRecipe& recipe, const std::vector<double>& f,
                                     const std::vector<double>& g,
                                     const std::vector<std::vector<double>>& observed,
                                     bool want_grad = true, Exec exec = Exec::parallel);

struct TrainingDataset {
    std::string generator;  // "exp1" | "exp2"
    int feature_dim = 0;
    std::uint64_t seed = 0;
    double f_offset = 0.0, g_offset = 0.0;    // fixed synthesis offsets
    double g_lo = 0.0, g_hi = 0.0;            // output-field band (constraint)
    std::vector<std::vector<double>> f, g;    // N x feature_dim
    std::vector<int> train_idx, test_idx;     // seeded 80/20 split
    // Model-consistency targets u_{h,k}; empty when no recipe was supplied.
    std::vector<std::vector<std::vector<double>>> measurements;

    int size() const { return static_cast<int>(f.size()); }
};

using PairGenerator = std::function<std::pair<std::vector<double>, std::vector<double>>(Rng&)>;

// N pairs with per-sample substreams of `seed` (phase: dataset), optional
// simulated measurements, and the seeded shuffle split.
TrainingDataset build_training_dataset(const PairGenerator& gen, int n, std::uint64_t seed,
                                       const ForwardRecipe* recipe = nullptr,
                                       Exec exec = Exec::parallel);

// Directory layout: manifest.json + f.bin/g.bin (+ measurements.bin).
void save_dataset(const std::string& dir, const TrainingDataset& ds);
TrainingDataset load_dataset(const std::string& dir);

}  // namespace jointinv::synth
