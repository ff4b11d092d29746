#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/invert.hpp"
#include "jointinv/learn.hpp"
#include "jointinv/synth.hpp"

namespace jointinv::harness {

// ---------------------------------------------------------------------------
// Experiment configuration.
// ---------------------------------------------------------------------------

enum class Experiment { exp1, exp2, exp3 };
enum class Model { polynomial, mlp, surrogate };

const char* experiment_name(Experiment e);
Experiment experiment_from_name(const std::string& name);
const char* model_name(Model m);
Model model_from_name(const std::string& name);

// Learning-stage hyperparameters; which subset matters depends on `model`.
struct LearnParams {
    // polynomial
    int degree = 3;
    double ridge = 1e-12;
    double threshold = 1e-8;
    // mlp
    int hidden = 64;
    int latent = 16;
    double lr = 1e-3;
    int batch = 32;
    int max_epochs = 200;
    int patience = 25;
    // model-consistency refinement, shared by both (0 = pure data fit, and
    // the generate phase then skips the measurement simulations entirely)
    double consistency_weight = 0.0;
    int consistency_pairs = 8;
};

// One experiment run, as read from the key=value config file. Defaults are
// desk scale: a full exp1 pipeline finishes in minutes on a single core.
struct ExperimentConfig {
    Experiment experiment = Experiment::exp1;
    int grid_m = 32;          // cells per side
    int kmax = 3;             // spectral band limit
    int num_samples = 2000;   // training-set size
    synth::NoiseSpec noise;   // its seed field is filled from `seed`
    Model model = Model::polynomial;
    LearnParams learn;
    invert::InversionConfig inversion;  // inversion.K is kept equal to kmax
    double t_end = 5.0;       // wave recording window (exp3)
    double dt = 0.005;        // wave time step (exp3)
    double robin_ell = 1.0;   // diffusion boundary constant (exp1/exp2)
    std::uint64_t seed = 1;   // master seed; every phase fans out from it
    std::string out_dir = "out";
};

// Parses `key = value` lines ('#' starts a comment, blank lines skipped).
// Unknown, duplicate, or malformed entries are rejected with a
// "<file>:<line>: ..." message; the result is validated before returning.
ExperimentConfig parse_config_text(const std::string& text, const std::string& filename);
ExperimentConfig load_config(const std::string& path);

// Cross-field rules: exp3 pairs only with the surrogate model (and the
// surrogate only with exp3), a noise level needs a noise kind, the grid must
// resolve the band (M >= 4K), and numeric parameters are range checked.
void validate_config(const ExperimentConfig& cfg);

// Inverse of parse_config_text (used for the manifest echo and so a run can
// be reproduced from its output directory alone).
std::string config_to_text(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Experiment wiring.
// ---------------------------------------------------------------------------

// Everything that depends on the experiment id: the forward recipe over the
// inversion's parameter spaces, the dataset pair generator, the ground-truth
// coefficient fields, and the inversion's starting point. Built purely from
// the config (the relation spec and the truth draw both come from fixed
// substreams of the master seed).
struct ExperimentSetup {
    synth::ForwardRecipe recipe;
    synth::PairGenerator pair_gen;  // null for exp3 (no learning stage)
    int dim_f = 0;
    int dim_g = 0;
    // exp3 only: projects a modulus field onto the spectral unknowns.
    std::function<std::vector<double>(const ScalarField&)> project_g;
    ScalarField truth_f, truth_g;
    // Parameter-space truth where one exists (exp1/exp2); empty for exp3,
    // whose truth fields are deliberately outside the recipe's span.
    std::vector<double> truth_f_params, truth_g_params;
    std::vector<double> f_init;     // starting point; empty = zeros
    double g_lo = 0.0, g_hi = 0.0;  // physical band of the target field
    // Synthesis offsets behind build_f/build_g, recorded as dataset metadata.
    double f_offset = 0.0, g_offset = 0.0;
};

ExperimentSetup make_setup(const ExperimentConfig& cfg);

// Measurements simulated from explicit coefficient fields. The ground truth
// is generally outside the span of build_f/build_g (exp3 by construction),
// so the data phase bypasses them.
std::vector<std::vector<double>> simulate_field_measurements(const synth::ForwardRecipe& recipe,
                                                             const ScalarField& f,
                                                             const ScalarField& g,
                                                             Exec exec = Exec::parallel);

// ---------------------------------------------------------------------------
// Seed fan-out. All derived streams are pure functions of the master seed:
//
//   dataset sample k   (SeedPhase::dataset, k), k = 0..N-1
//   train/test split   (SeedPhase::dataset, N)
//   relation spec      (SeedPhase::dataset, kRelationSpecStream)
//   learner            opts.seed = master (fans out internally)
//   ground truth       (SeedPhase::truth, 0)
//   noise, array i     (SeedPhase::noise, i) via NoiseSpec.seed = master
//   sensitivity dir    (SeedPhase::sensitivity, 0)
//
// so any phase can be re-run in isolation and reproduce its output exactly.
// ---------------------------------------------------------------------------

// Reserved dataset-phase substream for the experiment's relation spec.
// Sample substreams use 0..N-1 and the split uses N; stream indices must
// stay below 2^32, so this sits at the top of the valid range.
inline constexpr std::uint64_t kRelationSpecStream = 0xffffffffull;

// ---------------------------------------------------------------------------
// CSV tables.
// ---------------------------------------------------------------------------

// Minimal rectangular CSV held as written: a header row plus string cells.
// Numeric cells are produced with io::format_double, so parse -> serialize
// is byte-identical for every table the harness emits.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string table_to_csv(const CsvTable& t);
CsvTable parse_csv_table(const std::string& text);

// ---------------------------------------------------------------------------
// Pipeline.
// ---------------------------------------------------------------------------

struct PhaseTime {
    std::string name;
    double seconds = 0.0;
};

struct RunManifest {
    ExperimentConfig cfg;
    // name -> path relative to cfg.out_dir, in creation order.
    std::vector<std::pair<std::string, std::string>> artifacts;
    std::vector<PhaseTime> phases;
    std::string failed_phase;  // empty on success
};

// Writes cfg.out_dir/manifest.json: tool name/version, config echo, seed
// fan-out table, display factors, artifact paths, per-phase wall times.
void save_manifest(const RunManifest& man);

// The four phases behind the CLI subcommands. Each one reads its inputs
// from cfg.out_dir as laid down by its predecessors and writes its own
// artifacts there, so a single phase can be re-run in isolation:
//
//   generate   dataset/            (exp1/exp2; a config error for exp3)
//   train      model/ (+ loss.csv) from dataset/; exp3 stores the surrogate
//   invert     truth_f/g.csv, data/, inversion/ (report + stage fields)
//   evaluate   errors.csv          from inversion/ + truth fields
//
// Artifacts and timings are appended to `man` when one is supplied.
void phase_generate(const ExperimentConfig& cfg, RunManifest* man = nullptr);
void phase_train(const ExperimentConfig& cfg, RunManifest* man = nullptr);
void phase_invert(const ExperimentConfig& cfg, RunManifest* man = nullptr);
void phase_evaluate(const ExperimentConfig& cfg, RunManifest* man = nullptr);

// Runs generate -> train -> invert -> evaluate and writes the manifest. On
// a phase failure the manifest still lands on disk with failed_phase set,
// then the error is rethrown. `verbose` prints one line per phase to stderr.
RunManifest run_pipeline(const ExperimentConfig& cfg, bool verbose = false);

// Mean over `idx` of ||rel.predict(f_i) - g_i|| / ||g_i|| (Euclidean); the
// train phase records it for both splits in model/fit.csv.
double mean_relative_prediction_error(const learn::LearnedRelation& rel,
                                      const synth::TrainingDataset& ds,
                                      const std::vector<int>& idx);

// ---------------------------------------------------------------------------
// Error table (step one = stage 0, step two = final stage).
// ---------------------------------------------------------------------------

struct StepErrors {
    double f_one = 0.0, g_one = 0.0;
    double f_two = 0.0, g_two = 0.0;
};

StepErrors evaluate_fields(const ScalarField& f_one, const ScalarField& g_one,
                           const ScalarField& f_two, const ScalarField& g_two,
                           const ScalarField& truth_f, const ScalarField& truth_g);

// Header "step,f_error,g_error", rows "one" and "two".
CsvTable errors_table(const StepErrors& e);

// ---------------------------------------------------------------------------
// Hyperparameter sweep.
// ---------------------------------------------------------------------------

struct SweepResult {
    std::vector<int> J_list;
    std::vector<double> alpha0_list;
    // Final-stage relative L2 errors, |J_list| x |alpha0_list| row-major;
    // NaN marks a failed cell.
    std::vector<double> err_f, err_g;
    std::vector<std::string> failures;  // "J=2 alpha0=1e-07: <reason>"
};

// Shares one dataset, model, truth, and measurement set across the grid of
// joint inversions. Cell reports land in out_dir/sweep/J<j>_a<i>/; the two
// tables in out_dir/sweep_f.csv and sweep_g.csv; failures (if any) in
// out_dir/sweep_failures.txt.
SweepResult sweep_hyperparams(const ExperimentConfig& cfg, const std::vector<int>& J_list,
                              const std::vector<double>& alpha0_list, bool verbose = false);

// Rows J, columns alpha0 ("J,alpha0=0,alpha0=1e-07,...").
CsvTable sweep_table(const SweepResult& res, bool g_table);

// ---------------------------------------------------------------------------
// Relation sensitivity probe.
// ---------------------------------------------------------------------------

// Pointers to the relation's trainable parameters (theta, every layer's
// weights and biases, or the four cubic coefficients). The sensitivity sweep
// perturbs along a fixed random direction in this space.
std::vector<double*> relation_parameters(learn::LearnedRelation& rel);

struct SensitivityResult {
    std::vector<double> epsilon;
    // || N_eps(f*) - N_0(f*) ||_L2 over the synthesized target field.
    std::vector<double> relation_discrepancy;
    // Relative L2 change of the final reconstructed g-field vs epsilon = 0.
    std::vector<double> reconstruction_discrepancy;
};

// Trains (or loads the surrogate) once, simulates fixed noise-free data from
// the truth, then reruns the joint inversion with the relation's parameters
// shifted by epsilon * direction for each epsilon. Per-run reports land in
// out_dir/sensitivity/eps<i>/; the table in out_dir/sensitivity.csv. A noise
// spec other than `none` is a config error here, and a failed epsilon is
// rethrown with the epsilon value in the message.
SensitivityResult sensitivity_sweep(const ExperimentConfig& cfg,
                                    const std::vector<double>& epsilons, bool verbose = false);

// Header "epsilon,relation_discrepancy,reconstruction_discrepancy".
CsvTable sensitivity_table(const SensitivityResult& res);

}  // namespace jointinv::harness
