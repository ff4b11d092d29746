#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/learn.hpp"
#include "jointinv/synth.hpp"

namespace jointinv::invert {

// ---------------------------------------------------------------------------
// Metric.
// ---------------------------------------------------------------------------

// ||a - b|| / ||b|| in the trapezoidal L2 norm; b is the reference. Throws
// ConfigError on mismatched grids or a zero-norm reference.
double relative_l2_error(const ScalarField& a, const ScalarField& b);

// ---------------------------------------------------------------------------
// Generic smooth objective + BFGS.
// ---------------------------------------------------------------------------

struct Objective {
    int dim = 0;
    // Returns the value; fills *grad (length dim) when grad is non-null. A
    // +inf value marks an infeasible probe (the line search backs off); the
    // gradient is unspecified there.
    std::function<double(const std::vector<double>&, std::vector<double>*)> eval;
};

// Max relative disagreement between the analytic directional derivative and
// a central finite difference along `num_dirs` random unit directions.
double gradient_check(const Objective& obj, const std::vector<double>& x, int num_dirs = 10,
                      std::uint64_t seed = 0, double step = 1e-6);

struct IterRow {
    int iter = 0;
    double value = 0.0;
    double grad_inf = 0.0;  // max-norm of the gradient
    double step = 0.0;      // ||x_k - x_{k-1}||, 0 for the initial row
};

struct BfgsResult {
    std::vector<double> x;
    double value = 0.0;
    std::vector<double> grad;
    std::vector<IterRow> history;  // row 0 is the initial point
    enum class Stop { grad_tol, step_tol, max_iters } reason = Stop::max_iters;
};

// Dense BFGS with a strong-Wolfe line search (c1 = 1e-4, c2 = 0.9, at most
// 40 objective evaluations per search). Stops when ||grad||_inf <= tol_grad,
// ||step|| <= tol_step, or after max_iters iterations. A failed line search
// throws LineSearchStall carrying the best iterate seen; a non-finite value
// at x0 throws NumericalError.
BfgsResult bfgs_minimize(const Objective& obj, std::vector<double> x0, double tol_grad,
                         double tol_step, int max_iters);

// ---------------------------------------------------------------------------
// The inverse problem.
// ---------------------------------------------------------------------------

// Forward recipe (with both pullbacks set) plus the measured data, one array
// per source in the solver's own layout.
struct Problem {
    synth::ForwardRecipe recipe;
    std::vector<std::vector<double>> data;
    int dim_f = 0, dim_g = 0;
    // Projects a nodal field onto the ghat parameters; required only to seed
    // ghat from a pointwise relation after stage one.
    std::function<std::vector<double>(const ScalarField&)> project_g;
};

// Data misfit at the synthesized fields with gradients pulled back to both
// parameter vectors: 1/(2|H|) sum_h ||A_h(f, g) - u_h||^2.
struct MisfitResult {
    double value = 0.0;
    std::vector<double> grad_f, grad_g;
};
MisfitResult data_misfit(const Problem& prob, const std::vector<double>& f,
                         const std::vector<double>& g, bool want_grad = true,
                         Exec exec = Exec::parallel);

// Absolute penalty weights, fixed per run (joint_invert scales the config's
// relative weights by the misfit at the initial guess).
struct Penalties {
    double tikhonov = 0.0;    // (t/2)(||f||^2 [+ ||g||^2]) on the parameters
    double positivity = 0.0;  // t * integral of max(0, -field)^2, both fields
};

// Stage-one objective in fhat alone: the relation supplies ghat exactly.
// Vector relations act on the parameter vector; a pointwise relation maps
// the synthesized f-field nodewise.
Objective make_phi0(const Problem& prob, const learn::LearnedRelation& rel, Penalties pen,
                    Exec exec = Exec::parallel);

// Staged objective in the concatenated (fhat, ghat) with the relation
// penalty (alpha/2)||ghat - N(fhat)||^2 (parameter space for vector
// relations, trapezoid-weighted field space for pointwise ones).
Objective make_phij(const Problem& prob, const learn::LearnedRelation& rel, double alpha,
                    Penalties pen, Exec exec = Exec::parallel);

// ---------------------------------------------------------------------------
// Staged joint inversion.
// ---------------------------------------------------------------------------

struct InversionConfig {
    int J = 3;             // outer stages after stage one
    double alpha0 = 0.0;   // relation-penalty start; stage j uses alpha0/2^j
    double reg_gamma = 1e-8;         // Tikhonov, relative to the data scale
    double positivity_weight = 1e3;  // hinge weight, relative likewise
    double tol_grad = 1e-7;
    double tol_step = 1e-7;
    int max_bfgs_iters = 400;
    int K = 3;  // band limit of the unknowns (used by callers building Problems)
};

struct StageResult {
    int index = 0;       // 0 is the relation-exact stage
    double alpha = 0.0;  // meaningful for index >= 1
    std::vector<double> f, g;
    double objective = 0.0;
    std::vector<IterRow> history;
    // Relative L2 errors of the synthesized fields against the truth;
    // NaN when no truth was supplied.
    double err_f = 0.0, err_g = 0.0;
    // Nonempty when the stage recovered from a line-search stall.
    std::string note;
};

struct InversionReport {
    InversionConfig cfg;
    double data_scale = 0.0;  // misfit at the initial guess
    Penalties penalties;
    std::vector<StageResult> stages;  // J+1 entries, [0] first

    const StageResult& final_stage() const { return stages.back(); }
};

// Algorithm: minimize phi0 from f_init (zeros when null, i.e. the constant
// field at the synthesis offset), set ghat0 through the relation, then J
// stages of phij with alpha halved each stage and the previous pair as the
// warm start. Line-search stalls keep the best iterate and annotate the
// stage; other solver errors propagate with stage context.
InversionReport joint_invert(const Problem& prob, const learn::LearnedRelation& rel,
                             const InversionConfig& cfg, const ScalarField* f_truth = nullptr,
                             const ScalarField* g_truth = nullptr,
                             const std::vector<double>* f_init = nullptr,
                             Exec exec = Exec::parallel);

// report.json plus per-stage synthesized fields (stage<j>_f.csv / _g.csv).
void save_report(const std::string& dir, const InversionReport& rep, const Problem& prob);

}  // namespace jointinv::invert
