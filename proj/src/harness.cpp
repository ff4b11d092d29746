#include "jointinv/harness.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <utility>

#include "json.hpp"

#include "jointinv/basis.hpp"
#include "jointinv/diffusion.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/io.hpp"
#include "jointinv/rng.hpp"
#include "jointinv/trace.hpp"
#include "jointinv/version.hpp"
#include "jointinv/wave.hpp"

namespace jointinv::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string join(const std::string& dir, const std::string& rel) {
    return (std::filesystem::path(dir) / rel).string();
}

void note_artifact(RunManifest* man, const std::string& name, const std::string& rel) {
    if (man) man->artifacts.emplace_back(name, rel);
}

std::string trim(const std::string& s) {
    const char* ws = " \t\r";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& v, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    long long r = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size() || r < -1000000000 ||
        r > 1000000000)
        throw ConfigError(where + ": expected an integer, got '" + v + "'");
    return static_cast<int>(r);
}

std::uint64_t parse_u64(const std::string& v, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    unsigned long long r = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || errno != 0 || end != v.c_str() + v.size())
        throw ConfigError(where + ": expected an unsigned integer, got '" + v + "'");
    return r;
}

double parse_dbl(const std::string& v, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    double r = std::strtod(v.c_str(), &end);
    if (v.empty() || errno == ERANGE || end != v.c_str() + v.size() || !std::isfinite(r))
        throw ConfigError(where + ": expected a finite number, got '" + v + "'");
    return r;
}

void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& val,
               const std::string& where) {
    auto as_int = [&] { return parse_int(val, where); };
    auto as_dbl = [&] { return parse_dbl(val, where); };
    auto rewrap = [&](const Error& e) { return ConfigError(where + ": " + e.what()); };

    if (key == "experiment") {
        try {
            cfg.experiment = experiment_from_name(val);
        } catch (const Error& e) {
            throw rewrap(e);
        }
    } else if (key == "grid.m") {
        cfg.grid_m = as_int();
    } else if (key == "kmax") {
        cfg.kmax = as_int();
    } else if (key == "dataset.n") {
        cfg.num_samples = as_int();
    } else if (key == "noise.kind") {
        try {
            cfg.noise.kind = synth::noise_kind_from_name(val);
        } catch (const Error& e) {
            throw rewrap(e);
        }
    } else if (key == "noise.level") {
        cfg.noise.level = as_dbl();
    } else if (key == "model") {
        try {
            cfg.model = model_from_name(val);
        } catch (const Error& e) {
            throw rewrap(e);
        }
    } else if (key == "learn.degree") {
        cfg.learn.degree = as_int();
    } else if (key == "learn.ridge") {
        cfg.learn.ridge = as_dbl();
    } else if (key == "learn.threshold") {
        cfg.learn.threshold = as_dbl();
    } else if (key == "learn.hidden") {
        cfg.learn.hidden = as_int();
    } else if (key == "learn.latent") {
        cfg.learn.latent = as_int();
    } else if (key == "learn.lr") {
        cfg.learn.lr = as_dbl();
    } else if (key == "learn.batch") {
        cfg.learn.batch = as_int();
    } else if (key == "learn.max_epochs") {
        cfg.learn.max_epochs = as_int();
    } else if (key == "learn.patience") {
        cfg.learn.patience = as_int();
    } else if (key == "learn.consistency_weight") {
        cfg.learn.consistency_weight = as_dbl();
    } else if (key == "learn.consistency_pairs") {
        cfg.learn.consistency_pairs = as_int();
    } else if (key == "inversion.J") {
        cfg.inversion.J = as_int();
    } else if (key == "inversion.alpha0") {
        cfg.inversion.alpha0 = as_dbl();
    } else if (key == "inversion.reg_gamma") {
        cfg.inversion.reg_gamma = as_dbl();
    } else if (key == "inversion.positivity_weight") {
        cfg.inversion.positivity_weight = as_dbl();
    } else if (key == "inversion.tol_grad") {
        cfg.inversion.tol_grad = as_dbl();
    } else if (key == "inversion.tol_step") {
        cfg.inversion.tol_step = as_dbl();
    } else if (key == "inversion.max_iters") {
        cfg.inversion.max_bfgs_iters = as_int();
    } else if (key == "wave.t_end") {
        cfg.t_end = as_dbl();
    } else if (key == "wave.dt") {
        cfg.dt = as_dbl();
    } else if (key == "diffusion.ell") {
        cfg.robin_ell = as_dbl();
    } else if (key == "seed") {
        cfg.seed = parse_u64(val, where);
    } else if (key == "out") {
        cfg.out_dir = val;
    } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

// Fixed emission order shared by config_to_text and the manifest echo.
std::vector<std::pair<std::string, std::string>> config_pairs(const ExperimentConfig& cfg) {
    using io::format_double;
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("experiment", experiment_name(cfg.experiment));
    kv.emplace_back("grid.m", std::to_string(cfg.grid_m));
    kv.emplace_back("kmax", std::to_string(cfg.kmax));
    kv.emplace_back("dataset.n", std::to_string(cfg.num_samples));
    kv.emplace_back("noise.kind", synth::noise_kind_name(cfg.noise.kind));
    kv.emplace_back("noise.level", format_double(cfg.noise.level));
    kv.emplace_back("model", model_name(cfg.model));
    kv.emplace_back("learn.degree", std::to_string(cfg.learn.degree));
    kv.emplace_back("learn.ridge", format_double(cfg.learn.ridge));
    kv.emplace_back("learn.threshold", format_double(cfg.learn.threshold));
    kv.emplace_back("learn.hidden", std::to_string(cfg.learn.hidden));
    kv.emplace_back("learn.latent", std::to_string(cfg.learn.latent));
    kv.emplace_back("learn.lr", format_double(cfg.learn.lr));
    kv.emplace_back("learn.batch", std::to_string(cfg.learn.batch));
    kv.emplace_back("learn.max_epochs", std::to_string(cfg.learn.max_epochs));
    kv.emplace_back("learn.patience", std::to_string(cfg.learn.patience));
    kv.emplace_back("learn.consistency_weight", format_double(cfg.learn.consistency_weight));
    kv.emplace_back("learn.consistency_pairs", std::to_string(cfg.learn.consistency_pairs));
    kv.emplace_back("inversion.J", std::to_string(cfg.inversion.J));
    kv.emplace_back("inversion.alpha0", format_double(cfg.inversion.alpha0));
    kv.emplace_back("inversion.reg_gamma", format_double(cfg.inversion.reg_gamma));
    kv.emplace_back("inversion.positivity_weight", format_double(cfg.inversion.positivity_weight));
    kv.emplace_back("inversion.tol_grad", format_double(cfg.inversion.tol_grad));
    kv.emplace_back("inversion.tol_step", format_double(cfg.inversion.tol_step));
    kv.emplace_back("inversion.max_iters", std::to_string(cfg.inversion.max_bfgs_iters));
    kv.emplace_back("wave.t_end", format_double(cfg.t_end));
    kv.emplace_back("wave.dt", format_double(cfg.dt));
    kv.emplace_back("diffusion.ell", format_double(cfg.robin_ell));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    kv.emplace_back("out", cfg.out_dir);
    return kv;
}

ScalarField build_spectral(const Grid& grid, int kmax, double offset,
                           const std::vector<double>& p) {
    SpectralCoeffs c(kmax);
    if (p.size() != c.values.size())
        throw ConfigError("coefficient vector has length " + std::to_string(p.size()) +
                          ", expected " + std::to_string(c.values.size()));
    c.offset = offset;
    c.values = p;
    return basis::synthesize(c, grid);
}

synth::Params5 to_params5(const std::vector<double>& p) {
    if (p.size() != 5)
        throw ConfigError("parameter vector has length " + std::to_string(p.size()) +
                          ", expected 5");
    synth::Params5 a{};
    std::copy(p.begin(), p.end(), a.begin());
    return a;
}

// build_f/build_g synthesize the band-limited deviation around a fixed
// offset; the pullbacks are exact because synthesis is linear.
void spectral_recipe(synth::ForwardRecipe& r, int kmax, double f_off, double g_off) {
    const Grid grid = r.grid;
    r.build_f = [grid, kmax, f_off](const std::vector<double>& p) {
        return build_spectral(grid, kmax, f_off, p);
    };
    r.build_g = [grid, kmax, g_off](const std::vector<double>& p) {
        return build_spectral(grid, kmax, g_off, p);
    };
    r.pullback_f = [kmax](const std::vector<double>&, const ScalarField& cot) {
        return basis::synthesize_transpose(cot, kmax).values;
    };
    r.pullback_g = r.pullback_f;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared by invert, sweep, and sensitivity: the trained relation, the noisy
// measurements simulated from the truth fields, and the assembled problem.
// Data and truth land on disk so downstream phases (and the curious) can
// inspect exactly what the inversion saw.
struct InversionInputs {
    ExperimentSetup setup;
    learn::LearnedRelation rel;
    invert::Problem prob;
};

InversionInputs prepare_inversion(const ExperimentConfig& cfg, RunManifest* man) {
    InversionInputs in;
    in.setup = make_setup(cfg);
    try {
        in.rel = learn::load_relation(join(cfg.out_dir, "model"));
    } catch (const Error& e) {
        throw IoError(std::string(e.what()) + " (run the train phase first)");
    }

    std::vector<std::vector<double>> clean =
        simulate_field_measurements(in.setup.recipe, in.setup.truth_f, in.setup.truth_g);
    synth::NoiseSpec ns = cfg.noise;
    ns.seed = cfg.seed;
    std::vector<std::vector<double>> data(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) data[i] = synth::add_noise(clean[i], ns, i);

    io::ensure_dir(cfg.out_dir);
    io::write_field_csv(join(cfg.out_dir, "truth_f.csv"), in.setup.truth_f);
    io::write_field_csv(join(cfg.out_dir, "truth_g.csv"), in.setup.truth_g);
    note_artifact(man, "truth_f", "truth_f.csv");
    note_artifact(man, "truth_g", "truth_g.csv");
    io::ensure_dir(join(cfg.out_dir, "data"));
    if (in.setup.recipe.kind == synth::ForwardRecipe::Kind::diffusion) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            ScalarField fld(in.setup.recipe.grid);
            fld.values = data[i];
            const std::string rel_path = "data/source" + std::to_string(i) + ".csv";
            io::write_field_csv(join(cfg.out_dir, rel_path), fld);
            note_artifact(man, "data_source" + std::to_string(i), rel_path);
        }
    } else {
        const int cols = in.setup.recipe.grid.m + 1;
        const int steps = static_cast<int>(data[0].size()) / cols - 1;
        BoundaryTrace tr(in.setup.recipe.grid.m, steps, in.setup.recipe.dt);
        tr.values = data[0];
        io::write_trace_csv(join(cfg.out_dir, "data/trace.csv"), tr);
        note_artifact(man, "data_trace", "data/trace.csv");
    }

    in.prob.recipe = in.setup.recipe;
    in.prob.data = std::move(data);
    in.prob.dim_f = in.setup.dim_f;
    in.prob.dim_g = in.setup.dim_g;
    in.prob.project_g = in.setup.project_g;
    return in;
}

invert::InversionConfig inversion_config(const ExperimentConfig& cfg) {
    invert::InversionConfig icfg = cfg.inversion;
    icfg.K = cfg.kmax;
    return icfg;
}

const std::vector<double>* init_or_null(const ExperimentSetup& s) {
    return s.f_init.empty() ? nullptr : &s.f_init;
}

}  // namespace

// ---------------------------------------------------------------------------
// Names.
// ---------------------------------------------------------------------------

const char* experiment_name(Experiment e) {
    switch (e) {
        case Experiment::exp1: return "exp1";
        case Experiment::exp2: return "exp2";
        case Experiment::exp3: return "exp3";
    }
    throw ConfigError("experiment_name: bad enum value");
}

Experiment experiment_from_name(const std::string& name) {
    if (name == "exp1") return Experiment::exp1;
    if (name == "exp2") return Experiment::exp2;
    if (name == "exp3") return Experiment::exp3;
    throw ConfigError("unknown experiment '" + name + "' (expected exp1, exp2, or exp3)");
}

const char* model_name(Model m) {
    switch (m) {
        case Model::polynomial: return "polynomial";
        case Model::mlp: return "mlp";
        case Model::surrogate: return "surrogate";
    }
    throw ConfigError("model_name: bad enum value");
}

Model model_from_name(const std::string& name) {
    if (name == "polynomial") return Model::polynomial;
    if (name == "mlp") return Model::mlp;
    if (name == "surrogate") return Model::surrogate;
    throw ConfigError("unknown model '" + name + "' (expected polynomial, mlp, or surrogate)");
}

// ---------------------------------------------------------------------------
// Config.
// ---------------------------------------------------------------------------

ExperimentConfig parse_config_text(const std::string& text, const std::string& filename) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = filename + ":" + std::to_string(lineno);
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": missing key before '='");
        if (val.empty()) throw ConfigError(where + ": missing value for key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
        apply_key(cfg, key, val, where);
    }
    cfg.noise.seed = cfg.seed;
    cfg.inversion.K = cfg.kmax;
    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    return parse_config_text(io::read_text(path), path);
}

void validate_config(const ExperimentConfig& cfg) {
    auto bad = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (cfg.grid_m < 4) bad("grid.m must be at least 4");
    if (cfg.kmax < 0) bad("kmax must be nonnegative");
    if (cfg.grid_m < 4 * cfg.kmax)
        bad("grid.m must be at least 4*kmax so the grid resolves the band");
    if (cfg.experiment != Experiment::exp3 && cfg.num_samples < 10)
        bad("dataset.n must be at least 10");
    if (cfg.noise.level < 0.0 || cfg.noise.level >= 1.0) bad("noise.level must lie in [0, 1)");
    if (cfg.noise.kind == synth::NoiseSpec::Kind::none && cfg.noise.level > 0.0)
        bad("noise.level > 0 needs noise.kind = additive or multiplicative");
    if (cfg.experiment == Experiment::exp3 && cfg.model != Model::surrogate)
        bad("exp3 uses the fixed pointwise surrogate; set model = surrogate");
    if (cfg.model == Model::surrogate && cfg.experiment != Experiment::exp3)
        bad("model = surrogate is only defined for exp3");
    if (cfg.learn.degree < 1) bad("learn.degree must be at least 1");
    if (cfg.learn.ridge < 0.0) bad("learn.ridge must be nonnegative");
    if (cfg.learn.threshold < 0.0) bad("learn.threshold must be nonnegative");
    if (cfg.learn.hidden < 1) bad("learn.hidden must be at least 1");
    if (cfg.learn.latent < 1) bad("learn.latent must be at least 1");
    if (cfg.learn.lr <= 0.0) bad("learn.lr must be positive");
    if (cfg.learn.batch < 1) bad("learn.batch must be at least 1");
    if (cfg.learn.max_epochs < 1) bad("learn.max_epochs must be at least 1");
    if (cfg.learn.patience < 1) bad("learn.patience must be at least 1");
    if (cfg.learn.consistency_weight < 0.0) bad("learn.consistency_weight must be nonnegative");
    if (cfg.learn.consistency_pairs < 1) bad("learn.consistency_pairs must be at least 1");
    if (cfg.inversion.J < 1) bad("inversion.J must be at least 1");
    if (cfg.inversion.alpha0 < 0.0) bad("inversion.alpha0 must be nonnegative");
    if (cfg.inversion.reg_gamma < 0.0) bad("inversion.reg_gamma must be nonnegative");
    if (cfg.inversion.positivity_weight < 0.0)
        bad("inversion.positivity_weight must be nonnegative");
    if (cfg.inversion.tol_grad <= 0.0) bad("inversion.tol_grad must be positive");
    if (cfg.inversion.tol_step <= 0.0) bad("inversion.tol_step must be positive");
    if (cfg.inversion.max_bfgs_iters < 1) bad("inversion.max_iters must be at least 1");
    if (cfg.t_end <= 0.0) bad("wave.t_end must be positive");
    if (cfg.dt <= 0.0) bad("wave.dt must be positive");
    if (cfg.dt > cfg.t_end) bad("wave.dt cannot exceed wave.t_end");
    if (cfg.experiment == Experiment::exp3) {
        const double q = cfg.t_end / cfg.dt;
        if (std::abs(q - static_cast<double>(std::llround(q))) > 1e-9)
            bad("wave.t_end must be an integer multiple of wave.dt");
    }
    if (cfg.robin_ell <= 0.0) bad("diffusion.ell must be positive");
    if (cfg.out_dir.empty()) bad("out must be a nonempty path");
}

std::string config_to_text(const ExperimentConfig& cfg) {
    std::string out = "# jointinv experiment configuration\n";
    for (const auto& [k, v] : config_pairs(cfg)) out += k + " = " + v + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Experiment wiring.
// ---------------------------------------------------------------------------

ExperimentSetup make_setup(const ExperimentConfig& cfg) {
    validate_config(cfg);
    ExperimentSetup s;
    const int K = cfg.kmax;
    Rng spec_rng = make_rng(cfg.seed, SeedPhase::dataset, kRelationSpecStream);
    Rng truth_rng = make_rng(cfg.seed, SeedPhase::truth, 0);

    switch (cfg.experiment) {
        case Experiment::exp1: {
            const synth::RelationSpecExpI spec = synth::sample_relation_exp1(K, spec_rng);
            const synth::RescaleExpI rs = synth::exp1_rescale(spec);
            s.recipe.kind = synth::ForwardRecipe::Kind::diffusion;
            s.recipe.grid = Grid{cfg.grid_m, 0.0};
            s.recipe.robin_ell = cfg.robin_ell;
            spectral_recipe(s.recipe, K, rs.f_offset, rs.g_offset);
            s.dim_f = s.dim_g = (K + 1) * (K + 1);
            s.f_offset = rs.f_offset;
            s.g_offset = rs.g_offset;
            // The rescale maps every possible draw into these field bands.
            s.g_lo = 0.01;
            s.g_hi = 0.06;
            s.pair_gen = [spec, rs](Rng& rng) {
                synth::CoeffPair p = synth::gen_pair_exp1(spec, rs, rng);
                return std::make_pair(std::move(p.f.values), std::move(p.g.values));
            };
            synth::CoeffPair t = synth::gen_pair_exp1(spec, rs, truth_rng);
            s.truth_f_params = t.f.values;
            s.truth_g_params = t.g.values;
            s.truth_f = basis::synthesize(t.f, s.recipe.grid);
            s.truth_g = basis::synthesize(t.g, s.recipe.grid);
            break;
        }
        case Experiment::exp2: {
            const synth::RelationSpecExpII spec = synth::sample_relation_exp2(spec_rng);
            s.recipe.kind = synth::ForwardRecipe::Kind::diffusion;
            s.recipe.grid = Grid{cfg.grid_m, 0.0};
            s.recipe.robin_ell = cfg.robin_ell;
            const Grid grid = s.recipe.grid;
            s.recipe.build_f = [grid](const std::vector<double>& p) {
                return synth::gaussian_bump(grid, to_params5(p));
            };
            s.recipe.build_g = s.recipe.build_f;
            s.recipe.pullback_f = [grid](const std::vector<double>& p, const ScalarField& cot) {
                synth::Params5 gp{};
                synth::gaussian_bump_pullback(grid, to_params5(p), cot, gp);
                return std::vector<double>(gp.begin(), gp.end());
            };
            s.recipe.pullback_g = s.recipe.pullback_f;
            s.dim_f = s.dim_g = 5;
            s.pair_gen = [spec](Rng& rng) {
                synth::ParamPair p = synth::gen_pair_exp2(spec, rng);
                return std::make_pair(std::vector<double>(p.b.begin(), p.b.end()),
                                      std::vector<double>(p.c.begin(), p.c.end()));
            };
            synth::ParamPair t = synth::gen_pair_exp2(spec, truth_rng);
            s.truth_f_params.assign(t.b.begin(), t.b.end());
            s.truth_g_params.assign(t.c.begin(), t.c.end());
            s.truth_f = synth::gaussian_bump(s.recipe.grid, t.b);
            s.truth_g = synth::gaussian_bump(s.recipe.grid, t.c);
            // Mid-cube start: a zero width would make the bump undefined.
            s.f_init = {0.5, 0.5, 0.5, 0.5, 0.5};
            break;
        }
        case Experiment::exp3: {
            s.recipe.kind = synth::ForwardRecipe::Kind::wave;
            s.recipe.grid = Grid{cfg.grid_m, -1.0};
            s.recipe.t_end = cfg.t_end;
            s.recipe.dt = cfg.dt;
            const double f_off = 1.0;                     // background density
            const double g_off = synth::exp3_cubic(1.0);  // its modulus image
            spectral_recipe(s.recipe, K, f_off, g_off);
            s.dim_f = s.dim_g = (K + 1) * (K + 1);
            s.f_offset = f_off;
            s.g_offset = g_off;
            s.truth_f = synth::exp3_density(s.recipe.grid);
            s.truth_g = synth::exp3_modulus_perturbed(s.recipe.grid, truth_rng);
            s.project_g = [K, g_off](const ScalarField& G) {
                SpectralCoeffs c = basis::analyze(G, K);
                // Analysis folds constants into mode (0,0); take the fixed
                // synthesis offset back out so build_g(project_g(G)) == G on
                // band-limited fields.
                c.values[0] -= g_off;
                return c.values;
            };
            break;
        }
    }
    return s;
}

std::vector<std::vector<double>> simulate_field_measurements(const synth::ForwardRecipe& recipe,
                                                             const ScalarField& f,
                                                             const ScalarField& g, Exec exec) {
    if (f.grid != recipe.grid || g.grid != recipe.grid)
        throw ConfigError("simulate_field_measurements: field grids do not match the recipe");
    std::vector<std::vector<double>> out;
    if (recipe.kind == synth::ForwardRecipe::Kind::diffusion) {
        diffusion::DiffusionProblem p;
        p.grid = recipe.grid;
        p.gamma = f;
        p.sigma = g;
        p.robin_ell = recipe.robin_ell;
        p.sources = diffusion::four_side_sources(recipe.grid);
        diffusion::InternalData data = diffusion::internal_data(p, exec);
        out.reserve(data.fields.size());
        for (ScalarField& fld : data.fields) out.push_back(std::move(fld.values));
    } else {
        wave::WaveProblem p;
        p.grid = recipe.grid;
        p.rho = f;
        p.kappa = g;
        p.sources = {wave::standard_source(recipe.grid)};
        p.t_end = recipe.t_end;
        p.dt = recipe.dt;
        for (std::size_t h = 0; h < p.sources.size(); ++h) {
            BoundaryTrace tr = wave::propagate(p, static_cast<int>(h), exec);
            out.push_back(std::move(tr.values));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV tables.
// ---------------------------------------------------------------------------

std::string table_to_csv(const CsvTable& t) {
    if (t.header.empty()) throw IoError("csv table: empty header");
    std::string out;
    auto emit_row = [&out](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            const std::string& c = row[i];
            if (c.empty() || c.find_first_of(",\n\r") != std::string::npos)
                throw IoError("csv table: cell '" + c + "' is empty or contains a separator");
            if (i) out += ',';
            out += c;
        }
        out += '\n';
    };
    emit_row(t.header);
    for (const auto& row : t.rows) {
        if (row.size() != t.header.size())
            throw IoError("csv table: row width " + std::to_string(row.size()) +
                          " != header width " + std::to_string(t.header.size()));
        emit_row(row);
    }
    return out;
}

CsvTable parse_csv_table(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                cells.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        cells.push_back(cur);
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            if (cells.size() != t.header.size())
                throw IoError("csv table: ragged row '" + line + "'");
            t.rows.push_back(std::move(cells));
        }
    }
    if (first) throw IoError("csv table: empty input");
    return t;
}

// ---------------------------------------------------------------------------
// Pipeline phases.
// ---------------------------------------------------------------------------

void phase_generate(const ExperimentConfig& cfg, RunManifest* man) {
    validate_config(cfg);
    if (cfg.experiment == Experiment::exp3)
        throw ConfigError("exp3 has no learning dataset; its surrogate relation is fixed");
    ExperimentSetup s = make_setup(cfg);
    // Measurement simulations are only needed for consistency-refined
    // training, so a plain data fit skips the N forward solves.
    const synth::ForwardRecipe* recipe = cfg.learn.consistency_weight > 0 ? &s.recipe : nullptr;
    synth::TrainingDataset ds =
        synth::build_training_dataset(s.pair_gen, cfg.num_samples, cfg.seed, recipe);
    ds.generator = experiment_name(cfg.experiment);
    ds.f_offset = s.f_offset;
    ds.g_offset = s.g_offset;
    ds.g_lo = s.g_lo;
    ds.g_hi = s.g_hi;
    io::ensure_dir(cfg.out_dir);
    synth::save_dataset(join(cfg.out_dir, "dataset"), ds);
    note_artifact(man, "dataset", "dataset");
}

void phase_train(const ExperimentConfig& cfg, RunManifest* man) {
    validate_config(cfg);
    io::ensure_dir(cfg.out_dir);
    const std::string model_dir = join(cfg.out_dir, "model");

    if (cfg.experiment == Experiment::exp3) {
        learn::LearnedRelation rel = learn::make_pointwise_cubic(synth::exp3_cubic_coeffs());
        rel.provenance = "exp3 fixed pointwise cubic surrogate";
        learn::save_relation(model_dir, rel);
        note_artifact(man, "model", "model");
        return;
    }

    synth::TrainingDataset ds;
    try {
        ds = synth::load_dataset(join(cfg.out_dir, "dataset"));
    } catch (const Error& e) {
        throw IoError(std::string(e.what()) + " (run the generate phase first)");
    }
    ExperimentSetup s = make_setup(cfg);
    const synth::ForwardRecipe* recipe = cfg.learn.consistency_weight > 0 ? &s.recipe : nullptr;

    learn::LearnedRelation rel;
    std::vector<learn::LossRow> curve;
    if (cfg.model == Model::polynomial) {
        learn::PolyFitOptions opt;
        opt.degree = cfg.learn.degree;
        opt.ridge = cfg.learn.ridge;
        opt.threshold = cfg.learn.threshold;
        opt.consistency_weight = cfg.learn.consistency_weight;
        opt.seed = cfg.seed;
        rel = learn::make_polynomial_relation(learn::fit_polynomial(ds, opt, recipe));
    } else {
        learn::TrainOptions opt;
        opt.hidden = cfg.learn.hidden;
        opt.latent = cfg.learn.latent;
        opt.lr = cfg.learn.lr;
        opt.batch = cfg.learn.batch;
        opt.max_epochs = cfg.learn.max_epochs;
        opt.patience = cfg.learn.patience;
        opt.consistency_weight = cfg.learn.consistency_weight;
        opt.consistency_pairs = cfg.learn.consistency_pairs;
        opt.seed = cfg.seed;
        rel = learn::make_mlp_relation(learn::train_mlp(ds, opt, recipe, &curve));
    }
    rel.provenance = std::string(experiment_name(cfg.experiment)) + " " + model_name(cfg.model) +
                     " N=" + std::to_string(ds.size()) + " seed=" + std::to_string(cfg.seed);
    learn::save_relation(model_dir, rel);
    note_artifact(man, "model", "model");
    if (!curve.empty()) {
        learn::write_loss_csv(join(model_dir, "loss.csv"), curve);
        note_artifact(man, "loss_curve", "model/loss.csv");
    }

    CsvTable fit;
    fit.header = {"split", "mean_rel_error"};
    fit.rows = {
        {"train", io::format_double(mean_relative_prediction_error(rel, ds, ds.train_idx))},
        {"test", io::format_double(mean_relative_prediction_error(rel, ds, ds.test_idx))}};
    io::write_text(join(model_dir, "fit.csv"), table_to_csv(fit));
    note_artifact(man, "fit", "model/fit.csv");
}

void phase_invert(const ExperimentConfig& cfg, RunManifest* man) {
    InversionInputs in = prepare_inversion(cfg, man);
    invert::InversionReport rep = invert::joint_invert(
        in.prob, in.rel, inversion_config(cfg), &in.setup.truth_f, &in.setup.truth_g,
        init_or_null(in.setup));
    invert::save_report(join(cfg.out_dir, "inversion"), rep, in.prob);
    note_artifact(man, "inversion", "inversion");
}

void phase_evaluate(const ExperimentConfig& cfg, RunManifest* man) {
    validate_config(cfg);
    const std::string inv = join(cfg.out_dir, "inversion");
    nlohmann::json rep;
    try {
        rep = nlohmann::json::parse(io::read_text(join(inv, "report.json")));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(join(inv, "report.json") + ": " + e.what());
    }
    const int last = static_cast<int>(rep.at("stages").size()) - 1;
    if (last < 0) throw IoError(join(inv, "report.json") + ": no stages recorded");
    ScalarField f1 = io::read_field_csv(join(inv, "stage0_f.csv"));
    ScalarField g1 = io::read_field_csv(join(inv, "stage0_g.csv"));
    ScalarField f2 = io::read_field_csv(join(inv, "stage" + std::to_string(last) + "_f.csv"));
    ScalarField g2 = io::read_field_csv(join(inv, "stage" + std::to_string(last) + "_g.csv"));
    ScalarField tf = io::read_field_csv(join(cfg.out_dir, "truth_f.csv"));
    ScalarField tg = io::read_field_csv(join(cfg.out_dir, "truth_g.csv"));
    StepErrors e = evaluate_fields(f1, g1, f2, g2, tf, tg);
    io::write_text(join(cfg.out_dir, "errors.csv"), table_to_csv(errors_table(e)));
    note_artifact(man, "errors", "errors.csv");
}

RunManifest run_pipeline(const ExperimentConfig& cfg, bool verbose) {
    validate_config(cfg);
    RunManifest man;
    man.cfg = cfg;
    io::ensure_dir(cfg.out_dir);

    auto run = [&](const char* name, void (*fn)(const ExperimentConfig&, RunManifest*)) {
        auto t0 = std::chrono::steady_clock::now();
        try {
            fn(cfg, &man);
        } catch (...) {
            man.failed_phase = name;
            man.phases.push_back({name, seconds_since(t0)});
            try {
                save_manifest(man);
            } catch (...) {
                // keep the phase error, not the bookkeeping one
            }
            throw;
        }
        man.phases.push_back({name, seconds_since(t0)});
        if (verbose)
            std::fprintf(stderr, "[jointinv] %-9s %8.2fs\n", name, man.phases.back().seconds);
    };

    if (cfg.experiment != Experiment::exp3) run("generate", &phase_generate);
    run("train", &phase_train);
    run("invert", &phase_invert);
    run("evaluate", &phase_evaluate);
    save_manifest(man);
    return man;
}

void save_manifest(const RunManifest& man) {
    nlohmann::ordered_json j;
    j["format"] = "jointinv-manifest";
    j["version"] = 1;
    j["tool"] = {{"name", kToolName}, {"version", kToolVersion}};
    nlohmann::ordered_json cj;
    for (const auto& [k, v] : config_pairs(man.cfg)) cj[k] = v;
    j["config"] = std::move(cj);
    j["seeds"] = {
        {"master", man.cfg.seed},
        {"fan_out",
         "stream = (phase << 32) | index; phases: dataset=1 training=2 truth=3 noise=4 "
         "inversion=5 sensitivity=6; dataset sample k uses index k, the split uses index N, "
         "the relation spec uses index 4294967295; noise uses one index per measurement "
         "array; truth and sensitivity use index 0"}};
    if (man.cfg.experiment != Experiment::exp3) {
        // Figure-style display scaling only; every emitted field is unscaled.
        j["display_factors"] = {{"f", 1000.0}, {"g", 50.0}};
    }
    j["phases"] = nlohmann::ordered_json::array();
    for (const PhaseTime& p : man.phases)
        j["phases"].push_back({{"name", p.name}, {"seconds", p.seconds}});
    nlohmann::ordered_json aj = nlohmann::ordered_json::object();
    for (const auto& [name, path] : man.artifacts) aj[name] = path;
    j["artifacts"] = std::move(aj);
    if (man.failed_phase.empty())
        j["failed_phase"] = nullptr;
    else
        j["failed_phase"] = man.failed_phase;
    io::write_text(join(man.cfg.out_dir, "manifest.json"), j.dump(2) + "\n");
}

double mean_relative_prediction_error(const learn::LearnedRelation& rel,
                                      const synth::TrainingDataset& ds,
                                      const std::vector<int>& idx) {
    if (idx.empty()) throw ConfigError("prediction error: empty index set");
    double acc = 0.0;
    for (int i : idx) {
        if (i < 0 || i >= ds.size()) throw ConfigError("prediction error: index out of range");
        const std::vector<double>& gi = ds.g[static_cast<std::size_t>(i)];
        const std::vector<double> pred = rel.predict(ds.f[static_cast<std::size_t>(i)]);
        if (pred.size() != gi.size())
            throw ConfigError("prediction error: model output dimension mismatch");
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < gi.size(); ++k) {
            num += (pred[k] - gi[k]) * (pred[k] - gi[k]);
            den += gi[k] * gi[k];
        }
        acc += std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
    }
    return acc / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Error table.
// ---------------------------------------------------------------------------

StepErrors evaluate_fields(const ScalarField& f_one, const ScalarField& g_one,
                           const ScalarField& f_two, const ScalarField& g_two,
                           const ScalarField& truth_f, const ScalarField& truth_g) {
    StepErrors e;
    e.f_one = invert::relative_l2_error(f_one, truth_f);
    e.g_one = invert::relative_l2_error(g_one, truth_g);
    e.f_two = invert::relative_l2_error(f_two, truth_f);
    e.g_two = invert::relative_l2_error(g_two, truth_g);
    return e;
}

CsvTable errors_table(const StepErrors& e) {
    CsvTable t;
    t.header = {"step", "f_error", "g_error"};
    t.rows = {{"one", io::format_double(e.f_one), io::format_double(e.g_one)},
              {"two", io::format_double(e.f_two), io::format_double(e.g_two)}};
    return t;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep.
// ---------------------------------------------------------------------------

SweepResult sweep_hyperparams(const ExperimentConfig& cfg, const std::vector<int>& J_list,
                              const std::vector<double>& alpha0_list, bool verbose) {
    validate_config(cfg);
    if (J_list.empty() || alpha0_list.empty())
        throw ConfigError("sweep: J and alpha0 lists must be nonempty");
    for (int J : J_list)
        if (J < 1) throw ConfigError("sweep: every J must be at least 1");
    for (double a : alpha0_list)
        if (!(a >= 0.0)) throw ConfigError("sweep: every alpha0 must be nonnegative");

    if (cfg.experiment != Experiment::exp3) phase_generate(cfg, nullptr);
    phase_train(cfg, nullptr);
    InversionInputs in = prepare_inversion(cfg, nullptr);

    SweepResult res;
    res.J_list = J_list;
    res.alpha0_list = alpha0_list;
    res.err_f.assign(J_list.size() * alpha0_list.size(), kNaN);
    res.err_g.assign(J_list.size() * alpha0_list.size(), kNaN);

    io::ensure_dir(join(cfg.out_dir, "sweep"));
    for (std::size_t ji = 0; ji < J_list.size(); ++ji) {
        for (std::size_t ai = 0; ai < alpha0_list.size(); ++ai) {
            invert::InversionConfig icfg = inversion_config(cfg);
            icfg.J = J_list[ji];
            icfg.alpha0 = alpha0_list[ai];
            const std::size_t cell = ji * alpha0_list.size() + ai;
            const std::string label =
                "J=" + std::to_string(icfg.J) + " alpha0=" + io::format_double(icfg.alpha0);
            try {
                invert::InversionReport rep =
                    invert::joint_invert(in.prob, in.rel, icfg, &in.setup.truth_f,
                                         &in.setup.truth_g, init_or_null(in.setup));
                res.err_f[cell] = rep.stages.back().err_f;
                res.err_g[cell] = rep.stages.back().err_g;
                invert::save_report(join(cfg.out_dir, "sweep/J" + std::to_string(icfg.J) + "_a" +
                                                          std::to_string(ai)),
                                    rep, in.prob);
            } catch (const Error& e) {
                res.failures.push_back(label + ": " + e.what());
            }
            if (verbose)
                std::fprintf(stderr, "[jointinv] sweep %-26s err_f=%.3e err_g=%.3e\n",
                             label.c_str(), res.err_f[cell], res.err_g[cell]);
        }
    }

    io::write_text(join(cfg.out_dir, "sweep_f.csv"), table_to_csv(sweep_table(res, false)));
    io::write_text(join(cfg.out_dir, "sweep_g.csv"), table_to_csv(sweep_table(res, true)));
    if (!res.failures.empty()) {
        std::string log;
        for (const std::string& s : res.failures) log += s + "\n";
        io::write_text(join(cfg.out_dir, "sweep_failures.txt"), log);
    }
    return res;
}

CsvTable sweep_table(const SweepResult& res, bool g_table) {
    CsvTable t;
    t.header.push_back("J");
    for (double a : res.alpha0_list) t.header.push_back("alpha0=" + io::format_double(a));
    const std::vector<double>& err = g_table ? res.err_g : res.err_f;
    if (err.size() != res.J_list.size() * res.alpha0_list.size())
        throw ConfigError("sweep table: cell count does not match the lists");
    for (std::size_t ji = 0; ji < res.J_list.size(); ++ji) {
        std::vector<std::string> row;
        row.push_back(std::to_string(res.J_list[ji]));
        for (std::size_t ai = 0; ai < res.alpha0_list.size(); ++ai)
            row.push_back(io::format_double(err[ji * res.alpha0_list.size() + ai]));
        t.rows.push_back(std::move(row));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Relation sensitivity probe.
// ---------------------------------------------------------------------------

std::vector<double*> relation_parameters(learn::LearnedRelation& rel) {
    std::vector<double*> out;
    switch (rel.variant) {
        case learn::LearnedRelation::Variant::polynomial:
            out.reserve(rel.poly.theta.size());
            for (double& v : rel.poly.theta) out.push_back(&v);
            break;
        case learn::LearnedRelation::Variant::mlp:
            for (learn::Mlp* net : {&rel.mlp.encoder, &rel.mlp.decoder, &rel.mlp.predictor})
                for (learn::Layer& l : net->layers) {
                    for (double& v : l.w) out.push_back(&v);
                    for (double& v : l.b) out.push_back(&v);
                }
            break;
        case learn::LearnedRelation::Variant::pointwise_cubic:
            for (double& v : rel.cubic) out.push_back(&v);
            break;
    }
    return out;
}

SensitivityResult sensitivity_sweep(const ExperimentConfig& cfg,
                                    const std::vector<double>& epsilons, bool verbose) {
    validate_config(cfg);
    if (epsilons.empty()) throw ConfigError("sensitivity: epsilon list must be nonempty");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        if (!(epsilons[i] >= 0.0))
            throw ConfigError("sensitivity: epsilons must be nonnegative");
        if (i > 0 && epsilons[i] < epsilons[i - 1])
            throw ConfigError("sensitivity: epsilons must be sorted ascending");
    }
    if (cfg.noise.kind != synth::NoiseSpec::Kind::none)
        throw ConfigError("sensitivity runs on noise-free data; set noise.kind = none");

    if (cfg.experiment != Experiment::exp3) phase_generate(cfg, nullptr);
    phase_train(cfg, nullptr);
    InversionInputs in = prepare_inversion(cfg, nullptr);
    const invert::InversionConfig icfg = inversion_config(cfg);
    const std::vector<double>* f0 = init_or_null(in.setup);

    // Fixed unit direction in relation-parameter space, one draw per sweep.
    std::vector<double> dir(relation_parameters(in.rel).size());
    {
        Rng rng = make_rng(cfg.seed, SeedPhase::sensitivity, 0);
        double norm2 = 0.0;
        for (double& d : dir) {
            d = rng.normal01();
            norm2 += d * d;
        }
        const double norm = std::sqrt(norm2);
        if (norm > 0.0)
            for (double& d : dir) d /= norm;
    }

    // N(f*) as a field: the prediction at the true coefficient, synthesized
    // (vector relations) or applied nodewise (the pointwise surrogate).
    auto predict_field = [&](const learn::LearnedRelation& rel) {
        if (rel.variant == learn::LearnedRelation::Variant::pointwise_cubic) {
            ScalarField G = in.setup.truth_f;
            G.values = rel.predict(in.setup.truth_f.values);
            return G;
        }
        return in.prob.recipe.build_g(rel.predict(in.setup.truth_f_params));
    };
    auto reconstructed_g = [&](const invert::InversionReport& rep) {
        return in.prob.recipe.build_g(rep.stages.back().g);
    };

    invert::InversionReport base = invert::joint_invert(in.prob, in.rel, icfg, &in.setup.truth_f,
                                                        &in.setup.truth_g, f0);
    const ScalarField base_pred = predict_field(in.rel);
    const ScalarField base_recon = reconstructed_g(base);

    SensitivityResult res;
    res.epsilon = epsilons;
    io::ensure_dir(join(cfg.out_dir, "sensitivity"));
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        const double eps = epsilons[i];
        const std::string cell_dir = join(cfg.out_dir, "sensitivity/eps" + std::to_string(i));
        double rel_disc = 0.0;
        double recon_disc = 0.0;
        if (eps == 0.0) {
            // The unperturbed run is the baseline itself.
            invert::save_report(cell_dir, base, in.prob);
        } else {
            learn::LearnedRelation rel = in.rel;
            std::vector<double*> slots = relation_parameters(rel);
            for (std::size_t k = 0; k < slots.size(); ++k) *slots[k] += eps * dir[k];
            ScalarField diff = predict_field(rel);
            for (std::size_t n = 0; n < diff.values.size(); ++n)
                diff.values[n] -= base_pred.values[n];
            rel_disc = l2_norm(diff);
            try {
                invert::InversionReport rep = invert::joint_invert(
                    in.prob, rel, icfg, &in.setup.truth_f, &in.setup.truth_g, f0);
                invert::save_report(cell_dir, rep, in.prob);
                recon_disc = invert::relative_l2_error(reconstructed_g(rep), base_recon);
            } catch (const Error& e) {
                throw Error(e.code(),
                            "sensitivity epsilon=" + io::format_double(eps) + ": " + e.what());
            }
        }
        res.relation_discrepancy.push_back(rel_disc);
        res.reconstruction_discrepancy.push_back(recon_disc);
        if (verbose)
            std::fprintf(stderr, "[jointinv] sensitivity eps=%-12s relation=%.3e recon=%.3e\n",
                         io::format_double(eps).c_str(), rel_disc, recon_disc);
    }
    io::write_text(join(cfg.out_dir, "sensitivity.csv"), table_to_csv(sensitivity_table(res)));
    return res;
}

CsvTable sensitivity_table(const SensitivityResult& res) {
    CsvTable t;
    t.header = {"epsilon", "relation_discrepancy", "reconstruction_discrepancy"};
    for (std::size_t i = 0; i < res.epsilon.size(); ++i)
        t.rows.push_back({io::format_double(res.epsilon[i]),
                          io::format_double(res.relation_discrepancy[i]),
                          io::format_double(res.reconstruction_discrepancy[i])});
    return t;
}

}  // namespace jointinv::harness
