// Command-line driver. Subcommands map onto the harness phases:
//
//   generate     draw the training dataset
//   train        fit the relation model (exp3: store the fixed surrogate)
//   invert       simulate measurements and run the staged joint inversion
//   evaluate     error table from an existing inversion directory
//   pipeline     all of the above plus the run manifest
//   sweep        grid of inversions over (J, alpha0)
//   sensitivity  relation-perturbation probe on noise-free data

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "jointinv/errors.hpp"
#include "jointinv/exec.hpp"
#include "jointinv/harness.hpp"
#include "jointinv/version.hpp"

namespace {

using namespace jointinv;

struct GlobalOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;
    bool verbose = false;
};

harness::ExperimentConfig load_cfg(const GlobalOpts& g) {
    if (g.config_path.empty()) throw ConfigError("--config is required");
    harness::ExperimentConfig cfg = harness::load_config(g.config_path);
    if (g.seed) {
        cfg.seed = *g.seed;
        cfg.noise.seed = *g.seed;
    }
    if (g.out) cfg.out_dir = *g.out;
    harness::validate_config(cfg);
    return cfg;
}

void apply_threads(const GlobalOpts& g) {
    int n = 0;
    if (g.threads) {
        n = *g.threads;
        if (n < 0) throw ConfigError("--threads must be nonnegative");
    } else if (const char* env = std::getenv("JOINTINV_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 0 || v > 1 << 20)
            throw ConfigError("JOINTINV_THREADS must be a nonnegative integer");
        n = static_cast<int>(v);
    }
    if (n > 0) set_threads(n);
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) throw ConfigError(what + ": empty element in '" + text + "'");
        char* end = nullptr;
        double v = std::strtod(cur.c_str(), &end);
        if (end != cur.c_str() + cur.size() || !std::isfinite(v))
            throw ConfigError(what + ": bad number '" + cur + "'");
        out.push_back(v);
        cur.clear();
    };
    for (char ch : text) {
        if (ch == ',')
            flush();
        else if (!std::isspace(static_cast<unsigned char>(ch)))
            cur += ch;
    }
    flush();
    return out;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
    std::vector<int> out;
    for (double v : parse_list(text, what)) {
        const int iv = static_cast<int>(std::llround(v));
        if (static_cast<double>(iv) != v)
            throw ConfigError(what + ": entries must be integers");
        out.push_back(iv);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(kToolName) + " " + kToolVersion +
                 ": learned-relation two-coefficient inversion"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--config", g.config_path, "experiment config file (key = value lines)");
    app.add_option("--seed", g.seed, "master seed, overrides the config file");
    app.add_option("--out", g.out, "output directory, overrides the config file");
    app.add_option("--threads", g.threads,
                   "worker threads (default: JOINTINV_THREADS or all cores)");
    app.add_flag("--verbose", g.verbose, "progress lines on stderr");

    CLI::App* c_generate = app.add_subcommand("generate", "draw the training dataset");
    CLI::App* c_train = app.add_subcommand("train", "fit the relation model");
    CLI::App* c_invert = app.add_subcommand("invert", "run the staged joint inversion");
    CLI::App* c_evaluate = app.add_subcommand("evaluate", "error table for an existing run");
    CLI::App* c_pipeline = app.add_subcommand("pipeline", "generate, train, invert, evaluate");
    CLI::App* c_sweep = app.add_subcommand("sweep", "inversion grid over (J, alpha0)");
    std::string j_arg = "1,2,3";
    std::string a_arg = "0,1e-7,1e-8";
    c_sweep->add_option("--J", j_arg, "comma-separated outer-stage counts");
    c_sweep->add_option("--alpha0", a_arg, "comma-separated initial penalty weights");
    CLI::App* c_sens = app.add_subcommand("sensitivity", "relation-perturbation probe");
    std::string eps_arg = "0,1e-3,1e-2,1e-1";
    c_sens->add_option("--eps", eps_arg, "comma-separated perturbation sizes, ascending");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    try {
        apply_threads(g);
        if (c_generate->parsed()) {
            harness::phase_generate(load_cfg(g));
        } else if (c_train->parsed()) {
            harness::phase_train(load_cfg(g));
        } else if (c_invert->parsed()) {
            harness::phase_invert(load_cfg(g));
        } else if (c_evaluate->parsed()) {
            harness::phase_evaluate(load_cfg(g));
        } else if (c_pipeline->parsed()) {
            harness::run_pipeline(load_cfg(g), g.verbose);
        } else if (c_sweep->parsed()) {
            harness::sweep_hyperparams(load_cfg(g), parse_int_list(j_arg, "--J"),
                                       parse_list(a_arg, "--alpha0"), g.verbose);
        } else if (c_sens->parsed()) {
            harness::sensitivity_sweep(load_cfg(g), parse_list(eps_arg, "--eps"), g.verbose);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "%s: error: %s\n", kToolName, e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s: error: %s\n", kToolName, e.what());
        return static_cast<int>(ExitCode::numerical);
    }
    return 0;
}
