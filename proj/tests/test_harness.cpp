#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "jointinv/basis.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/harness.hpp"
#include "jointinv/invert.hpp"
#include "jointinv/io.hpp"
#include "jointinv/learn.hpp"
#include "jointinv/rng.hpp"
#include "jointinv/synth.hpp"

using namespace jointinv;
using namespace jointinv::harness;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const char* tag) {
        path = std::filesystem::temp_directory_path() /
               (std::string("jointinv_harness_") + tag + "_" + std::to_string(getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str(const char* sub) const { return (path / sub).string(); }
};

bool contains(const std::string& hay, const std::string& needle) {
    return hay.find(needle) != std::string::npos;
}

// Runs `fn`, requires it to throw Error with the given exit code and a
// message mentioning `needle`.
template <typename Fn>
void check_error(Fn fn, ExitCode code, const std::string& needle) {
    try {
        fn();
        FAIL_CHECK("expected an error mentioning '" << needle << "', none thrown");
    } catch (const Error& e) {
        CHECK(e.code() == code);
        CHECK_MESSAGE(contains(e.what(), needle),
                      "message '" << e.what() << "' lacks '" << needle << "'");
    }
}

// Small enough that a full pipeline takes well under a second.
ExperimentConfig tiny_exp1(const std::string& out) {
    ExperimentConfig cfg;
    cfg.experiment = Experiment::exp1;
    cfg.grid_m = 8;
    cfg.kmax = 1;
    cfg.num_samples = 40;
    cfg.learn.degree = 2;
    cfg.inversion.J = 2;
    cfg.inversion.max_bfgs_iters = 60;
    cfg.inversion.K = cfg.kmax;
    cfg.seed = 7;
    cfg.noise.seed = cfg.seed;
    cfg.out_dir = out;
    return cfg;
}

ExperimentConfig tiny_exp3(const std::string& out) {
    ExperimentConfig cfg;
    cfg.experiment = Experiment::exp3;
    cfg.model = Model::surrogate;
    cfg.grid_m = 12;
    cfg.kmax = 1;
    cfg.t_end = 0.5;
    cfg.dt = 0.025;
    cfg.inversion.J = 1;
    cfg.inversion.max_bfgs_iters = 30;
    cfg.inversion.K = cfg.kmax;
    cfg.seed = 7;
    cfg.noise.seed = cfg.seed;
    cfg.out_dir = out;
    return cfg;
}

}  // namespace

TEST_CASE("experiment and model names round-trip") {
    for (Experiment e : {Experiment::exp1, Experiment::exp2, Experiment::exp3})
        CHECK(experiment_from_name(experiment_name(e)) == e);
    for (Model m : {Model::polynomial, Model::mlp, Model::surrogate})
        CHECK(model_from_name(model_name(m)) == m);
    check_error([] { experiment_from_name("exp4"); }, ExitCode::config, "exp4");
    check_error([] { model_from_name("linear"); }, ExitCode::config, "linear");
}

TEST_CASE("config text round-trips through parse") {
    ExperimentConfig cfg;
    cfg.experiment = Experiment::exp2;
    cfg.grid_m = 24;
    cfg.kmax = 2;
    cfg.num_samples = 123;
    cfg.noise.kind = synth::NoiseSpec::Kind::multiplicative;
    cfg.noise.level = 0.05;
    cfg.model = Model::mlp;
    cfg.learn.degree = 4;
    cfg.learn.ridge = 1e-10;
    cfg.learn.hidden = 17;
    cfg.learn.latent = 5;
    cfg.learn.lr = 2e-3;
    cfg.learn.batch = 16;
    cfg.learn.max_epochs = 55;
    cfg.learn.patience = 9;
    cfg.learn.consistency_weight = 0.25;
    cfg.learn.consistency_pairs = 3;
    cfg.inversion.J = 4;
    cfg.inversion.alpha0 = 1e-7;
    cfg.inversion.reg_gamma = 1e-9;
    cfg.inversion.tol_grad = 1e-10;
    cfg.inversion.max_bfgs_iters = 77;
    cfg.t_end = 2.5;
    cfg.dt = 0.01;
    cfg.robin_ell = 0.8;
    cfg.seed = 18446744073709551615ull;  // uint64 max survives the trip
    cfg.out_dir = "results/run1";

    const std::string text = config_to_text(cfg);
    ExperimentConfig back = parse_config_text(text, "mem");
    CHECK(config_to_text(back) == text);
    CHECK(back.seed == cfg.seed);
    CHECK(back.noise.seed == cfg.seed);     // filled from the master seed
    CHECK(back.inversion.K == back.kmax);   // kept in lockstep
}

TEST_CASE("config parser reports file and line") {
    check_error([] { parse_config_text("grid.m = 8\ngrid.m = 9\n", "mem"); }, ExitCode::config,
                "mem:2: duplicate key");
    check_error([] { parse_config_text("grid.em = 8\n", "mem"); }, ExitCode::config,
                "unknown key 'grid.em'");
    check_error([] { parse_config_text("kmax 3\n", "mem"); }, ExitCode::config,
                "expected 'key = value'");
    check_error([] { parse_config_text("kmax =\n", "mem"); }, ExitCode::config, "missing value");
    check_error([] { parse_config_text("= 3\n", "mem"); }, ExitCode::config, "missing key");
    check_error([] { parse_config_text("kmax = abc\n", "mem"); }, ExitCode::config, "mem:1");
    check_error([] { parse_config_text("noise.level = nan\n", "mem"); }, ExitCode::config,
                "mem:1");
    check_error([] { parse_config_text("seed = -4\n", "mem"); }, ExitCode::config, "mem:1");

    // Comments, blank lines, and trailing comments are all fine.
    ExperimentConfig cfg = parse_config_text("# header\n\nkmax = 2 # band\ngrid.m = 8\n", "mem");
    CHECK(cfg.kmax == 2);
    CHECK(cfg.grid_m == 8);
}

TEST_CASE("validate_config enforces cross-field rules") {
    auto mutate = [](auto fn) {
        ExperimentConfig cfg;
        fn(cfg);
        validate_config(cfg);
    };
    auto bad = [&](auto fn, const std::string& needle) {
        check_error([&] { mutate(fn); }, ExitCode::config, needle);
    };
    mutate([](ExperimentConfig&) {});  // defaults pass

    bad([](ExperimentConfig& c) { c.grid_m = 3; }, "grid.m");
    bad([](ExperimentConfig& c) { c.kmax = -1; }, "kmax");
    bad([](ExperimentConfig& c) { c.grid_m = 8; c.kmax = 3; }, "4*kmax");
    bad([](ExperimentConfig& c) { c.num_samples = 5; }, "dataset.n");
    bad([](ExperimentConfig& c) { c.noise.level = -0.1; }, "noise.level");
    bad([](ExperimentConfig& c) { c.noise.level = 1.0; }, "noise.level");
    bad([](ExperimentConfig& c) { c.noise.level = 0.05; }, "noise.kind");
    bad([](ExperimentConfig& c) { c.experiment = Experiment::exp3; }, "surrogate");
    bad([](ExperimentConfig& c) { c.model = Model::surrogate; }, "exp3");
    bad([](ExperimentConfig& c) { c.learn.degree = 0; }, "learn.degree");
    bad([](ExperimentConfig& c) { c.learn.lr = 0.0; }, "learn.lr");
    bad([](ExperimentConfig& c) { c.inversion.J = 0; }, "inversion.J");
    bad([](ExperimentConfig& c) { c.inversion.alpha0 = -1e-8; }, "alpha0");
    bad([](ExperimentConfig& c) { c.inversion.tol_grad = 0.0; }, "tol_grad");
    bad([](ExperimentConfig& c) { c.inversion.max_bfgs_iters = 0; }, "max_iters");
    bad([](ExperimentConfig& c) { c.t_end = 0.0; }, "t_end");
    bad([](ExperimentConfig& c) { c.dt = -0.1; }, "dt");
    bad([](ExperimentConfig& c) { c.dt = 10.0; }, "t_end");
    bad([](ExperimentConfig& c) { c.robin_ell = 0.0; }, "diffusion.ell");
    bad([](ExperimentConfig& c) { c.out_dir.clear(); }, "out");
    // exp3 wants an integer number of time steps.
    bad(
        [](ExperimentConfig& c) {
            c.experiment = Experiment::exp3;
            c.model = Model::surrogate;
            c.t_end = 1.0;
            c.dt = 0.3;
        },
        "integer multiple");
    mutate([](ExperimentConfig& c) {
        c.experiment = Experiment::exp3;
        c.model = Model::surrogate;
        c.t_end = 1.0;
        c.dt = 0.25;
    });
}

TEST_CASE("csv tables are strict and round-trip byte for byte") {
    CsvTable t;
    t.header = {"a", "b"};
    t.rows = {{"1", "2"}, {"3.5", "-4e-3"}};
    const std::string text = table_to_csv(t);
    CHECK(text == "a,b\n1,2\n3.5,-4e-3\n");
    CsvTable back = parse_csv_table(text);
    CHECK(table_to_csv(back) == text);

    // CRLF input normalizes to LF on the way through.
    CsvTable crlf = parse_csv_table("a,b\r\n1,2\r\n");
    CHECK(table_to_csv(crlf) == "a,b\n1,2\n");

    check_error([] { table_to_csv(CsvTable{}); }, ExitCode::io, "header");
    check_error(
        [] {
            CsvTable bad{{"a", "b"}, {{"1"}}};
            table_to_csv(bad);
        },
        ExitCode::io, "");
    check_error(
        [] {
            CsvTable bad{{"a"}, {{"1,2"}}};
            table_to_csv(bad);
        },
        ExitCode::io, "");
    check_error([] { parse_csv_table(""); }, ExitCode::io, "");
    check_error([] { parse_csv_table("a,b\n1\n"); }, ExitCode::io, "");
}

TEST_CASE("make_setup is a pure function of the config") {
    TempDir tmp("setup");
    ExperimentConfig cfg = tiny_exp1(tmp.str("out"));
    ExperimentSetup a = make_setup(cfg);
    ExperimentSetup b = make_setup(cfg);
    CHECK(a.dim_f == 4);
    CHECK(a.dim_g == 4);
    CHECK(a.truth_f.values == b.truth_f.values);
    CHECK(a.truth_g.values == b.truth_g.values);
    CHECK(a.truth_f_params == b.truth_f_params);
    CHECK(a.g_lo == 0.01);
    CHECK(a.g_hi == 0.06);
    CHECK(a.f_init.empty());
    CHECK(bool(a.pair_gen));
    // Offsets sit mid-band for the rescaled pair generator.
    CHECK(a.f_offset == doctest::Approx(1e-3));
    CHECK(a.g_offset == doctest::Approx(0.035));

    cfg.seed = 8;
    cfg.noise.seed = 8;
    ExperimentSetup c = make_setup(cfg);
    CHECK(a.truth_f.values != c.truth_f.values);

    ExperimentConfig cfg2 = tiny_exp1(tmp.str("out2"));
    cfg2.experiment = Experiment::exp2;
    ExperimentSetup s2 = make_setup(cfg2);
    CHECK(s2.dim_f == 5);
    CHECK(s2.dim_g == 5);
    CHECK(s2.truth_f_params.size() == 5);
    CHECK(s2.f_init == std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5});
}

TEST_CASE("exp3 setup: wave grid, fixed offsets, projection inverts synthesis") {
    TempDir tmp("exp3setup");
    ExperimentConfig cfg = tiny_exp3(tmp.str("out"));
    ExperimentSetup s = make_setup(cfg);
    CHECK(!s.pair_gen);
    CHECK(s.truth_f_params.empty());
    CHECK(s.recipe.grid.y_offset == -1.0);
    CHECK(s.f_offset == 1.0);
    CHECK(s.g_offset == doctest::Approx(synth::exp3_cubic(1.0)));
    REQUIRE(bool(s.project_g));

    // project_g is a left inverse of build_g on band-limited moduli.
    std::vector<double> p(static_cast<std::size_t>(s.dim_g), 0.0);
    Rng rng = make_rng(3, SeedPhase::truth, 1);
    for (double& v : p) v = 0.05 * rng.normal01();
    const std::vector<double> q = s.project_g(s.recipe.build_g(p));
    REQUIRE(q.size() == p.size());
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-10));
}

TEST_CASE("simulate_field_measurements matches the parameter-space path") {
    TempDir tmp("fieldsim");
    ExperimentConfig cfg = tiny_exp1(tmp.str("out"));
    ExperimentSetup s = make_setup(cfg);
    const auto via_params =
        synth::simulate_measurements(s.recipe, s.truth_f_params, s.truth_g_params);
    const auto via_fields = simulate_field_measurements(
        s.recipe, s.recipe.build_f(s.truth_f_params), s.recipe.build_g(s.truth_g_params));
    REQUIRE(via_params.size() == via_fields.size());
    for (std::size_t i = 0; i < via_params.size(); ++i) CHECK(via_params[i] == via_fields[i]);

    ScalarField wrong(Grid{cfg.grid_m + 4, 0.0}, 1.0);
    check_error([&] { simulate_field_measurements(s.recipe, wrong, s.truth_g); },
                ExitCode::config, "grid");
}

TEST_CASE("evaluate_fields and the errors table") {
    TempDir tmp("eval");
    ExperimentSetup s = make_setup(tiny_exp1(tmp.str("out")));
    StepErrors zero = evaluate_fields(s.truth_f, s.truth_g, s.truth_f, s.truth_g, s.truth_f,
                                      s.truth_g);
    CHECK(zero.f_one == 0.0);
    CHECK(zero.g_one == 0.0);
    CHECK(zero.f_two == 0.0);
    CHECK(zero.g_two == 0.0);

    ScalarField scaled_f = s.truth_f;
    for (double& v : scaled_f.values) v *= 1.1;
    StepErrors e = evaluate_fields(scaled_f, s.truth_g, s.truth_f, s.truth_g, s.truth_f,
                                   s.truth_g);
    CHECK(e.f_one == doctest::Approx(0.1));
    CHECK(e.f_two == 0.0);

    CsvTable t = errors_table(e);
    REQUIRE(t.header == std::vector<std::string>{"step", "f_error", "g_error"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "one");
    CHECK(t.rows[1][0] == "two");
    CHECK(t.rows[0][1] == io::format_double(e.f_one));
    CHECK(t.rows[1][2] == io::format_double(e.g_two));
}

TEST_CASE("mean relative prediction error against a hand value") {
    // Fit a linear relation exactly, then rescale the targets so every
    // sample's relative error is exactly 0.5.
    synth::TrainingDataset ds;
    ds.feature_dim = 2;
    Rng rng = make_rng(5, SeedPhase::dataset, 0);
    for (int k = 0; k < 30; ++k) {
        std::vector<double> f = {rng.normal01(), rng.normal01()};
        ds.f.push_back(f);
        ds.g.push_back({2.0 * f[0] + f[1], f[0] - f[1]});
        (k % 5 == 0 ? ds.test_idx : ds.train_idx).push_back(k);
    }
    learn::PolyFitOptions opt;
    opt.degree = 1;
    opt.ridge = 0.0;
    opt.threshold = 0.0;
    learn::LearnedRelation rel =
        learn::make_polynomial_relation(learn::fit_polynomial(ds, opt));
    CHECK(mean_relative_prediction_error(rel, ds, ds.test_idx) ==
          doctest::Approx(0.0).epsilon(1e-8));

    for (auto& g : ds.g)
        for (double& v : g) v *= 2.0;
    CHECK(mean_relative_prediction_error(rel, ds, ds.test_idx) == doctest::Approx(0.5));
}

TEST_CASE("relation_parameters exposes every trainable slot") {
    learn::LearnedRelation cubic = learn::make_pointwise_cubic({0.5, 1.0, 0.0, 2.0});
    std::vector<double*> cp = relation_parameters(cubic);
    REQUIRE(cp.size() == 4);
    *cp[0] += 1.0;
    CHECK(cubic.predict({0.0})[0] == doctest::Approx(1.5));

    learn::PolynomialRelation poly;
    poly.d = 2;
    poly.n = 1;
    poly.out_dim = 2;
    poly.theta.assign(poly.out_dim * learn::num_monomials(2, 1), 0.0);
    learn::LearnedRelation lp = learn::make_polynomial_relation(poly);
    CHECK(relation_parameters(lp).size() == poly.theta.size());

    synth::TrainingDataset ds;
    ds.feature_dim = 2;
    Rng rng = make_rng(6, SeedPhase::dataset, 0);
    for (int k = 0; k < 20; ++k) {
        ds.f.push_back({rng.normal01(), rng.normal01()});
        ds.g.push_back({ds.f.back()[0], ds.f.back()[1]});
        (k % 5 == 0 ? ds.test_idx : ds.train_idx).push_back(k);
    }
    learn::TrainOptions mopt;
    mopt.hidden = 4;
    mopt.latent = 2;
    mopt.max_epochs = 2;
    mopt.batch = 8;
    mopt.consistency_weight = 0.0;
    learn::LearnedRelation mlp = learn::make_mlp_relation(learn::train_mlp(ds, mopt));
    std::size_t expect = 0;
    for (const learn::Mlp* net :
         {&mlp.mlp.encoder, &mlp.mlp.decoder, &mlp.mlp.predictor})
        for (const learn::Layer& l : net->layers) expect += l.w.size() + l.b.size();
    CHECK(relation_parameters(mlp).size() == expect);
}

TEST_CASE("pipeline produces a complete manifest and is deterministic") {
    TempDir tmp("pipe");
    ExperimentConfig cfg = tiny_exp1(tmp.str("a"));
    RunManifest man = run_pipeline(cfg);
    CHECK(man.failed_phase.empty());
    REQUIRE(man.phases.size() == 4);
    CHECK(man.phases[0].name == "generate");
    CHECK(man.phases[3].name == "evaluate");

    const std::string man_path = tmp.str("a/manifest.json");
    REQUIRE(std::filesystem::exists(man_path));
    nlohmann::json j = nlohmann::json::parse(io::read_text(man_path));
    CHECK(j.at("format") == "jointinv-manifest");
    CHECK(j.at("failed_phase").is_null());
    CHECK(j.at("display_factors").at("f") == 1000.0);
    CHECK(j.at("display_factors").at("g") == 50.0);
    // Every artifact the manifest references exists on disk.
    REQUIRE(!j.at("artifacts").empty());
    for (const auto& [name, rel] : j.at("artifacts").items())
        CHECK_MESSAGE(std::filesystem::exists(tmp.path / "a" / rel.get<std::string>()),
                      "missing artifact " << name);
    // The config echo reproduces the run's configuration.
    std::string echo_text;
    for (const auto& [k, v] : j.at("config").items())
        echo_text += k + " = " + v.get<std::string>() + "\n";
    ExperimentConfig echo = parse_config_text(echo_text, "echo");
    CHECK(config_to_text(echo) == config_to_text(cfg));

    // Same seed, fresh directory: byte-identical outputs.
    ExperimentConfig cfg_b = cfg;
    cfg_b.out_dir = tmp.str("b");
    run_pipeline(cfg_b);
    for (const char* rel : {"errors.csv", "truth_f.csv", "model/fit.csv",
                            "inversion/stage2_f.csv", "inversion/stage2_g.csv"})
        CHECK(io::read_text(tmp.str("a") + "/" + rel) == io::read_text(tmp.str("b") + "/" + rel));

    // Reconstruction improves across stages on this easy noise-free problem.
    CsvTable errs = parse_csv_table(io::read_text(tmp.str("a/errors.csv")));
    REQUIRE(errs.rows.size() == 2);
    const double f_one = std::stod(errs.rows[0][1]);
    const double f_two = std::stod(errs.rows[1][1]);
    CHECK(std::isfinite(f_one));
    CHECK(f_two < f_one);
}

TEST_CASE("phases run in isolation against the same output directory") {
    TempDir tmp("phases");
    ExperimentConfig cfg = tiny_exp1(tmp.str("split"));

    // Out-of-order calls fail with a pointer to the missing phase.
    check_error([&] { phase_train(cfg); }, ExitCode::io, "generate");
    check_error([&] { phase_invert(cfg); }, ExitCode::io, "train");

    phase_generate(cfg);
    CHECK(std::filesystem::exists(tmp.str("split/dataset")));
    phase_train(cfg);
    CHECK(std::filesystem::exists(tmp.str("split/model/fit.csv")));
    phase_invert(cfg);
    CHECK(std::filesystem::exists(tmp.str("split/inversion/report.json")));
    phase_evaluate(cfg);

    ExperimentConfig whole = cfg;
    whole.out_dir = tmp.str("whole");
    run_pipeline(whole);
    CHECK(io::read_text(tmp.str("split/errors.csv")) ==
          io::read_text(tmp.str("whole/errors.csv")));
}

TEST_CASE("noise enters the data phase only") {
    TempDir tmp("noise");
    ExperimentConfig clean = tiny_exp1(tmp.str("clean"));
    ExperimentConfig noisy = tiny_exp1(tmp.str("noisy"));
    noisy.noise.kind = synth::NoiseSpec::Kind::additive;
    noisy.noise.level = 0.3;
    run_pipeline(clean);
    run_pipeline(noisy);
    // Same truth and dataset, different measurements.
    CHECK(io::read_text(tmp.str("clean/truth_f.csv")) == io::read_text(tmp.str("noisy/truth_f.csv")));
    CHECK(io::read_text(tmp.str("clean/model/fit.csv")) ==
          io::read_text(tmp.str("noisy/model/fit.csv")));
    CHECK(io::read_text(tmp.str("clean/data/source0.csv")) !=
          io::read_text(tmp.str("noisy/data/source0.csv")));
}

TEST_CASE("exp3 pipeline skips learning and runs on the fixed surrogate") {
    TempDir tmp("exp3pipe");
    ExperimentConfig cfg = tiny_exp3(tmp.str("out"));
    check_error([&] { phase_generate(cfg); }, ExitCode::config, "exp3");

    RunManifest man = run_pipeline(cfg);
    REQUIRE(man.phases.size() == 3);  // train, invert, evaluate
    CHECK(man.phases[0].name == "train");
    CHECK(std::filesystem::exists(tmp.str("out/model")));
    CHECK(std::filesystem::exists(tmp.str("out/data/trace.csv")));
    CHECK(!std::filesystem::exists(tmp.str("out/dataset")));

    nlohmann::json j = nlohmann::json::parse(io::read_text(tmp.str("out/manifest.json")));
    CHECK(!j.contains("display_factors"));  // exp3 fields are shown as-is

    CsvTable errs = parse_csv_table(io::read_text(tmp.str("out/errors.csv")));
    for (const auto& row : errs.rows)
        for (std::size_t c = 1; c < row.size(); ++c) CHECK(std::isfinite(std::stod(row[c])));
}

TEST_CASE("mlp pipeline writes the loss curve") {
    TempDir tmp("mlp");
    ExperimentConfig cfg = tiny_exp1(tmp.str("out"));
    cfg.model = Model::mlp;
    cfg.learn.hidden = 8;
    cfg.learn.latent = 4;
    cfg.learn.max_epochs = 5;
    cfg.learn.batch = 8;
    phase_generate(cfg);
    phase_train(cfg);
    CsvTable loss = parse_csv_table(io::read_text(tmp.str("out/model/loss.csv")));
    CHECK(loss.rows.size() >= 1);
    CHECK(loss.header[0] == "epoch");
}

TEST_CASE("sweep grid matches direct inversions and serializes") {
    TempDir tmp("sweep");
    ExperimentConfig cfg = tiny_exp1(tmp.str("out"));

    check_error([&] { sweep_hyperparams(cfg, {}, {0.0}); }, ExitCode::config, "nonempty");
    check_error([&] { sweep_hyperparams(cfg, {0}, {0.0}); }, ExitCode::config, "J");
    check_error([&] { sweep_hyperparams(cfg, {1}, {-1.0}); }, ExitCode::config, "alpha0");

    SweepResult res = sweep_hyperparams(cfg, {1, 2}, {0.0, 1e-7});
    CHECK(res.failures.empty());
    REQUIRE(res.err_f.size() == 4);
    for (double v : res.err_f) CHECK(std::isfinite(v));
    for (double v : res.err_g) CHECK(std::isfinite(v));

    // Each cell's tabulated error is the final stage of its saved report.
    nlohmann::json rep =
        nlohmann::json::parse(io::read_text(tmp.str("out/sweep/J1_a0/report.json")));
    const double reported = rep.at("stages").back().at("err_f").get<double>();
    CHECK(res.err_f[0] == doctest::Approx(reported).epsilon(1e-12));

    CsvTable tf = sweep_table(res, false);
    REQUIRE(tf.header.size() == 3);
    CHECK(tf.header[0] == "J");
    CHECK(tf.header[1] == "alpha0=0");
    REQUIRE(tf.rows.size() == 2);
    CHECK(tf.rows[0][0] == "1");
    CHECK(tf.rows[1][0] == "2");
    CHECK(tf.rows[0][1] == io::format_double(res.err_f[0]));

    const std::string text = io::read_text(tmp.str("out/sweep_f.csv"));
    CHECK(table_to_csv(parse_csv_table(text)) == text);
}

TEST_CASE("sensitivity sweep is exactly zero at epsilon zero") {
    TempDir tmp("sens");
    ExperimentConfig cfg = tiny_exp1(tmp.str("out"));

    check_error([&] { sensitivity_sweep(cfg, {}); }, ExitCode::config, "nonempty");
    check_error([&] { sensitivity_sweep(cfg, {-1e-3}); }, ExitCode::config, "nonnegative");
    check_error([&] { sensitivity_sweep(cfg, {1e-2, 1e-3}); }, ExitCode::config, "sorted");
    {
        ExperimentConfig noisy = cfg;
        noisy.noise.kind = synth::NoiseSpec::Kind::additive;
        noisy.noise.level = 0.05;
        check_error([&] { sensitivity_sweep(noisy, {0.0}); }, ExitCode::config, "noise");
    }

    SensitivityResult res = sensitivity_sweep(cfg, {0.0, 1e-2});
    REQUIRE(res.epsilon.size() == 2);
    CHECK(res.relation_discrepancy[0] == 0.0);
    CHECK(res.reconstruction_discrepancy[0] == 0.0);
    CHECK(res.relation_discrepancy[1] > 0.0);
    CHECK(std::isfinite(res.reconstruction_discrepancy[1]));

    CsvTable t = sensitivity_table(res);
    CHECK(t.header ==
          std::vector<std::string>{"epsilon", "relation_discrepancy",
                                   "reconstruction_discrepancy"});
    const std::string text = io::read_text(tmp.str("out/sensitivity.csv"));
    CHECK(table_to_csv(parse_csv_table(text)) == text);
    CHECK(std::filesystem::exists(tmp.str("out/sensitivity/eps0/report.json")));
}
