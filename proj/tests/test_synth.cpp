#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "jointinv/basis.hpp"
#include "jointinv/diffusion.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/io.hpp"
#include "jointinv/rng.hpp"
#include "jointinv/synth.hpp"
#include "jointinv/wave.hpp"

using namespace jointinv;
using namespace jointinv::synth;

namespace {

constexpr double kPi = std::numbers::pi;

double sq(double v) { return v * v; }

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("jointinv_synth_" + std::to_string(getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str(const char* sub) const { return (path / sub).string(); }
};

// One-sample Kolmogorov-Smirnov distance against a uniform [0,1] cdf.
double ks_distance_uniform(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        d = std::max(d, std::abs((static_cast<double>(i) + 1.0) / n - xs[i]));
        d = std::max(d, std::abs(static_cast<double>(i) / n - xs[i]));
    }
    return d;
}

RelationSpecExpI zero_spec_exp1(int kmax) {
    RelationSpecExpI spec;
    spec.kmax = kmax;
    spec.a.assign(static_cast<std::size_t>(spec.dim()) * spec.dim(), 0.0);
    return spec;
}

}  // namespace

TEST_CASE("exp1 relation: single entry reproduces the hand value") {
    // Only a_{(0,1),(0,0)} = 0.1 is active; with gamma_(0,0) = 0.5 the target
    // degree is 1, so sigma_(0,1) = 0.1 sin(2.5 pi) = 0.1.
    RelationSpecExpI spec = zero_spec_exp1(1);
    spec.a[static_cast<std::size_t>(1) * 4 + 0] = 0.1;
    std::vector<double> gamma = {0.5, 0.0, 0.0, 0.0};
    std::vector<double> sigma = exp1_relation_raw(spec, gamma);
    CHECK(sigma[1] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(sigma[0] == 0.0);
    CHECK(sigma[2] == 0.0);
    CHECK(sigma[3] == 0.0);
}

TEST_CASE("exp1 relation: zero input maps to (numerically) zero output") {
    // sin(pi * 2^deg) vanishes for every target degree; roundoff in the pi
    // multiples leaves only ~1e-15 residue.
    Rng rng(11, 0);
    RelationSpecExpI spec = sample_relation_exp1(2, rng);
    std::vector<double> sigma = exp1_relation_raw(spec, std::vector<double>(9, 0.0));
    for (double v : sigma) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("exp1 relation: degree-zero target mode is always (numerically) zero") {
    Rng rng(12, 0);
    RelationSpecExpI spec = sample_relation_exp1(3, rng);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> gamma(16);
        for (double& v : gamma) v = rng.uniform(-0.5, 0.5);
        std::vector<double> sigma = exp1_relation_raw(spec, gamma);
        CHECK(std::abs(sigma[0]) < 1e-12);  // sin(pi * anything^0) = sin(pi)
    }
}

TEST_CASE("exp1 rescale: every possible pair lands inside the physical bands") {
    Rng rng(21, 0);
    RelationSpecExpI spec = sample_relation_exp1(2, rng);
    RescaleExpI rs = exp1_rescale(spec);

    // Coefficient-space worst case: offset minus the l1 mass of the scaled
    // coefficients stays inside the band no matter what the draw was.
    CHECK(rs.f_offset - rs.f_scale * 0.5 * spec.dim() >= 0.5e-3 - 1e-15);
    CHECK(rs.f_offset + rs.f_scale * 0.5 * spec.dim() <= 1.5e-3 + 1e-15);
    CHECK(rs.g_offset - rs.g_scale * spec.sum() >= 0.01 - 1e-15);
    CHECK(rs.g_offset + rs.g_scale * spec.sum() <= 0.06 + 1e-15);

    // And on actual synthesized fields.
    Grid grid{16, 0.0};
    for (int trial = 0; trial < 20; ++trial) {
        CoeffPair pair = gen_pair_exp1(spec, rs, rng);
        ScalarField f = basis::synthesize(pair.f, grid);
        ScalarField g = basis::synthesize(pair.g, grid);
        for (double v : f.values) {
            CHECK(v >= 0.5e-3 - 1e-15);
            CHECK(v <= 1.5e-3 + 1e-15);
        }
        for (double v : g.values) {
            CHECK(v >= 0.01 - 1e-14);
            CHECK(v <= 0.06 + 1e-14);
        }
    }
}

TEST_CASE("exp1 pairs: the scaled gamma coefficient is uniform on its band") {
    Rng spec_rng(31, 0);
    RelationSpecExpI spec = sample_relation_exp1(2, spec_rng);
    RescaleExpI rs = exp1_rescale(spec);

    // Mode (1,1) across 500 independent sample streams, mapped back to [0,1].
    const int mode = 1 * 3 + 1;
    std::vector<double> xs;
    xs.reserve(500);
    for (int k = 0; k < 500; ++k) {
        Rng rng = make_rng(777, SeedPhase::dataset, static_cast<std::uint64_t>(k));
        CoeffPair pair = gen_pair_exp1(spec, rs, rng);
        xs.push_back(pair.f.values[mode] / rs.f_scale + 0.5);
    }
    // alpha = 0.01 critical value 1.628/sqrt(N).
    CHECK(ks_distance_uniform(xs) < 1.628 / std::sqrt(500.0));
}

TEST_CASE("exp2 relation: zero matrix gives the bare constants") {
    RelationSpecExpII spec;  // a is value-initialised to zero
    Params5 b = {0.3, 0.6, 0.1, 0.2, 0.7};
    Params5 c = exp2_relation(spec, b);
    CHECK(c[0] == 8.0);
    CHECK(c[1] == 2.5);
    CHECK(c[2] == 0.2);
    CHECK(c[3] == 0.75);  // input center x = 0.2 in the left half
    CHECK(c[4] == 0.25);  // input center z = 0.7 in the right half

    b[3] = 0.5;  // boundary belongs to the left half
    CHECK(exp2_relation(spec, b)[3] == 0.75);
    b[3] = 0.500001;
    CHECK(exp2_relation(spec, b)[3] == 0.25);
}

TEST_CASE("exp2 bump: center node carries p1 + p2 and the max sits at the center") {
    Grid grid{16, 0.0};
    Params5 p = {8.0, 2.5, 0.2, 0.5, 0.25};  // center on a grid node
    ScalarField f = gaussian_bump(grid, p);
    CHECK(f.at(8, 4) == doctest::Approx(10.5).epsilon(1e-14));

    // A sampled pair: sigma's argmax within one cell of (c4, c5).
    Rng rng(41, 0);
    RelationSpecExpII spec = sample_relation_exp2(rng);
    ParamPair pair = gen_pair_exp2(spec, rng);
    REQUIRE(pair.c[1] > 0.5);  // bump tall enough for the argmax to be meaningful
    Grid fine{32, 0.0};
    ScalarField sigma = gaussian_bump(fine, pair.c);
    int bi = 0, bj = 0;
    for (int i = 0; i <= fine.m; ++i)
        for (int j = 0; j <= fine.m; ++j)
            if (sigma.at(i, j) > sigma.at(bi, bj)) {
                bi = i;
                bj = j;
            }
    CHECK(std::abs(fine.x(bi) - pair.c[3]) <= fine.h() + 1e-12);
    CHECK(std::abs(fine.z(bj) - pair.c[4]) <= fine.h() + 1e-12);
}

TEST_CASE("exp2 bump pullback matches finite differences") {
    Grid grid{12, 0.0};
    Params5 p = {7.5, 3.0, 0.15, 0.4, 0.65};
    Rng rng(51, 0);
    ScalarField cot(grid);
    for (double& v : cot.values) v = rng.uniform(-1.0, 1.0);

    auto contract = [&](const Params5& q) {
        ScalarField f = gaussian_bump(grid, q);
        double s = 0.0;
        for (std::size_t n = 0; n < f.values.size(); ++n) s += cot.values[n] * f.values[n];
        return s;
    };

    Params5 grad = {0, 0, 0, 0, 0};
    gaussian_bump_pullback(grid, p, cot, grad);
    const double step = 1e-6;
    for (int d = 0; d < 5; ++d) {
        Params5 hi = p, lo = p;
        hi[d] += step;
        lo[d] -= step;
        const double fd = (contract(hi) - contract(lo)) / (2.0 * step);
        CHECK(grad[d] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("exp3 density: frozen value at the first bump center") {
    const double expect = 1.2 + 0.3 * std::exp(-100.0);
    CHECK(exp3_density_at(0.2, -0.2) == doctest::Approx(expect).epsilon(1e-15));
    // Far corner: both bumps negligible.
    CHECK(exp3_density_at(1.0, 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exp3 modulus: cubic value and region shifts") {
    CHECK(exp3_cubic(1.0) == doctest::Approx(1.4).epsilon(1e-15));

    Grid grid{50, -1.0};
    ScalarField kappa = exp3_modulus_clean(grid);

    // Inside the first window (inclusive bounds): scaled, shifted cubic.
    CHECK(kappa.at(5, 10) ==
          doctest::Approx(1.1 * exp3_cubic(exp3_density_at(0.1 - 0.04, -0.8 + 0.58)))
              .epsilon(1e-14));
    // Inside the second window.
    CHECK(kappa.at(40, 45) ==
          doctest::Approx(exp3_cubic(exp3_density_at(0.8 - 0.18, -0.1 - 0.4))).epsilon(1e-14));
    // Outside both: the plain pointwise cubic.
    CHECK(kappa.at(25, 25) == doctest::Approx(exp3_cubic(exp3_density_at(0.5, -0.5))).epsilon(1e-14));
    // Just left of the first window the shift must be off.
    CHECK(kappa.at(4, 10) == doctest::Approx(exp3_cubic(exp3_density_at(0.08, -0.8))).epsilon(1e-14));
}

TEST_CASE("exp3 perturbed modulus: Bernoulli rate, amplitude, seam, determinism") {
    Grid grid{100, -1.0};
    ScalarField clean = exp3_modulus_clean(grid);
    Rng rng(61, 0);
    ScalarField pert = exp3_modulus_perturbed(grid, rng);

    int hits = 0;
    double ss = 0.0;
    for (int i = 0; i < grid.m; ++i)
        for (int j = 0; j <= grid.m; ++j) {
            const double d = pert.at(i, j) - clean.at(i, j);
            if (d != 0.0) {
                ++hits;
                ss += d * d;
            }
        }
    const int draws = grid.m * (grid.m + 1);  // seam column never draws
    const double rate = static_cast<double>(hits) / draws;
    CHECK(rate > 0.47);
    CHECK(rate < 0.53);
    const double std_dev = std::sqrt(ss / hits);
    CHECK(std_dev > 0.09);
    CHECK(std_dev < 0.11);

    for (int j = 0; j <= grid.m; ++j) CHECK(pert.at(grid.m, j) == pert.at(0, j));

    Rng rng2(61, 0);
    ScalarField again = exp3_modulus_perturbed(grid, rng2);
    CHECK(again.values == pert.values);
}

TEST_CASE("noise: identity cases and frozen single-sample oracle") {
    std::vector<double> data = {2.0};
    NoiseSpec spec;
    spec.seed = 99;

    SUBCASE("kind none is a bit-exact copy") {
        spec.level = 0.0;
        CHECK(add_noise(data, spec) == data);
    }
    SUBCASE("zero level is a bit-exact copy") {
        spec.kind = NoiseSpec::Kind::additive;
        spec.level = 0.0;
        CHECK(add_noise(data, spec) == data);
    }
    SUBCASE("additive single value: rms is the value itself") {
        spec.kind = NoiseSpec::Kind::additive;
        spec.level = 0.05;
        Rng ref = make_rng(99, SeedPhase::noise, 3);
        const double expect = 2.0 + 0.05 * 2.0 * ref.normal01();
        CHECK(add_noise(data, spec, 3)[0] == expect);
    }
    SUBCASE("multiplicative single value") {
        spec.kind = NoiseSpec::Kind::multiplicative;
        spec.level = 0.05;
        Rng ref = make_rng(99, SeedPhase::noise, 0);
        const double expect = 2.0 * (1.0 + 0.05 * ref.normal01());
        CHECK(add_noise(data, spec)[0] == expect);
    }
    SUBCASE("levels outside [0,1) are rejected") {
        spec.kind = NoiseSpec::Kind::additive;
        spec.level = 1.0;
        CHECK_THROWS_AS(add_noise(data, spec), ConfigError);
        spec.level = -0.1;
        CHECK_THROWS_AS(add_noise(data, spec), ConfigError);
    }
}

TEST_CASE("noise: empirical level on a constant array") {
    std::vector<double> data(10000, 1.0);  // rms = 1
    NoiseSpec spec;
    spec.kind = NoiseSpec::Kind::additive;
    spec.level = 0.05;
    spec.seed = 7;
    std::vector<double> noisy = add_noise(data, spec);
    double ss = 0.0;
    for (std::size_t n = 0; n < data.size(); ++n) ss += sq(noisy[n] - data[n]);
    const double std_dev = std::sqrt(ss / static_cast<double>(data.size()));
    CHECK(std_dev > 0.048);
    CHECK(std_dev < 0.052);

    // Different arrays (stream indices) must get different noise.
    std::vector<double> other = add_noise(data, spec, 1);
    CHECK(other != noisy);
}

TEST_CASE("noise kind names round-trip") {
    for (auto k : {NoiseSpec::Kind::none, NoiseSpec::Kind::additive,
                   NoiseSpec::Kind::multiplicative})
        CHECK(noise_kind_from_name(noise_kind_name(k)) == k);
    CHECK_THROWS_AS(noise_kind_from_name("gaussian"), ConfigError);
}

namespace {

// Small diffusion recipe over spectral pairs, for dataset tests.
ForwardRecipe small_diffusion_recipe(int m, int kmax, double f_offset, double g_offset) {
    ForwardRecipe r;
    r.kind = ForwardRecipe::Kind::diffusion;
    r.grid = Grid{m, 0.0};
    r.robin_ell = 1.0;
    const Grid grid = r.grid;
    r.build_f = [kmax, f_offset, grid](const std::vector<double>& v) {
        SpectralCoeffs c(kmax);
        c.values = v;
        c.offset = f_offset;
        return basis::synthesize(c, grid, Exec::serial);
    };
    r.build_g = [kmax, g_offset, grid](const std::vector<double>& v) {
        SpectralCoeffs c(kmax);
        c.values = v;
        c.offset = g_offset;
        return basis::synthesize(c, grid, Exec::serial);
    };
    return r;
}

double sq_err(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += sq(a[n] - b[n]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("simulate_measurements agrees with calling the solvers directly") {
    Rng spec_rng(71, 0);
    RelationSpecExpI spec = sample_relation_exp1(1, spec_rng);
    RescaleExpI rs = exp1_rescale(spec);
    Rng rng = make_rng(5, SeedPhase::dataset, 0);
    CoeffPair pair = gen_pair_exp1(spec, rs, rng);

    SUBCASE("diffusion") {
        ForwardRecipe r = small_diffusion_recipe(8, 1, rs.f_offset, rs.g_offset);
        auto meas = simulate_measurements(r, pair.f.values, pair.g.values);
        REQUIRE(meas.size() == 4);
        diffusion::DiffusionProblem p;
        p.grid = r.grid;
        p.gamma = r.build_f(pair.f.values);
        p.sigma = r.build_g(pair.g.values);
        p.sources = diffusion::four_side_sources(r.grid);
        diffusion::InternalData direct = diffusion::internal_data(p);
        for (int h = 0; h < 4; ++h) CHECK(meas[h] == direct.fields[h].values);
    }

    SUBCASE("wave") {
        ForwardRecipe r;
        r.kind = ForwardRecipe::Kind::wave;
        r.grid = Grid{12, -1.0};
        r.t_end = 0.25;
        r.dt = 0.0125;
        r.build_f = [](const std::vector<double>& v) {
            return ScalarField(Grid{12, -1.0}, v[0]);
        };
        r.build_g = [](const std::vector<double>& v) {
            return ScalarField(Grid{12, -1.0}, v[0]);
        };
        auto meas = simulate_measurements(r, {0.9}, {1.3});
        REQUIRE(meas.size() == 1);
        wave::WaveProblem p;
        p.grid = r.grid;
        p.rho = ScalarField(p.grid, 0.9);
        p.kappa = ScalarField(p.grid, 1.3);
        p.sources = {wave::standard_source(p.grid)};
        p.t_end = r.t_end;
        p.dt = r.dt;
        CHECK(meas[0] == wave::propagate(p, 0).values);
    }
}

TEST_CASE("build_training_dataset: split shape, determinism, per-sample streams") {
    PairGenerator gen = [](Rng& rng) {
        std::vector<double> f = {rng.uniform01(), rng.uniform01()};
        std::vector<double> g = {f[0] + 1.0, f[1] + 1.0};
        return std::make_pair(f, g);
    };

    TrainingDataset ds = build_training_dataset(gen, 10, 123);
    CHECK(ds.size() == 10);
    CHECK(ds.feature_dim == 2);
    CHECK(ds.train_idx.size() == 8);
    CHECK(ds.test_idx.size() == 2);

    // The two index lists partition 0..9.
    std::vector<int> all = ds.train_idx;
    all.insert(all.end(), ds.test_idx.begin(), ds.test_idx.end());
    std::sort(all.begin(), all.end());
    for (int k = 0; k < 10; ++k) CHECK(all[static_cast<std::size_t>(k)] == k);

    TrainingDataset again = build_training_dataset(gen, 10, 123);
    CHECK(again.f == ds.f);
    CHECK(again.g == ds.g);
    CHECK(again.train_idx == ds.train_idx);

    // Sample k is a function of (seed, k) only, not of the dataset size.
    TrainingDataset bigger = build_training_dataset(gen, 12, 123);
    CHECK(bigger.f[3] == ds.f[3]);
    CHECK(bigger.g[7] == ds.g[7]);

    CHECK_THROWS_AS(build_training_dataset(gen, 5, 123), ConfigError);
}

TEST_CASE("dataset with measurements: simulation consistency and save/load round trip") {
    Rng spec_rng(81, 0);
    RelationSpecExpI spec = sample_relation_exp1(1, spec_rng);
    RescaleExpI rs = exp1_rescale(spec);
    ForwardRecipe recipe = small_diffusion_recipe(8, 1, rs.f_offset, rs.g_offset);

    PairGenerator gen = [&](Rng& rng) {
        CoeffPair p = gen_pair_exp1(spec, rs, rng);
        return std::make_pair(p.f.values, p.g.values);
    };
    TrainingDataset ds = build_training_dataset(gen, 10, 321, &recipe);
    ds.generator = "exp1";
    ds.f_offset = rs.f_offset;
    ds.g_offset = rs.g_offset;
    ds.g_lo = 0.01;
    ds.g_hi = 0.06;
    REQUIRE(ds.measurements.size() == 10);
    REQUIRE(ds.measurements[0].size() == 4);

    // Stored arrays equal an independent re-simulation.
    auto redo = simulate_measurements(recipe, ds.f[6], ds.g[6], Exec::serial);
    for (int h = 0; h < 4; ++h) CHECK(sq_err(ds.measurements[6][h], redo[h]) <= 1e-12);

    // Serial and parallel dataset builds agree bit-exactly.
    TrainingDataset serial = build_training_dataset(gen, 10, 321, &recipe, Exec::serial);
    CHECK(serial.measurements == ds.measurements);

    TempDir tmp;
    save_dataset(tmp.str("ds"), ds);
    TrainingDataset back = load_dataset(tmp.str("ds"));
    CHECK(back.generator == ds.generator);
    CHECK(back.feature_dim == ds.feature_dim);
    CHECK(back.seed == ds.seed);
    CHECK(back.f_offset == ds.f_offset);
    CHECK(back.g_offset == ds.g_offset);
    CHECK(back.g_lo == ds.g_lo);
    CHECK(back.g_hi == ds.g_hi);
    CHECK(back.f == ds.f);
    CHECK(back.g == ds.g);
    CHECK(back.train_idx == ds.train_idx);
    CHECK(back.test_idx == ds.test_idx);
    CHECK(back.measurements == ds.measurements);

    CHECK_THROWS_AS(load_dataset(tmp.str("nope")), IoError);

    // A manifest that is not JSON reports the offending file.
    io::write_text(tmp.str("ds") + "/manifest.json", "not json\n");
    CHECK_THROWS_AS(load_dataset(tmp.str("ds")), ConfigError);
}
