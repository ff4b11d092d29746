#include "jointinv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <utility>

#include "json.hpp"

#include "jointinv/diffusion.hpp"
#include "jointinv/errors.hpp"
#include "jointinv/io.hpp"
#include "jointinv/wave.hpp"

namespace jointinv::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

double sq(double v) { return v * v; }

}  // namespace

// --- Experiment I ----------------------------------------------------------

double RelationSpecExpI::sum() const { return std::accumulate(a.begin(), a.end(), 0.0); }

RelationSpecExpI sample_relation_exp1(int kmax, Rng& rng) {
    if (kmax < 0) throw ConfigError("sample_relation_exp1: kmax must be >= 0");
    RelationSpecExpI spec;
    spec.kmax = kmax;
    const std::size_t d = static_cast<std::size_t>(spec.dim());
    spec.a.resize(d * d);
    // Flattened (target, source) order, one draw per entry.
    for (double& v : spec.a) v = rng.uniform(0.0, 0.1);
    return spec;
}

RescaleExpI exp1_rescale(const RelationSpecExpI& spec) {
    RescaleExpI rs;
    // |sum_k gamma_k phi_k| <= 0.5*dim when gamma in [-0.5,0.5]^dim and every
    // |phi_k| <= 1, so this scale keeps any possible sample's field inside
    // [0.5e-3, 1.5e-3].
    rs.f_scale = 1e-3 / spec.dim();
    rs.f_offset = 1e-3;
    // Rowwise |sigma_k| <= sum_{k'} a_{k,k'}; summing over rows bounds the
    // synthesized field by the total mass of A. Lands sigma in [0.01, 0.06].
    const double total = spec.sum();
    rs.g_scale = total > 0.0 ? 0.025 / total : 1.0;
    rs.g_offset = 0.035;
    return rs;
}

std::vector<double> exp1_relation_raw(const RelationSpecExpI& spec,
                                      const std::vector<double>& gamma_raw) {
    const int d = spec.dim();
    if (static_cast<int>(gamma_raw.size()) != d)
        throw ConfigError("exp1_relation_raw: coefficient vector has wrong dimension");
    if (static_cast<int>(spec.a.size()) != d * d)
        throw ConfigError("exp1_relation_raw: relation matrix has wrong dimension");
    std::vector<double> sigma(static_cast<std::size_t>(d), 0.0);
    for (int kx = 0; kx <= spec.kmax; ++kx)
        for (int kz = 0; kz <= spec.kmax; ++kz) {
            const int t = kx * (spec.kmax + 1) + kz;
            // The exponent is the target mode's total degree kx+kz.
            const double deg = kx + kz;
            double s = 0.0;
            for (int src = 0; src < d; ++src)
                s += spec.at(t, src) * std::sin(kPi * std::pow(2.0 + gamma_raw[src], deg));
            sigma[static_cast<std::size_t>(t)] = s;
        }
    return sigma;
}

CoeffPair gen_pair_exp1(const RelationSpecExpI& spec, const RescaleExpI& rs, Rng& rng) {
    const int d = spec.dim();
    std::vector<double> gamma_raw(static_cast<std::size_t>(d));
    for (double& v : gamma_raw) v = rng.uniform(-0.5, 0.5);
    const std::vector<double> sigma_raw = exp1_relation_raw(spec, gamma_raw);

    CoeffPair out;
    out.f = SpectralCoeffs(spec.kmax);
    out.g = SpectralCoeffs(spec.kmax);
    out.f.offset = rs.f_offset;
    out.g.offset = rs.g_offset;
    for (int k = 0; k < d; ++k) {
        out.f.values[static_cast<std::size_t>(k)] = rs.f_scale * gamma_raw[static_cast<std::size_t>(k)];
        out.g.values[static_cast<std::size_t>(k)] = rs.g_scale * sigma_raw[static_cast<std::size_t>(k)];
    }
    return out;
}

// --- Experiment II ---------------------------------------------------------

RelationSpecExpII sample_relation_exp2(Rng& rng) {
    RelationSpecExpII spec;
    for (double& v : spec.a) v = rng.uniform(0.0, 0.1);
    return spec;
}

Params5 exp2_relation(const RelationSpecExpII& spec, const Params5& b) {
    auto dot_cos = [&](int row, double mult) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) s += spec.at(row, j) * std::cos(mult * kPi * b[j]);
        return s;
    };
    // The center branches key on the input bump center (b4, b5); that is the
    // only reading under which c is a single point in parameter space. Note
    // the output center lands in the half opposite to the input's.
    auto base = [](double center) { return center <= 0.5 ? 0.75 : 0.25; };
    Params5 c;
    c[0] = dot_cos(0, 10.0) + 8.0;
    c[1] = 5.0 * dot_cos(1, 20.0) + 2.5;
    c[2] = 0.1 * dot_cos(2, 30.0) + 0.2;
    c[3] = 0.5 * dot_cos(3, 40.0) + base(b[3]);
    c[4] = 0.5 * dot_cos(4, 50.0) + base(b[4]);
    return c;
}

ScalarField gaussian_bump(const Grid& grid, const Params5& p) {
    if (p[2] <= 0.0) throw ConfigError("gaussian_bump: width parameter must be positive");
    ScalarField f(grid);
    const double inv2s2 = 1.0 / (2.0 * p[2] * p[2]);
    for (int i = 0; i <= grid.m; ++i) {
        const double dx = grid.x(i) - p[3];
        for (int j = 0; j <= grid.m; ++j) {
            const double dz = grid.z(j) - p[4];
            f.at(i, j) = p[0] + p[1] * std::exp(-(dx * dx + dz * dz) * inv2s2);
        }
    }
    return f;
}

void gaussian_bump_pullback(const Grid& grid, const Params5& p, const ScalarField& cot,
                            Params5& grad_p) {
    if (cot.grid != grid) throw ConfigError("gaussian_bump_pullback: grids differ");
    if (p[2] <= 0.0) throw ConfigError("gaussian_bump_pullback: width parameter must be positive");
    const double s2 = p[2] * p[2];
    const double inv2s2 = 1.0 / (2.0 * s2);
    for (int i = 0; i <= grid.m; ++i) {
        const double dx = grid.x(i) - p[3];
        for (int j = 0; j <= grid.m; ++j) {
            const double dz = grid.z(j) - p[4];
            const double r2 = dx * dx + dz * dz;
            const double e = std::exp(-r2 * inv2s2);
            const double w = cot.at(i, j);
            grad_p[0] += w;
            grad_p[1] += w * e;
            grad_p[2] += w * p[1] * e * r2 / (s2 * p[2]);
            grad_p[3] += w * p[1] * e * dx / s2;
            grad_p[4] += w * p[1] * e * dz / s2;
        }
    }
}

ParamPair gen_pair_exp2(const RelationSpecExpII& spec, Rng& rng) {
    ParamPair out;
    for (double& v : out.b) v = rng.uniform01();
    out.c = exp2_relation(spec, out.b);
    return out;
}

// --- Experiment III --------------------------------------------------------

std::array<double, 4> exp3_cubic_coeffs() { return {1.0, 0.15, 0.2, 0.05}; }

double exp3_cubic(double rho) {
    const std::array<double, 4> c = exp3_cubic_coeffs();
    return ((c[3] * rho + c[2]) * rho + c[1]) * rho + c[0];
}

double exp3_density_at(double x, double y) {
    const double g1 = std::exp(-(sq(x - 0.2) + sq(y + 0.2)) / (2.0 * sq(0.03)));
    const double g2 = std::exp(-(sq(x - 0.6) + sq(y + 0.6)) / (2.0 * sq(0.04)));
    return 1.0 + 0.2 * g1 + 0.3 * g2;
}

ScalarField exp3_density(const Grid& grid) {
    ScalarField f(grid);
    for (int i = 0; i <= grid.m; ++i)
        for (int j = 0; j <= grid.m; ++j) f.at(i, j) = exp3_density_at(grid.x(i), grid.y(j));
    return f;
}

ScalarField exp3_modulus_clean(const Grid& grid) {
    ScalarField f(grid);
    for (int i = 0; i <= grid.m; ++i) {
        const double x = grid.x(i);
        for (int j = 0; j <= grid.m; ++j) {
            const double y = grid.y(j);
            // Two rectangular windows evaluate the cubic at a shifted point
            // (and the first one also rescales), so the modulus is NOT a
            // pointwise function of the density there.
            double xe = x, ye = y, amp = 1.0;
            if (x >= 0.1 && x <= 0.4 && y >= -0.94 && y <= -0.64) {
                xe = x - 0.04;
                ye = y + 0.58;
                amp = 1.1;
            } else if (x >= 0.58 && x <= 1.0 && y >= -0.42 && y <= 0.0) {
                xe = x - 0.18;
                ye = y - 0.4;
            }
            f.at(i, j) = amp * exp3_cubic(exp3_density_at(xe, ye));
        }
    }
    return f;
}

ScalarField exp3_modulus_perturbed(const Grid& grid, Rng& rng) {
    ScalarField f = exp3_modulus_clean(grid);
    // One Bernoulli draw per node left of the seam, in storage order; column
    // M is then re-copied from column 0 so the stored truth is exactly the
    // periodic field the propagator sees.
    for (int i = 0; i < grid.m; ++i)
        for (int j = 0; j <= grid.m; ++j)
            if (rng.uniform01() < 0.5) f.at(i, j) += 0.1 * rng.normal01();
    for (int j = 0; j <= grid.m; ++j) f.at(grid.m, j) = f.at(0, j);
    return f;
}

// --- Measurement noise -----------------------------------------------------

const char* noise_kind_name(NoiseSpec::Kind k) {
    switch (k) {
        case NoiseSpec::Kind::none: return "none";
        case NoiseSpec::Kind::additive: return "additive";
        case NoiseSpec::Kind::multiplicative: return "multiplicative";
    }
    throw ConfigError("noise_kind_name: unknown kind");
}

NoiseSpec::Kind noise_kind_from_name(const std::string& name) {
    if (name == "none") return NoiseSpec::Kind::none;
    if (name == "additive") return NoiseSpec::Kind::additive;
    if (name == "multiplicative") return NoiseSpec::Kind::multiplicative;
    throw ConfigError("unknown noise kind '" + name + "' (want none|additive|multiplicative)");
}

std::vector<double> add_noise(const std::vector<double>& data, const NoiseSpec& spec,
                              std::uint64_t stream_index) {
    if (!(spec.level >= 0.0 && spec.level < 1.0))
        throw ConfigError("noise level must lie in [0, 1)");
    std::vector<double> out = data;
    if (spec.kind == NoiseSpec::Kind::none || spec.level == 0.0 || data.empty()) return out;

    Rng rng = make_rng(spec.seed, SeedPhase::noise, stream_index);
    if (spec.kind == NoiseSpec::Kind::additive) {
        double ms = 0.0;
        for (double v : data) ms += v * v;
        const double rms = std::sqrt(ms / static_cast<double>(data.size()));
        for (double& v : out) v += spec.level * rms * rng.normal01();
    } else {
        for (double& v : out) v *= 1.0 + spec.level * rng.normal01();
    }
    return out;
}

// --- Dataset assembly ------------------------------------------------------

std::vector<std::vector<double>> simulate_measurements(const ForwardRecipe& recipe,
                                                       const std::vector<double>& f,
                                                       const std::vector<double>& g,
                                                       Exec exec) {
    if (!recipe.build_f || !recipe.build_g)
        throw ConfigError("simulate_measurements: recipe is missing its field builders");
    std::vector<std::vector<double>> out;
    if (recipe.kind == ForwardRecipe::Kind::diffusion) {
        diffusion::DiffusionProblem p;
        p.grid = recipe.grid;
        p.gamma = recipe.build_f(f);
        p.sigma = recipe.build_g(g);
        p.robin_ell = recipe.robin_ell;
        p.sources = diffusion::four_side_sources(recipe.grid);
        diffusion::InternalData data = diffusion::internal_data(p, exec);
        out.reserve(data.fields.size());
        for (ScalarField& fld : data.fields) out.push_back(std::move(fld.values));
    } else {
        wave::WaveProblem p;
        p.grid = recipe.grid;
        p.rho = recipe.build_f(f);
        p.kappa = recipe.build_g(g);
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

ConsistencyResult consistency_misfit(const ForwardRecipe& recipe, const std::vector<double>& f,
                                     const std::vector<double>& g,
                                     const std::vector<std::vector<double>>& observed,
                                     bool want_grad, Exec exec) {
    if (want_grad && !recipe.pullback_g)
        throw ConfigError("consistency_misfit: recipe has no pullback for g");
    ConsistencyResult res;
    if (recipe.kind == ForwardRecipe::Kind::diffusion) {
        diffusion::DiffusionProblem p;
        p.grid = recipe.grid;
        p.gamma = recipe.build_f(f);
        p.sigma = recipe.build_g(g);
        p.robin_ell = recipe.robin_ell;
        p.sources = diffusion::four_side_sources(recipe.grid);
        if (observed.size() != p.sources.size())
            throw ConfigError("consistency_misfit: observation count != source count");
        diffusion::InternalData data;
        data.fields.reserve(observed.size());
        for (const auto& arr : observed) {
            if (arr.size() != recipe.grid.num_nodes())
                throw ConfigError("consistency_misfit: observation length != node count");
            ScalarField fld(recipe.grid);
            fld.values = arr;
            data.fields.push_back(std::move(fld));
        }
        diffusion::Misfit mf = diffusion::internal_misfit(p, data, want_grad, exec);
        res.value = mf.value;
        if (want_grad) res.grad_g = recipe.pullback_g(g, mf.grad_sigma);
    } else {
        wave::WaveProblem p;
        p.grid = recipe.grid;
        p.rho = recipe.build_f(f);
        p.kappa = recipe.build_g(g);
        p.sources = {wave::standard_source(recipe.grid)};
        p.t_end = recipe.t_end;
        p.dt = recipe.dt;
        if (observed.size() != p.sources.size())
            throw ConfigError("consistency_misfit: observation count != source count");
        const std::size_t rows = static_cast<std::size_t>(p.steps()) + 1;
        std::vector<BoundaryTrace> traces;
        traces.reserve(observed.size());
        for (const auto& arr : observed) {
            if (arr.size() != rows * static_cast<std::size_t>(recipe.grid.m + 1))
                throw ConfigError("consistency_misfit: trace length != (steps+1)*(M+1)");
            BoundaryTrace tr(recipe.grid.m, p.steps(), p.dt);
            tr.values = arr;
            traces.push_back(std::move(tr));
        }
        wave::Misfit mf = wave::trace_misfit(p, traces, want_grad, exec);
        res.value = mf.value;
        if (want_grad) res.grad_g = recipe.pullback_g(g, mf.grad_kappa);
    }
    return res;
}

TrainingDataset build_training_dataset(const PairGenerator& gen, int n, std::uint64_t seed,
                                       const ForwardRecipe* recipe, Exec exec) {
    if (!gen) throw ConfigError("build_training_dataset: no pair generator");
    if (n < 10) throw ConfigError("build_training_dataset: need at least 10 samples");

    TrainingDataset ds;
    ds.seed = seed;
    ds.f.resize(static_cast<std::size_t>(n));
    ds.g.resize(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        // One substream per sample, so the content of sample k does not
        // depend on how many samples precede it.
        Rng rng = make_rng(seed, SeedPhase::dataset, static_cast<std::uint64_t>(k));
        auto [fk, gk] = gen(rng);
        if (k == 0) ds.feature_dim = static_cast<int>(fk.size());
        if (static_cast<int>(fk.size()) != ds.feature_dim ||
            static_cast<int>(gk.size()) != ds.feature_dim)
            throw ConfigError("build_training_dataset: generator changed its dimension");
        ds.f[static_cast<std::size_t>(k)] = std::move(fk);
        ds.g[static_cast<std::size_t>(k)] = std::move(gk);
    }

    if (recipe) {
        ds.measurements.resize(static_cast<std::size_t>(n));
        // Samples write disjoint slots and each simulation runs serially
        // inside, so the parallel loop is bit-identical to the serial one.
        // Exceptions cannot cross the parallel region; stash the first one.
        std::exception_ptr err;
        auto run = [&](int k) {
            try {
                ds.measurements[static_cast<std::size_t>(k)] = simulate_measurements(
                    *recipe, ds.f[static_cast<std::size_t>(k)], ds.g[static_cast<std::size_t>(k)],
                    Exec::serial);
            } catch (...) {
#pragma omp critical(jointinv_dataset_err)
                if (!err) err = std::current_exception();
            }
        };
        if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic)
            for (int k = 0; k < n; ++k) run(k);
        } else {
            for (int k = 0; k < n; ++k) run(k);
        }
        if (err) std::rethrow_exception(err);
    }

    // Seeded shuffle split. Stream index n is free: samples used 0..n-1.
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(seed, SeedPhase::dataset, static_cast<std::uint64_t>(n));
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    const auto n_train = static_cast<std::ptrdiff_t>(std::llround(0.8 * n));
    ds.train_idx.assign(idx.begin(), idx.begin() + n_train);
    ds.test_idx.assign(idx.begin() + n_train, idx.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
    std::sort(ds.test_idx.begin(), ds.test_idx.end());
    return ds;
}

// --- Dataset (de)serialisation ---------------------------------------------

namespace {

std::string dataset_path(const std::string& dir, const char* name) { return dir + "/" + name; }

std::vector<double> flatten(const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat;
    std::size_t total = 0;
    for (const auto& r : rows) total += r.size();
    flat.reserve(total);
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return flat;
}

void write_matrix(const std::string& path, const std::vector<std::vector<double>>& rows,
                  std::uint64_t dim) {
    io::write_blob(path, {static_cast<std::uint64_t>(rows.size()), dim}, flatten(rows));
}

std::vector<std::vector<double>> read_matrix(const std::string& path, std::uint64_t want_rows,
                                             std::uint64_t want_dim) {
    auto [header, payload] = io::read_blob(path, 2);
    if (header[0] != want_rows || header[1] != want_dim)
        throw ConfigError(path + ": shape " + std::to_string(header[0]) + "x" +
                          std::to_string(header[1]) + " does not match the manifest");
    if (payload.size() != want_rows * want_dim)
        throw ConfigError(path + ": truncated payload");
    std::vector<std::vector<double>> rows(want_rows);
    for (std::uint64_t r = 0; r < want_rows; ++r)
        rows[r].assign(payload.begin() + static_cast<std::ptrdiff_t>(r * want_dim),
                       payload.begin() + static_cast<std::ptrdiff_t>((r + 1) * want_dim));
    return rows;
}

}  // namespace

void save_dataset(const std::string& dir, const TrainingDataset& ds) {
    io::ensure_dir(dir);
    const auto n = static_cast<std::uint64_t>(ds.size());
    const auto dim = static_cast<std::uint64_t>(ds.feature_dim);

    std::uint64_t num_sources = 0, meas_len = 0;
    if (!ds.measurements.empty()) {
        num_sources = ds.measurements.front().size();
        meas_len = num_sources ? ds.measurements.front().front().size() : 0;
    }

    nlohmann::ordered_json man;
    man["format"] = "jointinv-dataset";
    man["version"] = 1;
    man["generator"] = ds.generator;
    man["n"] = n;
    man["feature_dim"] = dim;
    man["seed"] = ds.seed;
    man["f_offset"] = ds.f_offset;
    man["g_offset"] = ds.g_offset;
    man["g_lo"] = ds.g_lo;
    man["g_hi"] = ds.g_hi;
    man["train_idx"] = ds.train_idx;
    man["test_idx"] = ds.test_idx;
    man["num_sources"] = num_sources;
    man["measurement_len"] = meas_len;
    io::write_text(dataset_path(dir, "manifest.json"), man.dump(2) + "\n");

    write_matrix(dataset_path(dir, "f.bin"), ds.f, dim);
    write_matrix(dataset_path(dir, "g.bin"), ds.g, dim);

    if (!ds.measurements.empty()) {
        std::vector<double> flat;
        flat.reserve(n * num_sources * meas_len);
        for (const auto& sample : ds.measurements) {
            if (sample.size() != num_sources)
                throw ConfigError("save_dataset: ragged measurement source count");
            for (const auto& arr : sample) {
                if (arr.size() != meas_len)
                    throw ConfigError("save_dataset: ragged measurement length");
                flat.insert(flat.end(), arr.begin(), arr.end());
            }
        }
        io::write_blob(dataset_path(dir, "measurements.bin"), {n, num_sources, meas_len}, flat);
    }
}

TrainingDataset load_dataset(const std::string& dir) {
    const std::string man_path = dataset_path(dir, "manifest.json");
    nlohmann::json man;
    try {
        man = nlohmann::json::parse(io::read_text(man_path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(man_path + ": " + e.what());
    }

    TrainingDataset ds;
    std::uint64_t n = 0, dim = 0, num_sources = 0, meas_len = 0;
    try {
        if (man.at("format") != "jointinv-dataset")
            throw ConfigError(man_path + ": not a dataset manifest");
        ds.generator = man.at("generator").get<std::string>();
        n = man.at("n").get<std::uint64_t>();
        dim = man.at("feature_dim").get<std::uint64_t>();
        ds.feature_dim = static_cast<int>(dim);
        ds.seed = man.at("seed").get<std::uint64_t>();
        ds.f_offset = man.at("f_offset").get<double>();
        ds.g_offset = man.at("g_offset").get<double>();
        ds.g_lo = man.at("g_lo").get<double>();
        ds.g_hi = man.at("g_hi").get<double>();
        ds.train_idx = man.at("train_idx").get<std::vector<int>>();
        ds.test_idx = man.at("test_idx").get<std::vector<int>>();
        num_sources = man.at("num_sources").get<std::uint64_t>();
        meas_len = man.at("measurement_len").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(man_path + ": " + e.what());
    }

    if (ds.train_idx.size() + ds.test_idx.size() != n)
        throw ConfigError(man_path + ": split does not cover the dataset");

    ds.f = read_matrix(dataset_path(dir, "f.bin"), n, dim);
    ds.g = read_matrix(dataset_path(dir, "g.bin"), n, dim);

    if (num_sources > 0) {
        const std::string meas_path = dataset_path(dir, "measurements.bin");
        auto [header, payload] = io::read_blob(meas_path, 3);
        if (header[0] != n || header[1] != num_sources || header[2] != meas_len)
            throw ConfigError(meas_path + ": shape does not match the manifest");
        if (payload.size() != n * num_sources * meas_len)
            throw ConfigError(meas_path + ": truncated payload");
        ds.measurements.assign(n, std::vector<std::vector<double>>(num_sources));
        std::size_t pos = 0;
        for (std::uint64_t k = 0; k < n; ++k)
            for (std::uint64_t h = 0; h < num_sources; ++h) {
                auto& arr = ds.measurements[k][h];
                arr.assign(payload.begin() + static_cast<std::ptrdiff_t>(pos),
                           payload.begin() + static_cast<std::ptrdiff_t>(pos + meas_len));
                pos += meas_len;
            }
    }
    return ds;
}

}  // namespace jointinv::synth
