// Microbenchmarks for the two hot kernels, serial vs OpenMP. Run with
// JOINTINV_THREADS (or OMP_NUM_THREADS) set to compare; on a single core
// the parallel path should sit within noise of the serial one.
#include <benchmark/benchmark.h>

#include "jointinv/basis.hpp"
#include "jointinv/rng.hpp"
#include "jointinv/wave.hpp"

using namespace jointinv;
using namespace jointinv::basis;
using namespace jointinv::wave;

namespace {

SpectralCoeffs bench_coeffs(int kmax) {
    SpectralCoeffs c(kmax);
    Rng rng(11, 0);
    for (auto& v : c.values) v = rng.uniform(-1.0, 1.0);
    c.offset = 2.0;
    return c;
}

WaveProblem bench_wave(int m, double t_end) {
    WaveProblem p;
    p.grid = Grid{m, -1.0};
    p.kappa = ScalarField(p.grid, 1.0);
    p.rho = ScalarField(p.grid, 1.0);
    p.sources.push_back(standard_source(p.grid));
    p.t_end = t_end;
    p.cfl_safety = 0.5;
    p.dt = admissible_dt(p);
    // snap dt so t_end/dt is integral
    p.dt = t_end / std::ceil(t_end / p.dt);
    return p;
}

void bm_synthesize(benchmark::State& state, Exec exec) {
    const int m = static_cast<int>(state.range(0));
    SpectralCoeffs c = bench_coeffs(8);
    Grid g{m, 0.0};
    for (auto _ : state) {
        ScalarField f = synthesize(c, g, exec);
        benchmark::DoNotOptimize(f.values.data());
    }
    state.SetItemsProcessed(state.iterations() * g.num_nodes());
}

void bm_wave(benchmark::State& state, Exec exec) {
    const int m = static_cast<int>(state.range(0));
    WaveProblem p = bench_wave(m, 0.5);
    for (auto _ : state) {
        BoundaryTrace t = propagate(p, 0, exec);
        benchmark::DoNotOptimize(t.values.data());
    }
    state.SetItemsProcessed(state.iterations() * p.steps() * p.grid.num_nodes());
}

}  // namespace

BENCHMARK_CAPTURE(bm_synthesize, serial, Exec::serial)->Arg(64)->Arg(128);
BENCHMARK_CAPTURE(bm_synthesize, parallel, Exec::parallel)->Arg(64)->Arg(128);
BENCHMARK_CAPTURE(bm_wave, serial, Exec::serial)->Arg(48)->Arg(96);
BENCHMARK_CAPTURE(bm_wave, parallel, Exec::parallel)->Arg(48)->Arg(96);

BENCHMARK_MAIN();
