#pragma once

namespace jointinv {

// Hot kernels (wave stepping, spectral transforms, per-source and per-sample
// loops) come in two flavours: a plain serial reference and an OpenMP one.
// Both produce bit-identical results: parallel regions only ever write
// disjoint output slots, and every reduction is finished in a fixed serial
// order. The serial path is kept so tests can diff the two and so the
// benchmark target has a baseline.
enum class Exec {
    serial,
    parallel,
};

// Number of OpenMP threads to use (0 = library default). Returns the value
// actually applied.
int set_threads(int n);
int max_threads();

}  // namespace jointinv
