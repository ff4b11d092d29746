#pragma once

#include <cstddef>
#include <vector>

namespace jointinv {

// Pressure trace recorded along the bottom boundary of the wave domain:
// (steps+1) x (M+1) samples, row-major by (step, i). Row 0 is t = 0.
struct BoundaryTrace {
    int m = 0;       // receiver count is m+1 (grid nodes of the bottom row)
    int steps = 0;   // time steps; rows = steps + 1
    double dt = 0.0;
    std::vector<double> values;

    BoundaryTrace() = default;
    BoundaryTrace(int m_, int steps_, double dt_)
        : m(m_), steps(steps_), dt(dt_),
          values(static_cast<std::size_t>(steps_ + 1) * (m_ + 1), 0.0) {}

    double& at(int step, int i) { return values[static_cast<std::size_t>(step) * (m + 1) + i]; }
    double at(int step, int i) const { return values[static_cast<std::size_t>(step) * (m + 1) + i]; }
    int rows() const { return steps + 1; }
    int cols() const { return m + 1; }
};

}  // namespace jointinv
