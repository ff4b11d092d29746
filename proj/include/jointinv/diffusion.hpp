#pragma once

#include <vector>

#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"

namespace jointinv::diffusion {

// Nodal boundary illumination, one profile per side. Sides are parameterised
// by their natural in-side coordinate: bottom/top by x (index i), left/right
// by y (index j). Each vector is either empty (no source on that side) or
// has M+1 entries.
struct BoundarySource {
    std::vector<double> bottom, top, left, right;
};

// Gaussian profile exp(-(t-0.5)^2/0.25) placed on one side, zero elsewhere.
enum class Side { bottom, top, left, right };
BoundarySource gaussian_side_source(const Grid& grid, Side side);
// The standard four-illumination set (one Gaussian per side).
std::vector<BoundarySource> four_side_sources(const Grid& grid);

// Steady diffusion with Robin boundary:
//   -div(gamma grad u) + sigma u = volume_source in the square,
//   n . gamma grad u + ell u = S on the boundary.
// P1 elements on the uniform right-triangle split of the Cartesian cells;
// gamma enters elementwise through its triangle mean, sigma and the volume
// source through lumped nodal masses, and the Robin terms through lumped
// edge masses (this keeps the matrix an M-matrix and makes the constant
// solution exact).
struct DiffusionProblem {
    Grid grid;
    ScalarField gamma;
    ScalarField sigma;
    double robin_ell = 1.0;
    std::vector<BoundarySource> sources;
    ScalarField volume_source;  // empty values = none
};

// Internal measurements H_h = sigma .* u_h, one field per source.
struct InternalData {
    std::vector<ScalarField> fields;
};

// Solve for one source. Throws NumericalError if gamma is not strictly
// positive (coercivity) or the factorization fails.
ScalarField solve(const DiffusionProblem& p, int source_index);

// All sources with a single factorization; returns H_h = sigma .* u_h.
InternalData internal_data(const DiffusionProblem& p, Exec exec = Exec::parallel);

// Misfit between the problem's predicted internal data and observations,
//   J = 1/(2|H|) sum_h || sigma u_h - H_h ||_{L2}^2   (trapezoidal norm),
// together with its exact discrete gradient with respect to the nodal gamma
// and sigma fields (adjoint state = transpose of the assembled forward map).
struct Misfit {
    double value = 0.0;
    ScalarField grad_gamma;
    ScalarField grad_sigma;
};
Misfit internal_misfit(const DiffusionProblem& p, const InternalData& observed,
                       bool want_gradient = true, Exec exec = Exec::parallel);

}  // namespace jointinv::diffusion
