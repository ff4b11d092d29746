#pragma once

#include <vector>

#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"
#include "jointinv/trace.hpp"

namespace jointinv::wave {

// Top-boundary Neumann source (1/rho) du/dz = S(t,x): a fixed spatial
// profile times a temporal envelope. The default envelope ramps with a half
// cosine over the first `ramp_length` time units and is 1 afterwards; `step`
// switches the source on instantly.
struct TimeSource {
    std::vector<double> profile;  // M+1 nodal values along the top boundary
    enum class Envelope { ramp, step };
    Envelope envelope = Envelope::ramp;
    double ramp_length = 0.25;

    double envelope_at(double t) const;
};

// Dipole profile exp(-(x-0.8)^2/0.1^2) - exp(-(x-0.2)^2/0.1^2).
TimeSource standard_source(const Grid& grid);

// Acoustic pressure with variable bulk modulus kappa and density rho:
//   (1/kappa) d^2 u/dt^2 - div((1/rho) grad u) = 0
// on x in [0,1] (periodic), y in [-1,0]; top boundary carries the Neumann
// source, the bottom is homogeneous Neumann, initial data are zero.
//
// Discretisation: leapfrog in time; conservative 5-point flux stencil with
// the face coefficient 1/rho averaged harmonically in rho (arithmetically in
// 1/rho); Neumann rows closed with ghost nodes. Pressure lives at integer
// nodes and times. The periodic seam stores column M as a copy of column 0.
struct WaveProblem {
    Grid grid;  // y_offset = -1
    ScalarField kappa;
    ScalarField rho;
    std::vector<TimeSource> sources;
    double t_end = 5.0;
    double dt = 0.005;
    double cfl_safety = 1.0;  // fraction of the 1/sqrt(2) bound to allow

    int steps() const;  // t_end/dt, checked integral to 1e-9
};

// Stability limit of the scheme for these coefficients: max admissible dt.
double admissible_dt(const WaveProblem& p);

// March the scheme and record the bottom row at every step (row 0 is t=0).
// Throws NumericalError when the CFL bound dt*c_max/dx <= safety/sqrt(2) is
// violated, reporting the admissible dt.
BoundaryTrace propagate(const WaveProblem& p, int source_index, Exec exec = Exec::parallel);

// Full pressure history (one full-grid snapshot per step), for tests and
// diagnostics. Snapshot s is time s*dt.
std::vector<ScalarField> propagate_full(const WaveProblem& p, int source_index,
                                        Exec exec = Exec::parallel);

// Discrete leapfrog energy at the half step between two consecutive
// snapshots; exactly conserved (up to roundoff) for homogeneous media once
// the source is off.
double discrete_energy(const WaveProblem& p, const ScalarField& u_curr,
                       const ScalarField& u_next);

// Misfit 1/(2|H|) sum_h int_0^T || u_h|bottom - H_h ||^2 dt (trapezoid in
// both time and x) with its exact discrete gradient with respect to the
// nodal kappa and rho fields. The adjoint marches the transposed stencil
// backwards against a full forward checkpoint.
struct Misfit {
    double value = 0.0;
    ScalarField grad_kappa;
    ScalarField grad_rho;
};
Misfit trace_misfit(const WaveProblem& p, const std::vector<BoundaryTrace>& observed,
                    bool want_gradient = true, Exec exec = Exec::parallel);

}  // namespace jointinv::wave
