#pragma once

#include "jointinv/exec.hpp"
#include "jointinv/grid.hpp"

namespace jointinv::basis {

struct ModeIndex {
    int kx = 0;
    int kz = 0;
};

// phi_k(x,z) = cos(kx*pi*x) * cos(kz*pi*z), z the shifted ordinate in [0,1].
double eigenfunction_value(ModeIndex k, double x, double z);

// Neumann Laplacian eigenvalue pi^2 * (kx^2 + kz^2).
double eigenvalue(ModeIndex k);

// Nodal field of the band-limited expansion: offset + sum_k c_k phi_k.
ScalarField synthesize(const SpectralCoeffs& coeffs, const Grid& grid,
                       Exec exec = Exec::parallel);

// Trapezoidal projection onto modes 0..K. Requires M >= 4K (anti-aliasing
// guard; the quadrature itself is exact for K < M). Constants fold into the
// (0,0) coefficient; the returned offset is always 0.
SpectralCoeffs analyze(const ScalarField& field, int kmax, Exec exec = Exec::parallel);

// Pullback of a nodal gradient through synthesize: out[k] = sum_n grad_n *
// phi_k(node n) (plus nothing for the offset, which inversion keeps at 0).
// This is the exact transpose of the linear map coeffs -> field.
SpectralCoeffs synthesize_transpose(const ScalarField& grad, int kmax,
                                    Exec exec = Exec::parallel);

}  // namespace jointinv::basis
