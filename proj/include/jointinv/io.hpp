#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jointinv/grid.hpp"
#include "jointinv/trace.hpp"

namespace jointinv::io {

// Canonical text form of a double: %.17g, which round-trips exactly through
// strtod. All CSV emitters go through this so re-serialising a parsed file
// is byte-identical.
std::string format_double(double v);

// --- ScalarField ---------------------------------------------------------
// CSV: header "i,j,x,y,value", rows in storage order (i outer, j inner).
// Binary: u64 little-endian M, then (M+1)^2 f64 little-endian in storage
// order. The binary header carries only M; the caller supplies the vertical
// offset when reading wave-domain fields.
void write_field_csv(const std::string& path, const ScalarField& f);
ScalarField read_field_csv(const std::string& path);
void write_field_bin(const std::string& path, const ScalarField& f);
ScalarField read_field_bin(const std::string& path, double y_offset = 0.0);

// --- SpectralCoeffs ------------------------------------------------------
// CSV: header "kx,kz,value", one row per mode, then a final "offset,," row.
void write_coeffs_csv(const std::string& path, const SpectralCoeffs& c);
SpectralCoeffs read_coeffs_csv(const std::string& path);

// --- BoundaryTrace -------------------------------------------------------
// CSV: header "step,t,i,x,value". Binary: u64 rows (= steps+1), u64 cols
// (= M+1), then rows*cols f64; dt is supplied by the caller on read.
void write_trace_csv(const std::string& path, const BoundaryTrace& t);
BoundaryTrace read_trace_csv(const std::string& path);
void write_trace_bin(const std::string& path, const BoundaryTrace& t);
BoundaryTrace read_trace_bin(const std::string& path, double dt);

// --- generic helpers -----------------------------------------------------
void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);
void ensure_dir(const std::string& path);

// Raw little-endian blob: `header_words` u64 shape words followed by an f64
// payload running to end of file. Callers validate the payload length against
// the header.
void write_blob(const std::string& path, const std::vector<std::uint64_t>& header,
                const std::vector<double>& payload);
std::pair<std::vector<std::uint64_t>, std::vector<double>> read_blob(const std::string& path,
                                                                     int header_words);

}  // namespace jointinv::io
