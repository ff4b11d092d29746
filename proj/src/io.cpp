#include "jointinv/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "jointinv/errors.hpp"

namespace jointinv::io {

namespace {

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode);
    if (!out) throw IoError("cannot open for writing: " + path);
    return out;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw IoError("cannot open for reading: " + path);
    return in;
}

double parse_double(const std::string& tok, const std::string& path, int line) {
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
        throw ConfigError(path + ":" + std::to_string(line) + ": bad number '" + tok + "'");
    return v;
}

long parse_long(const std::string& tok, const std::string& path, int line) {
    char* end = nullptr;
    long v = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0')
        throw ConfigError(path + ":" + std::to_string(line) + ": bad integer '" + tok + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

void expect_header(std::istream& in, const std::string& want, const std::string& path) {
    std::string got;
    if (!std::getline(in, got) || got != want)
        throw ConfigError(path + ":1: expected header '" + want + "'");
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated binary header: " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64_block(std::ostream& out, const std::vector<double>& v) {
    // Little-endian host assumed (x86-64 / aarch64); raw dump is the format.
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_f64_block(std::istream& in, std::vector<double>& v, const std::string& path) {
    if (!in.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double))))
        throw IoError("truncated binary payload: " + path);
}

}  // namespace

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_field_csv(const std::string& path, const ScalarField& f) {
    auto out = open_out(path);
    out << "i,j,x,y,value\n";
    const Grid& g = f.grid;
    for (int i = 0; i <= g.m; ++i)
        for (int j = 0; j <= g.m; ++j)
            out << i << ',' << j << ',' << format_double(g.x(i)) << ','
                << format_double(g.y(j)) << ',' << format_double(f.at(i, j)) << '\n';
}

ScalarField read_field_csv(const std::string& path) {
    auto in = open_in(path);
    expect_header(in, "i,j,x,y,value", path);
    std::vector<std::array<double, 5>> rows;
    std::string line;
    int lineno = 1;
    long max_i = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tok = split_csv(line);
        if (tok.size() != 5)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 5 fields");
        std::array<double, 5> r{};
        r[0] = static_cast<double>(parse_long(tok[0], path, lineno));
        r[1] = static_cast<double>(parse_long(tok[1], path, lineno));
        for (int c = 2; c < 5; ++c) r[c] = parse_double(tok[c], path, lineno);
        max_i = std::max(max_i, static_cast<long>(r[0]));
        rows.push_back(r);
    }
    const int m = static_cast<int>(max_i);
    if (rows.size() != static_cast<std::size_t>(m + 1) * (m + 1))
        throw ConfigError(path + ": row count does not form a complete (M+1)^2 grid");
    // Vertical offset comes from the recorded y of the first row (i=0, j=0).
    Grid g{m, rows.front()[3]};
    ScalarField f(g);
    for (const auto& r : rows) f.at(static_cast<int>(r[0]), static_cast<int>(r[1])) = r[4];
    return f;
}

void write_field_bin(const std::string& path, const ScalarField& f) {
    auto out = open_out(path, std::ios::binary);
    write_u64(out, static_cast<std::uint64_t>(f.grid.m));
    write_f64_block(out, f.values);
}

ScalarField read_field_bin(const std::string& path, double y_offset) {
    auto in = open_in(path, std::ios::binary);
    const int m = static_cast<int>(read_u64(in, path));
    ScalarField f(Grid{m, y_offset});
    read_f64_block(in, f.values, path);
    return f;
}

void write_coeffs_csv(const std::string& path, const SpectralCoeffs& c) {
    auto out = open_out(path);
    out << "kx,kz,value\n";
    for (int kx = 0; kx <= c.kmax; ++kx)
        for (int kz = 0; kz <= c.kmax; ++kz)
            out << kx << ',' << kz << ',' << format_double(c.at(kx, kz)) << '\n';
    out << "offset,," << format_double(c.offset) << '\n';
}

SpectralCoeffs read_coeffs_csv(const std::string& path) {
    auto in = open_in(path);
    expect_header(in, "kx,kz,value", path);
    std::string line;
    int lineno = 1;
    std::vector<std::array<double, 3>> rows;
    double offset = 0.0;
    bool have_offset = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tok = split_csv(line);
        if (tok.size() != 3)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        if (tok[0] == "offset") {
            offset = parse_double(tok[2], path, lineno);
            have_offset = true;
            continue;
        }
        rows.push_back({static_cast<double>(parse_long(tok[0], path, lineno)),
                        static_cast<double>(parse_long(tok[1], path, lineno)),
                        parse_double(tok[2], path, lineno)});
    }
    if (!have_offset) throw ConfigError(path + ": missing offset row");
    int kmax = 0;
    for (const auto& r : rows) kmax = std::max(kmax, static_cast<int>(std::max(r[0], r[1])));
    if (rows.size() != static_cast<std::size_t>(kmax + 1) * (kmax + 1))
        throw ConfigError(path + ": mode rows do not form a complete (K+1)^2 band");
    SpectralCoeffs c(kmax);
    c.offset = offset;
    for (const auto& r : rows) c.at(static_cast<int>(r[0]), static_cast<int>(r[1])) = r[2];
    return c;
}

void write_trace_csv(const std::string& path, const BoundaryTrace& t) {
    auto out = open_out(path);
    out << "step,t,i,x,value\n";
    for (int s = 0; s <= t.steps; ++s)
        for (int i = 0; i <= t.m; ++i)
            out << s << ',' << format_double(s * t.dt) << ',' << i << ','
                << format_double(static_cast<double>(i) / t.m) << ','
                << format_double(t.at(s, i)) << '\n';
}

BoundaryTrace read_trace_csv(const std::string& path) {
    auto in = open_in(path);
    expect_header(in, "step,t,i,x,value", path);
    std::string line;
    int lineno = 1;
    long max_step = 0, max_i = 0;
    std::vector<std::array<double, 3>> rows;  // step, i, value
    double dt = 0.0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tok = split_csv(line);
        if (tok.size() != 5)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 5 fields");
        const long step = parse_long(tok[0], path, lineno);
        const double tt = parse_double(tok[1], path, lineno);
        const long i = parse_long(tok[2], path, lineno);
        const double v = parse_double(tok[4], path, lineno);
        if (step == 1 && i == 0) dt = tt;
        max_step = std::max(max_step, step);
        max_i = std::max(max_i, i);
        rows.push_back({static_cast<double>(step), static_cast<double>(i), v});
    }
    BoundaryTrace t(static_cast<int>(max_i), static_cast<int>(max_step), dt);
    if (rows.size() != t.values.size())
        throw ConfigError(path + ": row count does not form a complete trace");
    for (const auto& r : rows) t.at(static_cast<int>(r[0]), static_cast<int>(r[1])) = r[2];
    return t;
}

void write_trace_bin(const std::string& path, const BoundaryTrace& t) {
    auto out = open_out(path, std::ios::binary);
    write_u64(out, static_cast<std::uint64_t>(t.steps + 1));
    write_u64(out, static_cast<std::uint64_t>(t.m + 1));
    write_f64_block(out, t.values);
}

BoundaryTrace read_trace_bin(const std::string& path, double dt) {
    auto in = open_in(path, std::ios::binary);
    const int rows = static_cast<int>(read_u64(in, path));
    const int cols = static_cast<int>(read_u64(in, path));
    BoundaryTrace t(cols - 1, rows - 1, dt);
    read_f64_block(in, t.values, path);
    return t;
}

void write_text(const std::string& path, const std::string& content) {
    auto out = open_out(path);
    out << content;
}

std::string read_text(const std::string& path) {
    auto in = open_in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

void write_blob(const std::string& path, const std::vector<std::uint64_t>& header,
                const std::vector<double>& payload) {
    auto out = open_out(path, std::ios::binary);
    for (std::uint64_t w : header) write_u64(out, w);
    write_f64_block(out, payload);
}

std::pair<std::vector<std::uint64_t>, std::vector<double>> read_blob(const std::string& path,
                                                                     int header_words) {
    auto in = open_in(path, std::ios::binary);
    std::vector<std::uint64_t> header(static_cast<std::size_t>(header_words));
    for (auto& w : header) w = read_u64(in, path);
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path + ": " + ec.message());
    const std::uint64_t payload_bytes = bytes - 8ull * static_cast<std::uint64_t>(header_words);
    if (payload_bytes % sizeof(double) != 0)
        throw IoError("payload size not a multiple of 8 bytes: " + path);
    std::vector<double> payload(payload_bytes / sizeof(double));
    read_f64_block(in, payload, path);
    return {std::move(header), std::move(payload)};
}

}  // namespace jointinv::io
