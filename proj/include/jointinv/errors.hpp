#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace jointinv {

// Process exit codes used by the CLI. Library code throws one of the
// exception types below; the CLI maps them back to these codes.
enum class ExitCode : int {
    ok = 0,
    config = 2,     // bad config / malformed input file
    numerical = 3,  // solver or optimizer failure
    io = 4,         // missing or unwritable path
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ExitCode::config, msg) {}
};

struct NumericalError : Error {
    explicit NumericalError(const std::string& msg) : Error(ExitCode::numerical, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

// Thrown when a Wolfe line search cannot find any decrease. Carries the best
// iterate seen so callers that can live with a partial stage (the staged
// inversion driver does) may recover it.
struct LineSearchStall : NumericalError {
    LineSearchStall(const std::string& msg, std::vector<double> x, double f)
        : NumericalError(msg), best_x(std::move(x)), best_f(f) {}
    std::vector<double> best_x;
    double best_f;
};

}  // namespace jointinv
