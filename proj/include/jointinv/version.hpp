#pragma once

namespace jointinv {

inline constexpr const char* kToolName = "jointinv";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace jointinv
