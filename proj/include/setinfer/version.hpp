#pragma once

namespace setinfer {

inline constexpr const char* kArtifactVersion = "0.1.0";

}  // namespace setinfer
