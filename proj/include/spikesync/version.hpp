#pragma once

namespace spikesync {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace spikesync
