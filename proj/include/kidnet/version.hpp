#pragma once

namespace kidnet {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace kidnet
