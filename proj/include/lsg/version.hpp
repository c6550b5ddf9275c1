#pragma once

namespace lsg {
inline constexpr const char* kVersion = "0.1.0";
}
