#pragma once

namespace stockformer {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace stockformer
