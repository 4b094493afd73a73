#pragma once

#include <cstdint>

namespace metro {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kSepId = 2;
inline constexpr std::int32_t kMaskId = 3;
inline constexpr std::int32_t kNumSpecial = 4;

inline constexpr bool is_special(std::int32_t id) { return id >= 0 && id < kNumSpecial; }

}  // namespace metro
