#pragma once

namespace tlab {

// Reserved vocabulary slots, fixed across every corpus.
inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kClsId = 3;
inline constexpr int kSepId = 4;
inline constexpr int kReservedIds = 5;

}  // namespace tlab
