#pragma once

#include <algorithm>
#include <cmath>

namespace cim {

// Global rounding convention: half away from zero. The training graph and
// the integer simulator must share this or bit-exactness breaks.
inline double round_half_away(double x) {
    return (x >= 0.0) ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

inline double clip(double x, double lo, double hi) {
    return std::min(std::max(x, lo), hi);
}

}  // namespace cim
