// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>

#include "hivt5/errors.hpp"

namespace hivt5 {

// Normalized bounding box (x0, y0, x1, y1), all in [0, 1], x0 <= x1, y0 <= y1.
using Box = std::array<double, 4>;

inline void validate_box(const Box& b, const std::string& where) {
    auto bad = [&](const char* why) { throw ValidationError(where + ": " + why); };
    for (double c : b)
        if (!(c >= 0.0 && c <= 1.0)) bad("coordinate outside [0,1]");
    if (b[0] > b[2]) bad("x0 > x1");
    if (b[1] > b[3]) bad("y0 > y1");
}

}  // namespace hivt5
