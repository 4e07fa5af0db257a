#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace hmar {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckReport {
    std::string component;
    double max_error = 0.0; // max relative error over all trials
    std::size_t trials = 0;

    bool passed() const { return max_error < kGradCheckTolerance; }
};

/// Central-difference check of the KAN layer, channel attention, the shallow conv block, both
/// model paths and every loss, each over `seeds` random draws (model paths use fewer).
std::vector<GradCheckReport> gradient_suite(std::size_t seeds = 20);

} // namespace hmar
