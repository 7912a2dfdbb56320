#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace pelican {

// 64-bit floats everywhere; reports and model files round-trip exactly.
using Scalar = double;
using Index = Eigen::Index;

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using ArrX = Eigen::ArrayXd;
using ArrXX = Eigen::ArrayXXd;
using VecXi = Eigen::VectorXi;

// Feature-block geometry shared by the encoder, the models and the attacks.
inline constexpr int kEntrySlots = 48;     // 30-minute slots per day
inline constexpr int kEntrySlotMinutes = 30;
inline constexpr int kDurationBins = 24;   // 10-minute bins, capped at 4 hours
inline constexpr int kDaysOfWeek = 7;
inline constexpr int kMinutesPerDay = 1440;
inline constexpr int kDurationCapMinutes = 240;

// Width of one encoded step: |L| + 48 + 24 + 7.
constexpr Index encoded_width(Index n_locations) {
  return n_locations + kEntrySlots + kDurationBins + kDaysOfWeek;
}

constexpr Index locations_from_width(Index width) {
  return width - (kEntrySlots + kDurationBins + kDaysOfWeek);
}

}  // namespace pelican
