#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "bonetrack/inference.hpp"
#include "bonetrack/synthgen.hpp"

namespace bonetrack {

/// Highest-peak detector restricted to an expert search window.
struct BaselineConfig {
  int window_start = 0;
  int window_end = 0;  // inclusive
  float min_prominence = 350.0f;

  /// Throws Config unless 0 <= window_start < window_end < signal_len.
  void validate(std::size_t signal_len) const;
};

/// Index of the largest raw amplitude in [window_start, window_end]; none
/// when that maximum is below min_prominence.
std::optional<int> windowed_argmax(const AModeFrame& frame, const BaselineConfig& cfg);

/// One window per channel from the profile's bone depth range widened by
/// 10% on both sides; min_prominence is 5x the profile noise.
std::map<int, BaselineConfig> baseline_windows(std::span<const TissueProfile> profiles,
                                               const AcousticModel& ac);

/// Baseline output in the model's prediction shape. The channel is known to
/// the baseline, so the reported region is the frame's own.
Prediction baseline_predict(const AModeFrame& frame, const std::map<int, BaselineConfig>& windows,
                            const AcousticModel& ac);

}  // namespace bonetrack
