#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bonetrack/network.hpp"

namespace bonetrack {

/// A maximal run of samples at or above the threshold.
struct Segment {
  int start = 0;
  int end = 0;  // inclusive
  double peak_score = 0.0;

  int midpoint() const noexcept { return (start + end) / 2; }
  bool operator==(const Segment&) const = default;
};

struct Prediction {
  std::uint32_t frame_id = 0;
  RegionLabel region;
  std::vector<double> region_probs;
  std::optional<int> peak_index;   // global sample index
  std::optional<double> depth_mm;  // index_to_depth(peak_index)
  std::vector<Segment> coarse_segments;   // global indices
  std::vector<Segment> refined_segments;  // window-local indices
  std::size_t window_start = 0;
  std::size_t window_width = 0;

  bool operator==(const Prediction&) const = default;
};

struct InferConfig {
  double tau = 0.5;
  SbpMode sbp_mode = SbpMode::Deterministic;
};

/// Throws Config unless 0 < tau < 1.
std::vector<Segment> threshold_segments(std::span<const double> prob, double tau);

/// Coarse segments decide whether a peak exists; the best refined segment
/// (highest score, then lowest start) places it at window_start + its
/// midpoint. Without refined segments the best coarse midpoint is used.
std::optional<int> resolve_peak(std::span<const Segment> coarse, std::span<const Segment> refined,
                                std::size_t window_start);

/// Runs the full pipeline on preprocessed frames of the model's area. `rng`
/// is only needed for stochastic proposals.
std::vector<Prediction> predict_batch(const CascadedModel<float>& model,
                                      std::span<const AModeFrame* const> frames,
                                      const InferConfig& cfg, const AcousticModel& ac,
                                      Rng* rng = nullptr);

Prediction predict(const CascadedModel<float>& model, const AModeFrame& frame,
                   const InferConfig& cfg, const AcousticModel& ac);

}  // namespace bonetrack
