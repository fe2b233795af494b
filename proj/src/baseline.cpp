#include "bonetrack/baseline.hpp"

#include <algorithm>
#include <string>

#include "bonetrack/error.hpp"

namespace bonetrack {

namespace {

constexpr double kWindowMargin = 0.1;
constexpr double kProminenceNoiseFactor = 5.0;

}  // namespace

void BaselineConfig::validate(std::size_t signal_len) const {
  if (!(window_start >= 0 && window_start < window_end &&
        static_cast<std::size_t>(window_end) < signal_len))
    fail(ErrorKind::Config, "baseline window [" + std::to_string(window_start) + ", " +
                                std::to_string(window_end) + "] invalid for " +
                                std::to_string(signal_len) + " samples");
}

std::optional<int> windowed_argmax(const AModeFrame& frame, const BaselineConfig& cfg) {
  cfg.validate(frame.samples.size());
  const auto first = frame.samples.begin() + cfg.window_start;
  const auto best = std::max_element(first, frame.samples.begin() + cfg.window_end + 1);
  if (*best < cfg.min_prominence) return std::nullopt;
  return static_cast<int>(best - frame.samples.begin());
}

std::map<int, BaselineConfig> baseline_windows(std::span<const TissueProfile> profiles,
                                               const AcousticModel& ac) {
  std::map<int, BaselineConfig> out;
  for (const auto& p : profiles) {
    const double lo = p.bone_depth_range.lo * (1.0 - kWindowMargin);
    const double hi = std::min(p.bone_depth_range.hi * (1.0 + kWindowMargin),
                               index_to_depth(static_cast<int>(ac.signal_len()) - 1, ac));
    BaselineConfig c;
    c.window_start = depth_to_index(lo, ac);
    c.window_end = depth_to_index(hi, ac);
    c.min_prominence = static_cast<float>(kProminenceNoiseFactor * p.noise_sigma);
    c.validate(ac.signal_len());
    out[p.region.channel] = c;
  }
  return out;
}

Prediction baseline_predict(const AModeFrame& frame, const std::map<int, BaselineConfig>& windows,
                            const AcousticModel& ac) {
  const auto it = windows.find(frame.region.channel);
  if (it == windows.end())
    fail(ErrorKind::Config, "no baseline window for channel " + std::to_string(frame.region.channel));
  Prediction p;
  p.frame_id = frame.frame_id;
  p.region = frame.region;
  p.peak_index = windowed_argmax(frame, it->second);
  if (p.peak_index) p.depth_mm = index_to_depth(*p.peak_index, ac);
  return p;
}

}  // namespace bonetrack
