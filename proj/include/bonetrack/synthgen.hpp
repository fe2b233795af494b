#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "bonetrack/rng.hpp"
#include "bonetrack/signal.hpp"

namespace bonetrack {

template <typename V>
struct Range {
  V lo{};
  V hi{};
  bool operator==(const Range&) const = default;
};

/// Echo statistics of one anatomical region. The soft-tissue layout (count,
/// spacing, amplitude, speckle level) is what makes regions classifiable.
struct TissueProfile {
  RegionLabel region;
  Range<int> n_soft_interfaces{2, 4};
  Range<double> soft_amp{600.0, 1500.0};
  double soft_spacing_mm = 3.0;
  Range<double> skin_amp{2500.0, 3500.0};
  Range<double> bone_amp{3000.0, 4200.0};
  Range<double> bone_depth_range{20.0, 30.0};  // mm
  double attenuation_mu = 0.015;                // per mm
  double noise_sigma = 70.0;
  double speckle_amp = 60.0;  // scatter level between skin and bone
  double peak_shape_width = 10.0;  // FWHM of the bone echo envelope, samples
  double dropout_prob = 0.02;
  // Strong interface just above the bone (tendon, periosteum).
  double near_bone_prob = 0.35;
  Range<double> near_bone_ratio{0.7, 1.6};  // amplitude relative to the bone echo
  Range<double> near_bone_gap_mm{1.0, 3.5};

  void validate() const;
  bool operator==(const TissueProfile&) const = default;
};

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t frames_per_region = 200;
  AcousticModel acoustic{1540.0, 40e6, 2048};
};

/// Built-in profiles for every region of an area.
std::vector<TissueProfile> default_profiles(Area area);

/// Profiles from an INI file: one section per channel ("[11]") with keys
/// named after the TissueProfile fields; ranges are written "lo,hi".
/// Missing keys keep the built-in value for that channel.
std::vector<TissueProfile> load_profiles(const std::filesystem::path& path, Area area);

struct GeneratedFrame {
  AModeFrame frame;
  PeakAnnotation annotation;
};

GeneratedFrame generate_frame(const TissueProfile& profile, Rng& rng, const AcousticModel& ac,
                              std::uint32_t frame_id = 0);

/// Balanced frames per region; frame ids interleave regions and each frame
/// draws from its own substream, so output does not depend on evaluation order.
Dataset generate_dataset(std::span<const TissueProfile> profiles, const GenConfig& cfg);

/// True when the frame has a bone peak but its global maximum lies outside
/// the annotated segment.
bool distractor_dominant(const LabeledFrame& frame);

/// Amplitude envelope of one echo: Gaussian envelope (FWHM `width`) times a
/// rectified carrier, peaking at offset 0.
double echo_shape(double offset, double width);

}  // namespace bonetrack
