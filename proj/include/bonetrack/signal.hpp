#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bonetrack/error.hpp"

namespace bonetrack {

// Amplitudes above this are clipped; the normalized copy is amplitude / kAmplitudeCeiling.
inline constexpr float kAmplitudeCeiling = 5000.0f;
// Width of an annotated bone-peak segment, in samples.
inline constexpr int kSegmentWidth = 10;

/// Speed of sound, sampling rate and frame length. The depth covered by one
/// sample is the round-trip distance v / (2 fs), expressed in millimetres.
class AcousticModel {
 public:
  AcousticModel() = default;
  AcousticModel(double speed_m_s, double sample_rate_hz, std::size_t signal_len);

  double speed() const noexcept { return speed_; }
  double sample_rate() const noexcept { return sample_rate_; }
  std::size_t signal_len() const noexcept { return signal_len_; }
  double d_unit() const noexcept { return speed_ / (2.0 * sample_rate_) * 1000.0; }
  double max_depth() const noexcept { return static_cast<double>(signal_len_) * d_unit(); }

  bool operator==(const AcousticModel&) const = default;

 private:
  double speed_ = 1540.0;
  double sample_rate_ = 40e6;
  std::size_t signal_len_ = 6760;
};

enum class Area : std::uint8_t { Femur = 0, Tibia = 1 };

const char* to_string(Area area) noexcept;
Area parse_area(const std::string& name);

/// Number of anatomical regions (classifier outputs) for an area.
std::size_t region_count(Area area) noexcept;

/// Transducer channel and its anatomical region. Femur regions are channels
/// 11, 12, 15; tibia regions are channels 16 through 20.
struct RegionLabel {
  Area area = Area::Femur;
  int channel = 11;
  std::size_t region_id = 0;

  static RegionLabel from_id(Area area, std::size_t region_id);
  static RegionLabel from_channel(Area area, int channel);

  std::string name() const;  // e.g. "R_alpha"
  bool operator==(const RegionLabel&) const = default;
};

struct AModeFrame {
  std::vector<float> samples;     // clamped to [0, 5000]
  std::vector<float> normalized;  // samples / 5000
  RegionLabel region;
  std::uint32_t frame_id = 0;
};

struct PeakAnnotation {
  int seg_start = 0;
  int seg_end = 0;  // inclusive
  double depth_mm = 0.0;
  bool present = false;

  int midpoint() const noexcept { return (seg_start + seg_end) / 2; }

  /// A kSegmentWidth-wide segment whose floor midpoint is `index`, shifted
  /// inward when it would cross either end of the frame.
  static PeakAnnotation centered_at(int index, double depth_mm, std::size_t signal_len);
  static PeakAnnotation absent() { return {}; }

  bool operator==(const PeakAnnotation&) const = default;
};

enum class Split : std::uint8_t { Unassigned, Train, Test };

struct LabeledFrame {
  AModeFrame frame;
  PeakAnnotation annotation;
  Split split = Split::Unassigned;
};

struct Dataset {
  AcousticModel acoustic;
  Area area = Area::Femur;
  std::vector<LabeledFrame> frames;

  std::size_t count(Split split) const;
  std::vector<const LabeledFrame*> select(Split split) const;
};

/// Rounds half-to-even and clamps to the last sample. Throws Range on a
/// negative or over-range depth.
int depth_to_index(double depth_mm, const AcousticModel& ac);
double index_to_depth(int index, const AcousticModel& ac);

AModeFrame preprocess_frame(std::span<const float> raw, const AcousticModel& ac,
                            RegionLabel region = {}, std::uint32_t frame_id = 0);

struct ShiftedFrame {
  AModeFrame frame;
  PeakAnnotation annotation;
};

/// Moves the echo trace by `shift` samples (positive = deeper), zero-filling
/// the vacated end, and moves the annotation with it.
ShiftedFrame shift_augment(const AModeFrame& frame, const PeakAnnotation& annotation, int shift,
                           const AcousticModel& ac);

// Frame store: little-endian binary, one file per dataset.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);
void export_dataset_csv(const std::filesystem::path& path, const Dataset& dataset);

}  // namespace bonetrack
