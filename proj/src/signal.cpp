#include "bonetrack/signal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.hpp"
#include "bonetrack/error.hpp"

namespace bonetrack {

namespace {

constexpr std::array<int, 3> kFemurChannels{11, 12, 15};
constexpr std::array<int, 5> kTibiaChannels{16, 17, 18, 19, 20};
constexpr std::array<const char*, 3> kFemurNames{"R_alpha", "R_beta", "R_gamma"};
constexpr std::array<const char*, 5> kTibiaNames{"R_delta", "R_epsilon", "R_zeta", "R_eta",
                                                 "R_theta"};

std::span<const int> channels_of(Area area) {
  if (area == Area::Femur) return kFemurChannels;
  return kTibiaChannels;
}

constexpr char kStoreMagic[4] = {'B', 'T', 'D', 'S'};
constexpr std::uint32_t kStoreVersion = 1;

}  // namespace

AcousticModel::AcousticModel(double speed_m_s, double sample_rate_hz, std::size_t signal_len)
    : speed_(speed_m_s), sample_rate_(sample_rate_hz), signal_len_(signal_len) {
  if (!(speed_m_s > 0.0) || !(sample_rate_hz > 0.0) || signal_len == 0)
    fail(ErrorKind::Config, "acoustic model requires v > 0, fs > 0 and signal_len > 0");
}

const char* to_string(Area area) noexcept { return area == Area::Femur ? "femur" : "tibia"; }

Area parse_area(const std::string& name) {
  if (name == "femur") return Area::Femur;
  if (name == "tibia") return Area::Tibia;
  fail(ErrorKind::Config, "unknown area '" + name + "' (expected femur or tibia)");
}

std::size_t region_count(Area area) noexcept { return channels_of(area).size(); }

RegionLabel RegionLabel::from_id(Area area, std::size_t region_id) {
  const auto channels = channels_of(area);
  if (region_id >= channels.size())
    fail(ErrorKind::Config, "region id " + std::to_string(region_id) + " out of range for " +
                                to_string(area));
  return {area, channels[region_id], region_id};
}

RegionLabel RegionLabel::from_channel(Area area, int channel) {
  const auto channels = channels_of(area);
  const auto it = std::find(channels.begin(), channels.end(), channel);
  if (it == channels.end())
    fail(ErrorKind::Config,
         "channel " + std::to_string(channel) + " is not a " + to_string(area) + " channel");
  return {area, channel, static_cast<std::size_t>(it - channels.begin())};
}

std::string RegionLabel::name() const {
  return area == Area::Femur ? kFemurNames.at(region_id) : kTibiaNames.at(region_id);
}

PeakAnnotation PeakAnnotation::centered_at(int index, double depth_mm, std::size_t signal_len) {
  const int len = static_cast<int>(signal_len);
  if (len < kSegmentWidth) fail(ErrorKind::Range, "frame shorter than a peak segment");
  int start = index - (kSegmentWidth / 2 - 1);
  start = std::clamp(start, 0, len - kSegmentWidth);
  return {start, start + kSegmentWidth - 1, depth_mm, true};
}

std::size_t Dataset::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      frames.begin(), frames.end(), [split](const LabeledFrame& f) { return f.split == split; }));
}

std::vector<const LabeledFrame*> Dataset::select(Split split) const {
  std::vector<const LabeledFrame*> out;
  for (const auto& f : frames)
    if (f.split == split) out.push_back(&f);
  return out;
}

int depth_to_index(double depth_mm, const AcousticModel& ac) {
  if (!(depth_mm >= 0.0) || depth_mm > ac.max_depth())
    fail(ErrorKind::Range, "depth " + std::to_string(depth_mm) + " mm outside [0, " +
                               std::to_string(ac.max_depth()) + "]");
  // nearbyint honours the default FE_TONEAREST mode: ties go to even.
  const double idx = std::nearbyint(depth_mm / ac.d_unit());
  const double last = static_cast<double>(ac.signal_len() - 1);
  return static_cast<int>(std::min(idx, last));
}

double index_to_depth(int index, const AcousticModel& ac) {
  if (index < 0 || static_cast<std::size_t>(index) >= ac.signal_len())
    fail(ErrorKind::Range, "sample index " + std::to_string(index) + " out of range");
  return static_cast<double>(index) * ac.d_unit();
}

AModeFrame preprocess_frame(std::span<const float> raw, const AcousticModel& ac,
                            RegionLabel region, std::uint32_t frame_id) {
  if (raw.size() != ac.signal_len())
    fail(ErrorKind::Shape, "frame has " + std::to_string(raw.size()) + " samples, expected " +
                               std::to_string(ac.signal_len()));
  AModeFrame frame;
  frame.region = region;
  frame.frame_id = frame_id;
  frame.samples.resize(raw.size());
  frame.normalized.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    // NaN compares false both ways and lands on 0.
    const float v = raw[i] > 0.0f ? std::min(raw[i], kAmplitudeCeiling) : 0.0f;
    frame.samples[i] = v;
    frame.normalized[i] = v / kAmplitudeCeiling;
  }
  return frame;
}

ShiftedFrame shift_augment(const AModeFrame& frame, const PeakAnnotation& annotation, int shift,
                           const AcousticModel& ac) {
  const int len = static_cast<int>(ac.signal_len());
  if (frame.samples.size() != ac.signal_len())
    fail(ErrorKind::Shape, "frame length does not match the acoustic model");
  if (std::abs(shift) * 10 >= len)
    fail(ErrorKind::Augmentation,
         "shift " + std::to_string(shift) + " exceeds a tenth of the frame length");
  if (shift == 0) return {frame, annotation};

  PeakAnnotation moved = annotation;
  if (annotation.present) {
    moved.seg_start += shift;
    moved.seg_end += shift;
    if (moved.seg_start < 0 || moved.seg_end >= len)
      fail(ErrorKind::Augmentation, "shift " + std::to_string(shift) +
                                        " pushes the peak segment out of the frame");
    moved.depth_mm = index_to_depth(moved.midpoint(), ac);
  }

  AModeFrame out = frame;
  std::fill(out.samples.begin(), out.samples.end(), 0.0f);
  std::fill(out.normalized.begin(), out.normalized.end(), 0.0f);
  for (int i = 0; i < len; ++i) {
    const int src = i - shift;
    if (src < 0 || src >= len) continue;
    out.samples[i] = frame.samples[src];
    out.normalized[i] = frame.normalized[src];
  }
  return {std::move(out), moved};
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  using namespace binio;
  os.write(kStoreMagic, 4);
  put_u32(os, kStoreVersion);
  put_f64(os, dataset.acoustic.speed());
  put_f64(os, dataset.acoustic.sample_rate());
  put_u32(os, static_cast<std::uint32_t>(dataset.acoustic.signal_len()));
  put_u8(os, static_cast<std::uint8_t>(dataset.area));
  put_u32(os, static_cast<std::uint32_t>(dataset.frames.size()));
  for (const auto& lf : dataset.frames) {
    if (lf.frame.samples.size() != dataset.acoustic.signal_len())
      fail(ErrorKind::Shape, "frame length does not match the dataset header");
    put_u32(os, lf.frame.frame_id);
    put_u32(os, static_cast<std::uint32_t>(lf.frame.region.channel));
    for (float s : lf.frame.samples) put_f32(os, s);
    put_i32(os, lf.annotation.seg_start);
    put_i32(os, lf.annotation.seg_end);
    put_f64(os, lf.annotation.depth_mm);
    put_u8(os, lf.annotation.present ? 1 : 0);
    put_u8(os, static_cast<std::uint8_t>(lf.split));
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  using namespace binio;
  char magic[4];
  read_exact(is, magic, 4);
  if (!std::equal(magic, magic + 4, kStoreMagic))
    fail(ErrorKind::Io, "'" + path.string() + "' is not a frame store");
  if (get_u32(is) != kStoreVersion) fail(ErrorKind::Io, "unsupported frame store version");
  const double v = get_f64(is);
  const double fs = get_f64(is);
  const std::uint32_t len = get_u32(is);
  const std::uint8_t area = get_u8(is);
  if (area > 1) fail(ErrorKind::Io, "corrupt area field");

  Dataset ds;
  ds.acoustic = AcousticModel(v, fs, len);
  ds.area = static_cast<Area>(area);
  const std::uint32_t n = get_u32(is);
  ds.frames.reserve(n);
  std::vector<float> raw(len);
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::uint32_t frame_id = get_u32(is);
    const int channel = static_cast<int>(get_u32(is));
    for (auto& s : raw) s = get_f32(is);
    LabeledFrame lf;
    lf.frame = preprocess_frame(raw, ds.acoustic, RegionLabel::from_channel(ds.area, channel),
                                frame_id);
    lf.annotation.seg_start = get_i32(is);
    lf.annotation.seg_end = get_i32(is);
    lf.annotation.depth_mm = get_f64(is);
    lf.annotation.present = get_u8(is) != 0;
    const std::uint8_t split = get_u8(is);
    if (split > 2) fail(ErrorKind::Io, "corrupt split field");
    lf.split = static_cast<Split>(split);
    ds.frames.push_back(std::move(lf));
  }
  return ds;
}

void export_dataset_csv(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os << "frame_id,channel,region,seg_start,seg_end,depth_mm,present";
  for (std::size_t i = 0; i < dataset.acoustic.signal_len(); ++i) os << ",s" << i;
  os << '\n';
  os << std::setprecision(9);
  for (const auto& lf : dataset.frames) {
    const auto& a = lf.annotation;
    os << lf.frame.frame_id << ',' << lf.frame.region.channel << ',' << lf.frame.region.name()
       << ',' << a.seg_start << ',' << a.seg_end << ',' << a.depth_mm << ','
       << (a.present ? 1 : 0);
    for (float s : lf.frame.samples) os << ',' << s;
    os << '\n';
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

}  // namespace bonetrack
