#include "bonetrack/synthgen.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <numbers>
#include <sstream>

#include "bonetrack/error.hpp"

namespace bonetrack {

namespace {

// Rectified carrier: 5 MHz at 40 MHz sampling, i.e. an 8-sample period.
constexpr double kCarrierPeriod = 8.0;
constexpr double kSoftWidthRatio = 0.6;
constexpr double kSkinDepthMm = 1.0;

struct Fingerprint {
  int channel;
  Range<int> n_soft;
  double spacing;
  Range<double> soft_amp;
  double speckle;
  Range<double> depth;
};

constexpr Fingerprint kFemur[] = {
    {11, {2, 3}, 4.0, {900.0, 1800.0}, 50.0, {20.0, 28.0}},
    {12, {4, 6}, 2.5, {500.0, 1100.0}, 130.0, {22.0, 30.0}},
    {15, {6, 9}, 1.8, {1200.0, 2200.0}, 25.0, {24.0, 33.0}},
};

constexpr Fingerprint kTibia[] = {
    {16, {1, 2}, 5.0, {1500.0, 2500.0}, 40.0, {18.0, 26.0}},
    {17, {3, 4}, 3.0, {700.0, 1300.0}, 90.0, {20.0, 28.0}},
    {18, {5, 7}, 2.2, {400.0, 900.0}, 150.0, {22.0, 30.0}},
    {19, {2, 3}, 2.0, {1800.0, 2800.0}, 20.0, {24.0, 32.0}},
    {20, {6, 8}, 1.6, {1000.0, 1800.0}, 70.0, {21.0, 29.0}},
};

double uniform(Rng& rng, Range<double> r) {
  if (r.hi <= r.lo) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

void add_echo(std::vector<double>& signal, double center, double amp, double width) {
  const double reach = 3.0 * width;
  const auto lo = static_cast<std::ptrdiff_t>(std::floor(center - reach));
  const auto hi = static_cast<std::ptrdiff_t>(std::ceil(center + reach));
  const auto n = static_cast<std::ptrdiff_t>(signal.size());
  for (std::ptrdiff_t i = std::max<std::ptrdiff_t>(0, lo); i <= std::min(hi, n - 1); ++i)
    signal[static_cast<std::size_t>(i)] += amp * echo_shape(static_cast<double>(i) - center, width);
}

template <typename V>
void check_range(const Range<V>& r, V lo, V hi, const char* what) {
  if (!(r.lo >= lo && r.hi <= hi && r.lo <= r.hi))
    fail(ErrorKind::Config, std::string("tissue profile: ") + what + " out of range");
}

template <typename V>
Range<V> parse_range(const std::string& text) {
  std::istringstream is(text);
  Range<V> r;
  char comma = 0;
  if (!(is >> r.lo)) fail(ErrorKind::Config, "bad range '" + text + "'");
  if (is >> comma) {
    if (comma != ',' || !(is >> r.hi)) fail(ErrorKind::Config, "bad range '" + text + "'");
  } else {
    r.hi = r.lo;
  }
  return r;
}

}  // namespace

double echo_shape(double offset, double width) {
  const double sigma = width / (2.0 * std::sqrt(2.0 * std::numbers::ln2));
  const double envelope = std::exp(-0.5 * offset * offset / (sigma * sigma));
  return envelope * std::abs(std::cos(2.0 * std::numbers::pi * offset / kCarrierPeriod));
}

bool distractor_dominant(const LabeledFrame& f) {
  if (!f.annotation.present || f.frame.samples.empty()) return false;
  const auto& s = f.frame.samples;
  const auto i = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
  return i < f.annotation.seg_start || i > f.annotation.seg_end;
}

void TissueProfile::validate() const {
  check_range(n_soft_interfaces, 0, 64, "n_soft_interfaces");
  check_range(soft_amp, 0.0, 5000.0, "soft_amp");
  check_range(skin_amp, 0.0, 5000.0, "skin_amp");
  check_range(bone_amp, 0.0, 5000.0, "bone_amp");
  check_range(bone_depth_range, 5.0, 120.0, "bone_depth_range");
  check_range(near_bone_ratio, 0.0, 10.0, "near_bone_ratio");
  check_range(near_bone_gap_mm, 0.0, 20.0, "near_bone_gap_mm");
  if (!(dropout_prob >= 0.0 && dropout_prob <= 0.1))
    fail(ErrorKind::Config, "tissue profile: dropout_prob must lie in [0, 0.1]");
  if (!(near_bone_prob >= 0.0 && near_bone_prob <= 1.0))
    fail(ErrorKind::Config, "tissue profile: near_bone_prob must lie in [0, 1]");
  if (!(attenuation_mu >= 0.0) || !(noise_sigma >= 0.0) || !(speckle_amp >= 0.0) ||
      !(soft_spacing_mm > 0.0) || !(peak_shape_width > 0.0))
    fail(ErrorKind::Config, "tissue profile: negative or zero scale parameter");
}

std::vector<TissueProfile> default_profiles(Area area) {
  std::vector<TissueProfile> out;
  const std::span<const Fingerprint> table =
      area == Area::Femur ? std::span<const Fingerprint>(kFemur) : std::span<const Fingerprint>(kTibia);
  for (const auto& f : table) {
    TissueProfile p;
    p.region = RegionLabel::from_channel(area, f.channel);
    p.n_soft_interfaces = f.n_soft;
    p.soft_spacing_mm = f.spacing;
    p.soft_amp = f.soft_amp;
    p.speckle_amp = f.speckle;
    p.bone_depth_range = f.depth;
    out.push_back(p);
  }
  return out;
}

std::vector<TissueProfile> load_profiles(const std::filesystem::path& path, Area area) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::Io, "cannot read profiles '" + path.string() + "': " + e.what());
  }
  auto profiles = default_profiles(area);
  for (const auto& [section, keys] : tree) {
    int channel = 0;
    try {
      channel = std::stoi(section);
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "profile section '" + section + "' is not a channel number");
    }
    const auto region = RegionLabel::from_channel(area, channel);
    TissueProfile& p = profiles[region.region_id];
    for (const auto& [key, node] : keys) {
      const std::string v = node.get_value<std::string>();
      try {
        if (key == "n_soft_interfaces") p.n_soft_interfaces = parse_range<int>(v);
        else if (key == "soft_amp") p.soft_amp = parse_range<double>(v);
        else if (key == "soft_spacing_mm") p.soft_spacing_mm = std::stod(v);
        else if (key == "skin_amp") p.skin_amp = parse_range<double>(v);
        else if (key == "bone_amp") p.bone_amp = parse_range<double>(v);
        else if (key == "bone_depth_range") p.bone_depth_range = parse_range<double>(v);
        else if (key == "attenuation_mu") p.attenuation_mu = std::stod(v);
        else if (key == "noise_sigma") p.noise_sigma = std::stod(v);
        else if (key == "speckle_amp") p.speckle_amp = std::stod(v);
        else if (key == "peak_shape_width") p.peak_shape_width = std::stod(v);
        else if (key == "dropout_prob") p.dropout_prob = std::stod(v);
        else if (key == "near_bone_prob") p.near_bone_prob = std::stod(v);
        else if (key == "near_bone_ratio") p.near_bone_ratio = parse_range<double>(v);
        else if (key == "near_bone_gap_mm") p.near_bone_gap_mm = parse_range<double>(v);
        else fail(ErrorKind::Config, "unknown profile key '" + key + "' in section " + section);
      } catch (const std::logic_error&) {
        fail(ErrorKind::Config, "bad value '" + v + "' for " + key + " in section " + section);
      }
    }
    p.validate();
  }
  return profiles;
}

GeneratedFrame generate_frame(const TissueProfile& profile, Rng& rng, const AcousticModel& ac,
                              std::uint32_t frame_id) {
  profile.validate();
  const double du = ac.d_unit();
  const double depth = uniform(rng, profile.bone_depth_range);
  if (depth + 3.0 * profile.peak_shape_width * du > ac.max_depth())
    fail(ErrorKind::Generator, "bone depth " + std::to_string(depth) +
                                   " mm does not fit a frame of " +
                                   std::to_string(ac.max_depth()) + " mm");
  const int bone_idx = depth_to_index(depth, ac);
  auto attenuated = [&](double amp, double d_mm) {
    return amp * std::exp(-profile.attenuation_mu * d_mm);
  };
  const double soft_width = kSoftWidthRatio * profile.peak_shape_width;

  std::vector<double> signal(ac.signal_len(), 0.0);
  std::normal_distribution<double> unit(0.0, 1.0);

  // Speckle from skin down to the bone; nothing propagates past the bone.
  const auto speckle_lo = static_cast<std::size_t>(kSkinDepthMm / du);
  for (std::size_t i = speckle_lo; i < static_cast<std::size_t>(bone_idx); ++i)
    signal[i] += std::abs(unit(rng)) * attenuated(profile.speckle_amp, static_cast<double>(i) * du);

  add_echo(signal, kSkinDepthMm / du, uniform(rng, profile.skin_amp), soft_width);

  const int n_soft = std::uniform_int_distribution<int>(profile.n_soft_interfaces.lo,
                                                        profile.n_soft_interfaces.hi)(rng);
  double at = uniform(rng, {2.5, 4.0});
  for (int k = 0; k < n_soft && at < depth - 1.0; ++k) {
    add_echo(signal, at / du, attenuated(uniform(rng, profile.soft_amp), at), soft_width);
    at += profile.soft_spacing_mm * uniform(rng, {0.75, 1.25});
  }

  const double bone_amp = attenuated(uniform(rng, profile.bone_amp), depth);
  if (std::bernoulli_distribution(profile.near_bone_prob)(rng)) {
    const double d = depth - uniform(rng, profile.near_bone_gap_mm);
    if (d > kSkinDepthMm) add_echo(signal, d / du, bone_amp * uniform(rng, profile.near_bone_ratio), soft_width);
  }

  const bool dropped = std::bernoulli_distribution(profile.dropout_prob)(rng);
  if (!dropped) add_echo(signal, static_cast<double>(bone_idx), bone_amp, profile.peak_shape_width);

  if (profile.noise_sigma > 0.0)
    for (auto& s : signal) s += profile.noise_sigma * unit(rng);

  std::vector<float> raw(signal.begin(), signal.end());
  GeneratedFrame out;
  out.frame = preprocess_frame(raw, ac, profile.region, frame_id);
  out.annotation = dropped ? PeakAnnotation::absent()
                           : PeakAnnotation::centered_at(bone_idx, depth, ac.signal_len());
  return out;
}

Dataset generate_dataset(std::span<const TissueProfile> profiles, const GenConfig& cfg) {
  if (profiles.size() < 2) fail(ErrorKind::Config, "need at least two region profiles");
  if (cfg.frames_per_region == 0) fail(ErrorKind::Config, "frames_per_region must be positive");
  const Area area = profiles.front().region.area;
  for (const auto& p : profiles) {
    if (p.region.area != area) fail(ErrorKind::Config, "profiles mix femur and tibia regions");
    p.validate();
  }

  Dataset ds;
  ds.acoustic = cfg.acoustic;
  ds.area = area;
  const std::size_t n_regions = profiles.size();
  ds.frames.reserve(n_regions * cfg.frames_per_region);
  for (std::size_t k = 0; k < cfg.frames_per_region; ++k) {
    for (std::size_t r = 0; r < n_regions; ++r) {
      const auto id = static_cast<std::uint32_t>(k * n_regions + r);
      Rng rng = substream(cfg.seed, "dataset", id);
      auto g = generate_frame(profiles[r], rng, cfg.acoustic, id);
      if (g.annotation.present &&
          std::abs(index_to_depth(g.annotation.midpoint(), cfg.acoustic) - g.annotation.depth_mm) >
              cfg.acoustic.d_unit())
        fail(ErrorKind::Generator, "annotation midpoint inconsistent with depth");
      ds.frames.push_back({std::move(g.frame), g.annotation, Split::Unassigned});
    }
  }
  return ds;
}

}  // namespace bonetrack
