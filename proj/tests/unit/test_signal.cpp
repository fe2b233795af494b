#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <random>

#include "bonetrack/signal.hpp"

using namespace bonetrack;

namespace {

// Round-half-even of num/den for non-negative integers.
std::int64_t rational_round(std::int64_t num, std::int64_t den) {
  const std::int64_t q = num / den, r = num % den;
  if (2 * r > den || (2 * r == den && q % 2 == 1)) return q + 1;
  return q;
}

const AcousticModel kDefault{1540.0, 40e6, 6760};

}  // namespace

TEST_SUITE("signal") {
  TEST_CASE("d_unit is v / (2 fs) in mm") {
    // 1540 / 80e6 m = 77/4000 mm exactly.
    CHECK(kDefault.d_unit() == doctest::Approx(77.0 / 4000.0).epsilon(1e-15));
    CHECK(kDefault.max_depth() == doctest::Approx(130.13).epsilon(1e-12));
  }

  TEST_CASE("depth_to_index against exact rational arithmetic") {
    // depth = n / 100 mm -> index = round(n * 4000 / (100 * 77)).
    CHECK(depth_to_index(0.0, kDefault) == 0);
    CHECK(depth_to_index(10.0, kDefault) == rational_round(1000 * 4000, 100 * 77));
    CHECK(depth_to_index(10.0, kDefault) == 519);
    // 130.13 mm lands exactly on 6760 and is clamped to the last sample.
    CHECK(rational_round(13013 * 4000, 100 * 77) == 6760);
    CHECK(depth_to_index(130.13, kDefault) == 6759);
    for (std::int64_t n = 0; n < 13000; n += 37)
      CHECK(depth_to_index(static_cast<double>(n) / 100.0, kDefault) ==
            std::min<std::int64_t>(rational_round(n * 4000, 7700), 6759));
  }

  TEST_CASE("depth_to_index rejects negative and over-range depths") {
    CHECK_THROWS_AS(depth_to_index(-0.1, kDefault), Error);
    CHECK_THROWS_AS(depth_to_index(131.0, kDefault), Error);
    try {
      depth_to_index(-1.0, kDefault);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Range);
    }
  }

  TEST_CASE("index_to_depth") {
    CHECK(index_to_depth(0, kDefault) == 0.0);
    CHECK(index_to_depth(520, kDefault) == doctest::Approx(10.01));
    CHECK_THROWS_AS(index_to_depth(6760, kDefault), Error);
    CHECK_THROWS_AS(index_to_depth(-1, kDefault), Error);
  }

  TEST_CASE("roundtrip error is at most one d_unit") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, kDefault.max_depth());
    for (int i = 0; i < 1000; ++i) {
      const double d = u(rng);
      CHECK(std::abs(index_to_depth(depth_to_index(d, kDefault), kDefault) - d) <= kDefault.d_unit());
    }
  }

  TEST_CASE("acoustic model validation") {
    CHECK_THROWS_AS(AcousticModel(0.0, 40e6, 10), Error);
    CHECK_THROWS_AS(AcousticModel(1540.0, -1.0, 10), Error);
    CHECK_THROWS_AS(AcousticModel(1540.0, 40e6, 0), Error);
  }

  TEST_CASE("preprocess clamps and normalizes") {
    const AcousticModel ac(1540.0, 40e6, 4);
    const std::vector<float> raw{0.0f, 7500.0f, 2500.0f, -3.0f};
    const auto f = preprocess_frame(raw, ac);
    CHECK(f.samples == std::vector<float>{0.0f, 5000.0f, 2500.0f, 0.0f});
    CHECK(f.normalized == std::vector<float>{0.0f, 1.0f, 0.5f, 0.0f});
    const auto z = preprocess_frame(std::vector<float>(4, 0.0f), ac);
    CHECK(z.normalized == std::vector<float>(4, 0.0f));
    CHECK_THROWS_AS(preprocess_frame(std::vector<float>(3, 0.0f), ac), Error);
  }

  TEST_CASE("peak annotation segment") {
    const auto a = PeakAnnotation::centered_at(100, 1.925, 2048);
    CHECK(a.seg_end - a.seg_start + 1 == kSegmentWidth);
    CHECK(a.midpoint() == 100);
    const auto lo = PeakAnnotation::centered_at(1, 0.0, 2048);
    CHECK(lo.seg_start == 0);
    const auto hi = PeakAnnotation::centered_at(2047, 0.0, 2048);
    CHECK(hi.seg_end == 2047);
    CHECK(hi.seg_end - hi.seg_start + 1 == kSegmentWidth);
  }

  TEST_CASE("shift augmentation") {
    const AcousticModel ac(1540.0, 40e6, 2048);
    std::vector<float> raw(2048, 0.0f);
    raw[500] = 3000.0f;
    const auto frame = preprocess_frame(raw, ac);
    const auto ann = PeakAnnotation::centered_at(500, index_to_depth(500, ac), 2048);

    const auto same = shift_augment(frame, ann, 0, ac);
    CHECK(same.frame.samples == frame.samples);
    CHECK(same.annotation == ann);

    const auto moved = shift_augment(frame, ann, 50, ac);
    CHECK(moved.annotation.seg_start == ann.seg_start + 50);
    CHECK(moved.annotation.seg_end == ann.seg_end + 50);
    CHECK(moved.frame.samples[550] == 3000.0f);
    CHECK(moved.frame.samples[0] == 0.0f);
    CHECK(moved.annotation.depth_mm == doctest::Approx(index_to_depth(550, ac)));

    const auto back = shift_augment(frame, ann, -50, ac);
    CHECK(back.frame.samples[450] == 3000.0f);
    CHECK(back.frame.samples[2047] == 0.0f);

    const auto edge = PeakAnnotation::centered_at(2040, 0.0, 2048);
    CHECK_THROWS_AS(shift_augment(frame, edge, 100, ac), Error);
  }

  TEST_CASE("region labels") {
    CHECK(region_count(Area::Femur) == 3);
    CHECK(region_count(Area::Tibia) == 5);
    CHECK(RegionLabel::from_channel(Area::Femur, 15).region_id == 2);
    CHECK(RegionLabel::from_id(Area::Tibia, 4).channel == 20);
    CHECK_THROWS_AS(RegionLabel::from_channel(Area::Femur, 13), Error);
    CHECK(parse_area("tibia") == Area::Tibia);
    CHECK_THROWS_AS(parse_area("hip"), Error);
  }

  TEST_CASE("frame store roundtrip") {
    const AcousticModel ac(1540.0, 40e6, 64);
    Dataset ds;
    ds.acoustic = ac;
    ds.area = Area::Tibia;
    for (std::uint32_t i = 0; i < 5; ++i) {
      std::vector<float> raw(64);
      for (std::size_t k = 0; k < raw.size(); ++k) raw[k] = static_cast<float>(k * i);
      LabeledFrame lf{preprocess_frame(raw, ac, RegionLabel::from_id(Area::Tibia, i), i),
                      i == 3 ? PeakAnnotation::absent()
                             : PeakAnnotation::centered_at(20 + static_cast<int>(i), 0.5, 64),
                      i % 2 ? Split::Train : Split::Test};
      ds.frames.push_back(lf);
    }
    const auto path = std::filesystem::temp_directory_path() / "bt_store_test.btds";
    write_dataset(path, ds);
    const Dataset back = read_dataset(path);
    CHECK(back.acoustic == ds.acoustic);
    CHECK(back.area == ds.area);
    REQUIRE(back.frames.size() == ds.frames.size());
    for (std::size_t i = 0; i < ds.frames.size(); ++i) {
      CHECK(back.frames[i].frame.samples == ds.frames[i].frame.samples);
      CHECK(back.frames[i].frame.normalized == ds.frames[i].frame.normalized);
      CHECK(back.frames[i].frame.region == ds.frames[i].frame.region);
      CHECK(back.frames[i].annotation == ds.frames[i].annotation);
      CHECK(back.frames[i].split == ds.frames[i].split);
    }
    CHECK_THROWS_AS(read_dataset(path.string() + ".missing"), Error);
    std::filesystem::remove(path);
  }
}
