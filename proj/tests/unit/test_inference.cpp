#include <doctest.h>

#include "bonetrack/inference.hpp"
#include "bonetrack/synthgen.hpp"

using namespace bonetrack;

TEST_SUITE("inference") {
  TEST_CASE("threshold_segments") {
    CHECK(threshold_segments(std::vector<double>{0.1, 0.2, 0.3}, 0.5).empty());
    const auto s = threshold_segments(std::vector<double>{0.1, 0.9, 0.8, 0.2, 0.7}, 0.5);
    REQUIRE(s.size() == 2);
    CHECK(s[0] == Segment{1, 2, 0.9});
    CHECK(s[1] == Segment{4, 4, 0.7});
    CHECK_THROWS_AS(threshold_segments(std::vector<double>{0.5}, 0.0), Error);
    CHECK_THROWS_AS(threshold_segments(std::vector<double>{0.5}, 1.0), Error);
  }

  TEST_CASE("raising tau never adds or widens segments") {
    Rng rng = substream(2, "test");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(300);
    for (auto& v : p) v = u(rng);
    const auto lo = threshold_segments(p, 0.3);
    const auto hi = threshold_segments(p, 0.6);
    CHECK(hi.size() <= lo.size() + lo.size());
    for (const auto& h : hi) {
      const bool inside = std::any_of(lo.begin(), lo.end(), [&](const Segment& l) {
        return l.start <= h.start && h.end <= l.end;
      });
      CHECK(inside);
    }
    std::size_t covered_lo = 0, covered_hi = 0;
    for (const auto& s : lo) covered_lo += s.end - s.start + 1;
    for (const auto& s : hi) covered_hi += s.end - s.start + 1;
    CHECK(covered_hi <= covered_lo);
  }

  TEST_CASE("resolve_peak") {
    const std::vector<Segment> none;
    const std::vector<Segment> coarse{{100, 120, 0.9}};
    const std::vector<Segment> refined{{40, 49, 0.8}};
    CHECK_FALSE(resolve_peak(none, refined, 80).has_value());
    CHECK(resolve_peak(coarse, refined, 80) == 124);
    CHECK(resolve_peak(std::vector<Segment>{{100, 109, 0.7}}, none, 0) == 104);
    // Highest score wins, then the lowest start.
    const std::vector<Segment> two{{10, 11, 0.7}, {30, 33, 0.9}};
    CHECK(resolve_peak(coarse, two, 0) == 31);
    const std::vector<Segment> tie{{30, 33, 0.9}, {10, 11, 0.9}};
    CHECK(resolve_peak(coarse, tie, 0) == 10);
  }

  TEST_CASE("predict is deterministic and consistent") {
    const auto cfg = ModelConfig::for_signal(Area::Femur, 2048);
    const CascadedModel<float> model(cfg, 12);
    GenConfig gc;
    gc.frames_per_region = 2;
    const auto ds = generate_dataset(default_profiles(Area::Femur), gc);
    const InferConfig ic;
    std::vector<const AModeFrame*> frames;
    for (const auto& f : ds.frames) frames.push_back(&f.frame);
    const auto a = predict_batch(model, frames, ic, ds.acoustic);
    const auto b = predict_batch(model, frames, ic, ds.acoustic);
    CHECK(a == b);
    // Batch composition does not change a frame's prediction.
    CHECK(predict(model, *frames[3], ic, ds.acoustic) == a[3]);
    for (const auto& p : a) {
      CHECK(p.depth_mm.has_value() == p.peak_index.has_value());
      if (p.peak_index) {
        CHECK(*p.depth_mm == index_to_depth(*p.peak_index, ds.acoustic));
        const int idx = *p.peak_index;
        const bool in_coarse = std::any_of(p.coarse_segments.begin(), p.coarse_segments.end(),
                                           [&](const Segment& s) { return s.start <= idx && idx <= s.end; });
        const int local = idx - static_cast<int>(p.window_start);
        const bool in_refined = std::any_of(p.refined_segments.begin(), p.refined_segments.end(),
                                            [&](const Segment& s) { return s.start <= local && local <= s.end; });
        CHECK((in_coarse || in_refined));
      }
      CHECK(p.window_width == cfg.sbp.window_w);
      CHECK(p.region_probs.size() == 3);
    }
  }

  TEST_CASE("area and length mismatches are rejected") {
    const CascadedModel<float> model(ModelConfig::for_signal(Area::Femur, 256), 1);
    const AcousticModel ac(1540.0, 40e6, 512);
    const auto frame = preprocess_frame(std::vector<float>(512, 0.0f), ac);
    CHECK_THROWS_AS(predict(model, frame, {}, ac), Error);
  }
}
