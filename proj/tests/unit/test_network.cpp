#include <doctest.h>

#include <cmath>
#include <random>

#include "bonetrack/network.hpp"

using namespace bonetrack;
using namespace bonetrack::ad;

namespace {

std::vector<AModeFrame> random_frames(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 5000.0f);
  const AcousticModel ac(1540.0, 40e6, len);
  std::vector<AModeFrame> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> raw(len);
    for (auto& v : raw) v = u(rng);
    out.push_back(preprocess_frame(raw, ac));
  }
  return out;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("config defaults") {
    const auto full = ModelConfig::for_signal(Area::Femur, 6760);
    CHECK(full.unet.input_len == 6768);
    CHECK(full.sbp.window_w == 512);
    CHECK(ModelConfig::for_signal(Area::Femur, 2048).sbp.window_w == 160);
    CHECK(ModelConfig::for_signal(Area::Tibia, 2048).num_regions() == 5);
    auto bad = full;
    bad.sbp.window_w = 100;
    CHECK_THROWS_AS(bad.validate(), Error);
    const auto back = ModelConfig::from_json(full.to_json());
    CHECK(back.to_json() == full.to_json());
    CHECK_THROWS_AS(ModelConfig::from_json("{"), Error);
  }

  TEST_CASE("coarse, classifier and refined shapes and laws") {
    const auto cfg = ModelConfig::for_signal(Area::Femur, 250);
    CascadedModel<float> model(cfg, 1);
    const auto frames = random_frames(3, 250, 2);
    std::vector<const AModeFrame*> ptrs{&frames[0], &frames[1], &frames[2]};
    Tape<float> tape(false);
    const auto b = model.bind(tape);
    const auto x = tape.constant(make_input_batch<float>(ptrs, cfg.unet.input_len));
    const auto coarse = model.coarse_forward(tape, b, x);
    CHECK(tape.shape(coarse.peak_prob) == Shape{3, 1, cfg.unet.input_len});
    for (float p : tape.value(coarse.peak_prob).data) {
      CHECK(std::isfinite(p));
      CHECK(p > 0.0f);
      CHECK(p < 1.0f);
    }
    const auto cls = model.classify(tape, b, coarse.bottleneck);
    REQUIRE(tape.shape(cls) == Shape{3, 3});
    for (std::size_t n = 0; n < 3; ++n) {
      const auto* row = tape.value(cls).data.data() + 3 * n;
      CHECK(row[0] + row[1] + row[2] == doctest::Approx(1.0f));
    }

    const std::vector<std::size_t> starts{0, 48, cfg.unet.input_len - cfg.sbp.window_w};
    std::array<Var, kUNetDepth> crops;
    for (std::size_t l = 0; l < kUNetDepth; ++l) {
      crops[l] = region_crop(tape, coarse.decoder[l], starts, cfg.sbp.window_w, l);
      CHECK(tape.shape(crops[l])[2] == cfg.sbp.window_w >> l);
    }
    // Crop content equals the slice of the full feature map.
    const auto& full = tape.value(coarse.decoder[2]).data;
    const auto& cut = tape.value(crops[2]).data;
    const std::size_t len2 = tape.shape(coarse.decoder[2])[2], w2 = cfg.sbp.window_w >> 2;
    const std::size_t c2 = tape.shape(coarse.decoder[2])[1];
    CHECK(cut[(1 * c2 + 0) * w2 + 0] == full[(1 * c2 + 0) * len2 + (48 >> 2)]);

    const auto xw = crop_rows(tape, x, starts, cfg.sbp.window_w);
    const auto refined = model.refined_forward(tape, b, xw, crops);
    CHECK(tape.shape(refined) == Shape{3, 1, cfg.sbp.window_w});
  }

  TEST_CASE("no NaN on 100 random frames") {
    const auto cfg = ModelConfig::for_signal(Area::Tibia, 128);
    const CascadedModel<float> model(cfg, 4);
    const auto frames = random_frames(100, 128, 9);
    for (std::size_t i = 0; i < frames.size(); i += 10) {
      std::vector<const AModeFrame*> ptrs;
      for (std::size_t j = i; j < i + 10; ++j) ptrs.push_back(&frames[j]);
      Tape<float> tape(false);
      const auto b = model.bind(tape);
      const auto x = tape.constant(make_input_batch<float>(ptrs, cfg.unet.input_len));
      const auto coarse = model.coarse_forward(tape, b, x);
      for (float p : tape.value(coarse.peak_prob).data) REQUIRE(std::isfinite(p));
      for (float p : tape.value(model.classify(tape, b, coarse.bottleneck)).data) REQUIRE(std::isfinite(p));
    }
  }

  TEST_CASE("initialization is seeded and checkpoints roundtrip") {
    const auto cfg = ModelConfig::for_signal(Area::Femur, 128);
    CascadedModel<float> a(cfg, 5), b(cfg, 5), c(cfg, 6);
    CHECK(a.parameters()[0]->value.data == b.parameters()[0]->value.data);
    CHECK(a.parameters()[0]->value.data != c.parameters()[0]->value.data);
    const auto back = CascadedModel<float>::from_checkpoint(a.to_checkpoint());
    REQUIRE(back.parameter_count() == a.parameter_count());
    const auto pa = a.parameters();
    const auto pb = back.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value.data == pb[i]->value.data);
    }
  }

  TEST_CASE("region_crop rejects widths not divisible by 16") {
    Tape<float> tape(false);
    const auto x = tape.constant(Tensor<float>({1, 1, 64}));
    const std::vector<std::size_t> starts{0};
    CHECK_THROWS_AS(region_crop(tape, x, starts, 24, 0), Error);
  }
}

TEST_SUITE("sbp") {
  TEST_CASE("delta probability, deterministic mode") {
    SbpConfig cfg;
    cfg.window_w = 32;
    for (std::size_t k : {std::size_t{0}, std::size_t{5}, std::size_t{100}, std::size_t{250}, std::size_t{255}}) {
      std::vector<double> p(256, 0.0);
      p[k] = 1.0;
      const auto prop = sbp_propose(std::span<const double>(p), cfg, nullptr);
      CHECK(prop.center == k);
      CHECK(prop.start + prop.width <= 256);
      CHECK(prop.start <= k);
      CHECK(k < prop.start + prop.width);
      CHECK_FALSE(prop.fallback);
    }
  }

  TEST_CASE("stochastic draws: mean near the delta") {
    SbpConfig cfg;
    cfg.window_w = 32;
    cfg.mode = SbpMode::Stochastic;
    std::vector<double> p(256, 0.0);
    p[128] = 0.9;
    Rng rng = substream(1, "sbp");
    double sum = 0.0;
    for (int i = 0; i < 10000; ++i) sum += static_cast<double>(sbp_propose(std::span<const double>(p), cfg, &rng).center);
    CHECK(std::abs(sum / 10000.0 - 128.0) <= 0.05);
  }

  TEST_CASE("mixture distribution matches truncated Gaussian sum") {
    SbpConfig cfg;
    cfg.window_w = 16;
    std::vector<double> p(64, 0.0);
    p[30] = 0.6;
    p[33] = 0.3;
    const auto prop = sbp_propose(std::span<const double>(p), cfg, nullptr);
    double total = 0.0;
    std::vector<double> oracle(prop.distribution.size());
    for (std::size_t j = 0; j < oracle.size(); ++j) {
      const double x = static_cast<double>(prop.candidate_start + j);
      oracle[j] = 0.6 * std::exp(-0.5 * (x - 30) * (x - 30)) + 0.3 * std::exp(-0.5 * (x - 33) * (x - 33));
      total += oracle[j];
    }
    for (std::size_t j = 0; j < oracle.size(); ++j) CHECK(prop.distribution[j] == doctest::Approx(oracle[j] / total));
  }

  TEST_CASE("all-zero probabilities fall back to the centre") {
    SbpConfig cfg;
    cfg.window_w = 16;
    const std::vector<double> p(100, 0.0);
    const auto prop = sbp_propose(std::span<const double>(p), cfg, nullptr);
    CHECK(prop.fallback);
    CHECK(prop.center == 50);
    CHECK(prop.start == 42);
  }

  TEST_CASE("stochastic mode without a stream is a config error") {
    SbpConfig cfg;
    cfg.window_w = 16;
    cfg.mode = SbpMode::Stochastic;
    std::vector<double> p(64, 0.0);
    p[3] = 1.0;
    CHECK_THROWS_AS(sbp_propose(std::span<const double>(p), cfg, nullptr), Error);
  }
}
