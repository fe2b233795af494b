// Acceptance gate: one PASS/FAIL line per criterion.
//   acceptance --criterion 1 --criterion 3 ...   (default: all)
//   --workdir DIR   cache for the end-to-end run (criterion 6 reuses it)
//   --cli PATH      bonetrack executable for the determinism pipeline
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bonetrack/autodiff/checkpoint.hpp"
#include "bonetrack/baseline.hpp"
#include "bonetrack/evaluation.hpp"
#include "bonetrack/inference.hpp"
#include "bonetrack/synthgen.hpp"
#include "bonetrack/training.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace bonetrack;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: gradients ----

constexpr int kGradTrials = 25;
constexpr double kGradTol = 1e-3;
constexpr double kGradBudgetS = 60.0;

Outcome gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240101);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& op : bttest::checked_ops()) {
    for (int i = 0; i < kGradTrials; ++i) {
      const double e = bttest::op_trial(op, rng);
      if (!(e <= worst)) {
        worst = e;
        worst_op = op;
      }
    }
  }
  const double s = seconds_since(t0);
  return {worst < kGradTol && s < kGradBudgetS,
          fmt("%zu ops x %d trials, worst relative error %.2e (%s), %.1f s (limits %.0e, %.0f s)",
              bttest::checked_ops().size(), kGradTrials, worst, worst_op.c_str(), s, kGradTol,
              kGradBudgetS)};
}

// ---- 2: loss laws ----

template <typename T>
bool total_is_sum(std::mt19937_64& rng) {
  const std::size_t batch = 3, len = 32, win = 16, regions = 3;
  std::uniform_real_distribution<double> u(0.01, 0.99);
  auto probs = [&](ad::Shape s) {
    ad::Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(u(rng));
    return t;
  };
  BatchTargets<T> tg;
  tg.coarse_mask = ad::Tensor<T>({batch, 1, len});
  tg.refined_mask = ad::Tensor<T>({batch, 1, win});
  for (std::size_t n = 0; n < batch; ++n) {
    fill_mask(tg.coarse_mask.data.data() + n * len, len, PeakAnnotation::centered_at(10, 0.0, len));
    fill_mask(tg.refined_mask.data.data() + n * win, win, PeakAnnotation::centered_at(7, 0.0, win));
    tg.regions.push_back(n % regions);
  }
  ad::Tensor<T> cls = probs({batch, regions});
  for (std::size_t n = 0; n < batch; ++n) {
    T s = 0;
    for (std::size_t r = 0; r < regions; ++r) s += cls.data[n * regions + r];
    for (std::size_t r = 0; r < regions; ++r) cls.data[n * regions + r] /= s;
  }
  ad::Tape<T> tape(true);
  const auto c = tape.constant(probs({batch, 1, len}));
  const auto r = tape.constant(probs({batch, 1, win}));
  const auto k = tape.constant(cls);
  const auto lv = total_loss(tape, c, r, k, tg, 1e-6);
  const LossBreakdown b = lv.values(tape);
  double sum = 0.0;
  for (double x : {b.dice, b.ce, b.dice_refined, b.ce_refined, b.cls}) sum += x;
  return b.total == static_cast<double>(static_cast<T>(sum));
}

Outcome loss_laws() {
  std::mt19937_64 rng(7);
  const double eps = TrainConfig{}.epsilon_dice;
  const std::size_t len = 64;
  std::bernoulli_distribution coin(0.3);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  double lo = 1.0, hi = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> p(len), t(len);
    for (std::size_t i = 0; i < len; ++i) {
      p[i] = u(rng);
      t[i] = coin(rng) ? 1.0 : 0.0;
    }
    const double d = dice_loss(p, t, eps);
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  std::vector<double> a(len, 0.0), b(len, 0.0), empty(len, 0.0);
  std::fill(a.begin() + 10, a.begin() + 20, 1.0);
  std::fill(b.begin() + 40, b.begin() + 50, 1.0);
  const double perfect = dice_loss(a, a, eps);
  const double disjoint = dice_loss(a, b, eps);
  const double empties = dice_loss(empty, empty, eps);
  bool sums = true;
  for (int i = 0; i < 20; ++i) sums = sums && total_is_sum<double>(rng) && total_is_sum<float>(rng);

  const bool ok = lo >= 0.0 && hi <= 1.0 && perfect < 1e-5 && disjoint > 0.999 && empties == 0.0 && sums;
  return {ok, fmt("dice range [%.4f, %.4f], perfect %.1e, disjoint %.7f, empty-empty %.1e, "
                  "total == sum of terms: %s",
                  lo, hi, perfect, disjoint, empties, sums ? "yes" : "no")};
}

// ---- 3: proposals ----

constexpr double kSbpBudgetS = 30.0;

Outcome proposals() {
  const auto t0 = Clock::now();
  const std::size_t n = 512;
  SbpConfig det;
  det.window_w = 48;
  SbpConfig sto = det;
  sto.mode = SbpMode::Stochastic;
  Rng rng = substream(3, "sbp");
  std::vector<std::string> failures;

  bool delta_ok = true;
  for (std::size_t k : {std::size_t{0}, std::size_t{1}, std::size_t{100}, std::size_t{256},
                        n - 2, n - 1}) {
    std::vector<double> p(n, 0.0);
    p[k] = 1.0;
    const auto prop = sbp_propose(std::span<const double>(p), det, nullptr);
    const std::size_t expect_start = std::min(k > det.window_w / 2 ? k - det.window_w / 2 : 0,
                                              n - det.window_w);
    delta_ok = delta_ok && prop.center == k && prop.start == expect_start;
  }

  constexpr int kDraws = 10000;
  const std::size_t k = 200;
  std::vector<double> delta(n, 0.0);
  delta[k] = 1.0;
  double sum = 0.0;
  for (int i = 0; i < kDraws; ++i)
    sum += static_cast<double>(sbp_propose(std::span<const double>(delta), sto, &rng).center);
  const double mean_err = std::abs(sum / kDraws - static_cast<double>(k));

  // Two equal masses 20 samples apart; each draw is attributed to the nearer mode.
  std::vector<double> bimodal(n, 0.0);
  bimodal[240] = 0.5;
  bimodal[260] = 0.5;
  int left = 0;
  for (int i = 0; i < kDraws; ++i)
    if (sbp_propose(std::span<const double>(bimodal), sto, &rng).center < 250) ++left;
  const double share = static_cast<double>(left) / kDraws;

  bool bounds_ok = true;
  for (std::size_t edge : {std::size_t{0}, std::size_t{1}, std::size_t{2}, n - 3, n - 2, n - 1}) {
    std::vector<double> p(n, 0.0);
    p[edge] = 0.9;
    p[edge < n / 2 ? edge + 1 : edge - 1] = 0.6;
    for (int i = 0; i < 2000; ++i) {
      const auto prop = sbp_propose(std::span<const double>(p), sto, &rng);
      bounds_ok = bounds_ok && prop.width == sto.window_w && prop.start + prop.width <= n;
    }
    const auto d = sbp_propose(std::span<const double>(p), det, nullptr);
    bounds_ok = bounds_ok && d.start + d.width <= n;
  }
  const double s = seconds_since(t0);
  const bool ok = delta_ok && mean_err <= 0.05 && std::abs(share - 0.5) <= 0.02 && bounds_ok &&
                  s < kSbpBudgetS;
  return {ok, fmt("delta exact: %s, mean error %.4f over %d draws (limit 0.05), bimodal share "
                  "%.4f (0.5 +- 0.02), boundary windows in bounds: %s, %.1f s",
                  delta_ok ? "yes" : "no", mean_err, kDraws, share, bounds_ok ? "yes" : "no", s)};
}

// ---- 4: conversion ----

Outcome conversion() {
  const AcousticModel ac(1540.0, 40e6, 6760);
  const double d = ac.d_unit();
  const double full = 6760.0 * d;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, ac.max_depth());
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double depth = u(rng);
    worst = std::max(worst, std::abs(index_to_depth(depth_to_index(depth, ac), ac) - depth));
  }
  const bool ok = std::abs(d - 0.01925) < 5e-6 && std::abs(full - 130.1) <= 1.0 && worst <= d;
  return {ok, fmt("d_unit %.6f mm, 6760 samples = %.2f mm (130.1 +- 1), worst roundtrip error "
                  "%.5f mm over 1000 depths (limit d_unit)",
                  d, full, worst)};
}

// ---- 5 and 6: end-to-end ----

struct E2eConfig {
  std::uint64_t seed = 0;
  std::size_t frames_per_region = 25;
  std::size_t signal_len = 2048;
  std::size_t epochs = 50;
  std::size_t batch = 10;
  double lr = 1e-5;
};

constexpr double kE2eBudgetS = 30.0 * 60.0;

struct E2eRun {
  Dataset data;
  std::optional<CascadedModel<float>> model;
  double seconds = 0.0;
};

std::vector<Prediction> predict_all(const CascadedModel<float>& model,
                                    std::span<const LabeledFrame* const> frames,
                                    const AcousticModel& ac, std::size_t batch) {
  std::vector<Prediction> out;
  std::vector<const AModeFrame*> chunk;
  for (std::size_t i = 0; i < frames.size(); i += batch) {
    chunk.clear();
    for (std::size_t j = i; j < std::min(frames.size(), i + batch); ++j)
      chunk.push_back(&frames[j]->frame);
    auto p = predict_batch(model, chunk, InferConfig{}, ac);
    std::move(p.begin(), p.end(), std::back_inserter(out));
  }
  return out;
}

E2eRun run_e2e(const E2eConfig& c, const fs::path& workdir) {
  E2eRun run;
  const auto t0 = Clock::now();
  GenConfig gc;
  gc.seed = c.seed;
  gc.frames_per_region = c.frames_per_region;
  gc.acoustic = AcousticModel(1540.0, 40e6, c.signal_len);
  run.data = build_dataset(generate_dataset(default_profiles(Area::Femur), gc), c.seed);

  CascadedModel<float> model(ModelConfig::for_signal(Area::Femur, c.signal_len), c.seed);
  TrainConfig tc;
  tc.lr = c.lr;
  tc.batch_size = c.batch;
  tc.epochs = c.epochs;
  tc.seed = c.seed;
  tc.val_every = 0;
  train(model, run.data, tc, [](const EpochLog& log) {
    std::fprintf(stderr, "  epoch %zu total loss %.4f\n", log.epoch, log.loss.total);
  });
  run.seconds = seconds_since(t0);
  run.model.emplace(std::move(model));
  if (!workdir.empty()) {
    fs::create_directories(workdir);
    write_dataset(workdir / "e2e.btds", run.data);
    ad::write_checkpoint(workdir / "e2e.btck", run.model->to_checkpoint());
    std::ofstream(workdir / "e2e.seconds") << run.seconds << '\n';
  }
  return run;
}

std::optional<E2eRun> load_e2e(const fs::path& workdir) {
  if (workdir.empty() || !fs::exists(workdir / "e2e.btck") || !fs::exists(workdir / "e2e.btds"))
    return std::nullopt;
  E2eRun run;
  run.data = read_dataset(workdir / "e2e.btds");
  run.model.emplace(CascadedModel<float>::from_checkpoint(ad::read_checkpoint(workdir / "e2e.btck")));
  std::ifstream(workdir / "e2e.seconds") >> run.seconds;
  return run;
}

struct E2eScores {
  std::vector<const LabeledFrame*> test;
  std::vector<Prediction> model, baseline;
  LocalizationScore model_score, baseline_score;
};

E2eScores score_e2e(const E2eRun& run) {
  E2eScores s;
  s.test = run.data.select(Split::Test);
  s.model = predict_all(*run.model, s.test, run.data.acoustic, 10);
  const auto windows = baseline_windows(default_profiles(run.data.area), run.data.acoustic);
  for (const auto* f : s.test) s.baseline.push_back(baseline_predict(f->frame, windows, run.data.acoustic));
  s.model_score = score_predictions(s.model, s.test);
  s.baseline_score = score_predictions(s.baseline, s.test);
  return s;
}

Outcome end_to_end(const E2eRun& run, const E2eScores& s) {
  const auto& d = run.data;
  std::size_t distractors = 0;
  for (const auto& f : d.frames) distractors += distractor_dominant(f) ? 1 : 0;
  const double frac = static_cast<double>(distractors) / static_cast<double>(d.frames.size());
  const double acc = static_cast<double>(s.model_score.correct_regions) /
                     static_cast<double>(std::max<std::size_t>(s.model_score.total, 1));
  const bool shape_ok = d.count(Split::Train) == 600 && d.count(Split::Test) == 150;
  const bool ok = shape_ok && frac >= 0.30 && s.model_score.matched > 0 &&
                  s.model_score.mae_samples <= 10.0 && acc >= 0.90 &&
                  s.model_score.mae_samples < s.baseline_score.mae_samples &&
                  run.seconds <= kE2eBudgetS;
  return {ok, fmt("%zu/%zu train/test, %.1f%% distractor-dominant (>= 30%%); model MAE %.2f "
                  "samples (<= 10, %zu misses), accuracy %.3f (>= 0.90), baseline MAE %.2f "
                  "(%zu misses); synth+train %.1f min (<= 30)",
                  d.count(Split::Train), d.count(Split::Test), 100.0 * frac,
                  s.model_score.mae_samples, s.model_score.misses, acc,
                  s.baseline_score.mae_samples, s.baseline_score.misses, run.seconds / 60.0)};
}

Outcome baseline_failure(const E2eRun& run, const E2eScores& s) {
  const auto windows = baseline_windows(default_profiles(run.data.area), run.data.acoustic);
  std::size_t cases = 0, wins = 0;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const LabeledFrame& f = *s.test[i];
    if (!f.annotation.present) continue;
    const auto w = windows.at(f.frame.region.channel);
    const auto& x = f.frame.samples;
    const auto top = std::max_element(x.begin() + w.window_start, x.begin() + w.window_end + 1);
    const int at = static_cast<int>(top - x.begin());
    if (at >= f.annotation.seg_start && at <= f.annotation.seg_end) continue;
    ++cases;
    const int mid = f.annotation.midpoint();
    const auto& m = s.model[i].peak_index;
    const auto& b = s.baseline[i].peak_index;
    if (!m) continue;
    if (!b || std::abs(*b - mid) > std::abs(*m - mid)) ++wins;
  }
  const double rate = cases > 0 ? static_cast<double>(wins) / static_cast<double>(cases) : 0.0;
  return {cases > 0 && rate >= 0.80,
          fmt("%zu test frames with a distractor above the bone inside the expert window; model "
              "closer than baseline on %zu (%.1f%%, need >= 80%%)",
              cases, wins, 100.0 * rate)};
}

// ---- 7: latency ----

constexpr double kLatencyLimitMs = 500.0;

Outcome latency() {
  GenConfig gc;
  gc.seed = 5;
  gc.frames_per_region = 4;
  gc.acoustic = AcousticModel(1540.0, 40e6, 6760);
  const Dataset d = generate_dataset(default_profiles(Area::Femur), gc);
  std::vector<const AModeFrame*> frames;
  for (const auto& f : d.frames) frames.push_back(&f.frame);
  const CascadedModel<float> model(ModelConfig::for_signal(Area::Femur, 6760), 5);
  const LatencyStats st = latency_bench(model, frames, d.acoustic, 10, kBenchMinReps, 1);
  return {st.mean_ms <= kLatencyLimitMs,
          fmt("6760 samples, batch %zu, %zu reps, 1 thread: mean %.1f ms, p95 %.1f ms per batch "
              "(limit %.0f ms; reference GPU figure 15 ms, context only)",
              st.batch_size, st.reps, st.mean_ms, st.p95_ms, kLatencyLimitMs)};
}

// ---- 8: determinism ----

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism(const fs::path& cli, const fs::path& workdir) {
  if (cli.empty() || !fs::exists(cli)) return {false, "bonetrack executable not found (--cli)"};
  const fs::path root = (workdir.empty() ? fs::temp_directory_path() / "bonetrack_acceptance" : workdir) / "determinism";
  std::vector<std::string> reports;
  for (const char* tag : {"a", "b"}) {
    const fs::path dir = root / tag;
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string(), c = cli.string();
    const std::vector<std::string> steps{
        c + " synth --seed 42 --frames 4 --signal-len 2048 --dataset " + d + "/ds.btds",
        c + " train --seed 42 --epochs 3 --lr 1e-4 --dataset " + d + "/ds.btds --checkpoint " + d +
            "/model.btck --loss-log " + d + "/loss.csv",
        c + " infer --deterministic true --dataset " + d + "/ds.btds --checkpoint " + d +
            "/model.btck --predictions " + d + "/pred.csv",
        c + " eval --area femur --predictions " + d + "/pred.csv --report " + d +
            "/report.json --series " + d + "/series.csv --batch 10"};
    for (const auto& cmd : steps)
      if (std::system((cmd + " > " + d + "/log.txt 2>&1").c_str()) != 0)
        return {false, "pipeline step failed: " + cmd};
    reports.push_back(slurp(dir / "report.json") + slurp(dir / "series.csv") +
                      slurp(dir / "pred.csv") + slurp(dir / "loss.csv"));
  }
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  return {same, fmt("two synth -> train -> infer -> eval runs (seed 42, 120 frames of 2048 samples, "
                    "3 epochs at lr 1e-4): report, series, predictions and loss log %s",
                    same ? "byte-identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bonetrack acceptance gate"};
  std::vector<int> which;
  std::string workdir, cli;
  app.add_option("--criterion", which, "Criterion number 1-8 (repeatable; default all)")
      ->check(CLI::Range(1, 8));
  app.add_option("--workdir", workdir, "Cache directory for the end-to-end run");
  app.add_option("--cli", cli, "Path to the bonetrack executable");
  CLI11_PARSE(app, argc, argv);
  if (which.empty()) which = {1, 2, 3, 4, 5, 6, 7, 8};
  std::sort(which.begin(), which.end());
  which.erase(std::unique(which.begin(), which.end()), which.end());

  static const std::map<int, const char*> names{
      {1, "gradient correctness"}, {2, "loss laws"},          {3, "proposal statistics"},
      {4, "conversion physics"},   {5, "end-to-end regression"}, {6, "baseline failure mode"},
      {7, "latency"},              {8, "determinism"}};

  std::optional<E2eRun> e2e;
  std::optional<E2eScores> scores;
  auto need_e2e = [&](bool allow_cache) {
    if (!e2e && allow_cache) e2e = load_e2e(workdir);
    if (!e2e) e2e = run_e2e(E2eConfig{}, workdir);
    if (!scores) scores = score_e2e(*e2e);
  };

  int failed = 0;
  for (int c : which) {
    Outcome o;
    try {
      switch (c) {
        case 1: o = gradients(); break;
        case 2: o = loss_laws(); break;
        case 3: o = proposals(); break;
        case 4: o = conversion(); break;
        case 5: need_e2e(false); o = end_to_end(*e2e, *scores); break;
        case 6: need_e2e(true); o = baseline_failure(*e2e, *scores); break;
        case 7: o = latency(); break;
        case 8: o = determinism(cli, workdir); break;
      }
    } catch (const std::exception& ex) {
      o = {false, std::string("error: ") + ex.what()};
    }
    std::printf("[%s] criterion %d, %s: %s\n", o.pass ? "PASS" : "FAIL", c, names.at(c),
                o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
