#include "bonetrack/inference.hpp"

#include <algorithm>

namespace bonetrack {

namespace {

const Segment* best_segment(std::span<const Segment> segs) {
  const Segment* best = nullptr;
  for (const auto& s : segs)
    if (best == nullptr || s.peak_score > best->peak_score ||
        (s.peak_score == best->peak_score && s.start < best->start))
      best = &s;
  return best;
}

std::vector<double> row_of(const ad::Tensor<float>& t, std::size_t n, std::size_t len,
                           std::size_t keep) {
  const float* base = t.data.data() + n * len;
  return std::vector<double>(base, base + keep);
}

}  // namespace

std::vector<Segment> threshold_segments(std::span<const double> prob, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorKind::Config, "threshold must lie in (0, 1)");
  std::vector<Segment> out;
  const int n = static_cast<int>(prob.size());
  for (int i = 0; i < n;) {
    if (prob[i] < tau) {
      ++i;
      continue;
    }
    Segment s{i, i, prob[i]};
    while (s.end + 1 < n && prob[s.end + 1] >= tau) {
      ++s.end;
      s.peak_score = std::max(s.peak_score, prob[s.end]);
    }
    out.push_back(s);
    i = s.end + 1;
  }
  return out;
}

std::optional<int> resolve_peak(std::span<const Segment> coarse, std::span<const Segment> refined,
                                std::size_t window_start) {
  if (coarse.empty()) return std::nullopt;
  if (const Segment* r = best_segment(refined))
    return static_cast<int>(window_start) + r->midpoint();
  return best_segment(coarse)->midpoint();
}

std::vector<Prediction> predict_batch(const CascadedModel<float>& model,
                                      std::span<const AModeFrame* const> frames,
                                      const InferConfig& cfg, const AcousticModel& ac,
                                      Rng* rng) {
  const ModelConfig& mc = model.config();
  if (frames.empty()) return {};
  if (ac.signal_len() != mc.signal_len)
    fail(ErrorKind::Config, "model expects " + std::to_string(mc.signal_len) +
                                "-sample frames, data has " + std::to_string(ac.signal_len()));
  for (const auto* f : frames) {
    if (f->region.area != mc.area)
      fail(ErrorKind::Config, std::string("frame from the ") + to_string(f->region.area) +
                                  " area given to a " + to_string(mc.area) + " model");
    if (f->normalized.size() != mc.signal_len)
      fail(ErrorKind::Shape, "frame length does not match the model");
  }
  const std::size_t batch = frames.size();
  const std::size_t in_len = mc.unet.input_len;
  const std::size_t w = mc.sbp.window_w;

  ad::Tape<float> tape(false);
  const auto b = model.bind(tape);
  const ad::Var x = tape.constant(make_input_batch<float>(frames, in_len));
  const auto coarse = model.coarse_forward(tape, b, x);
  const ad::Var cls = model.classify(tape, b, coarse.bottleneck);

  SbpConfig sbp = mc.sbp;
  sbp.mode = cfg.sbp_mode;
  std::vector<Prediction> out(batch);
  std::vector<std::size_t> starts(batch);
  const auto& coarse_prob = tape.value(coarse.peak_prob);
  for (std::size_t n = 0; n < batch; ++n) {
    const auto row = row_of(coarse_prob, n, in_len, in_len);
    const auto prop = sbp_propose(std::span<const double>(row), sbp, rng);
    starts[n] = prop.start;
    out[n].window_start = prop.start;
    out[n].window_width = prop.width;
    out[n].coarse_segments =
        threshold_segments(std::span<const double>(row.data(), mc.signal_len), cfg.tau);
  }

  std::array<ad::Var, kUNetDepth> crops;
  for (std::size_t l = 0; l < kUNetDepth; ++l) {
    crops[l] = region_crop(tape, coarse.decoder[l], starts, w, l);
    tape.release(coarse.decoder[l]);
  }
  const ad::Var xw = ad::crop_rows(tape, x, starts, w);
  tape.release(x);
  const ad::Var refined = model.refined_forward(tape, b, xw, crops);

  const auto& refined_prob = tape.value(refined);
  const auto& region_prob = tape.value(cls);
  const std::size_t n_regions = mc.num_regions();
  for (std::size_t n = 0; n < batch; ++n) {
    Prediction& p = out[n];
    p.frame_id = frames[n]->frame_id;
    // Window positions past the end of the frame are padding.
    const std::size_t valid = std::min(w, mc.signal_len - std::min(mc.signal_len, starts[n]));
    const auto row = row_of(refined_prob, n, w, valid);
    p.refined_segments = threshold_segments(row, cfg.tau);
    p.region_probs.assign(region_prob.data.begin() + static_cast<std::ptrdiff_t>(n * n_regions),
                          region_prob.data.begin() + static_cast<std::ptrdiff_t>((n + 1) * n_regions));
    const auto best = std::max_element(p.region_probs.begin(), p.region_probs.end());
    p.region = RegionLabel::from_id(mc.area, static_cast<std::size_t>(best - p.region_probs.begin()));
    p.peak_index = resolve_peak(p.coarse_segments, p.refined_segments, starts[n]);
    if (p.peak_index) p.depth_mm = index_to_depth(*p.peak_index, ac);
  }
  return out;
}

Prediction predict(const CascadedModel<float>& model, const AModeFrame& frame,
                   const InferConfig& cfg, const AcousticModel& ac) {
  const AModeFrame* one[] = {&frame};
  return predict_batch(model, one, cfg, ac).front();
}

}  // namespace bonetrack
