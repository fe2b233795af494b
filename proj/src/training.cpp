#include "bonetrack/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "bonetrack/autodiff/rmsprop.hpp"

namespace bonetrack {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kTrainFraction = 0.8;

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) fail(ErrorKind::Config, "learning rate must be positive");
  if (batch_size == 0) fail(ErrorKind::Config, "batch size must be positive");
  if (!(epsilon_dice > 0.0)) fail(ErrorKind::Config, "dice epsilon must be positive");
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorKind::Config, "threshold must lie in (0, 1)");
}

template <typename T>
LossBreakdown LossVars<T>::values(const ad::Tape<T>& tape) const {
  auto v = [&tape](ad::Var x) { return static_cast<double>(tape.value(x).data[0]); };
  return {v(dice), v(ce), v(dice_refined), v(ce_refined), v(cls), v(total)};
}

template <typename T>
LossVars<T> total_loss(ad::Tape<T>& tape, ad::Var coarse_prob, ad::Var refined_prob,
                       ad::Var region_probs, const BatchTargets<T>& targets, double eps_dice) {
  LossVars<T> l;
  l.dice = ad::dice_loss(tape, coarse_prob, targets.coarse_mask, eps_dice);
  l.ce = ad::bce_loss(tape, coarse_prob, targets.coarse_mask);
  l.dice_refined = ad::dice_loss(tape, refined_prob, targets.refined_mask, eps_dice);
  l.ce_refined = ad::bce_loss(tape, refined_prob, targets.refined_mask);
  l.cls = ad::nll_loss(tape, region_probs, targets.regions);
  const std::array<ad::Var, 5> parts{l.dice, l.ce, l.dice_refined, l.ce_refined, l.cls};
  l.total = ad::sum_all<T>(tape, parts);
  return l;
}

template struct LossVars<float>;
template struct LossVars<double>;
template LossVars<float> total_loss<float>(ad::Tape<float>&, ad::Var, ad::Var, ad::Var,
                                           const BatchTargets<float>&, double);
template LossVars<double> total_loss<double>(ad::Tape<double>&, ad::Var, ad::Var, ad::Var,
                                             const BatchTargets<double>&, double);

double dice_loss(std::span<const double> pred, std::span<const double> truth, double eps) {
  if (pred.size() != truth.size()) fail(ErrorKind::Shape, "dice_loss: length mismatch");
  double pt = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pt += pred[i] * truth[i];
    sp += pred[i];
    st += truth[i];
  }
  return 1.0 - (2.0 * pt + eps) / (sp + st + eps);
}

double ce_loss(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty())
    fail(ErrorKind::Shape, "ce_loss: length mismatch or empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    total -= truth[i] * std::log(std::max(pred[i], kLogFloor)) +
             (1.0 - truth[i]) * std::log(std::max(1.0 - pred[i], kLogFloor));
  return total / static_cast<double>(pred.size());
}

double cls_loss(std::span<const double> region_probs, std::size_t true_region) {
  if (true_region >= region_probs.size()) fail(ErrorKind::Shape, "cls_loss: label out of range");
  return -std::log(std::max(region_probs[true_region], kLogFloor));
}

template <typename T>
void fill_mask(T* mask, std::size_t len, const PeakAnnotation& a, std::ptrdiff_t offset) {
  if (!a.present) return;
  const auto n = static_cast<std::ptrdiff_t>(len);
  for (std::ptrdiff_t i = a.seg_start - offset; i <= a.seg_end - offset; ++i)
    if (i >= 0 && i < n) mask[i] = T(1);
}

template void fill_mask<float>(float*, std::size_t, const PeakAnnotation&, std::ptrdiff_t);
template void fill_mask<double>(double*, std::size_t, const PeakAnnotation&, std::ptrdiff_t);

std::vector<int> augmentation_shifts() {
  std::vector<int> out;
  for (int k = 0; k < 10; ++k) {
    const int s = static_cast<int>(std::nearbyint(-100.0 + 200.0 * k / 9.0));
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

Dataset build_dataset(const Dataset& raw, std::uint64_t seed) {
  if (raw.frames.empty()) fail(ErrorKind::Dataset, "cannot build a dataset from zero frames");
  Dataset ds;
  ds.acoustic = raw.acoustic;
  ds.area = raw.area;
  const auto shifts = augmentation_shifts();
  ds.frames.reserve(raw.frames.size() * shifts.size());
  for (const auto& lf : raw.frames) {
    if (lf.frame.region.area != raw.area)
      fail(ErrorKind::Dataset, "frame " + std::to_string(lf.frame.frame_id) +
                                   " belongs to a different area");
    for (std::size_t k = 0; k < shifts.size(); ++k) {
      auto shifted = shift_augment(lf.frame, lf.annotation, shifts[k], raw.acoustic);
      shifted.frame.frame_id = static_cast<std::uint32_t>(lf.frame.frame_id * shifts.size() + k);
      ds.frames.push_back({std::move(shifted.frame), shifted.annotation, Split::Unassigned});
    }
  }
  Rng rng = substream(seed, "shuffle");
  std::shuffle(ds.frames.begin(), ds.frames.end(), rng);
  const auto n_train = static_cast<std::size_t>(
      std::nearbyint(kTrainFraction * static_cast<double>(ds.frames.size())));
  for (std::size_t i = 0; i < ds.frames.size(); ++i)
    ds.frames[i].split = i < n_train ? Split::Train : Split::Test;
  return ds;
}

LocalizationScore score_predictions(std::span<const Prediction> preds,
                                    std::span<const LabeledFrame* const> truth) {
  if (preds.size() != truth.size()) fail(ErrorKind::Evaluation, "prediction/truth count mismatch");
  LocalizationScore s;
  s.total = preds.size();
  double err = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& a = truth[i]->annotation;
    if (preds[i].region == truth[i]->frame.region) ++s.correct_regions;
    if (!a.present) continue;
    if (!preds[i].peak_index) {
      ++s.misses;
      continue;
    }
    err += std::abs(*preds[i].peak_index - a.midpoint());
    ++s.matched;
  }
  s.mae_samples = s.matched > 0 ? err / static_cast<double>(s.matched) : 0.0;
  return s;
}

namespace {

double validation_mae(const CascadedModel<float>& model, const Dataset& ds, const TrainConfig& cfg) {
  const auto test = ds.select(Split::Test);
  if (test.empty()) return 0.0;
  std::vector<Prediction> preds;
  InferConfig ic;
  ic.tau = cfg.tau;
  for (std::size_t i = 0; i < test.size(); i += cfg.batch_size) {
    std::vector<const AModeFrame*> frames;
    for (std::size_t j = i; j < std::min(test.size(), i + cfg.batch_size); ++j)
      frames.push_back(&test[j]->frame);
    auto p = predict_batch(model, frames, ic, ds.acoustic);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return score_predictions(preds, test).mae_samples;
}

}  // namespace

TrainResult train(CascadedModel<float>& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  if (dataset.area != mc.area) fail(ErrorKind::Config, "dataset area does not match the model");
  if (dataset.acoustic.signal_len() != mc.signal_len)
    fail(ErrorKind::Config, "dataset frame length does not match the model");
  const auto train_frames = dataset.select(Split::Train);
  if (train_frames.empty() && cfg.epochs > 0)
    fail(ErrorKind::Dataset, "dataset has no training split");

  const std::size_t batch = cfg.batch_size;
  const std::size_t in_len = mc.unet.input_len;
  const std::size_t w = mc.sbp.window_w;
  SbpConfig sbp = mc.sbp;
  sbp.mode = SbpMode::Stochastic;

  auto params = model.parameters();
  ad::RmsProp<float> opt({cfg.lr, 0.99, 1e-8}, params);
  Rng shuffle_rng = substream(cfg.seed, "shuffle", 1);
  Rng sbp_rng = substream(cfg.seed, "sbp");

  TrainResult result;
  std::vector<std::size_t> order(train_frames.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t n_batches = order.size() / batch;
    if (n_batches == 0)
      fail(ErrorKind::Dataset, "training split smaller than one batch");
    LossBreakdown sum;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      std::vector<const LabeledFrame*> items(batch);
      std::vector<const AModeFrame*> frames(batch);
      for (std::size_t k = 0; k < batch; ++k) {
        items[k] = train_frames[order[bi * batch + k]];
        frames[k] = &items[k]->frame;
      }

      ad::Tape<float> tape(true);
      const auto b = model.bind(tape);
      const ad::Var x = tape.constant(make_input_batch<float>(frames, in_len));
      const auto coarse = model.coarse_forward(tape, b, x);
      const ad::Var cls = model.classify(tape, b, coarse.bottleneck);

      BatchTargets<float> tg{ad::Tensor<float>({batch, 1, in_len}),
                             ad::Tensor<float>({batch, 1, w}), std::vector<std::size_t>(batch)};
      std::vector<std::size_t> starts(batch);
      const auto& prob = tape.value(coarse.peak_prob).data;
      for (std::size_t k = 0; k < batch; ++k) {
        const std::span<const float> row(prob.data() + k * in_len, in_len);
        starts[k] = sbp_propose(row, sbp, &sbp_rng).start;
        fill_mask(tg.coarse_mask.data.data() + k * in_len, in_len, items[k]->annotation);
        fill_mask(tg.refined_mask.data.data() + k * w, w, items[k]->annotation,
                  static_cast<std::ptrdiff_t>(starts[k]));
        tg.regions[k] = items[k]->frame.region.region_id;
      }
      std::array<ad::Var, kUNetDepth> crops;
      for (std::size_t l = 0; l < kUNetDepth; ++l)
        crops[l] = region_crop(tape, coarse.decoder[l], starts, w, l);
      const ad::Var xw = ad::crop_rows(tape, x, starts, w);
      const ad::Var refined = model.refined_forward(tape, b, xw, crops);

      const auto losses = total_loss(tape, coarse.peak_prob, refined, cls, tg, cfg.epsilon_dice);
      const LossBreakdown lb = losses.values(tape);
      if (!std::isfinite(lb.total))
        fail(ErrorKind::Training, "non-finite loss at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(bi));
      for (auto* p : params) p->zero_grad();
      tape.backward(losses.total);
      try {
        opt.step();
      } catch (const Error& e) {
        fail(ErrorKind::Training, std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(bi));
      }
      sum.dice += lb.dice;
      sum.ce += lb.ce;
      sum.dice_refined += lb.dice_refined;
      sum.ce_refined += lb.ce_refined;
      sum.cls += lb.cls;
      sum.total += lb.total;
    }
    const double nb = static_cast<double>(n_batches);
    EpochLog log;
    log.epoch = epoch;
    log.loss = {sum.dice / nb, sum.ce / nb, sum.dice_refined / nb, sum.ce_refined / nb,
                sum.cls / nb, sum.total / nb};
    const bool last = epoch + 1 == cfg.epochs;
    if (cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last) &&
        dataset.count(Split::Test) > 0) {
      const double mae = validation_mae(model, dataset, cfg);
      log.val_mae_samples = mae;
      if (!result.best || mae < result.best_val_mae) {
        result.best = model;
        result.best_val_mae = mae;
      }
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

void write_loss_log(const std::filesystem::path& path, std::span<const EpochLog> log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os << "epoch,l_dice,l_ce,l_dice_refined,l_ce_refined,l_cls,total\n";
  os << std::setprecision(9);
  for (const auto& e : log)
    os << e.epoch << ',' << e.loss.dice << ',' << e.loss.ce << ',' << e.loss.dice_refined << ','
       << e.loss.ce_refined << ',' << e.loss.cls << ',' << e.loss.total << '\n';
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

}  // namespace bonetrack
