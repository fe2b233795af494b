#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "bonetrack/inference.hpp"
#include "bonetrack/network.hpp"

namespace bonetrack {

/// The five terms of the training objective and their unweighted sum.
struct LossBreakdown {
  double dice = 0.0;
  double ce = 0.0;
  double dice_refined = 0.0;
  double ce_refined = 0.0;
  double cls = 0.0;
  double total = 0.0;
};

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch_size = 10;
  std::size_t epochs = 50;
  double epsilon_dice = 1e-6;
  std::uint64_t seed = 0;
  // Validation MAE on the test split every N epochs (0 = never).
  std::size_t val_every = 1;
  double tau = 0.5;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  LossBreakdown loss;  // mean over the epoch's batches
  std::optional<double> val_mae_samples;
};

// Targets for one batch.
template <typename T>
struct BatchTargets {
  ad::Tensor<T> coarse_mask;   // [B, 1, input_len]
  ad::Tensor<T> refined_mask;  // [B, 1, window_w]
  std::vector<std::size_t> regions;
};

template <typename T>
struct LossVars {
  ad::Var dice, ce, dice_refined, ce_refined, cls, total;

  LossBreakdown values(const ad::Tape<T>& tape) const;
};

/// Builds the loss graph: dice + BCE on both segmentation outputs plus the
/// region cross-entropy, summed without weights.
template <typename T>
LossVars<T> total_loss(ad::Tape<T>& tape, ad::Var coarse_prob, ad::Var refined_prob,
                       ad::Var region_probs, const BatchTargets<T>& targets, double eps_dice);

/// Scalar conveniences over plain arrays (batch of one).
double dice_loss(std::span<const double> pred, std::span<const double> truth, double eps);
double ce_loss(std::span<const double> pred, std::span<const double> truth);
double cls_loss(std::span<const double> region_probs, std::size_t true_region);

/// Annotation mask over [0, len); the segment re-indexed by -offset, clipped.
template <typename T>
void fill_mask(T* mask, std::size_t len, const PeakAnnotation& a, std::ptrdiff_t offset = 0);

/// The ten augmentation shifts: evenly spaced over [-100, 100], rounded.
std::vector<int> augmentation_shifts();

/// Augments every frame by each shift, shuffles with the seed's "shuffle"
/// stream and tags the first 80% train, the rest test. Throws Dataset on an
/// empty input.
Dataset build_dataset(const Dataset& raw, std::uint64_t seed);

using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainResult {
  std::vector<EpochLog> log;
  std::optional<CascadedModel<float>> best;  // best validation MAE, if validated
  double best_val_mae = 0.0;
};

/// RMSprop training over the train split with stochastic proposals. The
/// model is updated in place. Throws Training on a non-finite loss.
TrainResult train(CascadedModel<float>& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Mean |predicted index - annotated midpoint| over frames with a peak in
/// both; abstentions are counted in `misses`.
struct LocalizationScore {
  double mae_samples = 0.0;
  std::size_t matched = 0;
  std::size_t misses = 0;
  std::size_t correct_regions = 0;
  std::size_t total = 0;
};

LocalizationScore score_predictions(std::span<const Prediction> preds,
                                    std::span<const LabeledFrame* const> truth);

/// Loss log rows: epoch,l_dice,l_ce,l_dice_refined,l_ce_refined,l_cls,total.
void write_loss_log(const std::filesystem::path& path, std::span<const EpochLog> log);

}  // namespace bonetrack
