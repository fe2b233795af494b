#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bonetrack/inference.hpp"

namespace bonetrack {

/// One exported prediction. Depths are in mm; bias is |pred - true| when
/// both exist. latency_ms is the wall time of the batch the frame ran in.
struct PredictionRow {
  std::uint32_t frame_id = 0;
  RegionLabel true_region;
  RegionLabel pred_region;
  std::optional<double> true_depth_mm;
  std::optional<double> pred_depth_mm;
  std::optional<double> bias_mm;
  double latency_ms = 0.0;

  bool operator==(const PredictionRow&) const = default;
};

std::vector<PredictionRow> prediction_rows(std::span<const Prediction> preds,
                                           std::span<const LabeledFrame* const> truth,
                                           std::span<const double> latency_ms = {});

// Columns: frame_id,true_region,pred_region,true_depth,pred_depth,bias_mm,latency_ms.
// Regions are written as channel numbers; a missing value is an empty field.
void write_predictions_csv(const std::filesystem::path& path, std::span<const PredictionRow> rows);
std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path, Area area);

struct RegionBias {
  RegionLabel region;
  std::size_t frames = 0;
  std::size_t matched = 0;          // truth and prediction both have a peak
  std::size_t misses = 0;           // truth has a peak, prediction does not
  std::size_t false_detections = 0; // prediction has a peak, truth does not
  double bias_mean_mm = 0.0;
  double bias_std_mm = 0.0;  // population
  double pct_sub_mm = 0.0;
};

struct BiasStats {
  std::vector<RegionBias> regions;  // grouped by true region, in region order
  RegionBias overall;
};

/// Absolute-bias statistics per true region. Throws Evaluation when no frame
/// has both a true and a predicted peak.
BiasStats bias_stats(std::span<const PredictionRow> rows, Area area);

struct ClassificationMetrics {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;
};

/// Throws Evaluation on a label outside the area's regions or on no rows.
ClassificationMetrics classification_metrics(std::span<const PredictionRow> rows, Area area);

struct LatencyStats {
  std::size_t batch_size = 0;
  std::size_t reps = 0;
  std::size_t threads = 1;
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

inline constexpr std::size_t kBenchWarmup = 5;
inline constexpr std::size_t kBenchMinReps = 30;

/// Times `reps` batches after kBenchWarmup untimed ones, cycling through
/// `frames`. With threads > 1 each batch is split across that many workers.
LatencyStats latency_bench(const CascadedModel<float>& model,
                           std::span<const AModeFrame* const> frames, const AcousticModel& ac,
                           std::size_t batch_size = 10, std::size_t reps = kBenchMinReps,
                           std::size_t threads = 1);

struct Outlier {
  std::uint32_t frame_id = 0;
  double bias_mm = 0.0;
};

/// Frames whose bias exceeds mean + 3 std of all matched biases.
std::vector<Outlier> find_outliers(std::span<const PredictionRow> rows);

struct EvalReport {
  Area area = Area::Femur;
  BiasStats bias;
  ClassificationMetrics classification;
  std::optional<LatencyStats> latency;
  std::vector<Outlier> outliers;
};

/// Latency, when present, is taken from the rows (mean batch time).
EvalReport make_report(std::span<const PredictionRow> rows, Area area,
                       std::optional<std::size_t> batch_size = std::nullopt);

std::string report_json(const EvalReport& report);
std::string latency_json(const LatencyStats& stats);

/// Writes the report and, if `series_path` is non-empty, the matched-frame
/// bias series (frame_id,bias_mm) ordered by frame id.
void emit_report(const EvalReport& report, std::span<const PredictionRow> rows,
                 const std::filesystem::path& report_path,
                 const std::filesystem::path& series_path = {});

/// Side-by-side per-region table of two reports (model vs baseline).
std::string comparison_table(const EvalReport& model, const EvalReport& baseline);

}  // namespace bonetrack
