/* bonetrack C API: A-mode bone-peak localization with cascaded U-Nets. */
#ifndef BONETRACK_H
#define BONETRACK_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define BT_API __declspec(dllexport)
#else
#define BT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bt_status {
  BT_OK = 0,
  BT_ERR_CONFIG = 1,
  BT_ERR_IO = 2,
  BT_ERR_SHAPE = 3,
  BT_ERR_RANGE = 4,
  BT_ERR_AUGMENTATION = 5,
  BT_ERR_DATASET = 6,
  BT_ERR_GENERATOR = 7,
  BT_ERR_TRAINING = 8,
  BT_ERR_EVALUATION = 9,
  BT_ERR_INVALID_ARGUMENT = 10,
  BT_ERR_INTERNAL = 11
} bt_status;

typedef enum bt_area { BT_FEMUR = 0, BT_TIBIA = 1 } bt_area;

typedef enum bt_split { BT_SPLIT_ALL = 0, BT_SPLIT_TRAIN = 1, BT_SPLIT_TEST = 2 } bt_split;

typedef struct bt_dataset bt_dataset;
typedef struct bt_model bt_model;
typedef struct bt_predictions bt_predictions;
typedef struct bt_report bt_report;

/* Message of the last failed call on this thread ("" if none). */
BT_API const char* bt_last_error(void);
BT_API const char* bt_status_name(bt_status status);
BT_API const char* bt_version(void);

/* ---- datasets ---- */

typedef struct bt_synth_params {
  bt_area area;
  size_t frames_per_region; /* raw frames before the 10x shift augmentation */
  uint64_t seed;
  size_t signal_len;
  const char* profiles_path; /* INI tissue profiles, or NULL for the built-in ones */
} bt_synth_params;

BT_API void bt_synth_params_default(bt_synth_params* p);

/* Generates, augments and splits (80/20) a synthetic dataset. */
BT_API bt_status bt_dataset_synthesize(const bt_synth_params* p, bt_dataset** out);
BT_API bt_status bt_dataset_read(const char* path, bt_dataset** out);
BT_API bt_status bt_dataset_write(const bt_dataset* ds, const char* path);
BT_API bt_status bt_dataset_export_csv(const bt_dataset* ds, const char* path);
BT_API void bt_dataset_free(bt_dataset* ds);

typedef struct bt_dataset_info {
  bt_area area;
  size_t signal_len;
  size_t frames;
  size_t train_frames;
  size_t test_frames;
  size_t peakless_frames;
  size_t distractor_frames; /* global argmax outside the annotated segment */
} bt_dataset_info;

BT_API bt_status bt_dataset_info_get(const bt_dataset* ds, bt_dataset_info* out);

/* ---- models ---- */

/* window_w = 0 picks the default for signal_len. */
BT_API bt_status bt_model_create(bt_area area, size_t signal_len, size_t window_w, uint64_t seed,
                                 bt_model** out);
BT_API bt_status bt_model_load(const char* path, bt_model** out);
BT_API bt_status bt_model_save(const bt_model* model, const char* path);
BT_API void bt_model_free(bt_model* model);

typedef struct bt_model_info {
  bt_area area;
  size_t signal_len;
  size_t input_len;
  size_t window_w;
  size_t regions;
  size_t parameters;
} bt_model_info;

BT_API bt_status bt_model_info_get(const bt_model* model, bt_model_info* out);

/* ---- training ---- */

typedef struct bt_train_params {
  double lr;
  size_t batch_size;
  size_t epochs;
  uint64_t seed;
  double tau;
  size_t val_every; /* 0 disables validation on the test split */
} bt_train_params;

typedef struct bt_epoch_log {
  size_t epoch;
  double dice, ce, dice_refined, ce_refined, cls, total;
  int has_val;
  double val_mae_samples;
} bt_epoch_log;

typedef void (*bt_epoch_callback)(const bt_epoch_log* log, void* user);

BT_API void bt_train_params_default(bt_train_params* p);

/* Trains in place; writes the per-epoch loss log as CSV when loss_log_path is non-NULL. */
BT_API bt_status bt_train(bt_model* model, const bt_dataset* ds, const bt_train_params* p,
                          const char* loss_log_path, bt_epoch_callback cb, void* user);

/* ---- inference ---- */

typedef struct bt_infer_params {
  double tau;
  size_t batch_size;
  int record_latency; /* 0 writes latency as 0 so outputs are byte-reproducible */
  bt_split split;
} bt_infer_params;

BT_API void bt_infer_params_default(bt_infer_params* p);

BT_API bt_status bt_infer(const bt_model* model, const bt_dataset* ds, const bt_infer_params* p,
                          bt_predictions** out);

/* Traditional detector: highest echo inside an expert window per channel. */
BT_API bt_status bt_baseline(const bt_dataset* ds, const char* profiles_path, bt_split split,
                             bt_predictions** out);

typedef struct bt_prediction {
  uint32_t frame_id;
  int true_channel;
  int pred_channel;
  int has_truth;
  double true_depth_mm;
  int has_peak;
  double pred_depth_mm;
  double bias_mm; /* valid when has_truth && has_peak */
  double latency_ms;
} bt_prediction;

BT_API size_t bt_predictions_count(const bt_predictions* preds);
BT_API bt_status bt_predictions_get(const bt_predictions* preds, size_t i, bt_prediction* out);
BT_API bt_status bt_predictions_write_csv(const bt_predictions* preds, const char* path);
BT_API bt_status bt_predictions_read_csv(const char* path, bt_area area, bt_predictions** out);
BT_API void bt_predictions_free(bt_predictions* preds);

/* ---- evaluation ---- */

/* batch_size > 0 adds a latency section built from the rows. */
BT_API bt_status bt_report_create(const bt_predictions* preds, bt_area area, size_t batch_size,
                                  bt_report** out);
/* series_path may be NULL. */
BT_API bt_status bt_report_write(const bt_report* report, const char* path, const char* series_path);

typedef struct bt_report_summary {
  double accuracy;
  double bias_mean_mm;
  double bias_std_mm;
  double pct_sub_mm;
  size_t matched;
  size_t misses;
  size_t outliers;
} bt_report_summary;

BT_API bt_status bt_report_summary_get(const bt_report* report, bt_report_summary* out);

/* Copies a side-by-side text table into buf (NUL-terminated, truncated to cap).
   *needed receives the full length including the terminator. */
BT_API bt_status bt_report_compare(const bt_report* model, const bt_report* baseline, char* buf,
                                   size_t cap, size_t* needed);
BT_API void bt_report_free(bt_report* report);

typedef struct bt_latency {
  size_t batch_size;
  size_t reps;
  size_t threads;
  double mean_ms;
  double p95_ms;
} bt_latency;

/* Full-pipeline wall time per batch over the dataset's frames (reps >= 30). */
BT_API bt_status bt_latency_bench(const bt_model* model, const bt_dataset* ds, size_t batch_size,
                                  size_t reps, size_t threads, bt_latency* out);
BT_API bt_status bt_latency_write(const bt_latency* stats, const char* path);

#ifdef __cplusplus
}
#endif

#endif
