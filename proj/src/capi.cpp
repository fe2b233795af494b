#include "bonetrack.h"

#include <chrono>
#include <cstring>
#include <fstream>
#include <new>
#include <string>

#include "bonetrack/autodiff/checkpoint.hpp"
#include "bonetrack/baseline.hpp"
#include "bonetrack/evaluation.hpp"
#include "bonetrack/synthgen.hpp"
#include "bonetrack/training.hpp"

using namespace bonetrack;

struct bt_dataset {
  Dataset ds;
};

struct bt_model {
  CascadedModel<float> model;
};

struct bt_predictions {
  std::vector<PredictionRow> rows;
};

struct bt_report {
  EvalReport report;
  std::vector<PredictionRow> rows;
};

namespace {

thread_local std::string g_last_error;

bt_status to_status(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return BT_ERR_CONFIG;
    case ErrorKind::Io: return BT_ERR_IO;
    case ErrorKind::Shape: return BT_ERR_SHAPE;
    case ErrorKind::Range: return BT_ERR_RANGE;
    case ErrorKind::Augmentation: return BT_ERR_AUGMENTATION;
    case ErrorKind::Dataset: return BT_ERR_DATASET;
    case ErrorKind::Generator: return BT_ERR_GENERATOR;
    case ErrorKind::Training: return BT_ERR_TRAINING;
    case ErrorKind::Evaluation: return BT_ERR_EVALUATION;
  }
  return BT_ERR_INTERNAL;
}

template <typename F>
bt_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return BT_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown exception";
  }
  return BT_ERR_INTERNAL;
}

bt_status invalid(const char* what) {
  g_last_error = std::string("null or invalid argument: ") + what;
  return BT_ERR_INVALID_ARGUMENT;
}

Area to_area(bt_area a) {
  if (a != BT_FEMUR && a != BT_TIBIA) fail(ErrorKind::Config, "unknown area code");
  return a == BT_FEMUR ? Area::Femur : Area::Tibia;
}

std::vector<const LabeledFrame*> frames_of(const Dataset& ds, bt_split split) {
  switch (split) {
    case BT_SPLIT_TRAIN: return ds.select(Split::Train);
    case BT_SPLIT_TEST: return ds.select(Split::Test);
    case BT_SPLIT_ALL: break;
    default: fail(ErrorKind::Config, "unknown split code");
  }
  std::vector<const LabeledFrame*> all;
  for (const auto& f : ds.frames) all.push_back(&f);
  return all;
}

std::vector<TissueProfile> profiles_for(const char* path, Area area) {
  return path && *path ? load_profiles(path, area) : default_profiles(area);
}

}  // namespace

extern "C" {

const char* bt_last_error(void) { return g_last_error.c_str(); }

const char* bt_status_name(bt_status s) {
  switch (s) {
    case BT_OK: return "ok";
    case BT_ERR_CONFIG: return "config";
    case BT_ERR_IO: return "io";
    case BT_ERR_SHAPE: return "shape";
    case BT_ERR_RANGE: return "range";
    case BT_ERR_AUGMENTATION: return "augmentation";
    case BT_ERR_DATASET: return "dataset";
    case BT_ERR_GENERATOR: return "generator";
    case BT_ERR_TRAINING: return "training";
    case BT_ERR_EVALUATION: return "evaluation";
    case BT_ERR_INVALID_ARGUMENT: return "invalid-argument";
    case BT_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* bt_version(void) { return "0.1.0"; }

void bt_synth_params_default(bt_synth_params* p) {
  if (!p) return;
  p->area = BT_FEMUR;
  p->frames_per_region = 25;
  p->seed = 0;
  p->signal_len = 2048;
  p->profiles_path = nullptr;
}

bt_status bt_dataset_synthesize(const bt_synth_params* p, bt_dataset** out) {
  if (!p || !out) return invalid("synth params/out");
  return guarded([&] {
    const Area area = to_area(p->area);
    const auto profiles = profiles_for(p->profiles_path, area);
    GenConfig gc;
    gc.seed = p->seed;
    gc.frames_per_region = p->frames_per_region;
    gc.acoustic = AcousticModel(1540.0, 40e6, p->signal_len);
    auto raw = generate_dataset(profiles, gc);
    *out = new bt_dataset{build_dataset(raw, p->seed)};
  });
}

bt_status bt_dataset_read(const char* path, bt_dataset** out) {
  if (!path || !out) return invalid("path/out");
  return guarded([&] { *out = new bt_dataset{read_dataset(path)}; });
}

bt_status bt_dataset_write(const bt_dataset* ds, const char* path) {
  if (!ds || !path) return invalid("dataset/path");
  return guarded([&] { write_dataset(path, ds->ds); });
}

bt_status bt_dataset_export_csv(const bt_dataset* ds, const char* path) {
  if (!ds || !path) return invalid("dataset/path");
  return guarded([&] { export_dataset_csv(path, ds->ds); });
}

void bt_dataset_free(bt_dataset* ds) { delete ds; }

bt_status bt_dataset_info_get(const bt_dataset* ds, bt_dataset_info* out) {
  if (!ds || !out) return invalid("dataset/out");
  return guarded([&] {
    const Dataset& d = ds->ds;
    bt_dataset_info info{};
    info.area = d.area == Area::Femur ? BT_FEMUR : BT_TIBIA;
    info.signal_len = d.acoustic.signal_len();
    info.frames = d.frames.size();
    info.train_frames = d.count(Split::Train);
    info.test_frames = d.count(Split::Test);
    for (const auto& f : d.frames) {
      if (!f.annotation.present) ++info.peakless_frames;
      if (distractor_dominant(f)) ++info.distractor_frames;
    }
    *out = info;
  });
}

bt_status bt_model_create(bt_area area, size_t signal_len, size_t window_w, uint64_t seed,
                          bt_model** out) {
  if (!out) return invalid("out");
  return guarded([&] {
    auto cfg = ModelConfig::for_signal(to_area(area), signal_len);
    if (window_w != 0) cfg.sbp.window_w = window_w;
    cfg.validate();
    *out = new bt_model{CascadedModel<float>(cfg, seed)};
  });
}

bt_status bt_model_load(const char* path, bt_model** out) {
  if (!path || !out) return invalid("path/out");
  return guarded([&] {
    *out = new bt_model{CascadedModel<float>::from_checkpoint(ad::read_checkpoint(path))};
  });
}

bt_status bt_model_save(const bt_model* model, const char* path) {
  if (!model || !path) return invalid("model/path");
  return guarded([&] { ad::write_checkpoint(path, model->model.to_checkpoint()); });
}

void bt_model_free(bt_model* model) { delete model; }

bt_status bt_model_info_get(const bt_model* model, bt_model_info* out) {
  if (!model || !out) return invalid("model/out");
  return guarded([&] {
    const auto& c = model->model.config();
    *out = {c.area == Area::Femur ? BT_FEMUR : BT_TIBIA,
            c.signal_len,
            c.unet.input_len,
            c.sbp.window_w,
            c.num_regions(),
            model->model.parameter_count()};
  });
}

void bt_train_params_default(bt_train_params* p) {
  if (!p) return;
  const TrainConfig d;
  p->lr = d.lr;
  p->batch_size = d.batch_size;
  p->epochs = d.epochs;
  p->seed = d.seed;
  p->tau = d.tau;
  p->val_every = d.val_every;
}

bt_status bt_train(bt_model* model, const bt_dataset* ds, const bt_train_params* p,
                   const char* loss_log_path, bt_epoch_callback cb, void* user) {
  if (!model || !ds || !p) return invalid("model/dataset/params");
  return guarded([&] {
    TrainConfig tc;
    tc.lr = p->lr;
    tc.batch_size = p->batch_size;
    tc.epochs = p->epochs;
    tc.seed = p->seed;
    tc.tau = p->tau;
    tc.val_every = p->val_every;
    EpochCallback on_epoch;
    if (cb)
      on_epoch = [cb, user](const EpochLog& e) {
        const bt_epoch_log l{e.epoch,         e.loss.dice, e.loss.ce, e.loss.dice_refined,
                             e.loss.ce_refined, e.loss.cls, e.loss.total,
                             e.val_mae_samples.has_value(), e.val_mae_samples.value_or(0.0)};
        cb(&l, user);
      };
    const auto result = train(model->model, ds->ds, tc, on_epoch);
    if (loss_log_path) write_loss_log(loss_log_path, result.log);
  });
}

void bt_infer_params_default(bt_infer_params* p) {
  if (!p) return;
  p->tau = 0.5;
  p->batch_size = 10;
  p->record_latency = 1;
  p->split = BT_SPLIT_TEST;
}

bt_status bt_infer(const bt_model* model, const bt_dataset* ds, const bt_infer_params* p,
                   bt_predictions** out) {
  if (!model || !ds || !p || !out) return invalid("model/dataset/params/out");
  return guarded([&] {
    if (p->batch_size == 0) fail(ErrorKind::Config, "batch size must be positive");
    const auto frames = frames_of(ds->ds, p->split);
    InferConfig ic;
    ic.tau = p->tau;
    std::vector<Prediction> preds;
    std::vector<double> latency;
    for (std::size_t i = 0; i < frames.size(); i += p->batch_size) {
      std::vector<const AModeFrame*> batch;
      for (std::size_t j = i; j < std::min(frames.size(), i + p->batch_size); ++j)
        batch.push_back(&frames[j]->frame);
      const auto t0 = std::chrono::steady_clock::now();
      auto out_batch = predict_batch(model->model, batch, ic, ds->ds.acoustic);
      const double ms =
          p->record_latency
              ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
              : 0.0;
      for (auto& pr : out_batch) {
        preds.push_back(std::move(pr));
        latency.push_back(ms);
      }
    }
    *out = new bt_predictions{prediction_rows(preds, frames, latency)};
  });
}

bt_status bt_baseline(const bt_dataset* ds, const char* profiles_path, bt_split split,
                      bt_predictions** out) {
  if (!ds || !out) return invalid("dataset/out");
  return guarded([&] {
    const auto profiles = profiles_for(profiles_path, ds->ds.area);
    const auto windows = baseline_windows(profiles, ds->ds.acoustic);
    const auto frames = frames_of(ds->ds, split);
    std::vector<Prediction> preds;
    for (const auto* f : frames) preds.push_back(baseline_predict(f->frame, windows, ds->ds.acoustic));
    *out = new bt_predictions{prediction_rows(preds, frames)};
  });
}

size_t bt_predictions_count(const bt_predictions* preds) { return preds ? preds->rows.size() : 0; }

bt_status bt_predictions_get(const bt_predictions* preds, size_t i, bt_prediction* out) {
  if (!preds || !out || i >= preds->rows.size()) return invalid("predictions/index/out");
  const auto& r = preds->rows[i];
  *out = {r.frame_id,
          r.true_region.channel,
          r.pred_region.channel,
          r.true_depth_mm.has_value(),
          r.true_depth_mm.value_or(0.0),
          r.pred_depth_mm.has_value(),
          r.pred_depth_mm.value_or(0.0),
          r.bias_mm.value_or(0.0),
          r.latency_ms};
  return BT_OK;
}

bt_status bt_predictions_write_csv(const bt_predictions* preds, const char* path) {
  if (!preds || !path) return invalid("predictions/path");
  return guarded([&] { write_predictions_csv(path, preds->rows); });
}

bt_status bt_predictions_read_csv(const char* path, bt_area area, bt_predictions** out) {
  if (!path || !out) return invalid("path/out");
  return guarded([&] { *out = new bt_predictions{read_predictions_csv(path, to_area(area))}; });
}

void bt_predictions_free(bt_predictions* preds) { delete preds; }

bt_status bt_report_create(const bt_predictions* preds, bt_area area, size_t batch_size,
                           bt_report** out) {
  if (!preds || !out) return invalid("predictions/out");
  return guarded([&] {
    const auto bs = batch_size > 0 ? std::optional<std::size_t>(batch_size) : std::nullopt;
    *out = new bt_report{make_report(preds->rows, to_area(area), bs), preds->rows};
  });
}

bt_status bt_report_write(const bt_report* report, const char* path, const char* series_path) {
  if (!report || !path) return invalid("report/path");
  return guarded([&] {
    emit_report(report->report, report->rows, path,
                series_path ? std::filesystem::path(series_path) : std::filesystem::path());
  });
}

bt_status bt_report_summary_get(const bt_report* report, bt_report_summary* out) {
  if (!report || !out) return invalid("report/out");
  const auto& r = report->report;
  *out = {r.classification.accuracy, r.bias.overall.bias_mean_mm, r.bias.overall.bias_std_mm,
          r.bias.overall.pct_sub_mm, r.bias.overall.matched,   r.bias.overall.misses,
          r.outliers.size()};
  return BT_OK;
}

bt_status bt_report_compare(const bt_report* model, const bt_report* baseline, char* buf,
                            size_t cap, size_t* needed) {
  if (!model || !baseline || (!buf && cap > 0)) return invalid("reports/buffer");
  return guarded([&] {
    if (model->report.area != baseline->report.area)
      fail(ErrorKind::Evaluation, "reports cover different areas");
    const std::string table = comparison_table(model->report, baseline->report);
    if (needed) *needed = table.size() + 1;
    if (cap > 0) {
      const std::size_t n = std::min(cap - 1, table.size());
      std::memcpy(buf, table.data(), n);
      buf[n] = '\0';
    }
  });
}

void bt_report_free(bt_report* report) { delete report; }

bt_status bt_latency_bench(const bt_model* model, const bt_dataset* ds, size_t batch_size,
                           size_t reps, size_t threads, bt_latency* out) {
  if (!model || !ds || !out) return invalid("model/dataset/out");
  return guarded([&] {
    std::vector<const AModeFrame*> frames;
    for (const auto& f : ds->ds.frames) frames.push_back(&f.frame);
    const auto s = latency_bench(model->model, frames, ds->ds.acoustic, batch_size, reps, threads);
    *out = {s.batch_size, s.reps, s.threads, s.mean_ms, s.p95_ms};
  });
}

bt_status bt_latency_write(const bt_latency* stats, const char* path) {
  if (!stats || !path) return invalid("stats/path");
  return guarded([&] {
    std::ofstream os(path, std::ios::trunc);
    if (!os) fail(ErrorKind::Io, std::string("cannot open '") + path + "' for writing");
    os << latency_json({stats->batch_size, stats->reps, stats->threads, stats->mean_ms, stats->p95_ms});
    if (!os) fail(ErrorKind::Io, std::string("write to '") + path + "' failed");
  });
}

}  // extern "C"
