// bonetrack command-line front end. Talks to the library only through bonetrack.h.
#include <bonetrack.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr const char* kDataDirEnv = "BONETRACK_DATA_DIR";

// Exit codes by failure class.
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitShape = 4;
constexpr int kExitTraining = 5;
constexpr int kExitOther = 1;

struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

int exit_code(bt_status s) {
  switch (s) {
    case BT_ERR_CONFIG:
    case BT_ERR_INVALID_ARGUMENT:
    case BT_ERR_RANGE: return kExitConfig;
    case BT_ERR_IO: return kExitIo;
    case BT_ERR_SHAPE: return kExitShape;
    case BT_ERR_TRAINING: return kExitTraining;
    default: return kExitOther;
  }
}

void check(bt_status s) {
  if (s != BT_OK) throw CliError(exit_code(s), std::string(bt_status_name(s)) + " error: " + bt_last_error());
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Dataset = Handle<bt_dataset, bt_dataset_free>;
using Model = Handle<bt_model, bt_model_free>;
using Predictions = Handle<bt_predictions, bt_predictions_free>;
using Report = Handle<bt_report, bt_report_free>;

// Every configurable value, addressed by dotted key. Resolution order:
// built-in default < config file < --set < explicit flag.
class RunConfig {
 public:
  RunConfig() {
    const char* env = std::getenv(kDataDirEnv);
    values_ = {
        {"seed", "0"},
        {"area", "femur"},
        {"data_dir", env && *env ? env : "."},
        {"paths.dataset", ""},
        {"paths.checkpoint", ""},
        {"paths.predictions", ""},
        {"paths.report", ""},
        {"paths.series", ""},
        {"paths.loss_log", ""},
        {"paths.profiles", ""},
        {"paths.csv", ""},
        {"synth.frames", "25"},
        {"synth.signal_len", "2048"},
        {"train.epochs", "50"},
        {"train.batch", "10"},
        {"train.lr", "1e-5"},
        {"train.val_every", "0"},
        {"model.window_w", "0"},
        {"infer.tau", "0.5"},
        {"infer.batch", "10"},
        {"infer.deterministic", "false"},
        {"infer.split", "test"},
        {"bench.reps", "30"},
        {"bench.threads", "1"},
    };
  }

  void set(const std::string& key, const std::string& value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw CliError(kExitConfig, "config error: unknown key '" + key + "'");
    it->second = value;
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw CliError(kExitIo, "io error: cannot open config '" + path + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw CliError(kExitConfig, "config error: " + path + ": " + e.what());
    }
    flatten(j, "");
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }

  std::uint64_t u64(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const auto& s = str(key);
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      const auto v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::logic_error&) {
      throw CliError(kExitConfig, "config error: '" + key + "' must be a non-negative integer");
    }
  }

  double f64(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const auto v = std::stod(str(key), &pos);
      if (pos != str(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::logic_error&) {
      throw CliError(kExitConfig, "config error: '" + key + "' must be a number");
    }
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw CliError(kExitConfig, "config error: '" + key + "' must be true or false");
  }

  bt_area area() const {
    if (str("area") == "femur") return BT_FEMUR;
    if (str("area") == "tibia") return BT_TIBIA;
    throw CliError(kExitConfig, "config error: area must be femur or tibia");
  }

  bt_split split() const {
    const auto& s = str("infer.split");
    if (s == "all") return BT_SPLIT_ALL;
    if (s == "train") return BT_SPLIT_TRAIN;
    if (s == "test") return BT_SPLIT_TEST;
    throw CliError(kExitConfig, "config error: split must be all, train or test");
  }

  // Path for `key`, falling back to data_dir/default_name.
  std::string path(const std::string& key, const std::string& default_name) const {
    const auto& v = str(key);
    if (!v.empty()) return v;
    return (fs::path(str("data_dir")) / default_name).string();
  }

 private:
  void flatten(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) throw CliError(kExitConfig, "config error: top level must be an object");
    for (const auto& [k, v] : j.items()) {
      const std::string key = prefix.empty() ? k : prefix + "." + k;
      if (v.is_object()) {
        flatten(v, key);
      } else if (v.is_string()) {
        set(key, v.get<std::string>());
      } else if (v.is_boolean() || v.is_number()) {
        set(key, v.dump());
      } else {
        throw CliError(kExitConfig, "config error: unsupported value for '" + key + "'");
      }
    }
  }

  std::map<std::string, std::string> values_;
};

// A flag bound to a config key; applied only when given on the command line.
struct Binding {
  CLI::Option* opt;
  std::string key;
  std::string value;
};

class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& desc) : sub_(app.add_subcommand(name, desc)) {
    sub_->add_option("--config", config_path_, "JSON config file; nested objects map to dotted keys");
    sub_->add_option("--set", overrides_, "Override a config value, KEY=VALUE (repeatable)");
  }

  Command& opt(const std::string& flag, const std::string& key, const std::string& desc) {
    auto b = std::make_unique<Binding>();
    b->key = key;
    b->opt = sub_->add_option(flag, b->value, desc);
    bindings_.push_back(std::move(b));
    return *this;
  }

  CLI::App* app() { return sub_; }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path_.empty()) cfg.load_file(config_path_);
    for (const auto& o : overrides_) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw CliError(kExitConfig, "config error: --set expects KEY=VALUE, got '" + o + "'");
      cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    for (const auto& b : bindings_)
      if (b->opt->count() > 0) cfg.set(b->key, b->value);
    return cfg;
  }

 private:
  CLI::App* sub_;
  std::string config_path_;
  std::vector<std::string> overrides_;
  std::vector<std::unique_ptr<Binding>> bindings_;
};

const char* area_name(bt_area a) { return a == BT_FEMUR ? "femur" : "tibia"; }

const char* opt_str(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

void run_synth(const RunConfig& c) {
  bt_synth_params p;
  bt_synth_params_default(&p);
  p.area = c.area();
  p.frames_per_region = c.u64("synth.frames");
  p.seed = c.u64("seed");
  p.signal_len = c.u64("synth.signal_len");
  p.profiles_path = opt_str(c.str("paths.profiles"));
  Dataset ds;
  check(bt_dataset_synthesize(&p, ds.out()));
  const auto out = c.path("paths.dataset", "dataset.btds");
  check(bt_dataset_write(ds.get(), out.c_str()));
  if (!c.str("paths.csv").empty()) check(bt_dataset_export_csv(ds.get(), c.str("paths.csv").c_str()));
  bt_dataset_info info;
  check(bt_dataset_info_get(ds.get(), &info));
  std::printf("wrote %s: %zu frames (%zu train, %zu test), %zu without peak, %zu distractor-dominant\n",
              out.c_str(), info.frames, info.train_frames, info.test_frames, info.peakless_frames,
              info.distractor_frames);
}

void print_epoch(const bt_epoch_log* l, void*) {
  std::printf("epoch %3zu  dice %.4f  ce %.4f  dice_ref %.4f  ce_ref %.4f  cls %.4f  total %.4f", l->epoch + 1,
              l->dice, l->ce, l->dice_refined, l->ce_refined, l->cls, l->total);
  if (l->has_val) std::printf("  val_mae %.3f", l->val_mae_samples);
  std::printf("\n");
  std::fflush(stdout);
}

void run_train(const RunConfig& c) {
  Dataset ds;
  check(bt_dataset_read(c.path("paths.dataset", "dataset.btds").c_str(), ds.out()));
  bt_dataset_info info;
  check(bt_dataset_info_get(ds.get(), &info));
  Model model;
  check(bt_model_create(info.area, info.signal_len, c.u64("model.window_w"), c.u64("seed"), model.out()));
  bt_train_params tp;
  bt_train_params_default(&tp);
  tp.lr = c.f64("train.lr");
  tp.batch_size = c.u64("train.batch");
  tp.epochs = c.u64("train.epochs");
  tp.seed = c.u64("seed");
  tp.tau = c.f64("infer.tau");
  tp.val_every = c.u64("train.val_every");
  const auto log = c.path("paths.loss_log", "loss_log.csv");
  check(bt_train(model.get(), ds.get(), &tp, log.c_str(), print_epoch, nullptr));
  const auto ckpt = c.path("paths.checkpoint", "model.btck");
  check(bt_model_save(model.get(), ckpt.c_str()));
  std::printf("wrote %s and %s\n", ckpt.c_str(), log.c_str());
}

void infer_into(const RunConfig& c, const bt_model* model, const bt_dataset* ds, Predictions& out) {
  bt_infer_params ip;
  bt_infer_params_default(&ip);
  ip.tau = c.f64("infer.tau");
  ip.batch_size = c.u64("infer.batch");
  ip.record_latency = !c.flag("infer.deterministic");
  ip.split = c.split();
  check(bt_infer(model, ds, &ip, out.out()));
}

void run_infer(const RunConfig& c) {
  Dataset ds;
  check(bt_dataset_read(c.path("paths.dataset", "dataset.btds").c_str(), ds.out()));
  Model model;
  check(bt_model_load(c.path("paths.checkpoint", "model.btck").c_str(), model.out()));
  Predictions preds;
  infer_into(c, model.get(), ds.get(), preds);
  const auto out = c.path("paths.predictions", "predictions.csv");
  check(bt_predictions_write_csv(preds.get(), out.c_str()));
  std::printf("wrote %s: %zu predictions\n", out.c_str(), bt_predictions_count(preds.get()));
}

void print_summary(const char* label, const bt_report* r) {
  bt_report_summary s;
  check(bt_report_summary_get(r, &s));
  std::printf("%s: bias %.4f +- %.4f mm, %.1f%% sub-mm, %zu matched, %zu misses, %zu outliers, accuracy %.4f\n",
              label, s.bias_mean_mm, s.bias_std_mm, s.pct_sub_mm, s.matched, s.misses, s.outliers, s.accuracy);
}

void run_eval(const RunConfig& c) {
  const bt_area area = c.area();
  Predictions preds;
  check(bt_predictions_read_csv(c.path("paths.predictions", "predictions.csv").c_str(), area, preds.out()));
  Report report;
  check(bt_report_create(preds.get(), area, c.u64("infer.batch"), report.out()));
  const auto out = c.path("paths.report", "report.json");
  check(bt_report_write(report.get(), out.c_str(), opt_str(c.str("paths.series"))));
  print_summary(area_name(area), report.get());
  std::printf("wrote %s\n", out.c_str());
}

void run_bench(const RunConfig& c) {
  Dataset ds;
  check(bt_dataset_read(c.path("paths.dataset", "dataset.btds").c_str(), ds.out()));
  Model model;
  check(bt_model_load(c.path("paths.checkpoint", "model.btck").c_str(), model.out()));
  bt_latency lat;
  check(bt_latency_bench(model.get(), ds.get(), c.u64("infer.batch"), c.u64("bench.reps"),
                         c.u64("bench.threads"), &lat));
  const auto out = c.path("paths.report", "latency.json");
  check(bt_latency_write(&lat, out.c_str()));
  std::printf("batch %zu, %zu reps, %zu thread(s): mean %.1f ms, p95 %.1f ms per batch\n", lat.batch_size,
              lat.reps, lat.threads, lat.mean_ms, lat.p95_ms);
  std::printf("wrote %s\n", out.c_str());
}

void run_compare(const RunConfig& c) {
  Dataset ds;
  check(bt_dataset_read(c.path("paths.dataset", "dataset.btds").c_str(), ds.out()));
  bt_dataset_info info;
  check(bt_dataset_info_get(ds.get(), &info));
  Model model;
  check(bt_model_load(c.path("paths.checkpoint", "model.btck").c_str(), model.out()));
  Predictions mp, bp;
  infer_into(c, model.get(), ds.get(), mp);
  check(bt_baseline(ds.get(), opt_str(c.str("paths.profiles")), c.split(), bp.out()));
  Report mr, br;
  check(bt_report_create(mp.get(), info.area, 0, mr.out()));
  check(bt_report_create(bp.get(), info.area, 0, br.out()));
  std::size_t needed = 0;
  check(bt_report_compare(mr.get(), br.get(), nullptr, 0, &needed));
  std::string table(needed, '\0');
  check(bt_report_compare(mr.get(), br.get(), table.data(), table.size(), &needed));
  table.resize(needed - 1);
  std::fputs(table.c_str(), stdout);
  const auto out = c.path("paths.report", "compare.txt");
  std::ofstream os(out, std::ios::trunc);
  os << table;
  if (!os) throw CliError(kExitIo, "io error: cannot write '" + out + "'");
  std::printf("wrote %s\n", out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"A-mode ultrasound bone-peak localization with cascaded U-Nets.\n"
               "Default file locations live under $" + std::string(kDataDirEnv) + " (or the working directory)."};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", bt_version());

  Command synth(app, "synth", "Generate, augment and split a synthetic dataset");
  synth.opt("--area", "area", "femur or tibia")
      .opt("--frames", "synth.frames", "Raw frames per region (x10 after augmentation)")
      .opt("--signal-len", "synth.signal_len", "Samples per frame")
      .opt("--seed", "seed", "Root seed")
      .opt("--profiles", "paths.profiles", "INI tissue profiles")
      .opt("--dataset", "paths.dataset", "Output dataset file")
      .opt("--csv", "paths.csv", "Also export the frames as CSV");

  Command train(app, "train", "Train a model on the dataset's train split");
  train.opt("--dataset", "paths.dataset", "Dataset file")
      .opt("--checkpoint", "paths.checkpoint", "Output checkpoint")
      .opt("--loss-log", "paths.loss_log", "Output per-epoch loss CSV")
      .opt("--seed", "seed", "Root seed")
      .opt("--epochs", "train.epochs", "Epochs")
      .opt("--batch", "train.batch", "Batch size")
      .opt("--lr", "train.lr", "RMSprop learning rate")
      .opt("--window-w", "model.window_w", "Refined window width (multiple of 16; 0 = default)")
      .opt("--tau", "infer.tau", "Segment threshold used for validation")
      .opt("--val-every", "train.val_every", "Validate on the test split every N epochs (0 = never)");

  Command infer(app, "infer", "Predict peaks and regions for a dataset split");
  infer.opt("--dataset", "paths.dataset", "Dataset file")
      .opt("--checkpoint", "paths.checkpoint", "Checkpoint")
      .opt("--predictions", "paths.predictions", "Output prediction CSV")
      .opt("--tau", "infer.tau", "Segment threshold in (0, 1)")
      .opt("--batch", "infer.batch", "Batch size")
      .opt("--split", "infer.split", "all, train or test")
      .opt("--deterministic", "infer.deterministic", "true: write latency as 0 for reproducible output");

  Command eval(app, "eval", "Score a prediction CSV");
  eval.opt("--area", "area", "femur or tibia")
      .opt("--predictions", "paths.predictions", "Prediction CSV")
      .opt("--report", "paths.report", "Output JSON report")
      .opt("--series", "paths.series", "Output per-frame bias series CSV")
      .opt("--batch", "infer.batch", "Batch size the predictions were made with");

  Command bench(app, "bench", "Time full-pipeline inference per batch");
  bench.opt("--dataset", "paths.dataset", "Dataset file (frames to cycle through)")
      .opt("--checkpoint", "paths.checkpoint", "Checkpoint")
      .opt("--report", "paths.report", "Output latency JSON")
      .opt("--batch", "infer.batch", "Batch size")
      .opt("--reps", "bench.reps", "Timed batches (>= 30)")
      .opt("--threads", "bench.threads", "Worker threads per batch");

  Command compare(app, "compare", "Model vs windowed-argmax baseline on the same split");
  compare.opt("--dataset", "paths.dataset", "Dataset file")
      .opt("--checkpoint", "paths.checkpoint", "Checkpoint")
      .opt("--profiles", "paths.profiles", "INI tissue profiles used for the baseline windows")
      .opt("--report", "paths.report", "Output table")
      .opt("--tau", "infer.tau", "Segment threshold in (0, 1)")
      .opt("--batch", "infer.batch", "Batch size")
      .opt("--split", "infer.split", "all, train or test")
      .opt("--deterministic", "infer.deterministic", "true: write latency as 0");

  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<Command*, std::function<void(const RunConfig&)>>> commands{
      {&synth, run_synth}, {&train, run_train},   {&infer, run_infer},
      {&eval, run_eval},   {&bench, run_bench},   {&compare, run_compare}};
  try {
    for (const auto& [cmd, fn] : commands)
      if (cmd->app()->parsed()) fn(cmd->resolve());
  } catch (const CliError& e) {
    std::fprintf(stderr, "bonetrack: %s\n", e.what());
    return e.code;
  }
  return 0;
}
