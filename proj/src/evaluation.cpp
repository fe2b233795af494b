#include "bonetrack/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "bonetrack/error.hpp"

namespace bonetrack {

namespace {

using Json = nlohmann::json;

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string fmt_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::optional<double> parse_opt(const std::string& field, const std::string& where) {
  if (field.empty()) return std::nullopt;
  double v = 0.0;
  const auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (r.ec != std::errc() || r.ptr != field.data() + field.size())
    fail(ErrorKind::Io, "bad number '" + field + "' in " + where);
  return v;
}

long parse_int(const std::string& field, const std::string& where) {
  long v = 0;
  const auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (r.ec != std::errc() || r.ptr != field.data() + field.size())
    fail(ErrorKind::Io, "bad integer '" + field + "' in " + where);
  return v;
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  if (v.empty()) return m;
  const double n = static_cast<double>(v.size());
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / n);
  return m;
}

void finish(RegionBias& r, std::vector<double> biases) {
  // Sorting makes the sums independent of row order.
  std::sort(biases.begin(), biases.end());
  r.matched = biases.size();
  const auto m = moments(biases);
  r.bias_mean_mm = m.mean;
  r.bias_std_mm = m.std;
  const auto sub = std::count_if(biases.begin(), biases.end(), [](double b) { return b < 1.0; });
  r.pct_sub_mm = biases.empty() ? 0.0 : 100.0 * static_cast<double>(sub) / static_cast<double>(biases.size());
}

Json region_json(const RegionBias& r) {
  return Json{{"region", r.region.name()},
              {"channel", r.region.channel},
              {"frames", r.frames},
              {"matched", r.matched},
              {"misses", r.misses},
              {"false_detections", r.false_detections},
              {"bias_mean_mm", r.bias_mean_mm},
              {"bias_std_mm", r.bias_std_mm},
              {"pct_sub_mm", r.pct_sub_mm}};
}

Json latency_to_json(const LatencyStats& s) {
  return Json{{"batch_size", s.batch_size},
              {"reps", s.reps},
              {"threads", s.threads},
              {"latency_ms_mean", s.mean_ms},
              {"latency_ms_p95", s.p95_ms}};
}

}  // namespace

std::vector<PredictionRow> prediction_rows(std::span<const Prediction> preds,
                                           std::span<const LabeledFrame* const> truth,
                                           std::span<const double> latency_ms) {
  if (preds.size() != truth.size() || (!latency_ms.empty() && latency_ms.size() != preds.size()))
    fail(ErrorKind::Evaluation, "prediction, truth and latency counts differ");
  std::vector<PredictionRow> rows(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& t = *truth[i];
    if (preds[i].frame_id != t.frame.frame_id)
      fail(ErrorKind::Evaluation, "prediction for frame " + std::to_string(preds[i].frame_id) +
                                      " paired with frame " + std::to_string(t.frame.frame_id));
    auto& r = rows[i];
    r.frame_id = t.frame.frame_id;
    r.true_region = t.frame.region;
    r.pred_region = preds[i].region;
    if (t.annotation.present) r.true_depth_mm = t.annotation.depth_mm;
    r.pred_depth_mm = preds[i].depth_mm;
    if (r.true_depth_mm && r.pred_depth_mm) r.bias_mm = std::abs(*r.pred_depth_mm - *r.true_depth_mm);
    if (!latency_ms.empty()) r.latency_ms = latency_ms[i];
  }
  return rows;
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const PredictionRow> rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os << "frame_id,true_region,pred_region,true_depth,pred_depth,bias_mm,latency_ms\n";
  for (const auto& r : rows)
    os << r.frame_id << ',' << r.true_region.channel << ',' << r.pred_region.channel << ','
       << fmt(r.true_depth_mm) << ',' << fmt(r.pred_depth_mm) << ',' << fmt(r.bias_mm) << ','
       << fmt(r.latency_ms) << '\n';
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path, Area area) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line.rfind("frame_id,", 0) != 0)
    fail(ErrorKind::Io, "'" + path.string() + "' is not a prediction file");
  std::vector<PredictionRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 7) fail(ErrorKind::Io, "expected 7 fields at " + where);
    PredictionRow r;
    r.frame_id = static_cast<std::uint32_t>(parse_int(f[0], where));
    try {
      r.true_region = RegionLabel::from_channel(area, static_cast<int>(parse_int(f[1], where)));
      r.pred_region = RegionLabel::from_channel(area, static_cast<int>(parse_int(f[2], where)));
    } catch (const Error& e) {
      fail(ErrorKind::Evaluation, std::string(e.what()) + " at " + where);
    }
    r.true_depth_mm = parse_opt(f[3], where);
    r.pred_depth_mm = parse_opt(f[4], where);
    r.bias_mm = parse_opt(f[5], where);
    r.latency_ms = parse_opt(f[6], where).value_or(0.0);
    rows.push_back(r);
  }
  return rows;
}

BiasStats bias_stats(std::span<const PredictionRow> rows, Area area) {
  const std::size_t n_regions = region_count(area);
  BiasStats s;
  std::vector<std::vector<double>> per(n_regions);
  std::vector<double> all;
  for (std::size_t r = 0; r < n_regions; ++r) s.regions.push_back({RegionLabel::from_id(area, r)});
  for (const auto& row : rows) {
    if (row.true_region.area != area || row.true_region.region_id >= n_regions)
      fail(ErrorKind::Evaluation, "frame " + std::to_string(row.frame_id) + " has a foreign region");
    auto& r = s.regions[row.true_region.region_id];
    ++r.frames;
    ++s.overall.frames;
    if (row.true_depth_mm && row.pred_depth_mm) {
      const double b = std::abs(*row.pred_depth_mm - *row.true_depth_mm);
      per[row.true_region.region_id].push_back(b);
      all.push_back(b);
    } else if (row.true_depth_mm) {
      ++r.misses;
      ++s.overall.misses;
    } else if (row.pred_depth_mm) {
      ++r.false_detections;
      ++s.overall.false_detections;
    }
  }
  if (all.empty()) fail(ErrorKind::Evaluation, "no frame has both a true and a predicted peak");
  for (std::size_t r = 0; r < n_regions; ++r) finish(s.regions[r], std::move(per[r]));
  s.overall.region = {area, -1, 0};
  finish(s.overall, std::move(all));
  return s;
}

ClassificationMetrics classification_metrics(std::span<const PredictionRow> rows, Area area) {
  const std::size_t n = region_count(area);
  if (rows.empty()) fail(ErrorKind::Evaluation, "no predictions to score");
  ClassificationMetrics m;
  m.confusion.assign(n, std::vector<std::size_t>(n, 0));
  std::size_t correct = 0;
  for (const auto& r : rows) {
    for (const auto* l : {&r.true_region, &r.pred_region})
      if (l->area != area || l->region_id >= n)
        fail(ErrorKind::Evaluation, "frame " + std::to_string(r.frame_id) +
                                        " has a label outside the " + to_string(area) + " regions");
    ++m.confusion[r.true_region.region_id][r.pred_region.region_id];
    if (r.true_region.region_id == r.pred_region.region_id) ++correct;
  }
  m.total = rows.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.total);
  return m;
}

LatencyStats latency_bench(const CascadedModel<float>& model,
                           std::span<const AModeFrame* const> frames, const AcousticModel& ac,
                           std::size_t batch_size, std::size_t reps, std::size_t threads) {
  if (frames.empty()) fail(ErrorKind::Config, "latency bench needs at least one frame");
  if (batch_size == 0 || threads == 0) fail(ErrorKind::Config, "batch size and threads must be positive");
  if (reps < kBenchMinReps)
    fail(ErrorKind::Config, "latency bench needs at least " + std::to_string(kBenchMinReps) + " reps");
  threads = std::min(threads, batch_size);
  const InferConfig ic;
  std::size_t cursor = 0;
  auto run_batch = [&] {
    std::vector<const AModeFrame*> batch(batch_size);
    for (auto& f : batch) f = frames[cursor++ % frames.size()];
    if (threads == 1) {
      predict_batch(model, batch, ic, ac);
      return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (batch_size + threads - 1) / threads;
    for (std::size_t lo = 0; lo < batch_size; lo += chunk) {
      const std::span<const AModeFrame* const> part(batch.data() + lo, std::min(chunk, batch_size - lo));
      pool.emplace_back([&, part] { predict_batch(model, part, ic, ac); });
    }
    for (auto& t : pool) t.join();
  };
  for (std::size_t i = 0; i < kBenchWarmup; ++i) run_batch();
  std::vector<double> ms(reps);
  for (auto& t : ms) {
    const auto t0 = std::chrono::steady_clock::now();
    run_batch();
    t = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  LatencyStats s{batch_size, reps, threads, 0.0, 0.0};
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(reps);
  std::sort(ms.begin(), ms.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(reps)));
  s.p95_ms = ms[std::clamp<std::size_t>(rank, 1, reps) - 1];
  return s;
}

std::vector<Outlier> find_outliers(std::span<const PredictionRow> rows) {
  std::vector<double> biases;
  for (const auto& r : rows)
    if (r.bias_mm) biases.push_back(*r.bias_mm);
  std::sort(biases.begin(), biases.end());
  const auto m = moments(biases);
  const double threshold = m.mean + 3.0 * m.std;
  std::vector<Outlier> out;
  for (const auto& r : rows)
    if (r.bias_mm && *r.bias_mm > threshold) out.push_back({r.frame_id, *r.bias_mm});
  std::sort(out.begin(), out.end(), [](const Outlier& a, const Outlier& b) { return a.frame_id < b.frame_id; });
  return out;
}

EvalReport make_report(std::span<const PredictionRow> rows, Area area,
                       std::optional<std::size_t> batch_size) {
  EvalReport rep;
  rep.area = area;
  rep.bias = bias_stats(rows, area);
  rep.classification = classification_metrics(rows, area);
  rep.outliers = find_outliers(rows);
  if (batch_size) {
    LatencyStats l;
    l.batch_size = *batch_size;
    l.reps = (rows.size() + *batch_size - 1) / *batch_size;
    double sum = 0.0;
    for (const auto& r : rows) sum += r.latency_ms;
    l.mean_ms = sum / static_cast<double>(rows.size());
    l.p95_ms = 0.0;
    for (const auto& r : rows) l.p95_ms = std::max(l.p95_ms, r.latency_ms);
    rep.latency = l;
  }
  return rep;
}

std::string latency_json(const LatencyStats& stats) { return latency_to_json(stats).dump(2) + "\n"; }

std::string report_json(const EvalReport& report) {
  Json j;
  j["area"] = to_string(report.area);
  Json regions = Json::array();
  for (const auto& r : report.bias.regions) regions.push_back(region_json(r));
  j["regions"] = regions;
  Json overall = region_json(report.bias.overall);
  overall.erase("region");
  overall.erase("channel");
  j["overall"] = overall;
  j["accuracy"] = report.classification.accuracy;
  j["confusion_matrix"] = report.classification.confusion;
  j["latency"] = report.latency ? latency_to_json(*report.latency) : Json(nullptr);
  Json outliers = Json::array();
  for (const auto& o : report.outliers) outliers.push_back({{"frame_id", o.frame_id}, {"bias_mm", o.bias_mm}});
  j["outliers"] = outliers;
  return j.dump(2) + "\n";
}

void emit_report(const EvalReport& report, std::span<const PredictionRow> rows,
                 const std::filesystem::path& report_path, const std::filesystem::path& series_path) {
  {
    std::ofstream os(report_path, std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot open '" + report_path.string() + "' for writing");
    os << report_json(report);
    if (!os) fail(ErrorKind::Io, "write to '" + report_path.string() + "' failed");
  }
  if (series_path.empty()) return;
  std::vector<const PredictionRow*> matched;
  for (const auto& r : rows)
    if (r.bias_mm) matched.push_back(&r);
  std::stable_sort(matched.begin(), matched.end(),
                   [](const PredictionRow* a, const PredictionRow* b) { return a->frame_id < b->frame_id; });
  std::ofstream os(series_path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + series_path.string() + "' for writing");
  os << "frame_id,bias_mm\n";
  for (const auto* r : matched) os << r->frame_id << ',' << fmt(*r->bias_mm) << '\n';
  if (!os) fail(ErrorKind::Io, "write to '" + series_path.string() + "' failed");
}

std::string comparison_table(const EvalReport& model, const EvalReport& baseline) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-8s | %-22s %-9s | %-22s %-9s\n", "region", "channel",
                "model bias (mm)", "sub-mm %", "baseline bias (mm)", "sub-mm %");
  os << line;
  auto row = [&](const std::string& name, const std::string& ch, const RegionBias& m, const RegionBias& b) {
    const std::string mb = fmt_fixed(m.bias_mean_mm) + " +- " + fmt_fixed(m.bias_std_mm);
    const std::string bb = fmt_fixed(b.bias_mean_mm) + " +- " + fmt_fixed(b.bias_std_mm);
    std::snprintf(line, sizeof line, "%-10s %-8s | %-22s %-9.1f | %-22s %-9.1f\n", name.c_str(),
                  ch.c_str(), mb.c_str(), m.pct_sub_mm, bb.c_str(), b.pct_sub_mm);
    os << line;
  };
  for (std::size_t r = 0; r < model.bias.regions.size(); ++r) {
    const auto& m = model.bias.regions[r];
    row(m.region.name(), std::to_string(m.region.channel), m, baseline.bias.regions.at(r));
  }
  row("all", "-", model.bias.overall, baseline.bias.overall);
  std::snprintf(line, sizeof line, "classification accuracy: %.4f\n", model.classification.accuracy);
  os << line;
  return os.str();
}

}  // namespace bonetrack
