// SPDX-License-Identifier: Apache-2.0
#include "qsf/metrics.hpp"

#include <fmt/format.h>
#include <omp.h>

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <exception>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "qsf/datamodel.hpp"
#include "qsf/errors.hpp"

namespace fs = std::filesystem;

namespace qsf {
namespace {

using kernels::kNumThresholds;

void check_pair(const MapView& pred, const MapView& gt) {
  if (pred.height != gt.height || pred.width != gt.width ||
      pred.data.size() != static_cast<std::size_t>(pred.height) * static_cast<std::size_t>(pred.width) ||
      gt.data.size() != pred.data.size()) {
    throw ShapeMismatch("metric inputs differ in shape");
  }
  if (pred.data.empty()) throw ShapeMismatch("metric inputs are empty");
}

double mean_of(std::span<const float> v) {
  double s = 0.0;
  for (const float x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion_at(const MapView& pred, const MapView& gt, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = static_cast<double>(pred.data[i]) >= threshold;
    const bool g = gt.data[i] > 0.5f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double adaptive_threshold(const MapView& pred) { return std::min(2.0 * mean_of(pred.data), 1.0); }

// Cumulative counts: entry k-1 holds pixels meeting threshold k/255.
struct Sweep {
  std::array<std::int64_t, kNumThresholds> tp{};
  std::array<std::int64_t, kNumThresholds> fp{};
  std::int64_t fg = 0;
  std::int64_t total = 0;
};

Sweep sweep(const MapView& pred, const MapView& gt) {
  const auto hist = kernels::parallel::threshold_histogram(pred.data, gt.data);
  Sweep s;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  for (int k = kNumThresholds; k >= 1; --k) {
    tp += hist.fg[k];
    fp += hist.bg[k];
    s.tp[k - 1] = tp;
    s.fp[k - 1] = fp;
  }
  s.fg = tp + hist.fg[0];
  s.total = s.fg + fp + hist.bg[0];
  return s;
}

// Object-level similarity of values expected to be 1.
double object_similarity(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (const double v : values) var += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return 2.0 * mean / (mean * mean + 1.0 + sd + kMetricEps);
}

double object_score(const MapView& pred, const MapView& gt, double gt_mean) {
  std::vector<double> fg;
  std::vector<double> bg;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (gt.data[i] > 0.5f) {
      fg.push_back(pred.data[i]);
    } else {
      bg.push_back(1.0 - pred.data[i]);
    }
  }
  return gt_mean * object_similarity(fg) + (1.0 - gt_mean) * object_similarity(bg);
}

// Structural similarity of one rectangular block.
double block_ssim(const MapView& pred, const MapView& gt, int y0, int y1, int x0, int x1) {
  const int n = (y1 - y0) * (x1 - x0);
  if (n <= 0) return 0.0;
  double mp = 0.0;
  double mg = 0.0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const auto i = static_cast<std::size_t>(y) * pred.width + x;
      mp += pred.data[i];
      mg += gt.data[i] > 0.5f ? 1.0 : 0.0;
    }
  }
  mp /= n;
  mg /= n;
  double vp = 0.0, vg = 0.0, cov = 0.0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const auto i = static_cast<std::size_t>(y) * pred.width + x;
      const double dp = pred.data[i] - mp;
      const double dg = (gt.data[i] > 0.5f ? 1.0 : 0.0) - mg;
      vp += dp * dp;
      vg += dg * dg;
      cov += dp * dg;
    }
  }
  if (n > 1) {
    vp /= (n - 1);
    vg /= (n - 1);
    cov /= (n - 1);
  } else {
    vp = vg = cov = 0.0;
  }
  const double alpha = 4.0 * mp * mg * cov;
  const double beta = (mp * mp + mg * mg) * (vp + vg);
  if (alpha != 0.0) return alpha / (beta + kMetricEps);
  return beta == 0.0 ? 1.0 : 0.0;
}

double region_score(const MapView& pred, const MapView& gt) {
  const int h = gt.height;
  const int w = gt.width;
  double sum_x = 0.0;
  double sum_y = 0.0;
  std::int64_t count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (gt.data[static_cast<std::size_t>(y) * w + x] > 0.5f) {
        sum_x += x;
        sum_y += y;
        ++count;
      }
    }
  }
  // Centroid rounded half-to-even, then shifted by one: the split point is
  // the count of columns/rows in the left/top blocks.
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  int cx = 0;
  int cy = 0;
  if (count == 0) {
    cx = static_cast<int>(std::nearbyint(w / 2.0));
    cy = static_cast<int>(std::nearbyint(h / 2.0));
  } else {
    cx = static_cast<int>(std::nearbyint(sum_x / static_cast<double>(count))) + 1;
    cy = static_cast<int>(std::nearbyint(sum_y / static_cast<double>(count))) + 1;
  }
  std::fesetround(saved);
  cx = std::clamp(cx, 0, w);
  cy = std::clamp(cy, 0, h);

  const double area = static_cast<double>(h) * w;
  const double w1 = static_cast<double>(cx) * cy / area;
  const double w2 = static_cast<double>(w - cx) * cy / area;
  const double w3 = static_cast<double>(cx) * (h - cy) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * block_ssim(pred, gt, 0, cy, 0, cx) + w2 * block_ssim(pred, gt, 0, cy, cx, w) +
         w3 * block_ssim(pred, gt, cy, h, 0, cx) + w4 * block_ssim(pred, gt, cy, h, cx, w);
}

std::map<std::string, std::vector<std::string>> read_tag_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read tag file " + path.string());
  std::map<std::string, std::vector<std::string>> tags;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    auto& list = tags[line.substr(0, tab)];
    if (tab == std::string::npos) continue;
    std::stringstream rest(line.substr(tab + 1));
    std::string tag;
    while (std::getline(rest, tag, ',')) {
      if (!tag.empty()) list.push_back(tag);
    }
  }
  return tags;
}

std::string num(double v) { return fmt::format("{:.6f}", v); }

std::string aggregate_json(const AggregateMetrics& a, const std::string& indent) {
  std::string out = "{\n";
  const std::pair<const char*, double> fields[] = {
      {"S", a.s},          {"MAE", a.mae},       {"F_adp", a.f_adaptive}, {"F_mean", a.f_mean},
      {"F_max", a.f_max},  {"E_adp", a.e_adaptive}, {"E_mean", a.e_mean}, {"E_max", a.e_max},
  };
  for (std::size_t i = 0; i < std::size(fields); ++i) {
    out += indent + "  \"" + fields[i].first + "\": " + num(fields[i].second) + (i + 1 < std::size(fields) ? ",\n" : "\n");
  }
  out += indent + "}";
  return out;
}

}  // namespace

void MetricConfig::validate() const {
  if (!(beta_sq > 0.0)) throw ConfigError("beta_sq must be positive");
  if (!(s_alpha >= 0.0 && s_alpha <= 1.0)) throw ConfigError("s_alpha must lie in [0, 1]");
}

double curve_threshold(int index) { return static_cast<double>(index + 1) / 255.0; }

double f_beta(std::int64_t tp, std::int64_t fp, std::int64_t fn, double beta_sq) {
  const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  const double denom = beta_sq * precision + recall;
  return denom > 0.0 ? (1.0 + beta_sq) * precision * recall / denom : 0.0;
}

double e_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  const double n = static_cast<double>(tp + fp + fn + tn);
  const std::int64_t gt_fg = tp + fn;
  const std::int64_t pred_fg = tp + fp;
  if (gt_fg == 0) return static_cast<double>(fn + tn) / n;  // 1 - B
  if (gt_fg == tp + fp + fn + tn) return static_cast<double>(pred_fg) / n;  // B
  const double mean_b = static_cast<double>(pred_fg) / n;
  const double mean_g = static_cast<double>(gt_fg) / n;
  auto enhanced = [&](double b, double g) {
    const double phi_b = b - mean_b;
    const double phi_g = g - mean_g;
    const double align = 2.0 * phi_g * phi_b / std::max(phi_g * phi_g + phi_b * phi_b, kMetricEps);
    return (1.0 + align) * (1.0 + align) / 4.0;
  };
  const double sum = static_cast<double>(tp) * enhanced(1, 1) + static_cast<double>(fp) * enhanced(1, 0) +
                     static_cast<double>(fn) * enhanced(0, 1) + static_cast<double>(tn) * enhanced(0, 0);
  return sum / n;
}

double mae(const MapView& pred, const MapView& gt) {
  check_pair(pred, gt);
  // gt is compared as a {0,1} mask.
  std::vector<float> binary(gt.data.size());
  std::transform(gt.data.begin(), gt.data.end(), binary.begin(), [](float g) { return g > 0.5f ? 1.0f : 0.0f; });
  return kernels::parallel::mean_abs_error(pred.data, binary);
}

FMeasureResult f_measures(const MapView& pred, const MapView& gt, const MetricConfig& cfg) {
  check_pair(pred, gt);
  const Sweep s = sweep(pred, gt);
  FMeasureResult r;
  r.curve.resize(kNumThresholds);
  r.precision.resize(kNumThresholds);
  r.recall.resize(kNumThresholds);
  for (int k = 0; k < kNumThresholds; ++k) {
    const auto tp = s.tp[k];
    const auto fp = s.fp[k];
    const auto fn = s.fg - tp;
    r.precision[k] = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall[k] = s.fg > 0 ? static_cast<double>(tp) / static_cast<double>(s.fg) : 0.0;
    r.curve[k] = f_beta(tp, fp, fn, cfg.beta_sq);
  }
  r.max = *std::max_element(r.curve.begin(), r.curve.end());
  double sum = 0.0;
  for (const double f : r.curve) sum += f;
  r.mean = sum / kNumThresholds;
  const Confusion c = confusion_at(pred, gt, adaptive_threshold(pred));
  r.adaptive = f_beta(c.tp, c.fp, c.fn, cfg.beta_sq);
  return r;
}

EMeasureResult e_measures(const MapView& pred, const MapView& gt, const MetricConfig&) {
  check_pair(pred, gt);
  const Sweep s = sweep(pred, gt);
  EMeasureResult r;
  r.curve.resize(kNumThresholds);
  for (int k = 0; k < kNumThresholds; ++k) {
    const auto tp = s.tp[k];
    const auto fp = s.fp[k];
    const auto fn = s.fg - tp;
    const auto tn = s.total - tp - fp - fn;
    r.curve[k] = e_from_counts(tp, fp, fn, tn);
  }
  r.max = *std::max_element(r.curve.begin(), r.curve.end());
  double sum = 0.0;
  for (const double e : r.curve) sum += e;
  r.mean = sum / kNumThresholds;
  const Confusion c = confusion_at(pred, gt, adaptive_threshold(pred));
  r.adaptive = e_from_counts(c.tp, c.fp, c.fn, c.tn);
  return r;
}

double s_measure(const MapView& pred, const MapView& gt, const MetricConfig& cfg) {
  check_pair(pred, gt);
  std::int64_t fg = 0;
  for (const float g : gt.data) fg += g > 0.5f ? 1 : 0;
  const auto n = static_cast<std::int64_t>(gt.data.size());
  if (fg == 0) return 1.0 - mean_of(pred.data);
  if (fg == n) return mean_of(pred.data);
  const double gt_mean = static_cast<double>(fg) / static_cast<double>(n);
  const double score =
      cfg.s_alpha * object_score(pred, gt, gt_mean) + (1.0 - cfg.s_alpha) * region_score(pred, gt);
  return std::max(0.0, score);
}

SampleMetrics evaluate_sample(const std::string& id, const MapView& pred, const MapView& gt,
                              const MetricConfig& cfg) {
  SampleMetrics m;
  m.id = id;
  m.mae = mae(pred, gt);
  m.s = s_measure(pred, gt, cfg);
  m.f = f_measures(pred, gt, cfg);
  m.e = e_measures(pred, gt, cfg);
  return m;
}

AggregateMetrics aggregate(std::span<const SampleMetrics> samples) {
  AggregateMetrics a;
  a.count = samples.size();
  a.precision.assign(kNumThresholds, 0.0);
  a.recall.assign(kNumThresholds, 0.0);
  a.f_curve.assign(kNumThresholds, 0.0);
  a.e_curve.assign(kNumThresholds, 0.0);
  if (samples.empty()) return a;
  for (const auto& m : samples) {
    a.s += m.s;
    a.mae += m.mae;
    a.f_adaptive += m.f.adaptive;
    a.e_adaptive += m.e.adaptive;
    for (int k = 0; k < kNumThresholds; ++k) {
      a.precision[k] += m.f.precision[k];
      a.recall[k] += m.f.recall[k];
      a.f_curve[k] += m.f.curve[k];
      a.e_curve[k] += m.e.curve[k];
    }
  }
  const auto n = static_cast<double>(samples.size());
  a.s /= n;
  a.mae /= n;
  a.f_adaptive /= n;
  a.e_adaptive /= n;
  for (int k = 0; k < kNumThresholds; ++k) {
    a.precision[k] /= n;
    a.recall[k] /= n;
    a.f_curve[k] /= n;
    a.e_curve[k] /= n;
  }
  a.f_max = *std::max_element(a.f_curve.begin(), a.f_curve.end());
  a.e_max = *std::max_element(a.e_curve.begin(), a.e_curve.end());
  double fs = 0.0;
  double es = 0.0;
  for (int k = 0; k < kNumThresholds; ++k) {
    fs += a.f_curve[k];
    es += a.e_curve[k];
  }
  a.f_mean = fs / kNumThresholds;
  a.e_mean = es / kNumThresholds;
  return a;
}

MetricsReport evaluate_directory(const fs::path& pred_dir, const fs::path& gt_dir,
                                 const std::optional<fs::path>& tags_path, const MetricConfig& cfg) {
  cfg.validate();
  std::vector<fs::path> gts;
  if (!fs::is_directory(gt_dir)) throw IoError("ground-truth directory " + gt_dir.string() + " does not exist");
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") gts.push_back(e.path());
  }
  std::sort(gts.begin(), gts.end(), [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });
  if (gts.empty()) throw EmptyDataset("no ground-truth maps under " + gt_dir.string());
  for (const auto& g : gts) {
    if (!fs::exists(pred_dir / (g.stem().string() + ".png"))) {
      throw MissingPrediction("no prediction for '" + g.stem().string() + "' in " + pred_dir.string());
    }
  }

  MetricsReport report;
  report.samples.resize(gts.size());
  std::exception_ptr failure;
  const auto count = static_cast<std::int64_t>(gts.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      const auto stem = gts[i].stem().string();
      const auto gt = read_map_png(gts[i]);
      const auto pred = read_map_png(pred_dir / (stem + ".png"));
      if (!gt.sizes().equals(pred.sizes())) {
        throw ShapeMismatch("prediction '" + stem + "' differs in size from its ground truth");
      }
      // GT is binarized at 128/255.
      const auto gt_bin = (gt >= (128.0f / 255.0f)).to(torch::kFloat32).contiguous();
      const auto pred_c = pred.contiguous();
      const int h = static_cast<int>(gt.size(0));
      const int w = static_cast<int>(gt.size(1));
      const MapView pv{std::span<const float>(pred_c.data_ptr<float>(), static_cast<std::size_t>(pred_c.numel())), h, w};
      const MapView gv{std::span<const float>(gt_bin.data_ptr<float>(), static_cast<std::size_t>(gt_bin.numel())), h, w};
      report.samples[i] = evaluate_sample(stem, pv, gv, cfg);
    } catch (...) {
#pragma omp critical(qsf_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  report.overall = aggregate(report.samples);
  if (tags_path) {
    const auto tags = read_tag_file(*tags_path);
    std::map<std::string, std::vector<SampleMetrics>> grouped;
    for (const auto& m : report.samples) {
      const auto it = tags.find(m.id);
      if (it == tags.end()) continue;
      const std::set<std::string> unique(it->second.begin(), it->second.end());
      for (const auto& tag : unique) grouped[tag].push_back(m);
    }
    for (const auto& [tag, list] : grouped) report.by_tag[tag] = aggregate(list);
  }
  return report;
}

fs::path write_report(const MetricsReport& report, const fs::path& report_path) {
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  std::string out = "{\n";
  out += "  \"num_samples\": " + std::to_string(report.samples.size()) + ",\n";
  out += "  \"aggregate\": " + aggregate_json(report.overall, "  ") + ",\n";
  out += "  \"samples\": [";
  for (std::size_t i = 0; i < report.samples.size(); ++i) {
    const auto& m = report.samples[i];
    out += (i ? ",\n" : "\n");
    out += "    {\"id\": " + nlohmann::json(m.id).dump() + ", \"S\": " + num(m.s) + ", \"MAE\": " + num(m.mae) +
           ", \"F_adp\": " + num(m.f.adaptive) + ", \"F_mean\": " + num(m.f.mean) + ", \"F_max\": " + num(m.f.max) +
           ", \"E_adp\": " + num(m.e.adaptive) + ", \"E_mean\": " + num(m.e.mean) + ", \"E_max\": " + num(m.e.max) +
           "}";
  }
  out += report.samples.empty() ? "],\n" : "\n  ],\n";
  out += "  \"tags\": {";
  std::size_t t = 0;
  for (const auto& [tag, agg] : report.by_tag) {
    out += (t++ ? ",\n" : "\n");
    out += "    " + nlohmann::json(tag).dump() + ": {\"num_samples\": " + std::to_string(agg.count) +
           ", \"aggregate\": " + aggregate_json(agg, "    ") + "}";
  }
  out += report.by_tag.empty() ? "}\n" : "\n  }\n";
  out += "}\n";

  std::ofstream json(report_path, std::ios::binary);
  if (!json) throw IoError("cannot write " + report_path.string());
  json << out;

  const fs::path csv_path = report_path.parent_path() / (report_path.stem().string() + "_curves.csv");
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "threshold,precision,recall,F\n";
  for (int k = 0; k < kNumThresholds; ++k) {
    csv << num(curve_threshold(k)) << ',' << num(report.overall.precision[k]) << ',' << num(report.overall.recall[k])
        << ',' << num(report.overall.f_curve[k]) << '\n';
  }
  return csv_path;
}

}  // namespace qsf
