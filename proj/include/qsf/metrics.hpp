// SPDX-License-Identifier: Apache-2.0
//
// Saliency evaluation: MAE, F-measure (adaptive / mean / max, PR and F
// curves), E-measure (adaptive / mean / max) and S-measure, plus directory
// evaluation with challenge-tag sub-reports.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qsf/kernels.hpp"

namespace qsf {

struct MetricConfig {
  double beta_sq = 0.3;
  double s_alpha = 0.5;

  void validate() const;
};

/// Row-major map of height x width values. For predictions values lie in
/// [0, 1]; ground truth is binary (> 0.5 is foreground).
struct MapView {
  std::span<const float> data;
  int height = 0;
  int width = 0;
};

inline constexpr double kMetricEps = 1e-8;

/// Threshold k/255 for curve index k - 1.
double curve_threshold(int index);

struct FMeasureResult {
  double adaptive = 0.0;
  double mean = 0.0;
  double max = 0.0;
  std::vector<double> curve;      // 255 entries, threshold k/255 at index k-1
  std::vector<double> precision;  // 255 entries
  std::vector<double> recall;     // 255 entries
};

struct EMeasureResult {
  double adaptive = 0.0;
  double mean = 0.0;
  double max = 0.0;
  std::vector<double> curve;  // 255 entries
};

double mae(const MapView& pred, const MapView& gt);
FMeasureResult f_measures(const MapView& pred, const MapView& gt, const MetricConfig& cfg = {});
EMeasureResult e_measures(const MapView& pred, const MapView& gt, const MetricConfig& cfg = {});
double s_measure(const MapView& pred, const MapView& gt, const MetricConfig& cfg = {});

/// F-measure from a confusion count with 0/0 conventions mapping to 0.
double f_beta(std::int64_t tp, std::int64_t fp, std::int64_t fn, double beta_sq);

/// E-measure of a binarized prediction given its confusion counts.
double e_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn);

struct SampleMetrics {
  std::string id;
  double s = 0.0;
  double mae = 0.0;
  FMeasureResult f;
  EMeasureResult e;
};

SampleMetrics evaluate_sample(const std::string& id, const MapView& pred, const MapView& gt,
                              const MetricConfig& cfg = {});

struct AggregateMetrics {
  std::size_t count = 0;
  double s = 0.0;
  double mae = 0.0;
  double f_adaptive = 0.0;
  double f_mean = 0.0;
  double f_max = 0.0;
  double e_adaptive = 0.0;
  double e_mean = 0.0;
  double e_max = 0.0;
  std::vector<double> precision;  // mean over samples per threshold
  std::vector<double> recall;
  std::vector<double> f_curve;
  std::vector<double> e_curve;
};

/// Scalar measures are arithmetic means over samples; curves are per-threshold
/// means and the max/mean measures are taken over the mean curves.
AggregateMetrics aggregate(std::span<const SampleMetrics> samples);

struct MetricsReport {
  std::vector<SampleMetrics> samples;  // sorted by id
  AggregateMetrics overall;
  std::map<std::string, AggregateMetrics> by_tag;
};

/// Evaluates every GT stem under `gt_dir` against `<pred_dir>/<stem>.png`.
/// `tags_path` is an optional id<TAB>tag,tag file.
MetricsReport evaluate_directory(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                                 const std::optional<std::filesystem::path>& tags_path, const MetricConfig& cfg = {});

/// Writes `report_path` (JSON, 6 decimals) and `<stem>_curves.csv` next to
/// it with columns threshold, precision, recall, F. Returns the CSV path.
std::filesystem::path write_report(const MetricsReport& report, const std::filesystem::path& report_path);

}  // namespace qsf
