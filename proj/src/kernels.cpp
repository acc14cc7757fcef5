// SPDX-License-Identifier: Apache-2.0
#include "qsf/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "qsf/errors.hpp"

namespace qsf::kernels {
namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeMismatch(std::string(what) + ": plane sizes differ");
}

void check_pseudo_gt(std::span<const float> p_self, std::span<const float> p_a,
                     std::span<const float> p_b, std::span<const float> gt,
                     const PseudoGtPlanes& out) {
  const auto n = p_self.size();
  require_same(n, p_a.size(), "pseudo_gt");
  require_same(n, p_b.size(), "pseudo_gt");
  require_same(n, gt.size(), "pseudo_gt");
  require_same(n, out.high.size(), "pseudo_gt");
  require_same(n, out.low.size(), "pseudo_gt");
  require_same(n, out.combined.size(), "pseudo_gt");
}

inline void pseudo_gt_pixel(float self, float a, float b, float g, float& high, float& low,
                            float& combined) {
  const float others = (a + b) * 0.5f;
  high = std::max(self - others, 0.0f) * g;
  low = (self * others) * (1.0f - g);
  combined = std::clamp(high + low, 0.0f, 1.0f);
}

std::size_t check_purify(std::span<const float> f_primary, std::span<const float> f_v,
                         std::span<const float> f_other, std::span<const float> qa,
                         const PurifyPlanes& out) {
  const auto n = f_primary.size();
  require_same(n, f_v.size(), "purify");
  require_same(n, f_other.size(), "purify");
  require_same(n, out.w1.size(), "purify");
  require_same(n, out.w2.size(), "purify");
  require_same(n, out.w.size(), "purify");
  if (qa.empty() || n % qa.size() != 0) throw ShapeMismatch("purify: qa plane does not tile the feature");
  return n / qa.size();
}

inline void purify_pixel(float primary, float v, float other, float q, float& w1, float& w2,
                         float& w) {
  w1 = (primary - (v + other) * 0.5f) * q;
  w2 = v * (1.0f - q);
  w = w1 + w2;
}

void check_edge(std::span<const float> gt, int height, int width, std::span<float> out) {
  if (height <= 0 || width <= 0) throw ShapeMismatch("edge_gt: empty plane");
  const auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  require_same(gt.size(), n, "edge_gt");
  require_same(out.size(), n, "edge_gt");
}

// dilation(3x3) - erosion(3x3) with replicate border, binarized.
inline float edge_pixel(std::span<const float> gt, int height, int width, int y, int x) {
  bool any_fg = false;
  bool any_bg = false;
  for (int dy = -1; dy <= 1; ++dy) {
    const int yy = std::clamp(y + dy, 0, height - 1);
    for (int dx = -1; dx <= 1; ++dx) {
      const int xx = std::clamp(x + dx, 0, width - 1);
      if (gt[static_cast<std::size_t>(yy) * width + xx] > 0.5f) {
        any_fg = true;
      } else {
        any_bg = true;
      }
    }
  }
  return (any_fg && any_bg) ? 1.0f : 0.0f;
}

}  // namespace

int threshold_bin(float p) noexcept {
  const double v = static_cast<double>(p);
  if (!(v >= 1.0 / 255.0)) return 0;
  if (v >= 1.0) return kNumThresholds;
  int k = static_cast<int>(std::floor(v * 255.0));
  k = std::clamp(k, 0, kNumThresholds);
  while (k < kNumThresholds && v >= static_cast<double>(k + 1) / 255.0) ++k;
  while (k > 0 && v < static_cast<double>(k) / 255.0) --k;
  return k;
}

namespace serial {

void pseudo_gt(std::span<const float> p_self, std::span<const float> p_a,
               std::span<const float> p_b, std::span<const float> gt, PseudoGtPlanes out) {
  check_pseudo_gt(p_self, p_a, p_b, gt, out);
  for (std::size_t i = 0; i < p_self.size(); ++i) {
    pseudo_gt_pixel(p_self[i], p_a[i], p_b[i], gt[i], out.high[i], out.low[i], out.combined[i]);
  }
}

void purify(std::span<const float> f_primary, std::span<const float> f_v,
            std::span<const float> f_other, std::span<const float> qa, PurifyPlanes out) {
  const std::size_t channels = check_purify(f_primary, f_v, f_other, qa, out);
  const std::size_t plane = qa.size();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = c * plane + p;
      purify_pixel(f_primary[i], f_v[i], f_other[i], qa[p], out.w1[i], out.w2[i], out.w[i]);
    }
  }
}

void edge_gt(std::span<const float> gt, int height, int width, std::span<float> out) {
  check_edge(gt, height, width, out);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out[static_cast<std::size_t>(y) * width + x] = edge_pixel(gt, height, width, y, x);
    }
  }
}

ThresholdHistogram threshold_histogram(std::span<const float> pred, std::span<const float> gt) {
  require_same(pred.size(), gt.size(), "threshold_histogram");
  ThresholdHistogram hist;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int bin = threshold_bin(pred[i]);
    if (gt[i] > 0.5f) {
      ++hist.fg[bin];
    } else {
      ++hist.bg[bin];
    }
  }
  return hist;
}

double mean_abs_error(std::span<const float> pred, std::span<const float> gt) {
  require_same(pred.size(), gt.size(), "mean_abs_error");
  if (pred.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sum += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
  }
  return sum / static_cast<double>(pred.size());
}

}  // namespace serial

namespace parallel {

void pseudo_gt(std::span<const float> p_self, std::span<const float> p_a,
               std::span<const float> p_b, std::span<const float> gt, PseudoGtPlanes out) {
  check_pseudo_gt(p_self, p_a, p_b, gt, out);
  const auto n = static_cast<std::int64_t>(p_self.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    pseudo_gt_pixel(p_self[i], p_a[i], p_b[i], gt[i], out.high[i], out.low[i], out.combined[i]);
  }
}

void purify(std::span<const float> f_primary, std::span<const float> f_v,
            std::span<const float> f_other, std::span<const float> qa, PurifyPlanes out) {
  check_purify(f_primary, f_v, f_other, qa, out);
  const auto plane = static_cast<std::int64_t>(qa.size());
  const auto n = static_cast<std::int64_t>(f_primary.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    purify_pixel(f_primary[i], f_v[i], f_other[i], qa[i % plane], out.w1[i], out.w2[i], out.w[i]);
  }
}

void edge_gt(std::span<const float> gt, int height, int width, std::span<float> out) {
  check_edge(gt, height, width, out);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out[static_cast<std::size_t>(y) * width + x] = edge_pixel(gt, height, width, y, x);
    }
  }
}

ThresholdHistogram threshold_histogram(std::span<const float> pred, std::span<const float> gt) {
  require_same(pred.size(), gt.size(), "threshold_histogram");
  ThresholdHistogram hist;
  const auto n = static_cast<std::int64_t>(pred.size());
#pragma omp parallel
  {
    ThresholdHistogram local;
#pragma omp for schedule(static) nowait
    for (std::int64_t i = 0; i < n; ++i) {
      const int bin = threshold_bin(pred[i]);
      if (gt[i] > 0.5f) {
        ++local.fg[bin];
      } else {
        ++local.bg[bin];
      }
    }
#pragma omp critical(qsf_threshold_histogram)
    for (std::size_t b = 0; b < hist.fg.size(); ++b) {
      hist.fg[b] += local.fg[b];
      hist.bg[b] += local.bg[b];
    }
  }
  return hist;
}

double mean_abs_error(std::span<const float> pred, std::span<const float> gt) {
  require_same(pred.size(), gt.size(), "mean_abs_error");
  if (pred.empty()) return 0.0;
  // Fixed-size chunks summed in chunk order keep the result independent of
  // the thread count.
  constexpr std::int64_t kChunk = 4096;
  const auto n = static_cast<std::int64_t>(pred.size());
  const std::int64_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < chunks; ++c) {
    double s = 0.0;
    const std::int64_t end = std::min(n, (c + 1) * kChunk);
    for (std::int64_t i = c * kChunk; i < end; ++i) {
      s += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
    }
    partial[static_cast<std::size_t>(c)] = s;
  }
  double sum = 0.0;
  for (const double s : partial) sum += s;
  return sum / static_cast<double>(n);
}

}  // namespace parallel

}  // namespace qsf::kernels
