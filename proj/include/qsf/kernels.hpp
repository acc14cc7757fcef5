// SPDX-License-Identifier: Apache-2.0
//
// Pixelwise kernels over contiguous float planes. Every kernel has a serial
// reference in `kernels::serial` and an OpenMP version in `kernels::parallel`
// with the identical signature; tests check them against each other and the
// benchmark target compares their throughput.
#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace qsf::kernels {

/// Number of uniform thresholds k/255, k = 1..255.
inline constexpr int kNumThresholds = 255;

/// Count of thresholds k/255 (k = 1..255) satisfied by `p >= k/255`.
/// The result lies in [0, 255].
int threshold_bin(float p) noexcept;

/// Per-bin pixel counts for foreground and background pixels of a binary gt
/// (gt > 0.5 is foreground). Bin b holds pixels whose threshold_bin is b.
struct ThresholdHistogram {
  std::array<std::int64_t, kNumThresholds + 1> fg{};
  std::array<std::int64_t, kNumThresholds + 1> bg{};
};

/// Planes of a pseudo ground truth: high-quality, low-quality and combined.
struct PseudoGtPlanes {
  std::span<float> high;
  std::span<float> low;
  std::span<float> combined;
};

/// Planes of a purified feature: w1, w2 and w = w1 + w2.
struct PurifyPlanes {
  std::span<float> w1;
  std::span<float> w2;
  std::span<float> w;
};

namespace serial {

void pseudo_gt(std::span<const float> p_self, std::span<const float> p_a,
               std::span<const float> p_b, std::span<const float> gt, PseudoGtPlanes out);

// Features are channel-major (C planes of `qa.size()` pixels each).
void purify(std::span<const float> f_primary, std::span<const float> f_v,
            std::span<const float> f_other, std::span<const float> qa, PurifyPlanes out);

void edge_gt(std::span<const float> gt, int height, int width, std::span<float> out);

ThresholdHistogram threshold_histogram(std::span<const float> pred, std::span<const float> gt);

double mean_abs_error(std::span<const float> pred, std::span<const float> gt);

}  // namespace serial

namespace parallel {

void pseudo_gt(std::span<const float> p_self, std::span<const float> p_a,
               std::span<const float> p_b, std::span<const float> gt, PseudoGtPlanes out);

void purify(std::span<const float> f_primary, std::span<const float> f_v,
            std::span<const float> f_other, std::span<const float> qa, PurifyPlanes out);

void edge_gt(std::span<const float> gt, int height, int width, std::span<float> out);

ThresholdHistogram threshold_histogram(std::span<const float> pred, std::span<const float> gt);

double mean_abs_error(std::span<const float> pred, std::span<const float> gt);

}  // namespace parallel

}  // namespace qsf::kernels
