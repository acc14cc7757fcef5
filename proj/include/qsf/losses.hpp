// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qsf/fusion.hpp"
#include "qsf/initial_extraction.hpp"
#include "qsf/quality_selection.hpp"

namespace qsf {

struct LossConfig {
  int ppa_weight_kernel = 31;
  double ppa_weight_gain = 5.0;

  /// Largest odd kernel not exceeding resolution / 12 (31 at 384 px, 5 at
  /// 64 px), keeping the boundary band proportional.
  static LossConfig for_resolution(int resolution);
  void validate() const;
};

/// Named supervision terms and their sum. `total` keeps the graph for
/// backward; component values are detached scalars.
struct LossReport {
  torch::Tensor total;
  std::vector<std::pair<std::string, torch::Tensor>> components;

  double total_value() const { return total.item<double>(); }
  double component(const std::string& name) const;
};

/// Boundary weight 1 + gain * |AP_k(gt) - gt| (zero-padded average).
torch::Tensor ppa_weight(const torch::Tensor& gt, const LossConfig& cfg);

/// Weighted BCE + weighted IoU on [B, 1, H, W] logits; mean over the batch.
torch::Tensor ppa_loss(const torch::Tensor& logits, const torch::Tensor& gt, const LossConfig& cfg);

/// Mean binary cross-entropy of sigmoid(logits) against soft targets.
torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& target);

/// Sum of the nine PPA terms over V/D/T and the three initial predictions.
LossReport stage1_loss(const std::array<InitialBranchOutput, 3>& initial, const torch::Tensor& gt,
                       const LossConfig& cfg);

/// BCE(P^QA_d, PGT_d) + BCE(P^QA_t, PGT_t).
LossReport stage2_loss(const QualityAwareMaps& qa, const std::array<PseudoGT, 2>& pseudo_gts);

/// Stage-1 terms + PPA on every fused prediction + BCE on the edge map.
/// `edge_gt` is at input resolution; it is max-pooled to the edge logits'
/// stride.
LossReport stage3_loss(const std::array<InitialBranchOutput, 3>& initial, const FusionOutput& fused,
                       const torch::Tensor& gt, const torch::Tensor& edge_gt, const LossConfig& cfg);

/// Max-pool downsampling of a binary mask to (height, width).
torch::Tensor downsample_edge_gt(const torch::Tensor& edge_gt, std::int64_t height, std::int64_t width);

}  // namespace qsf
