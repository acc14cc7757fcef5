// SPDX-License-Identifier: Apache-2.0
//
// Full network: initial extraction, quality-aware region selection and
// selective fusion, plus the ablation switchboard.
#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>

#include "qsf/backbone.hpp"
#include "qsf/fusion.hpp"
#include "qsf/initial_extraction.hpp"
#include "qsf/quality_selection.hpp"

namespace qsf {

enum class Ablation { kFull, kBase, kNoQa, kNoLq, kNoHq, kNoIia, kNoEr };

std::string to_string(Ablation ablation);
Ablation parse_ablation(const std::string& name);

std::string to_string(CascadeOrder order);
CascadeOrder parse_cascade_order(const std::string& name);

struct ModelConfig {
  ScalePreset preset = ScalePreset::kToy;
  Ablation ablation = Ablation::kFull;
  EncoderConfig encoder = EncoderConfig::toy();
  DecoderKind decoder = DecoderKind::kShrinkage;
  QualityConfig quality = QualityConfig::toy();
  FusionConfig fusion{};

  static ModelConfig make(ScalePreset preset, Ablation ablation, CascadeOrder order = CascadeOrder::kDescending);

  bool has_quality() const { return ablation != Ablation::kNoQa; }
  PseudoGtTerms pseudo_gt_terms() const;
};

struct QsfOutput {
  std::array<InitialBranchOutput, 3> initial;
  std::optional<QualityAwareMaps> quality;
  FusionOutput fusion;
};

/// Top-level modules are registered as "extraction", "quality" (absent for
/// no_qa) and "fusion"; checkpoint blobs and freeze scopes use these paths.
class QsfNetImpl : public torch::nn::Module {
 public:
  explicit QsfNetImpl(ModelConfig cfg);

  std::array<InitialBranchOutput, 3> extract(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t);
  QualityAwareMaps assess(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t);
  FusionOutput fuse(const std::array<InitialBranchOutput, 3>& initial, const QualityAwareMaps* quality,
                    std::int64_t height, std::int64_t width);

  QsfOutput forward(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t);

  const ModelConfig& config() const { return cfg_; }

  InitialExtractionNet extraction{nullptr};
  QualitySubnet quality{nullptr};
  FusionNet fusion{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(QsfNet);

}  // namespace qsf
