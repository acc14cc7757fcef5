// SPDX-License-Identifier: Apache-2.0
//
// Quality-aware region selection: pseudo ground truth from cross-modal
// prediction disagreement, and the residual encoder/decoder that learns to
// predict it from the concatenated V/D/T images.
#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "qsf/backbone.hpp"
#include "qsf/initial_extraction.hpp"

namespace qsf {

enum class QualityModality { kDepth, kThermal };

/// High-quality (fg-gated), low-quality (bg-gated) and combined targets.
struct PseudoGT {
  torch::Tensor high;
  torch::Tensor low;
  torch::Tensor combined;
  QualityModality modality = QualityModality::kDepth;
};

/// ReLU(p_self - (p_a + p_b) / 2) * gt.
torch::Tensor pseudo_gt_high(const torch::Tensor& p_self, const torch::Tensor& p_a, const torch::Tensor& p_b,
                             const torch::Tensor& gt);

/// p_self * (p_a + p_b) / 2 * (1 - gt).
torch::Tensor pseudo_gt_low(const torch::Tensor& p_self, const torch::Tensor& p_a, const torch::Tensor& p_b,
                            const torch::Tensor& gt);

/// Which terms the combined target keeps (the w/o LQ and w/o HQ variants
/// drop one of them).
enum class PseudoGtTerms { kBoth, kHighOnly, kLowOnly };

/// Builds depth and thermal targets from the stage-3 maps P_3 of each branch
/// (probabilities at gt resolution). Runs the parallel pixel kernel; no
/// gradient flows through the result.
std::array<PseudoGT, 2> build_pseudo_gt(const std::array<InitialBranchOutput, 3>& branches, const torch::Tensor& gt,
                                        PseudoGtTerms terms = PseudoGtTerms::kBoth);

/// Same as above from explicit [B, 1, H, W] probability maps.
std::array<PseudoGT, 2> build_pseudo_gt(const torch::Tensor& p_v, const torch::Tensor& p_d, const torch::Tensor& p_t,
                                        const torch::Tensor& gt, PseudoGtTerms terms = PseudoGtTerms::kBoth);

struct QualityConfig {
  std::array<int, 5> widths{16, 16, 32, 64, 128};  // stem, then four residual stages
  std::array<int, 4> blocks{1, 1, 1, 1};
  int decoder_width = 32;

  static QualityConfig toy();
  static QualityConfig paper();  // ResNet-34 layout
  static QualityConfig for_preset(ScalePreset preset);
};

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  torch::nn::BatchNorm2d bn2_{nullptr};
  torch::nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// P^QA maps for depth and thermal, with their logits.
struct QualityAwareMaps {
  torch::Tensor depth_logits;
  torch::Tensor thermal_logits;
  torch::Tensor depth;    // sigmoid(depth_logits), [B, 1, H, W]
  torch::Tensor thermal;  // sigmoid(thermal_logits)
};

class QualitySubnetImpl : public torch::nn::Module {
 public:
  explicit QualitySubnetImpl(QualityConfig cfg);

  /// Inputs [B, 3, H, W] each; H and W must be multiples of 32.
  QualityAwareMaps forward(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t);

  /// Parameters of the shared encoder/decoder trunk (excludes the heads).
  std::vector<torch::Tensor> trunk_parameters();

 private:
  QualityConfig cfg_;
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  std::vector<torch::nn::Sequential> layers_;
  std::vector<ConvUnit> lateral_;
  std::vector<ConvUnit> fuse_;
  ConvUnit top_{nullptr};
  torch::nn::Conv2d head_depth_{nullptr};
  torch::nn::Conv2d head_thermal_{nullptr};
};
TORCH_MODULE(QualitySubnet);

QualityAwareMaps qa_forward(QualitySubnet& net, const torch::Tensor& v, const torch::Tensor& d,
                            const torch::Tensor& t);

}  // namespace qsf
