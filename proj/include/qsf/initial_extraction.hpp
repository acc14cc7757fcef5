// SPDX-License-Identifier: Apache-2.0
//
// Initial feature extraction: the shared encoder feeds three independent
// per-modality decoders. Each decoder is a shrinkage pyramid of multi-scale
// fusion (MSF) nodes whose bottom-node outputs F_{i,1} (i = 1..3, stride 4,
// 128 channels) drive three prediction heads.
#pragma once

#include <torch/torch.h>

#include <array>
#include <utility>
#include <vector>

#include "qsf/backbone.hpp"

namespace qsf {

inline constexpr int kDecoderWidth = 128;

/// Normalization after a conv: none (the conv then carries a bias), batch
/// statistics, or per-sample group statistics with a per-channel affine.
enum class NormKind { kNone, kBatch, kGroup };

/// Conv -> [norm] -> [ReLU].
class ConvUnitImpl : public torch::nn::Module {
 public:
  ConvUnitImpl(int in, int out, int kernel, int groups = 1, NormKind norm = NormKind::kBatch, bool relu = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d& conv() { return conv_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::AnyModule norm_;
  bool relu_;
};
TORCH_MODULE(ConvUnit);

/// Depthwise k x k then pointwise 1 x 1, followed by [norm] and ReLU.
class DsConvImpl : public torch::nn::Module {
 public:
  DsConvImpl(int channels, int kernel, NormKind norm = NormKind::kBatch);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d& depthwise() { return depthwise_; }
  torch::nn::Conv2d& pointwise() { return pointwise_; }

 private:
  torch::nn::Conv2d depthwise_{nullptr};
  torch::nn::Conv2d pointwise_{nullptr};
  torch::nn::AnyModule norm_;
};
TORCH_MODULE(DsConv);

struct MsfOptions {
  int channels = kDecoderWidth;
  // Group statistics keep training and inference identical; the gated
  // products compound any train/inference normalization gap node by node.
  NormKind norm = NormKind::kGroup;
};

/// Multi-scale fusion node. With D = up2(deeper):
///   F~ = current + D
///   F' = Conv1x1(F~) * DSConv3x3(F~)
///   F'' = F' * DSConv5x5(F~)
///   out = Conv3x3(F'' + Conv1x1(D))
class MsfImpl : public torch::nn::Module {
 public:
  explicit MsfImpl(MsfOptions options = {});
  torch::Tensor forward(const torch::Tensor& current, const torch::Tensor& deeper);

  ConvUnit gate_1x1{nullptr};
  DsConv ds3{nullptr};
  DsConv ds5{nullptr};
  ConvUnit skip_1x1{nullptr};
  ConvUnit out_3x3{nullptr};

 private:
  MsfOptions options_;
};
TORCH_MODULE(Msf);

/// Sets every conv in `msf` to an identity map with zero bias (requires
/// norm == NormKind::kNone); used by schedule tests.
void set_identity_weights(Msf& msf);

/// Bottom-node output of each decoder stage plus the node evaluation log.
struct DecoderGridState {
  std::array<torch::Tensor, 3> stage_outputs;
  std::vector<std::pair<int, int>> schedule;  // (stage, level), 1-based
};

/// Common interface of the shrinkage decoder and the U-shaped baseline.
class DecoderBase : public torch::nn::Module {
 public:
  virtual DecoderGridState decode(const FeaturePyramid& pyramid) = 0;
};

class ShrinkageDecoderImpl : public DecoderBase {
 public:
  ShrinkageDecoderImpl(const std::array<int, 4>& in_widths, MsfOptions options = {});

  /// Projects to 128 channels then runs the 3 + 2 + 1 node schedule.
  DecoderGridState decode(const FeaturePyramid& pyramid) override;

  /// Runs the schedule on already projected levels (stride 4..32).
  DecoderGridState decode_projected(std::array<torch::Tensor, 4> levels);

  Msf& node(int stage, int level);  // 1-based
  static constexpr int kNodeCount = 6;

 private:
  std::vector<ConvUnit> projections_;
  std::vector<Msf> nodes_;  // stage-major, level-descending
};
TORCH_MODULE(ShrinkageDecoder);

/// Plain top-down U-shaped decoder ("Base" ablation).
class UShapeDecoderImpl : public DecoderBase {
 public:
  explicit UShapeDecoderImpl(const std::array<int, 4>& in_widths);
  DecoderGridState decode(const FeaturePyramid& pyramid) override;

 private:
  std::vector<ConvUnit> projections_;
  std::vector<ConvUnit> fuse_;
};
TORCH_MODULE(UShapeDecoder);

/// Conv3x3 + BN + ReLU, then Conv1x1 to one logit channel.
class PredHeadImpl : public torch::nn::Module {
 public:
  explicit PredHeadImpl(int in_channels = kDecoderWidth, int hidden = 64);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ConvUnit body_{nullptr};
  torch::nn::Conv2d logits_{nullptr};
};
TORCH_MODULE(PredHead);

/// Bilinear resize of stride-s logits to (height, width).
torch::Tensor upsample_to(const torch::Tensor& x, std::int64_t height, std::int64_t width);

struct InitialBranchOutput {
  std::array<torch::Tensor, 3> features;     // F_{i,1}: [B, 128, H/4, W/4]
  std::array<torch::Tensor, 3> logits;       // P_i at stride 4: [B, 1, H/4, W/4]
  std::array<torch::Tensor, 3> full_logits;  // P_i upsampled to input size
  std::array<torch::Tensor, 3> maps;         // sigmoid(full_logits)
};

enum class DecoderKind { kShrinkage, kUShape };

/// Decoder plus three prediction heads for one modality.
class ModalityBranchImpl : public torch::nn::Module {
 public:
  ModalityBranchImpl(const std::array<int, 4>& in_widths, DecoderKind kind);
  InitialBranchOutput forward(const FeaturePyramid& pyramid, std::int64_t height, std::int64_t width);

  std::shared_ptr<DecoderBase> decoder() { return decoder_; }

 private:
  std::shared_ptr<DecoderBase> decoder_;
  std::array<PredHead, 3> heads_{nullptr, nullptr, nullptr};
};
TORCH_MODULE(ModalityBranch);

/// Shared encoder + independent V/D/T branches.
class InitialExtractionNetImpl : public torch::nn::Module {
 public:
  InitialExtractionNetImpl(EncoderConfig encoder, DecoderKind kind);

  /// Inputs are [B, 3, H, W]; outputs are ordered V, D, T.
  std::array<InitialBranchOutput, 3> forward(const torch::Tensor& v, const torch::Tensor& d,
                                             const torch::Tensor& t);

  SwinEncoder& encoder() { return encoder_; }
  ModalityBranch& branch(int modality) { return branches_[modality]; }

 private:
  SwinEncoder encoder_{nullptr};
  std::array<ModalityBranch, 3> branches_{nullptr, nullptr, nullptr};
};
TORCH_MODULE(InitialExtractionNet);

}  // namespace qsf
