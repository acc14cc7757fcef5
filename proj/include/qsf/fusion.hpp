// SPDX-License-Identifier: Apache-2.0
//
// Region-guided selective fusion: quality-guided purification of the
// visible-depth and visible-thermal feature pairs, the intra-/inter-modality
// attention (IIA) cascade, edge refinement (ER) and the fused prediction
// heads.
#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>

#include "qsf/initial_extraction.hpp"
#include "qsf/quality_selection.hpp"

namespace qsf {

enum class FusionPair { kVisibleDepth, kVisibleThermal };

/// Which purification terms are kept. kNoLowQuality replaces w2 by f_v and
/// kNoHighQuality replaces w1 by f_primary.
enum class PurifyMode { kFull, kNoLowQuality, kNoHighQuality };

struct PurifiedFeature {
  torch::Tensor w;
  torch::Tensor w1;
  torch::Tensor w2;
  FusionPair pair = FusionPair::kVisibleDepth;
  int stage = 1;
};

/// w1 = (f_primary - (f_v + f_other) / 2) * qa, w2 = f_v * (1 - qa),
/// w = w1 + w2. `qa` is [B, 1, h, w] at the feature resolution.
PurifiedFeature purify(const torch::Tensor& f_primary, const torch::Tensor& f_v, const torch::Tensor& f_other,
                       const torch::Tensor& qa, PurifyMode mode = PurifyMode::kFull);

/// Bilinear resize of a full-resolution quality map to the feature stride.
torch::Tensor downsample_quality(const torch::Tensor& qa, std::int64_t height, std::int64_t width);

/// Per-head context softmax_tokens(K)^T V; k, v are [B, C, N]. Returns
/// [B, heads, C / heads, C / heads].
torch::Tensor efficient_attention_context(const torch::Tensor& k, const torch::Tensor& v, int heads);

/// Linear attention softmax_channels(Q) (softmax_tokens(K)^T V), computed per
/// head; q, k, v are [B, C, N]. Returns [B, C, N].
torch::Tensor efficient_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int heads);

/// Projected efficient attention with reprojection and residual to the query.
class EfficientAttentionImpl : public torch::nn::Module {
 public:
  EfficientAttentionImpl(int channels, int heads);
  /// q_feat, kv_feat: [B, C, H, W]; kv_feat may equal q_feat (self-attention).
  torch::Tensor forward(const torch::Tensor& q_feat, const torch::Tensor& kv_feat);

 private:
  int heads_;
  torch::nn::Conv2d queries_{nullptr};
  torch::nn::Conv2d keys_{nullptr};
  torch::nn::Conv2d values_{nullptr};
  torch::nn::Conv2d reprojection_{nullptr};
};
TORCH_MODULE(EfficientAttention);

/// x + Conv1x1(ReLU(Conv1x1(x))) with a 4x expansion.
class FeedForwardImpl : public torch::nn::Module {
 public:
  explicit FeedForwardImpl(int channels, int expansion = 4);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d fc1_{nullptr};
  torch::nn::Conv2d fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

struct CbamOptions {
  int channels = kDecoderWidth;
  int reduction = 16;
  int spatial_kernel = 7;
};

/// Channel gate (shared MLP over avg- and max-pooled descriptors) followed by
/// a spatial gate (conv over channelwise mean and max maps).
class CbamImpl : public torch::nn::Module {
 public:
  explicit CbamImpl(CbamOptions options = {});
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d mlp_in{nullptr};
  torch::nn::Conv2d mlp_out{nullptr};
  torch::nn::Conv2d spatial{nullptr};
};
TORCH_MODULE(Cbam);

/// One IIA branch: FF(CA(SA(x), partner)).
class IiaBranchImpl : public torch::nn::Module {
 public:
  IiaBranchImpl(int channels, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& partner);

 private:
  EfficientAttention self_attention_{nullptr};
  EfficientAttention cross_attention_{nullptr};
  FeedForward feed_forward_{nullptr};
};
TORCH_MODULE(IiaBranch);

/// Stage fusion module interface: IIA or the sum+conv replacement.
class StageFusionBase : public torch::nn::Module {
 public:
  virtual torch::Tensor fuse(const torch::Tensor& w_vd, const torch::Tensor& w_vt,
                             const std::optional<torch::Tensor>& prev) = 0;
};

class IiaImpl : public StageFusionBase {
 public:
  IiaImpl(int channels = kDecoderWidth, int heads = 4);
  torch::Tensor fuse(const torch::Tensor& w_vd, const torch::Tensor& w_vt,
                     const std::optional<torch::Tensor>& prev) override;

  IiaBranch branch_vd{nullptr};
  IiaBranch branch_vt{nullptr};
  Cbam cbam{nullptr};
};
TORCH_MODULE(Iia);

/// "w/o IIA": element-wise sum followed by two conv units.
class SumConvFusionImpl : public StageFusionBase {
 public:
  explicit SumConvFusionImpl(int channels = kDecoderWidth);
  torch::Tensor fuse(const torch::Tensor& w_vd, const torch::Tensor& w_vt,
                     const std::optional<torch::Tensor>& prev) override;

 private:
  ConvUnit conv1_{nullptr};
  ConvUnit conv2_{nullptr};
};
TORCH_MODULE(SumConvFusion);

struct EdgeOutput {
  torch::Tensor edge_logits;  // [B, 1, H/4, W/4]
  torch::Tensor edge_map;     // sigmoid(edge_logits)
};

struct EdgeRefineResult {
  torch::Tensor feature;   // W_f^0
  torch::Tensor residual;  // W' - AP3x3(W'), before the edge conv
  EdgeOutput edge;
};

struct EdgeRefineOptions {
  int channels = kDecoderWidth;
  bool normalize = true;
};

/// W' = Conv1x1(w); R = W' - AP3x3(W'); e = Convs1x1(R);
/// W'' = W' + W' * sigmoid(e); out = CBAM(W'').
class EdgeRefineImpl : public torch::nn::Module {
 public:
  explicit EdgeRefineImpl(EdgeRefineOptions options = {});
  EdgeRefineResult forward(const torch::Tensor& w);

  torch::nn::Conv2d in_proj{nullptr};
  torch::nn::Conv2d edge_conv{nullptr};
  Cbam cbam{nullptr};

 private:
  torch::nn::BatchNorm2d edge_norm_{nullptr};
};
TORCH_MODULE(EdgeRefine);

/// 3x3 average pool, stride 1, padding 1, averaging only in-bounds pixels.
torch::Tensor average_pool3x3(const torch::Tensor& x);

/// x - average_pool3x3(x), computed from neighbour differences.
torch::Tensor high_pass3x3(const torch::Tensor& x);

enum class CascadeOrder { kDescending, kAscending };

struct FusionConfig {
  int channels = kDecoderWidth;
  int heads = 4;
  bool use_quality = true;   // false: "w/o QA" sums the three initial features
  bool use_iia = true;       // false: "w/o IIA"
  bool use_edge = true;      // false: "w/o ER"
  PurifyMode purify_mode = PurifyMode::kFull;
  CascadeOrder order = CascadeOrder::kDescending;
};

struct FusionOutput {
  // P_f^i for i = 0..3 at stride 4 and at input resolution; entry 0 is
  // undefined when edge refinement is disabled.
  std::array<torch::Tensor, 4> logits;
  std::array<torch::Tensor, 4> full_logits;
  std::optional<EdgeOutput> edge;
  std::array<torch::Tensor, 4> fused;  // W_f^i
  torch::Tensor saliency;  // deployed map in [0, 1] at input resolution
};

class FusionNetImpl : public torch::nn::Module {
 public:
  explicit FusionNetImpl(FusionConfig cfg);

  /// `quality` may be empty when cfg.use_quality is false.
  FusionOutput forward(const std::array<InitialBranchOutput, 3>& initial, const QualityAwareMaps* quality,
                       std::int64_t height, std::int64_t width);

  const FusionConfig& config() const { return cfg_; }
  std::shared_ptr<StageFusionBase> stage_module(int stage) { return stages_[stage - 1]; }

 private:
  FusionConfig cfg_;
  std::array<std::shared_ptr<StageFusionBase>, 3> stages_;
  EdgeRefine edge_refine_{nullptr};
  std::array<PredHead, 4> heads_{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(FusionNet);

}  // namespace qsf
