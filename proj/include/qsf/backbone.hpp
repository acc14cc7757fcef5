// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical shifted-window attention encoder. One instance is shared by the
// visible, depth and thermal inputs; it emits four feature maps at strides
// 4, 8, 16 and 32.
#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>

namespace qsf {

enum class ScalePreset { kToy, kPaper };

std::string to_string(ScalePreset preset);
ScalePreset parse_scale_preset(const std::string& name);

struct EncoderConfig {
  int patch_size = 4;
  int window_size = 4;
  std::array<int, 4> stage_depths{2, 2, 2, 2};
  std::array<int, 4> stage_widths{32, 64, 128, 256};
  std::array<int, 4> num_heads{1, 2, 4, 8};
  double mlp_ratio = 4.0;
  ScalePreset scale_preset = ScalePreset::kToy;

  static EncoderConfig toy();
  static EncoderConfig paper();
  static EncoderConfig for_preset(ScalePreset preset);

  /// Throws ResolutionError unless `resolution` is a positive multiple of
  /// patch_size * 8.
  void check_resolution(std::int64_t height, std::int64_t width) const;
};

/// Four levels; level i is [B, stage_widths[i], H / (4 * 2^i), W / (4 * 2^i)].
struct FeaturePyramid {
  std::array<torch::Tensor, 4> levels;
};

/// Fills `t` with a normal(0, std) draw truncated to [-2 std, 2 std].
void trunc_normal_(torch::Tensor t, double std);

class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int dim, int window_size, int num_heads);

  // windows: [num_windows * B, w * w, C] for an effective window w <= window_size.
  torch::Tensor forward(const torch::Tensor& windows, int window, const torch::Tensor& mask);

 private:
  int dim_;
  int window_size_;
  int num_heads_;
  double scale_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
  torch::Tensor relative_bias_table_;
};
TORCH_MODULE(WindowAttention);

class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(int dim, int num_heads, int window_size, bool shifted, double mlp_ratio);

  // x: [B, H * W, C]
  torch::Tensor forward(const torch::Tensor& x, std::int64_t height, std::int64_t width);

 private:
  int window_size_;
  bool shifted_;
  torch::nn::LayerNorm norm1_{nullptr};
  WindowAttention attn_{nullptr};
  torch::nn::LayerNorm norm2_{nullptr};
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(SwinBlock);

class PatchMergingImpl : public torch::nn::Module {
 public:
  explicit PatchMergingImpl(int dim);
  torch::Tensor forward(const torch::Tensor& x, std::int64_t height, std::int64_t width);

 private:
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear reduction_{nullptr};
};
TORCH_MODULE(PatchMerging);

class SwinEncoderImpl : public torch::nn::Module {
 public:
  explicit SwinEncoderImpl(EncoderConfig cfg);

  /// image: [B, 3, H, W].
  FeaturePyramid forward(const torch::Tensor& image);

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  torch::nn::Conv2d patch_embed_{nullptr};
  torch::nn::LayerNorm embed_norm_{nullptr};
  std::vector<std::vector<SwinBlock>> blocks_;
  std::vector<PatchMerging> merges_;
  std::vector<torch::nn::LayerNorm> out_norms_;
};
TORCH_MODULE(SwinEncoder);

/// Single-image encode.
FeaturePyramid encode(SwinEncoder& encoder, const torch::Tensor& image);

/// Encodes three equally sized modality batches with the one parameter set.
std::array<FeaturePyramid, 3> encode_shared(SwinEncoder& encoder, const torch::Tensor& v,
                                            const torch::Tensor& d, const torch::Tensor& t);

/// Total element count over the module's parameters.
std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace qsf
