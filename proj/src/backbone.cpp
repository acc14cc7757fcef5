// SPDX-License-Identifier: Apache-2.0
#include "qsf/backbone.hpp"

#include <cmath>

#include "qsf/errors.hpp"

namespace qsf {
namespace F = torch::nn::functional;

namespace {

torch::Tensor relative_position_index(int window, int table_window) {
  // Index into a (2 * table_window - 1)^2 table for a window x window grid.
  const int n = window * window;
  auto index = torch::empty({n, n}, torch::kLong);
  auto acc = index.accessor<std::int64_t, 2>();
  const int span = 2 * table_window - 1;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int dy = i / window - j / window + table_window - 1;
      const int dx = i % window - j % window + table_window - 1;
      acc[i][j] = dy * span + dx;
    }
  }
  return index;
}

// Attention mask for shifted windows over a padded hp x wp grid:
// [num_windows, w*w, w*w] with 0 inside a region and -100 across regions.
torch::Tensor shifted_window_mask(std::int64_t hp, std::int64_t wp, int window, int shift) {
  auto img = torch::zeros({hp, wp}, torch::kFloat32);
  auto acc = img.accessor<float, 2>();
  auto region = [&](std::int64_t v, std::int64_t extent) {
    if (v < extent - window) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  for (std::int64_t y = 0; y < hp; ++y) {
    for (std::int64_t x = 0; x < wp; ++x) acc[y][x] = static_cast<float>(region(y, hp) * 3 + region(x, wp));
  }
  auto windows = img.view({hp / window, window, wp / window, window})
                     .permute({0, 2, 1, 3})
                     .reshape({-1, window * window});
  auto diff = windows.unsqueeze(1) - windows.unsqueeze(2);
  return torch::where(diff != 0, torch::full_like(diff, -100.0f), torch::zeros_like(diff));
}

}  // namespace

std::string to_string(ScalePreset preset) { return preset == ScalePreset::kToy ? "toy" : "paper"; }

ScalePreset parse_scale_preset(const std::string& name) {
  if (name == "toy") return ScalePreset::kToy;
  if (name == "paper") return ScalePreset::kPaper;
  throw ConfigError("unknown scale preset '" + name + "' (expected toy or paper)");
}

EncoderConfig EncoderConfig::toy() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.window_size = 12;
  c.stage_depths = {2, 2, 18, 2};
  c.stage_widths = {128, 256, 512, 1024};
  c.num_heads = {4, 8, 16, 32};
  c.scale_preset = ScalePreset::kPaper;
  return c;
}

EncoderConfig EncoderConfig::for_preset(ScalePreset preset) {
  return preset == ScalePreset::kToy ? toy() : paper();
}

void EncoderConfig::check_resolution(std::int64_t height, std::int64_t width) const {
  const std::int64_t unit = static_cast<std::int64_t>(patch_size) * 8;
  if (height <= 0 || width <= 0 || height % unit != 0 || width % unit != 0) {
    throw ResolutionError("input " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not a multiple of " + std::to_string(unit));
  }
}

void trunc_normal_(torch::Tensor t, double std) {
  torch::NoGradGuard guard;
  t.normal_(0.0, std);
  for (int iter = 0; iter < 64; ++iter) {
    auto outside = t.abs() > 2.0 * std;
    if (!outside.any().item<bool>()) return;
    t.masked_scatter_(outside, torch::randn({outside.sum().item<std::int64_t>()}, t.options()) * std);
  }
  t.clamp_(-2.0 * std, 2.0 * std);
}

WindowAttentionImpl::WindowAttentionImpl(int dim, int window_size, int num_heads)
    : dim_(dim), window_size_(window_size), num_heads_(num_heads) {
  if (dim % num_heads != 0) throw HeadDivisibility("embedding width not divisible by head count");
  scale_ = 1.0 / std::sqrt(static_cast<double>(dim / num_heads));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  const int span = 2 * window_size - 1;
  relative_bias_table_ = register_parameter("relative_bias_table", torch::zeros({span * span, num_heads}));
  trunc_normal_(relative_bias_table_, 0.02);
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& windows, int window, const torch::Tensor& mask) {
  const auto bw = windows.size(0);
  const auto n = windows.size(1);
  const auto head_dim = dim_ / num_heads_;
  auto qkv = qkv_->forward(windows).reshape({bw, n, 3, num_heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0] * scale_;
  auto k = qkv[1];
  auto v = qkv[2];
  auto attn = torch::matmul(q, k.transpose(-2, -1));  // [bw, heads, n, n]

  const auto index = relative_position_index(window, window_size_).to(windows.device());
  auto bias = relative_bias_table_.index_select(0, index.view({-1})).view({n, n, num_heads_}).permute({2, 0, 1});
  attn = attn + bias.unsqueeze(0);
  if (mask.defined()) {
    const auto nw = mask.size(0);
    attn = attn.view({bw / nw, nw, num_heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
    attn = attn.view({bw, num_heads_, n, n});
  }
  attn = torch::softmax(attn, -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({bw, n, dim_});
  return proj_->forward(out);
}

SwinBlockImpl::SwinBlockImpl(int dim, int num_heads, int window_size, bool shifted, double mlp_ratio)
    : window_size_(window_size), shifted_(shifted) {
  const int hidden = static_cast<int>(dim * mlp_ratio);
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", WindowAttention(dim, window_size, num_heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
  const auto b = x.size(0);
  const auto c = x.size(2);
  // Windows never exceed the token grid; a grid that fits in one window is
  // not shifted.
  const int window = static_cast<int>(std::min<std::int64_t>({window_size_, height, width}));
  const int shift = (shifted_ && std::min(height, width) > window_size_) ? window / 2 : 0;

  auto h = norm1_->forward(x).view({b, height, width, c});
  const auto pad_h = (window - height % window) % window;
  const auto pad_w = (window - width % window) % window;
  if (pad_h > 0 || pad_w > 0) h = F::pad(h, F::PadFuncOptions({0, 0, 0, pad_w, 0, pad_h}));
  const auto hp = height + pad_h;
  const auto wp = width + pad_w;

  torch::Tensor mask;
  if (shift > 0) {
    h = torch::roll(h, {-shift, -shift}, {1, 2});
    mask = shifted_window_mask(hp, wp, window, shift).to(x.device());
  }
  auto windows = h.view({b, hp / window, window, wp / window, window, c})
                     .permute({0, 1, 3, 2, 4, 5})
                     .reshape({-1, window * window, c});
  auto attended = attn_->forward(windows, window, mask);
  h = attended.view({b, hp / window, wp / window, window, window, c})
          .permute({0, 1, 3, 2, 4, 5})
          .reshape({b, hp, wp, c});
  if (shift > 0) h = torch::roll(h, {shift, shift}, {1, 2});
  if (pad_h > 0 || pad_w > 0) h = h.slice(1, 0, height).slice(2, 0, width);
  auto y = x + h.reshape({b, height * width, c});
  return y + fc2_->forward(F::gelu(fc1_->forward(norm2_->forward(y))));
}

PatchMergingImpl::PatchMergingImpl(int dim) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({4 * dim})));
  reduction_ = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(4 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
  const auto b = x.size(0);
  const auto c = x.size(2);
  auto g = x.view({b, height, width, c});
  auto x0 = g.slice(1, 0, height, 2).slice(2, 0, width, 2);
  auto x1 = g.slice(1, 1, height, 2).slice(2, 0, width, 2);
  auto x2 = g.slice(1, 0, height, 2).slice(2, 1, width, 2);
  auto x3 = g.slice(1, 1, height, 2).slice(2, 1, width, 2);
  auto merged = torch::cat({x0, x1, x2, x3}, -1).view({b, -1, 4 * c});
  return reduction_->forward(norm_->forward(merged));
}

SwinEncoderImpl::SwinEncoderImpl(EncoderConfig cfg) : cfg_(cfg) {
  for (int s = 0; s < 3; ++s) {
    if (cfg_.stage_widths[s + 1] != 2 * cfg_.stage_widths[s]) {
      throw ConfigError("encoder stage widths must double per stage");
    }
  }
  const int c0 = cfg_.stage_widths[0];
  patch_embed_ = register_module(
      "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, c0, cfg_.patch_size).stride(cfg_.patch_size)));
  embed_norm_ = register_module("embed_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c0})));
  blocks_.resize(4);
  for (int s = 0; s < 4; ++s) {
    const int dim = cfg_.stage_widths[s];
    for (int j = 0; j < cfg_.stage_depths[s]; ++j) {
      blocks_[s].push_back(register_module(
          "stage" + std::to_string(s) + "_block" + std::to_string(j),
          SwinBlock(dim, cfg_.num_heads[s], cfg_.window_size, j % 2 == 1, cfg_.mlp_ratio)));
    }
    out_norms_.push_back(
        register_module("out_norm" + std::to_string(s), torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}))));
    if (s < 3) merges_.push_back(register_module("merge" + std::to_string(s), PatchMerging(dim)));
  }

  torch::NoGradGuard guard;
  for (auto& p : named_parameters()) {
    const auto& name = p.key();
    auto& t = p.value();
    if (name.find("norm") != std::string::npos) continue;  // LayerNorm keeps its 1/0 init
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0) {
      t.zero_();
    } else if (name.find("relative_bias_table") == std::string::npos) {
      trunc_normal_(t, 0.02);
    }
  }
}

FeaturePyramid SwinEncoderImpl::forward(const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 4 && image.size(1) == 3, "encoder expects [B, 3, H, W]");
  cfg_.check_resolution(image.size(2), image.size(3));
  auto x = patch_embed_->forward(image);  // [B, C, H/4, W/4]
  std::int64_t h = x.size(2);
  std::int64_t w = x.size(3);
  const auto b = x.size(0);
  x = embed_norm_->forward(x.flatten(2).transpose(1, 2));  // [B, N, C]

  FeaturePyramid pyramid;
  for (int s = 0; s < 4; ++s) {
    for (auto& block : blocks_[s]) x = block->forward(x, h, w);
    const auto c = x.size(2);
    pyramid.levels[s] = out_norms_[s]->forward(x).transpose(1, 2).reshape({b, c, h, w}).contiguous();
    if (s < 3) {
      x = merges_[s]->forward(x, h, w);
      h /= 2;
      w /= 2;
    }
  }
  return pyramid;
}

FeaturePyramid encode(SwinEncoder& encoder, const torch::Tensor& image) { return encoder->forward(image); }

std::array<FeaturePyramid, 3> encode_shared(SwinEncoder& encoder, const torch::Tensor& v, const torch::Tensor& d,
                                            const torch::Tensor& t) {
  if (!v.sizes().equals(d.sizes()) || !v.sizes().equals(t.sizes())) {
    throw ShapeMismatch("encode_shared: modality batches differ in shape");
  }
  // One pass over the concatenated batch; every op is per-sample so this
  // equals three separate passes through the same parameters.
  const auto b = v.size(0);
  auto joint = encoder->forward(torch::cat({v, d, t}, 0));
  std::array<FeaturePyramid, 3> out;
  for (int level = 0; level < 4; ++level) {
    auto parts = joint.levels[level].split(b, 0);
    for (int m = 0; m < 3; ++m) out[m].levels[level] = parts[m];
  }
  return out;
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace qsf
