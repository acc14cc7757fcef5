// SPDX-License-Identifier: Apache-2.0
#include "qsf/quality_selection.hpp"

#include "qsf/errors.hpp"
#include "qsf/kernels.hpp"

namespace qsf {
namespace F = torch::nn::functional;

namespace {

void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw ShapeMismatch(std::string(what) + ": shapes differ");
}

template <typename T>
std::span<T> span_of(torch::Tensor& t) {
  return std::span<T>(t.data_ptr<float>(), static_cast<std::size_t>(t.numel()));
}

std::span<const float> cspan_of(const torch::Tensor& t) {
  return std::span<const float>(t.data_ptr<float>(), static_cast<std::size_t>(t.numel()));
}

}  // namespace

torch::Tensor pseudo_gt_high(const torch::Tensor& p_self, const torch::Tensor& p_a, const torch::Tensor& p_b,
                             const torch::Tensor& gt) {
  check_same(p_self, p_a, "pseudo_gt_high");
  check_same(p_self, p_b, "pseudo_gt_high");
  check_same(p_self, gt, "pseudo_gt_high");
  return torch::relu(p_self - (p_a + p_b) / 2) * gt;
}

torch::Tensor pseudo_gt_low(const torch::Tensor& p_self, const torch::Tensor& p_a, const torch::Tensor& p_b,
                            const torch::Tensor& gt) {
  check_same(p_self, p_a, "pseudo_gt_low");
  check_same(p_self, p_b, "pseudo_gt_low");
  check_same(p_self, gt, "pseudo_gt_low");
  return (p_self * ((p_a + p_b) / 2)) * (1 - gt);
}

std::array<PseudoGT, 2> build_pseudo_gt(const torch::Tensor& p_v, const torch::Tensor& p_d, const torch::Tensor& p_t,
                                        const torch::Tensor& gt, PseudoGtTerms terms) {
  check_same(p_v, gt, "build_pseudo_gt");
  check_same(p_d, gt, "build_pseudo_gt");
  check_same(p_t, gt, "build_pseudo_gt");
  auto prep = [](const torch::Tensor& x) { return x.detach().to(torch::kCPU, torch::kFloat32).contiguous(); };
  const auto v = prep(p_v);
  const auto d = prep(p_d);
  const auto t = prep(p_t);
  const auto g = prep(gt);

  std::array<PseudoGT, 2> out;
  const std::array<QualityModality, 2> modalities{QualityModality::kDepth, QualityModality::kThermal};
  for (int m = 0; m < 2; ++m) {
    // Depth compares against (V, T); thermal against (V, D).
    const auto& self = m == 0 ? d : t;
    const auto& other = m == 0 ? t : d;
    auto high = torch::empty_like(g);
    auto low = torch::empty_like(g);
    auto combined = torch::empty_like(g);
    kernels::parallel::pseudo_gt(cspan_of(self), cspan_of(v), cspan_of(other), cspan_of(g),
                                 {span_of<float>(high), span_of<float>(low), span_of<float>(combined)});
    if (terms == PseudoGtTerms::kHighOnly) {
      combined = high.clone();
    } else if (terms == PseudoGtTerms::kLowOnly) {
      combined = low.clone();
    }
    out[m] = PseudoGT{high, low, combined, modalities[m]};
  }
  return out;
}

std::array<PseudoGT, 2> build_pseudo_gt(const std::array<InitialBranchOutput, 3>& branches, const torch::Tensor& gt,
                                        PseudoGtTerms terms) {
  return build_pseudo_gt(branches[0].maps[2], branches[1].maps[2], branches[2].maps[2], gt, terms);
}

QualityConfig QualityConfig::toy() { return QualityConfig{}; }

QualityConfig QualityConfig::paper() {
  QualityConfig c;
  c.widths = {64, 64, 128, 256, 512};
  c.blocks = {3, 4, 6, 3};
  c.decoder_width = 64;
  return c;
}

QualityConfig QualityConfig::for_preset(ScalePreset preset) {
  return preset == ScalePreset::kToy ? toy() : paper();
}

BasicBlockImpl::BasicBlockImpl(int in, int out, int stride) {
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (stride != 1 || in != out) {
    downsample_ = register_module(
        "downsample",
        torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                              torch::nn::BatchNorm2d(out)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1_->forward(conv1_->forward(x)));
  y = bn2_->forward(conv2_->forward(y));
  const auto identity = downsample_ ? downsample_->forward(x) : x;
  return torch::relu(y + identity);
}

QualitySubnetImpl::QualitySubnetImpl(QualityConfig cfg) : cfg_(cfg) {
  const auto& w = cfg_.widths;
  stem_conv_ = register_module(
      "stem_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(9, w[0], 7).stride(2).padding(3).bias(false)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(w[0]));
  {
    // Widened first layer: a 3-channel initialization tiled over the three
    // modalities and scaled by 1/3 keeps the activation scale.
    torch::NoGradGuard guard;
    auto base = torch::empty({w[0], 3, 7, 7});
    torch::nn::init::kaiming_normal_(base, 0.0, torch::kFanOut, torch::kReLU);
    stem_conv_->weight.copy_(base.repeat({1, 3, 1, 1}) / 3.0);
  }
  int in = w[0];
  for (int s = 0; s < 4; ++s) {
    torch::nn::Sequential layer;
    for (int b = 0; b < cfg_.blocks[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      layer->push_back(BasicBlock(in, w[s + 1], stride));
      in = w[s + 1];
    }
    layers_.push_back(register_module("layer" + std::to_string(s + 1), layer));
  }
  const int dw = cfg_.decoder_width;
  top_ = register_module("top", ConvUnit(w[4], dw, 1));
  for (int k = 0; k < 4; ++k) {
    lateral_.push_back(register_module("lateral" + std::to_string(k + 1), ConvUnit(w[k], dw, 1)));
    fuse_.push_back(register_module("fuse" + std::to_string(k + 1), ConvUnit(dw, dw, 3)));
  }
  head_depth_ = register_module("head_depth", torch::nn::Conv2d(torch::nn::Conv2dOptions(dw, 1, 3).padding(1)));
  head_thermal_ = register_module("head_thermal", torch::nn::Conv2d(torch::nn::Conv2dOptions(dw, 1, 3).padding(1)));
}

QualityAwareMaps QualitySubnetImpl::forward(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t) {
  if (!v.sizes().equals(d.sizes()) || !v.sizes().equals(t.sizes())) {
    throw ShapeMismatch("qa_forward: modality batches differ in shape");
  }
  const auto h = v.size(2);
  const auto w = v.size(3);
  if (h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0) {
    throw ResolutionError("quality subnet input must be a multiple of 32");
  }
  auto x = torch::cat({v, d, t}, 1);
  std::array<torch::Tensor, 5> enc;
  enc[0] = torch::relu(stem_bn_->forward(stem_conv_->forward(x)));  // stride 2
  auto y = F::max_pool2d(enc[0], F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  for (int s = 0; s < 4; ++s) {
    y = layers_[s]->forward(y);
    enc[s + 1] = y;  // strides 4, 8, 16, 32
  }
  auto dec = top_->forward(enc[4]);
  for (int k = 3; k >= 0; --k) {
    dec = fuse_[k]->forward(upsample_to(dec, enc[k].size(2), enc[k].size(3)) + lateral_[k]->forward(enc[k]));
  }
  dec = upsample_to(dec, h, w);
  QualityAwareMaps out;
  out.depth_logits = head_depth_->forward(dec);
  out.thermal_logits = head_thermal_->forward(dec);
  out.depth = torch::sigmoid(out.depth_logits);
  out.thermal = torch::sigmoid(out.thermal_logits);
  return out;
}

std::vector<torch::Tensor> QualitySubnetImpl::trunk_parameters() {
  std::vector<torch::Tensor> out;
  for (const auto& p : named_parameters()) {
    if (p.key().rfind("head_", 0) == 0) continue;
    out.push_back(p.value());
  }
  return out;
}

QualityAwareMaps qa_forward(QualitySubnet& net, const torch::Tensor& v, const torch::Tensor& d,
                            const torch::Tensor& t) {
  return net->forward(v, d, t);
}

}  // namespace qsf
