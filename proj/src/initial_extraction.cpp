// SPDX-License-Identifier: Apache-2.0
#include "qsf/initial_extraction.hpp"

#include <numeric>

#include "qsf/errors.hpp"

namespace qsf {
namespace F = torch::nn::functional;

namespace {

constexpr int kNormGroups = 32;

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{x.size(2) * 2, x.size(3) * 2})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

void check_msf_inputs(const torch::Tensor& current, const torch::Tensor& deeper, int channels) {
  if (current.dim() != 4 || deeper.dim() != 4) throw ShapeMismatch("msf: expected [B, C, H, W] inputs");
  if (current.size(1) != channels || deeper.size(1) != channels) {
    throw ShapeMismatch("msf: channel count must be " + std::to_string(channels));
  }
  if (current.size(0) != deeper.size(0) || current.size(2) != 2 * deeper.size(2) ||
      current.size(3) != 2 * deeper.size(3)) {
    throw ShapeMismatch("msf: deeper feature must be exactly one pyramid level below");
  }
}

}  // namespace

static torch::nn::AnyModule make_norm(torch::nn::Module& owner, NormKind kind, int channels) {
  switch (kind) {
    case NormKind::kBatch:
      return torch::nn::AnyModule(owner.register_module("bn", torch::nn::BatchNorm2d(channels)));
    case NormKind::kGroup: {
      const int groups = std::gcd(channels, kNormGroups);
      return torch::nn::AnyModule(
          owner.register_module("gn", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels))));
    }
    case NormKind::kNone:
      break;
  }
  return {};
}

ConvUnitImpl::ConvUnitImpl(int in, int out, int kernel, int groups, NormKind norm, bool relu) : relu_(relu) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                        .padding(kernel / 2)
                                                        .groups(groups)
                                                        .bias(norm == NormKind::kNone)));
  norm_ = make_norm(*this, norm, out);
}

torch::Tensor ConvUnitImpl::forward(const torch::Tensor& x) {
  auto y = conv_->forward(x);
  if (!norm_.is_empty()) y = norm_.forward(y);
  return relu_ ? torch::relu(y) : y;
}

DsConvImpl::DsConvImpl(int channels, int kernel, NormKind norm) {
  const bool bias = norm == NormKind::kNone;
  depthwise_ = register_module(
      "depthwise",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, kernel).padding(kernel / 2).groups(channels).bias(bias)));
  pointwise_ = register_module("pointwise",
                               torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1).bias(bias)));
  norm_ = make_norm(*this, norm, channels);
}

torch::Tensor DsConvImpl::forward(const torch::Tensor& x) {
  auto y = pointwise_->forward(depthwise_->forward(x));
  if (!norm_.is_empty()) y = norm_.forward(y);
  return torch::relu(y);
}

MsfImpl::MsfImpl(MsfOptions options) : options_(options) {
  const int c = options.channels;
  gate_1x1 = register_module("gate_1x1", ConvUnit(c, c, 1, 1, options.norm));
  ds3 = register_module("ds3", DsConv(c, 3, options.norm));
  ds5 = register_module("ds5", DsConv(c, 5, options.norm));
  skip_1x1 = register_module("skip_1x1", ConvUnit(c, c, 1, 1, options.norm));
  out_3x3 = register_module("out_3x3", ConvUnit(c, c, 3, 1, options.norm));
}

torch::Tensor MsfImpl::forward(const torch::Tensor& current, const torch::Tensor& deeper) {
  check_msf_inputs(current, deeper, options_.channels);
  const auto up = upsample2x(deeper);
  const auto mixed = current + up;
  const auto gated = gate_1x1->forward(mixed) * ds3->forward(mixed);
  const auto gated2 = gated * ds5->forward(mixed);
  return out_3x3->forward(gated2 + skip_1x1->forward(up));
}

void set_identity_weights(Msf& msf) {
  torch::NoGradGuard guard;
  auto identity = [](torch::nn::Conv2d& conv) {
    auto& w = conv->weight;
    w.zero_();
    const auto out = w.size(0);
    const auto in_per_group = w.size(1);
    const auto kh = w.size(2) / 2;
    const auto kw = w.size(3) / 2;
    for (std::int64_t o = 0; o < out; ++o) {
      const auto i = in_per_group == 1 ? 0 : o;
      w.index_put_({o, i, kh, kw}, 1.0);
    }
    if (conv->bias.defined()) conv->bias.zero_();
  };
  identity(msf->gate_1x1->conv());
  identity(msf->ds3->depthwise());
  identity(msf->ds3->pointwise());
  identity(msf->ds5->depthwise());
  identity(msf->ds5->pointwise());
  identity(msf->skip_1x1->conv());
  identity(msf->out_3x3->conv());
}

ShrinkageDecoderImpl::ShrinkageDecoderImpl(const std::array<int, 4>& in_widths, MsfOptions options) {
  for (int j = 0; j < 4; ++j) {
    projections_.push_back(register_module("proj" + std::to_string(j + 1),
                                           ConvUnit(in_widths[j], options.channels, 1, 1, options.norm)));
  }
  // Stage 1 visits levels 3, 2, 1; stage 2 visits 2, 1; stage 3 visits 1.
  for (int stage = 1; stage <= 3; ++stage) {
    for (int level = 4 - stage; level >= 1; --level) {
      nodes_.push_back(register_module("node_s" + std::to_string(stage) + "_l" + std::to_string(level), Msf(options)));
    }
  }
}

Msf& ShrinkageDecoderImpl::node(int stage, int level) {
  int index = 0;
  for (int s = 1; s < stage; ++s) index += 4 - s;
  index += (4 - stage) - level;
  TORCH_CHECK(stage >= 1 && stage <= 3 && level >= 1 && level <= 4 - stage, "no such decoder node");
  return nodes_[static_cast<std::size_t>(index)];
}

DecoderGridState ShrinkageDecoderImpl::decode(const FeaturePyramid& pyramid) {
  std::array<torch::Tensor, 4> levels;
  for (int j = 0; j < 4; ++j) levels[j] = projections_[j]->forward(pyramid.levels[j]);
  return decode_projected(std::move(levels));
}

DecoderGridState ShrinkageDecoderImpl::decode_projected(std::array<torch::Tensor, 4> levels) {
  DecoderGridState state;
  // Each node overwrites its level in place, so the next node of the same
  // stage and every node of the next stage consume the refined value.
  for (int stage = 1; stage <= 3; ++stage) {
    for (int level = 4 - stage; level >= 1; --level) {
      levels[level - 1] = node(stage, level)->forward(levels[level - 1], levels[level]);
      state.schedule.emplace_back(stage, level);
    }
    state.stage_outputs[stage - 1] = levels[0];
  }
  return state;
}

UShapeDecoderImpl::UShapeDecoderImpl(const std::array<int, 4>& in_widths) {
  for (int j = 0; j < 4; ++j) {
    projections_.push_back(register_module("proj" + std::to_string(j + 1), ConvUnit(in_widths[j], kDecoderWidth, 1)));
  }
  for (int j = 0; j < 3; ++j) {
    fuse_.push_back(register_module("fuse" + std::to_string(j + 1), ConvUnit(kDecoderWidth, kDecoderWidth, 3)));
  }
}

DecoderGridState UShapeDecoderImpl::decode(const FeaturePyramid& pyramid) {
  std::array<torch::Tensor, 4> levels;
  for (int j = 0; j < 4; ++j) levels[j] = projections_[j]->forward(pyramid.levels[j]);
  DecoderGridState state;
  auto top = levels[3];
  std::array<torch::Tensor, 3> decoded;  // levels 3, 2, 1
  for (int j = 2; j >= 0; --j) {
    top = fuse_[j]->forward(levels[j] + upsample2x(top));
    decoded[2 - j] = top;
    state.schedule.emplace_back(1, j + 1);
  }
  // Coarse-to-fine outputs, all brought to stride 4.
  const auto h = levels[0].size(2);
  const auto w = levels[0].size(3);
  for (int i = 0; i < 3; ++i) state.stage_outputs[i] = upsample_to(decoded[i], h, w);
  return state;
}

PredHeadImpl::PredHeadImpl(int in_channels, int hidden) {
  body_ = register_module("body", ConvUnit(in_channels, hidden, 3));
  logits_ = register_module("logits", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, 1, 1)));
}

torch::Tensor PredHeadImpl::forward(const torch::Tensor& x) { return logits_->forward(body_->forward(x)); }

torch::Tensor upsample_to(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
  if (x.size(2) == height && x.size(3) == width) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{height, width})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

ModalityBranchImpl::ModalityBranchImpl(const std::array<int, 4>& in_widths, DecoderKind kind) {
  if (kind == DecoderKind::kShrinkage) {
    decoder_ = register_module("decoder", ShrinkageDecoder(in_widths).ptr());
  } else {
    decoder_ = register_module("decoder", UShapeDecoder(in_widths).ptr());
  }
  for (int i = 0; i < 3; ++i) heads_[i] = register_module("head" + std::to_string(i + 1), PredHead());
}

InitialBranchOutput ModalityBranchImpl::forward(const FeaturePyramid& pyramid, std::int64_t height,
                                                std::int64_t width) {
  const auto grid = decoder_->decode(pyramid);
  InitialBranchOutput out;
  for (int i = 0; i < 3; ++i) {
    out.features[i] = grid.stage_outputs[i];
    out.logits[i] = heads_[i]->forward(out.features[i]);
    out.full_logits[i] = upsample_to(out.logits[i], height, width);
    out.maps[i] = torch::sigmoid(out.full_logits[i]);
  }
  return out;
}

InitialExtractionNetImpl::InitialExtractionNetImpl(EncoderConfig encoder, DecoderKind kind) {
  encoder_ = register_module("encoder", SwinEncoder(encoder));
  const char* names[3] = {"branch_v", "branch_d", "branch_t"};
  for (int m = 0; m < 3; ++m) {
    branches_[m] = register_module(names[m], ModalityBranch(encoder.stage_widths, kind));
  }
}

std::array<InitialBranchOutput, 3> InitialExtractionNetImpl::forward(const torch::Tensor& v, const torch::Tensor& d,
                                                                     const torch::Tensor& t) {
  const auto pyramids = encode_shared(encoder_, v, d, t);
  std::array<InitialBranchOutput, 3> out;
  for (int m = 0; m < 3; ++m) out[m] = branches_[m]->forward(pyramids[m], v.size(2), v.size(3));
  return out;
}

}  // namespace qsf
