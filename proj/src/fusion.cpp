// SPDX-License-Identifier: Apache-2.0
#include "qsf/fusion.hpp"

#include "qsf/errors.hpp"

namespace qsf {
namespace F = torch::nn::functional;

PurifiedFeature purify(const torch::Tensor& f_primary, const torch::Tensor& f_v, const torch::Tensor& f_other,
                       const torch::Tensor& qa, PurifyMode mode) {
  if (!f_primary.sizes().equals(f_v.sizes()) || !f_primary.sizes().equals(f_other.sizes())) {
    throw ShapeMismatch("purify: feature shapes differ");
  }
  if (qa.dim() != 4 || qa.size(1) != 1 || qa.size(0) != f_v.size(0) || qa.size(2) != f_v.size(2) ||
      qa.size(3) != f_v.size(3)) {
    throw ShapeMismatch("purify: quality map must be [B, 1, h, w] at the feature resolution");
  }
  PurifiedFeature out;
  out.w1 = mode == PurifyMode::kNoHighQuality ? f_primary : (f_primary - (f_v + f_other) / 2) * qa;
  out.w2 = mode == PurifyMode::kNoLowQuality ? f_v : f_v * (1 - qa);
  out.w = out.w1 + out.w2;
  return out;
}

torch::Tensor downsample_quality(const torch::Tensor& qa, std::int64_t height, std::int64_t width) {
  return upsample_to(qa, height, width);
}

torch::Tensor efficient_attention_context(const torch::Tensor& k, const torch::Tensor& v, int heads) {
  const auto b = k.size(0);
  const auto c = k.size(1);
  const auto n = k.size(2);
  if (heads <= 0 || c % heads != 0) throw HeadDivisibility("channels not divisible by attention heads");
  const auto hc = c / heads;
  auto kh = torch::softmax(k.reshape({b, heads, hc, n}), -1);  // over tokens
  auto vh = v.reshape({b, heads, v.size(1) / heads, n});
  return torch::matmul(kh, vh.transpose(-2, -1));  // [B, heads, hc, hv]
}

torch::Tensor efficient_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int heads) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3) throw ShapeMismatch("efficient_attention expects [B, C, N]");
  const auto b = q.size(0);
  const auto c = q.size(1);
  const auto n = q.size(2);
  if (heads <= 0 || c % heads != 0 || v.size(1) % heads != 0) {
    throw HeadDivisibility("channels not divisible by attention heads");
  }
  const auto context = efficient_attention_context(k, v, heads);
  auto qh = torch::softmax(q.reshape({b, heads, c / heads, n}), 2);  // over channels
  // [B, heads, hv, hc] x [B, heads, hc, N]
  return torch::matmul(context.transpose(-2, -1), qh).reshape({b, v.size(1), n});
}

EfficientAttentionImpl::EfficientAttentionImpl(int channels, int heads) : heads_(heads) {
  if (heads <= 0 || channels % heads != 0) throw HeadDivisibility("channels not divisible by attention heads");
  queries_ = register_module("queries", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
  keys_ = register_module("keys", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
  values_ = register_module("values", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
  reprojection_ = register_module("reprojection", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor EfficientAttentionImpl::forward(const torch::Tensor& q_feat, const torch::Tensor& kv_feat) {
  if (!q_feat.sizes().equals(kv_feat.sizes())) throw ShapeMismatch("attention inputs differ in shape");
  const auto b = q_feat.size(0);
  const auto c = q_feat.size(1);
  const auto h = q_feat.size(2);
  const auto w = q_feat.size(3);
  auto q = queries_->forward(q_feat).reshape({b, c, h * w});
  auto k = keys_->forward(kv_feat).reshape({b, c, h * w});
  auto v = values_->forward(kv_feat).reshape({b, c, h * w});
  auto attended = efficient_attention(q, k, v, heads_).reshape({b, c, h, w});
  return q_feat + reprojection_->forward(attended);
}

FeedForwardImpl::FeedForwardImpl(int channels, int expansion) {
  fc1_ = register_module("fc1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels * expansion, 1)));
  fc2_ = register_module("fc2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels * expansion, channels, 1)));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
  return x + fc2_->forward(torch::relu(fc1_->forward(x)));
}

CbamImpl::CbamImpl(CbamOptions options) {
  const int hidden = std::max(1, options.channels / options.reduction);
  mlp_in = register_module("mlp_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels, hidden, 1)));
  mlp_out = register_module("mlp_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, options.channels, 1)));
  spatial = register_module(
      "spatial",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, options.spatial_kernel).padding(options.spatial_kernel / 2)));
}

torch::Tensor CbamImpl::forward(const torch::Tensor& x) {
  auto mlp = [&](const torch::Tensor& d) { return mlp_out->forward(torch::relu(mlp_in->forward(d))); };
  const auto avg = x.mean({2, 3}, true);
  const auto mx = x.amax({2, 3}, true);
  const auto channel_gated = x * torch::sigmoid(mlp(avg) + mlp(mx));
  const auto desc = torch::cat({channel_gated.mean(1, true), channel_gated.amax(1, true)}, 1);
  return channel_gated * torch::sigmoid(spatial->forward(desc));
}

IiaBranchImpl::IiaBranchImpl(int channels, int heads) {
  self_attention_ = register_module("self_attention", EfficientAttention(channels, heads));
  cross_attention_ = register_module("cross_attention", EfficientAttention(channels, heads));
  feed_forward_ = register_module("feed_forward", FeedForward(channels));
}

torch::Tensor IiaBranchImpl::forward(const torch::Tensor& x, const torch::Tensor& partner) {
  const auto sa = self_attention_->forward(x, x);
  return feed_forward_->forward(cross_attention_->forward(sa, partner));
}

IiaImpl::IiaImpl(int channels, int heads) {
  branch_vd = register_module("branch_vd", IiaBranch(channels, heads));
  branch_vt = register_module("branch_vt", IiaBranch(channels, heads));
  CbamOptions opts;
  opts.channels = channels;
  cbam = register_module("cbam", Cbam(opts));
}

torch::Tensor IiaImpl::fuse(const torch::Tensor& w_vd, const torch::Tensor& w_vt,
                            const std::optional<torch::Tensor>& prev) {
  if (!w_vd.sizes().equals(w_vt.sizes())) throw ShapeMismatch("iia: pair features differ in shape");
  auto sum = branch_vd->forward(w_vd, w_vt) + branch_vt->forward(w_vt, w_vd);
  if (prev) {
    if (!prev->sizes().equals(w_vd.sizes())) throw ShapeMismatch("iia: previous fused feature differs in shape");
    sum = sum + *prev;
  }
  return cbam->forward(sum);
}

SumConvFusionImpl::SumConvFusionImpl(int channels) {
  conv1_ = register_module("conv1", ConvUnit(channels, channels, 3));
  conv2_ = register_module("conv2", ConvUnit(channels, channels, 3));
}

torch::Tensor SumConvFusionImpl::fuse(const torch::Tensor& w_vd, const torch::Tensor& w_vt,
                                      const std::optional<torch::Tensor>& prev) {
  if (!w_vd.sizes().equals(w_vt.sizes())) throw ShapeMismatch("fusion: pair features differ in shape");
  auto sum = w_vd + w_vt;
  if (prev) sum = sum + *prev;
  return conv2_->forward(conv1_->forward(sum));
}

torch::Tensor average_pool3x3(const torch::Tensor& x) {
  return F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(1).padding(1).count_include_pad(false));
}

torch::Tensor high_pass3x3(const torch::Tensor& x) {
  // Mean of (x - neighbour) over in-bounds neighbours; exact zero on flat input.
  const auto h = x.size(2);
  const auto w = x.size(3);
  const auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}));
  const auto valid = F::pad(torch::ones({1, 1, h, w}, x.options()), F::PadFuncOptions({1, 1, 1, 1}));
  auto sum = torch::zeros_like(x);
  auto count = torch::zeros({1, 1, h, w}, x.options());
  for (int dy = 0; dy < 3; ++dy) {
    for (int dx = 0; dx < 3; ++dx) {
      if (dy == 1 && dx == 1) continue;
      const auto m = valid.slice(2, dy, dy + h).slice(3, dx, dx + w);
      sum = sum + (x - padded.slice(2, dy, dy + h).slice(3, dx, dx + w)) * m;
      count = count + m;
    }
  }
  return sum / (count + 1.0);
}

EdgeRefineImpl::EdgeRefineImpl(EdgeRefineOptions options) {
  const int c = options.channels;
  in_proj = register_module("in_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
  edge_conv = register_module("edge_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 1, 1).bias(!options.normalize)));
  if (options.normalize) edge_norm_ = register_module("edge_bn", torch::nn::BatchNorm2d(1));
  CbamOptions cb;
  cb.channels = c;
  cbam = register_module("cbam", Cbam(cb));
}

EdgeRefineResult EdgeRefineImpl::forward(const torch::Tensor& w) {
  EdgeRefineResult out;
  const auto projected = in_proj->forward(w);
  out.residual = high_pass3x3(projected);
  auto logits = edge_conv->forward(out.residual);
  if (edge_norm_) logits = edge_norm_->forward(logits);
  out.edge.edge_logits = logits;
  out.edge.edge_map = torch::sigmoid(logits);
  out.feature = cbam->forward(projected + projected * out.edge.edge_map);
  return out;
}

FusionNetImpl::FusionNetImpl(FusionConfig cfg) : cfg_(cfg) {
  for (int i = 0; i < 3; ++i) {
    const std::string name = "stage" + std::to_string(i + 1);
    if (cfg_.use_iia) {
      stages_[i] = register_module(name, Iia(cfg_.channels, cfg_.heads).ptr());
    } else {
      stages_[i] = register_module(name, SumConvFusion(cfg_.channels).ptr());
    }
  }
  if (cfg_.use_edge) {
    EdgeRefineOptions er;
    er.channels = cfg_.channels;
    edge_refine_ = register_module("edge_refine", EdgeRefine(er));
  }
  for (int i = cfg_.use_edge ? 0 : 1; i < 4; ++i) {
    heads_[i] = register_module("head" + std::to_string(i), PredHead(cfg_.channels));
  }
}

FusionOutput FusionNetImpl::forward(const std::array<InitialBranchOutput, 3>& initial, const QualityAwareMaps* quality,
                                    std::int64_t height, std::int64_t width) {
  if (cfg_.use_quality && quality == nullptr) throw ShapeMismatch("fusion: quality maps are required");
  const auto fh = initial[0].features[0].size(2);
  const auto fw = initial[0].features[0].size(3);

  torch::Tensor qd;
  torch::Tensor qt;
  if (cfg_.use_quality) {
    qd = downsample_quality(quality->depth, fh, fw);
    qt = downsample_quality(quality->thermal, fh, fw);
  }
  std::array<torch::Tensor, 3> w_vd;
  std::array<torch::Tensor, 3> w_vt;
  for (int i = 0; i < 3; ++i) {
    const auto& fv = initial[0].features[i];
    const auto& fd = initial[1].features[i];
    const auto& ft = initial[2].features[i];
    if (cfg_.use_quality) {
      w_vd[i] = purify(fd, fv, ft, qd, cfg_.purify_mode).w;
      w_vt[i] = purify(ft, fv, fd, qt, cfg_.purify_mode).w;
    } else {
      w_vd[i] = fv + fd + ft;
      w_vt[i] = w_vd[i];
    }
  }

  FusionOutput out;
  std::optional<torch::Tensor> prev;
  if (cfg_.order == CascadeOrder::kDescending) {
    for (int i = 3; i >= 1; --i) {
      out.fused[i] = stages_[i - 1]->fuse(w_vd[i - 1], w_vt[i - 1], prev);
      prev = out.fused[i];
    }
  } else {
    for (int i = 1; i <= 3; ++i) {
      out.fused[i] = stages_[i - 1]->fuse(w_vd[i - 1], w_vt[i - 1], prev);
      prev = out.fused[i];
    }
  }
  if (cfg_.use_edge) {
    auto refined = edge_refine_->forward(out.fused[1]);
    out.fused[0] = refined.feature;
    out.edge = refined.edge;
  }
  for (int i = cfg_.use_edge ? 0 : 1; i < 4; ++i) {
    out.logits[i] = heads_[i]->forward(out.fused[i]);
    out.full_logits[i] = upsample_to(out.logits[i], height, width);
  }
  out.saliency = torch::sigmoid(out.full_logits[cfg_.use_edge ? 0 : 1]);
  return out;
}

}  // namespace qsf
