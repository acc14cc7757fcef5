// SPDX-License-Identifier: Apache-2.0
#include "qsf/model.hpp"

#include "qsf/errors.hpp"

namespace qsf {

std::string to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::kFull: return "full";
    case Ablation::kBase: return "base";
    case Ablation::kNoQa: return "no_qa";
    case Ablation::kNoLq: return "no_lq";
    case Ablation::kNoHq: return "no_hq";
    case Ablation::kNoIia: return "no_iia";
    case Ablation::kNoEr: return "no_er";
  }
  return "full";
}

Ablation parse_ablation(const std::string& name) {
  for (const auto a : {Ablation::kFull, Ablation::kBase, Ablation::kNoQa, Ablation::kNoLq, Ablation::kNoHq,
                       Ablation::kNoIia, Ablation::kNoEr}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown ablation '" + name + "'");
}

std::string to_string(CascadeOrder order) {
  return order == CascadeOrder::kDescending ? "descending" : "ascending";
}

CascadeOrder parse_cascade_order(const std::string& name) {
  if (name == "descending") return CascadeOrder::kDescending;
  if (name == "ascending") return CascadeOrder::kAscending;
  throw ConfigError("unknown cascade order '" + name + "'");
}

ModelConfig ModelConfig::make(ScalePreset preset, Ablation ablation, CascadeOrder order) {
  ModelConfig c;
  c.preset = preset;
  c.ablation = ablation;
  c.encoder = EncoderConfig::for_preset(preset);
  c.quality = QualityConfig::for_preset(preset);
  c.decoder = ablation == Ablation::kBase ? DecoderKind::kUShape : DecoderKind::kShrinkage;
  c.fusion.order = order;
  c.fusion.use_quality = ablation != Ablation::kNoQa;
  c.fusion.use_iia = ablation != Ablation::kNoIia;
  c.fusion.use_edge = ablation != Ablation::kNoEr;
  if (ablation == Ablation::kNoLq) c.fusion.purify_mode = PurifyMode::kNoLowQuality;
  if (ablation == Ablation::kNoHq) c.fusion.purify_mode = PurifyMode::kNoHighQuality;
  return c;
}

PseudoGtTerms ModelConfig::pseudo_gt_terms() const {
  if (ablation == Ablation::kNoLq) return PseudoGtTerms::kHighOnly;
  if (ablation == Ablation::kNoHq) return PseudoGtTerms::kLowOnly;
  return PseudoGtTerms::kBoth;
}

QsfNetImpl::QsfNetImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  extraction = register_module("extraction", InitialExtractionNet(cfg_.encoder, cfg_.decoder));
  if (cfg_.has_quality()) quality = register_module("quality", QualitySubnet(cfg_.quality));
  fusion = register_module("fusion", FusionNet(cfg_.fusion));
}

std::array<InitialBranchOutput, 3> QsfNetImpl::extract(const torch::Tensor& v, const torch::Tensor& d,
                                                       const torch::Tensor& t) {
  return extraction->forward(v, d, t);
}

QualityAwareMaps QsfNetImpl::assess(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t) {
  if (!quality) throw ConfigError("the no_qa variant has no quality subnet");
  return quality->forward(v, d, t);
}

FusionOutput QsfNetImpl::fuse(const std::array<InitialBranchOutput, 3>& initial, const QualityAwareMaps* qa,
                              std::int64_t height, std::int64_t width) {
  return fusion->forward(initial, qa, height, width);
}

QsfOutput QsfNetImpl::forward(const torch::Tensor& v, const torch::Tensor& d, const torch::Tensor& t) {
  QsfOutput out;
  out.initial = extract(v, d, t);
  if (quality) out.quality = assess(v, d, t);
  out.fusion = fuse(out.initial, out.quality ? &*out.quality : nullptr, v.size(2), v.size(3));
  return out;
}

}  // namespace qsf
