// SPDX-License-Identifier: Apache-2.0
#include "qsf/losses.hpp"

#include "qsf/errors.hpp"

namespace qsf {
namespace F = torch::nn::functional;

namespace {

const char* kModalityNames[3] = {"v", "d", "t"};

torch::Tensor sum_components(const std::vector<std::pair<std::string, torch::Tensor>>& parts) {
  // Accumulated in double so the total equals the component sum to ~1e-15.
  torch::Tensor total = parts.front().second.to(torch::kFloat64);
  for (std::size_t i = 1; i < parts.size(); ++i) total = total + parts[i].second.to(torch::kFloat64);
  return total;
}

void append_stage1(std::vector<std::pair<std::string, torch::Tensor>>& parts,
                   const std::array<InitialBranchOutput, 3>& initial, const torch::Tensor& gt, const LossConfig& cfg) {
  for (int m = 0; m < 3; ++m) {
    for (int i = 0; i < 3; ++i) {
      parts.emplace_back(std::string("init_") + kModalityNames[m] + "_p" + std::to_string(i + 1),
                         ppa_loss(initial[m].full_logits[i], gt, cfg));
    }
  }
}

LossReport make_report(std::vector<std::pair<std::string, torch::Tensor>> parts) {
  LossReport report;
  report.total = sum_components(parts);
  for (auto& [name, value] : parts) report.components.emplace_back(name, value.detach());
  return report;
}

}  // namespace

LossConfig LossConfig::for_resolution(int resolution) {
  LossConfig c;
  int k = std::max(1, resolution / 12);
  if (k % 2 == 0) k -= 1;
  c.ppa_weight_kernel = std::max(1, k);
  return c;
}

void LossConfig::validate() const {
  if (ppa_weight_kernel < 1 || ppa_weight_kernel % 2 == 0) throw ConfigError("ppa weight kernel must be odd");
  if (ppa_weight_gain < 0.0) throw ConfigError("ppa weight gain must be non-negative");
}

double LossReport::component(const std::string& name) const {
  for (const auto& [n, v] : components) {
    if (n == name) return v.item<double>();
  }
  throw std::out_of_range("no loss component '" + name + "'");
}

torch::Tensor ppa_weight(const torch::Tensor& gt, const LossConfig& cfg) {
  const int k = cfg.ppa_weight_kernel;
  const auto pooled = F::avg_pool2d(gt, F::AvgPool2dFuncOptions(k).stride(1).padding(k / 2));
  return 1 + cfg.ppa_weight_gain * (pooled - gt).abs();
}

torch::Tensor ppa_loss(const torch::Tensor& logits, const torch::Tensor& gt, const LossConfig& cfg) {
  if (!logits.sizes().equals(gt.sizes()) || logits.dim() != 4) {
    throw ShapeMismatch("ppa_loss: logits and gt must share a [B, 1, H, W] shape");
  }
  const auto weight = ppa_weight(gt, cfg);
  const auto bce = F::binary_cross_entropy_with_logits(
      logits, gt, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
  const auto wbce = (weight * bce).sum({2, 3}) / weight.sum({2, 3});

  const auto p = torch::sigmoid(logits);
  const auto inter = (p * gt * weight).sum({2, 3});
  const auto uni = ((p + gt) * weight).sum({2, 3});
  const auto wiou = 1 - (inter + 1) / (uni - inter + 1);
  return (wbce + wiou).mean();
}

torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  if (!logits.sizes().equals(target.sizes())) throw ShapeMismatch("bce_loss: shapes differ");
  return F::binary_cross_entropy_with_logits(logits, target);
}

LossReport stage1_loss(const std::array<InitialBranchOutput, 3>& initial, const torch::Tensor& gt,
                       const LossConfig& cfg) {
  std::vector<std::pair<std::string, torch::Tensor>> parts;
  append_stage1(parts, initial, gt, cfg);
  return make_report(std::move(parts));
}

LossReport stage2_loss(const QualityAwareMaps& qa, const std::array<PseudoGT, 2>& pseudo_gts) {
  std::vector<std::pair<std::string, torch::Tensor>> parts;
  const auto device = qa.depth_logits.device();
  parts.emplace_back("qa_d", bce_loss(qa.depth_logits, pseudo_gts[0].combined.to(device)));
  parts.emplace_back("qa_t", bce_loss(qa.thermal_logits, pseudo_gts[1].combined.to(device)));
  return make_report(std::move(parts));
}

torch::Tensor downsample_edge_gt(const torch::Tensor& edge_gt, std::int64_t height, std::int64_t width) {
  if (edge_gt.size(2) == height && edge_gt.size(3) == width) return edge_gt;
  const auto ky = edge_gt.size(2) / height;
  const auto kx = edge_gt.size(3) / width;
  if (ky * height != edge_gt.size(2) || kx * width != edge_gt.size(3)) {
    throw ShapeMismatch("edge target does not tile the edge prediction grid");
  }
  return F::max_pool2d(edge_gt, F::MaxPool2dFuncOptions({ky, kx}).stride({ky, kx}));
}

LossReport stage3_loss(const std::array<InitialBranchOutput, 3>& initial, const FusionOutput& fused,
                       const torch::Tensor& gt, const torch::Tensor& edge_gt, const LossConfig& cfg) {
  std::vector<std::pair<std::string, torch::Tensor>> parts;
  append_stage1(parts, initial, gt, cfg);
  for (int i = 0; i < 4; ++i) {
    if (!fused.full_logits[i].defined()) continue;
    parts.emplace_back("fused_p" + std::to_string(i), ppa_loss(fused.full_logits[i], gt, cfg));
  }
  if (fused.edge) {
    const auto& logits = fused.edge->edge_logits;
    const auto target = downsample_edge_gt(edge_gt, logits.size(2), logits.size(3));
    parts.emplace_back("edge", bce_loss(logits, target));
  }
  return make_report(std::move(parts));
}

}  // namespace qsf
