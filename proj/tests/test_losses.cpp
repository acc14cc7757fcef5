// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <functional>
#include <random>

#include "oracles.hpp"
#include "qsf/errors.hpp"
#include "qsf/datamodel.hpp"
#include "qsf/losses.hpp"

using namespace qsf;

namespace {

LossConfig small_kernel() {
  LossConfig c;
  c.ppa_weight_kernel = 3;
  return c;
}

torch::Tensor blob_gt(std::int64_t batch, std::int64_t side) {
  auto g = torch::zeros({batch, 1, side, side});
  g.slice(2, side / 4, 3 * side / 4).slice(3, side / 3, 3 * side / 4).fill_(1.0f);
  return g;
}

std::array<InitialBranchOutput, 3> initial_from_logits(const std::function<torch::Tensor()>& make) {
  std::array<InitialBranchOutput, 3> out;
  for (auto& b : out) {
    for (auto& l : b.full_logits) l = make();
  }
  return out;
}

FusionOutput fused_from_logits(const std::function<torch::Tensor()>& make, std::int64_t edge_side) {
  FusionOutput f;
  for (auto& l : f.full_logits) l = make();
  EdgeOutput e;
  e.edge_logits = torch::randn({f.full_logits[0].size(0), 1, edge_side, edge_side});
  e.edge_map = torch::sigmoid(e.edge_logits);
  f.edge = e;
  return f;
}

}  // namespace

TEST_CASE("ppa gradient matches central finite differences") {
  torch::manual_seed(0);
  const auto cfg = small_kernel();
  const auto gt = torch::tensor({0., 1., 1., 0., 1., 1., 0., 0., 1.}, torch::kFloat64).reshape({1, 1, 3, 3});
  auto logits = torch::randn({1, 1, 3, 3}, torch::kFloat64).requires_grad_(true);
  ppa_loss(logits, gt, cfg).backward();
  const auto analytic = logits.grad().clone();
  auto numeric = torch::zeros_like(analytic);
  const double h = 1e-6;
  torch::NoGradGuard ng;
  for (int i = 0; i < 9; ++i) {
    auto plus = logits.detach().clone();
    auto minus = logits.detach().clone();
    plus.view(-1)[i] += h;
    minus.view(-1)[i] -= h;
    numeric.view(-1)[i] = (ppa_loss(plus, gt, cfg) - ppa_loss(minus, gt, cfg)).item<double>() / (2 * h);
  }
  const double rel = (analytic - numeric).norm().item<double>() / numeric.norm().item<double>();
  CHECK(rel < 1e-3);
}

TEST_CASE("ppa loss on a 4x4 hand case") {
  const std::vector<float> logits{2.0f, -1.0f, 0.5f, -3.0f, 1.5f, 0.0f, -0.5f, 2.5f,
                                  -2.0f, 3.0f, 1.0f, -1.5f, 0.25f, -0.25f, 4.0f, -4.0f};
  const std::vector<float> gt{1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0};
  const auto cfg = small_kernel();
  const double got = ppa_loss(oracle::from_vec(logits, {1, 1, 4, 4}), oracle::from_vec(gt, {1, 1, 4, 4}), cfg)
                         .item<double>();
  CHECK(got == doctest::Approx(oracle::ppa_loss(logits, gt, 4, 4, 3, 5.0)).epsilon(1e-6));

  const auto w = oracle::to_vec(ppa_weight(oracle::from_vec(gt, {1, 1, 4, 4}), cfg));
  const auto ow = oracle::ppa_weight(gt, 4, 4, 3, 5.0);
  for (int i = 0; i < 16; ++i) CHECK(w[i] == doctest::Approx(ow[i]).epsilon(1e-6));
}

TEST_CASE("ppa loss saturates for near-perfect logits") {
  const auto gt = blob_gt(2, 64);
  const auto logits = gt * 100 - 50;
  const auto cfg = LossConfig::for_resolution(64);
  CHECK(ppa_loss(logits, gt, cfg).item<double>() < 1e-3);
}

TEST_CASE("boundary weight is one in uniform regions") {
  const auto gt = blob_gt(1, 64);
  const auto cfg = LossConfig::for_resolution(64);
  CHECK(cfg.ppa_weight_kernel == 5);
  const auto w = ppa_weight(gt, cfg);
  // Deep interior of the blob and far background.
  CHECK(w[0][0][32][32].item<float>() == doctest::Approx(1.0));
  CHECK(w[0][0][2][60].item<float>() == doctest::Approx(1.0));
  CHECK(w.max().item<float>() > 1.0f);
}

TEST_CASE("loss domain") {
  torch::manual_seed(1);
  const auto gt = blob_gt(2, 32);
  const auto cfg = LossConfig::for_resolution(32);
  for (int i = 0; i < 20; ++i) {
    const auto l = ppa_loss(torch::randn({2, 1, 32, 32}) * 5, gt, cfg).item<double>();
    CHECK(std::isfinite(l));
    CHECK(l >= 0.0);
  }
  CHECK_THROWS_AS(ppa_loss(torch::randn({2, 1, 16, 16}), gt, cfg), ShapeMismatch);
  LossConfig bad;
  bad.ppa_weight_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("stage-1 report: nine components, additive, saturating") {
  torch::manual_seed(2);
  const auto gt = blob_gt(2, 64);
  const auto cfg = LossConfig::for_resolution(64);
  const auto initial = initial_from_logits([] { return torch::randn({2, 1, 64, 64}); });
  const auto r = stage1_loss(initial, gt, cfg);
  CHECK(r.components.size() == 9);
  double sum = 0.0;
  double indep = 0.0;
  for (const auto& [name, v] : r.components) sum += v.item<double>();
  for (const auto& b : initial) {
    for (const auto& l : b.full_logits) indep += ppa_loss(l, gt, cfg).item<double>();
  }
  CHECK(r.total_value() == doctest::Approx(sum).epsilon(1e-6));
  CHECK(r.total_value() == doctest::Approx(indep).epsilon(1e-6));

  const auto perfect = initial_from_logits([&] { return gt * 100 - 50; });
  CHECK(stage1_loss(perfect, gt, cfg).total_value() < 9e-3);
}

TEST_CASE("stage-2 loss reaches the target-entropy floor") {
  torch::manual_seed(3);
  std::array<PseudoGT, 2> pgt;
  for (auto& p : pgt) p.combined = torch::rand({2, 1, 16, 16}) * 0.98 + 0.01;
  QualityAwareMaps qa;
  qa.depth_logits = torch::logit(pgt[0].combined);
  qa.thermal_logits = torch::logit(pgt[1].combined);
  const auto r = stage2_loss(qa, pgt);
  CHECK(r.components.size() == 2);
  double floor = 0.0;
  for (const auto& p : pgt) {
    double h = 0.0;
    for (const float y : oracle::to_vec(p.combined)) h += -(y * std::log(y) + (1 - y) * std::log(1 - y));
    floor += h / static_cast<double>(p.combined.numel());
  }
  CHECK(r.total_value() == doctest::Approx(floor).epsilon(1e-5));

  for (auto& p : pgt) p.combined = torch::zeros({2, 1, 16, 16});
  qa.depth_logits = torch::full({2, 1, 16, 16}, -50.0f);
  qa.thermal_logits = torch::full({2, 1, 16, 16}, -50.0f);
  CHECK(stage2_loss(qa, pgt).total_value() < 1e-12);
}

TEST_CASE("stage-3 report: fourteen components and decomposition") {
  torch::manual_seed(4);
  const auto gt = blob_gt(2, 64);
  const auto edge_gt = torch::stack({derive_edge_gt(gt[0]), derive_edge_gt(gt[1])});
  const auto cfg = LossConfig::for_resolution(64);
  const auto make = [] { return torch::randn({2, 1, 64, 64}); };
  const auto initial = initial_from_logits(make);
  auto fused = fused_from_logits(make, 16);
  const auto r = stage3_loss(initial, fused, gt, edge_gt, cfg);
  CHECK(r.components.size() == 14);

  double indep = 0.0;
  for (const auto& b : initial) {
    for (const auto& l : b.full_logits) indep += ppa_loss(l, gt, cfg).item<double>();
  }
  for (const auto& l : fused.full_logits) indep += ppa_loss(l, gt, cfg).item<double>();
  const auto pooled = torch::max_pool2d(edge_gt, {4, 4}, {4, 4});
  const double edge_term = bce_loss(fused.edge->edge_logits, pooled).item<double>();
  indep += edge_term;
  CHECK(r.total_value() == doctest::Approx(indep).epsilon(1e-6));
  CHECK(r.component("edge") == doctest::Approx(edge_term).epsilon(1e-6));

  // Dropping the edge output removes exactly the edge component.
  auto no_edge = fused;
  no_edge.edge.reset();
  const auto r13 = stage3_loss(initial, no_edge, gt, edge_gt, cfg);
  CHECK(r13.components.size() == 13);
  CHECK(r.total_value() - r13.total_value() == doctest::Approx(r.component("edge")).epsilon(1e-6));

  // With the target equal to the edge map the term sits at its entropy floor.
  auto matched = fused;
  matched.edge->edge_logits = torch::logit(pooled.clamp(0.01, 0.99));
  const auto rm = stage3_loss(initial, matched, gt, edge_gt, cfg);
  CHECK(rm.component("edge") <= r.component("edge"));
}

TEST_CASE("edge targets are max-pooled to the edge grid") {
  auto e = torch::zeros({1, 1, 8, 8});
  e[0][0][5][2] = 1.0f;
  const auto d = downsample_edge_gt(e, 2, 2);
  CHECK(d.sizes() == torch::IntArrayRef({1, 1, 2, 2}));
  CHECK(d[0][0][1][0].item<float>() == 1.0f);
  CHECK(d.sum().item<float>() == 1.0f);
  CHECK_THROWS_AS(downsample_edge_gt(e, 3, 3), ShapeMismatch);
}
