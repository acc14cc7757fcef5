// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <random>

#include "oracles.hpp"
#include "qsf/errors.hpp"
#include "qsf/fusion.hpp"

using namespace qsf;

namespace {

std::array<InitialBranchOutput, 3> fake_initial(std::int64_t batch, std::int64_t side) {
  std::array<InitialBranchOutput, 3> out;
  for (auto& b : out) {
    for (auto& f : b.features) f = torch::randn({batch, 128, side, side});
  }
  return out;
}

QualityAwareMaps fake_quality(std::int64_t batch, std::int64_t res) {
  QualityAwareMaps q;
  q.depth_logits = torch::randn({batch, 1, res, res});
  q.thermal_logits = torch::randn({batch, 1, res, res});
  q.depth = torch::sigmoid(q.depth_logits);
  q.thermal = torch::sigmoid(q.thermal_logits);
  return q;
}

oracle::CbamWeights cbam_weights(Cbam& cb) {
  oracle::CbamWeights w;
  const auto win = cb->mlp_in->weight.detach().to(torch::kFloat64);
  const auto wout = cb->mlp_out->weight.detach().to(torch::kFloat64);
  const auto sp = cb->spatial->weight.detach().to(torch::kFloat64);
  for (int j = 0; j < win.size(0); ++j) {
    w.w_in.emplace_back();
    for (int c = 0; c < win.size(1); ++c) w.w_in.back().push_back(win[j][c][0][0].item<double>());
    w.b_in.push_back(cb->mlp_in->bias[j].item<double>());
  }
  for (int c = 0; c < wout.size(0); ++c) {
    w.w_out.emplace_back();
    for (int j = 0; j < wout.size(1); ++j) w.w_out.back().push_back(wout[c][j][0][0].item<double>());
    w.b_out.push_back(cb->mlp_out->bias[c].item<double>());
  }
  const auto k = sp.size(2);
  w.spatial.assign(2, std::vector<std::vector<double>>(k, std::vector<double>(k)));
  for (int ch = 0; ch < 2; ++ch)
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) w.spatial[ch][y][x] = sp[0][ch][y][x].item<double>();
  w.b_spatial = cb->spatial->bias[0].item<double>();
  return w;
}

}  // namespace

TEST_CASE("purification matches the pixel oracle on random 4x4x2 instances") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto fp = oracle::random_unit(rng, 32);
    const auto fv = oracle::random_unit(rng, 32);
    const auto fo = oracle::random_unit(rng, 32);
    const auto qa = oracle::random_unit(rng, 16);
    const auto r = purify(oracle::from_vec(fp, {1, 2, 4, 4}), oracle::from_vec(fv, {1, 2, 4, 4}),
                          oracle::from_vec(fo, {1, 2, 4, 4}), oracle::from_vec(qa, {1, 1, 4, 4}));
    const auto o = oracle::purify(fp, fv, fo, qa);
    const auto w1 = oracle::to_vec(r.w1);
    const auto w2 = oracle::to_vec(r.w2);
    const auto w = oracle::to_vec(r.w);
    for (std::size_t i = 0; i < 32; ++i) {
      REQUIRE(std::fabs(w1[i] - o.w1[i]) <= 1e-6);
      REQUIRE(std::fabs(w2[i] - o.w2[i]) <= 1e-6);
      REQUIRE(std::fabs(w[i] - o.w[i]) <= 1e-6);
    }
  }
}

TEST_CASE("purification limits") {
  torch::manual_seed(1);
  const auto fp = torch::randn({2, 8, 4, 4});
  const auto fv = torch::randn({2, 8, 4, 4});
  const auto fo = torch::randn({2, 8, 4, 4});
  const auto zero = purify(fp, fv, fo, torch::zeros({2, 1, 4, 4}));
  CHECK(oracle::bit_equal(zero.w, fv));
  const auto one = purify(fp, fv, fo, torch::ones({2, 1, 4, 4}));
  CHECK(oracle::max_abs_diff(one.w, fp - (fv + fo) / 2) <= 1e-6);

  const auto qa = torch::rand({2, 1, 4, 4});
  CHECK(oracle::bit_equal(purify(fp, fv, fo, qa, PurifyMode::kNoLowQuality).w2, fv));
  CHECK(oracle::bit_equal(purify(fp, fv, fo, qa, PurifyMode::kNoHighQuality).w1, fp));
  CHECK_THROWS_AS(purify(fp, fv, fo, torch::rand({2, 1, 8, 8})), ShapeMismatch);
}

TEST_CASE("efficient attention shapes and factorized context") {
  torch::manual_seed(2);
  const auto q = torch::randn({1, 128, 256});
  const auto k = torch::randn({1, 128, 256});
  const auto v = torch::randn({1, 128, 256});
  CHECK(efficient_attention(q, k, v, 4).sizes() == torch::IntArrayRef({1, 128, 256}));
  CHECK(efficient_attention_context(k, v, 4).sizes() == torch::IntArrayRef({1, 4, 32, 32}));
  EfficientAttention att(128, 4);
  const auto x = torch::randn({1, 128, 16, 16});
  CHECK(att->forward(x, x).sizes() == x.sizes());
  CHECK_THROWS_AS(EfficientAttention(128, 3), HeadDivisibility);
  CHECK_THROWS_AS(efficient_attention(q, k, v, 5), HeadDivisibility);
}

TEST_CASE("single-token attention returns the value vector") {
  // One token: the token softmax is 1, the context is K^T V = v as rows, and
  // the channel-softmaxed query sums to 1, so each output channel equals v.
  const auto q = torch::tensor({0.3f, -0.2f}).reshape({1, 2, 1});
  const auto k = torch::tensor({1.7f, 0.4f}).reshape({1, 2, 1});
  const auto v = torch::tensor({1.5f, -2.0f}).reshape({1, 2, 1});
  const auto out = oracle::to_vec(efficient_attention(q, k, v, 1));
  CHECK(out[0] == doctest::Approx(1.5));
  CHECK(out[1] == doctest::Approx(-2.0));

  // Two tokens by hand, one head.
  const auto q2 = torch::tensor({0.0f, 1.0f, 0.0f, 0.0f}).reshape({1, 2, 2});
  const auto k2 = torch::tensor({0.0f, 0.0f, 0.0f, std::log(3.0f)}).reshape({1, 2, 2});
  const auto v2 = torch::tensor({1.0f, 3.0f, 2.0f, -2.0f}).reshape({1, 2, 2});
  // softmax_tokens(K) rows: [0.5, 0.5], [0.25, 0.75]
  // context[i][j] = sum_n K[i][n] V[j][n]: [[2, 0], [2.5, -1]]
  // softmax_channels(Q) columns: token0 [0.5, 0.5], token1 [e/(e+1), 1/(e+1)]
  const double e = std::exp(1.0);
  const double a0 = 0.5, a1 = e / (e + 1), b1 = 1 / (e + 1);
  const std::vector<double> hand{2 * a0 + 2.5 * a0, 2 * a1 + 2.5 * b1, 0 * a0 - 1 * a0, 0 * a1 - 1 * b1};
  const auto out2 = oracle::to_vec(efficient_attention(q2, k2, v2, 1));
  for (int i = 0; i < 4; ++i) CHECK(out2[i] == doctest::Approx(hand[i]).epsilon(1e-6));
}

TEST_CASE("iia base case and symmetry") {
  torch::manual_seed(3);
  Iia a(128, 4);
  torch::NoGradGuard ng;
  const auto x = torch::randn({1, 128, 8, 8});
  const auto y = torch::randn({1, 128, 8, 8});
  const auto first = a->fuse(x, y, std::nullopt);
  CHECK(first.sizes() == x.sizes());
  CHECK(a->fuse(x, y, first).sizes() == x.sizes());

  Iia b(128, 4);
  auto copy = [](torch::nn::Module& dst, torch::nn::Module& src) {
    auto d = dst.named_parameters();
    for (const auto& p : src.named_parameters()) d[p.key()].copy_(p.value());
  };
  copy(*b->branch_vd, *a->branch_vt);
  copy(*b->branch_vt, *a->branch_vd);
  copy(*b->cbam, *a->cbam);
  CHECK(oracle::max_abs_diff(a->fuse(x, y, first), b->fuse(y, x, first)) <= 1e-5);
  CHECK_THROWS_AS(a->fuse(x, torch::randn({1, 128, 4, 4}), std::nullopt), ShapeMismatch);
}

TEST_CASE("cbam hand case with unit weights") {
  CbamOptions opts;
  opts.channels = 2;
  Cbam cb(opts);
  torch::NoGradGuard ng;
  for (auto& p : cb->parameters()) p.fill_(1.0f);
  for (auto* conv : {&cb->mlp_in, &cb->mlp_out, &cb->spatial}) (*conv)->bias.zero_();
  const auto x = torch::tensor({1.0f, 2.0f, 3.0f, 4.0f, -1.0f, 0.0f, 1.0f, 2.0f}).reshape({1, 2, 2, 2});
  // avg = (2.5, 0.5), max = (4, 2); hidden = relu(sum) -> 3 and 6; channel gate sigmoid(9).
  // Spatial mean + max over the four pixels sums to 16 * sigmoid(9); the 7x7 kernel covers all.
  const double g = oracle::sigmoid(9.0);
  const double s = oracle::sigmoid(16.0 * g);
  const auto out = oracle::to_vec(cb->forward(x));
  const std::vector<double> in{1, 2, 3, 4, -1, 0, 1, 2};
  for (int i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(in[i] * g * s).epsilon(1e-6));
}

TEST_CASE("cbam gates never amplify") {
  torch::manual_seed(4);
  Cbam cb;
  torch::NoGradGuard ng;
  const auto x = torch::randn({2, 128, 8, 8}) * 3;
  const auto y = cb->forward(x);
  CHECK(y.sizes() == x.sizes());
  CHECK((y.abs() <= x.abs()).all().item<bool>());
}

TEST_CASE("edge residual of a constant feature is exactly zero") {
  torch::manual_seed(5);
  EdgeRefine er;
  er->eval();
  torch::NoGradGuard ng;
  const auto w = torch::full({1, 128, 16, 16}, 0.7f);
  const auto r = er->forward(w);
  CHECK(r.residual.abs().max().item<float>() == 0.0f);
  CHECK(r.feature.sizes() == w.sizes());
  CHECK(r.edge.edge_map.sizes() == torch::IntArrayRef({1, 1, 16, 16}));
}

TEST_CASE("edge refinement matches the pixel oracle on a 4x4 map") {
  torch::manual_seed(6);
  EdgeRefineOptions opts;
  opts.channels = 1;
  opts.normalize = false;
  EdgeRefine er(opts);
  torch::NoGradGuard ng;
  er->in_proj->weight.fill_(1.0f);
  er->in_proj->bias.zero_();
  er->edge_conv->weight.fill_(1.0f);
  er->edge_conv->bias.zero_();
  std::mt19937_64 rng(7);
  const auto w = oracle::random_unit(rng, 16);
  const auto r = er->forward(oracle::from_vec(w, {1, 1, 4, 4}));

  const std::vector<double> wd(w.begin(), w.end());
  const auto pooled = oracle::box3(wd, 4, 4);
  std::vector<double> res(16), edge(16);
  std::vector<std::vector<double>> boosted(1, std::vector<double>(16));
  for (int i = 0; i < 16; ++i) {
    res[i] = wd[i] - pooled[i];
    edge[i] = oracle::sigmoid(res[i]);
    boosted[0][i] = wd[i] + wd[i] * edge[i];
  }
  const auto feat = oracle::cbam(boosted, 4, 4, cbam_weights(er->cbam));
  const auto got_res = oracle::to_vec(r.residual);
  const auto got_edge = oracle::to_vec(r.edge.edge_map);
  const auto got_feat = oracle::to_vec(r.feature);
  for (int i = 0; i < 16; ++i) {
    CHECK(got_res[i] == doctest::Approx(res[i]).epsilon(1e-6));
    CHECK(got_edge[i] == doctest::Approx(edge[i]).epsilon(1e-6));
    CHECK(got_feat[i] == doctest::Approx(feat[0][i]).epsilon(1e-5));
  }
}

TEST_CASE("fusion forward shape law") {
  torch::manual_seed(8);
  FusionNet net(FusionConfig{});
  net->eval();
  torch::NoGradGuard ng;
  const auto initial = fake_initial(2, 16);
  const auto qa = fake_quality(2, 64);
  const auto out = net->forward(initial, &qa, 64, 64);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.logits[i].sizes() == torch::IntArrayRef({2, 1, 16, 16}));
    CHECK(out.full_logits[i].sizes() == torch::IntArrayRef({2, 1, 64, 64}));
  }
  REQUIRE(out.edge.has_value());
  CHECK(out.edge->edge_map.sizes() == torch::IntArrayRef({2, 1, 16, 16}));
  CHECK(oracle::bit_equal(out.saliency, torch::sigmoid(out.full_logits[0])));
  CHECK_THROWS_AS(net->forward(initial, nullptr, 64, 64), ShapeMismatch);
}

TEST_CASE("without edge refinement the map is the upsampled stage-1 prediction") {
  torch::manual_seed(9);
  FusionConfig cfg;
  cfg.use_edge = false;
  FusionNet net(cfg);
  net->eval();
  torch::NoGradGuard ng;
  const auto initial = fake_initial(1, 16);
  const auto qa = fake_quality(1, 64);
  const auto out = net->forward(initial, &qa, 64, 64);
  CHECK_FALSE(out.logits[0].defined());
  CHECK_FALSE(out.edge.has_value());
  CHECK(oracle::bit_equal(out.saliency, torch::sigmoid(upsample_to(out.logits[1], 64, 64))));
}

TEST_CASE("without quality maps both pairs receive the summed features") {
  torch::manual_seed(10);
  FusionConfig cfg;
  cfg.use_quality = false;
  cfg.use_iia = false;
  FusionNet net(cfg);
  net->eval();
  torch::NoGradGuard ng;
  const auto out = net->forward(fake_initial(1, 16), nullptr, 64, 64);
  CHECK(out.saliency.sizes() == torch::IntArrayRef({1, 1, 64, 64}));
}

TEST_CASE("gradient from the final prediction reaches every cascade stage") {
  torch::manual_seed(11);
  FusionNet net(FusionConfig{});
  net->train();
  const auto initial = fake_initial(2, 16);
  const auto qa = fake_quality(2, 64);
  const auto out = net->forward(initial, &qa, 64, 64);
  out.full_logits[0].mean().backward();
  for (const char* stage : {"stage1.", "stage2.", "stage3."}) {
    double total = 0.0;
    for (const auto& p : net->named_parameters()) {
      if (p.key().rfind(stage, 0) == 0 && p.value().grad().defined()) total += p.value().grad().abs().sum().item<double>();
    }
    INFO(stage);
    CHECK(total > 0.0);
  }
}
