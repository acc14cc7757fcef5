// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <random>
#include <set>

#include "oracles.hpp"
#include "qsf/errors.hpp"
#include "qsf/initial_extraction.hpp"

using namespace qsf;

TEST_CASE("msf node shape law and determinism") {
  torch::manual_seed(0);
  Msf msf;
  msf->eval();
  torch::NoGradGuard ng;
  const auto cur = torch::randn({2, 128, 16, 16});
  const auto deep = torch::randn({2, 128, 8, 8});
  const auto a = msf->forward(cur, deep);
  CHECK(a.sizes() == torch::IntArrayRef({2, 128, 16, 16}));
  CHECK(oracle::bit_equal(a, msf->forward(cur, deep)));
}

TEST_CASE("msf node with identity weights: (c + d)^3 + d") {
  MsfOptions opts;
  opts.channels = 1;
  opts.norm = NormKind::kNone;
  Msf msf(opts);
  set_identity_weights(msf);
  torch::NoGradGuard ng;
  const auto cur = torch::tensor({0.1f, 0.2f, 0.3f, 0.4f}).reshape({1, 1, 2, 2});
  const auto deep = torch::tensor({0.5f}).reshape({1, 1, 1, 1});
  const auto out = oracle::to_vec(msf->forward(cur, deep));
  // 0.6^3 + 0.5, 0.7^3 + 0.5, 0.8^3 + 0.5, 0.9^3 + 0.5
  const std::vector<double> hand{0.716, 0.843, 1.012, 1.229};
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(hand[i]).epsilon(1e-6));
}

TEST_CASE("shrinkage schedule matches a straight-line evaluation") {
  MsfOptions opts;
  opts.channels = 1;
  opts.norm = NormKind::kNone;
  ShrinkageDecoder dec(std::array<int, 4>{1, 1, 1, 1}, opts);
  for (int stage = 1; stage <= 3; ++stage) {
    for (int level = 1; level <= 4 - stage; ++level) set_identity_weights(dec->node(stage, level));
  }
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  const std::array<int, 4> side{8, 4, 2, 1};
  std::array<std::vector<double>, 4> L;
  std::array<torch::Tensor, 4> levels;
  for (int j = 0; j < 4; ++j) {
    L[j].resize(static_cast<std::size_t>(side[j]) * side[j]);
    for (auto& v : L[j]) v = u(rng);
    std::vector<float> f(L[j].begin(), L[j].end());
    levels[j] = oracle::from_vec(f, {1, 1, side[j], side[j]});
    // Keep the oracle on the float-rounded inputs.
    for (std::size_t i = 0; i < f.size(); ++i) L[j][i] = f[i];
  }
  torch::NoGradGuard ng;
  const auto state = dec->decode_projected(levels);

  auto node = [&](int cur, int deeper) { L[cur] = oracle::identity_node(L[cur], L[deeper], side[deeper], side[deeper]); };
  node(2, 3);
  node(1, 2);
  node(0, 1);
  const auto out1 = L[0];
  node(1, 2);
  node(0, 1);
  const auto out2 = L[0];
  node(0, 1);
  const auto out3 = L[0];

  const std::array<std::vector<double>, 3> expected{out1, out2, out3};
  for (int s = 0; s < 3; ++s) {
    const auto got = oracle::to_vec(state.stage_outputs[s]);
    REQUIRE(got.size() == expected[s].size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i] == doctest::Approx(expected[s][i]).epsilon(1e-5));
    }
  }
  const std::vector<std::pair<int, int>> schedule{{1, 3}, {1, 2}, {1, 1}, {2, 2}, {2, 1}, {3, 1}};
  CHECK(state.schedule == schedule);
  CHECK(ShrinkageDecoderImpl::kNodeCount == 6);
}

TEST_CASE("toy pyramid decodes to three stride-4 outputs") {
  torch::manual_seed(3);
  const auto widths = EncoderConfig::toy().stage_widths;
  ShrinkageDecoder dec(widths);
  FeaturePyramid p;
  const std::array<std::int64_t, 4> sides{16, 8, 4, 2};
  for (int j = 0; j < 4; ++j) p.levels[j] = torch::randn({2, widths[j], sides[j], sides[j]});
  const auto state = dec->decode(p);
  for (const auto& o : state.stage_outputs) CHECK(o.sizes() == torch::IntArrayRef({2, 128, 16, 16}));
  CHECK(state.schedule.size() == 6);

  UShapeDecoder base(widths);
  const auto bstate = base->decode(p);
  for (const auto& o : bstate.stage_outputs) CHECK(o.sizes() == torch::IntArrayRef({2, 128, 16, 16}));
}

TEST_CASE("prediction head shape and range") {
  torch::manual_seed(4);
  PredHead head;
  head->eval();
  const auto logits = head->forward(torch::randn({1, 128, 16, 16}));
  CHECK(logits.sizes() == torch::IntArrayRef({1, 1, 16, 16}));
  const auto p = torch::sigmoid(logits);
  CHECK(p.gt(0).all().item<bool>());
  CHECK(p.lt(1).all().item<bool>());
}

TEST_CASE("initial extraction forward at toy scale") {
  torch::manual_seed(5);
  InitialExtractionNet net(EncoderConfig::toy(), DecoderKind::kShrinkage);
  net->eval();
  torch::NoGradGuard ng;
  const auto x = torch::rand({2, 3, 64, 64});
  const auto out = net->forward(x, x, x);
  for (int m = 0; m < 3; ++m) {
    for (int i = 0; i < 3; ++i) {
      CHECK(out[m].features[i].sizes() == torch::IntArrayRef({2, 128, 16, 16}));
      CHECK(out[m].maps[i].sizes() == torch::IntArrayRef({2, 1, 64, 64}));
      CHECK(out[m].maps[i].min().item<float>() >= 0.0f);
      CHECK(out[m].maps[i].max().item<float>() <= 1.0f);
    }
  }
  // Same input, independently initialized decoders.
  CHECK_FALSE(oracle::bit_equal(out[0].maps[2], out[1].maps[2]));
  CHECK_FALSE(oracle::bit_equal(out[1].maps[2], out[2].maps[2]));
}

TEST_CASE("decoders and heads own disjoint parameters") {
  InitialExtractionNet net(EncoderConfig::toy(), DecoderKind::kShrinkage);
  std::set<const void*> seen;
  std::size_t total = 0;
  int heads = 0;
  for (int m = 0; m < 3; ++m) {
    for (const auto& child : net->branch(m)->named_children()) {
      if (child.key().rfind("head", 0) == 0) ++heads;
    }
    for (const auto& p : net->branch(m)->parameters()) {
      seen.insert(p.data_ptr());
      ++total;
    }
  }
  CHECK(heads == 9);
  CHECK(seen.size() == total);
  for (const auto& p : net->encoder()->parameters()) CHECK(seen.count(p.data_ptr()) == 0);
}

TEST_CASE("msf rejects mismatched inputs") {
  Msf msf;
  CHECK_THROWS_AS(msf->forward(torch::randn({1, 128, 16, 16}), torch::randn({1, 128, 4, 4})), ShapeMismatch);
  CHECK_THROWS_AS(msf->forward(torch::randn({1, 64, 16, 16}), torch::randn({1, 64, 8, 8})), ShapeMismatch);
}
