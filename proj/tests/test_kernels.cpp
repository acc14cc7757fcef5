// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"
#include <omp.h>

#include <random>

#include "oracles.hpp"
#include "qsf/errors.hpp"
#include "qsf/kernels.hpp"

using namespace qsf;
namespace K = qsf::kernels;

namespace {

struct Inputs {
  std::vector<float> a, b, c, gt;
};

Inputs make_inputs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Inputs in;
  in.a = oracle::random_unit(rng, n);
  in.b = oracle::random_unit(rng, n);
  in.c = oracle::random_unit(rng, n);
  in.gt = oracle::random_mask(rng, 1, static_cast<int>(n), 0.4);
  return in;
}

}  // namespace

TEST_CASE("threshold_bin counts satisfied thresholds") {
  CHECK(K::threshold_bin(0.0f) == 0);
  CHECK(K::threshold_bin(1.0f) == 255);
  CHECK(K::threshold_bin(0.999f) == 254);
  for (int k = 1; k <= 255; ++k) {
    const float t = static_cast<float>(k / 255.0);
    const float above = std::nextafter(t, 2.0f);
    int expected = 0;
    for (int j = 1; j <= 255; ++j) expected += static_cast<double>(above) >= j / 255.0;
    CHECK(K::threshold_bin(above) == expected);
  }
}

TEST_CASE("serial and parallel kernels agree") {
  omp_set_num_threads(4);
  const std::size_t n = 64 * 64 * 3 + 17;
  const auto in = make_inputs(n, 11);

  SUBCASE("pseudo_gt") {
    std::vector<float> h1(n), l1(n), c1(n), h2(n), l2(n), c2(n);
    K::serial::pseudo_gt(in.a, in.b, in.c, in.gt, {h1, l1, c1});
    K::parallel::pseudo_gt(in.a, in.b, in.c, in.gt, {h2, l2, c2});
    CHECK(h1 == h2);
    CHECK(l1 == l2);
    CHECK(c1 == c2);
  }
  SUBCASE("purify") {
    const std::size_t plane = 97;
    const std::size_t total = plane * 12;
    std::mt19937_64 rng(3);
    const auto p = oracle::random_unit(rng, total);
    const auto v = oracle::random_unit(rng, total);
    const auto o = oracle::random_unit(rng, total);
    const auto q = oracle::random_unit(rng, plane);
    std::vector<float> a1(total), b1(total), w1(total), a2(total), b2(total), w2(total);
    K::serial::purify(p, v, o, q, {a1, b1, w1});
    K::parallel::purify(p, v, o, q, {a2, b2, w2});
    CHECK(a1 == a2);
    CHECK(b1 == b2);
    CHECK(w1 == w2);
  }
  SUBCASE("edge_gt") {
    std::mt19937_64 rng(5);
    const auto gt = oracle::random_mask(rng, 61, 53, 0.5);
    std::vector<float> e1(gt.size()), e2(gt.size());
    K::serial::edge_gt(gt, 61, 53, e1);
    K::parallel::edge_gt(gt, 61, 53, e2);
    CHECK(e1 == e2);
    CHECK(e1 == oracle::edge_mask(gt, 61, 53));
  }
  SUBCASE("threshold_histogram") {
    const auto h1 = K::serial::threshold_histogram(in.a, in.gt);
    const auto h2 = K::parallel::threshold_histogram(in.a, in.gt);
    CHECK(h1.fg == h2.fg);
    CHECK(h1.bg == h2.bg);
    std::int64_t total = 0;
    for (int k = 0; k <= K::kNumThresholds; ++k) total += h1.fg[k] + h1.bg[k];
    CHECK(total == static_cast<std::int64_t>(n));
  }
  SUBCASE("mean_abs_error") {
    const double s = K::serial::mean_abs_error(in.a, in.gt);
    const double p = K::parallel::mean_abs_error(in.a, in.gt);
    CHECK(s == doctest::Approx(p).epsilon(1e-12));
    CHECK(s == doctest::Approx(oracle::mae(in.a, in.gt)).epsilon(1e-12));
  }
}

TEST_CASE("kernels reject mismatched planes") {
  std::vector<float> a(4), b(5), out(4);
  CHECK_THROWS_AS(K::parallel::mean_abs_error(a, b), ShapeMismatch);
  CHECK_THROWS_AS(K::serial::edge_gt(a, 2, 3, out), ShapeMismatch);
  std::vector<float> q(3);
  std::vector<float> w1(4), w2(4), w(4);
  CHECK_THROWS_AS(K::parallel::purify(a, a, a, q, {w1, w2, w}), ShapeMismatch);
}
