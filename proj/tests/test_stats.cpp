#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fbn/stats.hpp"

using namespace fbn;

TEST_CASE("trimmed moments, 10 percent on 1..10") {
  Tensor x({10}, {10, 1, 9, 2, 8, 3, 7, 4, 6, 5});  // order must not matter
  auto m = trimmed_moments(x, 10);
  // keeps 2..9: mean 5.5, biased variance 42/8
  CHECK(m.mean == doctest::Approx(5.5).epsilon(1e-12));
  CHECK(m.variance == doctest::Approx(5.25).epsilon(1e-12));
}

TEST_CASE("winsorized moments, 10 percent on 1..10") {
  Tensor x({10}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  auto m = winsorized_moments(x, 10);
  // clamps to [2,9]: mean 5.5, variance 66.5/10
  CHECK(m.mean == doctest::Approx(5.5).epsilon(1e-12));
  CHECK(m.variance == doctest::Approx(6.65).epsilon(1e-12));
}

TEST_CASE("k = 0 reduces to plain moments") {
  Tensor x({4}, {1, 2, 3, 100});
  auto t = trimmed_moments(x, 0);
  auto w = winsorized_moments(x, 0);
  CHECK(t.mean == doctest::Approx(26.5));
  CHECK(t.variance == doctest::Approx(w.variance));
  CHECK(w.mean == t.mean);
}

TEST_CASE("trimming suppresses a gross outlier") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(3.0, 2.0);
  Tensor x({200});
  for (size_t i = 0; i < 199; ++i) x[i] = d(rng);
  x[199] = 1e6;
  auto robust = trimmed_moments(x, 5);
  auto plain = trimmed_moments(x, 0);
  CHECK(std::abs(robust.mean - 3.0) < 0.5);
  CHECK(plain.mean > 1000.0);
  CHECK(robust.variance < 10.0);
}

TEST_CASE("invalid trim fractions are rejected") {
  Tensor x({4}, {1, 2, 3, 4});
  CHECK_THROWS_AS(trimmed_moments(x, 50), std::invalid_argument);
  CHECK_THROWS_AS(trimmed_moments(x, -1), std::invalid_argument);
  CHECK_THROWS_AS(winsorized_moments(x, 60), std::invalid_argument);
}

TEST_CASE("gaussian tail probabilities match the known constants") {
  // two-sided 7-sigma tail, one event in ~390.7 billion
  double p7 = gaussian_tail_probability(7);
  CHECK(p7 == doctest::Approx(2.55962508777167e-12).epsilon(1e-9));
  CHECK(1.0 / p7 == doctest::Approx(390682215445.0).epsilon(1e-3));

  CHECK(gaussian_tail_probability(0) == doctest::Approx(1.0));
  CHECK(gaussian_tail_probability(2) == doctest::Approx(0.0455002638963).epsilon(1e-9));
  CHECK_THROWS_AS(gaussian_tail_probability(-1), std::invalid_argument);
}

TEST_CASE("expected outlier rate at 7 sigma for a 512x16x16 layer") {
  double rate = expected_outlier_rate(7.0, 512.0 * 16 * 16);
  CHECK(rate == doctest::Approx(2980668.76).epsilon(1e-3));
  CHECK_THROWS_AS(expected_outlier_rate(7.0, 0.0), std::invalid_argument);
}

TEST_CASE("profiler percentiles on a standard normal sample") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor x({200000});
  for (size_t i = 0; i < x.size(); ++i) x[i] = d(rng);

  ActivationProfiler prof;
  prof.observe("layer0", x);
  auto bands = prof.finalize();
  REQUIRE(bands.size() == 1);
  const auto& b = bands[0];
  CHECK(b.layer == "layer0");
  CHECK(b.samples == x.size());
  CHECK(std::abs(b.p50) < 0.02);
  CHECK(b.p25 == doctest::Approx(-0.6745).epsilon(0.08));
  CHECK(b.p75 == doctest::Approx(0.6745).epsilon(0.08));
  CHECK(b.p1 == doctest::Approx(-2.3263).epsilon(0.05));
  CHECK(b.p99 == doctest::Approx(2.3263).epsilon(0.05));

  // 2-sigma exceedance near the analytic rate, 7-sigma events absent
  double expected2 = gaussian_tail_probability(2) * double(x.size());
  CHECK(double(b.exceedance[0]) == doctest::Approx(expected2).epsilon(0.15));
  CHECK(b.exceedance[2] == 0);
  CHECK(b.exceedance[3] == 0);
}

TEST_CASE("profiler flags planted extreme activations") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor x({10000});
  for (size_t i = 0; i < x.size(); ++i) x[i] = d(rng);
  x[1234] = 20.0;
  x[5678] = -20.0;

  ActivationProfiler prof;
  prof.observe("conv1", x);
  auto bands = prof.finalize();
  CHECK(bands[0].exceedance[2] == 2);  // beyond 7 sigma
  CHECK(bands[0].exceedance[3] == 2);  // beyond 14 sigma
  CHECK(bands[0].max == 20.0);
  CHECK(bands[0].min == -20.0);
}

TEST_CASE("profiler keeps layers separate and in first-seen order") {
  ActivationProfiler prof;
  prof.observe("b", Tensor({2}, {1.0, 2.0}));
  prof.observe("a", Tensor({2}, {10.0, 20.0}));
  prof.observe("b", Tensor({2}, {3.0, 4.0}));
  auto bands = prof.finalize();
  REQUIRE(bands.size() == 2);
  CHECK(bands[0].layer == "b");
  CHECK(bands[0].samples == 4);
  CHECK(bands[0].p50 == doctest::Approx(2.5));
  CHECK(bands[1].layer == "a");
  CHECK(bands[1].samples == 2);
}

TEST_CASE("profiler with no observations is rejected") {
  ActivationProfiler prof;
  CHECK_THROWS_AS(prof.finalize(), std::invalid_argument);
}
