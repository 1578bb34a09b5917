#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "flowrecon/error.hpp"
#include "flowrecon/metrics.hpp"
#include "prdc_oracle.hpp"

using namespace flowrecon;

namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(v.size(), 1);
  std::size_t i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

Matrix gaussian_cloud(std::size_t n, std::size_t d, double center, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(n, d);
  for (double& v : m.data) v = center + nd(rng);
  return m;
}

SamplerConfig scheme(Scheme s) {
  SamplerConfig cfg;
  cfg.scheme = s;
  return cfg;
}

}  // namespace

TEST_CASE("prdc on three points of a line") {
  auto rep = prdc(column({0.0, 1.0, 2.0}), column({0.1, 1.9}), 1);
  CHECK(rep.precision == doctest::Approx(1.0));
  CHECK(rep.recall == doctest::Approx(1.0));
  CHECK(rep.density == doctest::Approx(2.0));
  CHECK(rep.coverage == doctest::Approx(1.0));
  CHECK(rep.k == 1);
}

TEST_CASE("prdc identical and disjoint sets") {
  std::mt19937_64 rng(3);
  Matrix a = gaussian_cloud(40, 3, 0.0, 1.0, rng);
  auto same = prdc(a, a, 5);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.coverage == 1.0);

  Matrix far = gaussian_cloud(40, 3, 1e3, 1.0, rng);
  auto apart = prdc(a, far, 5);
  CHECK(apart.precision == 0.0);
  CHECK(apart.recall == 0.0);
  CHECK(apart.density == 0.0);
  CHECK(apart.coverage == 0.0);
}

TEST_CASE("prdc swapping roles swaps precision and recall") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    Matrix a = gaussian_cloud(30, 2, 0.0, 1.0, rng);
    Matrix b = gaussian_cloud(25, 2, 0.5, 1.3, rng);
    auto ab = prdc(a, b, 3);
    auto ba = prdc(b, a, 3);
    CHECK(ab.precision == ba.recall);
    CHECK(ab.recall == ba.precision);
  }
}

TEST_CASE("prdc matches brute force on random instances") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> kd(1, 5), dd(1, 6);
  std::size_t mismatches = 0;
  for (int t = 0; t < 60; ++t) {
    std::size_t k = kd(rng);
    std::size_t m = std::uniform_int_distribution<std::size_t>(k + 1, 50)(rng);
    std::size_t n = std::uniform_int_distribution<std::size_t>(k + 1, 50)(rng);
    std::size_t d = dd(rng);
    Matrix real = gaussian_cloud(m, d, 0.0, 1.0, rng);
    Matrix fake = gaussian_cloud(n, d, 0.3, 1.2, rng);
    auto got = prdc(real, fake, k);
    auto want = oracle::prdc_brute_force(real, fake, k);
    if (got.precision != want.precision || got.recall != want.recall || got.density != want.density ||
        got.coverage != want.coverage)
      ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("prdc rejects k at or above the sample count") {
  CHECK_THROWS_AS(prdc(column({0, 1, 2}), column({0.5, 1.5}), 2), ConfigError);
  CHECK_THROWS_AS(prdc(column({0, 1, 2}), column({0.5, 1.5}), 0), ConfigError);
  CHECK_THROWS_AS(prdc(Matrix(6, 2), Matrix(6, 3), 1), DimensionError);
}

TEST_CASE("posterior_stats uses the population convention") {
  Matrix s(2, 4);
  for (std::size_t p = 0; p < 4; ++p) {
    s(0, p) = 0.0;
    s(1, p) = 2.0;
  }
  auto rep = posterior_stats(s, 2, 2);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(rep.mean_image[p] == doctest::Approx(1.0));
    CHECK(rep.std_image[p] == doctest::Approx(1.0));
  }
  CHECK(rep.abs_error_image.empty());
  CHECK_FALSE(rep.mean_abs_error.has_value());

  Matrix same(5, 3, 0.7);
  auto flat = posterior_stats(same, 1, 3);
  for (double v : flat.std_image) CHECK(v == 0.0);

  std::vector<double> truth = rep.mean_image;
  auto exact = posterior_stats(s, 2, 2, std::span<const double>(truth));
  CHECK(*exact.mean_abs_error == 0.0);
}

TEST_CASE("posterior_stats second moment identity and shape errors") {
  std::mt19937_64 rng(5);
  Matrix s = gaussian_cloud(200, 12, 1.5, 0.8, rng);
  auto rep = posterior_stats(s, 3, 4);
  for (std::size_t p = 0; p < 12; ++p) {
    double sq = 0;
    for (std::size_t i = 0; i < s.rows; ++i) sq += s(i, p) * s(i, p);
    sq /= static_cast<double>(s.rows);
    CHECK(std::abs(rep.std_image[p] * rep.std_image[p] + rep.mean_image[p] * rep.mean_image[p] - sq) < 1e-10);
  }
  std::vector<double> short_truth(5, 0.0);
  CHECK_THROWS_AS(posterior_stats(s, 3, 4, std::span<const double>(short_truth)), DimensionError);
  CHECK_THROWS_AS(posterior_stats(s, 2, 4), DimensionError);

  PosteriorSamples ps;
  ps.samples = s;
  auto row = posterior_stats(ps);
  CHECK(row.height == 1);
  CHECK(row.width == 12);
  CHECK(row.mean_image == rep.mean_image);
}

TEST_CASE("mode_cluster separates far Gaussians") {
  std::mt19937_64 rng(9);
  const std::size_t n = 120, d = 16;
  std::normal_distribution<double> nd(0.0, 0.3);
  Matrix s(n, d);
  std::vector<int> truth_label(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth_label[i] = (i * 7) % 3 == 0 ? 1 : 0;
    for (std::size_t p = 0; p < d; ++p) s(i, p) = (truth_label[i] ? 5.0 : -5.0) + nd(rng);
  }
  auto mc = mode_cluster(s, 4, 4, 2, 17);
  REQUIRE(mc.labels.size() == n);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < n; ++i) agree += static_cast<int>(mc.labels[i]) == truth_label[i] ? 1 : 0;
  CHECK((agree == n || agree == 0));
  // Without truth the larger cluster comes first.
  CHECK(mc.sizes[0] >= mc.sizes[1]);

  // With truth at +5 the +5 cluster must be mode 0.
  std::vector<double> truth(d, 5.0);
  auto ordered = mode_cluster(s, 4, 4, 2, 17, std::span<const double>(truth));
  CHECK(ordered.modes[0].mean_image[0] > 0.0);
  CHECK(*ordered.modes[0].mean_abs_error < *ordered.modes[1].mean_abs_error);

  for (std::size_t t = 1; t < mc.objective_trace.size(); ++t) {
    CHECK(mc.objective_trace[t] <= mc.objective_trace[t - 1] * (1.0 + 1e-12));
  }
}

TEST_CASE("mode_cluster with one mode and determinism") {
  std::mt19937_64 rng(21);
  Matrix s = gaussian_cloud(50, 6, 0.0, 1.0, rng);
  auto one = mode_cluster(s, 2, 3, 1, 3);
  auto all = posterior_stats(s, 2, 3);
  REQUIRE(one.modes.size() == 1);
  CHECK(one.modes[0].mean_image == all.mean_image);
  CHECK(one.modes[0].std_image == all.std_image);

  auto a = mode_cluster(s, 2, 3, 3, 42);
  auto b = mode_cluster(s, 2, 3, 3, 42);
  CHECK(a.labels == b.labels);
  CHECK(a.objective_trace == b.objective_trace);
  for (std::size_t t = 1; t < a.objective_trace.size(); ++t) {
    CHECK(a.objective_trace[t] <= a.objective_trace[t - 1] * (1.0 + 1e-12));
  }
  CHECK_THROWS_AS(mode_cluster(Matrix(1, 2), 1, 2, 2, 0), ConfigError);
}

TEST_CASE("variance study: LHS reduces additive variance") {
  const std::size_t n = 64, d = 2, reps = 500;
  auto rows = mc_variance_study({scheme(Scheme::srs), scheme(Scheme::lhs)}, TestFunction::additive, n,
                                d, reps, 8);
  REQUIRE(rows.size() == 2);
  // Var of the SRS mean of sum u_i is d / (12 n); the sample variance over
  // 500 replicates has relative sd about 0.063.
  double expected = static_cast<double>(d) / (12.0 * static_cast<double>(n));
  CHECK(std::abs(rows[0].variance / expected - 1.0) < 0.25);
  CHECK(rows[0].ratio_to_srs == doctest::Approx(1.0));
  CHECK(rows[1].ratio_to_srs < 0.2);
}

TEST_CASE("variance study: constant, interaction and guards") {
  auto constant = mc_variance_study({scheme(Scheme::srs), scheme(Scheme::lhs),
                                     scheme(Scheme::lpss), scheme(Scheme::sobol)},
                                    TestFunction::constant, 16, 2, 30, 1);
  for (const auto& r : constant) CHECK(r.variance == 0.0);

  SamplerConfig group = scheme(Scheme::pss);
  group.grouping = PssGrouping::single_group(2);
  auto inter = mc_variance_study({group}, TestFunction::interaction, 64, 2, 300, 2);
  CHECK(inter[0].ratio_to_srs < 1.0);

  CHECK_THROWS_AS(mc_variance_study({SamplerConfig{}}, TestFunction::additive, 16, 2, 29, 0), ConfigError);
  CHECK_THROWS_AS(parse_test_function("cubic"), ConfigError);
}

TEST_CASE("psnr of a uniform offset") {
  std::vector<double> truth{0.0, 0.5, 1.0, 0.25};
  std::vector<double> est = truth;
  for (double& v : est) v += 0.1;
  // range 1, mse 0.01 -> 20 dB
  CHECK(psnr(est, truth) == doctest::Approx(20.0));
  CHECK(std::isinf(psnr(truth, truth)));
  CHECK_THROWS_AS(psnr(std::vector<double>(3), truth), DimensionError);
}
