#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "flowrecon/error.hpp"
#include "flowrecon/variational.hpp"

using namespace flowrecon;

namespace {

// Conjugate Gaussian oracle for y = A x + N(0, s^2 I) with prior exp(-lam ||x||^2).
struct Gauss2 {
  double mean[2];
  double cov[2][2];
};

Gauss2 conjugate_posterior(const Matrix& a, const std::vector<double>& y, double s, double lam) {
  double p[2][2] = {{2 * lam, 0}, {0, 2 * lam}};
  double b[2] = {0, 0};
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (int i = 0; i < 2; ++i) {
      b[i] += a(r, i) * y[r] / (s * s);
      for (int j = 0; j < 2; ++j) p[i][j] += a(r, i) * a(r, j) / (s * s);
    }
  }
  const double det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
  Gauss2 g;
  g.cov[0][0] = p[1][1] / det;
  g.cov[1][1] = p[0][0] / det;
  g.cov[0][1] = g.cov[1][0] = -p[0][1] / det;
  for (int i = 0; i < 2; ++i) g.mean[i] = g.cov[i][0] * b[0] + g.cov[i][1] * b[1];
  return g;
}

Matrix lg_matrix() {
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(0, 1) = 0.5;
  a(1, 0) = 0.2;
  a(1, 1) = 1.5;
  return a;
}

InverseProblem linear_gaussian() {
  InverseProblem p;
  p.op = ForwardOperator::linear_matrix(lg_matrix());
  p.y = {0.1, -2.7};
  p.sigma = 0.5;
  p.reg = Regularizer::l2;
  p.reg_weight = 0.5;
  return p;
}

TrainConfig linear_gaussian_training(bool entropy) {
  TrainConfig cfg;
  cfg.steps = 3000;
  cfg.batch_size = 64;
  cfg.learning_rate = 2e-3;
  cfg.flow.hidden = 16;
  cfg.flow.elementwise_output = true;
  cfg.sampler.scheme = Scheme::lhs;
  cfg.include_entropy = entropy;
  cfg.seed = 4;
  return cfg;
}

void sample_moments(const Matrix& s, double mean[2], double cov[2][2]) {
  const double n = static_cast<double>(s.rows);
  mean[0] = mean[1] = 0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    mean[0] += s(i, 0) / n;
    mean[1] += s(i, 1) / n;
  }
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      double c = 0;
      for (std::size_t i = 0; i < s.rows; ++i) c += (s(i, a) - mean[a]) * (s(i, b) - mean[b]);
      cov[a][b] = c / (n - 1);
    }
  }
}

}  // namespace

TEST_CASE("l1 and tv regularizers") {
  Image c(4, 5, 0.3);
  CHECK(tv_reg(c) == 0.0);
  Image step(2, 2);
  step(0, 1) = 1;
  step(1, 1) = 1;
  CHECK(tv_reg(step) == 2.0);
  Image l(2, 2);
  l(0, 0) = -1;
  l(0, 1) = 2;
  l(1, 1) = 3;
  CHECK(l1_reg(l) == 6.0);

  std::vector<double> x{0.3, -1.2, 0.7, 2.0, -0.4, 0.9};
  for (Regularizer r : {Regularizer::l1, Regularizer::tv, Regularizer::l1_tv, Regularizer::l2}) {
    std::vector<double> g(6, 0.0);
    regularizer_value(r, x, 2, 3, g, 1.0);
    for (std::size_t i = 0; i < 6; ++i) {
      auto xp = x, xm = x;
      xp[i] += 1e-7;
      xm[i] -= 1e-7;
      double fd = (regularizer_value(r, xp, 2, 3, {}, 0) - regularizer_value(r, xm, 2, 3, {}, 0)) / 2e-7;
      CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
  CHECK(parse_regularizer("l1_tv") == Regularizer::l1_tv);
  CHECK_THROWS_AS(parse_regularizer("l3"), ConfigError);
  CHECK_THROWS_AS(regularizer_value(Regularizer::tv, x, 4, 4, {}, 1.0), DimensionError);
}

TEST_CASE("total_loss direct substitution") {
  FlowConfig fc;
  fc.dim = 3;
  auto identity = make_flow(fc, 0);
  InverseProblem p;
  p.op = ForwardOperator::identity(3);
  p.y = {0.5, -1.0, 2.0};
  p.sigma = 1.0 / std::sqrt(2.0);
  LatentBatch z{Matrix(1, 3), Scheme::srs, 0};
  z.points(0, 0) = 0.1;
  z.points(0, 1) = 0.2;
  z.points(0, 2) = -0.3;
  auto b = total_loss(identity, p, z);
  const double want = 0.4 * 0.4 + 1.2 * 1.2 + 2.3 * 2.3;
  CHECK(b.total == doctest::Approx(want).epsilon(1e-14));
  CHECK(b.entropy == 0.0);
  CHECK(b.total == b.fidelity + b.prior - b.entropy + b.fd_penalty);
  CHECK(b.negative_elbo == doctest::Approx(want + standard_normal_logpdf(z.points.row(0))).epsilon(1e-14));

  p.y = {0.1, 0.2, -0.3};
  auto zero = total_loss(identity, p, z);
  CHECK(zero.fidelity == 0.0);
  CHECK(zero.total == 0.0);
  CHECK_THROWS_AS(total_loss(identity, p, LatentBatch{Matrix(1, 2), Scheme::srs, 0}), DimensionError);
}

TEST_CASE("entropy of a pinned scale-2 layer") {
  LayerDesc d;
  d.kind = LayerKind::affine_elementwise;
  d.transformed = {0, 1};
  auto f = single_layer_flow(2, d, 0);
  auto raw = f.params().segment("L0.raw");
  raw[0] = raw[2] = 3.0 * std::atanh(std::log(2.0) / 3.0);
  InverseProblem p;
  p.op = ForwardOperator::identity(2);
  p.y = {0, 0};
  auto z = to_gaussian(srs(17, 2, 5));
  CHECK(total_loss(f, p, z).entropy == doctest::Approx(2 * std::log(2.0)).epsilon(1e-14));

  // A two-component mixture of identical flows has the same entropy.
  BoostedFlow twin(f);
  twin.components.push_back(f);
  twin.betas.push_back(0.4);
  CHECK(total_loss(twin, p, z, true, 3).entropy == doctest::Approx(2 * std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("fit_posterior with zero steps returns the identity flow") {
  auto p = linear_gaussian();
  TrainConfig cfg;
  cfg.steps = 0;
  auto fit = fit_posterior(p, cfg);
  CHECK(fit.history.empty());
  REQUIRE(fit.model.size() == 1);
  auto z = to_gaussian(lhs(8, 2, 1));
  auto [x, ld] = fit.model.components[0].forward(z.points);
  CHECK(x == z.points);
  for (double v : ld) CHECK(v == 0.0);
}

TEST_CASE("posterior sampling contract") {
  FlowConfig fc;
  fc.dim = 3;
  BoostedFlow id(make_flow(fc, 2));
  SamplerConfig lhs_cfg;
  lhs_cfg.scheme = Scheme::lhs;
  auto s = posterior_sample(id, 1000, lhs_cfg, 9);
  CHECK(s.samples.rows == 1000);
  CHECK(s.samples == to_gaussian(make_design(lhs_cfg, 1000, 3, 9)).points);
  CHECK(posterior_sample(id, 1000, lhs_cfg, 9).samples == s.samples);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(s.log_densities[i] == doctest::Approx(standard_normal_logpdf(s.samples.row(i))).epsilon(1e-14));
  }
  CHECK_THROWS_AS(posterior_sample(id, 0, lhs_cfg, 1), ConfigError);
}

TEST_CASE("non-finite loss aborts with the step index") {
  Matrix a(1, 2);
  a(0, 0) = NAN;
  InverseProblem p;
  p.op = ForwardOperator::linear_matrix(a);
  p.y = {1.0};
  TrainConfig cfg;
  cfg.steps = 5;
  try {
    fit_posterior(p, cfg);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
  InverseProblem bad = linear_gaussian();
  bad.y.push_back(0.0);
  CHECK_THROWS_AS(fit_posterior(bad, cfg), DimensionError);
  bad = linear_gaussian();
  bad.sigma = 0.0;
  CHECK_THROWS_AS(fit_posterior(bad, cfg), ConfigError);
}

TEST_CASE("linear-Gaussian posterior matches the conjugate formula") {
  auto p = linear_gaussian();
  auto oracle = conjugate_posterior(lg_matrix(), p.y, p.sigma, p.reg_weight);
  auto fit = fit_posterior(p, linear_gaussian_training(true));
  auto s = posterior_sample(fit.model, 10000, SamplerConfig{}, 77);
  double mean[2], cov[2][2];
  sample_moments(s.samples, mean, cov);
  const double mean_err = std::hypot(mean[0] - oracle.mean[0], mean[1] - oracle.mean[1]) /
                          std::hypot(oracle.mean[0], oracle.mean[1]);
  double num = 0, den = 0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      num += std::pow(cov[a][b] - oracle.cov[a][b], 2);
      den += std::pow(oracle.cov[a][b], 2);
    }
  }
  MESSAGE("mean error " << mean_err << ", covariance error " << std::sqrt(num / den));
  CHECK(mean_err < 0.05);
  CHECK(std::sqrt(num / den) < 0.10);

  // Loss decreases: moving average at the end is below the one at step 100.
  auto avg = [&](std::size_t end) {
    double t = 0;
    for (std::size_t i = end - 50; i < end; ++i) t += fit.history[i].total;
    return t / 50;
  };
  CHECK(avg(fit.history.size()) < avg(100));

  // Without the entropy term the samples collapse toward a point.
  auto collapsed = fit_posterior(p, linear_gaussian_training(false));
  auto sc = posterior_sample(collapsed.model, 10000, SamplerConfig{}, 77);
  double m2[2], c2[2][2];
  sample_moments(sc.samples, m2, c2);
  const double std_full = std::sqrt(cov[0][0] + cov[1][1]);
  const double std_collapsed = std::sqrt(c2[0][0] + c2[1][1]);
  MESSAGE("std with entropy " << std_full << ", without " << std_collapsed);
  CHECK(std_full >= 10.0 * std_collapsed);
}

TEST_CASE("loss history csv") {
  std::vector<LossBreakdown> h(2);
  h[1].total = 1.5;
  auto csv = loss_history_csv(h);
  CHECK(csv.rfind("step,fidelity,prior,entropy,fd_penalty,total\n", 0) == 0);
  CHECK(csv.find("\n1,0,0,0,0,1.5\n") != std::string::npos);
}

TEST_CASE("lpss loss estimates vary less than srs on a 2D target") {
  InverseProblem p;
  p.op = ForwardOperator::image_energy(make_phantom(PhantomKind::two_blob, 16));
  FlowConfig fc;
  fc.dim = 2;
  fc.hidden = 16;
  fc.elementwise_output = true;
  fc.output_shift = 0.5;
  fc.output_log_scale = std::log(0.25);
  auto flow = make_flow(fc, 3);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& v : flow.params().values()) v += nd(rng);
  auto replicate_var = [&](Scheme s) {
    SamplerConfig sc;
    sc.scheme = s;
    std::vector<double> t;
    for (std::uint64_t r = 0; r < 200; ++r) t.push_back(total_loss(flow, p, to_gaussian(make_design(sc, 64, 2, r))).total);
    double m = std::accumulate(t.begin(), t.end(), 0.0) / 200.0, v = 0;
    for (double x : t) v += (x - m) * (x - m);
    return v / 199.0;
  };
  const double v_srs = replicate_var(Scheme::srs), v_lpss = replicate_var(Scheme::lpss);
  MESSAGE("loss variance srs " << v_srs << ", lpss " << v_lpss);
  CHECK(v_lpss <= v_srs);
}
