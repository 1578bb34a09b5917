#include "flowrecon/boosting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "binary_io.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/parallel.hpp"

namespace flowrecon {

namespace {
constexpr std::uint64_t kSelectStream = 0x53454c4543540001ull;
constexpr std::uint64_t kFdStream = 0x4644000000000001ull;
}  // namespace

BoostedFlow::BoostedFlow(FlowStack first) {
  components.push_back(std::move(first));
  betas.push_back(1.0);
}

void BoostedFlow::validate() const {
  if (components.empty()) throw InvariantError("boosted flow has no components");
  if (betas.size() != components.size()) throw InvariantError("one stage weight per component is required");
  if (betas.front() != 1.0) throw InvariantError("the first stage weight must be 1");
  for (const auto& c : components) {
    if (c.dim() != components.front().dim()) throw InvariantError("components disagree on dimension");
  }
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw InvariantError("stage weight outside [0, 1]");
  }
}

std::vector<double> effective_weights(const std::vector<double>& betas) {
  if (betas.empty()) throw InvariantError("no stage weights");
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw InvariantError("stage weight outside [0, 1]");
  }
  const std::size_t c = betas.size();
  std::vector<double> w(c, 0.0);
  double keep = 1.0, rest = 0.0;
  for (std::size_t j = c; j-- > 1;) {
    w[j] = betas[j] * keep;
    keep *= 1.0 - betas[j];
    rest += w[j];
  }
  w[0] = std::max(0.0, 1.0 - rest);
  return w;
}

std::vector<double> effective_weights(const BoostedFlow& bf) {
  bf.validate();
  return effective_weights(bf.betas);
}

namespace {

// Per-component log densities, rethrowing numeric failures with the index.
std::vector<std::vector<double>> component_log_densities(const BoostedFlow& bf, const Matrix& x,
                                                         const std::vector<double>& w,
                                                         std::vector<Matrix>* grads) {
  std::vector<std::vector<double>> lp(bf.size());
  if (grads) grads->assign(bf.size(), Matrix());
  for (std::size_t j = 0; j < bf.size(); ++j) {
    if (w[j] <= 0.0) continue;
    try {
      if (grads) {
        (*grads)[j] = bf.components[j].log_density_grad_x(x, &lp[j]);
      } else {
        lp[j] = bf.components[j].log_density(x);
      }
    } catch (const NumericError& e) {
      throw NumericError("mixture component " + std::to_string(j) + ": " + e.what());
    }
  }
  return lp;
}

}  // namespace

std::vector<double> mixture_log_density(const BoostedFlow& bf, const Matrix& x) {
  auto w = effective_weights(bf);
  if (x.cols != bf.dim()) throw DimensionError("mixture input width does not match the flow");
  auto lp = component_log_densities(bf, x, w, nullptr);
  std::vector<double> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] > 0.0) m = std::max(m, std::log(w[j]) + lp[j][i]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] > 0.0) s += std::exp(std::log(w[j]) + lp[j][i] - m);
    }
    out[i] = m + std::log(s);
  }
  return out;
}

Matrix mixture_log_density_grad_x(const BoostedFlow& bf, const Matrix& x, std::vector<double>* logq) {
  auto w = effective_weights(bf);
  if (x.cols != bf.dim()) throw DimensionError("mixture input width does not match the flow");
  std::vector<Matrix> g;
  auto lp = component_log_densities(bf, x, w, &g);
  Matrix out(x.rows, x.cols);
  if (logq) logq->assign(x.rows, 0.0);
  std::vector<double> a(w.size());
  for (std::size_t i = 0; i < x.rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < w.size(); ++j) {
      a[j] = w[j] > 0.0 ? std::log(w[j]) + lp[j][i] : -std::numeric_limits<double>::infinity();
      m = std::max(m, a[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] > 0.0) s += std::exp(a[j] - m);
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] <= 0.0) continue;
      const double r = std::exp(a[j] - m) / s;
      for (std::size_t k = 0; k < x.cols; ++k) out(i, k) += r * g[j](i, k);
    }
    if (logq) (*logq)[i] = m + std::log(s);
  }
  return out;
}

MixtureDraw mixture_sample(const BoostedFlow& bf, const UnitDesign& design, std::uint64_t seed) {
  if (design.points.cols != bf.dim()) throw DimensionError("design width does not match the flow");
  return mixture_push(bf, to_gaussian(design).points, seed);
}

MixtureDraw mixture_push(const BoostedFlow& bf, const Matrix& z, std::uint64_t seed) {
  auto w = effective_weights(bf);
  const std::size_t d = bf.dim();
  if (z.cols != d) throw DimensionError("latent width does not match the flow");
  const std::size_t n = z.rows;
  MixtureDraw out{Matrix(n, d), std::vector<double>(n), std::vector<std::size_t>(n)};
  std::vector<double> cum(w.size());
  std::partial_sum(w.begin(), w.end(), cum.begin());
  std::mt19937_64 pick(mix_seed(seed, kSelectStream));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform01(pick()) * cum.back();
    std::size_t j = 0;
    while (j + 1 < cum.size() && (u >= cum[j] || w[j] <= 0.0)) ++j;
    out.component[i] = j;
  }
  parallel_for(n, [&](std::size_t i) {
    out.logdet[i] = bf.components[out.component[i]].forward_row(z.row(i), out.x.row(i), nullptr);
  });
  return out;
}

BoostedFlow fit_new_component(const BoostedFlow& bf, FlowStack fresh, const EnergyFn& energy,
                              const ComponentFitConfig& cfg, std::vector<double>* history) {
  bf.validate();
  if (fresh.dim() != bf.dim()) throw DimensionError("new component dimension differs from the mixture");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  BoostedFlow out = bf;
  out.components.push_back(std::move(fresh));
  out.betas.push_back(1.0 / static_cast<double>(out.components.size()));
  if (cfg.steps == 0) return out;

  FlowStack& comp = out.components.back();
  const std::size_t d = comp.dim(), bs = cfg.batch_size;
  AdamState adam = AdamState::for_params(comp.params().size(), cfg.learning_rate);
  std::mt19937_64 fd_rng(mix_seed(cfg.seed, kFdStream));
  std::vector<double> grad(comp.params().size());
  const double inv_n = 1.0 / static_cast<double>(bs);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto z = to_gaussian(make_design(cfg.sampler, bs, d, design_stream(cfg.sampler, cfg.seed, step))).points;
    Matrix x(bs, d);
    std::vector<RowTrace> traces(bs);
    std::vector<double> row_loss(bs);
    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    try {
      parallel_for(bs, [&](std::size_t i) { comp.forward_row(z.row(i), x.row(i), &traces[i]); });
      // d/dphi of the mixture objective is the pathwise term only: the score
      // term integrates to zero.
      std::vector<double> logq;
      Matrix glogq = mixture_log_density_grad_x(out, x, &logq);
      reduce_rows(bs, grad, [&](std::size_t i, std::span<double> g) {
        std::vector<double> gx(d, 0.0);
        row_loss[i] = energy(x.row(i), gx) + logq[i];
        for (std::size_t k = 0; k < d; ++k) gx[k] = (gx[k] + glogq(i, k)) * inv_n;
        comp.backward_forward(traces[i], gx, 0.0, {}, g);
      });
      for (double v : row_loss) loss += v;
      loss *= inv_n;
      if (cfg.fd.weight > 0.0) {
        auto est = fd_lipschitz_penalty(comp, z, cfg.fd, fd_rng);
        loss += cfg.fd.weight * est.total();
        fd_penalty_gradient(comp, z, cfg.fd, est, grad);
      }
    } catch (const NumericError& e) {
      throw TrainingError(std::string("new component fit diverged: ") + e.what(), step);
    }
    if (!std::isfinite(loss)) throw TrainingError("new component objective is not finite", step);
    for (double v : grad) {
      if (!std::isfinite(v)) throw TrainingError("new component gradient is not finite", step);
    }
    if (history) history->push_back(loss);
    adam_step(adam, comp.params().values(), grad);
  }
  return out;
}

XiEstimator mixture_xi_estimator(const EnergyFn& energy, const WeightUpdateConfig& cfg) {
  return [energy, cfg](const BoostedFlow& bf, std::size_t iter) {
    const std::size_t n = cfg.mc_samples, d = bf.dim();
    BoostedFlow prev;
    prev.components.assign(bf.components.begin(), bf.components.end() - 1);
    prev.betas.assign(bf.betas.begin(), bf.betas.end() - 1);

    const std::uint64_t base = mix_seed(cfg.seed, iter);
    auto z_new = to_gaussian(make_design(cfg.sampler, n, d, design_stream(cfg.sampler, base, 0))).points;
    Matrix x_new(n, d);
    parallel_for(n, [&](std::size_t i) { bf.components.back().forward_row(z_new.row(i), x_new.row(i), nullptr); });
    auto x_prev = mixture_sample(prev, make_design(cfg.sampler, n, d, design_stream(cfg.sampler, base, 1)), mix_seed(base, 2)).x;

    auto mean_xi = [&](const Matrix& x) {
      auto lq = mixture_log_density(bf, x);
      double s = 0.0;
      for (std::size_t i = 0; i < x.rows; ++i) s += lq[i] + energy(x.row(i), {});
      return s / static_cast<double>(x.rows);
    };
    return std::pair{mean_xi(x_new), mean_xi(x_prev)};
  };
}

std::pair<BoostedFlow, WeightTrace> update_weight(const BoostedFlow& bf, const XiEstimator& xi,
                                                  const WeightUpdateConfig& cfg) {
  bf.validate();
  if (bf.size() < 2) throw ConfigError("weight update needs at least two components");
  if (!(cfg.step > 0.0) || !(cfg.tolerance > 0.0) || cfg.max_iters == 0 || cfg.mc_samples == 0) {
    throw ConfigError("weight update settings must be positive");
  }
  BoostedFlow out = bf;
  WeightTrace trace;
  double beta = out.betas.back();
  trace.betas.push_back(beta);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    auto [e_new, e_prev] = xi(out, it);
    const double g = e_new - e_prev;
    if (!std::isfinite(g)) throw NumericError("weight gradient estimate is not finite");
    trace.gradients.push_back(g);
    const double next = std::clamp(beta - cfg.step * g, 0.0, 1.0);
    out.betas.back() = next;
    trace.betas.push_back(next);
    if (std::abs(next - beta) < cfg.tolerance) {
      trace.converged = true;
      break;
    }
    beta = next;
  }
  return {std::move(out), std::move(trace)};
}

namespace {
constexpr std::uint32_t kBoostMagic = 0x46425246;  // "FRBF"
constexpr std::uint32_t kBoostVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const BoostedFlow& bf) {
  bf.validate();
  detail::ByteWriter w;
  w.put<std::uint32_t>(kBoostMagic);
  w.put<std::uint32_t>(kBoostVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bf.size()));
  for (std::size_t j = 0; j < bf.size(); ++j) {
    w.put<double>(bf.betas[j]);
    auto blob = serialize(bf.components[j]);
    w.put<std::uint64_t>(blob.size());
    w.put_bytes(blob);
  }
  return w.take();
}

BoostedFlow deserialize_boosted(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.get<std::uint32_t>() != kBoostMagic) throw FormatError("not a boosted flow blob");
  if (r.get<std::uint32_t>() != kBoostVersion) throw FormatError("unsupported boosted flow version");
  const auto c = r.get<std::uint32_t>();
  if (c == 0) throw FormatError("boosted flow blob has no components");
  BoostedFlow bf;
  for (std::uint32_t j = 0; j < c; ++j) {
    bf.betas.push_back(r.get<double>());
    const auto len = r.get<std::uint64_t>();
    bf.components.push_back(deserialize_flow(r.get_bytes(static_cast<std::size_t>(len))));
  }
  if (!r.done()) throw FormatError("trailing bytes after boosted flow blob");
  try {
    bf.validate();
  } catch (const InvariantError& e) {
    throw FormatError(std::string("invalid boosted flow blob: ") + e.what());
  }
  return bf;
}

}  // namespace flowrecon
