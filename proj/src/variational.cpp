#include "flowrecon/variational.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "flowrecon/error.hpp"
#include "flowrecon/parallel.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// Regularizers

Regularizer parse_regularizer(std::string_view name) {
  if (name == "none") return Regularizer::none;
  if (name == "l1") return Regularizer::l1;
  if (name == "tv") return Regularizer::tv;
  if (name == "l1_tv" || name == "l1+tv") return Regularizer::l1_tv;
  if (name == "l2") return Regularizer::l2;
  throw ConfigError("unknown regularizer '" + std::string(name) + "'");
}

std::string_view regularizer_name(Regularizer r) {
  switch (r) {
    case Regularizer::none: return "none";
    case Regularizer::l1: return "l1";
    case Regularizer::tv: return "tv";
    case Regularizer::l1_tv: return "l1_tv";
    case Regularizer::l2: return "l2";
  }
  return "?";
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double l1_part(std::span<const double> x, std::span<double> grad, double scale) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::abs(x[i]);
    if (!grad.empty()) grad[i] += scale * sign(x[i]);
  }
  return s;
}

double tv_part(std::span<const double> x, std::size_t h, std::size_t w, std::span<double> grad, double scale) {
  double s = 0.0;
  auto edge = [&](std::size_t a, std::size_t b) {
    const double d = x[b] - x[a];
    s += std::abs(d);
    if (!grad.empty()) {
      grad[b] += scale * sign(d);
      grad[a] -= scale * sign(d);
    }
  };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (c + 1 < w) edge(r * w + c, r * w + c + 1);
      if (r + 1 < h) edge(r * w + c, (r + 1) * w + c);
    }
  }
  return s;
}

}  // namespace

double l1_reg(const Image& image) { return l1_part(image.data, {}, 0.0); }

double tv_reg(const Image& image) { return tv_part(image.data, image.rows, image.cols, {}, 0.0); }

double regularizer_value(Regularizer r, std::span<const double> x, std::size_t h, std::size_t w,
                         std::span<double> grad, double scale) {
  if (h * w != x.size()) throw DimensionError("regularizer shape does not match the input");
  switch (r) {
    case Regularizer::none: return 0.0;
    case Regularizer::l1: return l1_part(x, grad, scale);
    case Regularizer::tv: return tv_part(x, h, w, grad, scale);
    case Regularizer::l1_tv: return l1_part(x, grad, scale) + tv_part(x, h, w, grad, scale);
    case Regularizer::l2: {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        s += x[i] * x[i];
        if (!grad.empty()) grad[i] += 2.0 * scale * x[i];
      }
      return s;
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// InverseProblem

std::size_t InverseProblem::height() const { return op.image_height() > 0 ? op.image_height() : 1; }
std::size_t InverseProblem::width() const { return op.image_width() > 0 ? op.image_width() : dim(); }

void InverseProblem::validate() const {
  if (op.kind() == OperatorKind::image_energy) {
    if (!y.empty()) throw DimensionError("an image-energy problem takes no measurement");
  } else {
    if (y.size() != op.output_size()) {
      throw DimensionError("measurement length " + std::to_string(y.size()) + " does not match operator output " +
                           std::to_string(op.output_size()));
    }
    if (!(sigma > 0.0)) {
      const auto& s = op.output_sigma();
      if (s.empty() || !std::all_of(s.begin(), s.end(), [](double v) { return v > 0.0; })) {
        throw ConfigError("noise sigma must be positive");
      }
    }
    for (double v : y) {
      if (!std::isfinite(v)) throw ConfigError("measurement contains a non-finite value");
    }
  }
  if (!(reg_weight >= 0.0) || !std::isfinite(reg_weight)) throw ConfigError("reg_weight must be finite and >= 0");
  if (ground_truth && ground_truth->data.size() != dim()) {
    throw DimensionError("ground truth size does not match the problem");
  }
}

double InverseProblem::fidelity(std::span<const double> x) const { return op.fidelity(x, y, sigma, {}); }

double InverseProblem::prior(std::span<const double> x) const {
  if (reg == Regularizer::none || reg_weight == 0.0) return 0.0;
  return reg_weight * regularizer_value(reg, x, height(), width(), {}, 0.0);
}

double InverseProblem::energy(std::span<const double> x, std::span<double> grad) const {
  double e = op.fidelity(x, y, sigma, grad);
  if (reg != Regularizer::none && reg_weight != 0.0) {
    e += reg_weight * regularizer_value(reg, x, height(), width(), grad, reg_weight);
  }
  return e;
}

EnergyFn InverseProblem::energy_fn() const {
  return [this](std::span<const double> x, std::span<double> g) { return energy(x, g); };
}

// ---------------------------------------------------------------------------
// Loss

namespace {

void check_row(std::span<const double> x, std::size_t i) {
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericError("non-finite flow output at sample " + std::to_string(i));
  }
}

}  // namespace

LossBreakdown total_loss(const FlowStack& flow, const InverseProblem& problem, const LatentBatch& latent,
                         bool include_entropy) {
  const auto& z = latent.points;
  if (z.cols != flow.dim()) throw DimensionError("latent width does not match the flow");
  if (flow.dim() != problem.dim()) throw DimensionError("flow dimension does not match the problem");
  const std::size_t n = z.rows;
  if (n == 0) throw ConfigError("empty latent batch");
  std::vector<double> fid(n), pri(n), ld(n), lpi(n);
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> x(flow.dim());
    ld[i] = flow.forward_row(z.row(i), x, nullptr);
    check_row(x, i);
    fid[i] = problem.fidelity(x);
    pri[i] = problem.prior(x);
    lpi[i] = standard_normal_logpdf(z.row(i));
  });
  LossBreakdown b;
  double logq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    b.fidelity += fid[i];
    b.prior += pri[i];
    b.entropy += ld[i];
    logq += lpi[i] - ld[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  b.fidelity *= inv;
  b.prior *= inv;
  b.entropy *= inv;
  b.total = b.fidelity + b.prior - (include_entropy ? b.entropy : 0.0);
  b.negative_elbo = b.fidelity + b.prior + logq * inv;
  return b;
}

LossBreakdown total_loss(const BoostedFlow& model, const InverseProblem& problem, const LatentBatch& latent,
                         bool include_entropy, std::uint64_t select_seed) {
  model.validate();
  if (model.size() == 1) return total_loss(model.components.front(), problem, latent, include_entropy);
  if (model.dim() != problem.dim()) throw DimensionError("model dimension does not match the problem");
  const auto& z = latent.points;
  auto draw = mixture_push(model, z, select_seed);
  const std::size_t n = z.rows;
  for (std::size_t i = 0; i < n; ++i) check_row(draw.x.row(i), i);
  auto logq = mixture_log_density(model, draw.x);
  std::vector<double> fid(n), pri(n);
  parallel_for(n, [&](std::size_t i) {
    fid[i] = problem.fidelity(draw.x.row(i));
    pri[i] = problem.prior(draw.x.row(i));
  });
  LossBreakdown b;
  double mean_logq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    b.fidelity += fid[i];
    b.prior += pri[i];
    b.entropy += standard_normal_logpdf(z.row(i)) - logq[i];
    mean_logq += logq[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  b.fidelity *= inv;
  b.prior *= inv;
  b.entropy *= inv;
  b.total = b.fidelity + b.prior - (include_entropy ? b.entropy : 0.0);
  b.negative_elbo = b.fidelity + b.prior + mean_logq * inv;
  return b;
}

// ---------------------------------------------------------------------------
// Training

FlowConfig resolved_flow_config(const InverseProblem& problem, const TrainConfig& cfg) {
  FlowConfig f = cfg.flow;
  f.dim = problem.dim();
  if (problem.op.image_width() > 0 && problem.op.kind() != OperatorKind::image_energy) {
    f.image_width = problem.op.image_width();
  } else {
    f.image_width = 0;
  }
  return f;
}

namespace {

std::string describe(const LossBreakdown& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "last finite loss: fidelity=%.6g prior=%.6g entropy=%.6g fd_penalty=%.6g total=%.6g",
                b.fidelity, b.prior, b.entropy, b.fd_penalty, b.total);
  return buf;
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.fidelity) && std::isfinite(b.prior) && std::isfinite(b.entropy) &&
         std::isfinite(b.fd_penalty) && std::isfinite(b.total);
}

}  // namespace

PosteriorFit fit_posterior(const InverseProblem& problem, const TrainConfig& cfg) {
  problem.validate();
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (cfg.stages == 0) throw ConfigError("stages must be at least 1");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  const FlowConfig fcfg = resolved_flow_config(problem, cfg);
  PosteriorFit out{BoostedFlow(make_flow(fcfg, mix_seed(cfg.seed, 0))), {}, {}};
  FlowStack& flow = out.model.components.front();
  const std::size_t d = flow.dim(), bs = cfg.batch_size;
  const std::size_t h = problem.height(), w = problem.width();
  AdamState adam = AdamState::for_params(flow.params().size(), cfg.learning_rate);
  std::mt19937_64 fd_rng(mix_seed(cfg.seed, 0xfd));
  std::vector<double> grad(flow.params().size());
  const double inv_n = 1.0 / static_cast<double>(bs);
  LossBreakdown last;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto z = to_gaussian(make_design(cfg.sampler, bs, d, design_stream(cfg.sampler, cfg.seed, step))).points;
    std::vector<double> fid(bs), pri(bs), ld(bs), lpi(bs);
    std::fill(grad.begin(), grad.end(), 0.0);
    LossBreakdown b;
    try {
      reduce_rows(bs, grad, [&](std::size_t i, std::span<double> g) {
        RowTrace tr;
        std::vector<double> x(d), gx(d, 0.0);
        ld[i] = flow.forward_row(z.row(i), x, &tr);
        check_row(x, i);
        fid[i] = problem.op.fidelity(x, problem.y, problem.sigma, gx);
        pri[i] = 0.0;
        if (problem.reg != Regularizer::none && problem.reg_weight != 0.0) {
          pri[i] = problem.reg_weight * regularizer_value(problem.reg, x, h, w, gx, problem.reg_weight);
        }
        lpi[i] = standard_normal_logpdf(z.row(i));
        for (auto& v : gx) v *= inv_n;
        flow.backward_forward(tr, gx, cfg.include_entropy ? -inv_n : 0.0, {}, g);
      });
      double logq = 0.0;
      for (std::size_t i = 0; i < bs; ++i) {
        b.fidelity += fid[i];
        b.prior += pri[i];
        b.entropy += ld[i];
        logq += lpi[i] - ld[i];
      }
      b.fidelity *= inv_n;
      b.prior *= inv_n;
      b.entropy *= inv_n;
      if (cfg.fd.weight > 0.0) {
        auto est = fd_lipschitz_penalty(flow, z, cfg.fd, fd_rng);
        b.fd_penalty = cfg.fd.weight * est.total();
        fd_penalty_gradient(flow, z, cfg.fd, est, grad);
      }
      b.total = b.fidelity + b.prior - (cfg.include_entropy ? b.entropy : 0.0) + b.fd_penalty;
      b.negative_elbo = b.fidelity + b.prior + logq * inv_n;
    } catch (const NumericError& e) {
      throw TrainingError(std::string("posterior fit diverged: ") + e.what() + "; " + describe(last), step);
    }
    if (!finite(b)) throw TrainingError("posterior loss is not finite; " + describe(last), step);
    for (double v : grad) {
      if (!std::isfinite(v)) throw TrainingError("posterior gradient is not finite; " + describe(last), step);
    }
    out.history.push_back(b);
    last = b;
    adam_step(adam, flow.params().values(), grad);
  }

  const auto energy = problem.energy_fn();
  for (std::size_t c = 2; c <= cfg.stages; ++c) {
    ComponentFitConfig ccfg;
    ccfg.steps = cfg.stage_steps > 0 ? cfg.stage_steps : cfg.steps;
    ccfg.batch_size = bs;
    ccfg.learning_rate = cfg.learning_rate;
    ccfg.sampler = cfg.sampler;
    ccfg.fd = cfg.fd;
    ccfg.seed = mix_seed(cfg.seed, 1000 + c);
    out.model = fit_new_component(out.model, make_flow(fcfg, mix_seed(cfg.seed, c)), energy, ccfg);
    WeightUpdateConfig wcfg = cfg.weights;
    wcfg.seed = mix_seed(cfg.weights.seed ^ cfg.seed, 2000 + c);
    auto [tuned, trace] = update_weight(out.model, mixture_xi_estimator(energy, wcfg), wcfg);
    out.model = std::move(tuned);
    out.weight_traces.push_back(std::move(trace));
    auto z = to_gaussian(make_design(cfg.sampler, bs, d, design_stream(cfg.sampler, cfg.seed, 3000 + c)));
    auto b = total_loss(out.model, problem, z, cfg.include_entropy, mix_seed(cfg.seed, 4000 + c));
    if (!finite(b)) throw TrainingError("mixture loss is not finite after stage " + std::to_string(c), c);
    out.history.push_back(b);
  }
  return out;
}

std::string loss_history_csv(const std::vector<LossBreakdown>& history) {
  std::string s = "step,fidelity,prior,entropy,fd_penalty,total\n";
  char buf[256];
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& b = history[i];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", i, b.fidelity, b.prior, b.entropy,
                  b.fd_penalty, b.total);
    s += buf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Sampling

PosteriorSamples posterior_sample(const BoostedFlow& model, std::size_t n, const SamplerConfig& sampler,
                                  std::uint64_t seed, std::size_t height, std::size_t width) {
  model.validate();
  if (n == 0) throw ConfigError("sample count must be positive");
  const std::size_t d = model.dim();
  if (height * width != 0 && height * width != d) throw DimensionError("image shape does not match the model");
  auto latent = to_gaussian(make_design(sampler, n, d, seed)).points;
  auto draw = mixture_push(model, latent, mix_seed(seed, 1));
  PosteriorSamples out{std::move(draw.x), height, width, {}};
  if (model.size() == 1) {
    out.log_densities.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.log_densities[i] = standard_normal_logpdf(latent.row(i)) - draw.logdet[i];
  } else {
    out.log_densities = mixture_log_density(model, out.samples);
  }
  return out;
}

}  // namespace flowrecon
