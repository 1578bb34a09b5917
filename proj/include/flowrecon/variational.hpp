#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowrecon/boosting.hpp"
#include "flowrecon/flows.hpp"
#include "flowrecon/forward_ops.hpp"
#include "flowrecon/sampling.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// Regularizers

/// l2 is ||x||^2, the Gaussian-prior case used for closed-form checks.
enum class Regularizer { none, l1, tv, l1_tv, l2 };
Regularizer parse_regularizer(std::string_view name);
std::string_view regularizer_name(Regularizer r);

double l1_reg(const Image& image);
/// Anisotropic: sum |x[r][c+1] - x[r][c]| + sum |x[r+1][c] - x[r][c]|.
double tv_reg(const Image& image);

/// Value of the regularizer on a flattened h x w image; adds a subgradient
/// (sign(0) = 0) times `scale` into grad when grad is non-empty.
double regularizer_value(Regularizer r, std::span<const double> x, std::size_t h, std::size_t w,
                         std::span<double> grad, double scale);

// ---------------------------------------------------------------------------
// Problem and loss

struct InverseProblem {
  ForwardOperator op = ForwardOperator::identity(1);
  std::vector<double> y;
  double sigma = 1.0;  // <= 0 means per-output sigma from the operator
  Regularizer reg = Regularizer::none;
  double reg_weight = 0.0;
  std::optional<Image> ground_truth;  // evaluation only

  std::size_t dim() const { return op.input_size(); }
  /// Image shape of x; a 1 x n row when the operator has no image layout.
  std::size_t height() const;
  std::size_t width() const;

  /// Throws ConfigError / DimensionError on inconsistent settings.
  void validate() const;

  /// fidelity(x) + reg_weight * omega(x); adds the gradient when non-empty.
  double energy(std::span<const double> x, std::span<double> grad) const;
  double fidelity(std::span<const double> x) const;
  double prior(std::span<const double> x) const;
  EnergyFn energy_fn() const;
};

/// total = fidelity + prior - entropy + fd_penalty, with entropy dropped from
/// the total when the entropy term is disabled. negative_elbo is
/// fidelity + prior + mean log q(x), i.e. it keeps log pi(z) for C = 1.
struct LossBreakdown {
  double fidelity = 0.0;
  double prior = 0.0;
  double entropy = 0.0;
  double fd_penalty = 0.0;
  double total = 0.0;
  double negative_elbo = 0.0;
};

/// Entropy is mean logdet for a single flow and mean[log pi(z) - log q(x)]
/// for mixtures. For mixtures `select_seed` drives component selection.
LossBreakdown total_loss(const BoostedFlow& model, const InverseProblem& problem, const LatentBatch& latent,
                         bool include_entropy = true, std::uint64_t select_seed = 0);
LossBreakdown total_loss(const FlowStack& flow, const InverseProblem& problem, const LatentBatch& latent,
                         bool include_entropy = true);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  SamplerConfig sampler;
  FdPenaltyConfig fd;
  FlowConfig flow;  // dim and image_width are filled in from the problem
  std::size_t stages = 1;
  std::size_t stage_steps = 0;  // per added component; 0 means `steps`
  WeightUpdateConfig weights;
  bool include_entropy = true;
  std::uint64_t seed = 0;
};

struct PosteriorFit {
  BoostedFlow model;
  std::vector<LossBreakdown> history;  // one per optimizer step of the first stage, then one per later stage
  std::vector<WeightTrace> weight_traces;
};

/// Trains a single flow for cfg.steps, then adds components 2..stages by
/// fit_new_component followed by update_weight. Each optimizer step uses a
/// fresh latent design. Throws TrainingError (with the step index and the
/// last finite breakdown in the message) on divergence.
PosteriorFit fit_posterior(const InverseProblem& problem, const TrainConfig& cfg);

/// The flow make_flow would build for this problem and configuration.
FlowConfig resolved_flow_config(const InverseProblem& problem, const TrainConfig& cfg);

std::string loss_history_csv(const std::vector<LossBreakdown>& history);

// ---------------------------------------------------------------------------
// Posterior sampling

struct PosteriorSamples {
  Matrix samples;
  std::size_t height = 0;  // 0 when the samples are not images
  std::size_t width = 0;
  std::vector<double> log_densities;
};

PosteriorSamples posterior_sample(const BoostedFlow& model, std::size_t n, const SamplerConfig& sampler,
                                  std::uint64_t seed, std::size_t height = 0, std::size_t width = 0);

}  // namespace flowrecon
