#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "flowrecon/flows.hpp"
#include "flowrecon/sampling.hpp"

namespace flowrecon {

/// Mixture of flows built stage by stage. Component c enters with stage
/// weight beta_c, shrinking everything before it by (1 - beta_c). The first
/// stage weight is always 1.
struct BoostedFlow {
  std::vector<FlowStack> components;
  std::vector<double> betas;

  BoostedFlow() = default;
  explicit BoostedFlow(FlowStack first);

  std::size_t size() const { return components.size(); }
  std::size_t dim() const { return components.empty() ? 0 : components.front().dim(); }

  /// Throws InvariantError on an empty mixture, mismatched dimensions,
  /// beta_1 != 1 or any beta outside [0, 1].
  void validate() const;

  friend bool operator==(const BoostedFlow&, const BoostedFlow&) = default;
};

/// w_j = beta_j * prod_{c > j} (1 - beta_c). The first weight is the residual
/// 1 - sum of the others so the vector sums to one.
std::vector<double> effective_weights(const std::vector<double>& betas);
std::vector<double> effective_weights(const BoostedFlow& bf);

/// log sum_j w_j p_j(x) by log-sum-exp. Zero-weight components are skipped.
std::vector<double> mixture_log_density(const BoostedFlow& bf, const Matrix& x);

/// Gradient of log q(x) in x for each row; optionally returns log q(x).
Matrix mixture_log_density_grad_x(const BoostedFlow& bf, const Matrix& x, std::vector<double>* logq = nullptr);

struct MixtureDraw {
  Matrix x;
  std::vector<double> logdet;           // of the chosen component at its latent
  std::vector<std::size_t> component;   // chosen component per row
};

/// Pushes Gaussian latents through components picked with probability w_j
/// from the uniform stream seeded by `seed`.
MixtureDraw mixture_push(const BoostedFlow& bf, const Matrix& z, std::uint64_t seed);

/// Row i of the design becomes a Gaussian latent and is pushed through a
/// component picked with probability w_j from a separate uniform stream.
MixtureDraw mixture_sample(const BoostedFlow& bf, const UnitDesign& design, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Boosting stages

/// Per-sample negative log posterior up to a constant, E(x) = -log p(y|x) -
/// log prior(x). Adds dE/dx to grad when grad is non-empty. Must be safe to
/// call concurrently.
using EnergyFn = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct ComponentFitConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  SamplerConfig sampler;
  FdPenaltyConfig fd;
  std::uint64_t seed = 0;
};

/// Appends `fresh` with beta = 1/(C+1) and trains only its parameters to
/// minimize E_{x ~ new}[E(x) + log q(x)], q the mixture including the new
/// component at that weight. Earlier components are copied untouched.
/// `history` receives the per-step objective when non-null.
BoostedFlow fit_new_component(const BoostedFlow& bf, FlowStack fresh, const EnergyFn& energy,
                              const ComponentFitConfig& cfg, std::vector<double>* history = nullptr);

struct WeightUpdateConfig {
  double step = 0.1;  // lambda_w
  double tolerance = 1e-4;
  std::size_t max_iters = 100;
  std::size_t mc_samples = 256;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
};

/// Monte Carlo means (E_new[xi], E_prev[xi]) at the current mixture, where
/// samples come from the newest component and from the mixture of the
/// earlier ones. `iter` lets estimators draw fresh samples per iteration.
using XiEstimator = std::function<std::pair<double, double>(const BoostedFlow& bf, std::size_t iter)>;

struct WeightTrace {
  std::vector<double> betas;      // iterate after each update, starting value first
  std::vector<double> gradients;  // E_new[xi] - E_prev[xi] per iteration
  bool converged = false;
};

/// xi(x) = log q(x) + E(x), with q the current mixture. Its difference of
/// means is the derivative of the mixture objective in the newest beta.
XiEstimator mixture_xi_estimator(const EnergyFn& energy, const WeightUpdateConfig& cfg);

/// Projected descent on the newest beta: beta <- clip(beta - step * grad, 0, 1)
/// until the change is below tolerance or max_iters is reached.
std::pair<BoostedFlow, WeightTrace> update_weight(const BoostedFlow& bf, const XiEstimator& xi,
                                                  const WeightUpdateConfig& cfg);

// ---------------------------------------------------------------------------
// Serialization (little-endian, versioned)

std::vector<std::uint8_t> serialize(const BoostedFlow& bf);
BoostedFlow deserialize_boosted(std::span<const std::uint8_t> bytes);

}  // namespace flowrecon
