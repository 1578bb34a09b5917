#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowrecon/diffcore.hpp"
#include "flowrecon/sampling.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// Elementwise monotone transforms used inside coupling layers.

/// Value and first derivatives of y = f(x; c) and of log f'(x; c) for one
/// scalar input. The derivatives with respect to the per-dimension raw
/// parameters c are written into caller buffers of length params_per_dim.
struct ElemJet {
  double y = 0.0;
  double dydx = 1.0;
  double logd = 0.0;
  double dlogd_dx = 0.0;
};

/// Affine: y = x * exp(s) + t, s = bound * tanh(raw_s / bound). Raw layout (raw_s, t).
struct AffineElem {
  double scale_bound = 3.0;

  static constexpr std::size_t params_per_dim() { return 2; }
  double forward(double x, const double* raw, double* logd) const;
  double inverse(double y, const double* raw, double* logd) const;
  ElemJet jet(double x, const double* raw, double* dy_draw, double* dlogd_draw) const;
};

/// Monotone rational-quadratic spline on [-B, B], identity outside. Raw layout
/// per dimension: bins unnormalized widths, bins unnormalized heights,
/// bins-1 unnormalized interior derivatives. All-zero raw parameters give the
/// identity map (uniform knots, unit derivatives).
struct SplineElem {
  std::size_t bins = 8;
  double tail_bound = 3.0;
  double min_bin_width = 1e-3;
  double min_bin_height = 1e-3;
  double min_derivative = 1e-3;

  std::size_t params_per_dim() const { return 3 * bins - 1; }
  double forward(double x, const double* raw, double* logd) const;
  double inverse(double y, const double* raw, double* logd) const;
  ElemJet jet(double x, const double* raw, double* dy_draw, double* dlogd_draw) const;

  /// Knot positions (bins+1 each) and derivatives at knots, for inspection.
  void knots(const double* raw, std::vector<double>& xs, std::vector<double>& ys,
             std::vector<double>& ds) const;
};

/// Convenience wrapper matching the plain functional contract: transforms
/// each input with the same raw parameters and returns outputs and log-derivatives.
std::pair<std::vector<double>, std::vector<double>> rq_spline_transform(
    const SplineElem& spline, std::span<const double> raw, std::span<const double> inputs);

// ---------------------------------------------------------------------------
// Layers and stacks

enum class LayerKind : std::uint32_t {
  affine_coupling = 1,
  spline_coupling = 2,
  affine_elementwise = 3,
  spline_elementwise = 4,
  reverse = 5,
  softplus = 6,
};

std::string_view layer_kind_name(LayerKind k);

enum class CouplingKind { affine, spline };
CouplingKind parse_coupling(std::string_view name);

struct LayerDesc {
  LayerKind kind = LayerKind::reverse;
  std::vector<std::uint32_t> identity;     // conditioner inputs (coupling only)
  std::vector<std::uint32_t> transformed;  // dimensions changed by the layer
  MlpSpec conditioner;                     // coupling only
  std::uint32_t bins = 8;
  double tail_bound = 3.0;
  double scale_bound = 3.0;
  std::size_t param_offset = 0;
  std::size_t param_count = 0;

  friend bool operator==(const LayerDesc&, const LayerDesc&) = default;
};

/// Architecture of a stack built by make_flow().
struct FlowConfig {
  std::size_t dim = 2;
  std::size_t steps = 2;            // flow steps, separated by a reverse permutation
  std::size_t layers_per_step = 2;  // coupling layers per step, alternating parity
  CouplingKind coupling = CouplingKind::affine;
  std::size_t hidden = 64;
  std::size_t residual_blocks = 1;
  Activation activation = Activation::tanh;
  std::size_t spline_bins = 8;
  double tail_bound = 3.0;
  double scale_bound = 3.0;
  bool elementwise_output = false;  // learned per-dimension affine after the couplings
  // Starting value of that affine: x = z * exp(output_log_scale) + output_shift.
  double output_shift = 0.0;
  double output_log_scale = 0.0;
  bool positive_output = false;     // final softplus
  // When non-zero, dimensions are pixels of an image this wide and the
  // coupling masks form a checkerboard; otherwise even/odd indices.
  std::size_t image_width = 0;
};

/// Per-row record of a pass through one layer, kept for backpropagation.
struct LayerTrace {
  std::vector<double> x;     // layer input in the forward direction
  std::vector<double> cond;  // conditioner output (coupling layers)
  Mlp::Cache mlp;
};

struct RowTrace {
  std::vector<LayerTrace> layers;
};

/// Ordered invertible transforms x = T_K o ... o T_1 (z) with all parameters
/// in one ParamVector.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(std::size_t dim, std::vector<LayerDesc> layers, ParamVector params);

  std::size_t dim() const { return dim_; }
  std::size_t depth() const { return layers_.size(); }
  std::size_t coupling_count() const;
  const std::vector<LayerDesc>& layers() const { return layers_; }
  ParamVector& params() { return params_; }
  const ParamVector& params() const { return params_; }

  /// One row. `trace` (optional) records what backward_forward needs.
  double forward_row(std::span<const double> z, std::span<double> x, RowTrace* trace) const;
  double inverse_row(std::span<const double> x, std::span<double> z, RowTrace* trace) const;

  /// Parameters may be overridden (e.g. for finite-difference checks).
  double forward_row(std::span<const double> params, std::span<const double> z,
                     std::span<double> x, RowTrace* trace) const;
  double inverse_row(std::span<const double> params, std::span<const double> x,
                     std::span<double> z, RowTrace* trace) const;

  /// Reverse pass for forward_row. Given dL/dx and dL/dlogdet, writes dL/dz
  /// (if gz non-empty) and accumulates dL/dparams (if gparams non-empty).
  void backward_forward(const RowTrace& trace, std::span<const double> gx, double glogdet,
                        std::span<double> gz, std::span<double> gparams) const;
  /// Reverse pass for inverse_row. Given dL/dz and dL/dlogdet_inv, writes dL/dx.
  void backward_inverse(const RowTrace& trace, std::span<const double> gz, double glogdet_inv,
                        std::span<double> gx, std::span<double> gparams) const;

  /// Batched: x = T(z), logdet per row. Throws NumericError naming the layer.
  std::pair<Matrix, std::vector<double>> forward(const Matrix& z) const;
  std::pair<Matrix, std::vector<double>> inverse(const Matrix& x) const;
  std::vector<double> log_density(const Matrix& x) const;

  /// Gradient of sum_i log_density(x_i) with respect to each x_i.
  Matrix log_density_grad_x(const Matrix& x, std::vector<double>* logp = nullptr) const;

  friend bool operator==(const FlowStack& a, const FlowStack& b) {
    return a.dim_ == b.dim_ && a.layers_ == b.layers_ && a.params_ == b.params_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<LayerDesc> layers_;
  ParamVector params_;
  std::vector<Mlp> mlps_;  // one per layer, empty spec for non-coupling
};

FlowStack make_flow(const FlowConfig& cfg, std::uint64_t seed);

/// Stack with a single layer, for tests and pinned examples.
FlowStack single_layer_flow(std::size_t dim, LayerDesc layer, std::uint64_t seed);

/// log N(z; 0, I)
double standard_normal_logpdf(std::span<const double> z);

// ---------------------------------------------------------------------------
// Finite-difference Lipschitz penalty

struct FdPenaltyConfig {
  double step = 1e-3;
  std::size_t n_directions = 1;
  double weight = 0.0;
  bool bidirectional = true;
};

struct LipschitzEstimate {
  double forward = 0.0;
  double inverse = 0.0;  // 0 when not bidirectional
  // Where the maxima were attained, for the gradient.
  std::size_t forward_row = 0;
  std::size_t inverse_row = 0;
  std::vector<double> forward_dir;
  std::vector<double> inverse_dir;

  double total() const { return forward + inverse; }
};

/// max_i ||f(x_i) - f(x_i + eps v)|| / eps over the rows of x and the given
/// unit directions (one set of directions per row: directions.rows ==
/// x.rows * n_dirs). Returns the maximum and writes the arg-max row index.
using VectorMap = std::function<void(std::span<const double> in, std::span<double> out)>;
double fd_lipschitz(const VectorMap& f, const Matrix& x, const Matrix& directions, double step,
                    std::size_t* arg_row = nullptr, std::size_t* arg_dir = nullptr);

/// Random unit directions, `count` rows of width d.
Matrix random_unit_directions(std::size_t count, std::size_t d, std::mt19937_64& rng);

/// Forward estimate at the batch points, inverse estimate at their images.
LipschitzEstimate fd_lipschitz_penalty(const FlowStack& stack, const Matrix& batch,
                                       const FdPenaltyConfig& cfg, std::mt19937_64& rng);
LipschitzEstimate fd_lipschitz_penalty(const FlowStack& stack, const Matrix& batch,
                                       const FdPenaltyConfig& cfg, const Matrix& directions);

/// Adds cfg.weight * d(estimate.total())/d(params) to gparams using the
/// arg-max rows. The evaluation points are treated as constants.
void fd_penalty_gradient(const FlowStack& stack, const Matrix& batch, const FdPenaltyConfig& cfg,
                         const LipschitzEstimate& est, std::span<double> gparams);

// ---------------------------------------------------------------------------
// Density fitting

struct OptimConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  FdPenaltyConfig fd;
};

struct FitResult {
  std::vector<double> loss_history;
};

/// Maximum-likelihood fit: minimizes -mean log_density over minibatches.
FitResult fit_density_mle(FlowStack& stack, const Matrix& data, const OptimConfig& cfg);

// ---------------------------------------------------------------------------
// Serialization (little-endian, versioned)

std::vector<std::uint8_t> serialize(const FlowStack& stack);
FlowStack deserialize_flow(std::span<const std::uint8_t> bytes);

}  // namespace flowrecon
