#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flowrecon {

/// One named, shaped slice of a ParamVector.
struct Segment {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Flat store of learnable parameters with a named layout. All training code
/// works on the flat values; the layout exists for serialization and for
/// locating a sub-network's slice.
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-filled segment and returns its offset.
  std::size_t add_segment(std::string name, std::vector<std::size_t> shape);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const std::vector<Segment>& layout() const { return layout_; }
  const Segment* find(std::string_view name) const;
  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;

  /// Same layout, all values zero.
  ParamVector zeros_like() const;
  bool all_finite() const;
  bool same_layout(const ParamVector& other) const;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
  std::vector<Segment> layout_;
};

enum class Activation : std::uint32_t { tanh = 0, relu = 1 };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

/// Fully connected conditioner. With `residual` set, layer_sizes must look
/// like [in, h, h, ..., h, out] with an even number of h->h layers; those are
/// grouped in pairs with an additive skip around each pair.
struct MlpSpec {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::tanh;
  bool zero_init_last = true;
  bool residual = false;

  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t output_size() const { return layer_sizes.back(); }
  void validate() const;
  std::size_t param_count() const;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Builds the conditioner spec used by coupling layers: `blocks` residual
/// blocks of width `hidden` between an input and an output projection.
MlpSpec residual_mlp_spec(std::size_t in, std::size_t hidden, std::size_t blocks,
                          std::size_t out, Activation act);

/// Evaluation of an MLP on a parameter slice. Stateless apart from its MlpSpec;
/// intermediate activations go into a caller-owned Cache for backward().
class Mlp {
 public:
  struct Cache {
    std::vector<std::vector<double>> acts;
  };

  Mlp() = default;
  explicit Mlp(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  std::size_t param_count() const { return param_count_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; the last
  /// layer is zeroed when spec.zero_init_last.
  void init(std::span<double> params, std::uint64_t seed) const;

  void forward(std::span<const double> params, std::span<const double> in,
               std::span<double> out, Cache* cache) const;

  /// Accumulates d(loss)/d(params) into grad_params and writes d(loss)/d(in)
  /// into grad_in. Either output may be empty to skip it.
  void backward(std::span<const double> params, const Cache& cache,
                std::span<const double> grad_out, std::span<double> grad_in,
                std::span<double> grad_params) const;

  /// Offsets of weight/bias blocks for linear layer `i` inside the slice.
  std::size_t weight_offset(std::size_t i) const { return offsets_[i]; }
  std::size_t bias_offset(std::size_t i) const {
    return offsets_[i] + spec_.layer_sizes[i] * spec_.layer_sizes[i + 1];
  }

 private:
  MlpSpec spec_;
  std::vector<std::size_t> offsets_;
  std::size_t param_count_ = 0;
};

ParamVector mlp_init(const MlpSpec& spec, std::uint64_t seed);
std::vector<double> mlp_forward(const ParamVector& params, const MlpSpec& spec,
                                std::span<const double> input);

/// A scalar loss that can report its own gradient. Must write exactly
/// params.size() entries into grad and return the loss value.
using LossFn = std::function<double(std::span<const double> params, std::span<double> grad)>;

/// Evaluates loss_fn and returns its gradient with the layout of `params`.
/// Throws NumericError if the loss or any gradient entry is non-finite.
ParamVector grad(const ParamVector& params, const LossFn& loss_fn, double* loss_out = nullptr);

/// Central finite differences of a value-only function. Used to verify
/// analytic gradients; O(n) function evaluations.
std::vector<double> finite_difference_grad(std::span<const double> params,
                                           const std::function<double(std::span<const double>)>& f,
                                           double step = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-8);

struct AdamState {
  std::uint64_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(std::size_t n, double learning_rate = 1e-4);
};

/// One bias-corrected Adam update, in place.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

/// Functional form mirroring the value-semantics contract.
std::pair<AdamState, ParamVector> adam_step(AdamState state, ParamVector params,
                                            const ParamVector& grads);

/// Random-number helpers shared across modules. Uniform draws are built from
/// the top 53 bits so they are exactly in [0, 1).
double uniform01(std::uint64_t bits);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace flowrecon
