#include "flowrecon/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "flowrecon/error.hpp"
#include "flowrecon/kernels.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// ParamVector

std::size_t ParamVector::add_segment(std::string name, std::vector<std::size_t> shape) {
  std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                  std::multiplies<std::size_t>());
  Segment seg{std::move(name), std::move(shape), values_.size(), n};
  values_.resize(values_.size() + n, 0.0);
  layout_.push_back(std::move(seg));
  return layout_.back().offset;
}

const Segment* ParamVector::find(std::string_view name) const {
  for (const auto& s : layout_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

std::span<double> ParamVector::segment(std::string_view name) {
  const Segment* s = find(name);
  if (!s) throw ConfigError("no parameter segment named '" + std::string(name) + "'");
  return std::span<double>(values_).subspan(s->offset, s->size);
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const Segment* s = find(name);
  if (!s) throw ConfigError("no parameter segment named '" + std::string(name) + "'");
  return std::span<const double>(values_).subspan(s->offset, s->size);
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out = *this;
  std::fill(out.values_.begin(), out.values_.end(), 0.0);
  return out;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_.size() != other.layout_.size() || size() != other.size()) return false;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name != other.layout_[i].name || layout_[i].shape != other.layout_[i].shape) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// MLP

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

void MlpSpec::validate() const {
  if (layer_sizes.size() < 2) throw ConfigError("MLP needs at least 2 layer sizes");
  for (std::size_t s : layer_sizes) {
    if (s == 0) throw ConfigError("MLP layer sizes must be positive");
  }
  if (residual) {
    std::size_t hidden_links = layer_sizes.size() - 3;  // h->h linear layers
    if (layer_sizes.size() < 3 || hidden_links % 2 != 0) {
      throw ConfigError("residual MLP needs an even number of hidden-to-hidden layers");
    }
    for (std::size_t i = 1; i + 1 < layer_sizes.size(); ++i) {
      if (layer_sizes[i] != layer_sizes[1]) {
        throw ConfigError("residual MLP hidden layers must share one width");
      }
    }
  }
}

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    n += layer_sizes[i] * layer_sizes[i + 1] + layer_sizes[i + 1];
  }
  return n;
}

MlpSpec residual_mlp_spec(std::size_t in, std::size_t hidden, std::size_t blocks, std::size_t out,
                          Activation act) {
  MlpSpec spec;
  spec.layer_sizes.push_back(in);
  spec.layer_sizes.push_back(hidden);
  for (std::size_t b = 0; b < blocks; ++b) {
    spec.layer_sizes.push_back(hidden);
    spec.layer_sizes.push_back(hidden);
  }
  spec.layer_sizes.push_back(out);
  spec.activation = act;
  spec.zero_init_last = true;
  spec.residual = true;
  return spec;
}

namespace {

inline double activate(Activation a, double x) {
  return a == Activation::tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

inline double activate_grad(Activation a, double pre, double post) {
  return a == Activation::tanh ? 1.0 - post * post : (pre > 0.0 ? 1.0 : 0.0);
}

struct Linear {
  const double* w;
  const double* b;
  std::size_t in;
  std::size_t out;

  void apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t i = 0; i < out; ++i) {
      y[i] = kernels::dot({w + i * in, in}, x) + b[i];
    }
  }

  // gx = W^T gy (overwritten if non-empty); gw/gb accumulate.
  void back(std::span<const double> x, std::span<const double> gy, std::span<double> gx,
            double* gw, double* gb) const {
    if (!gx.empty()) std::fill(gx.begin(), gx.end(), 0.0);
    for (std::size_t i = 0; i < out; ++i) {
      double g = gy[i];
      if (g == 0.0) continue;
      if (!gx.empty()) kernels::axpy(g, {w + i * in, in}, gx);
      if (gw) {
        kernels::axpy(g, x, {gw + i * in, in});
        gb[i] += g;
      }
    }
  }
};

}  // namespace

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  std::size_t off = 0;
  for (std::size_t i = 0; i + 1 < spec_.layer_sizes.size(); ++i) {
    offsets_.push_back(off);
    off += spec_.layer_sizes[i] * spec_.layer_sizes[i + 1] + spec_.layer_sizes[i + 1];
  }
  param_count_ = off;
}

void Mlp::init(std::span<double> params, std::uint64_t seed) const {
  if (params.size() != param_count_) throw DimensionError("MLP parameter slice has wrong size");
  std::mt19937_64 rng(seed);
  const std::size_t layers = offsets_.size();
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t in = spec_.layer_sizes[l];
    std::size_t out = spec_.layer_sizes[l + 1];
    std::size_t n = in * out + out;
    double* p = params.data() + offsets_[l];
    if (l + 1 == layers && spec_.zero_init_last) {
      std::fill(p, p + n, 0.0);
      continue;
    }
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t k = 0; k < n; ++k) p[k] = (2.0 * uniform01(rng()) - 1.0) * bound;
  }
}

void Mlp::forward(std::span<const double> params, std::span<const double> in,
                  std::span<double> out, Cache* cache) const {
  const auto& sz = spec_.layer_sizes;
  if (in.size() != sz.front()) {
    throw DimensionError("MLP input has length " + std::to_string(in.size()) + ", expected " +
                         std::to_string(sz.front()));
  }
  if (out.size() != sz.back()) throw DimensionError("MLP output buffer has wrong length");
  if (params.size() != param_count_) throw DimensionError("MLP parameter slice has wrong size");

  Cache local;
  Cache& c = cache ? *cache : local;
  c.acts.clear();
  auto lin = [&](std::size_t l) {
    return Linear{params.data() + weight_offset(l), params.data() + bias_offset(l), sz[l], sz[l + 1]};
  };
  auto push_act = [&](const std::vector<double>& pre) {
    std::vector<double> post(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) post[i] = activate(spec_.activation, pre[i]);
    return post;
  };

  const std::size_t layers = offsets_.size();
  c.acts.emplace_back(in.begin(), in.end());
  if (!spec_.residual) {
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      std::vector<double> pre(sz[l + 1]);
      lin(l).apply(c.acts.back(), pre);
      auto post = push_act(pre);
      c.acts.push_back(std::move(pre));
      c.acts.push_back(std::move(post));
    }
    lin(layers - 1).apply(c.acts.back(), out);
    return;
  }

  std::vector<double> h(sz[1]);
  lin(0).apply(c.acts.back(), h);
  c.acts.push_back(h);
  const std::size_t blocks = (layers - 2) / 2;
  for (std::size_t b = 0; b < blocks; ++b) {
    auto u = push_act(h);
    std::vector<double> v(sz[1]);
    lin(1 + 2 * b).apply(u, v);
    auto w = push_act(v);
    std::vector<double> r(sz[1]);
    lin(2 + 2 * b).apply(w, r);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += r[i];
    c.acts.push_back(std::move(u));
    c.acts.push_back(std::move(v));
    c.acts.push_back(std::move(w));
    c.acts.push_back(h);
  }
  c.acts.push_back(push_act(h));
  lin(layers - 1).apply(c.acts.back(), out);
}

void Mlp::backward(std::span<const double> params, const Cache& cache,
                   std::span<const double> grad_out, std::span<double> grad_in,
                   std::span<double> grad_params) const {
  const auto& sz = spec_.layer_sizes;
  const std::size_t layers = offsets_.size();
  const bool want_params = !grad_params.empty();
  if (want_params && grad_params.size() != param_count_) {
    throw DimensionError("MLP gradient slice has wrong size");
  }
  auto lin = [&](std::size_t l) {
    return Linear{params.data() + weight_offset(l), params.data() + bias_offset(l), sz[l], sz[l + 1]};
  };
  auto gw = [&](std::size_t l) { return want_params ? grad_params.data() + weight_offset(l) : nullptr; };
  auto gb = [&](std::size_t l) { return want_params ? grad_params.data() + bias_offset(l) : nullptr; };
  const auto& a = cache.acts;
  const Activation act = spec_.activation;

  if (!spec_.residual) {
    // acts = [x, pre0, a1, pre1, a2, ..., a_{L-1}]
    std::vector<double> g(sz[layers - 1]);
    lin(layers - 1).back(a.back(), grad_out, g, gw(layers - 1), gb(layers - 1));
    for (std::size_t l = layers - 1; l-- > 0;) {
      const auto& pre = a[1 + 2 * l];
      const auto& post = a[2 + 2 * l];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= activate_grad(act, pre[i], post[i]);
      const auto& x = a[2 * l];
      if (l == 0) {
        if (!grad_in.empty() || want_params) lin(0).back(x, g, grad_in, gw(0), gb(0));
      } else {
        std::vector<double> gx(sz[l]);
        lin(l).back(x, g, gx, gw(l), gb(l));
        g = std::move(gx);
      }
    }
    return;
  }

  // acts = [x, h0, (u, v, w, h)*, a_final]
  const std::size_t blocks = (layers - 2) / 2;
  const std::size_t width = sz[1];
  std::vector<double> gh(width);
  lin(layers - 1).back(a.back(), grad_out, gh, gw(layers - 1), gb(layers - 1));
  {
    const auto& hb = a[1 + 4 * blocks];
    const auto& fin = a.back();
    for (std::size_t i = 0; i < width; ++i) gh[i] *= activate_grad(act, hb[i], fin[i]);
  }
  std::vector<double> tmp(width), tmp2(width);
  for (std::size_t b = blocks; b-- > 0;) {
    const auto& h_prev = a[1 + 4 * b];
    const auto& u = a[2 + 4 * b];
    const auto& v = a[3 + 4 * b];
    const auto& w = a[4 + 4 * b];
    lin(2 + 2 * b).back(w, gh, tmp, gw(2 + 2 * b), gb(2 + 2 * b));
    for (std::size_t i = 0; i < width; ++i) tmp[i] *= activate_grad(act, v[i], w[i]);
    lin(1 + 2 * b).back(u, tmp, tmp2, gw(1 + 2 * b), gb(1 + 2 * b));
    for (std::size_t i = 0; i < width; ++i) gh[i] += tmp2[i] * activate_grad(act, h_prev[i], u[i]);
  }
  if (!grad_in.empty() || want_params) lin(0).back(a[0], gh, grad_in, gw(0), gb(0));
}

ParamVector mlp_init(const MlpSpec& spec, std::uint64_t seed) {
  Mlp mlp(spec);
  ParamVector p;
  const auto& sz = spec.layer_sizes;
  for (std::size_t l = 0; l + 1 < sz.size(); ++l) {
    p.add_segment("W" + std::to_string(l), {sz[l + 1], sz[l]});
    p.add_segment("b" + std::to_string(l), {sz[l + 1]});
  }
  mlp.init(p.values(), seed);
  return p;
}

std::vector<double> mlp_forward(const ParamVector& params, const MlpSpec& spec,
                                std::span<const double> input) {
  Mlp mlp(spec);
  std::vector<double> out(spec.output_size());
  mlp.forward(params.values(), input, out, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

ParamVector grad(const ParamVector& params, const LossFn& loss_fn, double* loss_out) {
  ParamVector g = params.zeros_like();
  double loss = loss_fn(params.values(), g.values());
  if (!std::isfinite(loss)) {
    throw NumericError("loss is not finite: " + std::to_string(loss));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw NumericError("gradient entry " + std::to_string(i) + " is not finite: " +
                         std::to_string(g[i]));
    }
  }
  if (loss_out) *loss_out = loss;
  return g;
}

std::vector<double> finite_difference_grad(std::span<const double> params,
                                           const std::function<double(std::span<const double>)>& f,
                                           double step) {
  std::vector<double> p(params.begin(), params.end());
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    double fp = f(p);
    p[i] = orig - step;
    double fm = f(p);
    p[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::for_params(std::size_t n, double learning_rate) {
  AdamState s;
  s.first_moment.assign(n, 0.0);
  s.second_moment.assign(n, 0.0);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size() || s.first_moment.size() != params.size() ||
      s.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment lengths differ");
  }
  if (!(s.learning_rate > 0.0)) throw ConfigError("adam learning rate must be positive");
  s.step_count += 1;
  const double t = static_cast<double>(s.step_count);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * g;
    s.second_moment[i] = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * g * g;
    double mhat = s.first_moment[i] / c1;
    double vhat = s.second_moment[i] / c2;
    params[i] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.eps);
  }
}

std::pair<AdamState, ParamVector> adam_step(AdamState state, ParamVector params,
                                            const ParamVector& grads) {
  adam_step(state, params.values(), grads.values());
  return {std::move(state), std::move(params)};
}

// ---------------------------------------------------------------------------
// RNG helpers

double uniform01(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace flowrecon
