#include "flowrecon/flows.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "binary_io.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/parallel.hpp"

namespace flowrecon {

namespace {

// Forward-mode dual number over a fixed number of seeds.
template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  static Dual seed(double value, int k) {
    Dual r;
    r.v = value;
    r.d[k] = 1.0;
    return r;
  }
};

template <int N>
Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r{a.v + b.v};
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
template <int N>
Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r{a.v - b.v};
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
template <int N>
Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r{a.v * b.v};
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
template <int N>
Dual<N> operator*(double s, const Dual<N>& a) {
  Dual<N> r{s * a.v};
  for (int i = 0; i < N; ++i) r.d[i] = s * a.d[i];
  return r;
}
template <int N>
Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r{a.v / b.v};
  const double inv = 1.0 / (b.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
  return r;
}
template <int N>
Dual<N> operator-(double s, const Dual<N>& a) {
  Dual<N> r{s - a.v};
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}
template <int N>
Dual<N> log(const Dual<N>& a) {
  Dual<N> r{std::log(a.v)};
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] / a.v;
  return r;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Rational-quadratic bin evaluation, generic over double / Dual.
template <class T>
void rq_bin(const T& x, const T& xk, const T& wk, const T& yk, const T& hk, const T& dk,
            const T& dk1, T& y, T& dydx) {
  T xi = (x - xk) / wk;
  T s = hk / wk;
  T om = xi * (1.0 - xi);
  T num = hk * (s * xi * xi + dk * om);
  T den = s + (dk1 + dk - 2.0 * s) * om;
  y = yk + num / den;
  T omx = 1.0 - xi;
  dydx = s * s * (dk1 * xi * xi + 2.0 * s * om + dk * omx * omx) / (den * den);
}

// Knot geometry for one dimension's raw parameters.
struct Knots {
  std::vector<double> xs, ys, ds;  // bins+1 each
  std::vector<double> pw, ph;      // softmax probabilities, bins each
};

void softmax(const double* u, std::size_t n, std::vector<double>& p) {
  p.resize(n);
  double m = *std::max_element(u, u + n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(u[i] - m);
    s += p[i];
  }
  for (auto& v : p) v /= s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Affine elementwise

double AffineElem::forward(double x, const double* raw, double* logd) const {
  double s = scale_bound * std::tanh(raw[0] / scale_bound);
  *logd = s;
  return x * std::exp(s) + raw[1];
}

double AffineElem::inverse(double y, const double* raw, double* logd) const {
  double s = scale_bound * std::tanh(raw[0] / scale_bound);
  *logd = s;
  return (y - raw[1]) * std::exp(-s);
}

ElemJet AffineElem::jet(double x, const double* raw, double* dy_draw, double* dlogd_draw) const {
  double th = std::tanh(raw[0] / scale_bound);
  double s = scale_bound * th;
  double ds = 1.0 - th * th;
  double es = std::exp(s);
  ElemJet j;
  j.y = x * es + raw[1];
  j.dydx = es;
  j.logd = s;
  j.dlogd_dx = 0.0;
  dy_draw[0] = x * es * ds;
  dy_draw[1] = 1.0;
  dlogd_draw[0] = ds;
  dlogd_draw[1] = 0.0;
  return j;
}

// ---------------------------------------------------------------------------
// Rational-quadratic spline

namespace {

double derivative_shift(double min_d) { return std::log(std::expm1(1.0 - min_d)); }

Knots make_knots(const SplineElem& sp, const double* raw) {
  const std::size_t K = sp.bins;
  const double B = sp.tail_bound;
  Knots k;
  softmax(raw, K, k.pw);
  softmax(raw + K, K, k.ph);
  k.xs.resize(K + 1);
  k.ys.resize(K + 1);
  k.ds.resize(K + 1);
  k.xs[0] = -B;
  k.ys[0] = -B;
  const double aw = 1.0 - sp.min_bin_width * static_cast<double>(K);
  const double ah = 1.0 - sp.min_bin_height * static_cast<double>(K);
  for (std::size_t j = 0; j < K; ++j) {
    k.xs[j + 1] = k.xs[j] + 2.0 * B * (sp.min_bin_width + aw * k.pw[j]);
    k.ys[j + 1] = k.ys[j] + 2.0 * B * (sp.min_bin_height + ah * k.ph[j]);
  }
  const double shift = derivative_shift(sp.min_derivative);
  k.ds[0] = 1.0;
  k.ds[K] = 1.0;
  for (std::size_t j = 1; j < K; ++j) k.ds[j] = sp.min_derivative + softplus(raw[2 * K + j - 1] + shift);
  return k;
}

std::size_t find_bin(const std::vector<double>& edges, double v) {
  // edges[0] <= v; returns k with edges[k] <= v < edges[k+1], clamped.
  auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

// Chain rule from bin-local quantities back to the raw softmax inputs.
void knot_grads_to_raw(const SplineElem& sp, const Knots& k, std::size_t bin, double g_x0,
                       double g_w, double g_y0, double g_h, double g_d0, double g_d1, const double* raw,
                       double* out) {
  const std::size_t K = sp.bins;
  const double B = sp.tail_bound;
  auto softmax_back = [&](const std::vector<double>& p, double g_edge, double g_len, double a,
                          double* dst) {
    // dQ/dW_j for the normalized width of bin j, then through the softmax.
    double dot = 0.0;
    std::array<double, 64> gpw_small{};
    std::vector<double> gpw_big;
    double* gpw = gpw_small.data();
    if (K > gpw_small.size()) {
      gpw_big.assign(K, 0.0);
      gpw = gpw_big.data();
    }
    for (std::size_t j = 0; j < K; ++j) {
      double gW = (j < bin ? g_edge : 0.0) + (j == bin ? g_len : 0.0);
      gpw[j] = 2.0 * B * a * gW;
      dot += p[j] * gpw[j];
    }
    for (std::size_t j = 0; j < K; ++j) dst[j] = p[j] * (gpw[j] - dot);
  };
  softmax_back(k.pw, g_x0, g_w, 1.0 - sp.min_bin_width * static_cast<double>(K), out);
  softmax_back(k.ph, g_y0, g_h, 1.0 - sp.min_bin_height * static_cast<double>(K), out + K);
  double* gd = out + 2 * K;
  for (std::size_t j = 0; j + 1 < K; ++j) gd[j] = 0.0;
  const double shift = derivative_shift(sp.min_derivative);
  if (bin >= 1) gd[bin - 1] = g_d0 * sigmoid(raw[2 * K + bin - 1] + shift);
  if (bin + 1 <= K - 1) gd[bin] = g_d1 * sigmoid(raw[2 * K + bin] + shift);
}

}  // namespace

void SplineElem::knots(const double* raw, std::vector<double>& xs, std::vector<double>& ys,
                       std::vector<double>& ds) const {
  Knots k = make_knots(*this, raw);
  xs = k.xs;
  ys = k.ys;
  ds = k.ds;
}

double SplineElem::forward(double x, const double* raw, double* logd) const {
  if (x < -tail_bound || x > tail_bound) {
    *logd = 0.0;
    return x;
  }
  Knots k = make_knots(*this, raw);
  std::size_t b = find_bin(k.xs, x);
  double y, dydx;
  rq_bin(x, k.xs[b], k.xs[b + 1] - k.xs[b], k.ys[b], k.ys[b + 1] - k.ys[b], k.ds[b], k.ds[b + 1], y,
         dydx);
  *logd = std::log(dydx);
  return y;
}

double SplineElem::inverse(double y, const double* raw, double* logd) const {
  if (y < -tail_bound || y > tail_bound) {
    *logd = 0.0;
    return y;
  }
  Knots k = make_knots(*this, raw);
  std::size_t b = find_bin(k.ys, y);
  const double xk = k.xs[b], wk = k.xs[b + 1] - k.xs[b];
  const double yk = k.ys[b], hk = k.ys[b + 1] - k.ys[b];
  const double dk = k.ds[b], dk1 = k.ds[b + 1];
  const double s = hk / wk;
  const double dy = y - yk;
  const double sum = dk1 + dk - 2.0 * s;
  const double a = hk * (s - dk) + dy * sum;
  const double bq = hk * dk - dy * sum;
  const double c = -s * dy;
  const double disc = std::max(bq * bq - 4.0 * a * c, 0.0);
  const double xi = (2.0 * c) / (-bq - std::sqrt(disc));
  const double x = xi * wk + xk;
  double yy, dydx;
  rq_bin(x, xk, wk, yk, hk, dk, dk1, yy, dydx);
  *logd = std::log(dydx);
  return x;
}

ElemJet SplineElem::jet(double x, const double* raw, double* dy_draw, double* dlogd_draw) const {
  const std::size_t P = params_per_dim();
  ElemJet j;
  if (x < -tail_bound || x > tail_bound) {
    j.y = x;
    std::fill(dy_draw, dy_draw + P, 0.0);
    std::fill(dlogd_draw, dlogd_draw + P, 0.0);
    return j;
  }
  Knots k = make_knots(*this, raw);
  std::size_t b = find_bin(k.xs, x);
  using D = Dual<7>;
  D y, dydx;
  rq_bin(D::seed(x, 0), D::seed(k.xs[b], 1), D::seed(k.xs[b + 1] - k.xs[b], 2), D::seed(k.ys[b], 3),
         D::seed(k.ys[b + 1] - k.ys[b], 4), D::seed(k.ds[b], 5), D::seed(k.ds[b + 1], 6), y, dydx);
  D logd = log(dydx);
  j.y = y.v;
  j.dydx = dydx.v;
  j.logd = logd.v;
  j.dlogd_dx = logd.d[0];
  knot_grads_to_raw(*this, k, b, y.d[1], y.d[2], y.d[3], y.d[4], y.d[5], y.d[6], raw, dy_draw);
  knot_grads_to_raw(*this, k, b, logd.d[1], logd.d[2], logd.d[3], logd.d[4], logd.d[5], logd.d[6],
                    raw, dlogd_draw);
  return j;
}

std::pair<std::vector<double>, std::vector<double>> rq_spline_transform(
    const SplineElem& spline, std::span<const double> raw, std::span<const double> inputs) {
  if (raw.size() != spline.params_per_dim()) throw DimensionError("spline raw parameter count");
  std::vector<double> out(inputs.size()), ld(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) out[i] = spline.forward(inputs[i], raw.data(), &ld[i]);
  return {out, ld};
}

// ---------------------------------------------------------------------------
// Layer helpers

std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::affine_coupling: return "affine_coupling";
    case LayerKind::spline_coupling: return "spline_coupling";
    case LayerKind::affine_elementwise: return "affine_elementwise";
    case LayerKind::spline_elementwise: return "spline_elementwise";
    case LayerKind::reverse: return "reverse";
    case LayerKind::softplus: return "softplus";
  }
  return "?";
}

CouplingKind parse_coupling(std::string_view name) {
  if (name == "affine") return CouplingKind::affine;
  if (name == "spline" || name == "rq_spline") return CouplingKind::spline;
  throw ConfigError("unknown coupling kind '" + std::string(name) + "'");
}

namespace {

bool is_coupling(LayerKind k) {
  return k == LayerKind::affine_coupling || k == LayerKind::spline_coupling;
}
bool is_elementwise(LayerKind k) {
  return k == LayerKind::affine_elementwise || k == LayerKind::spline_elementwise;
}
bool uses_spline(LayerKind k) {
  return k == LayerKind::spline_coupling || k == LayerKind::spline_elementwise;
}

std::size_t raw_per_dim(const LayerDesc& d) {
  return uses_spline(d.kind) ? 3 * static_cast<std::size_t>(d.bins) - 1 : 2;
}

SplineElem spline_of(const LayerDesc& d) {
  SplineElem s;
  s.bins = d.bins;
  s.tail_bound = d.tail_bound;
  return s;
}

AffineElem affine_of(const LayerDesc& d) { return AffineElem{d.scale_bound}; }

void check_finite(std::span<const double> v, std::size_t layer, LayerKind kind, const char* dir) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value in ") + dir + " pass at layer " +
                         std::to_string(layer) + " (" + std::string(layer_kind_name(kind)) + ")");
    }
  }
}

}  // namespace

double standard_normal_logpdf(std::span<const double> z) {
  double s = 0.0;
  for (double v : z) s += v * v;
  return -0.5 * s - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// FlowStack

FlowStack::FlowStack(std::size_t dim, std::vector<LayerDesc> layers, ParamVector params)
    : dim_(dim), layers_(std::move(layers)), params_(std::move(params)) {
  if (dim_ == 0) throw ConfigError("flow dimension must be positive");
  mlps_.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& d = layers_[l];
    if (d.param_offset + d.param_count > params_.size()) {
      throw ConfigError("layer " + std::to_string(l) + " parameter range exceeds the parameter vector");
    }
    for (auto i : d.identity) {
      if (i >= dim_) throw ConfigError("mask index out of range");
    }
    for (auto i : d.transformed) {
      if (i >= dim_) throw ConfigError("mask index out of range");
    }
    if (is_coupling(d.kind)) {
      if (d.identity.empty() || d.transformed.empty()) {
        throw ConfigError("coupling layer masks must be nonempty on both halves");
      }
      if (uses_spline(d.kind) && d.bins < 2) throw ConfigError("spline needs at least 2 bins");
      mlps_[l] = Mlp(d.conditioner);
      if (d.conditioner.input_size() != d.identity.size() ||
          d.conditioner.output_size() != d.transformed.size() * raw_per_dim(d) ||
          mlps_[l].param_count() != d.param_count) {
        throw ConfigError("conditioner shape does not match coupling layer " + std::to_string(l));
      }
    } else if (is_elementwise(d.kind)) {
      if (d.param_count != d.transformed.size() * raw_per_dim(d)) {
        throw ConfigError("elementwise layer parameter count mismatch");
      }
    }
  }
}

std::size_t FlowStack::coupling_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers_.begin(), layers_.end(), [](const LayerDesc& d) { return is_coupling(d.kind); }));
}

double FlowStack::forward_row(std::span<const double> z, std::span<double> x, RowTrace* trace) const {
  return forward_row(params_.values(), z, x, trace);
}

double FlowStack::inverse_row(std::span<const double> x, std::span<double> z, RowTrace* trace) const {
  return inverse_row(params_.values(), x, z, trace);
}

double FlowStack::forward_row(std::span<const double> params, std::span<const double> z,
                              std::span<double> x, RowTrace* trace) const {
  if (z.size() != dim_ || x.size() != dim_) throw DimensionError("flow row has wrong width");
  if (params.size() != params_.size()) throw DimensionError("flow parameter vector has wrong size");
  if (trace) trace->layers.resize(layers_.size());
  std::vector<double> cur(z.begin(), z.end());
  std::vector<double> cond, xa;
  double logdet = 0.0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerDesc& d = layers_[l];
    auto slice = params.subspan(d.param_offset, d.param_count);
    if (trace) trace->layers[l].x = cur;
    switch (d.kind) {
      case LayerKind::reverse:
        std::reverse(cur.begin(), cur.end());
        break;
      case LayerKind::softplus:
        for (auto& v : cur) {
          logdet += -softplus(-v);
          v = softplus(v);
        }
        break;
      default: {
        const double* raw_base;
        const std::size_t P = raw_per_dim(d);
        if (is_coupling(d.kind)) {
          xa.resize(d.identity.size());
          for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = cur[d.identity[i]];
          cond.resize(d.conditioner.output_size());
          mlps_[l].forward(slice, xa, cond, trace ? &trace->layers[l].mlp : nullptr);
          if (trace) trace->layers[l].cond = cond;
          raw_base = cond.data();
        } else {
          raw_base = slice.data();
        }
        double ld = 0.0;
        if (uses_spline(d.kind)) {
          SplineElem sp = spline_of(d);
          for (std::size_t j = 0; j < d.transformed.size(); ++j) {
            double& v = cur[d.transformed[j]];
            v = sp.forward(v, raw_base + j * P, &ld);
            logdet += ld;
          }
        } else {
          AffineElem af = affine_of(d);
          for (std::size_t j = 0; j < d.transformed.size(); ++j) {
            double& v = cur[d.transformed[j]];
            v = af.forward(v, raw_base + j * P, &ld);
            logdet += ld;
          }
        }
      }
    }
    check_finite(cur, l, d.kind, "forward");
  }
  std::copy(cur.begin(), cur.end(), x.begin());
  return logdet;
}

double FlowStack::inverse_row(std::span<const double> params, std::span<const double> x,
                              std::span<double> z, RowTrace* trace) const {
  if (z.size() != dim_ || x.size() != dim_) throw DimensionError("flow row has wrong width");
  if (params.size() != params_.size()) throw DimensionError("flow parameter vector has wrong size");
  if (trace) trace->layers.resize(layers_.size());
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> cond, ya;
  double logdet_inv = 0.0;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LayerDesc& d = layers_[l];
    auto slice = params.subspan(d.param_offset, d.param_count);
    switch (d.kind) {
      case LayerKind::reverse:
        std::reverse(cur.begin(), cur.end());
        break;
      case LayerKind::softplus:
        for (auto& v : cur) {
          // x = y + log(1 - exp(-y)); requires y > 0
          double xv = v + std::log(-std::expm1(-v));
          logdet_inv -= -softplus(-xv);
          v = xv;
        }
        break;
      default: {
        const double* raw_base;
        const std::size_t P = raw_per_dim(d);
        if (is_coupling(d.kind)) {
          ya.resize(d.identity.size());
          for (std::size_t i = 0; i < ya.size(); ++i) ya[i] = cur[d.identity[i]];
          cond.resize(d.conditioner.output_size());
          mlps_[l].forward(slice, ya, cond, trace ? &trace->layers[l].mlp : nullptr);
          if (trace) trace->layers[l].cond = cond;
          raw_base = cond.data();
        } else {
          raw_base = slice.data();
        }
        double ld = 0.0;
        if (uses_spline(d.kind)) {
          SplineElem sp = spline_of(d);
          for (std::size_t j = 0; j < d.transformed.size(); ++j) {
            double& v = cur[d.transformed[j]];
            v = sp.inverse(v, raw_base + j * P, &ld);
            logdet_inv -= ld;
          }
        } else {
          AffineElem af = affine_of(d);
          for (std::size_t j = 0; j < d.transformed.size(); ++j) {
            double& v = cur[d.transformed[j]];
            v = af.inverse(v, raw_base + j * P, &ld);
            logdet_inv -= ld;
          }
        }
      }
    }
    check_finite(cur, l, d.kind, "inverse");
    if (trace) trace->layers[l].x = cur;
  }
  if (!std::isfinite(logdet_inv)) throw NumericError("non-finite inverse log-determinant");
  std::copy(cur.begin(), cur.end(), z.begin());
  return logdet_inv;
}

void FlowStack::backward_forward(const RowTrace& trace, std::span<const double> gx, double glogdet,
                                 std::span<double> gz, std::span<double> gparams) const {
  const bool want_params = !gparams.empty();
  std::vector<double> g(gx.begin(), gx.end());
  std::vector<double> gc, gxa, dy, dl;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LayerDesc& d = layers_[l];
    const LayerTrace& t = trace.layers[l];
    switch (d.kind) {
      case LayerKind::reverse:
        std::reverse(g.begin(), g.end());
        break;
      case LayerKind::softplus:
        for (std::size_t i = 0; i < dim_; ++i) {
          double xv = t.x[i];
          g[i] = g[i] * sigmoid(xv) + glogdet * sigmoid(-xv);
        }
        break;
      default: {
        const std::size_t P = raw_per_dim(d);
        const bool coupling = is_coupling(d.kind);
        auto slice = params_.values().subspan(d.param_offset, d.param_count);
        const double* raw_base = coupling ? t.cond.data() : slice.data();
        gc.assign(d.transformed.size() * P, 0.0);
        dy.resize(P);
        dl.resize(P);
        SplineElem sp = spline_of(d);
        AffineElem af = affine_of(d);
        const bool spline = uses_spline(d.kind);
        for (std::size_t j = 0; j < d.transformed.size(); ++j) {
          const std::size_t idx = d.transformed[j];
          const double* raw = raw_base + j * P;
          ElemJet jt = spline ? sp.jet(t.x[idx], raw, dy.data(), dl.data())
                              : af.jet(t.x[idx], raw, dy.data(), dl.data());
          const double gy = g[idx];
          g[idx] = gy * jt.dydx + glogdet * jt.dlogd_dx;
          for (std::size_t p = 0; p < P; ++p) gc[j * P + p] = gy * dy[p] + glogdet * dl[p];
        }
        if (coupling) {
          gxa.assign(d.identity.size(), 0.0);
          std::span<double> gps;
          if (want_params) gps = gparams.subspan(d.param_offset, d.param_count);
          mlps_[l].backward(slice, t.mlp, gc, gxa, gps);
          for (std::size_t i = 0; i < gxa.size(); ++i) g[d.identity[i]] += gxa[i];
        } else if (want_params) {
          for (std::size_t k = 0; k < gc.size(); ++k) gparams[d.param_offset + k] += gc[k];
        }
      }
    }
  }
  if (!gz.empty()) std::copy(g.begin(), g.end(), gz.begin());
}

void FlowStack::backward_inverse(const RowTrace& trace, std::span<const double> gz,
                                 double glogdet_inv, std::span<double> gx,
                                 std::span<double> gparams) const {
  const bool want_params = !gparams.empty();
  std::vector<double> g(gz.begin(), gz.end());
  std::vector<double> gc, gya, dy, dl;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerDesc& d = layers_[l];
    const LayerTrace& t = trace.layers[l];
    switch (d.kind) {
      case LayerKind::reverse:
        std::reverse(g.begin(), g.end());
        break;
      case LayerKind::softplus:
        for (std::size_t i = 0; i < dim_; ++i) {
          double xv = t.x[i];
          double tt = g[i] - glogdet_inv * sigmoid(-xv);
          g[i] = tt / sigmoid(xv);
        }
        break;
      default: {
        const std::size_t P = raw_per_dim(d);
        const bool coupling = is_coupling(d.kind);
        auto slice = params_.values().subspan(d.param_offset, d.param_count);
        const double* raw_base = coupling ? t.cond.data() : slice.data();
        gc.assign(d.transformed.size() * P, 0.0);
        dy.resize(P);
        dl.resize(P);
        SplineElem sp = spline_of(d);
        AffineElem af = affine_of(d);
        const bool spline = uses_spline(d.kind);
        for (std::size_t j = 0; j < d.transformed.size(); ++j) {
          const std::size_t idx = d.transformed[j];
          const double* raw = raw_base + j * P;
          ElemJet jt = spline ? sp.jet(t.x[idx], raw, dy.data(), dl.data())
                              : af.jet(t.x[idx], raw, dy.data(), dl.data());
          const double tt = g[idx] - glogdet_inv * jt.dlogd_dx;
          g[idx] = tt / jt.dydx;
          for (std::size_t p = 0; p < P; ++p) {
            gc[j * P + p] = -tt * dy[p] / jt.dydx - glogdet_inv * dl[p];
          }
        }
        if (coupling) {
          gya.assign(d.identity.size(), 0.0);
          std::span<double> gps;
          if (want_params) gps = gparams.subspan(d.param_offset, d.param_count);
          mlps_[l].backward(slice, t.mlp, gc, gya, gps);
          for (std::size_t i = 0; i < gya.size(); ++i) g[d.identity[i]] += gya[i];
        } else if (want_params) {
          for (std::size_t k = 0; k < gc.size(); ++k) gparams[d.param_offset + k] += gc[k];
        }
      }
    }
  }
  if (!gx.empty()) std::copy(g.begin(), g.end(), gx.begin());
}

std::pair<Matrix, std::vector<double>> FlowStack::forward(const Matrix& z) const {
  if (z.cols != dim_) throw DimensionError("latent batch width does not match flow dimension");
  Matrix x(z.rows, dim_);
  std::vector<double> ld(z.rows);
  parallel_for(z.rows, [&](std::size_t i) { ld[i] = forward_row(z.row(i), x.row(i), nullptr); });
  return {std::move(x), std::move(ld)};
}

std::pair<Matrix, std::vector<double>> FlowStack::inverse(const Matrix& x) const {
  if (x.cols != dim_) throw DimensionError("sample width does not match flow dimension");
  Matrix z(x.rows, dim_);
  std::vector<double> ld(x.rows);
  parallel_for(x.rows, [&](std::size_t i) { ld[i] = inverse_row(x.row(i), z.row(i), nullptr); });
  return {std::move(z), std::move(ld)};
}

std::vector<double> FlowStack::log_density(const Matrix& x) const {
  auto [z, ld] = inverse(x);
  std::vector<double> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) out[i] = standard_normal_logpdf(z.row(i)) + ld[i];
  return out;
}

Matrix FlowStack::log_density_grad_x(const Matrix& x, std::vector<double>* logp) const {
  if (x.cols != dim_) throw DimensionError("sample width does not match flow dimension");
  Matrix g(x.rows, dim_);
  if (logp) logp->assign(x.rows, 0.0);
  parallel_for(x.rows, [&](std::size_t i) {
    RowTrace tr;
    std::vector<double> z(dim_);
    double ld = inverse_row(x.row(i), z, &tr);
    if (logp) (*logp)[i] = standard_normal_logpdf(z) + ld;
    for (auto& v : z) v = -v;
    backward_inverse(tr, z, 1.0, g.row(i), {});
  });
  return g;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

LayerDesc coupling_desc(const FlowConfig& cfg, std::vector<std::uint32_t> identity,
                        std::vector<std::uint32_t> transformed) {
  LayerDesc d;
  d.kind = cfg.coupling == CouplingKind::affine ? LayerKind::affine_coupling : LayerKind::spline_coupling;
  d.bins = static_cast<std::uint32_t>(cfg.spline_bins);
  d.tail_bound = cfg.tail_bound;
  d.scale_bound = cfg.scale_bound;
  const std::size_t out = transformed.size() * raw_per_dim(d);
  if (cfg.residual_blocks > 0) {
    d.conditioner = residual_mlp_spec(identity.size(), cfg.hidden, cfg.residual_blocks, out, cfg.activation);
  } else {
    d.conditioner.layer_sizes = {identity.size(), cfg.hidden, out};
    d.conditioner.activation = cfg.activation;
    d.conditioner.zero_init_last = true;
  }
  d.identity = std::move(identity);
  d.transformed = std::move(transformed);
  return d;
}

LayerDesc elementwise_desc(LayerKind kind, std::size_t dim, const FlowConfig& cfg) {
  LayerDesc d;
  d.kind = kind;
  d.bins = static_cast<std::uint32_t>(cfg.spline_bins);
  d.tail_bound = cfg.tail_bound;
  d.scale_bound = cfg.scale_bound;
  for (std::size_t i = 0; i < dim; ++i) d.transformed.push_back(static_cast<std::uint32_t>(i));
  return d;
}

FlowStack assemble(std::size_t dim, std::vector<LayerDesc> layers, std::uint64_t seed) {
  ParamVector params;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& d = layers[l];
    const std::string prefix = "L" + std::to_string(l) + ".";
    if (is_coupling(d.kind)) {
      const auto& sz = d.conditioner.layer_sizes;
      d.param_offset = params.size();
      for (std::size_t k = 0; k + 1 < sz.size(); ++k) {
        params.add_segment(prefix + "W" + std::to_string(k), {sz[k + 1], sz[k]});
        params.add_segment(prefix + "b" + std::to_string(k), {sz[k + 1]});
      }
      d.param_count = params.size() - d.param_offset;
    } else if (is_elementwise(d.kind)) {
      d.param_offset = params.size();
      params.add_segment(prefix + "raw", {d.transformed.size(), raw_per_dim(d)});
      d.param_count = params.size() - d.param_offset;
    } else {
      d.param_offset = params.size();
      d.param_count = 0;
    }
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& d = layers[l];
    if (is_coupling(d.kind)) {
      Mlp(d.conditioner).init(params.values().subspan(d.param_offset, d.param_count), mix_seed(seed, l));
    }
  }
  return FlowStack(dim, std::move(layers), std::move(params));
}

}  // namespace

FlowStack make_flow(const FlowConfig& cfg, std::uint64_t seed) {
  if (cfg.dim == 0) throw ConfigError("flow dimension must be positive");
  if (cfg.steps == 0 || cfg.layers_per_step == 0) throw ConfigError("flow needs at least one layer");
  if (cfg.coupling == CouplingKind::spline && cfg.spline_bins < 2) {
    throw ConfigError("spline needs at least 2 bins");
  }
  if (!(cfg.tail_bound > 0.0) || !(cfg.scale_bound > 0.0)) {
    throw ConfigError("tail_bound and scale_bound must be positive");
  }
  std::vector<LayerDesc> layers;
  const LayerKind elem_kind = cfg.coupling == CouplingKind::affine ? LayerKind::affine_elementwise
                                                                   : LayerKind::spline_elementwise;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    for (std::size_t k = 0; k < cfg.layers_per_step; ++k) {
      if (cfg.dim == 1) {
        layers.push_back(elementwise_desc(elem_kind, 1, cfg));
        continue;
      }
      const std::size_t parity = k % 2;
      std::vector<std::uint32_t> identity, transformed;
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        std::size_t cell = cfg.image_width > 0 ? (i / cfg.image_width + i % cfg.image_width) : i;
        (cell % 2 == parity ? transformed : identity).push_back(static_cast<std::uint32_t>(i));
      }
      if (identity.empty() || transformed.empty()) {
        throw ConfigError("checkerboard mask leaves one half empty");
      }
      layers.push_back(coupling_desc(cfg, std::move(identity), std::move(transformed)));
    }
    if (s + 1 < cfg.steps && cfg.dim > 1) {
      LayerDesc r;
      r.kind = LayerKind::reverse;
      layers.push_back(r);
    }
  }
  // An odd number of reversals would leave the untrained stack as a
  // permutation; close with one more so zero-initialized stacks are exactly
  // the identity and outputs keep pixel order.
  const auto reversals = std::count_if(layers.begin(), layers.end(),
                                       [](const LayerDesc& d) { return d.kind == LayerKind::reverse; });
  if (reversals % 2 == 1) {
    LayerDesc r;
    r.kind = LayerKind::reverse;
    layers.push_back(r);
  }
  std::size_t output_layer = layers.size();
  if (cfg.elementwise_output) layers.push_back(elementwise_desc(LayerKind::affine_elementwise, cfg.dim, cfg));
  if (cfg.positive_output) {
    LayerDesc sp;
    sp.kind = LayerKind::softplus;
    layers.push_back(sp);
  }
  if (!(std::abs(cfg.output_log_scale) < cfg.scale_bound) || !std::isfinite(cfg.output_shift)) {
    throw ConfigError("output affine start must have |log scale| < scale_bound");
  }
  FlowStack stack = assemble(cfg.dim, std::move(layers), seed);
  if (cfg.elementwise_output) {
    auto raw = stack.params().segment("L" + std::to_string(output_layer) + ".raw");
    const double s = cfg.scale_bound * std::atanh(cfg.output_log_scale / cfg.scale_bound);
    for (std::size_t i = 0; i < cfg.dim; ++i) {
      raw[2 * i] = s;
      raw[2 * i + 1] = cfg.output_shift;
    }
  }
  return stack;
}

FlowStack single_layer_flow(std::size_t dim, LayerDesc layer, std::uint64_t seed) {
  return assemble(dim, {std::move(layer)}, seed);
}

// ---------------------------------------------------------------------------
// Lipschitz penalty

Matrix random_unit_directions(std::size_t count, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(count, d);
  for (std::size_t i = 0; i < count; ++i) {
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        m(i, j) = nd(rng);
        n2 += m(i, j) * m(i, j);
      }
    } while (n2 == 0.0);
    double inv = 1.0 / std::sqrt(n2);
    for (std::size_t j = 0; j < d; ++j) m(i, j) *= inv;
  }
  return m;
}

double fd_lipschitz(const VectorMap& f, const Matrix& x, const Matrix& directions, double step,
                    std::size_t* arg_row, std::size_t* arg_dir) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  if (x.rows == 0 || directions.rows % x.rows != 0 || directions.cols != x.cols) {
    throw DimensionError("directions must hold a whole number of unit vectors per batch row");
  }
  const std::size_t per = directions.rows / x.rows;
  const std::size_t d = x.cols;
  std::vector<double> fa(d), fb(d), shifted(d);
  double best = -1.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    f(x.row(i), fa);
    for (std::size_t k = 0; k < per; ++k) {
      auto nu = directions.row(i * per + k);
      for (std::size_t j = 0; j < d; ++j) shifted[j] = x(i, j) + step * nu[j];
      f(shifted, fb);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (fa[j] - fb[j]) * (fa[j] - fb[j]);
      double ratio = std::sqrt(s) / step;
      if (ratio > best) {
        best = ratio;
        if (arg_row) *arg_row = i;
        if (arg_dir) *arg_dir = i * per + k;
      }
    }
  }
  return best;
}

LipschitzEstimate fd_lipschitz_penalty(const FlowStack& stack, const Matrix& batch,
                                       const FdPenaltyConfig& cfg, const Matrix& directions) {
  LipschitzEstimate est;
  std::size_t dir = 0;
  est.forward = fd_lipschitz(
      [&](std::span<const double> in, std::span<double> out) { stack.forward_row(in, out, nullptr); },
      batch, directions, cfg.step, &est.forward_row, &dir);
  auto dv = directions.row(dir);
  est.forward_dir.assign(dv.begin(), dv.end());
  if (cfg.bidirectional) {
    Matrix images = stack.forward(batch).first;
    est.inverse = fd_lipschitz(
        [&](std::span<const double> in, std::span<double> out) { stack.inverse_row(in, out, nullptr); },
        images, directions, cfg.step, &est.inverse_row, &dir);
    auto iv = directions.row(dir);
    est.inverse_dir.assign(iv.begin(), iv.end());
  }
  return est;
}

LipschitzEstimate fd_lipschitz_penalty(const FlowStack& stack, const Matrix& batch,
                                       const FdPenaltyConfig& cfg, std::mt19937_64& rng) {
  if (cfg.n_directions == 0) throw ConfigError("n_directions must be at least 1");
  Matrix dirs = random_unit_directions(batch.rows * cfg.n_directions, batch.cols, rng);
  return fd_lipschitz_penalty(stack, batch, cfg, dirs);
}

void fd_penalty_gradient(const FlowStack& stack, const Matrix& batch, const FdPenaltyConfig& cfg,
                         const LipschitzEstimate& est, std::span<double> gparams) {
  if (cfg.weight == 0.0) return;
  const std::size_t d = stack.dim();
  const double eps = cfg.step;
  auto one_side = [&](bool inverse, std::span<const double> point, const std::vector<double>& nu) {
    std::vector<double> a(point.begin(), point.end()), b(d), fa(d), fb(d);
    for (std::size_t j = 0; j < d; ++j) b[j] = a[j] + eps * nu[j];
    RowTrace ta, tb;
    if (inverse) {
      stack.inverse_row(a, fa, &ta);
      stack.inverse_row(b, fb, &tb);
    } else {
      stack.forward_row(a, fa, &ta);
      stack.forward_row(b, fb, &tb);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (fa[j] - fb[j]) * (fa[j] - fb[j]);
    double nrm = std::sqrt(s);
    if (nrm == 0.0) return;
    double coef = cfg.weight / (eps * nrm);
    std::vector<double> ga(d), gb(d);
    for (std::size_t j = 0; j < d; ++j) {
      ga[j] = coef * (fa[j] - fb[j]);
      gb[j] = -ga[j];
    }
    if (inverse) {
      stack.backward_inverse(ta, ga, 0.0, {}, gparams);
      stack.backward_inverse(tb, gb, 0.0, {}, gparams);
    } else {
      stack.backward_forward(ta, ga, 0.0, {}, gparams);
      stack.backward_forward(tb, gb, 0.0, {}, gparams);
    }
  };
  one_side(false, batch.row(est.forward_row), est.forward_dir);
  if (cfg.bidirectional && !est.inverse_dir.empty()) {
    std::vector<double> y(d);
    stack.forward_row(batch.row(est.inverse_row), y, nullptr);
    one_side(true, y, est.inverse_dir);
  }
}

// ---------------------------------------------------------------------------
// MLE

FitResult fit_density_mle(FlowStack& stack, const Matrix& data, const OptimConfig& cfg) {
  if (data.rows < 2) throw ConfigError("density fitting needs at least 2 samples");
  if (data.cols != stack.dim()) throw DimensionError("data width does not match flow dimension");
  for (double v : data.data) {
    if (!std::isfinite(v)) throw NumericError("training data contains a non-finite value");
  }
  FitResult res;
  if (cfg.steps == 0) return res;
  AdamState adam = AdamState::for_params(stack.params().size(), cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t bs = std::min(cfg.batch_size, data.rows);
  const std::size_t d = stack.dim();
  std::vector<double> grad(stack.params().size());
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Matrix batch(bs, d);
    for (std::size_t i = 0; i < bs; ++i) {
      auto r = static_cast<std::size_t>(uniform01(rng()) * static_cast<double>(data.rows));
      r = std::min(r, data.rows - 1);
      std::copy_n(data.row(r).begin(), d, batch.row(i).begin());
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    std::vector<double> row_loss(bs);
    Matrix latent(bs, d);
    const double inv_n = 1.0 / static_cast<double>(bs);
    try {
      reduce_rows(bs, grad, [&](std::size_t i, std::span<double> g) {
        RowTrace tr;
        auto z = latent.row(i);
        double ld = stack.inverse_row(batch.row(i), z, &tr);
        row_loss[i] = -(standard_normal_logpdf(z) + ld);
        std::vector<double> gz(z.begin(), z.end());
        for (auto& v : gz) v *= inv_n;
        stack.backward_inverse(tr, gz, -inv_n, {}, g);
      });
    } catch (const NumericError& e) {
      throw TrainingError(std::string("density fit diverged: ") + e.what(), step);
    }
    double loss = 0.0;
    for (double v : row_loss) loss += v;
    loss *= inv_n;
    if (cfg.fd.weight > 0.0) {
      auto est = fd_lipschitz_penalty(stack, latent, cfg.fd, rng);
      loss += cfg.fd.weight * est.total();
      fd_penalty_gradient(stack, latent, cfg.fd, est, grad);
    }
    if (!std::isfinite(loss)) throw TrainingError("density fit loss is not finite", step);
    for (double v : grad) {
      if (!std::isfinite(v)) throw TrainingError("density fit gradient is not finite", step);
    }
    res.loss_history.push_back(loss);
    adam_step(adam, stack.params().values(), grad);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr std::uint32_t kFlowMagic = 0x53465246;  // "FRFS"
constexpr std::uint32_t kFlowVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const FlowStack& stack) {
  detail::ByteWriter w;
  w.put<std::uint32_t>(kFlowMagic);
  w.put<std::uint32_t>(kFlowVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(stack.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(stack.depth()));
  for (const auto& d : stack.layers()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.kind));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.identity.size()));
    for (auto i : d.identity) w.put<std::uint32_t>(i);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.transformed.size()));
    for (auto i : d.transformed) w.put<std::uint32_t>(i);
    const auto& sz = d.conditioner.layer_sizes;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sz.size()));
    for (auto s : sz) w.put<std::uint64_t>(s);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.conditioner.activation));
    w.put<std::uint8_t>(d.conditioner.zero_init_last ? 1 : 0);
    w.put<std::uint8_t>(d.conditioner.residual ? 1 : 0);
    w.put<std::uint32_t>(d.bins);
    w.put<double>(d.tail_bound);
    w.put<double>(d.scale_bound);
    w.put<std::uint64_t>(d.param_offset);
    w.put<std::uint64_t>(d.param_count);
  }
  const auto& p = stack.params();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.layout().size()));
  for (const auto& seg : p.layout()) {
    w.put_string(seg.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(seg.shape.size()));
    for (auto s : seg.shape) w.put<std::uint64_t>(s);
  }
  w.put<std::uint64_t>(p.size());
  for (double v : p.values()) w.put<double>(v);
  return w.take();
}

FlowStack deserialize_flow(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.get<std::uint32_t>() != kFlowMagic) throw FormatError("not a flow blob (bad magic)");
  auto version = r.get<std::uint32_t>();
  if (version != kFlowVersion) throw FormatError("unsupported flow blob version " + std::to_string(version));
  auto dim = r.get<std::uint32_t>();
  auto depth = r.get<std::uint32_t>();
  std::vector<LayerDesc> layers(depth);
  for (auto& d : layers) {
    auto kind = r.get<std::uint32_t>();
    if (kind < 1 || kind > 6) throw FormatError("unknown layer kind " + std::to_string(kind));
    d.kind = static_cast<LayerKind>(kind);
    d.identity.resize(r.get<std::uint32_t>());
    for (auto& i : d.identity) i = r.get<std::uint32_t>();
    d.transformed.resize(r.get<std::uint32_t>());
    for (auto& i : d.transformed) i = r.get<std::uint32_t>();
    d.conditioner.layer_sizes.resize(r.get<std::uint32_t>());
    for (auto& s : d.conditioner.layer_sizes) s = r.get<std::uint64_t>();
    d.conditioner.activation = static_cast<Activation>(r.get<std::uint32_t>());
    d.conditioner.zero_init_last = r.get<std::uint8_t>() != 0;
    d.conditioner.residual = r.get<std::uint8_t>() != 0;
    d.bins = r.get<std::uint32_t>();
    d.tail_bound = r.get<double>();
    d.scale_bound = r.get<double>();
    d.param_offset = r.get<std::uint64_t>();
    d.param_count = r.get<std::uint64_t>();
  }
  ParamVector p;
  auto nseg = r.get<std::uint32_t>();
  for (std::uint32_t s = 0; s < nseg; ++s) {
    std::string name = r.get_string();
    std::vector<std::size_t> shape(r.get<std::uint32_t>());
    for (auto& v : shape) v = r.get<std::uint64_t>();
    p.add_segment(std::move(name), std::move(shape));
  }
  auto n = r.get<std::uint64_t>();
  if (n != p.size()) throw FormatError("parameter count does not match layout");
  for (std::size_t i = 0; i < n; ++i) p[i] = r.get<double>();
  if (!r.done()) throw FormatError("trailing bytes after flow blob");
  return FlowStack(dim, std::move(layers), std::move(p));
}

}  // namespace flowrecon
