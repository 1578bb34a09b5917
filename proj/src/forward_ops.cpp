#include "flowrecon/forward_ops.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "flowrecon/diffcore.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/kernels.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// ImageDensity

namespace {
constexpr double kWallWidth = 0.02;
}

ImageDensity::ImageDensity(const Image& image) : h_(image.rows), w_(image.cols) {
  if (h_ == 0 || w_ == 0) throw ConfigError("density image is empty");
  double total = 0.0;
  for (double v : image.data) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("density image needs finite, non-negative intensities");
    total += v;
  }
  if (total <= 0.0) throw ConfigError("density image is all zero");
  const double npix = static_cast<double>(h_ * w_);
  dens_.resize(h_ * w_);
  mass_.resize(h_ * w_);
  cdf_.resize(h_ * w_);
  double acc = 0.0;
  for (std::size_t i = 0; i < h_ * w_; ++i) {
    mass_[i] = image.data[i] / total;
    dens_[i] = mass_[i] * npix;
    acc += mass_[i];
    cdf_[i] = acc;
  }
  cdf_.back() = 1.0;
  floor_log_ = std::log(1e-6 / npix);
}

double ImageDensity::log_density(double x, double y, double* gx, double* gy) const {
  // Quadratic wall outside the square, evaluated at the clamped point inside.
  double wall = 0.0, wgx = 0.0, wgy = 0.0;
  auto clamp_axis = [&](double v, double& wall_grad) {
    if (v < 0.0) {
      wall += 0.5 * v * v / (kWallWidth * kWallWidth);
      wall_grad = -v / (kWallWidth * kWallWidth);
      return 0.0;
    }
    if (v > 1.0) {
      double e = v - 1.0;
      wall += 0.5 * e * e / (kWallWidth * kWallWidth);
      wall_grad = -e / (kWallWidth * kWallWidth);
      return 1.0;
    }
    return v;
  };
  const double cx = clamp_axis(x, wgx);
  const double cy = clamp_axis(y, wgy);

  auto locate = [](double v, std::size_t n, std::size_t& i0, double& t, double& dscale) {
    double u = v * static_cast<double>(n) - 0.5;
    dscale = static_cast<double>(n);
    if (n == 1 || u <= 0.0) {
      i0 = 0;
      t = 0.0;
      dscale = 0.0;
      return;
    }
    if (u >= static_cast<double>(n - 1)) {
      i0 = n - 2;
      t = 1.0;
      dscale = 0.0;
      return;
    }
    i0 = static_cast<std::size_t>(u);
    if (i0 > n - 2) i0 = n - 2;
    t = u - static_cast<double>(i0);
  };
  std::size_t c0, r0;
  double tx, ty, sx, sy;
  locate(cx, w_, c0, tx, sx);
  locate(cy, h_, r0, ty, sy);
  const std::size_t c1 = w_ > 1 ? c0 + 1 : c0;
  const std::size_t r1 = h_ > 1 ? r0 + 1 : r0;
  const double d00 = dens_[r0 * w_ + c0], d01 = dens_[r0 * w_ + c1];
  const double d10 = dens_[r1 * w_ + c0], d11 = dens_[r1 * w_ + c1];
  const double p = (1 - ty) * ((1 - tx) * d00 + tx * d01) + ty * ((1 - tx) * d10 + tx * d11);
  double lp, dx = 0.0, dy = 0.0;
  if (p > std::exp(floor_log_)) {
    lp = std::log(p);
    dx = sx * ((1 - ty) * (d01 - d00) + ty * (d11 - d10)) / p;
    dy = sy * ((1 - tx) * (d10 - d00) + tx * (d11 - d01)) / p;
  } else {
    lp = floor_log_;
  }
  if (gx) *gx = dx + wgx;
  if (gy) *gy = dy + wgy;
  return lp - wall;
}

Matrix ImageDensity::sample_grid(std::size_t n, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  Matrix out(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    double u = uniform01(rng());
    auto cell = static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
    cell = std::min(cell, cdf_.size() - 1);
    // Skip zero-mass cells that upper_bound can land on only through ties.
    while (mass_[cell] == 0.0 && cell + 1 < cdf_.size()) ++cell;
    const std::size_t r = cell / w_, c = cell % w_;
    out(i, 0) = (static_cast<double>(c) + uniform01(rng())) / static_cast<double>(w_);
    out(i, 1) = (static_cast<double>(r) + uniform01(rng())) / static_cast<double>(h_);
  }
  return out;
}

ImageDensity image_energy_density(const Image& image) { return ImageDensity(image); }

// ---------------------------------------------------------------------------
// Masks

bool SamplingMask::keeps(std::size_t row) const {
  return std::binary_search(kept_rows.begin(), kept_rows.end(), row);
}

SamplingMask make_cartesian_mask(std::size_t height, std::size_t width, double accel,
                                 double center_fraction, std::uint64_t seed) {
  if (height == 0 || width == 0) throw ConfigError("mask height and width must be positive");
  if (!(accel >= 1.0)) throw ConfigError("acceleration must be at least 1");
  if (!(center_fraction >= 0.0) || center_fraction > 1.0 / accel + 1e-12) {
    throw ConfigError("center_fraction must lie in [0, 1/accel]");
  }
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(height) / accel));
  const auto center = static_cast<std::size_t>(std::llround(static_cast<double>(height) * center_fraction));
  if (keep == 0 || center > keep || keep > height) {
    throw ConfigError("mask row counts are infeasible for height " + std::to_string(height));
  }
  SamplingMask m;
  m.height = height;
  m.width = width;
  m.accel = accel;
  m.center_fraction = center_fraction;
  std::vector<bool> kept(height, false);
  const std::size_t start = dc_row(height) - std::min(dc_row(height), center / 2);
  for (std::size_t r = start; r < start + center && r < height; ++r) kept[r] = true;
  std::vector<std::size_t> rest;
  for (std::size_t r = 0; r < height; ++r) {
    if (!kept[r]) rest.push_back(r);
  }
  std::mt19937_64 rng(seed);
  const std::size_t extra = keep - static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
  for (std::size_t i = 0; i < extra; ++i) {
    std::size_t j = i + static_cast<std::size_t>(uniform01(rng()) * static_cast<double>(rest.size() - i));
    j = std::min(j, rest.size() - 1);
    std::swap(rest[i], rest[j]);
    kept[rest[i]] = true;
  }
  for (std::size_t r = 0; r < height; ++r) {
    if (kept[r]) m.kept_rows.push_back(r);
  }
  return m;
}

// ---------------------------------------------------------------------------
// FFT plumbing

namespace {
std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}
}  // namespace

struct ForwardOperator::FftPlan {
  std::size_t h, w;
  fftw_plan fwd = nullptr;
  fftw_plan bwd = nullptr;

  FftPlan(std::size_t hh, std::size_t ww) : h(hh), w(ww) {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    std::vector<cdouble> a(h * w), b(h * w);
    auto* pa = reinterpret_cast<fftw_complex*>(a.data());
    auto* pb = reinterpret_cast<fftw_complex*>(b.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fwd = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), pa, pb, FFTW_FORWARD, flags);
    bwd = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), pa, pb, FFTW_BACKWARD, flags);
    if (!fwd || !bwd) throw ConfigError("FFTW could not plan a transform");
  }
  ~FftPlan() {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(bwd);
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  // New-array execution is thread safe once the plan exists.
  void run(bool forward, std::vector<cdouble>& in, std::vector<cdouble>& out) const {
    fftw_execute_dft(forward ? fwd : bwd, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
  }

  // Centered index r holds unshifted frequency (r - h/2) mod h.
  std::size_t unshift_row(std::size_t r) const { return (r + h - h / 2) % h; }
  std::size_t unshift_col(std::size_t c) const { return (c + w - w / 2) % w; }
};

std::vector<cdouble> masked_fft_forward(const Image& image, const SamplingMask& mask, double sigma,
                                        std::optional<std::uint64_t> noise_seed) {
  if (image.rows != mask.height || image.cols != mask.width) {
    throw DimensionError("image shape does not match the sampling mask");
  }
  auto op = ForwardOperator::masked_fft(mask);
  std::vector<double> flat(op.output_size());
  op.apply(image.data, flat);
  std::vector<cdouble> out(flat.size() / 2);
  std::mt19937_64 rng(noise_seed.value_or(0));
  std::normal_distribution<double> nd(0.0, sigma);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double re = flat[2 * k], im = flat[2 * k + 1];
    if (noise_seed && sigma > 0.0) {
      re += nd(rng);
      im += nd(rng);
    }
    out[k] = {re, im};
  }
  return out;
}

void UvTable::validate() const {
  std::set<std::pair<double, double>> seen;
  for (const auto& p : points) {
    if (!std::isfinite(p.u) || !std::isfinite(p.v) || !(p.sigma >= 0.0)) {
      throw ConfigError("uv table entries must be finite with sigma >= 0");
    }
    if (!seen.insert({p.u, p.v}).second) throw ConfigError("uv table contains a duplicate point");
  }
}

std::vector<cdouble> visibility_forward(const Image& image, const UvTable& uv,
                                        std::optional<std::uint64_t> noise_seed) {
  auto op = ForwardOperator::sparse_visibility(image.rows, image.cols, uv, false);
  std::vector<double> flat(op.output_size());
  op.apply(image.data, flat);
  std::vector<cdouble> out(uv.points.size());
  std::mt19937_64 rng(noise_seed.value_or(0));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double re = flat[2 * k], im = flat[2 * k + 1];
    if (noise_seed) {
      re += uv.points[k].sigma * nd(rng);
      im += uv.points[k].sigma * nd(rng);
    }
    out[k] = {re, im};
  }
  return out;
}

UvTable random_uv_table(std::size_t count, double max_freq, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  UvTable t;
  std::set<std::pair<double, double>> seen;
  std::size_t guard = 0;
  while (t.points.size() < count) {
    if (++guard > 100 * (count + 1)) throw ConfigError("could not place distinct uv points");
    double u = (2.0 * uniform01(rng()) - 1.0) * max_freq;
    double v = (2.0 * uniform01(rng()) - 1.0) * max_freq;
    if (u == 0.0 && v == 0.0) continue;
    if (seen.count({u, v}) || seen.count({-u, -v})) continue;
    seen.insert({u, v});
    t.points.push_back({u, v, sigma});
  }
  return t;
}

// ---------------------------------------------------------------------------
// ForwardOperator

std::string_view operator_kind_name(OperatorKind k) {
  switch (k) {
    case OperatorKind::identity: return "identity";
    case OperatorKind::linear_matrix: return "linear_matrix";
    case OperatorKind::image_energy: return "image_energy";
    case OperatorKind::masked_fft: return "masked_fft";
    case OperatorKind::sparse_visibility: return "sparse_visibility";
  }
  return "?";
}

ForwardOperator ForwardOperator::identity(std::size_t n) {
  if (n == 0) throw ConfigError("identity operator needs a positive size");
  ForwardOperator op;
  op.kind_ = OperatorKind::identity;
  op.n_ = op.m_ = n;
  return op;
}

ForwardOperator ForwardOperator::linear_matrix(Matrix a) {
  if (a.rows == 0 || a.cols == 0) throw ConfigError("linear operator matrix is empty");
  ForwardOperator op;
  op.kind_ = OperatorKind::linear_matrix;
  op.n_ = a.cols;
  op.m_ = a.rows;
  op.a_ = std::move(a);
  return op;
}

ForwardOperator ForwardOperator::image_energy(const Image& image) {
  ForwardOperator op;
  op.kind_ = OperatorKind::image_energy;
  op.n_ = 2;
  op.m_ = 0;
  op.h_ = image.rows;
  op.w_ = image.cols;
  op.density_ = std::make_shared<const ImageDensity>(image);
  return op;
}

ForwardOperator ForwardOperator::masked_fft(const SamplingMask& mask) {
  if (mask.height == 0 || mask.width == 0 || mask.kept_rows.empty()) {
    throw ConfigError("masked FFT needs a non-empty mask");
  }
  for (auto r : mask.kept_rows) {
    if (r >= mask.height) throw ConfigError("mask row out of range");
  }
  ForwardOperator op;
  op.kind_ = OperatorKind::masked_fft;
  op.h_ = mask.height;
  op.w_ = mask.width;
  op.n_ = op.h_ * op.w_;
  op.rows_ = mask.kept_rows;
  op.m_ = 2 * op.rows_.size() * op.w_;
  op.fft_ = std::make_shared<FftPlan>(op.h_, op.w_);
  return op;
}

ForwardOperator ForwardOperator::sparse_visibility(std::size_t height, std::size_t width,
                                                   const UvTable& uv, bool amplitude_only) {
  if (height == 0 || width == 0) throw ConfigError("visibility operator needs a positive image size");
  if (uv.points.empty()) throw ConfigError("uv table is empty");
  uv.validate();
  ForwardOperator op;
  op.kind_ = OperatorKind::sparse_visibility;
  op.h_ = height;
  op.w_ = width;
  op.n_ = height * width;
  op.amplitude_only_ = amplitude_only;
  const std::size_t k = uv.points.size();
  op.m_ = amplitude_only ? k : 2 * k;
  op.cos_.resize(k * op.n_);
  op.sin_.resize(k * op.n_);
  for (std::size_t p = 0; p < k; ++p) {
    const auto& pt = uv.points[p];
    for (std::size_t py = 0; py < height; ++py) {
      for (std::size_t px = 0; px < width; ++px) {
        double th = 2.0 * std::numbers::pi *
                    (pt.u * static_cast<double>(px) / static_cast<double>(width) +
                     pt.v * static_cast<double>(py) / static_cast<double>(height));
        op.cos_[p * op.n_ + py * width + px] = std::cos(th);
        op.sin_[p * op.n_ + py * width + px] = std::sin(th);
      }
    }
    if (amplitude_only) {
      op.out_sigma_.push_back(pt.sigma);
    } else {
      op.out_sigma_.push_back(pt.sigma);
      op.out_sigma_.push_back(pt.sigma);
    }
  }
  return op;
}

void ForwardOperator::apply(std::span<const double> x, std::span<double> out) const {
  if (kind_ == OperatorKind::image_energy) throw InvariantError("image_energy has no measurement map");
  if (x.size() != n_) throw DimensionError("operator input has wrong length");
  if (out.size() != m_) throw DimensionError("operator output has wrong length");
  switch (kind_) {
    case OperatorKind::identity:
      std::copy(x.begin(), x.end(), out.begin());
      return;
    case OperatorKind::linear_matrix:
      for (std::size_t i = 0; i < m_; ++i) out[i] = kernels::dot(a_.row(i), x);
      return;
    case OperatorKind::image_energy:
      throw InvariantError("image_energy has no measurement map");
    case OperatorKind::masked_fft: {
      std::vector<cdouble> in(n_), k(n_);
      for (std::size_t i = 0; i < n_; ++i) in[i] = x[i];
      fft_->run(true, in, k);
      const double scale = 1.0 / std::sqrt(static_cast<double>(n_));
      for (std::size_t idx = 0; idx < rows_.size(); ++idx) {
        const std::size_t ur = fft_->unshift_row(rows_[idx]);
        for (std::size_t c = 0; c < w_; ++c) {
          cdouble v = k[ur * w_ + fft_->unshift_col(c)] * scale;
          out[2 * (idx * w_ + c)] = v.real();
          out[2 * (idx * w_ + c) + 1] = v.imag();
        }
      }
      return;
    }
    case OperatorKind::sparse_visibility: {
      const std::size_t k = cos_.size() / n_;
      for (std::size_t p = 0; p < k; ++p) {
        double re = kernels::dot(std::span<const double>(cos_.data() + p * n_, n_), x);
        double im = -kernels::dot(std::span<const double>(sin_.data() + p * n_, n_), x);
        if (amplitude_only_) {
          out[p] = std::hypot(re, im);
        } else {
          out[2 * p] = re;
          out[2 * p + 1] = im;
        }
      }
      return;
    }
  }
}

void ForwardOperator::adjoint(std::span<const double> r, std::span<double> out) const {
  if (kind_ == OperatorKind::image_energy) throw InvariantError("image_energy has no measurement map");
  if (out.size() != n_) throw DimensionError("adjoint output has wrong length");
  switch (kind_) {
    case OperatorKind::identity:
      if (r.size() != m_) throw DimensionError("adjoint input has wrong length");
      std::copy(r.begin(), r.end(), out.begin());
      return;
    case OperatorKind::linear_matrix:
      if (r.size() != m_) throw DimensionError("adjoint input has wrong length");
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < m_; ++i) kernels::axpy(r[i], a_.row(i), out);
      return;
    case OperatorKind::image_energy:
      throw InvariantError("image_energy has no measurement map");
    case OperatorKind::masked_fft: {
      if (r.size() != m_) throw DimensionError("adjoint input has wrong length");
      std::vector<cdouble> k(n_, 0.0), img(n_);
      for (std::size_t idx = 0; idx < rows_.size(); ++idx) {
        const std::size_t ur = fft_->unshift_row(rows_[idx]);
        for (std::size_t c = 0; c < w_; ++c) {
          k[ur * w_ + fft_->unshift_col(c)] = {r[2 * (idx * w_ + c)], r[2 * (idx * w_ + c) + 1]};
        }
      }
      fft_->run(false, k, img);
      const double scale = 1.0 / std::sqrt(static_cast<double>(n_));
      for (std::size_t i = 0; i < n_; ++i) out[i] = img[i].real() * scale;
      return;
    }
    case OperatorKind::sparse_visibility: {
      if (amplitude_only_) throw InvariantError("amplitude-only visibilities are not linear");
      if (r.size() != m_) throw DimensionError("adjoint input has wrong length");
      std::fill(out.begin(), out.end(), 0.0);
      const std::size_t k = m_ / 2;
      for (std::size_t p = 0; p < k; ++p) {
        kernels::axpy(r[2 * p], std::span<const double>(cos_.data() + p * n_, n_), out);
        kernels::axpy(-r[2 * p + 1], std::span<const double>(sin_.data() + p * n_, n_), out);
      }
      return;
    }
  }
}

double ForwardOperator::fidelity(std::span<const double> x, std::span<const double> y, double sigma,
                                 std::span<double> grad) const {
  if (x.size() != n_) throw DimensionError("fidelity input has wrong length");
  const bool want = !grad.empty();
  if (kind_ == OperatorKind::image_energy) {
    double gx = 0.0, gy = 0.0;
    double lp = density_->log_density(x[0], x[1], &gx, &gy);
    if (want) {
      grad[0] -= gx;
      grad[1] -= gy;
    }
    return -lp;
  }
  if (y.size() != m_) throw DimensionError("measurement has wrong length");
  std::vector<double> inv_var(m_);
  for (std::size_t i = 0; i < m_; ++i) {
    double s = sigma > 0.0 ? sigma : (out_sigma_.empty() ? 0.0 : out_sigma_[i]);
    if (!(s > 0.0)) throw ConfigError("noise sigma must be positive");
    inv_var[i] = 1.0 / (s * s);
  }
  if (kind_ == OperatorKind::sparse_visibility && amplitude_only_) {
    const std::size_t k = m_;
    double loss = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      std::span<const double> cs(cos_.data() + p * n_, n_), sn(sin_.data() + p * n_, n_);
      double re = kernels::dot(cs, x);
      double im = -kernels::dot(sn, x);
      double a = std::hypot(re, im);
      double res = a - y[p];
      loss += 0.5 * res * res * inv_var[p];
      if (want && a > 0.0) {
        double c = res * inv_var[p] / a;
        kernels::axpy(c * re, cs, grad);
        kernels::axpy(-c * im, sn, grad);
      }
    }
    return loss;
  }
  std::vector<double> pred(m_);
  apply(x, pred);
  double loss = 0.0;
  for (std::size_t i = 0; i < m_; ++i) {
    pred[i] = (pred[i] - y[i]);
    loss += 0.5 * pred[i] * pred[i] * inv_var[i];
    pred[i] *= inv_var[i];
  }
  if (want) {
    std::vector<double> g(n_);
    adjoint(pred, g);
    for (std::size_t i = 0; i < n_; ++i) grad[i] += g[i];
  }
  return loss;
}

std::vector<double> ForwardOperator::measure(const Image& truth, double sigma,
                                             std::optional<std::uint64_t> noise_seed) const {
  if (kind_ == OperatorKind::image_energy) return {};
  std::mt19937_64 rng(noise_seed.value_or(0));
  std::normal_distribution<double> nd(0.0, 1.0);
  auto scale_of = [&](std::size_t i) {
    return sigma > 0.0 ? sigma : (out_sigma_.empty() ? 0.0 : out_sigma_[i]);
  };
  if (kind_ == OperatorKind::sparse_visibility && amplitude_only_) {
    const std::size_t k = m_;
    std::vector<double> out(k);
    for (std::size_t p = 0; p < k; ++p) {
      double re = kernels::dot(std::span<const double>(cos_.data() + p * n_, n_), truth.data);
      double im = -kernels::dot(std::span<const double>(sin_.data() + p * n_, n_), truth.data);
      if (noise_seed) {
        re += scale_of(p) * nd(rng);
        im += scale_of(p) * nd(rng);
      }
      out[p] = std::hypot(re, im);
    }
    return out;
  }
  std::vector<double> out(m_);
  apply(truth.data, out);
  if (noise_seed) {
    for (std::size_t i = 0; i < m_; ++i) out[i] += scale_of(i) * nd(rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phantoms

PhantomKind parse_phantom(std::string_view name) {
  if (name == "shepp_logan_like" || name == "shepp_logan") return PhantomKind::shepp_logan_like;
  if (name == "ring") return PhantomKind::ring;
  if (name == "two_blob") return PhantomKind::two_blob;
  throw ConfigError("unknown phantom '" + std::string(name) + "'");
}

Image make_phantom(PhantomKind kind, std::size_t size, double asymmetry) {
  if (size < 8) throw ConfigError("phantom size must be at least 8");
  if (!(asymmetry >= 0.0)) throw ConfigError("phantom asymmetry must be non-negative");
  Image img(size, size);
  const double n = static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      // Centered coordinates in [-1, 1]; a 180-degree rotation negates both.
      const double x = (2.0 * static_cast<double>(c) + 1.0) / n - 1.0;
      const double y = 1.0 - (2.0 * static_cast<double>(r) + 1.0) / n;
      double v = 0.0;
      switch (kind) {
        case PhantomKind::shepp_logan_like: {
          struct Ellipse {
            double a, x0, y0, rx, ry, phi;
          };
          static constexpr Ellipse kEllipses[] = {
              {1.0, 0.0, 0.0, 0.69, 0.92, 0.0},       {-0.8, 0.0, -0.0184, 0.6624, 0.874, 0.0},
              {-0.2, 0.22, 0.0, 0.11, 0.31, -18.0},   {-0.2, -0.22, 0.0, 0.16, 0.41, 18.0},
              {0.1, 0.0, 0.35, 0.21, 0.25, 0.0},      {0.1, 0.0, 0.1, 0.046, 0.046, 0.0},
              {0.1, 0.0, -0.1, 0.046, 0.046, 0.0},    {0.1, -0.08, -0.605, 0.046, 0.023, 0.0},
              {0.1, 0.0, -0.606, 0.023, 0.023, 0.0},  {0.1, 0.06, -0.605, 0.023, 0.046, 0.0},
          };
          for (const auto& e : kEllipses) {
            const double ph = e.phi * std::numbers::pi / 180.0;
            const double dx = x - e.x0, dy = y - e.y0;
            const double xr = dx * std::cos(ph) + dy * std::sin(ph);
            const double yr = -dx * std::sin(ph) + dy * std::cos(ph);
            if ((xr * xr) / (e.rx * e.rx) + (yr * yr) / (e.ry * e.ry) <= 1.0) v += e.a;
          }
          break;
        }
        case PhantomKind::ring: {
          const double rad = std::sqrt(x * x + y * y);
          const double shape = std::exp(-0.5 * (rad - 0.55) * (rad - 0.55) / (0.12 * 0.12));
          const double side = rad > 0.0 ? y / rad : 0.0;
          v = shape * (1.0 + asymmetry * side) / (1.0 + asymmetry);
          break;
        }
        case PhantomKind::two_blob: {
          auto blob = [&](double cx, double cy, double amp) {
            double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            return amp * std::exp(-0.5 * d2 / (0.15 * 0.15));
          };
          v = blob(-0.45, 0.2, 1.0) + blob(0.45, -0.2, 0.8);
          break;
        }
      }
      img(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// File formats

namespace {

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    if (end == text.size()) break;
    start = end + 1;
  }
  return out;
}

double parse_double(std::string_view s, const char* what) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError(std::string("cannot parse ") + what + " from '" + std::string(s) + "'");
  }
  return v;
}

std::string fmt17(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

std::string mask_to_csv(const SamplingMask& mask) {
  std::ostringstream os;
  os << "# height=" << mask.height << " width=" << mask.width << " accel=" << fmt17(mask.accel)
     << " center_fraction=" << fmt17(mask.center_fraction) << "\n";
  os << "row\n";
  for (auto r : mask.kept_rows) os << r << "\n";
  return os.str();
}

SamplingMask mask_from_csv(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.size() < 2 || lines[0].rfind("# ", 0) != 0) throw FormatError("mask CSV lacks its header comment");
  SamplingMask m;
  std::istringstream hdr{std::string(lines[0].substr(2))};
  std::string tok;
  bool have_h = false, have_w = false;
  while (hdr >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("bad mask header token '" + tok + "'");
    std::string key = tok.substr(0, eq);
    double v = parse_double(std::string_view(tok).substr(eq + 1), key.c_str());
    if (key == "height") {
      m.height = static_cast<std::size_t>(v);
      have_h = true;
    } else if (key == "width") {
      m.width = static_cast<std::size_t>(v);
      have_w = true;
    } else if (key == "accel") {
      m.accel = v;
    } else if (key == "center_fraction") {
      m.center_fraction = v;
    }
  }
  if (!have_h || !have_w) throw FormatError("mask header needs height and width");
  if (lines[1] != "row") throw FormatError("mask CSV column header must be 'row'");
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    double v = parse_double(lines[i], "row");
    if (v < 0 || v >= static_cast<double>(m.height) || v != std::floor(v)) {
      throw FormatError("mask row out of range");
    }
    m.kept_rows.push_back(static_cast<std::size_t>(v));
  }
  std::sort(m.kept_rows.begin(), m.kept_rows.end());
  if (std::adjacent_find(m.kept_rows.begin(), m.kept_rows.end()) != m.kept_rows.end()) {
    throw FormatError("mask CSV repeats a row");
  }
  return m;
}

std::string uv_to_csv(const UvTable& uv) {
  std::string s = "u,v,sigma\n";
  for (const auto& p : uv.points) s += fmt17(p.u) + "," + fmt17(p.v) + "," + fmt17(p.sigma) + "\n";
  return s;
}

UvTable uv_from_csv(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.empty() || lines[0] != "u,v,sigma") throw FormatError("uv CSV header must be 'u,v,sigma'");
  UvTable t;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto a = lines[i].find(',');
    auto b = a == std::string_view::npos ? a : lines[i].find(',', a + 1);
    if (b == std::string_view::npos) throw FormatError("uv CSV row needs three fields");
    t.points.push_back({parse_double(lines[i].substr(0, a), "u"),
                        parse_double(lines[i].substr(a + 1, b - a - 1), "v"),
                        parse_double(lines[i].substr(b + 1), "sigma")});
  }
  t.validate();
  return t;
}

std::string encode_pgm(const Image& image, int bits, double lo, double hi) {
  if (bits != 8 && bits != 16) throw ConfigError("PGM depth must be 8 or 16 bits");
  const unsigned maxval = bits == 8 ? 255u : 65535u;
  std::string out = "P5\n" + std::to_string(image.cols) + " " + std::to_string(image.rows) + "\n" +
                    std::to_string(maxval) + "\n";
  const double span = hi - lo;
  for (double v : image.data) {
    double t = span > 0.0 ? (v - lo) / span : 0.0;
    auto q = static_cast<unsigned>(std::lround(std::clamp(t, 0.0, 1.0) * maxval));
    if (bits == 16) out.push_back(static_cast<char>((q >> 8) & 0xff));  // big-endian per PGM
    out.push_back(static_cast<char>(q & 0xff));
  }
  return out;
}

Image decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P5") throw FormatError("not a binary PGM (P5) file");
  auto w = static_cast<std::size_t>(parse_double(next_token(), "PGM width"));
  auto h = static_cast<std::size_t>(parse_double(next_token(), "PGM height"));
  auto maxval = static_cast<unsigned>(parse_double(next_token(), "PGM maxval"));
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("bad PGM header");
  ++pos;  // single whitespace before the raster
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  if (bytes.size() < pos + w * h * bpp) throw FormatError("PGM raster is truncated");
  Image img(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    unsigned v = static_cast<unsigned char>(bytes[pos + i * bpp]);
    if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i * bpp + 1]);
    img.data[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

std::string encode_f32(std::span<const double> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

std::vector<double> decode_f32(std::string_view bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("float32 raw size is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write file: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move " + tmp + " into place: " + ec.message());
}

}  // namespace flowrecon
