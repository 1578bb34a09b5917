#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowrecon/sampling.hpp"

namespace flowrecon {

// Images are Matrix objects with rows = height and cols = width, row-major.
using Image = Matrix;
using cdouble = std::complex<double>;

// ---------------------------------------------------------------------------
// Image-defined 2D target densities

/// Density on [0,1]^2 proportional to pixel intensity. Pixel (r, c) has its
/// center at ((c + 0.5)/W, (r + 0.5)/H); the first coordinate runs along
/// columns and the second along rows. Between centers the intensity is
/// bilinear; within half a pixel of the border it is held at the edge value.
class ImageDensity {
 public:
  explicit ImageDensity(const Image& image);

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }

  /// Probability mass of each pixel cell; sums to 1.
  const std::vector<double>& cell_masses() const { return mass_; }

  /// log of the normalized density, floored at log(1e-6 / npixels). Outside
  /// the unit square a quadratic wall is subtracted so that gradients point
  /// back inside.
  double log_density(double x, double y, double* gx = nullptr, double* gy = nullptr) const;

  /// Picks a cell with probability equal to its mass, then a uniform point in it.
  Matrix sample_grid(std::size_t n, std::uint64_t seed) const;

  double floor_log() const { return floor_log_; }

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<double> dens_;  // normalized density at pixel centers
  std::vector<double> mass_;
  std::vector<double> cdf_;
  double floor_log_ = 0.0;
};

ImageDensity image_energy_density(const Image& image);

// ---------------------------------------------------------------------------
// Cartesian undersampling masks

struct SamplingMask {
  std::vector<std::size_t> kept_rows;  // sorted
  std::size_t height = 0;
  std::size_t width = 0;
  double accel = 1.0;
  double center_fraction = 0.0;

  bool keeps(std::size_t row) const;
};

/// Keeps round(height * center_fraction) contiguous rows around the DC row
/// (height / 2 in the centered layout) plus uniformly random further rows
/// until round(height / accel) rows are kept.
SamplingMask make_cartesian_mask(std::size_t height, std::size_t width, double accel,
                                 double center_fraction, std::uint64_t seed);

/// Row of the DC coefficient in the centered k-space layout.
inline std::size_t dc_row(std::size_t height) { return height / 2; }

// ---------------------------------------------------------------------------
// Fourier measurement models

/// Unitary 2D DFT (1/sqrt(HW)) with fftshift, so the DC term sits at
/// (H/2, W/2). Restricted to the kept rows and flattened row-major.
std::vector<cdouble> masked_fft_forward(const Image& image, const SamplingMask& mask, double sigma,
                                        std::optional<std::uint64_t> noise_seed);

struct UvPoint {
  double u = 0.0;
  double v = 0.0;
  double sigma = 0.0;
};

struct UvTable {
  std::vector<UvPoint> points;

  /// Throws ConfigError on duplicate (u, v) pairs.
  void validate() const;
};

/// V(u,v) = sum I(px,py) exp(-2 pi i (u px / W + v py / H)), px the column
/// and py the row index, plus optional complex noise with each point's sigma.
std::vector<cdouble> visibility_forward(const Image& image, const UvTable& uv,
                                        std::optional<std::uint64_t> noise_seed);

/// Random uv coverage: the origin is excluded, points are distinct and
/// symmetric pairs (u,v), (-u,-v) are not both present.
UvTable random_uv_table(std::size_t count, double max_freq, double sigma, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward operators as used by the variational objective

enum class OperatorKind { identity, linear_matrix, image_energy, masked_fft, sparse_visibility };

std::string_view operator_kind_name(OperatorKind k);

/// Immutable measurement model. Complex outputs are stored as interleaved
/// (re, im) pairs so every operator maps R^n to R^m.
class ForwardOperator {
 public:
  static ForwardOperator identity(std::size_t n);
  static ForwardOperator linear_matrix(Matrix a);
  static ForwardOperator image_energy(const Image& image);
  static ForwardOperator masked_fft(const SamplingMask& mask);
  /// With amplitude_only the outputs are |V| per uv point (m = points).
  static ForwardOperator sparse_visibility(std::size_t height, std::size_t width, const UvTable& uv,
                                           bool amplitude_only = false);

  OperatorKind kind() const { return kind_; }
  std::size_t input_size() const { return n_; }
  std::size_t output_size() const { return m_; }
  std::size_t image_height() const { return h_; }
  std::size_t image_width() const { return w_; }
  bool amplitude_only() const { return amplitude_only_; }
  /// Per-output noise scale for visibility tables, empty otherwise.
  const std::vector<double>& output_sigma() const { return out_sigma_; }
  const ImageDensity* density() const { return density_.get(); }

  /// F(x). Not defined for image_energy (throws InvariantError).
  void apply(std::span<const double> x, std::span<double> out) const;

  /// Adjoint of the linear part: out = F^T r. For masked_fft this is
  /// Re(F^H r), the zero-filled reconstruction when r is the measurement.
  void adjoint(std::span<const double> r, std::span<double> out) const;

  /// Data term for one sample. For measurement operators this is
  /// ||y - F(x)||^2 / (2 sigma^2), with per-output sigma for visibility
  /// tables when sigma <= 0. For image_energy it is -log density(x) and y is
  /// ignored. Adds d/dx into grad when grad is non-empty.
  double fidelity(std::span<const double> x, std::span<const double> y, double sigma,
                  std::span<double> grad) const;

  /// F(x) plus Gaussian noise of the given scale on every real component.
  std::vector<double> measure(const Image& truth, double sigma, std::optional<std::uint64_t> noise_seed) const;

 private:
  struct FftPlan;

  OperatorKind kind_ = OperatorKind::identity;
  std::size_t n_ = 0, m_ = 0, h_ = 0, w_ = 0;
  Matrix a_;
  std::shared_ptr<const ImageDensity> density_;
  std::vector<std::size_t> rows_;
  std::shared_ptr<FftPlan> fft_;
  std::vector<double> cos_, sin_;  // visibility kernels, points x pixels
  std::vector<double> out_sigma_;
  bool amplitude_only_ = false;
};

// ---------------------------------------------------------------------------
// Phantoms

enum class PhantomKind { shepp_logan_like, ring, two_blob };
PhantomKind parse_phantom(std::string_view name);

/// Deterministic analytic phantom with intensities in [0, 1]. The ring is
/// symmetric under 180-degree rotation when asymmetry is 0; larger values
/// brighten one side.
Image make_phantom(PhantomKind kind, std::size_t size, double asymmetry = 0.0);

// ---------------------------------------------------------------------------
// File formats

std::string mask_to_csv(const SamplingMask& mask);
SamplingMask mask_from_csv(std::string_view text);
std::string uv_to_csv(const UvTable& uv);
UvTable uv_from_csv(std::string_view text);

/// Binary PGM (P5). Values are mapped linearly from [lo, hi] to the full
/// 8- or 16-bit range; bits must be 8 or 16.
std::string encode_pgm(const Image& image, int bits, double lo, double hi);
/// Decodes to [0, 1] (value / maxval).
Image decode_pgm(std::string_view bytes);

/// Flat float32 little-endian raw data plus its one-line JSON sidecar.
std::string encode_f32(std::span<const double> values);
std::vector<double> decode_f32(std::string_view bytes);

std::string read_file(const std::string& path);
/// Writes via a temporary file and rename so readers never see partial output.
void write_file_atomic(const std::string& path, std::string_view bytes);

}  // namespace flowrecon
