#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flowrecon {

/// Row-major n x d matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

enum class Scheme { srs, lhs, maximin_lhs, pss, lpss, sobol };

Scheme parse_scheme(std::string_view name);
std::string_view scheme_name(Scheme s);

/// Partition of dimensions {0..d-1} into groups that are jointly stratified.
struct PssGrouping {
  std::vector<std::vector<std::size_t>> groups;

  std::size_t dims() const;
  /// Throws ConfigError unless the groups cover 0..d-1 exactly once.
  void validate(std::size_t d) const;

  static PssGrouping singletons(std::size_t d);
  /// Consecutive pairs (0,1), (2,3), ...; a trailing odd dimension is a singleton.
  static PssGrouping consecutive_pairs(std::size_t d);
  static PssGrouping single_group(std::size_t d);
};

/// n x d points in [0,1).
struct UnitDesign {
  Matrix points;
  Scheme scheme = Scheme::srs;
  std::uint64_t seed = 0;
};

/// Gaussian image of a UnitDesign.
struct LatentBatch {
  Matrix points;
  Scheme source_scheme = Scheme::srs;
  std::uint64_t source_seed = 0;
};

UnitDesign srs(std::size_t n, std::size_t d, std::uint64_t seed);
UnitDesign lhs(std::size_t n, std::size_t d, std::uint64_t seed);
UnitDesign maximin_lhs(std::size_t n, std::size_t d, std::uint64_t seed, std::size_t n_candidates);
UnitDesign pss(std::size_t n, const PssGrouping& grouping, std::uint64_t seed);
UnitDesign lpss(std::size_t n, const PssGrouping& grouping, std::uint64_t seed, bool maximin,
                std::size_t n_candidates);

inline constexpr std::size_t kSobolMaxDim = 21;
UnitDesign sobol(std::size_t n, std::size_t d);

/// Smallest pairwise Euclidean distance among the rows (infinity if n < 2).
double min_pairwise_distance(const Matrix& points);

/// Inverse standard-normal CDF after clamping u into [1e-12, 1 - 1e-12].
double normal_quantile(double u);
LatentBatch to_gaussian(const UnitDesign& design);

/// Everything needed to produce a design of a given shape from a seed.
struct SamplerConfig {
  Scheme scheme = Scheme::srs;
  std::optional<PssGrouping> grouping;  // default: consecutive pairs
  bool maximin = false;
  std::size_t n_candidates = 10;
};

/// Dispatches on cfg.scheme. Sobol ignores the seed except for a per-call
/// offset into the sequence (seed * n, modulo the index range) so successive
/// calls see fresh points.
UnitDesign make_design(const SamplerConfig& cfg, std::size_t n, std::size_t d, std::uint64_t seed);

/// Seed for the index-th design of a run with base seed `base`: a mixed
/// stream for random schemes, consecutive blocks for Sobol.
std::uint64_t design_stream(const SamplerConfig& cfg, std::uint64_t base, std::uint64_t index);

/// Sobol points with index offset (skips the first `skip` points).
UnitDesign sobol_skip(std::size_t n, std::size_t d, std::uint64_t skip);

/// CSV with header dim0..dim{d-1}, one point per row, round-trip precision.
std::string design_to_csv(const UnitDesign& design);
Matrix matrix_from_csv(std::string_view text);

}  // namespace flowrecon
