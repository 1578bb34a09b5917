#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowrecon/sampling.hpp"
#include "flowrecon/variational.hpp"

namespace flowrecon {

// ---------------------------------------------------------------------------
// Precision, recall, density, coverage

struct PrdcReport {
  double precision = 0.0;
  double recall = 0.0;
  double density = 0.0;
  double coverage = 0.0;
  std::size_t k = 5;
};

/// k-nearest-neighbour manifold metrics on Euclidean distances. A point lies
/// in a ball when its distance is strictly below the radius. Requires
/// rows(real), rows(fake) > k >= 1 and equal widths.
PrdcReport prdc(const Matrix& real, const Matrix& fake, std::size_t k = 5);

/// Distance from each row to its k-th nearest other row.
std::vector<double> knn_radii(const Matrix& points, std::size_t k);

// ---------------------------------------------------------------------------
// Pixel statistics

struct StatsReport {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> mean_image;
  std::vector<double> std_image;        // population convention
  std::vector<double> abs_error_image;  // empty without ground truth
  double mean_of_std = 0.0;
  std::optional<double> mean_abs_error;
};

/// Column statistics of an n x d sample matrix laid out as h x w images
/// (h * w == d; pass h = 1, w = d for plain vectors).
StatsReport posterior_stats(const Matrix& samples, std::size_t height, std::size_t width,
                            std::optional<std::span<const double>> truth = std::nullopt);
/// Uses the image shape of ps, or 1 x d when it has none.
StatsReport posterior_stats(const PosteriorSamples& ps, std::optional<std::span<const double>> truth = std::nullopt);

/// 10 log10(range^2 / MSE) with range = max(truth) - min(truth) (1 if flat).
/// Infinity when the images are equal.
double psnr(std::span<const double> estimate, std::span<const double> truth);

// ---------------------------------------------------------------------------
// Mode separation

struct ModeClusters {
  std::vector<std::size_t> labels;   // per sample, in reported cluster order
  std::vector<std::size_t> sizes;
  std::vector<StatsReport> modes;
  std::vector<double> objective_trace;  // within-cluster SS per iteration of the kept restart
};

/// k-means with k-means++ seeding and 10 restarts; keeps the restart with the
/// lowest within-cluster sum of squares. Clusters are ordered by ascending
/// mean absolute error when truth is given, otherwise by descending size.
ModeClusters mode_cluster(const Matrix& samples, std::size_t height, std::size_t width, std::size_t k_modes,
                          std::uint64_t seed, std::optional<std::span<const double>> truth = std::nullopt);
ModeClusters mode_cluster(const PosteriorSamples& ps, std::size_t k_modes, std::uint64_t seed,
                          std::optional<std::span<const double>> truth = std::nullopt);

// ---------------------------------------------------------------------------
// Variance-reduction studies

enum class TestFunction { additive, constant, interaction };
TestFunction parse_test_function(std::string_view name);
std::string_view test_function_name(TestFunction g);
/// additive: sum u_i. interaction: sin(2 pi u_0) sin(2 pi u_1) (needs d >= 2).
double evaluate_test_function(TestFunction g, std::span<const double> u);

struct VarianceRow {
  Scheme scheme = Scheme::srs;
  double variance = 0.0;
  double ratio_to_srs = 0.0;  // 0/0 is reported as 1
};

/// Variance across replicates of the design mean of g, for each scheme.
/// SRS is always evaluated as the reference. Requires replicates >= 30.
std::vector<VarianceRow> mc_variance_study(const std::vector<SamplerConfig>& schemes, TestFunction g,
                                           std::size_t n, std::size_t d, std::size_t replicates,
                                           std::uint64_t seed);

}  // namespace flowrecon
