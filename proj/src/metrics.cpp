#include "flowrecon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "flowrecon/diffcore.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/kernels.hpp"
#include "flowrecon/parallel.hpp"

namespace flowrecon {

namespace {

double sqdist(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  return kernels::squared_distance(a.row(i), b.row(j));
}

// Squared distance from each row to its k-th nearest other row.
std::vector<double> knn_radii_sq(const Matrix& points, std::size_t k) {
  std::vector<double> out(points.rows);
  parallel_for(points.rows, [&](std::size_t i) {
    std::vector<double> d;
    d.reserve(points.rows - 1);
    for (std::size_t j = 0; j < points.rows; ++j) {
      if (j != i) d.push_back(sqdist(points, i, points, j));
    }
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    out[i] = d[k - 1];
  });
  return out;
}

void check_knn(const Matrix& points, std::size_t k, const char* what) {
  if (k == 0) throw ConfigError("prdc: k must be at least 1");
  if (points.rows <= k) {
    throw ConfigError(std::string("prdc: k = ") + std::to_string(k) + " needs more than k " + what +
                      " samples, got " + std::to_string(points.rows));
  }
}

}  // namespace

std::vector<double> knn_radii(const Matrix& points, std::size_t k) {
  check_knn(points, k, "");
  auto r = knn_radii_sq(points, k);
  for (double& v : r) v = std::sqrt(v);
  return r;
}

PrdcReport prdc(const Matrix& real, const Matrix& fake, std::size_t k) {
  check_knn(real, k, "real");
  check_knn(fake, k, "fake");
  if (real.cols != fake.cols) {
    throw DimensionError("prdc: real has " + std::to_string(real.cols) + " columns, fake has " +
                         std::to_string(fake.cols));
  }
  const std::size_t m = real.rows;
  const std::size_t n = fake.rows;
  const auto r2 = knn_radii_sq(real, k);
  const auto f2 = knn_radii_sq(fake, k);

  // One pass over fakes. Per-real flags are OR-merged across chunks.
  struct Partial {
    std::size_t inside = 0;
    std::size_t hits = 0;
    std::vector<char> covered;
    std::vector<char> recalled;
  };
  auto chunks = make_chunks(n, std::max<std::size_t>(1, worker_count()));
  std::vector<Partial> parts(chunks.size());
  parallel_chunks(chunks, [&](const Chunk& c) {
    Partial& p = parts[c.index];
    p.covered.assign(m, 0);
    p.recalled.assign(m, 0);
    for (std::size_t j = c.begin; j < c.end; ++j) {
      bool in_any = false;
      for (std::size_t i = 0; i < m; ++i) {
        double d2 = sqdist(fake, j, real, i);
        if (d2 < r2[i]) {
          in_any = true;
          ++p.hits;
          p.covered[i] = 1;
        }
        if (d2 < f2[j]) p.recalled[i] = 1;
      }
      if (in_any) ++p.inside;
    }
  });

  std::size_t inside = 0, hits = 0;
  std::vector<char> covered(m, 0), recalled(m, 0);
  for (const auto& p : parts) {
    inside += p.inside;
    hits += p.hits;
    for (std::size_t i = 0; i < m; ++i) {
      covered[i] |= p.covered[i];
      recalled[i] |= p.recalled[i];
    }
  }
  auto count = [](const std::vector<char>& v) { return static_cast<double>(std::count(v.begin(), v.end(), 1)); };

  PrdcReport rep;
  rep.k = k;
  rep.precision = static_cast<double>(inside) / static_cast<double>(n);
  rep.recall = count(recalled) / static_cast<double>(m);
  rep.density = static_cast<double>(hits) / static_cast<double>(k * n);
  rep.coverage = count(covered) / static_cast<double>(m);
  return rep;
}

// ---------------------------------------------------------------------------

StatsReport posterior_stats(const Matrix& samples, std::size_t height, std::size_t width,
                            std::optional<std::span<const double>> truth) {
  const std::size_t n = samples.rows;
  const std::size_t d = samples.cols;
  if (n == 0) throw ConfigError("posterior_stats: no samples");
  if (height * width != d) {
    throw DimensionError("posterior_stats: shape " + std::to_string(height) + "x" + std::to_string(width) +
                         " does not match " + std::to_string(d) + " columns");
  }
  if (truth && truth->size() != d) {
    throw DimensionError("posterior_stats: truth has " + std::to_string(truth->size()) + " entries, expected " +
                         std::to_string(d));
  }
  for (double v : samples.data) {
    if (!std::isfinite(v)) throw NumericError("posterior_stats: non-finite sample");
  }

  StatsReport rep;
  rep.height = height;
  rep.width = width;
  rep.mean_image.assign(d, 0.0);
  rep.std_image.assign(d, 0.0);
  // Two passes on data shifted by the first sample, so identical samples give
  // exactly zero spread.
  const double inv_n = 1.0 / static_cast<double>(n);
  auto shift = samples.row(0);
  std::vector<double> offset(d, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    auto row = samples.row(i);
    for (std::size_t p = 0; p < d; ++p) offset[p] += row[p] - shift[p];
  }
  for (double& v : offset) v *= inv_n;
  for (std::size_t p = 0; p < d; ++p) rep.mean_image[p] = shift[p] + offset[p];
  for (std::size_t i = 0; i < n; ++i) {
    auto row = samples.row(i);
    for (std::size_t p = 0; p < d; ++p) {
      double e = (row[p] - shift[p]) - offset[p];
      rep.std_image[p] += e * e;
    }
  }
  for (double& v : rep.std_image) v = std::sqrt(v * inv_n);
  rep.mean_of_std = std::accumulate(rep.std_image.begin(), rep.std_image.end(), 0.0) / static_cast<double>(d);

  if (truth) {
    rep.abs_error_image.resize(d);
    for (std::size_t p = 0; p < d; ++p) rep.abs_error_image[p] = std::abs(rep.mean_image[p] - (*truth)[p]);
    rep.mean_abs_error =
        std::accumulate(rep.abs_error_image.begin(), rep.abs_error_image.end(), 0.0) / static_cast<double>(d);
  }
  return rep;
}

StatsReport posterior_stats(const PosteriorSamples& ps, std::optional<std::span<const double>> truth) {
  if (ps.height == 0 || ps.width == 0) return posterior_stats(ps.samples, 1, ps.samples.cols, truth);
  return posterior_stats(ps.samples, ps.height, ps.width, truth);
}

double psnr(std::span<const double> estimate, std::span<const double> truth) {
  if (estimate.size() != truth.size() || truth.empty()) {
    throw DimensionError("psnr: sizes " + std::to_string(estimate.size()) + " and " + std::to_string(truth.size()));
  }
  auto [lo, hi] = std::minmax_element(truth.begin(), truth.end());
  double range = *hi - *lo;
  if (range <= 0.0) range = 1.0;
  double mse = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) mse += (estimate[i] - truth[i]) * (estimate[i] - truth[i]);
  mse /= static_cast<double>(truth.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / mse);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kRestarts = 10;
constexpr std::size_t kMaxLloyd = 300;

struct KMeansRun {
  std::vector<std::size_t> labels;
  std::vector<double> trace;
  double objective = std::numeric_limits<double>::infinity();
};

KMeansRun kmeans_once(const Matrix& x, std::size_t k, std::uint64_t seed) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // k-means++ seeding
  Matrix centers(k, d);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy(x.row(first).begin(), x.row(first).end(), centers.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sqdist(x, i, centers, c - 1));
      total += nearest[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = unif(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += nearest[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), centers.row(c).begin());
  }

  KMeansRun run;
  run.labels.assign(n, k);  // k means unassigned
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < kMaxLloyd; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = run.labels[i];
      double best_d = best < k ? sqdist(x, i, centers, best) : std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double dc = sqdist(x, i, centers, c);
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      if (best != run.labels[i]) {
        run.labels[i] = best;
        changed = true;
      }
    }
    // Empty clusters keep their previous center.
    Matrix sums(k, d);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      kernels::axpy(1.0, x.row(i), sums.row(run.labels[i]));
      ++counts[run.labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto dst = centers.row(c);
      auto src = sums.row(c);
      for (std::size_t p = 0; p < d; ++p) dst[p] = src[p] / static_cast<double>(counts[c]);
    }
    double wss = 0.0;
    for (std::size_t i = 0; i < n; ++i) wss += sqdist(x, i, centers, run.labels[i]);
    run.trace.push_back(wss);
    if (!changed) break;
  }
  run.objective = run.trace.back();
  return run;
}

Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& labels, std::size_t c) {
  std::size_t count = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
  Matrix out(count, x.cols);
  std::size_t r = 0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (labels[i] != c) continue;
    std::copy(x.row(i).begin(), x.row(i).end(), out.row(r++).begin());
  }
  return out;
}

}  // namespace

ModeClusters mode_cluster(const Matrix& samples, std::size_t height, std::size_t width, std::size_t k_modes,
                          std::uint64_t seed, std::optional<std::span<const double>> truth) {
  if (k_modes == 0) throw ConfigError("mode_cluster: k_modes must be at least 1");
  if (samples.rows < k_modes) {
    throw ConfigError("mode_cluster: " + std::to_string(samples.rows) + " samples for " +
                      std::to_string(k_modes) + " modes");
  }
  if (height * width != samples.cols) throw DimensionError("mode_cluster: image shape does not match columns");

  std::vector<KMeansRun> runs(kRestarts);
  parallel_for(kRestarts, [&](std::size_t r) { runs[r] = kmeans_once(samples, k_modes, mix_seed(seed, r)); });
  std::size_t best = 0;
  for (std::size_t r = 1; r < kRestarts; ++r) {
    if (runs[r].objective < runs[best].objective) best = r;
  }
  const KMeansRun& run = runs[best];

  std::vector<StatsReport> stats;
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> order;
  for (std::size_t c = 0; c < k_modes; ++c) {
    Matrix rows = select_rows(samples, run.labels, c);
    if (rows.rows == 0) continue;  // an empty cluster is dropped
    order.push_back(c);
    sizes.push_back(rows.rows);
    stats.push_back(posterior_stats(rows, height, width, truth));
  }

  std::vector<std::size_t> rank(order.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    if (truth) return *stats[a].mean_abs_error < *stats[b].mean_abs_error;
    return sizes[a] > sizes[b];
  });

  ModeClusters out;
  out.objective_trace = run.trace;
  std::vector<std::size_t> relabel(k_modes, 0);
  for (std::size_t pos = 0; pos < rank.size(); ++pos) {
    relabel[order[rank[pos]]] = pos;
    out.sizes.push_back(sizes[rank[pos]]);
    out.modes.push_back(std::move(stats[rank[pos]]));
  }
  out.labels.resize(samples.rows);
  for (std::size_t i = 0; i < samples.rows; ++i) out.labels[i] = relabel[run.labels[i]];
  return out;
}

ModeClusters mode_cluster(const PosteriorSamples& ps, std::size_t k_modes, std::uint64_t seed,
                          std::optional<std::span<const double>> truth) {
  if (ps.height == 0 || ps.width == 0) return mode_cluster(ps.samples, 1, ps.samples.cols, k_modes, seed, truth);
  return mode_cluster(ps.samples, ps.height, ps.width, k_modes, seed, truth);
}

// ---------------------------------------------------------------------------

TestFunction parse_test_function(std::string_view name) {
  if (name == "additive") return TestFunction::additive;
  if (name == "constant") return TestFunction::constant;
  if (name == "interaction") return TestFunction::interaction;
  throw ConfigError("unknown test function '" + std::string(name) + "' (additive, constant, interaction)");
}

std::string_view test_function_name(TestFunction g) {
  switch (g) {
    case TestFunction::additive: return "additive";
    case TestFunction::constant: return "constant";
    case TestFunction::interaction: return "interaction";
  }
  return "?";
}

double evaluate_test_function(TestFunction g, std::span<const double> u) {
  constexpr double kTwoPi = 6.283185307179586;
  switch (g) {
    case TestFunction::additive: return std::accumulate(u.begin(), u.end(), 0.0);
    case TestFunction::constant: return 1.0;
    case TestFunction::interaction:
      if (u.size() < 2) throw DimensionError("interaction test function needs d >= 2");
      return std::sin(kTwoPi * u[0]) * std::sin(kTwoPi * u[1]);
  }
  return 0.0;
}

namespace {

double replicate_variance(const SamplerConfig& cfg, TestFunction g, std::size_t n, std::size_t d,
                          std::size_t replicates, std::uint64_t seed) {
  std::vector<double> means(replicates);
  parallel_for(replicates, [&](std::size_t r) {
    UnitDesign design = make_design(cfg, n, d, design_stream(cfg, seed, r));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += evaluate_test_function(g, design.points.row(i));
    means[r] = s / static_cast<double>(n);
  });
  double mu = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(replicates);
  double ss = 0.0;
  for (double m : means) ss += (m - mu) * (m - mu);
  return ss / static_cast<double>(replicates - 1);
}

}  // namespace

std::vector<VarianceRow> mc_variance_study(const std::vector<SamplerConfig>& schemes, TestFunction g,
                                           std::size_t n, std::size_t d, std::size_t replicates,
                                           std::uint64_t seed) {
  if (replicates < 30) {
    throw ConfigError("replicates must be at least 30, got " + std::to_string(replicates));
  }
  if (n == 0 || d == 0) throw ConfigError("design study needs n >= 1 and d >= 1");

  const double srs_var = replicate_variance(SamplerConfig{}, g, n, d, replicates, seed);
  std::vector<VarianceRow> rows;
  for (const auto& cfg : schemes) {
    VarianceRow row;
    row.scheme = cfg.scheme;
    row.variance = cfg.scheme == Scheme::srs && !cfg.grouping ? srs_var
                                                              : replicate_variance(cfg, g, n, d, replicates, seed);
    if (srs_var > 0.0) {
      row.ratio_to_srs = row.variance / srs_var;
    } else {
      row.ratio_to_srs = row.variance > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace flowrecon
