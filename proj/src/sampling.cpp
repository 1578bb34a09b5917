#include "flowrecon/sampling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <boost/math/special_functions/erf.hpp>

#include "flowrecon/diffcore.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/kernels.hpp"

namespace flowrecon {

Scheme parse_scheme(std::string_view name) {
  if (name == "srs") return Scheme::srs;
  if (name == "lhs") return Scheme::lhs;
  if (name == "maximin_lhs" || name == "maximin-lhs") return Scheme::maximin_lhs;
  if (name == "pss") return Scheme::pss;
  if (name == "lpss") return Scheme::lpss;
  if (name == "sobol") return Scheme::sobol;
  throw ConfigError("unknown sampling scheme '" + std::string(name) + "'");
}

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::srs: return "srs";
    case Scheme::lhs: return "lhs";
    case Scheme::maximin_lhs: return "maximin_lhs";
    case Scheme::pss: return "pss";
    case Scheme::lpss: return "lpss";
    case Scheme::sobol: return "sobol";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Groupings

std::size_t PssGrouping::dims() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.size();
  return n;
}

void PssGrouping::validate(std::size_t d) const {
  std::vector<int> seen(d, 0);
  for (const auto& g : groups) {
    if (g.empty()) throw ConfigError("PSS grouping contains an empty group");
    for (std::size_t k : g) {
      if (k >= d) throw ConfigError("PSS grouping refers to dimension " + std::to_string(k));
      seen[k] += 1;
    }
  }
  for (std::size_t k = 0; k < d; ++k) {
    if (seen[k] != 1) {
      throw ConfigError("PSS grouping must cover dimension " + std::to_string(k) + " exactly once");
    }
  }
}

PssGrouping PssGrouping::singletons(std::size_t d) {
  PssGrouping g;
  for (std::size_t k = 0; k < d; ++k) g.groups.push_back({k});
  return g;
}

PssGrouping PssGrouping::consecutive_pairs(std::size_t d) {
  PssGrouping g;
  for (std::size_t k = 0; k < d; k += 2) {
    if (k + 1 < d) {
      g.groups.push_back({k, k + 1});
    } else {
      g.groups.push_back({k});
    }
  }
  return g;
}

PssGrouping PssGrouping::single_group(std::size_t d) {
  PssGrouping g;
  g.groups.emplace_back(d);
  std::iota(g.groups[0].begin(), g.groups[0].end(), std::size_t{0});
  return g;
}

// ---------------------------------------------------------------------------
// Designs

namespace {

void check_shape(std::size_t n, std::size_t d) {
  if (n == 0 || d == 0) throw ConfigError("design size and dimension must be at least 1");
}

std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Fisher-Yates with our own uniform draw so results do not depend on the
  // standard library's distribution implementation.
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform01(rng()) * static_cast<double>(i));
    if (j >= i) j = i - 1;
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

// Maps (index + u)/count into [0,1) guarding against rounding up to 1.
inline double stratum_point(std::size_t index, double u, std::size_t count) {
  double v = (static_cast<double>(index) + u) / static_cast<double>(count);
  return v < 1.0 ? v : std::nextafter(1.0, 0.0);
}

std::size_t integer_root(std::size_t n, std::size_t g) {
  if (g == 1) return n;
  auto m = static_cast<std::size_t>(std::llround(std::pow(static_cast<double>(n), 1.0 / g)));
  for (std::size_t cand : {m > 0 ? m - 1 : 0, m, m + 1}) {
    if (cand == 0) continue;
    std::size_t p = 1;
    for (std::size_t k = 0; k < g; ++k) p *= cand;
    if (p == n) return cand;
  }
  return 0;
}

// Group-cell stratification shared by PSS and LPSS. Returns per point the
// base-m digits of its cell for every dimension of every group.
void stratify_groups(Matrix& pts, const PssGrouping& grouping, std::mt19937_64& rng, bool latinize) {
  const std::size_t n = pts.rows;
  for (const auto& group : grouping.groups) {
    const std::size_t g = group.size();
    const std::size_t m = integer_root(n, g);
    if (m == 0) {
      throw ConfigError("design size " + std::to_string(n) + " is not a perfect " +
                        std::to_string(g) + "-th power required by a PSS group");
    }
    auto cells = random_permutation(n, rng);
    // digits[i][k]: stratum of point i along group dimension k
    std::vector<std::vector<std::size_t>> digits(n, std::vector<std::size_t>(g));
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t c = cells[i];
      for (std::size_t k = 0; k < g; ++k) {
        digits[i][k] = c % m;
        c /= m;
      }
    }
    for (std::size_t k = 0; k < g; ++k) {
      const std::size_t dim = group[k];
      if (!latinize) {
        for (std::size_t i = 0; i < n; ++i) pts(i, dim) = stratum_point(digits[i][k], uniform01(rng()), m);
        continue;
      }
      // Each of the m coarse strata holds n/m points; spread them over the
      // n/m fine strata it contains so the column becomes Latin.
      const std::size_t per = n / m;
      std::vector<std::vector<std::size_t>> members(m);
      for (std::size_t i = 0; i < n; ++i) members[digits[i][k]].push_back(i);
      for (std::size_t s = 0; s < m; ++s) {
        auto order = random_permutation(per, rng);
        for (std::size_t r = 0; r < per; ++r) {
          std::size_t fine = s * per + order[r];
          pts(members[s][r], dim) = stratum_point(fine, uniform01(rng()), n);
        }
      }
    }
  }
}

template <class Gen>
UnitDesign best_of(std::size_t n_candidates, std::uint64_t seed, Gen gen) {
  if (n_candidates == 0) throw ConfigError("n_candidates must be at least 1");
  UnitDesign best = gen(seed);
  double best_score = min_pairwise_distance(best.points);
  for (std::size_t c = 1; c < n_candidates; ++c) {
    UnitDesign cand = gen(mix_seed(seed, c));
    double score = min_pairwise_distance(cand.points);
    if (score > best_score) {
      best_score = score;
      best = std::move(cand);
    }
  }
  best.seed = seed;
  return best;
}

}  // namespace

UnitDesign srs(std::size_t n, std::size_t d, std::uint64_t seed) {
  check_shape(n, d);
  std::mt19937_64 rng(seed);
  UnitDesign out{Matrix(n, d), Scheme::srs, seed};
  for (auto& v : out.points.data) v = uniform01(rng());
  return out;
}

UnitDesign lhs(std::size_t n, std::size_t d, std::uint64_t seed) {
  check_shape(n, d);
  std::mt19937_64 rng(seed);
  UnitDesign out{Matrix(n, d), Scheme::lhs, seed};
  for (std::size_t j = 0; j < d; ++j) {
    auto perm = random_permutation(n, rng);
    for (std::size_t i = 0; i < n; ++i) out.points(i, j) = stratum_point(perm[i], uniform01(rng()), n);
  }
  return out;
}

UnitDesign maximin_lhs(std::size_t n, std::size_t d, std::uint64_t seed, std::size_t n_candidates) {
  UnitDesign out = best_of(n_candidates, seed, [&](std::uint64_t s) { return lhs(n, d, s); });
  out.scheme = Scheme::maximin_lhs;
  return out;
}

UnitDesign pss(std::size_t n, const PssGrouping& grouping, std::uint64_t seed) {
  const std::size_t d = grouping.dims();
  check_shape(n, d);
  grouping.validate(d);
  std::mt19937_64 rng(seed);
  UnitDesign out{Matrix(n, d), Scheme::pss, seed};
  stratify_groups(out.points, grouping, rng, false);
  return out;
}

UnitDesign lpss(std::size_t n, const PssGrouping& grouping, std::uint64_t seed, bool maximin,
                std::size_t n_candidates) {
  const std::size_t d = grouping.dims();
  check_shape(n, d);
  grouping.validate(d);
  auto one = [&](std::uint64_t s) {
    std::mt19937_64 rng(s);
    UnitDesign out{Matrix(n, d), Scheme::lpss, s};
    stratify_groups(out.points, grouping, rng, true);
    return out;
  };
  if (!maximin) return one(seed);
  return best_of(n_candidates, seed, one);
}

// ---------------------------------------------------------------------------
// Sobol (Joe & Kuo direction numbers, Gray-code ordering, no scrambling)

namespace {

struct SobolDim {
  unsigned s;
  unsigned a;
  std::array<unsigned, 8> m;
};

// new-joe-kuo-6.21201, dimensions 2..21
constexpr std::array<SobolDim, kSobolMaxDim - 1> kSobolTable{{
    {1, 0, {1}},
    {2, 1, {1, 3}},
    {3, 1, {1, 3, 1}},
    {3, 2, {1, 1, 1}},
    {4, 1, {1, 1, 3, 3}},
    {4, 4, {1, 3, 5, 13}},
    {5, 2, {1, 1, 5, 5, 17}},
    {5, 4, {1, 1, 5, 5, 5}},
    {5, 7, {1, 1, 7, 11, 19}},
    {5, 11, {1, 1, 5, 1, 1}},
    {5, 13, {1, 1, 1, 3, 11}},
    {5, 14, {1, 3, 5, 5, 31}},
    {6, 1, {1, 3, 3, 9, 7, 49}},
    {6, 13, {1, 1, 1, 15, 21, 21}},
    {6, 16, {1, 3, 1, 13, 27, 49}},
    {6, 19, {1, 1, 1, 15, 7, 5}},
    {6, 22, {1, 3, 1, 15, 13, 25}},
    {6, 25, {1, 1, 5, 5, 19, 61}},
    {7, 1, {1, 3, 7, 11, 23, 15, 103}},
    {7, 4, {1, 3, 7, 13, 13, 15, 69}},
}};

constexpr unsigned kSobolBits = 32;

std::vector<std::array<std::uint32_t, kSobolBits>> sobol_directions(std::size_t d) {
  std::vector<std::array<std::uint32_t, kSobolBits>> v(d);
  for (unsigned k = 0; k < kSobolBits; ++k) v[0][k] = 1u << (31 - k);
  for (std::size_t j = 1; j < d; ++j) {
    const SobolDim& sd = kSobolTable[j - 1];
    for (unsigned k = 0; k < kSobolBits; ++k) {
      if (k < sd.s) {
        v[j][k] = sd.m[k] << (31 - k);
        continue;
      }
      std::uint32_t x = v[j][k - sd.s] ^ (v[j][k - sd.s] >> sd.s);
      for (unsigned l = 1; l < sd.s; ++l) {
        if ((sd.a >> (sd.s - 1 - l)) & 1u) x ^= v[j][k - l];
      }
      v[j][k] = x;
    }
  }
  return v;
}

}  // namespace

UnitDesign sobol_skip(std::size_t n, std::size_t d, std::uint64_t skip) {
  check_shape(n, d);
  if (d > kSobolMaxDim) {
    throw ConfigError("Sobol sequence supports at most " + std::to_string(kSobolMaxDim) +
                      " dimensions, got " + std::to_string(d));
  }
  if (skip + n > (std::uint64_t{1} << kSobolBits)) throw ConfigError("Sobol index range exhausted");
  auto v = sobol_directions(d);
  UnitDesign out{Matrix(n, d), Scheme::sobol, skip};
  std::vector<std::uint32_t> x(d, 0);
  // Jump to index `skip` directly through its Gray code.
  std::uint64_t gray = skip ^ (skip >> 1);
  for (unsigned k = 0; k < kSobolBits; ++k) {
    if ((gray >> k) & 1u) {
      for (std::size_t j = 0; j < d; ++j) x[j] ^= v[j][k];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.points(i, j) = static_cast<double>(x[j]) * 0x1.0p-32;
    std::uint64_t idx = skip + i;
    unsigned c = 0;
    while ((idx >> c) & 1u) ++c;  // rightmost zero bit of the current index
    if (c < kSobolBits) {
      for (std::size_t j = 0; j < d; ++j) x[j] ^= v[j][c];
    }
  }
  return out;
}

UnitDesign sobol(std::size_t n, std::size_t d) { return sobol_skip(n, d, 0); }

// ---------------------------------------------------------------------------

double min_pairwise_distance(const Matrix& points) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.rows; ++i) {
    for (std::size_t k = i + 1; k < points.rows; ++k) {
      best = std::min(best, kernels::squared_distance(points.row(i), points.row(k)));
    }
  }
  return std::sqrt(best);
}

double normal_quantile(double u) {
  constexpr double lo = 1e-12;
  u = std::clamp(u, lo, 1.0 - lo);
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * u);
}

LatentBatch to_gaussian(const UnitDesign& design) {
  LatentBatch out{design.points, design.scheme, design.seed};
  for (auto& v : out.points.data) v = normal_quantile(v);
  return out;
}

std::uint64_t design_stream(const SamplerConfig& cfg, std::uint64_t base, std::uint64_t index) {
  if (cfg.scheme == Scheme::sobol) return base * 1000003u + index;
  return mix_seed(base, index);
}

UnitDesign make_design(const SamplerConfig& cfg, std::size_t n, std::size_t d, std::uint64_t seed) {
  switch (cfg.scheme) {
    case Scheme::srs: return srs(n, d, seed);
    case Scheme::lhs: return lhs(n, d, seed);
    case Scheme::maximin_lhs: return maximin_lhs(n, d, seed, cfg.n_candidates);
    case Scheme::pss: return pss(n, cfg.grouping.value_or(PssGrouping::consecutive_pairs(d)), seed);
    case Scheme::lpss:
      return lpss(n, cfg.grouping.value_or(PssGrouping::consecutive_pairs(d)), seed, cfg.maximin,
                  cfg.n_candidates);
    case Scheme::sobol: {
      // Block `seed` of the sequence, wrapping when the index range runs out.
      const std::uint64_t blocks = (std::uint64_t{1} << kSobolBits) / std::max<std::size_t>(n, 1);
      return sobol_skip(n, d, (seed % std::max<std::uint64_t>(blocks, 1)) * n);
    }
  }
  throw ConfigError("unhandled sampling scheme");
}

std::string design_to_csv(const UnitDesign& design) {
  std::string out;
  const auto& p = design.points;
  for (std::size_t j = 0; j < p.cols; ++j) {
    if (j) out += ',';
    out += "dim" + std::to_string(j);
  }
  out += '\n';
  char buf[40];
  for (std::size_t i = 0; i < p.rows; ++i) {
    for (std::size_t j = 0; j < p.cols; ++j) {
      if (j) out += ',';
      std::snprintf(buf, sizeof(buf), "%.17g", p(i, j));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

Matrix matrix_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  Matrix m;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      m.cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
      continue;
    }
    std::istringstream ls(line);
    std::string cell;
    std::size_t count = 0;
    while (std::getline(ls, cell, ',')) {
      m.data.push_back(std::stod(cell));
      ++count;
    }
    if (count != m.cols) throw FormatError("CSV row has " + std::to_string(count) + " fields");
    ++m.rows;
  }
  return m;
}

}  // namespace flowrecon
