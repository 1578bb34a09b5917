#pragma once

// Brute-force reference for precision/recall/density/coverage: full distance
// tables, sorted neighbour lists, Euclidean distances with sqrt.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "flowrecon/metrics.hpp"

namespace oracle {

inline double euclid(const flowrecon::Matrix& a, std::size_t i, const flowrecon::Matrix& b, std::size_t j) {
  long double s = 0.0L;
  for (std::size_t p = 0; p < a.cols; ++p) {
    long double e = static_cast<long double>(a(i, p)) - static_cast<long double>(b(j, p));
    s += e * e;
  }
  return static_cast<double>(std::sqrt(s));
}

inline std::vector<double> kth_neighbour(const flowrecon::Matrix& x, std::size_t k) {
  std::vector<double> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < x.rows; ++j) {
      if (j != i) d.push_back(euclid(x, i, x, j));
    }
    std::sort(d.begin(), d.end());
    out[i] = d[k - 1];
  }
  return out;
}

inline flowrecon::PrdcReport prdc_brute_force(const flowrecon::Matrix& real, const flowrecon::Matrix& fake,
                                              std::size_t k) {
  const std::size_t m = real.rows, n = fake.rows;
  auto r = kth_neighbour(real, k);
  auto f = kth_neighbour(fake, k);
  std::vector<std::vector<double>> dist(n, std::vector<double>(m));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) dist[j][i] = euclid(fake, j, real, i);

  double precision = 0, recall = 0, density = 0, coverage = 0;
  for (std::size_t j = 0; j < n; ++j) {
    bool in = false;
    for (std::size_t i = 0; i < m; ++i) {
      if (dist[j][i] < r[i]) {
        in = true;
        density += 1;
      }
    }
    precision += in ? 1 : 0;
  }
  for (std::size_t i = 0; i < m; ++i) {
    bool rec = false;
    double nearest = 1e300;
    for (std::size_t j = 0; j < n; ++j) {
      if (dist[j][i] < f[j]) rec = true;
      nearest = std::min(nearest, dist[j][i]);
    }
    recall += rec ? 1 : 0;
    coverage += nearest < r[i] ? 1 : 0;
  }
  flowrecon::PrdcReport rep;
  rep.k = k;
  rep.precision = precision / n;
  rep.recall = recall / m;
  rep.density = density / static_cast<double>(k * n);
  rep.coverage = coverage / m;
  return rep;
}

}  // namespace oracle
