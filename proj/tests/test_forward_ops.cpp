#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "flowrecon/error.hpp"
#include "flowrecon/forward_ops.hpp"

using namespace flowrecon;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// O(N^2) unitary DFT coefficient at centered position (r, c).
cdouble naive_dft(const Image& img, std::size_t r, std::size_t c) {
  const double h = static_cast<double>(img.rows), w = static_cast<double>(img.cols);
  const double kr = static_cast<double>(r) - static_cast<double>(img.rows / 2);
  const double kc = static_cast<double>(c) - static_cast<double>(img.cols / 2);
  cdouble s = 0.0;
  for (std::size_t y = 0; y < img.rows; ++y) {
    for (std::size_t x = 0; x < img.cols; ++x) {
      double th = -2.0 * std::numbers::pi * (kr * static_cast<double>(y) / h + kc * static_cast<double>(x) / w);
      s += img(y, x) * cdouble(std::cos(th), std::sin(th));
    }
  }
  return s / std::sqrt(h * w);
}

cdouble direct_visibility(const Image& img, double u, double v) {
  cdouble s = 0.0;
  for (std::size_t py = 0; py < img.rows; ++py) {
    for (std::size_t px = 0; px < img.cols; ++px) {
      double th = -2.0 * std::numbers::pi *
                  (u * static_cast<double>(px) / static_cast<double>(img.cols) +
                   v * static_cast<double>(py) / static_cast<double>(img.rows));
      s += img(py, px) * std::exp(cdouble(0.0, th));
    }
  }
  return s;
}

std::size_t components_above(const Image& img, double level) {
  std::vector<int> label(img.data.size(), 0);
  std::size_t count = 0;
  for (std::size_t s = 0; s < img.data.size(); ++s) {
    if (label[s] || img.data[s] <= level) continue;
    ++count;
    std::vector<std::size_t> stack{s};
    label[s] = 1;
    while (!stack.empty()) {
      std::size_t p = stack.back();
      stack.pop_back();
      std::size_t r = p / img.cols, c = p % img.cols;
      const long dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        long rr = static_cast<long>(r) + dr[k], cc = static_cast<long>(c) + dc[k];
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(img.rows) || cc >= static_cast<long>(img.cols)) continue;
        std::size_t q = static_cast<std::size_t>(rr) * img.cols + static_cast<std::size_t>(cc);
        if (!label[q] && img.data[q] > level) {
          label[q] = 1;
          stack.push_back(q);
        }
      }
    }
  }
  return count;
}

}  // namespace

TEST_CASE("image density normalization and uniform image") {
  Image white(6, 5, 1.0);
  ImageDensity d(white);
  double total = 0.0;
  for (double m : d.cell_masses()) {
    CHECK(m == doctest::Approx(1.0 / 30.0).epsilon(1e-14));
    total += m;
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(d.log_density(0.3, 0.7) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(ImageDensity(Image(4, 4, 0.0)), ConfigError);
  CHECK_THROWS_AS(ImageDensity{Image{}}, ConfigError);
}

TEST_CASE("single bright pixel captures grid draws") {
  Image img(16, 16, 0.0);
  img(5, 9) = 1.0;
  ImageDensity d(img);
  auto s = d.sample_grid(10000, 3);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    if (s(i, 0) >= 9.0 / 16 && s(i, 0) < 10.0 / 16 && s(i, 1) >= 5.0 / 16 && s(i, 1) < 6.0 / 16) ++inside;
  }
  CHECK(inside >= 9900);
  CHECK(d.log_density(0.05, 0.9) == d.floor_log());
}

TEST_CASE("image density gradient and the outside wall") {
  auto img = random_image(7, 9, 11);
  ImageDensity d(img);
  const double h = 1e-6;
  for (auto [x, y] : {std::pair{0.31, 0.42}, {0.77, 0.18}, {0.53, 0.9}}) {
    double gx, gy;
    d.log_density(x, y, &gx, &gy);
    double fx = (d.log_density(x + h, y) - d.log_density(x - h, y)) / (2 * h);
    double fy = (d.log_density(x, y + h) - d.log_density(x, y - h)) / (2 * h);
    CHECK(gx == doctest::Approx(fx).epsilon(1e-5));
    CHECK(gy == doctest::Approx(fy).epsilon(1e-5));
  }
  double gx, gy;
  CHECK(d.log_density(1.2, 0.5, &gx, &gy) < d.log_density(1.0, 0.5));
  CHECK(gx < 0.0);
  d.log_density(-0.2, -0.1, &gx, &gy);
  CHECK(gx > 0.0);
  CHECK(gy > 0.0);
}

TEST_CASE("cartesian mask arithmetic") {
  auto m = make_cartesian_mask(128, 128, 4.0, 0.08, 7);
  CHECK(m.kept_rows.size() == 32);
  for (std::size_t r = 64 - 5; r < 64 + 5; ++r) CHECK(m.keeps(r));
  CHECK(std::is_sorted(m.kept_rows.begin(), m.kept_rows.end()));
  CHECK(make_cartesian_mask(128, 128, 4.0, 0.08, 7).kept_rows == m.kept_rows);
  CHECK(make_cartesian_mask(128, 128, 4.0, 0.08, 8).kept_rows != m.kept_rows);
  CHECK(make_cartesian_mask(20, 4, 1.0, 0.5, 1).kept_rows.size() == 20);
  for (std::size_t h : {16u, 32u, 33u, 100u}) {
    for (double r : {1.0, 2.0, 4.0, 6.0, 8.0}) {
      auto mm = make_cartesian_mask(h, 8, r, 0.04, 2);
      CHECK(mm.kept_rows.size() == static_cast<std::size_t>(std::llround(h / r)));
    }
  }
  CHECK_THROWS_AS(make_cartesian_mask(32, 32, 0.5, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(make_cartesian_mask(32, 32, 4.0, 0.5, 1), ConfigError);
}

TEST_CASE("masked fft conventions") {
  const std::size_t h = 8, w = 6;
  SamplingMask full = make_cartesian_mask(h, w, 1.0, 0.0, 0);
  Image c(h, w, 0.7);
  auto k = masked_fft_forward(c, full, 0.0, std::nullopt);
  CHECK(std::abs(k[dc_row(h) * w + w / 2] - cdouble(0.7 * std::sqrt(48.0), 0.0)) < 1e-12);

  auto img = random_image(h, w, 4);
  auto op = ForwardOperator::masked_fft(full);
  std::vector<double> y(op.output_size()), back(op.input_size());
  op.apply(img.data, y);
  op.adjoint(y, back);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - img.data[i]) < 1e-10);

  auto half = make_cartesian_mask(h, w, 2.0, 0.25, 5);
  auto meas = masked_fft_forward(img, half, 0.0, std::nullopt);
  REQUIRE(meas.size() == half.kept_rows.size() * w);
  for (std::size_t i = 0; i < half.kept_rows.size(); ++i) {
    for (std::size_t col = 0; col < w; ++col) {
      CHECK(std::abs(meas[i * w + col] - naive_dft(img, half.kept_rows[i], col)) < 1e-8);
    }
  }
  CHECK_THROWS_AS(masked_fft_forward(Image(4, 4), half, 0.0, std::nullopt), DimensionError);
}

TEST_CASE("visibility conventions") {
  auto img = random_image(8, 8, 9);
  UvTable dc{{{0.0, 0.0, 0.0}}};
  double flux = 0.0;
  for (double v : img.data) flux += v;
  CHECK(std::abs(visibility_forward(img, dc, std::nullopt)[0] - cdouble(flux, 0.0)) < 1e-12);

  Image point(8, 8, 0.0);
  point(0, 0) = 2.5;
  auto uv = random_uv_table(20, 4.0, 0.1, 3);
  for (auto v : visibility_forward(point, uv, std::nullopt)) CHECK(std::abs(std::abs(v) - 2.5) < 1e-12);

  auto vis = visibility_forward(img, uv, std::nullopt);
  for (std::size_t i = 0; i < uv.points.size(); ++i) {
    CHECK(std::abs(vis[i] - direct_visibility(img, uv.points[i].u, uv.points[i].v)) < 1e-10);
  }
  UvTable dup{{{1.0, 2.0, 0.1}, {1.0, 2.0, 0.1}}};
  CHECK_THROWS_AS(dup.validate(), ConfigError);
  std::set<std::pair<double, double>> seen;
  for (auto& p : uv.points) {
    CHECK(!(p.u == 0.0 && p.v == 0.0));
    CHECK(seen.count({-p.u, -p.v}) == 0);
    seen.insert({p.u, p.v});
  }
}

TEST_CASE("fourier operators are linear and adjoint is the transpose") {
  auto mask = make_cartesian_mask(12, 10, 3.0, 0.1, 2);
  auto uv = random_uv_table(15, 5.0, 0.1, 8);
  for (const auto& op : {ForwardOperator::masked_fft(mask), ForwardOperator::sparse_visibility(12, 10, uv)}) {
    auto x1 = random_image(12, 10, 1), x2 = random_image(12, 10, 2);
    const double a = 0.7, b = -1.3;
    std::vector<double> mix(x1.data.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x1.data[i] + b * x2.data[i];
    std::vector<double> y1(op.output_size()), y2(op.output_size()), ym(op.output_size());
    op.apply(x1.data, y1);
    op.apply(x2.data, y2);
    op.apply(mix, ym);
    for (std::size_t i = 0; i < ym.size(); ++i) CHECK(std::abs(ym[i] - (a * y1[i] + b * y2[i])) < 1e-10);

    // <F x, r> == <x, F^T r>
    std::vector<double> r(op.output_size()), at(op.input_size());
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    for (auto& v : r) v = nd(rng);
    op.adjoint(r, at);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < r.size(); ++i) lhs += y1[i] * r[i];
    for (std::size_t i = 0; i < at.size(); ++i) rhs += x1.data[i] * at[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("fidelity gradients match finite differences") {
  auto uv = random_uv_table(10, 3.0, 0.2, 4);
  auto mask = make_cartesian_mask(6, 6, 2.0, 0.2, 1);
  std::vector<ForwardOperator> ops{ForwardOperator::masked_fft(mask), ForwardOperator::sparse_visibility(6, 6, uv),
                                   ForwardOperator::sparse_visibility(6, 6, uv, true)};
  for (const auto& op : ops) {
    auto truth = random_image(6, 6, 10);
    auto y = op.measure(truth, op.output_sigma().empty() ? 0.05 : 0.0, 12);
    auto x = random_image(6, 6, 13);
    const double sigma = op.output_sigma().empty() ? 0.05 : 0.0;
    std::vector<double> g(x.data.size(), 0.0);
    op.fidelity(x.data, y, sigma, g);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.data.size(); i += 5) {
      auto xp = x.data, xm = x.data;
      xp[i] += h;
      xm[i] -= h;
      double fd = (op.fidelity(xp, y, sigma, {}) - op.fidelity(xm, y, sigma, {})) / (2 * h);
      CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  auto energy = ForwardOperator::image_energy(random_image(5, 5, 3));
  std::vector<double> pt{0.4, 0.6}, g(2, 0.0);
  double e = energy.fidelity(pt, {}, 0.0, g);
  CHECK(e == doctest::Approx(-energy.density()->log_density(0.4, 0.6)));
  CHECK_THROWS_AS(energy.apply(pt, g), InvariantError);
}

TEST_CASE("noise statistics") {
  auto mask = make_cartesian_mask(8, 8, 2.0, 0.25, 0);
  auto op = ForwardOperator::masked_fft(mask);
  auto img = random_image(8, 8, 1);
  std::vector<double> clean(op.output_size());
  op.apply(img.data, clean);
  const double sigma = 0.3;
  const int reps = 10000;
  std::vector<double> sum(clean.size(), 0.0), sum2(clean.size(), 0.0);
  for (int r = 0; r < reps; ++r) {
    auto y = op.measure(img, sigma, static_cast<std::uint64_t>(r));
    for (std::size_t i = 0; i < y.size(); ++i) {
      double e = y[i] - clean[i];
      sum[i] += e;
      sum2[i] += e * e;
    }
  }
  for (std::size_t i = 0; i < clean.size(); i += 7) {
    double m = sum[i] / reps;
    double sd = std::sqrt(sum2[i] / reps - m * m);
    CHECK(std::abs(sd - sigma) < 0.05 * sigma);
  }
}

TEST_CASE("phantoms") {
  auto ring = make_phantom(PhantomKind::ring, 32, 0.0);
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) CHECK(ring(r, c) == ring(31 - r, 31 - c));
  }
  auto lopsided = make_phantom(PhantomKind::ring, 32, 0.5);
  bool differs = false;
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) differs |= lopsided(r, c) != lopsided(31 - r, 31 - c);
  }
  CHECK(differs);
  auto blobs = make_phantom(PhantomKind::two_blob, 32);
  double peak = *std::max_element(blobs.data.begin(), blobs.data.end());
  CHECK(components_above(blobs, 0.5 * peak) == 2);
  for (auto kind : {PhantomKind::shepp_logan_like, PhantomKind::ring, PhantomKind::two_blob}) {
    for (std::size_t n : {8u, 17u, 64u}) {
      auto img = make_phantom(kind, n, 0.3);
      for (double v : img.data) CHECK((v >= 0.0 && v <= 1.0));
      CHECK(make_phantom(kind, n, 0.3) == img);
    }
  }
  CHECK_THROWS_AS(make_phantom(PhantomKind::ring, 7), ConfigError);
  CHECK(parse_phantom("two_blob") == PhantomKind::two_blob);
  CHECK_THROWS_AS(parse_phantom("cat"), ConfigError);
}

TEST_CASE("file formats round trip") {
  auto mask = make_cartesian_mask(32, 16, 4.0, 0.1, 3);
  auto m2 = mask_from_csv(mask_to_csv(mask));
  CHECK(m2.kept_rows == mask.kept_rows);
  CHECK(m2.height == 32);
  CHECK(m2.width == 16);
  CHECK(m2.accel == 4.0);
  CHECK(m2.center_fraction == 0.1);
  CHECK_THROWS_AS(mask_from_csv("row\n1\n"), FormatError);

  auto uv = random_uv_table(7, 3.0, 0.25, 2);
  auto uv2 = uv_from_csv(uv_to_csv(uv));
  REQUIRE(uv2.points.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(uv2.points[i].u == uv.points[i].u);
    CHECK(uv2.points[i].v == uv.points[i].v);
  }

  auto img = random_image(5, 7, 8);
  for (int bits : {8, 16}) {
    auto back = decode_pgm(encode_pgm(img, bits, 0.0, 1.0));
    REQUIRE(back.rows == 5);
    REQUIRE(back.cols == 7);
    const double q = bits == 8 ? 255.0 : 65535.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5 / q + 1e-12);
  }
  CHECK_THROWS_AS(encode_pgm(img, 12, 0, 1), ConfigError);
  CHECK_THROWS_AS(decode_pgm("P2\n1 1\n255\n0"), FormatError);

  std::vector<double> vals{0.0, -1.5, 3.25, 1e-3};
  auto f = decode_f32(encode_f32(vals));
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(f[i] == static_cast<double>(static_cast<float>(vals[i])));
  CHECK(encode_f32(std::vector<double>{1.0}) == std::string("\x00\x00\x80\x3f", 4));

  auto path = (std::filesystem::temp_directory_path() / "flowrecon_atomic_test.bin").string();
  write_file_atomic(path, "hello");
  CHECK(read_file(path) == "hello");
  CHECK(!std::filesystem::exists(path + ".tmp"));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_file(path), ConfigError);
}
