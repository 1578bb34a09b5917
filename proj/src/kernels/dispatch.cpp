#include <atomic>
#include <cstdlib>
#include <string>

#include "flowrecon/error.hpp"
#include "flowrecon/kernels.hpp"

namespace flowrecon::kernels {

namespace {

struct Table {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  double (*squared_distance)(const double*, const double*, std::size_t);
};

constexpr Table kScalar{&scalar::dot, &scalar::axpy, &scalar::squared_distance};
#ifdef FLOWRECON_HAVE_AVX2_KERNELS
constexpr Table kAvx2{&avx2::dot, &avx2::axpy, &avx2::squared_distance};
#endif

Backend detect() {
  if (const char* env = std::getenv("FLOWRECON_SIMD")) {
    std::string v(env);
    if (v == "scalar") return Backend::scalar;
    if (v == "avx2" && avx2_available()) return Backend::avx2;
  }
  return avx2_available() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{detect()};
  return b;
}

const Table& table() {
#ifdef FLOWRECON_HAVE_AVX2_KERNELS
  if (current().load(std::memory_order_relaxed) == Backend::avx2) return kAvx2;
#endif
  return kScalar;
}

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DimensionError("kernel operands differ in length: " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

}  // namespace

bool avx2_available() {
#ifdef FLOWRECON_HAVE_AVX2_KERNELS
  static const bool ok = [] {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  }();
  return ok;
#else
  return false;
#endif
}

Backend active_backend() { return current().load(); }

std::string_view backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

void set_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_available()) {
    throw ConfigError("avx2 kernels requested but the CPU does not support AVX2+FMA");
  }
  current().store(b);
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_sizes(a.size(), b.size());
  return table().dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_sizes(x.size(), y.size());
  table().axpy(alpha, x.data(), y.data(), x.size());
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  check_sizes(a.size(), b.size());
  return table().squared_distance(a.data(), b.data(), a.size());
}

}  // namespace flowrecon::kernels
