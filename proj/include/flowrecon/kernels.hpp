#pragma once

// Data-parallel inner loops shared by the MLP, the forward operators and the
// nearest-neighbour metrics. Every kernel has a portable scalar reference and,
// on x86-64, an AVX2/FMA variant. The active variant is chosen once at
// startup from the CPU feature bits and can be forced with the environment
// variable FLOWRECON_SIMD=scalar|avx2.

#include <cstddef>
#include <span>
#include <string_view>

namespace flowrecon::kernels {

enum class Backend { scalar, avx2 };

bool avx2_available();
Backend active_backend();
std::string_view backend_name(Backend b);

// Overrides the runtime selection. Requesting avx2 on a machine without it
// throws ConfigError.
void set_backend(Backend b);

double dot(std::span<const double> a, std::span<const double> b);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double squared_distance(std::span<const double> a, std::span<const double> b);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
double squared_distance(const double* a, const double* b, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define FLOWRECON_HAVE_AVX2_KERNELS 1
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
double squared_distance(const double* a, const double* b, std::size_t n);
}  // namespace avx2
#endif

}  // namespace flowrecon::kernels
