#pragma once

// Square 2-D real FFTs backed by FFTW. Plans are created once per size under a
// lock; execution goes through FFTW's new-array interface on freshly aligned
// buffers, so concurrent calls are safe and results do not depend on the
// caller's pointer alignment.

#include <complex>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <span>

#include <fftw3.h>

#include "lensforge/error.hpp"

namespace lensforge::fft {

using Complex = std::complex<double>;

namespace detail {

struct FftwFree {
  void operator()(void *p) const noexcept { fftw_free(p); }
};
template <class T> using Aligned = std::unique_ptr<T[], FftwFree>;

template <class T> Aligned<T> aligned(std::size_t count) {
  auto *p = static_cast<T *>(fftw_malloc(sizeof(T) * count));
  if (!p) throw NumericError("fftw_malloc failed");
  return Aligned<T>(p);
}

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

inline std::mutex &planner_mutex() {
  static std::mutex m;
  return m;
}

inline const PlanPair &plans_for(std::size_t m) {
  static std::map<std::size_t, PlanPair> cache;
  std::lock_guard lock(planner_mutex());
  auto it = cache.find(m);
  if (it != cache.end()) return it->second;
  const int mi = static_cast<int>(m);
  auto real = aligned<double>(m * m);
  auto spec = aligned<fftw_complex>(m * (m / 2 + 1));
  PlanPair p;
  p.forward = fftw_plan_dft_r2c_2d(mi, mi, real.get(), spec.get(), FFTW_ESTIMATE);
  p.backward = fftw_plan_dft_c2r_2d(mi, mi, spec.get(), real.get(), FFTW_ESTIMATE);
  if (!p.forward || !p.backward) throw NumericError("FFTW planning failed");
  return cache.emplace(m, p).first->second;
}

} // namespace detail

/// Number of complex coefficients kept by the half-spectrum of an m x m real array.
inline constexpr std::size_t half_spectrum_size(std::size_t m) { return m * (m / 2 + 1); }

/// Unnormalized forward transform of an m x m row-major real array.
inline void forward(std::size_t m, std::span<const double> in, std::span<Complex> out) {
  if (in.size() != m * m || out.size() != half_spectrum_size(m))
    throw InvalidArgument("fft::forward size mismatch");
  const auto &plan = detail::plans_for(m);
  auto real = detail::aligned<double>(m * m);
  auto spec = detail::aligned<fftw_complex>(half_spectrum_size(m));
  std::memcpy(real.get(), in.data(), sizeof(double) * m * m);
  fftw_execute_dft_r2c(plan.forward, real.get(), spec.get());
  std::memcpy(static_cast<void *>(out.data()), spec.get(), sizeof(fftw_complex) * out.size());
}

/// Unnormalized inverse transform; divide by m*m to invert `forward`.
inline void backward(std::size_t m, std::span<const Complex> in, std::span<double> out) {
  if (out.size() != m * m || in.size() != half_spectrum_size(m))
    throw InvalidArgument("fft::backward size mismatch");
  const auto &plan = detail::plans_for(m);
  auto real = detail::aligned<double>(m * m);
  auto spec = detail::aligned<fftw_complex>(half_spectrum_size(m));
  std::memcpy(spec.get(), in.data(), sizeof(fftw_complex) * in.size());
  fftw_execute_dft_c2r(plan.backward, spec.get(), real.get());
  std::memcpy(out.data(), real.get(), sizeof(double) * m * m);
}

/// Signed integer frequency of FFT index k on an m-point axis.
inline constexpr long frequency(std::size_t k, std::size_t m) {
  return k <= m / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(m);
}

} // namespace lensforge::fft
