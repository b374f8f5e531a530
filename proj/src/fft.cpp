#include "fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <numbers>

namespace selcal::detail {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
constexpr unsigned kFlags = FFTW_ESTIMATE | FFTW_UNALIGNED;
}  // namespace

RealFft::RealFft(int n) : n_(n) {
  std::vector<double> r(n);
  std::vector<std::complex<double>> c(n / 2 + 1);
  auto* cc = reinterpret_cast<fftw_complex*>(c.data());
  std::lock_guard lock(planner_mutex());
  forward_plan_ = fftw_plan_dft_r2c_1d(n, r.data(), cc, kFlags);
  inverse_plan_ = fftw_plan_dft_c2r_1d(n, cc, r.data(), kFlags | FFTW_DESTROY_INPUT);
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

void RealFft::forward(const double* in, std::complex<double>* out) const {
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), const_cast<double*>(in),
                       reinterpret_cast<fftw_complex*>(out));
}

void RealFft::inverse(const std::complex<double>* in, double* out) const {
  // c2r destroys its input
  std::vector<std::complex<double>> tmp(in, in + bins());
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(tmp.data()), out);
  const double scale = 1.0 / n_;
  for (int i = 0; i < n_; ++i) out[i] *= scale;
}

ComplexFft::ComplexFft(int n) : n_(n) {
  std::vector<std::complex<double>> c(n);
  auto* cc = reinterpret_cast<fftw_complex*>(c.data());
  std::lock_guard lock(planner_mutex());
  forward_plan_ = fftw_plan_dft_1d(n, cc, cc, FFTW_FORWARD, kFlags);
  inverse_plan_ = fftw_plan_dft_1d(n, cc, cc, FFTW_BACKWARD, kFlags);
}

ComplexFft::~ComplexFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

void ComplexFft::forward(std::complex<double>* data) const {
  auto* d = reinterpret_cast<fftw_complex*>(data);
  fftw_execute_dft(static_cast<fftw_plan>(forward_plan_), d, d);
}

void ComplexFft::inverse(std::complex<double>* data) const {
  auto* d = reinterpret_cast<fftw_complex*>(data);
  fftw_execute_dft(static_cast<fftw_plan>(inverse_plan_), d, d);
  const double scale = 1.0 / n_;
  for (int i = 0; i < n_; ++i) data[i] *= scale;
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

}  // namespace selcal::detail
