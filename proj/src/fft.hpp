#pragma once

#include <complex>
#include <vector>

namespace selcal::detail {

// Thin RAII wrapper over FFTW plans for one transform size. Plan creation is
// serialized; execution is reentrant on distinct buffers.
class RealFft {
 public:
  explicit RealFft(int n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  // in: n reals -> out: n/2+1 complex bins (unnormalized).
  void forward(const double* in, std::complex<double>* out) const;
  // in: n/2+1 bins -> out: n reals, scaled by 1/n so inverse(forward(x)) == x.
  void inverse(const std::complex<double>* in, double* out) const;

 private:
  int n_;
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

class ComplexFft {
 public:
  explicit ComplexFft(int n);
  ~ComplexFft();
  ComplexFft(const ComplexFft&) = delete;
  ComplexFft& operator=(const ComplexFft&) = delete;

  void forward(std::complex<double>* data) const;
  // Scaled by 1/n.
  void inverse(std::complex<double>* data) const;

 private:
  int n_;
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

std::vector<double> hann_window(int n);  // periodic

}  // namespace selcal::detail
