#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <utility>
#include <vector>

namespace spinfb::detail {

// Thin RAII layer over FFTW's real transforms. Plans are created once per
// length (FFTW's planner is not thread-safe, execution with new-array calls is)
// and cached for the process lifetime.
class RealFft {
 public:
  // Unnormalized forward transform of `in` (length n) into n/2+1 bins.
  static std::vector<std::complex<double>> forward(std::span<const double> in) {
    const std::size_t n = in.size();
    Buffer<double> rin(n);
    Buffer<fftw_complex> cout(n / 2 + 1);
    std::copy(in.begin(), in.end(), rin.get());
    fftw_execute_dft_r2c(plan(n, true), rin.get(), cout.get());
    std::vector<std::complex<double>> out(n / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = {cout.get()[k][0], cout.get()[k][1]};
    return out;
  }

  // Unnormalized backward transform: x_j = sum_k X_k e^{+2 pi i k j / n},
  // with the Hermitian half spectrum given in `spectrum` (n/2+1 bins).
  static std::vector<double> backward(std::span<const std::complex<double>> spectrum, std::size_t n) {
    Buffer<fftw_complex> cin(n / 2 + 1);
    Buffer<double> rout(n);
    for (std::size_t k = 0; k < n / 2 + 1; ++k) {
      cin.get()[k][0] = spectrum[k].real();
      cin.get()[k][1] = spectrum[k].imag();
    }
    fftw_execute_dft_c2r(plan(n, false), cin.get(), rout.get());
    return {rout.get(), rout.get() + n};
  }

 private:
  template <class T>
  class Buffer {
   public:
    explicit Buffer(std::size_t n) : p_(static_cast<T*>(fftw_malloc(sizeof(T) * (n ? n : 1)))) {
      if (!p_) throw std::bad_alloc();
    }
    T* get() const { return p_.get(); }

   private:
    struct Free {
      void operator()(T* p) const { fftw_free(p); }
    };
    std::unique_ptr<T, Free> p_;
  };

  static fftw_plan plan(std::size_t n, bool forward) {
    static std::mutex mu;
    static std::map<std::pair<std::size_t, bool>, fftw_plan> cache;
    std::lock_guard lock(mu);
    auto [it, fresh] = cache.try_emplace({n, forward}, nullptr);
    if (fresh) {
      Buffer<double> r(n);
      Buffer<fftw_complex> c(n / 2 + 1);
      const int len = static_cast<int>(n);
      it->second = forward ? fftw_plan_dft_r2c_1d(len, r.get(), c.get(), FFTW_ESTIMATE)
                           : fftw_plan_dft_c2r_1d(len, c.get(), r.get(), FFTW_ESTIMATE | FFTW_DESTROY_INPUT);
    }
    return it->second;
  }
};

}  // namespace spinfb::detail
