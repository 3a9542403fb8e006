#pragma once

// Closed-form decoherence envelopes for free and driven evolution, decay
// fitting, and inversion of Rabi decay rates to noise densities.
//
// Density convention: SpectrumModel is one-sided (S1, f > 0). Formulas that
// are usually written with the two-sided S_L take S_L = S1 / 2, so e.g.
//   W(t) = exp(-(t^2/2)(2 pi)^2 int_{-inf}^{inf} S_L sinc^2(pi f t) df)
//        = exp(-2 pi^2 t^2 int_0^inf S1 sinc^2(pi f t) df).
// Functions that take or return a bare density value say which side it is.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "spinfb/detail/least_squares.hpp"
#include "spinfb/errors.hpp"
#include "spinfb/noise.hpp"

namespace spinfb {

namespace detail {

inline double sinc2(double x) {
  if (std::abs(x) < 1e-4) return 1.0 - x * x / 3.0;
  const double s = std::sin(x) / x;
  return s * s;
}

inline double gk(const auto& f, double a, double b) {
  if (!(b > a)) return 0.0;
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-12, &err);
}

inline double smooth_density(const SpectrumModel& m, double f) {
  double s = m.white_floor + m.rising_coefficient * f * f;
  for (const auto& p : m.power_laws) s += p.amplitude * p.amplitude * std::pow(f, -p.exponent);
  return s;
}

inline void check_integrable_at_zero(const SpectrumModel& m) {
  if (m.f_low > 0.0) return;
  for (const auto& p : m.power_laws)
    if (p.amplitude > 0.0 && p.exponent >= 1.0)
      throw DomainError("decoherence integral diverges at f = 0 for a power law with exponent >= 1; set f_low > 0");
}

// int S_smooth(f) sinc^2(pi f t) df over [a, b].
inline double smooth_sinc_integral(const SpectrumModel& m, double t, double a, double b) {
  if (!(b > a)) return 0.0;
  const double inv_t = 1.0 / t;
  auto g = [&](double f) { return smooth_density(m, f) * sinc2(std::numbers::pi * f * t); };
  double total = 0.0;
  if (a == 0.0) {
    // sinc^2 = 1 to 1e-12 below 1e-6 / t; the density is integrable there
    const double eps = std::min(b, 1e-6 * inv_t);
    SpectrumModel smooth = m;
    smooth.peaks.clear();
    smooth.quasi_static_sigma = 0.0;
    total += band_power(smooth, 0.0, eps);
    a = eps;
    if (!(b > a)) return total;
  }
  std::vector<double> cuts{a};
  auto push = [&](double x) {
    if (x > cuts.back() && x < b) cuts.push_back(x);
  };
  for (double x = a * 10.0; x < inv_t; x *= 10.0) push(x);
  const double f_osc = 64.0 * inv_t;  // oscillatory panels end here
  for (int k = 1; k <= 64; ++k) push(k * inv_t);
  const double osc_end = std::min(b, f_osc);
  if (osc_end > cuts.back()) cuts.push_back(osc_end);
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) total += gk(g, cuts[i], cuts[i + 1]);
  if (b <= f_osc) return total;

  // Above 64/t: sin^2 = (1 - cos)/2. The mean part is smooth; the cosine part
  // is integrated by parts (its panels start at an integer multiple of 1/t).
  auto mean_part = [&](double f) { return smooth_density(m, f) / (2.0 * std::pow(std::numbers::pi * f * t, 2)); };
  double lo = f_osc;
  if (std::isinf(b)) {
    double hi = 2.0 * lo;
    for (int i = 0; i < 200; ++i, lo = hi, hi *= 2.0) {
      const double piece = gk(mean_part, lo, hi);
      total += piece;
      if (piece < 1e-16 * total) break;
    }
  } else {
    for (double hi = std::min(2.0 * lo, b); lo < b; lo = hi, hi = std::min(2.0 * hi, b)) total += gk(mean_part, lo, hi);
  }
  const double w = 2.0 * std::numbers::pi * t;
  auto cos_weight = [&](double f) { return 2.0 * mean_part(f); };  // g(f) in int g cos(w f)
  auto deriv = [&](double f) { return (cos_weight(f * (1 + 1e-5)) - cos_weight(f * (1 - 1e-5))) / (2e-5 * f); };
  double cos_part = -deriv(f_osc) / (w * w);
  if (std::isfinite(b)) cos_part += cos_weight(b) * std::sin(w * b) / w + deriv(b) * std::cos(w * b) / (w * w);
  total -= 0.5 * cos_part;
  return total;
}

inline double peak_sinc_integral(const SpectralPeak& p, double t, double a, double b) {
  const double lo = std::max(a, p.center - 10.0 * p.width);
  const double hi = std::min(b, p.center + 10.0 * p.width);
  if (!(hi > lo) || p.height == 0.0) return 0.0;
  auto g = [&](double f) {
    const double u = (f - p.center) / p.width;
    return p.height * std::exp(-0.5 * u * u) * sinc2(std::numbers::pi * f * t);
  };
  const double panels = std::ceil((hi - lo) * t);
  if (panels > 4000.0) {
    // many oscillations under the line: the cosine part averages out
    auto mean_part = [&](double f) {
      const double u = (f - p.center) / p.width;
      return p.height * std::exp(-0.5 * u * u) / (2.0 * std::pow(std::numbers::pi * f * t, 2));
    };
    return gk(mean_part, lo, p.center) + gk(mean_part, p.center, hi);
  }
  const auto n = static_cast<int>(std::max(2.0, panels));
  const double h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += gk(g, lo + i * h, lo + (i + 1) * h);
  return total;
}

}  // namespace detail

// int S1(f) sinc^2(pi f t) df over the model band restricted to f >= f_from.
// Excludes the quasi-static offset.
inline double dephasing_integral(const SpectrumModel& m, double t, double f_from = 0.0) {
  if (t < 0.0) throw DomainError("dephasing_integral: t must be >= 0");
  detail::check_integrable_at_zero(m);
  const double a = std::max(m.f_low, f_from);
  const double b = m.f_high;
  if (!(b > a)) return 0.0;
  if (t == 0.0) {
    SpectrumModel band = m;
    band.quasi_static_sigma = 0.0;
    band.f_low = a;
    return total_variance(band);
  }
  double total = detail::smooth_sinc_integral(m, t, a, b);
  for (const auto& p : m.peaks) total += detail::peak_sinc_integral(p, t, a, b);
  return total;
}

// W(t); the quasi-static offset enters as sinc -> 1.
inline double decoherence_function(const SpectrumModel& m, double t) {
  if (t < 0.0) throw DomainError("decoherence_function: t must be >= 0");
  if (t == 0.0) return 1.0;
  const double var = m.quasi_static_sigma * m.quasi_static_sigma + dephasing_integral(m, t);
  return std::exp(-2.0 * std::numbers::pi * std::numbers::pi * t * t * var);
}

struct EnvelopeOptions {
  double split_factor = 1.0;  // static / high split at split_factor / t
  bool include_high = false;  // W_high is negligible for slow 1/f noise
};

// Noise variance acting as static during an evolution of length t.
inline double static_sigma2(const SpectrumModel& m, double t, double split_factor = 1.0) {
  if (!(t > 0.0)) return total_variance(m);
  detail::check_integrable_at_zero(m);
  return static_variance(m, split_factor / t);
}

inline double free_decay_envelope(const SpectrumModel& m, double gamma1, double t, const EnvelopeOptions& o = {}) {
  if (t < 0.0) throw DomainError("free_decay_envelope: t must be >= 0");
  if (t == 0.0) return 1.0;
  const double pi2 = std::numbers::pi * std::numbers::pi;
  double chi = 2.0 * pi2 * t * t * static_sigma2(m, t, o.split_factor);
  if (o.include_high) chi += 2.0 * pi2 * t * t * dephasing_integral(m, t, o.split_factor / t);
  return std::exp(-chi - 0.5 * gamma1 * t);
}

inline double t2star_from_sigma(double sigma) {
  if (!(sigma > 0.0)) throw DomainError("t2star_from_sigma: sigma must be > 0");
  return 1.0 / (std::numbers::pi * std::numbers::sqrt2 * sigma);
}

inline double sigma_from_t2star(double t2star) {
  if (!(t2star > 0.0)) throw DomainError("sigma_from_t2star: T2* must be > 0");
  return 1.0 / (std::numbers::pi * std::numbers::sqrt2 * t2star);
}

struct RotatingFrameRates {
  double eta = 0.0;  // [rad]
  double f_r = 0.0;  // [Hz]
  double gamma1 = 0.0;
  double gamma_nu = 0.0;
  double gamma1_rot = 0.0;
  double gamma_phi_rot = 0.0;
  double gamma2_rot = 0.0;
};

// s_l_at_fr is the TWO-SIDED density at f_R, so Gamma_nu = 2 pi^2 S_L(f_R).
inline RotatingFrameRates rotating_frame_rates(double f_rabi, double delta_q, double gamma1, double s_l_at_fr) {
  if (!(f_rabi > 0.0)) throw DomainError("rotating_frame_rates: f_rabi must be > 0");
  if (gamma1 < 0.0 || s_l_at_fr < 0.0) throw DomainError("rotating_frame_rates: rates and densities must be >= 0");
  RotatingFrameRates r;
  r.eta = std::atan2(f_rabi, delta_q);
  r.f_r = std::hypot(f_rabi, delta_q);
  const double s2 = std::pow(f_rabi / r.f_r, 2);
  const double c2 = std::pow(delta_q / r.f_r, 2);
  r.gamma1 = gamma1;
  r.gamma_nu = 2.0 * std::numbers::pi * std::numbers::pi * s_l_at_fr;
  r.gamma1_rot = s2 * r.gamma_nu + 0.5 * (1.0 + c2) * gamma1;
  r.gamma_phi_rot = 0.5 * gamma1 * s2;
  r.gamma2_rot = 0.25 * (3.0 - c2) * gamma1 + 0.5 * r.gamma_nu * s2;
  return r;
}

inline double rabi_static_envelope(double sigma, double f_rabi, double t) {
  if (!(f_rabi > 0.0)) throw DomainError("rabi_static_envelope: f_rabi must be > 0");
  const double x = 2.0 * std::numbers::pi * sigma * sigma * t / f_rabi;
  return std::pow(1.0 + x * x, -0.25);
}

// Gaussian approximation of the initial static Rabi decay, f_rabi / (pi sigma^2).
inline double rabi_static_gaussian_time(double sigma, double f_rabi) {
  if (!(sigma > 0.0) || !(f_rabi > 0.0)) throw DomainError("rabi_static_gaussian_time: arguments must be > 0");
  return f_rabi / (std::numbers::pi * sigma * sigma);
}

inline double rabi_zero_detuning_envelope(double sigma, double f_rabi, double gamma1, double gamma_nu, double t) {
  return rabi_static_envelope(sigma, f_rabi, t) * std::exp(-(0.75 * gamma1 + 0.5 * gamma_nu) * t);
}

// Gaussian-averaged Rabi amplitude at tilt eta: expanding f_R to second order
// in the static offset gives
//   (1 + a^2)^(-1/4) exp(-b^2 sigma^2 / (2 (1 + a^2))),
//   a = 2 pi t sigma^2 sin^2(eta) / f_R,  b = 2 pi t cos(eta).
inline double rabi_static_envelope_detuned(double sigma, double f_rabi, double delta_q, double t) {
  if (!(f_rabi > 0.0)) throw DomainError("rabi_static_envelope_detuned: f_rabi must be > 0");
  const double f_r = std::hypot(f_rabi, delta_q);
  const double s2 = std::pow(f_rabi / f_r, 2), c2 = std::pow(delta_q / f_r, 2);
  const double a = 2.0 * std::numbers::pi * t * sigma * sigma * s2 / f_r;
  const double b2 = std::pow(2.0 * std::numbers::pi * t, 2) * c2;
  return std::pow(1.0 + a * a, -0.25) * std::exp(-b2 * sigma * sigma / (2.0 * (1.0 + a * a)));
}

inline double in_band_density(const SpectrumModel& m, double f) {
  if (!(f > 0.0) || f < m.f_low || f > m.f_high) return 0.0;
  return psd_eval(m, f);
}

inline double rabi_envelope_general(const SpectrumModel& m, double gamma1, double f_rabi, double delta_q, double t,
                                    const EnvelopeOptions& o = {}) {
  if (!(f_rabi > 0.0)) throw DomainError("rabi_envelope_general: f_rabi must be > 0");
  if (t < 0.0) throw DomainError("rabi_envelope_general: t must be >= 0");
  if (t == 0.0) return 1.0;
  const double f_r = std::hypot(f_rabi, delta_q);
  const auto rates = rotating_frame_rates(f_rabi, delta_q, gamma1, 0.5 * in_band_density(m, f_r));
  const double sigma = std::sqrt(static_sigma2(m, t, o.split_factor));
  double env = rabi_static_envelope_detuned(sigma, f_rabi, delta_q, t) * std::exp(-rates.gamma2_rot * t);
  const double c2 = std::pow(delta_q / f_r, 2);
  if (c2 > 0.0) {
    const double pi2 = std::numbers::pi * std::numbers::pi;
    env *= std::exp(-2.0 * pi2 * t * t * c2 * dephasing_integral(m, t, o.split_factor / t));
  }
  return env;
}

// ---------------------------------------------------------------------------
// Decay fitting

enum class DecayKind { gaussian, exponential, power_law_quarter, rb_exponential };

inline const char* to_string(DecayKind k) {
  switch (k) {
    case DecayKind::gaussian: return "gaussian";
    case DecayKind::exponential: return "exponential";
    case DecayKind::power_law_quarter: return "power_law_quarter";
    case DecayKind::rb_exponential: return "rb_exponential";
  }
  return "?";
}

inline double decay_envelope(DecayKind k, double t, double tau) {
  switch (k) {
    case DecayKind::gaussian: return std::exp(-(t / tau) * (t / tau));
    case DecayKind::exponential:
    case DecayKind::rb_exponential: return std::exp(-t / tau);
    case DecayKind::power_law_quarter: return std::pow(1.0 + (t / tau) * (t / tau), -0.25);
  }
  return 0.0;
}

struct FitOptions {
  bool oscillating = true;
  double frequency_guess = 0.0;  // 0 = periodogram peak
  double timescale_guess = 0.0;  // 0 = first 1/e crossing
  std::vector<double> sigma;     // optional per-point standard errors
};

// P(t) = offset + amplitude cos(2 pi f t + phase) envelope(t / timescale), or
// for rb_exponential P(m) = amplitude p^m + offset with p = exp(-1/timescale).
struct DecayFit {
  DecayKind kind = DecayKind::exponential;
  double frequency = 0.0;
  double timescale = 0.0;
  double amplitude = 0.0;
  double offset = 0.0;
  double phase = 0.0;
  double frequency_stderr = 0.0;
  double timescale_stderr = 0.0;
  double amplitude_stderr = 0.0;
  Eigen::MatrixXd covariance;  // of the internal parameter vector
  double rms_residual = 0.0;
  bool degenerate = false;
  bool oscillating = true;
  int restarts = 0;
  std::vector<double> t, y;  // data the fit was made on

  double evaluate(double x) const {
    const double env = decay_envelope(kind, x, timescale);
    if (kind == DecayKind::rb_exponential || !oscillating) return offset + amplitude * env;
    return offset + amplitude * std::cos(2.0 * std::numbers::pi * frequency * x + phase) * env;
  }
  // RB decay constant p and its standard error.
  double decay_constant() const { return std::exp(-1.0 / timescale); }
  double decay_constant_stderr() const { return decay_constant() * timescale_stderr / (timescale * timescale); }
};

namespace detail {

inline double periodogram_peak(std::span<const double> t, std::span<const double> y, double mean) {
  const std::size_t n = t.size();
  const double span = t.back() - t.front();
  double min_step = span;
  for (std::size_t i = 1; i < n; ++i) min_step = std::min(min_step, t[i] - t[i - 1]);
  if (!(span > 0.0) || !(min_step > 0.0)) return 0.0;
  // Nyquist of the mean sampling step
  const double f_max = 0.5 * static_cast<double>(n - 1) / span;
  const double df = 0.2 / span;
  double best = 0.0, best_f = 0.0;
  for (double f = df; f <= f_max; f += df) {
    double c = 0.0, s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ph = 2.0 * std::numbers::pi * f * t[i];
      c += (y[i] - mean) * std::cos(ph);
      s += (y[i] - mean) * std::sin(ph);
    }
    const double p = c * c + s * s;
    if (p > best) {
      best = p;
      best_f = f;
    }
  }
  return best_f;
}

inline double first_e_crossing(std::span<const double> t, std::span<const double> y, double offset, double freq) {
  const std::size_t n = t.size();
  // running envelope: max |y - offset| over a window of one period (or 3 points)
  const double window = freq > 0.0 ? 1.0 / freq : 0.0;
  std::vector<double> env(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = i; j < n && (t[j] - t[i] <= window || j < i + 3); ++j) m = std::max(m, std::abs(y[j] - offset));
    env[i] = m;
  }
  const double a0 = env.front();
  for (std::size_t i = 1; i < n; ++i)
    if (env[i] < a0 / std::numbers::e) return std::max(t[i] - t.front(), 1e-3 * (t.back() - t.front()));
  return t.back() - t.front();
}

}  // namespace detail

inline DecayFit fit_decay(std::span<const double> t, std::span<const double> y, DecayKind kind,
                          const FitOptions& o = {}) {
  const std::size_t n = t.size();
  if (n != y.size()) throw DomainError("fit_decay: t and y differ in length");
  const std::size_t min_points = kind == DecayKind::rb_exponential ? 4 : 10;
  if (n < min_points) throw DomainError("fit_decay: too few points for this model");
  if (!o.sigma.empty() && o.sigma.size() != n) throw DomainError("fit_decay: sigma has wrong length");

  DecayFit fit;
  fit.kind = kind;
  fit.t.assign(t.begin(), t.end());
  fit.y.assign(y.begin(), y.end());
  const bool osc = o.oscillating && kind != DecayKind::rb_exponential;
  fit.oscillating = osc;

  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);
  double spread = 0.0;
  for (double v : y) spread = std::max(spread, std::abs(v - mean));
  const double span = t.back() - t.front();
  if (spread < 1e-12 || !(span > 0.0)) {
    fit.offset = mean;
    fit.timescale = span > 0.0 ? span : 1.0;
    fit.degenerate = true;
    fit.covariance = Eigen::MatrixXd::Zero(3, 3);
    return fit;
  }

  auto weight = [&](std::size_t i) { return o.sigma.empty() ? 1.0 : 1.0 / std::max(o.sigma[i], 1e-12); };

  // tail mean is a better offset seed than the global mean for decays
  double tail = 0.0;
  const std::size_t tail_start = n - std::max<std::size_t>(n / 4, 1);
  for (std::size_t i = tail_start; i < n; ++i) tail += y[i];
  tail /= static_cast<double>(n - tail_start);

  double f0 = 0.0;
  if (osc) f0 = o.frequency_guess > 0.0 ? o.frequency_guess : detail::periodogram_peak(t, y, mean);
  const double offset0 = osc ? mean : tail;
  const double tau0 = o.timescale_guess > 0.0 ? o.timescale_guess : detail::first_e_crossing(t, y, offset0, f0);

  Eigen::Index np = osc ? 5 : 3;
  std::vector<double> t_rel(t.begin(), t.end());
  detail::LeastSquaresResult best;
  best.cost = std::numeric_limits<double>::infinity();
  const double scales[] = {1.0, 0.5, 2.0, 0.25, 4.0, 0.125, 8.0, 1.5, 0.7};
  int attempts = 0;
  for (double sc : scales) {
    Eigen::VectorXd x0(np);
    if (kind == DecayKind::rb_exponential) {
      const double p0 = std::exp(-1.0 / (tau0 * sc));
      x0 << y[0] - tail, tail, p0;
    } else if (osc) {
      // linear cos / sin amplitudes seeded by projection at f0
      double c = 0.0, s = 0.0, cc = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double ph = 2.0 * std::numbers::pi * f0 * t[i];
        const double e = decay_envelope(kind, t[i], tau0 * sc);
        c += (y[i] - mean) * std::cos(ph) * e;
        s += (y[i] - mean) * std::sin(ph) * e;
        cc += std::pow(std::cos(ph) * e, 2);
        ss += std::pow(std::sin(ph) * e, 2);
      }
      x0 << offset0, cc > 0 ? c / cc : spread, ss > 0 ? s / ss : 0.0, f0, std::log(tau0 * sc);
    } else {
      x0 << offset0, y[0] - offset0, std::log(tau0 * sc);
    }
    auto fn = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r) {
      for (std::size_t i = 0; i < n; ++i) {
        double model;
        if (kind == DecayKind::rb_exponential) {
          model = q[0] * std::pow(q[2], t[i]) + q[1];
        } else if (osc) {
          const double ph = 2.0 * std::numbers::pi * q[3] * t[i];
          model = q[0] + (q[1] * std::cos(ph) + q[2] * std::sin(ph)) * decay_envelope(kind, t[i], std::exp(q[4]));
        } else {
          model = q[0] + q[1] * decay_envelope(kind, t[i], std::exp(q[2]));
        }
        r[static_cast<Eigen::Index>(i)] = (model - y[i]) * weight(i);
      }
    };
    auto res = detail::levenberg_marquardt(fn, x0, static_cast<Eigen::Index>(n));
    ++attempts;
    const bool sane = res.params.allFinite() &&
                      (kind == DecayKind::rb_exponential ? res.params[2] > 0.0 : true);
    if (sane && res.cost < best.cost) best = res;
    // a good first fit needs no restarts
    if (sane && res.converged && attempts == 1 && res.rms_residual < 0.5 * spread) break;
    if (attempts > 8) break;
  }
  if (!std::isfinite(best.cost)) {
    std::ostringstream diag;
    diag << "kind=" << to_string(kind) << " n=" << n << " f0=" << f0 << " tau0=" << tau0 << " restarts=" << attempts;
    throw FitError("fit_decay: no restart produced a finite fit", diag.str());
  }
  fit.restarts = attempts - 1;
  fit.covariance = best.covariance;
  fit.rms_residual = best.rms_residual;
  const auto& q = best.params;
  auto sd = [&](Eigen::Index i) { return std::sqrt(std::abs(best.covariance(i, i))); };
  if (kind == DecayKind::rb_exponential) {
    fit.amplitude = q[0];
    fit.offset = q[1];
    const double p = std::min(q[2], 1.0);
    fit.timescale = p < 1.0 ? -1.0 / std::log(p) : std::numeric_limits<double>::infinity();
    // d tau / d p = tau^2 / p
    fit.timescale_stderr = std::isfinite(fit.timescale) ? sd(2) * fit.timescale * fit.timescale / p : 0.0;
    fit.amplitude_stderr = sd(0);
  } else if (osc) {
    fit.offset = q[0];
    fit.amplitude = std::hypot(q[1], q[2]);
    fit.phase = std::atan2(-q[2], q[1]);
    fit.frequency = q[3];
    if (fit.frequency < 0.0) {
      fit.frequency = -fit.frequency;
      fit.phase = -fit.phase;
    }
    fit.timescale = std::exp(q[4]);
    fit.frequency_stderr = sd(3);
    fit.timescale_stderr = fit.timescale * sd(4);
    fit.amplitude_stderr = std::hypot(sd(1), sd(2));
  } else {
    fit.offset = q[0];
    fit.amplitude = q[1];
    fit.timescale = std::exp(q[2]);
    fit.timescale_stderr = fit.timescale * sd(2);
    fit.amplitude_stderr = sd(1);
    if (fit.amplitude < 0.0) {
      fit.amplitude = -fit.amplitude;
      fit.phase = std::numbers::pi;
    }
  }
  fit.degenerate = std::abs(fit.amplitude) < 3.0 * fit.amplitude_stderr || std::abs(fit.amplitude) < 1e-9;
  if (!best.converged && !fit.degenerate) {
    std::ostringstream diag;
    diag << "kind=" << to_string(kind) << " status=" << best.status << " rms=" << best.rms_residual;
    warn("fit_decay: solver stopped before convergence (" + diag.str() + ")");
  }
  return fit;
}

inline void write_fit_csv_header(std::ostream& os) { os << "model,f_Hz,timescale_s,amplitude,offset,rms_residual\n"; }

inline void write_fit_csv_row(std::ostream& os, const DecayFit& f) {
  os.precision(10);
  os << to_string(f.kind) << ',' << f.frequency << ',' << f.timescale << ',' << f.amplitude << ',' << f.offset << ','
     << f.rms_residual << '\n';
}

// ---------------------------------------------------------------------------
// Rabi spectroscopy and calibration

struct QualityFactor {
  double q = 0.0;
  double q_stderr = 0.0;
};

inline QualityFactor quality_factor(double f_rabi, double t2_rabi, double f_stderr = 0.0, double t_stderr = 0.0) {
  const double q = 2.0 * f_rabi * t2_rabi;
  const double rel = std::hypot(f_rabi > 0 ? f_stderr / f_rabi : 0.0, t2_rabi > 0 ? t_stderr / t2_rabi : 0.0);
  return {q, q * rel};
}

inline double pi_gate_fidelity(double q) {
  if (!(q > 0.0)) throw DomainError("pi_gate_fidelity: Q must be > 0");
  return std::exp(-1.0 / q);
}

// Two-sided density at f_rabi from a zero-detuning exponential Rabi rate:
// Gamma = (3/4) Gamma1 + pi^2 S_L.
inline double spectral_density_from_rate(double rate, double gamma1) {
  const double s = (rate - 0.75 * gamma1) / (std::numbers::pi * std::numbers::pi);
  if (s < 0.0) {
    warn("spectral_density_from_rate: decay is relaxation dominated; density floored at 0");
    return 0.0;
  }
  return s;
}

// Divides the static power-law envelope out of the fitted trace, refits an
// exponentially decaying oscillation and converts the rate. Returns the
// TWO-SIDED density S_L(f_rabi).
inline double extract_S_at_frabi(const DecayFit& fit, double sigma, double gamma1, DecayFit* refit = nullptr) {
  if (fit.kind == DecayKind::rb_exponential) throw DomainError("extract_S_at_frabi: needs a Rabi decay fit");
  if (fit.t.size() < 10) throw DomainError("extract_S_at_frabi: fit carries no data");
  const double f_rabi = fit.frequency;
  if (!(f_rabi > 0.0)) throw DomainError("extract_S_at_frabi: fit has no oscillation frequency");
  std::vector<double> y(fit.y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = fit.offset + (fit.y[i] - fit.offset) / rabi_static_envelope(sigma, f_rabi, fit.t[i]);
  FitOptions o;
  o.frequency_guess = f_rabi;
  o.timescale_guess = fit.timescale;
  auto exp_fit = fit_decay(fit.t, y, DecayKind::exponential, o);
  if (refit) *refit = exp_fit;
  return spectral_density_from_rate(1.0 / exp_fit.timescale, gamma1);
}

inline double log_one_over(double fc, double t) {
  if (!(fc > 0.0) || !(t > 0.0)) throw DomainError("calibration: f_c and t must be > 0");
  const double x = fc * t;
  if (x >= 1.0) throw DomainError("calibration: f_c * t must be < 1 (low-frequency cutoff inside the evolution)");
  if (x > 0.5) warn("calibration: f_c * t close to 1; the log approximation is at the edge of validity");
  return std::log(1.0 / x);
}

// A for S_L = A^2 / f from 1/T2* = 2 pi A sqrt(ln(1/(f_c t))).
inline double calibrate_A_from_t2star(double t2star, double fc, double t) {
  if (!(t2star > 0.0)) throw DomainError("calibrate_A_from_t2star: T2* must be > 0");
  return 1.0 / (2.0 * std::numbers::pi * t2star * std::sqrt(log_one_over(fc, t)));
}

// Variance of S_L = A^2 / f noise between f_c and 1/t: 2 A^2 ln(1/(f_c t)).
inline double sigma2_band(double a, double fc, double t) { return 2.0 * a * a * log_one_over(fc, t); }

// A from spectroscopy points assumed to follow A^2 / f (log-mean of S f).
inline double fit_inverse_f_amplitude(std::span<const double> f, std::span<const double> s) {
  if (f.size() != s.size() || f.empty()) throw DomainError("fit_inverse_f_amplitude: bad input");
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!(f[i] > 0.0) || !(s[i] > 0.0)) throw DomainError("fit_inverse_f_amplitude: non-positive point");
    acc += std::log(s[i] * f[i]);
  }
  return std::sqrt(std::exp(acc / static_cast<double>(f.size())));
}

inline void write_spectroscopy_csv(std::ostream& os, std::span<const double> f_rabi, std::span<const double> s) {
  os << "f_rabi_Hz,S_Hz2_per_Hz\n";
  os.precision(10);
  for (std::size_t i = 0; i < f_rabi.size() && i < s.size(); ++i) os << f_rabi[i] << ',' << s[i] << '\n';
}

}  // namespace spinfb
