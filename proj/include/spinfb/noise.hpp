#pragma once

// Composite frequency-noise spectra, Gaussian trajectory synthesis, and
// spectral / correlator estimators.
//
// Convention: every density stored or returned here is ONE-SIDED, S(f) for
// f > 0, so that the variance of the process is the plain integral of S over
// positive frequencies. Coherence formulas written with a two-sided density
// S_L(f) = S_L(-f) map through S(f) = 2 S_L(f); see coherence.hpp.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spinfb/detail/fft.hpp"
#include "spinfb/detail/rng.hpp"
#include "spinfb/errors.hpp"

namespace spinfb {

struct PowerLawTerm {
  double amplitude = 0.0;  // A [Hz]; term is A^2 / f^exponent [Hz^2/Hz]
  double exponent = 1.0;   // beta
};

struct SpectralPeak {
  double center = 0.0;  // [Hz]
  double height = 0.0;  // [Hz^2/Hz]
  double width = 0.0;   // Gaussian standard deviation [Hz]
};

struct SpectrumModel {
  std::vector<PowerLawTerm> power_laws;
  double white_floor = 0.0;  // [Hz^2/Hz]
  std::vector<SpectralPeak> peaks;
  double rising_coefficient = 0.0;  // optional c f^2 term [Hz^2/Hz per Hz^2]
  double quasi_static_sigma = 0.0;  // per-realization constant offset std [Hz]
  double f_low = 1.0;               // [Hz]; 0 allowed for analytic use if no beta >= 1 term
  double f_high = 1e6;              // [Hz]; +inf allowed for analytic use

  void validate() const {
    auto require = [](bool ok, const char* field, const char* what) {
      if (!ok) throw ConfigError(what, std::string("noise.") + field);
    };
    for (const auto& p : power_laws) {
      require(std::isfinite(p.amplitude) && p.amplitude >= 0.0, "power_law", "amplitude must be >= 0");
      require(p.exponent >= 0.0 && p.exponent <= 3.0, "power_law", "exponent must lie in [0, 3]");
    }
    for (const auto& p : peaks) {
      require(p.height >= 0.0 && p.width > 0.0 && p.center > 0.0, "peak",
              "peak needs center > 0, height >= 0, width > 0");
    }
    require(white_floor >= 0.0, "white_floor", "must be >= 0");
    require(rising_coefficient >= 0.0, "rising_coefficient", "must be >= 0");
    require(quasi_static_sigma >= 0.0, "quasi_static_sigma", "must be >= 0");
    require(f_low >= 0.0 && std::isfinite(f_low), "f_low", "must be finite and >= 0");
    require(f_high > f_low, "f_high", "must exceed f_low");
  }
};

// One-sided model density at f > 0. Evaluated on the formula regardless of the
// synthesis band.
inline double psd_eval(const SpectrumModel& m, double f) {
  if (!(f > 0.0)) throw DomainError("psd_eval: frequency must be positive");
  double s = m.white_floor + m.rising_coefficient * f * f;
  for (const auto& p : m.power_laws) s += p.amplitude * p.amplitude * std::pow(f, -p.exponent);
  for (const auto& p : m.peaks) {
    const double u = (f - p.center) / p.width;
    s += p.height * std::exp(-0.5 * u * u);
  }
  return s;
}

// Exact integral of the one-sided density over [a, b] intersected with the
// model band.
inline double band_power(const SpectrumModel& m, double a, double b) {
  a = std::max(a, m.f_low);
  b = std::min(b, m.f_high);
  if (!(b > a)) return 0.0;
  const bool open = std::isinf(b);
  double total = 0.0;
  if (m.white_floor > 0.0) total += m.white_floor * (b - a);
  if (m.rising_coefficient > 0.0) total += m.rising_coefficient * (b * b * b - a * a * a) / 3.0;
  for (const auto& p : m.power_laws) {
    const double a2 = p.amplitude * p.amplitude;
    if (a2 == 0.0) continue;
    if (p.exponent == 1.0) {
      if (a == 0.0 || open) throw DomainError("band_power: 1/f power diverges on an unbounded band");
      total += a2 * std::log(b / a);
    } else if (p.exponent < 1.0) {
      if (open) throw DomainError("band_power: power law with exponent < 1 diverges at high frequency");
      total += a2 * (std::pow(b, 1.0 - p.exponent) - std::pow(a, 1.0 - p.exponent)) / (1.0 - p.exponent);
    } else {
      if (a == 0.0) throw DomainError("band_power: power law with exponent >= 1 needs f_low > 0");
      const double hi = open ? 0.0 : std::pow(b, 1.0 - p.exponent);
      total += a2 * (hi - std::pow(a, 1.0 - p.exponent)) / (1.0 - p.exponent);
    }
  }
  for (const auto& p : m.peaks) {
    const double s = std::numbers::sqrt2 * p.width;
    const double hi = open ? 1.0 : std::erf((b - p.center) / s);
    total += p.height * p.width * std::sqrt(std::numbers::pi / 2.0) * (hi - std::erf((a - p.center) / s));
  }
  return total;
}

// Variance of one realization ensemble: in-band power plus the quasi-static
// offset.
inline double total_variance(const SpectrumModel& m) {
  return band_power(m, m.f_low, m.f_high) + m.quasi_static_sigma * m.quasi_static_sigma;
}

// Variance of everything slower than `cutoff`: the quasi-static offset plus
// in-band power below the cutoff.
inline double static_variance(const SpectrumModel& m, double cutoff) {
  return m.quasi_static_sigma * m.quasi_static_sigma + band_power(m, m.f_low, cutoff);
}

struct NoiseTrajectory {
  double dt = 0.0;              // [s]
  std::vector<double> samples;  // delta f [Hz]
  std::uint64_t seed = 0;
  std::string model_tag;

  double duration() const { return dt * static_cast<double>(samples.size()); }
  double nyquist() const { return 0.5 / dt; }

  // Zero-order hold: sample j covers [j dt, (j+1) dt).
  double at(double t) const {
    auto j = static_cast<std::ptrdiff_t>(std::floor(t / dt));
    j = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(samples.size()) - 1);
    return samples[static_cast<std::size_t>(j)];
  }
};

// Constant trajectory (no noise) covering `duration`.
inline NoiseTrajectory constant_trajectory(double value, double dt, double duration) {
  if (!(dt > 0.0)) throw DomainError("constant_trajectory: dt must be positive");
  const auto n = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(duration / dt)) + 1);
  return NoiseTrajectory{dt, std::vector<double>(n, value), 0, "constant"};
}

// Frequency-domain synthesis of a stationary Gaussian process with one-sided
// PSD `m`. Every FFT bin k carries independent N(0, P_k) cosine and sine
// coefficients, where P_k is the exact model power inside the bin. Power below
// half a bin (too slow to resolve in n samples) is added to the per-realization
// constant offset together with quasi_static_sigma.
inline NoiseTrajectory synthesize_trajectory(const SpectrumModel& m, double dt, std::size_t n, std::uint64_t seed,
                                             std::string model_tag = "spectrum") {
  m.validate();
  if (!(dt > 0.0)) throw ConfigError("dt must be positive", "synthesis.dt");
  if (n < 2) throw ConfigError("need at least two samples", "synthesis.n");
  if (0.5 / dt < m.f_high * (1.0 - 1e-12))
    throw ConfigError("Nyquist frequency 1/(2 dt) is below the model's f_high; decrease dt or lower f_high",
                      "synthesis.dt");
  if (!(m.f_low > 0.0)) throw ConfigError("synthesis needs f_low > 0", "noise.f_low");

  const double df = 1.0 / (static_cast<double>(n) * dt);
  if (static_cast<double>(n) * dt < 1.0 / m.f_low)
    warn("synthesize_trajectory: n*dt < 1/f_low; power below one bin is folded into the quasi-static offset");

  Rng rng = make_stream(seed, 0x6e6f697365ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::complex<double>> spectrum(n / 2 + 1, {0.0, 0.0});
  const std::size_t last = n / 2;
  for (std::size_t k = 1; k <= last; ++k) {
    const double fk = static_cast<double>(k) * df;
    const bool nyquist_bin = (n % 2 == 0) && k == last;
    const double hi = nyquist_bin ? fk : fk + 0.5 * df;
    const double power = band_power(m, fk - 0.5 * df, hi);
    const double u = normal(rng), v = normal(rng);
    if (power <= 0.0) continue;
    const double s = std::sqrt(power);
    spectrum[k] = nyquist_bin ? std::complex<double>(s * u, 0.0) : std::complex<double>(0.5 * s * u, -0.5 * s * v);
  }
  auto samples = detail::RealFft::backward(spectrum, n);

  const double slow_var = static_variance(m, 0.5 * df);
  const double offset = slow_var > 0.0 ? std::sqrt(slow_var) * normal(rng) : 0.0;
  for (double& x : samples) x += offset;
  return NoiseTrajectory{dt, std::move(samples), seed, std::move(model_tag)};
}

struct PsdEstimate {
  std::vector<double> frequency;  // [Hz], bins k / (L dt), k = 0..L/2
  std::vector<double> density;    // one-sided [Hz^2/Hz]
  double df = 0.0;
  std::size_t segments = 0;

  double integrated_power() const {
    double acc = 0.0;
    for (double s : density) acc += s * df;
    return acc;
  }
};

// Welch estimate: Hann window, 50% overlap, global mean removed, one-sided.
inline PsdEstimate estimate_psd(std::span<const double> x, double dt, std::size_t segment_len) {
  if (segment_len < 2 || (segment_len & (segment_len - 1)) != 0)
    throw DomainError("estimate_psd: segment length must be a power of two >= 2");
  if (x.size() < segment_len) throw DomainError("estimate_psd: trajectory shorter than one segment");
  if (!(dt > 0.0)) throw DomainError("estimate_psd: dt must be positive");

  const std::size_t L = segment_len;
  std::vector<double> window(L);
  double wsum2 = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    window[j] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(L)));
    wsum2 += window[j] * window[j];
  }
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());

  PsdEstimate out;
  out.df = 1.0 / (static_cast<double>(L) * dt);
  out.density.assign(L / 2 + 1, 0.0);
  std::vector<double> seg(L);
  for (std::size_t start = 0; start + L <= x.size(); start += L / 2) {
    for (std::size_t j = 0; j < L; ++j) seg[j] = (x[start + j] - mu) * window[j];
    const auto spec = detail::RealFft::forward(seg);
    for (std::size_t k = 0; k <= L / 2; ++k) {
      const double scale = (k == 0 || k == L / 2) ? 1.0 : 2.0;
      out.density[k] += scale * std::norm(spec[k]) * dt / wsum2;
    }
    ++out.segments;
  }
  for (double& s : out.density) s /= static_cast<double>(out.segments);
  out.frequency.resize(L / 2 + 1);
  for (std::size_t k = 0; k <= L / 2; ++k) out.frequency[k] = static_cast<double>(k) * out.df;
  return out;
}

inline PsdEstimate estimate_psd(const NoiseTrajectory& traj, std::size_t segment_len) {
  return estimate_psd(traj.samples, traj.dt, segment_len);
}

// Mean squared increment <(x(t + lag) - x(t))^2> over all sample pairs.
inline double correlator_variance(const NoiseTrajectory& traj, double lag) {
  if (!(lag > 0.0)) throw DomainError("correlator_variance: lag must be positive");
  const auto steps = static_cast<std::size_t>(std::llround(lag / traj.dt));
  if (steps < 1) throw DomainError("correlator_variance: lag shorter than one sample");
  if (steps >= traj.samples.size()) throw DomainError("correlator_variance: lag exceeds trajectory");
  if (lag > traj.duration() / 10.0) warn("correlator_variance: lag exceeds 1/10 of the trajectory; poor statistics");
  double acc = 0.0;
  const std::size_t pairs = traj.samples.size() - steps;
  for (std::size_t i = 0; i < pairs; ++i) {
    const double d = traj.samples[i + steps] - traj.samples[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pairs);
}

struct NuclearSpecies {
  const char* name;
  double gyromagnetic_ratio;  // gamma / 2 pi [Hz/T]
};

inline constexpr std::array<NuclearSpecies, 3> kGaAsNuclei{{
    {"75As", 7.29e6},
    {"69Ga", 10.22e6},
    {"71Ga", 12.98e6},
}};

// Nuclear Larmor frequencies f = (gamma / 2 pi) B for each species.
inline std::vector<double> derive_larmor_frequencies(double b_total,
                                                     std::span<const NuclearSpecies> species = kGaAsNuclei) {
  if (!(b_total >= 0.0)) throw DomainError("derive_larmor_frequencies: field must be non-negative");
  std::vector<double> out;
  out.reserve(species.size());
  for (const auto& s : species) out.push_back(s.gyromagnetic_ratio * b_total);
  return out;
}

// Indices of bins in [f_min, f_max] that are the maximum within +-half_width
// bins and exceed the median of a +-8*half_width neighbourhood by `ratio`.
inline std::vector<std::size_t> find_spectral_peaks(const PsdEstimate& psd, double f_min, double f_max,
                                                    std::size_t half_width = 2, double ratio = 2.0) {
  std::vector<std::size_t> found;
  const std::size_t n = psd.density.size();
  const std::size_t wide = 8 * half_width;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (psd.frequency[i] < f_min || psd.frequency[i] > f_max) continue;
    const std::size_t lo = i > half_width ? i - half_width : 0;
    const std::size_t hi = std::min(n - 1, i + half_width);
    bool is_max = true;
    for (std::size_t j = lo; j <= hi && is_max; ++j)
      if (j != i && psd.density[j] >= psd.density[i]) is_max = false;
    if (!is_max) continue;
    std::vector<double> hood;
    for (std::size_t j = (i > wide ? i - wide : 1); j <= std::min(n - 1, i + wide); ++j) hood.push_back(psd.density[j]);
    std::nth_element(hood.begin(), hood.begin() + static_cast<std::ptrdiff_t>(hood.size() / 2), hood.end());
    if (psd.density[i] > ratio * hood[hood.size() / 2]) found.push_back(i);
  }
  return found;
}

inline void write_psd_csv(std::ostream& os, std::span<const double> f, std::span<const double> s) {
  os << "f_Hz,S_Hz2_per_Hz\n";
  os.precision(10);
  for (std::size_t i = 0; i < f.size() && i < s.size(); ++i) os << f[i] << ',' << s[i] << '\n';
}

}  // namespace spinfb
