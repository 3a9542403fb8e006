#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "spinfb/coherence.hpp"
#include "spinfb/scenarios.hpp"

using namespace spinfb;
using std::numbers::pi;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

std::vector<std::string> g_warnings;
void capture(std::string_view w) { g_warnings.emplace_back(w); }

SpectrumModel white(double s_one_sided) {
  SpectrumModel m;
  m.white_floor = s_one_sided;
  m.f_low = 0.0;
  m.f_high = inf;
  return m;
}

SpectrumModel random_model(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SpectrumModel m;
  m.f_low = std::pow(10.0, 1.0 + 3.0 * u(rng));
  m.f_high = m.f_low * std::pow(10.0, 3.0 + 3.0 * u(rng));
  m.power_laws.push_back({std::pow(10.0, 4.0 + 2.0 * u(rng)), 0.5 + 1.5 * u(rng)});
  if (u(rng) < 0.5) m.white_floor = std::pow(10.0, 2.0 * u(rng));
  if (u(rng) < 0.5) m.quasi_static_sigma = 1e5 * u(rng);
  return m;
}

// synthetic oscillating decay with gaussian noise of the given size
void synth(DecayKind k, double f, double tau, double amp, double off, double noise, std::uint64_t seed,
           std::size_t n, double t_max, std::vector<double>& t, std::vector<double>& y) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, noise);
  t.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = t_max * i / n;
    y[i] = off + amp * std::cos(2 * pi * f * t[i]) * decay_envelope(k, t[i], tau) + g(rng);
  }
}

}  // namespace

TEST(Decoherence, ZeroTimeIsOne) { EXPECT_EQ(decoherence_function(white(1e4), 0.0), 1.0); }

TEST(Decoherence, WhiteNoiseClosedForm) {
  // one-sided S1: int_0^inf S1 sinc^2(pi f t) df = S1 / (2 t)
  const double s1 = 2e4;
  for (double t = 1e-9; t <= 10e-6; t *= 1.7)
    EXPECT_NEAR(decoherence_function(white(s1), t) / std::exp(-pi * pi * s1 * t), 1.0, 1e-6) << t;
  // two-sided reading of the same density: exp(-2 pi^2 S_L t) with S_L = S1 / 2
  EXPECT_NEAR(decoherence_function(white(s1), 1e-6), std::exp(-2 * pi * pi * (s1 / 2) * 1e-6), 1e-9);
}

TEST(Decoherence, QuasiStaticClosedForm) {
  SpectrumModel m;
  m.quasi_static_sigma = 0.294e6;
  for (double t = 1e-9; t <= 10e-6; t *= 1.7) {
    const double ref = std::exp(-t * t * std::pow(2 * pi * m.quasi_static_sigma, 2) / 2);
    if (ref < 1e-300) break;
    EXPECT_NEAR(decoherence_function(m, t) / ref, 1.0, 1e-6) << t;
  }
}

TEST(Decoherence, DivergentWithoutLowCutoff) {
  SpectrumModel m;
  m.power_laws.push_back({1e5, 1.0});
  m.f_low = 0.0;
  EXPECT_THROW(decoherence_function(m, 1e-6), DomainError);
  m.power_laws[0].exponent = 0.7;
  EXPECT_GT(decoherence_function(m, 1e-6), 0.0);
  EXPECT_THROW(decoherence_function(m, -1.0), DomainError);
}

TEST(FreeDecay, T2starFromQuasiStatic) {
  SpectrumModel m;
  m.quasi_static_sigma = 0.294e6;
  const double t2 = t2star_from_sigma(m.quasi_static_sigma);
  EXPECT_NEAR(t2, 766.7e-9, 0.01 * 766.7e-9);
  EXPECT_NEAR(free_decay_envelope(m, 0.0, t2), std::exp(-1.0), 1e-12);
}

TEST(FreeDecay, PureRelaxation) {
  const SpectrumModel m;
  SpectrumModel none = m;
  none.f_high = 2.0;
  none.f_low = 1.0;
  for (double t : {1e-7, 1e-6, 1e-5}) EXPECT_NEAR(free_decay_envelope(none, 1e5, t), std::exp(-0.5e5 * t), 1e-15);
}

TEST(FreeDecay, RamseyEnvelopeAtFig2Scale) {
  SpectrumModel m;
  m.quasi_static_sigma = sigma_from_t2star(28.4e-9);
  for (double t = 0; t < 100e-9; t += 5e-9)
    EXPECT_NEAR(free_decay_envelope(m, 0.0, t), std::exp(-std::pow(t / 28.4e-9, 2)), 1e-12);
}

TEST(T2star, ValuesAndErrors) {
  EXPECT_NEAR(t2star_from_sigma(0.294e6), 765.7e-9, 0.15e-9);
  EXPECT_NEAR(t2star_from_sigma(0.288e6), 781.6e-9, 0.1e-9);
  EXPECT_THROW(t2star_from_sigma(0.0), DomainError);
  EXPECT_THROW(sigma_from_t2star(-1e-9), DomainError);
}

TEST(T2starProperty, RoundTrip) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(2.0, 9.0);
  for (int i = 0; i < 200; ++i) {
    const double s = std::pow(10.0, u(rng));
    EXPECT_NEAR(sigma_from_t2star(t2star_from_sigma(s)) / s, 1.0, 1e-12);
  }
}

TEST(RotatingFrame, Examples) {
  const auto on = rotating_frame_rates(10e6, 0.0, 1e3, 5e4);
  EXPECT_NEAR(on.eta, pi / 2, 1e-15);
  EXPECT_NEAR(on.gamma2_rot, 0.75 * 1e3 + 0.5 * on.gamma_nu, 1e-9);
  EXPECT_NEAR(rotating_frame_rates(1e6, 0.0, 0.0, 1.0).gamma_nu, 19.7392088, 1e-6);
  // Delta = f_rabi: sin^2 = cos^2 = 1/2
  const double g1 = 2e3, s = 3e4, gnu = 2 * pi * pi * s;
  const auto diag = rotating_frame_rates(5e6, 5e6, g1, s);
  EXPECT_NEAR(diag.gamma2_rot, 0.625 * g1 + 0.25 * gnu, 1e-9 * diag.gamma2_rot);
  EXPECT_NEAR(diag.gamma1_rot, 0.5 * gnu + 0.75 * g1, 1e-9 * diag.gamma1_rot);
  EXPECT_NEAR(diag.f_r, 5e6 * std::sqrt(2.0), 1e-6);
  EXPECT_THROW(rotating_frame_rates(0.0, 0.0, 0.0, 0.0), DomainError);
}

TEST(RotatingFrameProperty, RateIdentityAndSigns) {
  Rng rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double f = 1e6 * (1.0 + 50.0 * std::abs(u(rng)));
    const auto r = rotating_frame_rates(f, 5e7 * u(rng), 1e4 * std::abs(u(rng)), 1e5 * std::abs(u(rng)));
    EXPECT_NEAR(r.gamma2_rot - r.gamma1_rot / 2 - r.gamma_phi_rot, 0.0, 1e-12 * std::max(1.0, r.gamma2_rot));
    EXPECT_GE(r.gamma1_rot, 0.0);
    EXPECT_GE(r.gamma_phi_rot, 0.0);
    EXPECT_GE(r.gamma2_rot, 0.0);
  }
}

TEST(RabiStatic, ClosedForm) {
  EXPECT_EQ(rabi_static_envelope(1e6, 20e6, 0.0), 1.0);
  const double sigma = 1e6, f = 20e6;
  const double t = f / (2 * pi * sigma * sigma);
  EXPECT_NEAR(rabi_static_envelope(sigma, f, t), std::pow(2.0, -0.25), 1e-12);
}

TEST(RabiStatic, MatchesBruteForceGaussianAverage) {
  const double sigma = 0.5e6, f = 20e6;
  Rng rng(21);
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<double> delta(100000);
  for (double& d : delta) d = g(rng);
  double acc = 0.0;
  int n = 0;
  for (double t = 0.0; t < 8.0 * f / (2 * pi * sigma * sigma); t += 2e-6, ++n) {
    std::complex<double> avg = 0.0;
    for (double d : delta) avg += std::polar(1.0, 2 * pi * std::hypot(f, d) * t);
    avg /= static_cast<double>(delta.size());
    acc += std::pow(std::abs(avg) - rabi_static_envelope(sigma, f, t), 2);
  }
  EXPECT_LT(std::sqrt(acc / n), 0.01);
}

TEST(RabiZeroDetuning, Examples) {
  for (double t : {1e-7, 1e-6, 1e-5}) EXPECT_NEAR(rabi_zero_detuning_envelope(0.0, 1e7, 0.0, 2e5, t), std::exp(-1e5 * t), 1e-15);
  const double a = 0.6e6, f = 20e6;
  const double s_two = a * a / f;
  EXPECT_NEAR(rotating_frame_rates(f, 0.0, 0.0, s_two).gamma_nu, 3.553e5, 0.001e5);
  EXPECT_NEAR(rabi_static_gaussian_time(0.294e6, f), 74e-6, 0.01 * 74e-6);
}

TEST(RabiGeneral, ReducesToZeroDetuningForm) {
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    const auto m = random_model(rng);
    const double f = 0.05 * m.f_high + 1e5, g1 = 1e3 * i;
    for (double t : {1e-7, 1e-6, 1e-5}) {
      const double sigma = std::sqrt(static_sigma2(m, t));
      const double gnu = 2 * pi * pi * 0.5 * in_band_density(m, f);
      EXPECT_NEAR(rabi_envelope_general(m, g1, f, 0.0, t), rabi_zero_detuning_envelope(sigma, f, g1, gnu, t), 1e-10);
    }
  }
}

TEST(RabiGeneral, NoiselessIsOne) {
  SpectrumModel m;
  m.f_low = 1.0;
  m.f_high = 2.0;
  for (double t : {0.0, 1e-6, 1e-3}) EXPECT_NEAR(rabi_envelope_general(m, 0.0, 1e7, 3e6, t), 1.0, 1e-15);
}

TEST(RabiGeneral, FarDetunedApproachesFreeDecay) {
  SpectrumModel m;
  m.power_laws.push_back({0.6e6, 1.0});
  m.quasi_static_sigma = 0.2e6;
  m.f_low = 1e3;
  m.f_high = 1e8;
  EnvelopeOptions o;
  o.include_high = true;
  for (double t : {50e-9, 200e-9, 1e-6}) {
    const double far = rabi_envelope_general(m, 1e4, 1e5, 1e9, t);
    EXPECT_NEAR(far / free_decay_envelope(m, 1e4, t, o), 1.0, 1e-3) << t;
  }
}

TEST(EnvelopeProperty, NonIncreasingForNonNegativeSpectra) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 25; ++i) {
    const auto m = random_model(rng);
    const double g1 = 1e4 * u(rng), f = 1e6 + 3e7 * u(rng), d = 2e7 * (u(rng) - 0.5);
    const double sigma = 1e6 * u(rng);
    double prev[6] = {1, 1, 1, 1, 1, 1};
    for (double t = 1e-9; t < 20e-6; t *= 1.4) {
      const double now[6] = {decoherence_function(m, t),
                             free_decay_envelope(m, g1, t),
                             rabi_static_envelope(sigma, f, t),
                             rabi_static_envelope_detuned(sigma, f, d, t),
                             rabi_zero_detuning_envelope(sigma, f, g1, 1e4, t),
                             rabi_envelope_general(m, g1, f, 0.0, t)};
      for (int k = 0; k < 6; ++k) {
        EXPECT_LE(now[k], prev[k] * (1 + 1e-9)) << "envelope " << k << " t=" << t;
        prev[k] = now[k];
      }
    }
  }
}

TEST(FitDecay, GaussianRamseyWithinTwoPercent) {
  std::vector<double> t, y;
  synth(DecayKind::gaussian, 35e6, 28.4e-9, 0.5, 0.5, 0.01, 1, 101, 100e-9, t, y);
  const auto fit = fit_decay(t, y, DecayKind::gaussian);
  EXPECT_NEAR(fit.timescale, 28.4e-9, 0.02 * 28.4e-9);
  EXPECT_NEAR(fit.frequency, 35e6, 0.5e6);
  EXPECT_FALSE(fit.degenerate);
  EXPECT_GT(fit.rms_residual, 0.0);
}

TEST(FitDecay, QualityFactorOfFig6Trace) {
  std::vector<double> t, y;
  synth(DecayKind::exponential, 33.64e6, 1.26e-6, -0.5, 0.5, 0.005, 2, 500, 4e-6, t, y);
  FitOptions fo;
  fo.frequency_guess = 33.64e6;
  const auto fit = fit_decay(t, y, DecayKind::exponential, fo);
  const auto q = quality_factor(fit.frequency, fit.timescale, fit.frequency_stderr, fit.timescale_stderr);
  EXPECT_NEAR(q.q, 84.8, 0.01 * 84.8);
  EXPECT_GT(q.q_stderr, 0.0);
  EXPECT_NEAR(pi_gate_fidelity(84.8), 0.9883, 5e-5);
}

TEST(FitDecay, ConstantTraceIsDegenerate) {
  std::vector<double> t(40), y(40, 0.3);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = i * 1e-9;
  const auto fit = fit_decay(t, y, DecayKind::exponential);
  EXPECT_TRUE(fit.degenerate);
  EXPECT_NEAR(fit.amplitude, 0.0, 1e-12);
  EXPECT_NEAR(fit.offset, 0.3, 1e-12);
}

TEST(FitDecay, Preconditions) {
  std::vector<double> t{0, 1, 2}, y{0, 1, 0};
  EXPECT_THROW(fit_decay(t, y, DecayKind::gaussian), DomainError);
}

TEST(FitDecay, RbExponential) {
  std::vector<double> m, y;
  for (int k : {1, 2, 4, 8, 16, 32, 64, 128}) {
    m.push_back(k);
    y.push_back(0.5 * std::pow(0.98, k) + 0.5);
  }
  const auto fit = fit_decay(m, y, DecayKind::rb_exponential);
  EXPECT_NEAR(fit.decay_constant(), 0.98, 1e-6);
}

TEST(FitDecayProperty, RecoversRandomParameters) {
  Rng rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const DecayKind kinds[] = {DecayKind::gaussian, DecayKind::exponential, DecayKind::power_law_quarter};
  for (int i = 0; i < 30; ++i) {
    const auto k = kinds[i % 3];
    const double tau = 1e-6 * (0.5 + u(rng));
    const double f = (5.0 + 20.0 * u(rng)) / tau;
    const double t_max = (k == DecayKind::power_law_quarter ? 12.0 : 3.0) * tau;
    std::vector<double> t, y;
    synth(k, f, tau, 0.3 + 0.2 * u(rng), 0.5, 0.003, 100 + i, 600, t_max, t, y);
    FitOptions fo;
    fo.frequency_guess = f;
    const auto fit = fit_decay(t, y, k, fo);
    EXPECT_NEAR(fit.timescale / tau, 1.0, 0.05) << to_string(k) << " " << i;
    EXPECT_NEAR(fit.frequency / f, 1.0, 0.01) << to_string(k) << " " << i;
  }
}

TEST(ExtractS, FromFig6Timescale) {
  std::vector<double> t, y;
  synth(DecayKind::exponential, 33.64e6, 1.26e-6, 0.5, 0.5, 0.0, 1, 800, 5e-6, t, y);
  FitOptions fo;
  fo.frequency_guess = 33.64e6;
  const auto fit = fit_decay(t, y, DecayKind::exponential, fo);
  EXPECT_NEAR(extract_S_at_frabi(fit, 0.0, 0.0), 8.04e4, 0.005 * 8.04e4);
  EXPECT_NEAR(1.0 / (pi * pi * 1.26e-6), 8.04e4, 0.01e4);
}

TEST(ExtractS, RelaxationFloor) {
  EXPECT_EQ(spectral_density_from_rate(0.75 * 4e3, 4e3), 0.0);
  g_warnings.clear();
  {
    ScopedWarningHandler h(&capture);
    EXPECT_EQ(spectral_density_from_rate(1e3, 4e3), 0.0);
  }
  EXPECT_EQ(g_warnings.size(), 1u);
}

TEST(ExtractSProperty, SimulatedRoundTripWithinThreeDecibels) {
  DeviceParams p;
  p.readout_alpha = 0.0;
  p.readout_beta = 1.0;
  ScopedWarningHandler quiet(nullptr);
  for (double a : {0.3e6, 1.0e6}) {
    SpectrumModel m;
    m.power_laws.push_back({a * std::sqrt(2.0), 1.0});
    m.f_low = 5e5;
    m.f_high = 1e9;
    SpectroscopyParams sp;
    sp.rabi_frequencies = {2e6, 20e6};
    sp.n_shots = 300;
    sp.points = 200;
    for (const auto& pt : run_spectroscopy(m, p, sp, 7)) {
      EXPECT_NEAR(pt.s_model, a * a / pt.f_rabi, 1e-6 * pt.s_model);
      EXPECT_LT(std::abs(pt.error_db), 3.0) << a << " " << pt.f_rabi;
    }
  }
}

TEST(Calibration, AppendixCValues) {
  EXPECT_NEAR(calibrate_A_from_t2star(103.7e-9, 500.0, 100e-9), 0.5e6, 0.05 * 0.5e6);
  EXPECT_NEAR(sigma2_band(0.5e6, 500.0, 2e-6), 3.3e12, 0.1 * 3.3e12);
  EXPECT_NEAR(sigma2_band(0.5e6, 500.0, 2e-6), 2 * 0.25e12 * std::log(1000.0), 1.0);
}

TEST(Calibration, ValidityEdge) {
  EXPECT_THROW(calibrate_A_from_t2star(100e-9, 1e7, 100e-9), DomainError);
  EXPECT_THROW(sigma2_band(1e6, 2e7, 100e-9), DomainError);
  g_warnings.clear();
  double a = 0.0;
  {
    ScopedWarningHandler h(&capture);
    a = calibrate_A_from_t2star(100e-9, 0.999999e7, 100e-9);
  }
  EXPECT_GT(a, 1e8);
  EXPECT_FALSE(g_warnings.empty());
}

TEST(CalibrationProperty, SigmaBandInvertsT2star) {
  // the Gaussian T2* of the band variance is the calibration input
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double t2 = 1e-8 + 1e-6 * u(rng), fc = 1.0 + 1e3 * u(rng), t = 1e-8 + 1e-6 * u(rng);
    const double a = calibrate_A_from_t2star(t2, fc, t);
    EXPECT_NEAR(t2star_from_sigma(std::sqrt(sigma2_band(a, fc, t))) / t2, 1.0, 1e-12);
  }
}
