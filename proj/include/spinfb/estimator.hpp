#pragma once

// Grid Bayesian estimation of the qubit detuning from single-shot Ramsey
// outcomes, and the probe / update / wait / target feedback loop.
//
// Frequencies in the loop are offsets from DeviceParams::f_qubit_0. The
// controller holds f_est; the probe runs at f_MW = f_qubit_0 + f_est + Delta_p
// and estimates delta f - f_est.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <vector>

#include "spinfb/detail/least_squares.hpp"
#include "spinfb/detail/rng.hpp"
#include "spinfb/dynamics.hpp"
#include "spinfb/errors.hpp"
#include "spinfb/noise.hpp"

namespace spinfb {

struct EstimatorConfig {
  std::size_t n_shots = 150;
  double t_r_start = 2e-9;   // first Ramsey interval [s]
  double t_r_step = 2e-9;    // arithmetic step [s]
  double delta_p = 50e6;     // probe offset [Hz]
  double bin_width = 0.25e6;
  double grid_halfspan = 25e6;
  double alpha = 0.25;
  double beta = 0.67;
  double envelope_t2star = 0.0;  // > 0 attenuates beta by exp(-(t/T2*)^2)
  double phase_time_offset = 0.0;  // added to t_R in the likelihood [s]
  bool finite_pulse_correction = true;  // probe steps add finite_pulse_time_offset of their pulses
  bool carry_prior = false;        // reuse the previous posterior (shifted by the update) instead of uniform

  double t_r(std::size_t k) const { return t_r_start + static_cast<double>(k) * t_r_step; }

  void validate() const {
    if (n_shots < 1) throw ConfigError("must be >= 1", "estimator.n_shots");
    if (!(bin_width > 0.0)) throw ConfigError("must be > 0", "estimator.bin_width");
    if (!(grid_halfspan >= 0.0)) throw ConfigError("must be >= 0", "estimator.grid_halfspan");
    if (!(t_r_start >= 0.0)) throw ConfigError("must be >= 0", "estimator.t_r_start");
    if (!(t_r_step > 0.0)) throw ConfigError("must be > 0", "estimator.t_r_step");
    if (!(beta > 0.0) || !(std::abs(alpha) + beta <= 1.0 + 1e-12))
      throw ConfigError("likelihood needs beta > 0 and |alpha| + beta <= 1", "estimator.beta");
    if (envelope_t2star < 0.0) throw ConfigError("must be >= 0", "estimator.envelope_t2star");
  }
};

struct PosteriorGrid {
  std::vector<double> centers;  // [Hz]
  std::vector<double> weights;
};

// Bins centred on k * bin_width, |k| <= halfspan / bin_width, so 0 is a center.
inline PosteriorGrid make_uniform_posterior(const EstimatorConfig& c) {
  c.validate();
  const auto k_max = static_cast<long>(std::floor(c.grid_halfspan / c.bin_width + 1e-9));
  PosteriorGrid g;
  for (long k = -k_max; k <= k_max; ++k) g.centers.push_back(static_cast<double>(k) * c.bin_width);
  g.weights.assign(g.centers.size(), 1.0 / static_cast<double>(g.centers.size()));
  return g;
}

inline double ramsey_likelihood(Outcome o, double delta_f, double t, const EstimatorConfig& c) {
  double beta = c.beta;
  if (c.envelope_t2star > 0.0) beta *= std::exp(-std::pow(t / c.envelope_t2star, 2));
  const double r = o == Outcome::up ? 1.0 : -1.0;
  const double te = t + c.phase_time_offset;
  return 0.5 * (1.0 + r * (c.alpha + beta * std::cos(2.0 * std::numbers::pi * (c.delta_p - delta_f) * te)));
}

inline void bayes_update_inplace(PosteriorGrid& g, Outcome o, double t, const EstimatorConfig& c) {
  double sum = 0.0;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    g.weights[i] *= std::max(0.0, ramsey_likelihood(o, g.centers[i], t, c));
    sum += g.weights[i];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    warn("bayes_update: posterior vanished; reset to uniform");
    std::fill(g.weights.begin(), g.weights.end(), 1.0 / static_cast<double>(g.weights.size()));
    return;
  }
  for (double& w : g.weights) w /= sum;
}

inline PosteriorGrid bayes_update(PosteriorGrid g, Outcome o, double t, const EstimatorConfig& c) {
  bayes_update_inplace(g, o, t, c);
  return g;
}

// Posterior argmax; exact ties go to the smallest |delta f|.
inline double estimate_detuning(const PosteriorGrid& g) {
  if (g.weights.empty()) throw DomainError("estimate_detuning: empty posterior");
  double best = -1.0, center = 0.0;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    const double w = g.weights[i];
    if (w > best * (1.0 + 1e-12) || (w >= best * (1.0 - 1e-12) && std::abs(g.centers[i]) < std::abs(center))) {
      best = std::max(best, w);
      center = g.centers[i];
    }
  }
  return center;
}

// Delay between the centres of two ideal pi/2 pulses of Rabi frequency f
// accumulates phase as if the free interval were longer by 1 / (pi f).
inline double finite_pulse_time_offset(double f_rabi) { return 1.0 / (std::numbers::pi * f_rabi); }

struct ProbeResult {
  double estimate = 0.0;  // of delta f - f_est [Hz]
  std::size_t shots = 0;
  double elapsed = 0.0;   // [s]
  PosteriorGrid posterior;
};

// One probe step starting at t_start: shot k runs the (compensated) Ramsey
// sequence with interval t_R(k) at t_start + k * repetition_time.
inline ProbeResult run_probe_step(const NoiseTrajectory& traj, const DeviceParams& p, const EstimatorConfig& c,
                                  const RamseyOptions& pulses, double f_est, double t_start, double repetition_time,
                                  Rng& rng, const PosteriorGrid* prior = nullptr) {
  c.validate();
  if (!(repetition_time > 0.0)) throw ConfigError("must be > 0", "feedback.repetition_time");
  EstimatorConfig cfg = c;
  if (c.finite_pulse_correction)
    cfg.phase_time_offset += finite_pulse_time_offset(p.rabi_per_amplitude * pulses.drive_amplitude);
  ProbeResult out;
  out.posterior = prior ? *prior : make_uniform_posterior(c);
  const double f_mw = p.f_qubit_0 + f_est + c.delta_p;
  for (std::size_t k = 0; k < c.n_shots; ++k) {
    const double t_r = c.t_r(k);
    const auto o = simulate_ramsey_shot(t_r, f_mw, traj, p, pulses, rng, t_start + static_cast<double>(k) * repetition_time);
    bayes_update_inplace(out.posterior, o, t_r, cfg);
  }
  out.estimate = estimate_detuning(out.posterior);
  out.shots = c.n_shots;
  out.elapsed = static_cast<double>(c.n_shots) * repetition_time;
  return out;
}

enum class LoopPhase { probe, update, wait, target };

struct FeedbackTiming {
  double repetition_time = 31.71e-6;  // T_R
  double probe = 0.0;                 // T_p
  double wait = 2e-3;                 // T_w
  double target = 0.0;                // T_t

  double latency() const { return 0.5 * probe + wait + 0.5 * target; }
};

struct FeedbackState {
  double f_est = 0.0;
  LoopPhase phase = LoopPhase::probe;
  FeedbackTiming timing;
};

enum class TargetMode { none, ramsey_trace, bayesian };

struct FeedbackOptions {
  std::size_t n_cycles = 200;
  std::size_t burn_in = 1;  // leading cycles left out of sigma^2 (the first probe starts from f_est = 0)
  double t_wait = 2e-3;
  double t_target = 0.0;  // 0 = T_p
  double repetition_time = 31.71e-6;
  std::uint64_t seed = 1;
  bool feedback = true;
  double traj_dt = 0.0;   // 0 = repetition_time (capped by the model's f_high)
  RamseyOptions probe_pulses{500.0, true, 200e-9, 5.4e9};
  TargetMode target_mode = TargetMode::none;
  std::vector<double> target_delays;  // Ramsey intervals cycled through in the target step
  double target_detuning = 0.0;       // f_MW - f_est in the target step
  RamseyOptions target_pulses{500.0, false, 200e-9, 5.4e9};
};

struct CycleRecord {
  std::size_t cycle = 0;
  double time = 0.0;          // target midpoint [s]
  double delta_f_true = 0.0;  // at the target midpoint [Hz]
  double delta_f_est = 0.0;   // controller estimate used in the target step [Hz]
  double residual = 0.0;      // true - est
  double measured = std::numeric_limits<double>::quiet_NaN();  // target-step Bayesian re-measurement of the residual
};

struct FeedbackResult {
  std::vector<CycleRecord> history;
  double sigma2 = 0.0;           // mean squared residual [Hz^2]
  double sigma2_measured = std::numeric_limits<double>::quiet_NaN();
  double quantization_floor2 = 0.0;  // bin^2 / 12
  FeedbackTiming timing;
  std::vector<TracePoint> target_trace;
  NoiseTrajectory trajectory;
};

inline double feedback_traj_dt(const SpectrumModel& m, const FeedbackOptions& o) {
  double dt = o.traj_dt > 0.0 ? o.traj_dt : o.repetition_time;
  if (std::isfinite(m.f_high) && 0.5 / dt < m.f_high && o.traj_dt <= 0.0) dt = 0.5 / m.f_high;
  return dt;
}

// Runs the closed loop on a single continuous noise trajectory. With
// feedback off the controller keeps f_est = 0.
inline FeedbackResult run_feedback_loop(const SpectrumModel& m, const DeviceParams& p, const EstimatorConfig& c,
                                        const FeedbackOptions& o) {
  p.validate();
  c.validate();
  if (o.n_cycles < 10) throw ConfigError("must be >= 10", "feedback.n_cycles");
  if (o.burn_in >= o.n_cycles / 2) throw ConfigError("must be < n_cycles / 2", "feedback.burn_in");
  if (o.t_wait < 0.0) throw ConfigError("must be >= 0", "feedback.t_wait");
  if (o.target_mode == TargetMode::ramsey_trace && o.target_delays.empty())
    throw ConfigError("ramsey_trace target needs delays", "feedback.target_delays");

  FeedbackResult res;
  res.timing.repetition_time = o.repetition_time;
  res.timing.probe = static_cast<double>(c.n_shots) * o.repetition_time;
  res.timing.wait = o.t_wait;
  res.timing.target = o.t_target > 0.0 ? o.t_target : res.timing.probe;
  res.quantization_floor2 = c.bin_width * c.bin_width / 12.0;
  const double cycle_len = res.timing.probe + res.timing.wait + res.timing.target;
  const auto target_shots =
      static_cast<std::size_t>(std::max(1.0, std::floor(res.timing.target / o.repetition_time + 1e-9)));

  const double dt = feedback_traj_dt(m, o);
  const double total = cycle_len * static_cast<double>(o.n_cycles) + 1e-6;
  const auto n = detail::next_pow2(static_cast<std::size_t>(std::ceil(total / dt)) + 2);
  res.trajectory = synthesize_trajectory(m, dt, n, derive_seed(o.seed, 0xfeed), "feedback");
  const auto& traj = res.trajectory;

  Rng rng = make_stream(o.seed, 0xb0b);
  const EstimatorConfig& probe_cfg = c;

  std::vector<double> ups(o.target_delays.size(), 0.0), pm(o.target_delays.size(), 0.0), counts(o.target_delays.size(), 0.0);
  FeedbackState st;
  PosteriorGrid carried;
  double sum_sq = 0.0, sum_sq_meas = 0.0;
  for (std::size_t cycle = 0; cycle < o.n_cycles; ++cycle) {
    const double t0 = static_cast<double>(cycle) * cycle_len;
    st.phase = LoopPhase::probe;
    const PosteriorGrid* prior = (c.carry_prior && !carried.weights.empty()) ? &carried : nullptr;
    auto probe = run_probe_step(traj, p, probe_cfg, o.probe_pulses, st.f_est, t0, o.repetition_time, rng, prior);
    st.phase = LoopPhase::update;
    const double step = o.feedback ? probe.estimate : 0.0;
    if (o.feedback) st.f_est += step;
    if (c.carry_prior) {
      // re-centre the posterior on the new estimate (shift by whole bins)
      carried = probe.posterior;
      const auto shift = static_cast<long>(std::llround(step / c.bin_width));
      std::vector<double> w(carried.weights.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const long j = static_cast<long>(i) + shift;
        if (j >= 0 && j < static_cast<long>(w.size())) w[i] = carried.weights[static_cast<std::size_t>(j)];
      }
      double s = 0.0;
      for (double v : w) s += v + 1e-6 / static_cast<double>(w.size());
      for (double& v : w) v = (v + 1e-6 / static_cast<double>(w.size())) / s;
      carried.weights = std::move(w);
    }
    st.phase = LoopPhase::wait;
    const double t_target = t0 + res.timing.probe + res.timing.wait;
    st.phase = LoopPhase::target;

    CycleRecord rec;
    rec.cycle = cycle;
    rec.time = t_target + 0.5 * res.timing.target;
    rec.delta_f_true = traj.at(rec.time);
    rec.delta_f_est = st.f_est;
    rec.residual = rec.delta_f_true - st.f_est;
    if (o.target_mode == TargetMode::bayesian) {
      auto m2 = run_probe_step(traj, p, probe_cfg, o.probe_pulses, st.f_est, t_target, o.repetition_time, rng);
      rec.measured = m2.estimate;
      if (cycle >= o.burn_in) sum_sq_meas += m2.estimate * m2.estimate;
    } else if (o.target_mode == TargetMode::ramsey_trace) {
      const double f_mw = p.f_qubit_0 + st.f_est + o.target_detuning;
      for (std::size_t k = 0; k < target_shots; ++k) {
        const std::size_t d = (cycle * target_shots + k) % o.target_delays.size();
        const auto v = ramsey_final_state(o.target_delays[d], f_mw, traj, p, o.target_pulses,
                                          t_target + static_cast<double>(k) * o.repetition_time);
        pm[d] += readout_up_probability(v, p);
        if (sample_readout(v, p, rng) == Outcome::up) ups[d] += 1.0;
        counts[d] += 1.0;
      }
    }
    if (cycle >= o.burn_in) sum_sq += rec.residual * rec.residual;
    res.history.push_back(rec);
  }
  const auto kept = static_cast<double>(o.n_cycles - o.burn_in);
  res.sigma2 = sum_sq / kept;
  if (o.target_mode == TargetMode::bayesian) res.sigma2_measured = sum_sq_meas / kept;
  for (std::size_t d = 0; d < o.target_delays.size(); ++d) {
    if (counts[d] == 0.0) continue;
    const double pu = ups[d] / counts[d];
    res.target_trace.push_back({o.target_delays[d], pu, std::sqrt(std::max(pu * (1 - pu), 0.25 / counts[d]) / counts[d]),
                                pm[d] / counts[d]});
  }
  std::sort(res.target_trace.begin(), res.target_trace.end(), [](auto& a, auto& b) { return a.t < b.t; });
  return res;
}

struct LatencyPoint {
  double t_wait = 0.0;
  double delta_t = 0.0;  // [s]
  double sigma2 = 0.0;   // [Hz^2]
  double sigma_b2 = 0.0; // [Hz^2]
};

struct LatencyFit {
  double d = 0.0;       // [Hz^2 / s^alpha]
  double alpha = 0.0;
  double floor = 0.0;   // [Hz]
  double alpha_stderr = 0.0;
  double floor_stderr = 0.0;
};

struct LatencySweep {
  std::vector<LatencyPoint> points;
  LatencyFit fit;
};

// Fits sigma^2 = D dt^alpha + floor^2 with relative residuals.
inline LatencyFit fit_latency_law(std::span<const double> dt, std::span<const double> s2) {
  if (dt.size() != s2.size() || dt.size() < 4) throw DomainError("fit_latency_law: need >= 4 points");
  const std::size_t n = dt.size();
  // seed: floor from the smallest value, slope from the upper half in log-log
  const double lo = *std::min_element(s2.begin(), s2.end());
  const double hi = *std::max_element(s2.begin(), s2.end());
  const double x1 = std::log(dt[n / 2]), x2 = std::log(dt[n - 1]);
  double a0 = x2 > x1 ? std::log(std::max(s2[n - 1] - 0.5 * lo, 1e-30) / std::max(s2[n / 2] - 0.5 * lo, 1e-30)) / (x2 - x1) : 1.0;
  a0 = std::clamp(std::isfinite(a0) ? a0 : 1.0, 0.1, 2.5);
  const double d0 = std::max(hi - 0.5 * lo, 1e-30) / std::pow(dt[n - 1], a0);
  Eigen::VectorXd x0(3);
  x0 << std::log(d0), a0, std::log(std::max(0.5 * lo, 1e-30));
  auto fn = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double model = std::exp(q[0]) * std::pow(dt[i], q[1]) + std::exp(q[2]);
      r[static_cast<Eigen::Index>(i)] = (model - s2[i]) / s2[i];
    }
  };
  const auto res = detail::levenberg_marquardt(fn, x0, static_cast<Eigen::Index>(n));
  LatencyFit f;
  f.d = std::exp(res.params[0]);
  f.alpha = res.params[1];
  f.floor = std::exp(0.5 * res.params[2]);
  f.alpha_stderr = std::sqrt(std::abs(res.covariance(1, 1)));
  f.floor_stderr = 0.5 * f.floor * std::sqrt(std::abs(res.covariance(2, 2)));
  return f;
}

inline LatencySweep latency_sweep(const SpectrumModel& m, const DeviceParams& p, const EstimatorConfig& c,
                                  std::span<const double> t_waits, const FeedbackOptions& base) {
  LatencySweep out;
  for (double tw : t_waits) {
    if (tw < 0.0) throw ConfigError("T_w values must be >= 0", "latency.t_wait");
    FeedbackOptions o = base;
    o.t_wait = tw;
    auto r = run_feedback_loop(m, p, c, o);
    const double delta_t = r.timing.latency();
    ScopedWarningHandler quiet(nullptr);
    const double sb2 = correlator_variance(r.trajectory, delta_t);
    out.points.push_back({tw, delta_t, r.sigma2, sb2});
  }
  if (out.points.size() >= 4) {
    std::vector<double> x, y;
    for (const auto& pt : out.points) {
      x.push_back(pt.delta_t);
      y.push_back(pt.sigma2);
    }
    out.fit = fit_latency_law(x, y);
  }
  return out;
}

inline void write_history_csv(std::ostream& os, std::span<const CycleRecord> h) {
  os << "cycle,time_s,delta_f_true_Hz,delta_f_est_Hz,residual_Hz\n";
  os.precision(10);
  for (const auto& r : h)
    os << r.cycle << ',' << r.time << ',' << r.delta_f_true << ',' << r.delta_f_est << ',' << r.residual << '\n';
}

inline void write_sweep_csv(std::ostream& os, std::span<const LatencyPoint> pts) {
  os << "delta_t_s,sigma2_Hz2,sigmaB2_Hz2\n";
  os.precision(10);
  for (const auto& pt : pts) os << pt.delta_t << ',' << pt.sigma2 << ',' << pt.sigma_b2 << '\n';
}

}  // namespace spinfb
