#pragma once

// Rotating-frame evolution of a single spin under rectangular microwave
// segments with a frozen-per-shot noise trajectory delta f(t).
//
// Frame: the Bloch vector precesses (right-handed) about
//   Omega = (f_rabi cos phi, f_rabi sin phi, f_qubit(t) - f_frame)
// with angular rate 2 pi |Omega|, where f_qubit(t) = f_qubit_0 + delta f(t)
// + microwave shift. With Delta_q = f_MW - f_qubit this is the usual tilt
// angle eta = atan(f_rabi / Delta_q) and |Omega| = sqrt(f_rabi^2 + Delta_q^2).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "spinfb/detail/least_squares.hpp"
#include "spinfb/detail/rng.hpp"
#include "spinfb/errors.hpp"
#include "spinfb/noise.hpp"

namespace spinfb {

struct DeviceParams {
  double b_ext = 1.01;              // [T]
  double b_mm_z = 0.07;             // [T]
  double f_qubit_0 = 5.495e9;       // nominal resonance at zero drive [Hz]
  double shift_coeff = 0.0;         // [Hz / amplitude^p]
  double shift_exponent = 2.0;
  double shift_settle_time = 0.0;   // [s]; 0 = shift follows the drive instantly
  double rabi_per_amplitude = 1e6;  // [Hz / amplitude unit]
  double gamma1 = 0.0;              // [1/s]
  double readout_alpha = 0.25;
  double readout_beta = 0.67;

  double b_total() const { return b_ext + b_mm_z; }

  void validate() const {
    if (!(readout_beta > 0.0)) throw ConfigError("must be > 0", "device.readout_beta");
    if (!(readout_alpha + readout_beta <= 1.0 + 1e-12 && readout_alpha + readout_beta >= 0.0))
      throw ConfigError("readout_alpha + readout_beta must lie in [0, 1]", "device.readout_alpha");
    if (!(std::abs(readout_alpha) <= 1.0)) throw ConfigError("must lie in [-1, 1]", "device.readout_alpha");
    if (!(rabi_per_amplitude > 0.0)) throw ConfigError("must be > 0", "device.rabi_per_amplitude");
    if (!(gamma1 >= 0.0)) throw ConfigError("must be >= 0", "device.gamma1");
    if (!(shift_settle_time >= 0.0)) throw ConfigError("must be >= 0", "device.shift_settle_time");
    if (!(f_qubit_0 > 0.0)) throw ConfigError("must be > 0", "device.f_qubit_0");
  }
};

enum class SegmentKind { drive, off_resonant, idle };

struct PulseSegment {
  SegmentKind kind = SegmentKind::idle;
  double frequency = 0.0;  // microwave frequency; for idle segments the frame frequency (0 = keep)
  double amplitude = 0.0;
  double phase = 0.0;      // [rad]
  double duration = 0.0;   // [s]
};

struct ExperimentSchedule {
  std::vector<PulseSegment> segments;
  double frame_frequency = 0.0;  // rotating-frame reference; 0 = first drive segment's frequency

  double total_duration() const {
    double t = 0.0;
    for (const auto& s : segments) t += s.duration;
    return t;
  }
};

struct BlochState {
  double x = 0.0, y = 0.0, z = 1.0;
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

enum class Outcome { down, up };

// Time bookkeeping carried across consecutive segments of one shot.
struct EvolutionCursor {
  double time = 0.0;             // position in the trajectory [s]
  double mw_elapsed = 0.0;       // how long the microwave has been continuously on [s]
  double frame_frequency = std::numeric_limits<double>::quiet_NaN();
};

inline double microwave_shift(const DeviceParams& p, double amplitude) {
  if (amplitude <= 0.0 || p.shift_coeff == 0.0) return 0.0;
  return p.shift_coeff * std::pow(amplitude, p.shift_exponent);
}

namespace detail {

inline BlochState rotate(const BlochState& v, double ox, double oy, double oz, double h) {
  const double w = std::sqrt(ox * ox + oy * oy + oz * oz);
  if (w == 0.0) return v;
  const double nx = ox / w, ny = oy / w, nz = oz / w;
  const double theta = 2.0 * std::numbers::pi * w * h;
  const double c = std::cos(theta), s = std::sin(theta);
  const double dot = nx * v.x + ny * v.y + nz * v.z;
  return {v.x * c + (ny * v.z - nz * v.y) * s + nx * dot * (1.0 - c),
          v.y * c + (nz * v.x - nx * v.z) * s + ny * dot * (1.0 - c),
          v.z * c + (nx * v.y - ny * v.x) * s + nz * dot * (1.0 - c)};
}

}  // namespace detail

// Evolves through one segment starting at cursor.time, stepping exactly at
// trajectory sample boundaries (delta f is held constant within a sample).
// Relaxation (gamma1) and shift settling are applied by operator splitting on
// sub-steps no longer than 1/50 of a precession period.
inline BlochState evolve(BlochState v, const PulseSegment& seg, const NoiseTrajectory& traj, const DeviceParams& p,
                         EvolutionCursor& cur) {
  if (seg.duration < 0.0 || seg.amplitude < 0.0) throw DomainError("evolve: negative duration or amplitude");
  if (seg.kind != SegmentKind::off_resonant && seg.frequency > 0.0) cur.frame_frequency = seg.frequency;
  if (std::isnan(cur.frame_frequency)) cur.frame_frequency = seg.frequency > 0.0 ? seg.frequency : p.f_qubit_0;
  if (seg.duration == 0.0) return v;

  const double t0 = cur.time;
  const double t_end = t0 + seg.duration;
  if (t_end > traj.duration() * (1.0 + 1e-12) + 1e-18) throw DomainError("evolve: trajectory too short for segment");

  const bool mw_on = seg.kind != SegmentKind::idle && seg.amplitude > 0.0;
  const double f_rabi = seg.kind == SegmentKind::drive ? p.rabi_per_amplitude * seg.amplitude : 0.0;
  const double ox = f_rabi * std::cos(seg.phase);
  const double oy = f_rabi * std::sin(seg.phase);
  const double full_shift = mw_on ? microwave_shift(p, seg.amplitude) : 0.0;
  const bool settling = mw_on && p.shift_settle_time > 0.0 && full_shift != 0.0;
  const bool split = p.gamma1 > 0.0 || settling;
  const double base = p.f_qubit_0 - cur.frame_frequency;
  const auto n = traj.samples.size();

  double t = t0;
  double elapsed = mw_on ? cur.mw_elapsed : 0.0;
  auto j = static_cast<std::size_t>(std::max(0.0, std::floor(t / traj.dt)));
  while (t < t_end) {
    while (static_cast<double>(j + 1) * traj.dt <= t) ++j;
    const std::size_t idx = std::min(j, n - 1);
    double h = std::min(static_cast<double>(j + 1) * traj.dt, t_end) - t;
    if (h <= 0.0) break;
    double shift = full_shift;
    double oz = base + traj.samples[idx] + shift;
    if (split) {
      const double w = std::sqrt(ox * ox + oy * oy + oz * oz);
      double max_step = w > 0.0 ? 0.02 / w : h;
      if (p.gamma1 > 0.0) max_step = std::min(max_step, 0.02 / p.gamma1);
      if (settling) max_step = std::min(max_step, p.shift_settle_time / 20.0);
      h = std::min(h, max_step);
      if (settling) {
        shift = full_shift * (1.0 - std::exp(-(elapsed + 0.5 * h) / p.shift_settle_time));
        oz = base + traj.samples[idx] + shift;
      }
    }
    v = detail::rotate(v, ox, oy, oz, h);
    if (p.gamma1 > 0.0) {
      const double et = std::exp(-0.5 * p.gamma1 * h);
      const double el = std::exp(-p.gamma1 * h);
      v.x *= et;
      v.y *= et;
      v.z = 1.0 + (v.z - 1.0) * el;
    }
    t += h;
    elapsed += h;
  }
  cur.time = t_end;
  cur.mw_elapsed = mw_on ? cur.mw_elapsed + seg.duration : 0.0;
  return v;
}

// Single-segment form starting at trajectory time t_start.
inline BlochState evolve(const BlochState& v, const PulseSegment& seg, const NoiseTrajectory& traj,
                         const DeviceParams& p, double t_start = 0.0) {
  EvolutionCursor cur;
  cur.time = t_start;
  return evolve(v, seg, traj, p, cur);
}

inline BlochState run_schedule(const ExperimentSchedule& sched, const NoiseTrajectory& traj, const DeviceParams& p,
                               double t_start = 0.0, BlochState v = {}) {
  if (!(sched.total_duration() > 0.0)) throw DomainError("run_schedule: schedule has zero duration");
  EvolutionCursor cur;
  cur.time = t_start;
  if (sched.frame_frequency > 0.0) {
    cur.frame_frequency = sched.frame_frequency;
  } else {
    for (const auto& s : sched.segments)
      if (s.kind == SegmentKind::drive) {
        cur.frame_frequency = s.frequency;
        break;
      }
  }
  for (const auto& s : sched.segments) v = evolve(v, s, traj, p, cur);
  return v;
}

// P(up) = (1 + alpha - beta z) / 2: an ideal readout (alpha = 0, beta = 1)
// reports "up" for z = -1, i.e. a spin flipped away from its initialized state.
inline double readout_up_probability(const BlochState& v, const DeviceParams& p) {
  const double pu = 0.5 * (1.0 + p.readout_alpha - p.readout_beta * v.z);
  if (pu < -1e-12 || pu > 1.0 + 1e-12) throw ConfigError("readout probability outside [0, 1]", "device.readout_beta");
  return std::clamp(pu, 0.0, 1.0);
}

inline Outcome sample_readout(const BlochState& v, const DeviceParams& p, Rng& rng) {
  const double pu = readout_up_probability(v, p);
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < pu ? Outcome::up : Outcome::down;
}

struct RamseyOptions {
  double drive_amplitude = 100.0;  // sets f_rabi = rabi_per_amplitude * amplitude for the pi/2 bursts
  bool off_resonant_compensation = false;
  double pre_burst = 200e-9;       // off-resonant pre-burst when compensating [s]
  double off_resonant_frequency = 5.4e9;
};

inline double pi_half_duration(const DeviceParams& p, double amplitude) {
  return 1.0 / (4.0 * p.rabi_per_amplitude * amplitude);
}

// pi/2 - wait(t_R) - pi/2. With compensation the wait carries an off-resonant
// burst of equal amplitude and a pre-burst precedes the first pulse.
inline ExperimentSchedule make_ramsey_schedule(double t_r, double f_mw, const DeviceParams& p,
                                               const RamseyOptions& o) {
  if (t_r < 0.0) throw DomainError("ramsey: t_R must be >= 0");
  if (!(o.drive_amplitude > 0.0)) throw ConfigError("must be > 0", "ramsey.drive_amplitude");
  const double tau = pi_half_duration(p, o.drive_amplitude);
  ExperimentSchedule s;
  s.frame_frequency = f_mw;
  if (o.off_resonant_compensation && o.pre_burst > 0.0)
    s.segments.push_back({SegmentKind::off_resonant, o.off_resonant_frequency, o.drive_amplitude, 0.0, o.pre_burst});
  s.segments.push_back({SegmentKind::drive, f_mw, o.drive_amplitude, 0.0, tau});
  if (o.off_resonant_compensation)
    s.segments.push_back({SegmentKind::off_resonant, o.off_resonant_frequency, o.drive_amplitude, 0.0, t_r});
  else
    s.segments.push_back({SegmentKind::idle, f_mw, 0.0, 0.0, t_r});
  s.segments.push_back({SegmentKind::drive, f_mw, o.drive_amplitude, 0.0, tau});
  return s;
}

inline BlochState ramsey_final_state(double t_r, double f_mw, const NoiseTrajectory& traj, const DeviceParams& p,
                                     const RamseyOptions& o, double t_start = 0.0) {
  return run_schedule(make_ramsey_schedule(t_r, f_mw, p, o), traj, p, t_start);
}

inline Outcome simulate_ramsey_shot(double t_r, double f_mw, const NoiseTrajectory& traj, const DeviceParams& p,
                                    const RamseyOptions& o, Rng& rng, double t_start = 0.0) {
  return sample_readout(ramsey_final_state(t_r, f_mw, traj, p, o, t_start), p, rng);
}

struct TracePoint {
  double t = 0.0;        // [s]
  double p_up = 0.0;     // sampled single-shot average
  double stderr_ = 0.0;  // binomial standard error of p_up
  double p_mean = 0.0;   // readout probability averaged over realizations (no shot noise)
};

struct RabiOptions {
  double amplitude = 10.0;
  std::size_t n_shots = 200;
  std::uint64_t seed = 1;
  double dt = 0.0;  // trajectory step; 0 = min(1/(2 f_high), 1/(20 f_R))
  bool off_resonant_pre_burst = false;
  double pre_burst = 200e-9;
};

namespace detail {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t m = 1;
  while (m < n) m <<= 1;
  return m;
}

inline bool has_band_noise(const SpectrumModel& m) {
  return m.white_floor > 0.0 || m.rising_coefficient > 0.0 || !m.peaks.empty() ||
         std::any_of(m.power_laws.begin(), m.power_laws.end(), [](const PowerLawTerm& t) { return t.amplitude > 0.0; });
}

// One noise realization long enough for `duration`. Models with no in-band
// power skip the FFT and carry only the quasi-static offset.
inline NoiseTrajectory shot_trajectory(const SpectrumModel& m, double dt, double duration, std::uint64_t seed) {
  const std::size_t need = static_cast<std::size_t>(std::ceil(duration / dt)) + 2;
  const double half_bin = 0.5 / (static_cast<double>(next_pow2(need)) * dt);
  // all in-band power below half a bin would be folded into the offset anyway
  if (!has_band_noise(m) || m.f_high <= half_bin) {
    Rng rng = make_stream(seed, 0x6e6f697365ULL);
    const double sd = std::sqrt(total_variance(m));
    const double offset = sd > 0.0 ? std::normal_distribution<double>(0.0, sd)(rng) : 0.0;
    return NoiseTrajectory{dt, std::vector<double>(need, offset), seed, "quasi-static"};
  }
  ScopedWarningHandler quiet(nullptr);  // short per-shot segments always fold slow power
  return synthesize_trajectory(m, dt, next_pow2(need), seed, "shot");
}

inline double auto_dt(const SpectrumModel& m, double f_r, double requested) {
  if (requested > 0.0) return requested;
  double dt = 1.0 / (20.0 * std::max(f_r, 1.0));
  if (detail::has_band_noise(m)) {
    if (!std::isfinite(m.f_high)) throw ConfigError("per-shot synthesis needs a finite f_high", "noise.f_high");
    dt = std::min(dt, 0.5 / m.f_high);
  }
  return dt;
}

}  // namespace detail

// Zero-detuning (or detuned) Rabi trace. Each shot draws an independent noise
// realization and one realization is shared by all burst durations of that
// shot. Per-duration averages are unchanged by this, but Monte-Carlo errors
// become correlated along the trace, so fit covariances understate them.
inline std::vector<TracePoint> simulate_rabi_trace(std::span<const double> burst_durations, double f_mw,
                                                   const SpectrumModel& model, const DeviceParams& p,
                                                   const RabiOptions& o) {
  p.validate();
  if (o.n_shots < 1) throw ConfigError("must be >= 1", "rabi.n_shots");
  if (burst_durations.empty()) throw DomainError("simulate_rabi_trace: no durations");
  std::vector<std::size_t> order(burst_durations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return burst_durations[a] < burst_durations[b]; });
  if (burst_durations[order.front()] < 0.0) throw DomainError("simulate_rabi_trace: negative duration");

  const double f_rabi = p.rabi_per_amplitude * o.amplitude;
  const double detuning = f_mw - p.f_qubit_0 - microwave_shift(p, o.amplitude);
  const double dt = detail::auto_dt(model, std::hypot(f_rabi, detuning), o.dt);
  const double pre = o.off_resonant_pre_burst ? o.pre_burst : 0.0;
  const double span = pre + burst_durations[order.back()];

  std::vector<double> ups(burst_durations.size(), 0.0), pmean(burst_durations.size(), 0.0);
  for (std::size_t shot = 0; shot < o.n_shots; ++shot) {
    const auto traj = detail::shot_trajectory(model, dt, span, derive_seed(o.seed, shot));
    Rng rng = make_stream(o.seed, shot);
    EvolutionCursor cur;
    cur.frame_frequency = f_mw;
    BlochState v;
    if (pre > 0.0) v = evolve(v, {SegmentKind::off_resonant, 5.4e9, o.amplitude, 0.0, pre}, traj, p, cur);
    double done = 0.0;
    for (std::size_t i : order) {
      const double d = burst_durations[i];
      v = evolve(v, {SegmentKind::drive, f_mw, o.amplitude, 0.0, d - done}, traj, p, cur);
      done = d;
      pmean[i] += readout_up_probability(v, p);
      if (sample_readout(v, p, rng) == Outcome::up) ups[i] += 1.0;
    }
  }
  std::vector<TracePoint> out(burst_durations.size());
  const double n = static_cast<double>(o.n_shots);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double pu = ups[i] / n;
    out[i] = {burst_durations[i], pu, std::sqrt(std::max(pu * (1.0 - pu), 0.25 / n) / n), pmean[i] / n};
  }
  return out;
}

struct RamseyTraceOptions {
  RamseyOptions ramsey;
  std::size_t n_shots = 100;  // per delay
  std::uint64_t seed = 1;
  double dt = 0.0;            // 0 = derive from model / pulse bandwidth
};

// Free-induction Ramsey trace; every (delay, shot) pair uses a fresh noise
// realization.
inline std::vector<TracePoint> simulate_ramsey_trace(std::span<const double> delays, double f_mw,
                                                     const SpectrumModel& model, const DeviceParams& p,
                                                     const RamseyTraceOptions& o) {
  p.validate();
  if (o.n_shots < 1) throw ConfigError("must be >= 1", "ramsey.n_shots");
  const double f_rabi = p.rabi_per_amplitude * o.ramsey.drive_amplitude;
  const double dt = detail::auto_dt(model, std::max(f_rabi, std::abs(f_mw - p.f_qubit_0)), o.dt);
  std::vector<TracePoint> out;
  out.reserve(delays.size());
  for (std::size_t i = 0; i < delays.size(); ++i) {
    const double span = make_ramsey_schedule(delays[i], f_mw, p, o.ramsey).total_duration();
    double ups = 0.0, pm = 0.0;
    for (std::size_t shot = 0; shot < o.n_shots; ++shot) {
      const std::uint64_t stream = i * o.n_shots + shot;
      const auto traj = detail::shot_trajectory(model, dt, span, derive_seed(o.seed, stream));
      Rng rng = make_stream(o.seed, stream);
      const auto v = ramsey_final_state(delays[i], f_mw, traj, p, o.ramsey);
      pm += readout_up_probability(v, p);
      if (sample_readout(v, p, rng) == Outcome::up) ups += 1.0;
    }
    const double n = static_cast<double>(o.n_shots);
    const double pu = ups / n;
    out.push_back({delays[i], pu, std::sqrt(std::max(pu * (1.0 - pu), 0.25 / n) / n), pm / n});
  }
  return out;
}

struct ChevronMap {
  std::vector<double> detunings;     // f_MW - f_qubit_0 [Hz]
  std::vector<double> durations;     // [s]
  std::vector<std::vector<double>> p_up;  // [detuning][duration]
};

inline ChevronMap simulate_chevron(std::span<const double> detuning_grid, std::span<const double> durations,
                                   const SpectrumModel& model, const DeviceParams& p, const RabiOptions& o) {
  ChevronMap map;
  map.detunings.assign(detuning_grid.begin(), detuning_grid.end());
  map.durations.assign(durations.begin(), durations.end());
  for (std::size_t i = 0; i < detuning_grid.size(); ++i) {
    RabiOptions row = o;
    row.seed = derive_seed(o.seed, 0xc4e7 + i);
    const auto trace = simulate_rabi_trace(durations, p.f_qubit_0 + detuning_grid[i], model, p, row);
    std::vector<double> line;
    line.reserve(trace.size());
    for (const auto& pt : trace) line.push_back(pt.p_up);
    map.p_up.push_back(std::move(line));
  }
  return map;
}

struct ChevronAxis {
  double axis = 0.0;   // fitted resonance position [Hz]
  double width = 0.0;  // Lorentzian half width ~ f_rabi [Hz]
  double axis_stderr = 0.0;
};

// The duration-averaged up probability of a Rabi row is
// base + amp * f_rabi^2 / (f_rabi^2 + (Delta - axis)^2); fit that profile.
inline ChevronAxis fit_chevron_axis(const ChevronMap& map) {
  const std::size_t n = map.detunings.size();
  if (n < 4) throw DomainError("fit_chevron_axis: need at least 4 detunings");
  std::vector<double> profile(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (double v : map.p_up[i]) acc += v;
    profile[i] = acc / static_cast<double>(map.p_up[i].size());
  }
  const auto imax = static_cast<std::size_t>(std::max_element(profile.begin(), profile.end()) - profile.begin());
  const double lo = *std::min_element(profile.begin(), profile.end());
  const double span = map.detunings.back() - map.detunings.front();
  // half-maximum width estimate
  std::size_t above = 0;
  for (double v : profile)
    if (v > lo + 0.5 * (profile[imax] - lo)) ++above;
  const double step = span / static_cast<double>(n - 1);
  Eigen::VectorXd x0(4);
  x0 << lo, profile[imax] - lo, map.detunings[imax], std::log(std::max(step, 0.5 * step * static_cast<double>(above)));
  auto fn = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r) {
    const double w = std::exp(q[3]);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = map.detunings[i] - q[2];
      r[static_cast<Eigen::Index>(i)] = q[0] + q[1] * w * w / (w * w + d * d) - profile[i];
    }
  };
  const auto res = detail::levenberg_marquardt(fn, x0, static_cast<Eigen::Index>(n));
  return {res.params[2], std::exp(res.params[3]), std::sqrt(std::abs(res.covariance(2, 2)))};
}

inline void write_trace_csv(std::ostream& os, std::span<const TracePoint> trace) {
  os << "t_s,P_up,stderr\n";
  os.precision(10);
  for (const auto& pt : trace) os << pt.t << ',' << pt.p_up << ',' << pt.stderr_ << '\n';
}

}  // namespace spinfb
