#pragma once

// Single-qubit randomized benchmarking over the 24-element Clifford group
// compiled into physical X / Y rotations.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <deque>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spinfb/coherence.hpp"
#include "spinfb/detail/rng.hpp"
#include "spinfb/dynamics.hpp"
#include "spinfb/errors.hpp"
#include "spinfb/noise.hpp"

namespace spinfb {

enum class Gate { I, X90, Xm90, X180, Y90, Ym90, Y180 };

inline constexpr std::array<Gate, 6> kGenerators{Gate::X90, Gate::Xm90, Gate::X180, Gate::Y90, Gate::Ym90, Gate::Y180};

inline const char* to_string(Gate g) {
  switch (g) {
    case Gate::I: return "I";
    case Gate::X90: return "X90";
    case Gate::Xm90: return "X-90";
    case Gate::X180: return "X180";
    case Gate::Y90: return "Y90";
    case Gate::Ym90: return "Y-90";
    case Gate::Y180: return "Y180";
  }
  return "?";
}

struct GateAxis {
  double phase = 0.0;  // drive phase: 0 -> +x, pi/2 -> +y
  double angle = 0.0;  // rotation angle [rad], >= 0
};

inline GateAxis gate_axis(Gate g) {
  constexpr double pi = std::numbers::pi;
  switch (g) {
    case Gate::I: return {0.0, 0.0};
    case Gate::X90: return {0.0, pi / 2};
    case Gate::Xm90: return {pi, pi / 2};
    case Gate::X180: return {0.0, pi};
    case Gate::Y90: return {pi / 2, pi / 2};
    case Gate::Ym90: return {3 * pi / 2, pi / 2};
    case Gate::Y180: return {pi / 2, pi};
  }
  return {};
}

using Mat3 = std::array<std::array<double, 3>, 3>;
using Mat2c = std::array<std::array<std::complex<double>, 2>, 2>;

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat2c mat2_mul(const Mat2c& a, const Mat2c& b) {
  Mat2c c{};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat3 identity3() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

// Right-handed rotation about (cos phase, sin phase, 0) by `angle`.
inline Mat3 rotation3(double phase, double angle) {
  const double nx = std::cos(phase), ny = std::sin(phase);
  const double c = std::cos(angle), s = std::sin(angle), k = 1.0 - c;
  return {{{c + nx * nx * k, nx * ny * k, ny * s},
           {nx * ny * k, c + ny * ny * k, -nx * s},
           {-ny * s, nx * s, c}}};
}

inline Mat2c rotation2(double phase, double angle) {
  const std::complex<double> i(0.0, 1.0);
  const double c = std::cos(angle / 2), s = std::sin(angle / 2);
  const std::complex<double> off = -i * s * std::exp(-i * phase);
  return {{{c, off}, {-i * s * std::exp(i * phase), c}}};
}

inline Mat3 gate_matrix(Gate g) {
  const auto a = gate_axis(g);
  return rotation3(a.phase, a.angle);
}

inline Mat2c gate_unitary(Gate g) {
  const auto a = gate_axis(g);
  return rotation2(a.phase, a.angle);
}

// SO(3) image of an SU(2) matrix: R_ij = tr(sigma_i U sigma_j U^dag) / 2.
inline Mat3 so3_from_su2(const Mat2c& u) {
  using C = std::complex<double>;
  const C i(0.0, 1.0);
  const std::array<Mat2c, 3> sig{{{{{0, 1}, {1, 0}}}, {{{0, -i}, {i, 0}}}, {{{1, 0}, {0, -1}}}}};
  Mat2c ud{};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) ud[a][b] = std::conj(u[b][a]);
  Mat3 r{};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const auto m = mat2_mul(mat2_mul(sig[a], u), mat2_mul(sig[b], ud));
      r[a][b] = 0.5 * (m[0][0] + m[1][1]).real();
    }
  return r;
}

inline bool same_matrix(const Mat3& a, const Mat3& b, double tol = 1e-9) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (std::abs(a[i][j] - b[i][j]) > tol) return false;
  return true;
}

// Equal up to a global phase.
inline bool same_unitary(const Mat2c& a, const Mat2c& b, double tol = 1e-10) {
  std::complex<double> overlap = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) overlap += std::conj(a[i][j]) * b[i][j];
  return std::abs(std::abs(overlap) - 2.0) < tol;
}

struct CliffordElement {
  int index = 0;
  std::vector<Gate> decomposition;  // applied left to right in time
  Mat3 matrix = identity3();        // Bloch-vector action of the whole decomposition
};

// The 24 single-qubit Cliffords with shortest generator words, found by
// breadth-first search over X/Y rotations by +-90 and 180 degrees. Identity
// carries the word {I}. Four elements (including the +-90 degree z rotations)
// have no word shorter than three generators; the mean length is 1.875.
class CliffordGroup {
 public:
  static const CliffordGroup& instance() {
    static const CliffordGroup g;
    return g;
  }

  std::size_t size() const { return elements_.size(); }
  const CliffordElement& operator[](std::size_t i) const { return elements_.at(i); }
  std::span<const CliffordElement> elements() const { return elements_; }

  // Index of c = "a then b" (matrix R_b R_a).
  int compose(int a, int b) const { return table_[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]; }
  int inverse(int a) const { return inverse_[static_cast<std::size_t>(a)]; }

  std::optional<int> find(const Mat3& m) const {
    for (const auto& e : elements_)
      if (same_matrix(e.matrix, m)) return e.index;
    return std::nullopt;
  }
  int index_of(Gate g) const { return *find(gate_matrix(g)); }

 private:
  CliffordGroup() {
    elements_.push_back({0, {Gate::I}, identity3()});
    std::deque<std::size_t> queue{0};
    while (!queue.empty() && elements_.size() < 24) {
      const std::size_t cur = queue.front();
      queue.pop_front();
      for (Gate g : kGenerators) {
        const Mat3 m = mat3_mul(gate_matrix(g), elements_[cur].matrix);
        if (find(m)) continue;
        CliffordElement e;
        e.index = static_cast<int>(elements_.size());
        e.decomposition = cur == 0 ? std::vector<Gate>{} : elements_[cur].decomposition;
        e.decomposition.push_back(g);
        e.matrix = m;
        elements_.push_back(e);
        queue.push_back(elements_.size() - 1);
      }
    }
    if (elements_.size() != 24) throw NumericalError("Clifford enumeration did not close at 24 elements");
    for (std::size_t a = 0; a < 24; ++a) {
      for (std::size_t b = 0; b < 24; ++b)
        table_[a][b] = *find(mat3_mul(elements_[b].matrix, elements_[a].matrix));
    }
    for (std::size_t a = 0; a < 24; ++a)
      for (std::size_t b = 0; b < 24; ++b)
        if (table_[a][b] == 0) inverse_[a] = static_cast<int>(b);
  }

  std::vector<CliffordElement> elements_;
  std::array<std::array<int, 24>, 24> table_{};
  std::array<int, 24> inverse_{};
};

inline Mat2c clifford_unitary(const CliffordElement& e) {
  Mat2c u{{{1, 0}, {0, 1}}};
  for (Gate g : e.decomposition) u = mat2_mul(gate_unitary(g), u);
  return u;
}

struct RBSequence {
  std::vector<int> cliffords;  // in time order, interleaved gates included
  std::vector<bool> inserted;  // true where the entry is the interleaved gate
  int recovery = 0;
};

// m uniformly random Cliffords (each followed by `interleaved` if given) plus
// the recovery Clifford that returns the ideal composition to identity.
inline RBSequence generate_rb_sequence(std::size_t m, std::uint64_t seed, std::optional<int> interleaved = std::nullopt,
                                       std::uint64_t stream = 0) {
  if (m < 1) throw DomainError("generate_rb_sequence: m must be >= 1");
  const auto& group = CliffordGroup::instance();
  if (interleaved && (*interleaved < 0 || *interleaved >= 24)) throw DomainError("generate_rb_sequence: bad gate index");
  Rng rng = make_stream(seed, stream);
  std::uniform_int_distribution<int> pick(0, 23);
  RBSequence s;
  int total = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const int c = pick(rng);
    s.cliffords.push_back(c);
    s.inserted.push_back(false);
    total = group.compose(total, c);
    if (interleaved) {
      s.cliffords.push_back(*interleaved);
      s.inserted.push_back(true);
      total = group.compose(total, *interleaved);
    }
  }
  s.recovery = group.inverse(total);
  return s;
}

enum class RBErrorKind { none, depolarizing_clifford, depolarizing_generator, over_rotation, trajectory };

struct RBErrorModel {
  RBErrorKind kind = RBErrorKind::none;
  double rate = 0.0;         // depolarizing probability (Bloch shrink 1 - rate)
  double epsilon = 0.0;      // fractional over-rotation of every generator
  // trajectory-driven gates
  SpectrumModel noise;
  DeviceParams device;
  double drive_amplitude = 20.0;
  double dt = 0.0;           // 0 = automatic
};

struct RBConfig {
  std::vector<std::size_t> lengths{1, 2, 4, 8, 16, 32, 64, 128};
  std::size_t n_sequences = 50;
  std::size_t n_shots = 100;  // per sequence; 0 = exact survival probability
  std::optional<int> interleaved;
  std::uint64_t seed = 1;
};

struct RBResult {
  std::vector<std::size_t> lengths;
  std::vector<double> mean_fidelity;
  std::vector<double> stderr_;
  std::size_t n_sequences = 0;
  DecayFit fit;
  double p = 0.0;
  double p_stderr = 0.0;
  double fidelity = 0.0;  // 1 - (1 - p) / 2
  double fidelity_stderr = 0.0;

  double normalized(std::size_t i) const { return (mean_fidelity[i] - fit.offset) / fit.amplitude; }
};

namespace detail {

inline BlochState apply3(const Mat3& r, const BlochState& v) {
  return {r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z, r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
          r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z};
}

inline BlochState scale(BlochState v, double s) { return {v.x * s, v.y * s, v.z * s}; }

inline double sequence_gate_time(const RBSequence& s, const RBErrorModel& e) {
  const auto& group = CliffordGroup::instance();
  double angle = 0.0;
  auto add = [&](int c) {
    for (Gate g : group[static_cast<std::size_t>(c)].decomposition) angle += gate_axis(g).angle;
  };
  for (int c : s.cliffords) add(c);
  add(s.recovery);
  return angle / (2.0 * std::numbers::pi * e.device.rabi_per_amplitude * e.drive_amplitude);
}

// Survival probability P(z = +1) of one noise realization.
inline double run_sequence(const RBSequence& s, const RBErrorModel& e, const NoiseTrajectory* traj) {
  const auto& group = CliffordGroup::instance();
  BlochState v;
  EvolutionCursor cur;
  cur.frame_frequency = e.device.f_qubit_0 + microwave_shift(e.device, e.drive_amplitude);
  const double f_rabi = e.device.rabi_per_amplitude * e.drive_amplitude;
  auto apply_clifford = [&](int c, bool inserted) {
    for (Gate g : group[static_cast<std::size_t>(c)].decomposition) {
      if (g == Gate::I) continue;
      const auto ax = gate_axis(g);
      switch (e.kind) {
        case RBErrorKind::trajectory:
          v = evolve(v, {SegmentKind::drive, cur.frame_frequency, e.drive_amplitude, ax.phase,
                         ax.angle / (2.0 * std::numbers::pi * f_rabi)},
                     *traj, e.device, cur);
          break;
        case RBErrorKind::over_rotation: v = apply3(rotation3(ax.phase, ax.angle * (1.0 + e.epsilon)), v); break;
        case RBErrorKind::depolarizing_generator: v = scale(apply3(gate_matrix(g), v), 1.0 - e.rate); break;
        default: v = apply3(gate_matrix(g), v); break;
      }
    }
    // an interleaved identity is no pulse at all; drawn identities still count
    // as Clifford slots so that the per-Clifford rate stays r on average
    if (e.kind == RBErrorKind::depolarizing_clifford && !(inserted && c == 0)) v = scale(v, 1.0 - e.rate);
  };
  for (std::size_t i = 0; i < s.cliffords.size(); ++i)
    apply_clifford(s.cliffords[i], i < s.inserted.size() && s.inserted[i]);
  apply_clifford(s.recovery, false);
  return std::clamp(0.5 * (1.0 + v.z), 0.0, 1.0);
}

}  // namespace detail

inline RBResult simulate_rb(const RBConfig& cfg, const RBErrorModel& err) {
  if (cfg.lengths.size() < 3) throw ConfigError("need at least 3 sequence lengths", "rb.lengths");
  if (cfg.n_sequences < 1) throw ConfigError("must be >= 1", "rb.n_sequences");
  const auto [mn, mx] = std::minmax_element(cfg.lengths.begin(), cfg.lengths.end());
  if (*mn < 1) throw ConfigError("lengths must be >= 1", "rb.lengths");
  if (static_cast<double>(*mx) < 10.0 * static_cast<double>(*mn))
    throw ConfigError("lengths must span at least one decade", "rb.lengths");
  if (err.kind == RBErrorKind::trajectory) err.device.validate();

  RBResult res;
  res.lengths = cfg.lengths;
  res.n_sequences = cfg.n_sequences;
  for (std::size_t li = 0; li < cfg.lengths.size(); ++li) {
    const std::size_t m = cfg.lengths[li];
    std::vector<double> fids;
    fids.reserve(cfg.n_sequences);
    for (std::size_t si = 0; si < cfg.n_sequences; ++si) {
      const std::uint64_t stream = li * 1000003ULL + si;
      const auto seq = generate_rb_sequence(m, cfg.seed, cfg.interleaved, stream);
      Rng rng = make_stream(derive_seed(cfg.seed, 0x5b), stream);
      double fid = 0.0;
      if (err.kind != RBErrorKind::trajectory) {
        // channel models are deterministic per sequence
        const double ps = detail::run_sequence(seq, err, nullptr);
        fid = cfg.n_shots == 0 ? ps
                               : static_cast<double>(std::binomial_distribution<std::size_t>(cfg.n_shots, ps)(rng)) /
                                     static_cast<double>(cfg.n_shots);
      } else {
        const double f_rabi = err.device.rabi_per_amplitude * err.drive_amplitude;
        const double dt = detail::auto_dt(err.noise, f_rabi, err.dt);
        const double span = detail::sequence_gate_time(seq, err);
        const std::size_t reps = cfg.n_shots == 0 ? 1 : cfg.n_shots;
        for (std::size_t shot = 0; shot < reps; ++shot) {
          const auto traj = detail::shot_trajectory(err.noise, dt, span, derive_seed(cfg.seed, stream * 65537ULL + shot));
          const double ps = detail::run_sequence(seq, err, &traj);
          if (cfg.n_shots == 0)
            fid += ps;
          else if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < ps)
            fid += 1.0;
        }
        fid /= static_cast<double>(reps);
      }
      fids.push_back(fid);
    }
    double mean = 0.0;
    for (double f : fids) mean += f;
    mean /= static_cast<double>(fids.size());
    double var = 0.0;
    for (double f : fids) var += (f - mean) * (f - mean);
    var = fids.size() > 1 ? var / static_cast<double>(fids.size() - 1) : 0.0;
    res.mean_fidelity.push_back(mean);
    res.stderr_.push_back(std::sqrt(var / static_cast<double>(fids.size())));
  }

  std::vector<double> m_axis(cfg.lengths.begin(), cfg.lengths.end());
  // all-ideal data is an exact constant; report p = 1 directly
  double spread = 0.0;
  for (double f : res.mean_fidelity) spread = std::max(spread, std::abs(f - res.mean_fidelity.front()));
  if (spread < 1e-12) {
    res.fit.kind = DecayKind::rb_exponential;
    res.fit.amplitude = res.mean_fidelity.front() - 0.5;
    res.fit.offset = 0.5;
    res.fit.timescale = std::numeric_limits<double>::infinity();
    res.p = 1.0;
  } else {
    FitOptions o;
    o.timescale_guess = 0.5 * static_cast<double>(*mx);
    try {
      res.fit = fit_decay(m_axis, res.mean_fidelity, DecayKind::rb_exponential, o);
    } catch (const FitError& e) {
      std::ostringstream raw;
      raw << e.diagnostics() << " raw=";
      for (std::size_t i = 0; i < m_axis.size(); ++i) raw << m_axis[i] << ':' << res.mean_fidelity[i] << ' ';
      throw FitError("simulate_rb: decay fit failed", raw.str());
    }
    res.p = std::clamp(res.fit.decay_constant(), 0.0, 1.0);
    res.p_stderr = std::isfinite(res.fit.timescale) ? res.fit.decay_constant_stderr() : 0.0;
  }
  res.fidelity = 1.0 - (1.0 - res.p) / 2.0;
  res.fidelity_stderr = res.p_stderr / 2.0;
  return res;
}

struct InterleavedResult {
  RBResult reference;
  RBResult interleaved;
  double gate_fidelity = 0.0;  // 1 - (1 - p_int / p_ref) / 2
  double gate_fidelity_stderr = 0.0;
};

inline InterleavedResult simulate_interleaved_rb(RBConfig cfg, const RBErrorModel& err, int gate) {
  InterleavedResult out;
  cfg.interleaved.reset();
  out.reference = simulate_rb(cfg, err);
  cfg.interleaved = gate;
  cfg.seed = derive_seed(cfg.seed, 0x1e);
  out.interleaved = simulate_rb(cfg, err);
  const double ratio = out.interleaved.p / out.reference.p;
  out.gate_fidelity = 1.0 - (1.0 - ratio) / 2.0;
  const double rel = std::hypot(out.interleaved.p_stderr / out.interleaved.p, out.reference.p_stderr / out.reference.p);
  out.gate_fidelity_stderr = 0.5 * ratio * rel;
  return out;
}

inline void write_rb_csv(std::ostream& os, const RBResult& r) {
  os << "m,mean_fidelity,stderr,n_sequences\n";
  os.precision(10);
  for (std::size_t i = 0; i < r.lengths.size(); ++i)
    os << r.lengths[i] << ',' << r.mean_fidelity[i] << ',' << r.stderr_[i] << ',' << r.n_sequences << '\n';
}

}  // namespace spinfb
