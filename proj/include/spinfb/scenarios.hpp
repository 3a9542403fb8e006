#pragma once

// Scenario runner behind the command-line tool. A scenario reads one
// key-value configuration, runs for each seed and writes CSVs, a matplotlib
// script and summary.json into the output directory.
//
//   [run]
//   scenario = rabi
//   seeds = 1 2 3
//   [acceptance]
//   q = 84.8 8 abs          # key = target tolerance rel|abs
//   t2star_gain = 10 min    # or: key = bound min|max

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "spinfb/benchmarking.hpp"
#include "spinfb/coherence.hpp"
#include "spinfb/config.hpp"
#include "spinfb/dynamics.hpp"
#include "spinfb/estimator.hpp"
#include "spinfb/noise.hpp"
#include "spinfb/stats.hpp"

namespace spinfb {

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"ramsey-free",       "feedback-ramsey", "latency-sweep",
                                              "chevron",           "shift-vs-amplitude", "rabi",
                                              "rb",                "rabi-spectroscopy", "residual-psd",
                                              "sec-compare"};
  return names;
}

struct AcceptanceBand {
  std::string key;
  double target = 0.0;
  double tol = 0.0;
  std::string mode = "abs";  // abs | rel | min | max

  bool check(double v) const {
    if (!std::isfinite(v)) return false;
    if (mode == "min") return v >= target;
    if (mode == "max") return v <= target;
    const double allowed = mode == "rel" ? tol * std::abs(target) : tol;
    return std::abs(v - target) <= allowed;
  }

  std::string describe() const {
    std::ostringstream os;
    os.precision(6);
    if (mode == "min") os << ">= " << target;
    else if (mode == "max") os << "<= " << target;
    else os << target << " +- " << tol << (mode == "rel" ? " (relative)" : "");
    return os.str();
  }
};

struct ScenarioConfig {
  std::string scenario;
  KeyValueConfig raw;
  DeviceParams device;
  SpectrumModel noise;
  EstimatorConfig estimator;
  std::vector<std::uint64_t> seeds{1};
  std::vector<AcceptanceBand> bands;
};

struct BandCheck {
  AcceptanceBand band;
  double value = std::numeric_limits<double>::quiet_NaN();
  bool found = false;
  bool pass = false;
};

struct ScenarioOutcome {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> results;
  std::vector<std::string> files;
  std::vector<BandCheck> checks;
  bool partial = false;
  std::string error;
  int error_kind = 0;  // 0 none, 2 configuration, 3 runtime

  bool passed() const {
    if (partial || error_kind != 0) return false;
    return std::all_of(checks.begin(), checks.end(), [](const BandCheck& c) { return c.pass; });
  }

  bool has(const std::string& key) const {
    return std::any_of(results.begin(), results.end(), [&](auto& r) { return r.first == key; });
  }

  double get(const std::string& key) const {
    for (const auto& [k, v] : results)
      if (k == key) return v;
    throw DomainError("scenario result '" + key + "' not produced");
  }
};

namespace detail {

// Collects results and files while a scenario runs so that a failure still
// leaves a usable partial summary.
class ScenarioRun {
 public:
  ScenarioRun(std::filesystem::path dir, ScenarioOutcome& out) : dir_(std::move(dir)), out_(out) {}

  void result(const std::string& key, double v) {
    for (auto& r : out_.results)
      if (r.first == key) {
        r.second = v;
        return;
      }
    out_.results.emplace_back(key, v);
  }

  void emit(const std::string& name, const std::function<void(std::ostream&)>& body) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    std::ofstream f(dir_ / name);
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
    body(f);
    out_.files.push_back(name);
  }

  void plot(const std::string& name, const std::string& script) {
    emit(name, [&](std::ostream& os) {
      os << "import numpy as np\nimport matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n\n"
         << script;
    });
  }

 private:
  std::filesystem::path dir_;
  ScenarioOutcome& out_;
};

inline std::vector<double> require_list(const KeyValueConfig& c, const std::string& section, const std::string& key,
                                        std::vector<double> fallback = {}) {
  auto v = c.get_list(section, key);
  if (!v) {
    if (fallback.empty()) throw ConfigError("required list is missing", section + "." + key);
    return fallback;
  }
  if (v->empty()) throw ConfigError("list is empty", section + "." + key);
  return *v;
}

inline double positive(const KeyValueConfig& c, const std::string& section, const std::string& key, double fallback) {
  const double v = c.get_double(section, key, fallback);
  if (!(v > 0.0)) throw ConfigError("must be > 0", section + "." + key);
  return v;
}

inline std::size_t at_least(const KeyValueConfig& c, const std::string& section, const std::string& key,
                            std::size_t fallback, std::size_t min) {
  const auto v = c.get_count(section, key, fallback);
  if (v < min) throw ConfigError("must be >= " + std::to_string(min), section + "." + key);
  return v;
}

inline void check_nyquist(const SpectrumModel& m, double dt, const std::string& field) {
  if (dt > 0.0 && 0.5 / dt < m.f_high * (1.0 - 1e-12)) {
    std::ostringstream os;
    os << "synthesis needs 1/(2 dt) >= f_high, got 1/(2 dt) = " << 0.5 / dt << " Hz below f_high = " << m.f_high
       << " Hz";
    throw ConfigError(os.str(), field);
  }
}

inline void check_rising_band(const std::vector<double>& v, const std::string& field) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] > v[i - 1])) throw ConfigError("values must be strictly increasing", field);
}

inline std::vector<TracePoint> as_trace(const std::vector<double>& t, const std::vector<double>& y) {
  std::vector<TracePoint> out;
  for (std::size_t i = 0; i < t.size(); ++i) out.push_back({t[i], y[i], 0.0, y[i]});
  return out;
}

inline void xy(const std::vector<TracePoint>& tr, std::vector<double>& t, std::vector<double>& y) {
  t.clear();
  y.clear();
  for (const auto& p : tr) {
    t.push_back(p.t);
    y.push_back(p.p_up);
  }
}

inline void fit_csv(std::ostream& os, std::initializer_list<const DecayFit*> fits) {
  write_fit_csv_header(os);
  for (const auto* f : fits) write_fit_csv_row(os, *f);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-scenario parameters

struct RamseyFreeParams {
  std::vector<double> delays;
  std::size_t n_shots = 1000;
  double detuning = 0.0;  // f_MW - f_qubit_0 [Hz]
  RamseyOptions pulses;
  double dt = 0.0;
};

inline RamseyFreeParams read_ramsey_free(const KeyValueConfig& c) {
  c.check_keys("ramsey", {"delays", "n_shots", "detuning", "amplitude", "compensation", "dt"});
  RamseyFreeParams p;
  p.delays = detail::require_list(c, "ramsey", "delays");
  p.n_shots = detail::at_least(c, "ramsey", "n_shots", p.n_shots, 1);
  p.detuning = c.get_double("ramsey", "detuning", p.detuning);
  p.pulses.drive_amplitude = detail::positive(c, "ramsey", "amplitude", p.pulses.drive_amplitude);
  p.pulses.off_resonant_compensation = c.get_bool("ramsey", "compensation", false);
  p.dt = c.get_double("ramsey", "dt", 0.0);
  if (p.delays.size() < 10) throw ConfigError("need at least 10 delays for a fit", "ramsey.delays");
  return p;
}

struct FeedbackRamseyParams {
  FeedbackOptions loop;
  std::vector<double> free_delays;
  std::size_t free_shots = 1000;
};

inline FeedbackRamseyParams read_feedback_ramsey(const KeyValueConfig& c) {
  c.check_keys("feedback_ramsey", {"free_delays", "free_shots"});
  FeedbackRamseyParams p;
  p.loop = read_feedback(c);
  if (p.loop.target_delays.size() < 10)
    throw ConfigError("feedback-ramsey needs >= 10 target delays", "feedback.target_delays");
  p.free_delays = detail::require_list(c, "feedback_ramsey", "free_delays");
  if (p.free_delays.size() < 10) throw ConfigError("need at least 10 delays", "feedback_ramsey.free_delays");
  p.free_shots = detail::at_least(c, "feedback_ramsey", "free_shots", p.free_shots, 1);
  return p;
}

struct LatencyParams {
  FeedbackOptions loop;
  std::vector<double> t_wait;
};

inline LatencyParams read_latency(const KeyValueConfig& c) {
  c.check_keys("latency", {"t_wait"});
  LatencyParams p;
  p.loop = read_feedback(c);
  p.t_wait = detail::require_list(c, "latency", "t_wait");
  if (p.t_wait.size() < 4) throw ConfigError("need at least 4 values to fit the latency law", "latency.t_wait");
  for (double v : p.t_wait)
    if (v < 0.0) throw ConfigError("values must be >= 0", "latency.t_wait");
  return p;
}

struct ChevronParams {
  std::vector<double> detunings;
  std::vector<double> durations;
  RabiOptions rabi;
};

inline ChevronParams read_chevron(const KeyValueConfig& c) {
  c.check_keys("chevron", {"detunings", "durations", "amplitude", "n_shots", "dt", "pre_burst"});
  ChevronParams p;
  p.detunings = detail::require_list(c, "chevron", "detunings");
  p.durations = detail::require_list(c, "chevron", "durations");
  detail::check_rising_band(p.detunings, "chevron.detunings");
  if (p.detunings.size() < 4) throw ConfigError("need at least 4 detunings", "chevron.detunings");
  p.rabi.amplitude = detail::positive(c, "chevron", "amplitude", p.rabi.amplitude);
  p.rabi.n_shots = detail::at_least(c, "chevron", "n_shots", p.rabi.n_shots, 1);
  p.rabi.dt = c.get_double("chevron", "dt", 0.0);
  p.rabi.off_resonant_pre_burst = c.get_bool("chevron", "pre_burst", false);
  return p;
}

struct ShiftParams {
  std::vector<double> amplitudes;
  std::vector<double> delays;
  double reference_detuning = 10e6;
  std::size_t n_shots = 200;
  double dt = 0.0;
};

inline ShiftParams read_shift(const KeyValueConfig& c) {
  c.check_keys("shift", {"amplitudes", "delays", "reference_detuning", "n_shots", "dt"});
  ShiftParams p;
  p.amplitudes = detail::require_list(c, "shift", "amplitudes");
  p.delays = detail::require_list(c, "shift", "delays");
  p.reference_detuning = detail::positive(c, "shift", "reference_detuning", p.reference_detuning);
  p.n_shots = detail::at_least(c, "shift", "n_shots", p.n_shots, 1);
  p.dt = c.get_double("shift", "dt", 0.0);
  if (p.amplitudes.size() < 3) throw ConfigError("need at least 3 amplitudes", "shift.amplitudes");
  for (double a : p.amplitudes)
    if (!(a > 0.0)) throw ConfigError("amplitudes must be > 0", "shift.amplitudes");
  if (p.delays.size() < 10) throw ConfigError("need at least 10 delays", "shift.delays");
  return p;
}

struct RabiParams {
  std::vector<double> durations;
  RabiOptions rabi;
  double detuning = 0.0;  // beyond the microwave shift [Hz]
  std::size_t batches = 10;  // independent shot batches for the jackknife error
};

inline RabiParams read_rabi(const KeyValueConfig& c) {
  c.check_keys("rabi", {"durations", "amplitude", "n_shots", "dt", "detuning", "pre_burst", "batches"});
  RabiParams p;
  p.durations = detail::require_list(c, "rabi", "durations");
  if (p.durations.size() < 10) throw ConfigError("need at least 10 durations", "rabi.durations");
  p.rabi.amplitude = detail::positive(c, "rabi", "amplitude", p.rabi.amplitude);
  p.rabi.n_shots = detail::at_least(c, "rabi", "n_shots", p.rabi.n_shots, 1);
  p.rabi.dt = c.get_double("rabi", "dt", 0.0);
  p.rabi.off_resonant_pre_burst = c.get_bool("rabi", "pre_burst", false);
  p.detuning = c.get_double("rabi", "detuning", 0.0);
  p.batches = detail::at_least(c, "rabi", "batches", p.batches, 2);
  if (p.batches > p.rabi.n_shots) throw ConfigError("must not exceed rabi.n_shots", "rabi.batches");
  return p;
}

struct RBParams {
  RBConfig config;
  RBErrorModel error;
  std::vector<std::string> interleave;
};

inline Gate parse_gate(const std::string& name, const std::string& field) {
  for (Gate g : {Gate::I, Gate::X90, Gate::Xm90, Gate::X180, Gate::Y90, Gate::Ym90, Gate::Y180})
    if (name == to_string(g)) return g;
  throw ConfigError("unknown gate '" + name + "' (use I, X90, Xm90, X180, Y90, Ym90, Y180)", field);
}

inline RBParams read_rb(const KeyValueConfig& c, const SpectrumModel& noise, const DeviceParams& device) {
  c.check_keys("rb", {"lengths", "n_sequences", "n_shots", "error", "rate", "epsilon", "drive_amplitude", "dt",
                      "interleave"});
  RBParams p;
  const auto lengths = detail::require_list(c, "rb", "lengths");
  p.config.lengths.clear();
  for (double m : lengths) {
    if (m < 1.0 || m != std::floor(m)) throw ConfigError("lengths must be positive integers", "rb.lengths");
    p.config.lengths.push_back(static_cast<std::size_t>(m));
  }
  if (p.config.lengths.size() < 3) throw ConfigError("need at least 3 sequence lengths", "rb.lengths");
  const auto [mn, mx] = std::minmax_element(p.config.lengths.begin(), p.config.lengths.end());
  if (*mx < 10 * *mn) throw ConfigError("lengths must span at least one decade", "rb.lengths");
  p.config.n_sequences = detail::at_least(c, "rb", "n_sequences", p.config.n_sequences, 1);
  p.config.n_shots = c.get_count("rb", "n_shots", p.config.n_shots);
  const auto kind = c.get_string("rb", "error", "depolarizing_clifford");
  if (kind == "none") p.error.kind = RBErrorKind::none;
  else if (kind == "depolarizing_clifford") p.error.kind = RBErrorKind::depolarizing_clifford;
  else if (kind == "depolarizing_generator") p.error.kind = RBErrorKind::depolarizing_generator;
  else if (kind == "over_rotation") p.error.kind = RBErrorKind::over_rotation;
  else if (kind == "trajectory") p.error.kind = RBErrorKind::trajectory;
  else throw ConfigError("unknown error model '" + kind + "'", "rb.error");
  p.error.rate = c.get_double("rb", "rate", 0.0);
  if (p.error.rate < 0.0 || p.error.rate > 1.0) throw ConfigError("must lie in [0, 1]", "rb.rate");
  p.error.epsilon = c.get_double("rb", "epsilon", 0.0);
  p.error.drive_amplitude = detail::positive(c, "rb", "drive_amplitude", p.error.drive_amplitude);
  p.error.dt = c.get_double("rb", "dt", 0.0);
  p.error.noise = noise;
  p.error.device = device;
  if (p.error.kind == RBErrorKind::trajectory) detail::check_nyquist(noise, p.error.dt, "rb.dt");
  if (const auto* e = c.find("rb", "interleave")) {
    for (const auto& g : KeyValueConfig::split(e->value)) {
      parse_gate(g, "rb.interleave");
      p.interleave.push_back(g);
    }
  }
  return p;
}

struct SpectroscopyParams {
  std::vector<double> rabi_frequencies;
  std::size_t n_shots = 1000;
  std::size_t points = 300;
  double bandwidth_factor = 10.0;  // noise synthesized up to this multiple of f_rabi
};

inline SpectroscopyParams read_spectroscopy_section(const KeyValueConfig& c, const std::string& section,
                                                    const std::set<std::string>& extra = {}) {
  std::set<std::string> keys{"rabi_frequencies", "n_shots", "points", "bandwidth_factor"};
  keys.insert(extra.begin(), extra.end());
  c.check_keys(section, keys);
  SpectroscopyParams p;
  p.rabi_frequencies = detail::require_list(c, section, "rabi_frequencies");
  for (double f : p.rabi_frequencies)
    if (!(f > 0.0)) throw ConfigError("values must be > 0", section + ".rabi_frequencies");
  p.n_shots = detail::at_least(c, section, "n_shots", p.n_shots, 1);
  p.points = detail::at_least(c, section, "points", p.points, 20);
  p.bandwidth_factor = c.get_double(section, "bandwidth_factor", p.bandwidth_factor);
  if (p.bandwidth_factor < 2.0) throw ConfigError("must be >= 2", section + ".bandwidth_factor");
  return p;
}

struct SecParams {
  SpectroscopyParams spectroscopy;
  double a_small = 0.6e6;  // two-sided S_L = A^2 / f [Hz]
  double a_large = 1.0e6;
  double rabi_scale = 1.0;  // f_rabi ratio large / small SEC at equal drive
  double t2star = 103.7e-9;
  double f_c = 500.0;
  double t_cal = 100e-9;
  double t_band = 2e-6;
};

inline SecParams read_sec(const KeyValueConfig& c) {
  SecParams p;
  p.spectroscopy =
      read_spectroscopy_section(c, "sec", {"a_small", "a_large", "rabi_scale", "t2star", "f_c", "t_cal", "t_band"});
  p.a_small = detail::positive(c, "sec", "a_small", p.a_small);
  p.a_large = detail::positive(c, "sec", "a_large", p.a_large);
  p.rabi_scale = detail::positive(c, "sec", "rabi_scale", p.rabi_scale);
  p.t2star = detail::positive(c, "sec", "t2star", p.t2star);
  p.f_c = detail::positive(c, "sec", "f_c", p.f_c);
  p.t_cal = detail::positive(c, "sec", "t_cal", p.t_cal);
  p.t_band = detail::positive(c, "sec", "t_band", p.t_band);
  if (p.f_c * p.t_cal >= 1.0) throw ConfigError("f_c * t_cal must be < 1", "sec.t_cal");
  if (p.f_c * p.t_band >= 1.0) throw ConfigError("f_c * t_band must be < 1", "sec.t_band");
  return p;
}

struct PsdParams {
  std::string mode = "direct";  // direct | feedback
  double dt = 0.0;
  std::size_t n = 1 << 16;
  std::size_t realizations = 20;
  std::size_t segment_len = 4096;
  std::vector<double> fit_band;   // [f_min, f_max] for the slope fit
  std::vector<double> peak_band;  // optional [f_min, f_max] for Larmor peak detection
  FeedbackOptions loop;
};

inline PsdParams read_psd(const KeyValueConfig& c, const SpectrumModel& noise) {
  c.check_keys("psd", {"mode", "dt", "n", "realizations", "segment_len", "fit_band", "peak_band"});
  PsdParams p;
  p.mode = c.get_string("psd", "mode", p.mode);
  if (p.mode != "direct" && p.mode != "feedback") throw ConfigError("must be 'direct' or 'feedback'", "psd.mode");
  p.segment_len = detail::at_least(c, "psd", "segment_len", p.segment_len, 16);
  if ((p.segment_len & (p.segment_len - 1)) != 0) throw ConfigError("must be a power of two", "psd.segment_len");
  p.fit_band = detail::require_list(c, "psd", "fit_band");
  if (p.fit_band.size() != 2 || !(p.fit_band[0] > 0.0) || !(p.fit_band[1] > p.fit_band[0]))
    throw ConfigError("expected 'f_min f_max' with 0 < f_min < f_max", "psd.fit_band");
  if (auto band = c.get_list("psd", "peak_band")) {
    p.peak_band = *band;
    if (p.peak_band.size() != 2 || !(p.peak_band[1] > p.peak_band[0]))
      throw ConfigError("expected 'f_min f_max'", "psd.peak_band");
  }
  if (p.mode == "direct") {
    p.dt = detail::positive(c, "psd", "dt", 0.5 / noise.f_high);
    detail::check_nyquist(noise, p.dt, "psd.dt");
    p.n = detail::at_least(c, "psd", "n", p.n, 2);
    if (p.n < p.segment_len) throw ConfigError("must be >= segment_len", "psd.n");
    p.realizations = detail::at_least(c, "psd", "realizations", p.realizations, 1);
  } else {
    p.loop = read_feedback(c);
    if (p.loop.n_cycles < p.segment_len) throw ConfigError("must be >= psd.segment_len", "feedback.n_cycles");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Configuration loading and validation

namespace detail {

inline const std::map<std::string, std::vector<std::string>>& scenario_sections() {
  static const std::map<std::string, std::vector<std::string>> m{
      {"ramsey-free", {"ramsey"}},
      {"feedback-ramsey", {"feedback", "feedback_ramsey"}},
      {"latency-sweep", {"feedback", "latency"}},
      {"chevron", {"chevron"}},
      {"shift-vs-amplitude", {"shift"}},
      {"rabi", {"rabi"}},
      {"rb", {"rb"}},
      {"rabi-spectroscopy", {"spectroscopy"}},
      {"residual-psd", {"psd", "feedback"}},
      {"sec-compare", {"sec"}},
  };
  return m;
}

// Section/key that --shots overrides.
inline std::pair<std::string, std::string> shot_key(const std::string& scenario) {
  static const std::map<std::string, std::pair<std::string, std::string>> m{
      {"ramsey-free", {"ramsey", "n_shots"}},
      {"feedback-ramsey", {"feedback_ramsey", "free_shots"}},
      {"latency-sweep", {"estimator", "n_shots"}},
      {"chevron", {"chevron", "n_shots"}},
      {"shift-vs-amplitude", {"shift", "n_shots"}},
      {"rabi", {"rabi", "n_shots"}},
      {"rb", {"rb", "n_shots"}},
      {"rabi-spectroscopy", {"spectroscopy", "n_shots"}},
      {"residual-psd", {"psd", "realizations"}},
      {"sec-compare", {"sec", "n_shots"}},
  };
  return m.at(scenario);
}

inline std::vector<AcceptanceBand> read_bands(const KeyValueConfig& c) {
  std::vector<AcceptanceBand> out;
  for (const auto& e : c.entries("acceptance")) {
    const auto tokens = KeyValueConfig::split(e.value);
    AcceptanceBand b;
    b.key = e.key;
    auto num = [&](const std::string& s) {
      return c.to_double({e.key, s, e.line}, "acceptance");
    };
    if (tokens.size() == 2 && (tokens[1] == "min" || tokens[1] == "max")) {
      b.target = num(tokens[0]);
      b.mode = tokens[1];
    } else if (tokens.size() == 3 && (tokens[2] == "abs" || tokens[2] == "rel")) {
      b.target = num(tokens[0]);
      b.tol = num(tokens[1]);
      b.mode = tokens[2];
      if (b.tol < 0.0) throw c.error(e, "acceptance", "tolerance must be >= 0");
    } else {
      throw c.error(e, "acceptance", "expected 'target tolerance abs|rel' or 'bound min|max'");
    }
    out.push_back(b);
  }
  return out;
}

}  // namespace detail

// Parses everything a scenario needs without running it. `scenario` may be
// empty when the configuration names it in [run].
inline ScenarioConfig load_scenario_config(const KeyValueConfig& raw, const std::string& scenario = {}) {
  ScenarioConfig sc;
  sc.raw = raw;
  raw.check_keys("run", {"scenario", "seeds"});
  const auto named = raw.get_string("run", "scenario", "");
  if (!scenario.empty() && !named.empty() && named != scenario)
    throw ConfigError("configuration is for '" + named + "', not '" + scenario + "'", "run.scenario");
  sc.scenario = scenario.empty() ? named : scenario;
  if (sc.scenario.empty()) throw ConfigError("no scenario given", "run.scenario");
  const auto& names = scenario_names();
  if (std::find(names.begin(), names.end(), sc.scenario) == names.end())
    throw ConfigError("unknown scenario '" + sc.scenario + "'", "run.scenario");

  std::set<std::string> allowed{"run", "acceptance", "device", "noise", "estimator"};
  for (const auto& s : detail::scenario_sections().at(sc.scenario)) allowed.insert(s);
  for (const auto& s : raw.section_names())
    if (!allowed.count(s)) throw ConfigError("section not used by scenario '" + sc.scenario + "'", s);

  if (raw.has("run", "seeds")) {
    const auto seeds = *raw.get_list("run", "seeds");
    if (seeds.empty()) throw ConfigError("seed list is empty", "run.seeds");
    sc.seeds.clear();
    for (double s : seeds) {
      if (s < 0.0 || s != std::floor(s)) throw ConfigError("seeds must be non-negative integers", "run.seeds");
      sc.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  sc.device = read_device(raw);
  sc.noise = read_noise(raw, sc.device);
  sc.estimator = read_estimator(raw, sc.device);
  sc.bands = detail::read_bands(raw);

  // scenario-specific sections, parsed for their errors only
  const auto& n = sc.scenario;
  if (n == "ramsey-free") detail::check_nyquist(sc.noise, read_ramsey_free(raw).dt, "ramsey.dt");
  else if (n == "feedback-ramsey") {
    const auto p = read_feedback_ramsey(raw);
    detail::check_nyquist(sc.noise, p.loop.traj_dt, "feedback.traj_dt");
  } else if (n == "latency-sweep") {
    const auto p = read_latency(raw);
    detail::check_nyquist(sc.noise, p.loop.traj_dt, "feedback.traj_dt");
  } else if (n == "chevron") detail::check_nyquist(sc.noise, read_chevron(raw).rabi.dt, "chevron.dt");
  else if (n == "shift-vs-amplitude") detail::check_nyquist(sc.noise, read_shift(raw).dt, "shift.dt");
  else if (n == "rabi") detail::check_nyquist(sc.noise, read_rabi(raw).rabi.dt, "rabi.dt");
  else if (n == "rb") read_rb(raw, sc.noise, sc.device);
  else if (n == "rabi-spectroscopy") read_spectroscopy_section(raw, "spectroscopy");
  else if (n == "residual-psd") {
    const auto p = read_psd(raw, sc.noise);
    if (p.mode == "feedback") detail::check_nyquist(sc.noise, p.loop.traj_dt, "feedback.traj_dt");
  } else if (n == "sec-compare") read_sec(raw);
  return sc;
}

inline ScenarioConfig load_scenario_config(const std::string& path, const std::string& scenario = {}) {
  return load_scenario_config(KeyValueConfig::load(path), scenario);
}

// Schema and invariant checks only; never runs a scenario. Returns an empty
// string when the file is valid, otherwise the error report.
inline std::string validate_config(const std::string& path, const std::string& scenario = {}) {
  try {
    load_scenario_config(path, scenario);
    return {};
  } catch (const ConfigError& e) {
    return e.what();
  } catch (const DomainError& e) {
    return e.what();
  }
}

inline void override_shots(ScenarioConfig& sc, std::size_t shots) {
  const auto [section, key] = detail::shot_key(sc.scenario);
  sc.raw.set(section, key, std::to_string(shots));
  sc = load_scenario_config(sc.raw, sc.scenario);
}

// ---------------------------------------------------------------------------
// Rabi spectroscopy

struct SpectroscopyPoint {
  double f_rabi = 0.0;       // nominal [Hz]
  double f_fit = 0.0;        // fitted oscillation frequency [Hz]
  double t2_rabi = 0.0;      // fitted exponential time [s]
  double sigma = 0.0;        // static sigma divided out [Hz]
  double s_extracted = 0.0;  // two-sided [Hz^2/Hz]
  double s_model = 0.0;      // two-sided model value [Hz^2/Hz]
  double error_db = 0.0;
};

// One zero-detuning Rabi trace per frequency, fitted and inverted. The burst
// window is four expected decay times (at least 10 periods). Noise above
// bandwidth_factor * f_rabi is dropped from the per-point model: it averages
// out within one integration step. The static sigma divided out is the model
// power below 1/T_fit, the part that stays frozen over the decay.
inline std::vector<SpectroscopyPoint> run_spectroscopy(const SpectrumModel& m, const DeviceParams& p,
                                                       const SpectroscopyParams& sp, std::uint64_t seed) {
  std::vector<SpectroscopyPoint> out;
  for (std::size_t i = 0; i < sp.rabi_frequencies.size(); ++i) {
    const double f = sp.rabi_frequencies[i];
    SpectrumModel local = m;
    local.f_high = std::min(m.f_high, sp.bandwidth_factor * f);
    if (!(local.f_high > local.f_low)) throw ConfigError("f_rabi below the noise band", "noise.f_low");
    const double s_model = 0.5 * in_band_density(m, f);
    const double rate = 0.75 * p.gamma1 + std::numbers::pi * std::numbers::pi * s_model;
    const double t_max = std::max(rate > 0.0 ? 4.0 / rate : 0.0, 10.0 / f);
    std::vector<double> durations(sp.points);
    for (std::size_t k = 0; k < sp.points; ++k) durations[k] = t_max * static_cast<double>(k) / static_cast<double>(sp.points);
    RabiOptions o;
    o.amplitude = f / p.rabi_per_amplitude;
    o.n_shots = sp.n_shots;
    o.seed = derive_seed(seed, 0x5bec + i);
    o.dt = 1.0 / (2.0 * local.f_high);
    const double f_mw = p.f_qubit_0 + microwave_shift(p, o.amplitude);
    const auto trace = simulate_rabi_trace(durations, f_mw, local, p, o);
    std::vector<double> t, y;
    detail::xy(trace, t, y);
    FitOptions fo;
    fo.frequency_guess = f;
    const auto fit = fit_decay(t, y, DecayKind::exponential, fo);
    SpectroscopyPoint pt;
    pt.f_rabi = f;
    pt.f_fit = fit.frequency;
    pt.t2_rabi = fit.timescale;
    pt.sigma = std::sqrt(static_variance(local, 1.0 / fit.timescale));
    pt.s_extracted = extract_S_at_frabi(fit, pt.sigma, p.gamma1);
    pt.s_model = s_model;
    pt.error_db = pt.s_model > 0.0 && pt.s_extracted > 0.0 ? 10.0 * std::log10(pt.s_extracted / pt.s_model)
                                                            : std::numeric_limits<double>::infinity();
    out.push_back(pt);
  }
  return out;
}

inline void write_spectroscopy_points(std::ostream& os, const std::vector<SpectroscopyPoint>& pts) {
  os << "f_rabi_Hz,S_Hz2_per_Hz,S_model_Hz2_per_Hz,T2_rabi_s,sigma_static_Hz,error_dB\n";
  os.precision(10);
  for (const auto& p : pts)
    os << p.f_rabi << ',' << p.s_extracted << ',' << p.s_model << ',' << p.t2_rabi << ',' << p.sigma << ','
       << p.error_db << '\n';
}

// ---------------------------------------------------------------------------
// Scenarios

namespace detail {

inline DecayFit fit_ramsey(const std::vector<TracePoint>& tr, double detuning) {
  std::vector<double> t, y;
  xy(tr, t, y);
  FitOptions o;
  o.oscillating = detuning != 0.0;
  o.frequency_guess = std::abs(detuning);
  return fit_decay(t, y, DecayKind::gaussian, o);
}

inline void run_ramsey_free(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto p = read_ramsey_free(sc.raw);
  RamseyTraceOptions o;
  o.ramsey = p.pulses;
  o.n_shots = p.n_shots;
  o.seed = seed;
  o.dt = p.dt;
  const auto trace = simulate_ramsey_trace(p.delays, sc.device.f_qubit_0 + p.detuning, sc.noise, sc.device, o);
  run.emit("ramsey.csv", [&](std::ostream& os) { write_trace_csv(os, trace); });
  const auto fit = fit_ramsey(trace, p.detuning);
  run.emit("fit.csv", [&](std::ostream& os) { fit_csv(os, {&fit}); });
  run.result("t2star_s", fit.timescale);
  run.result("t2star_stderr_s", fit.timescale_stderr);
  run.result("t2star_model_s", t2star_from_sigma(std::sqrt(total_variance(sc.noise))));
  run.plot("plot_ramsey.py",
           "d = np.genfromtxt('ramsey.csv', delimiter=',', names=True)\n"
           "f = np.genfromtxt('fit.csv', delimiter=',', names=True, dtype=None, encoding=None)\n"
           "plt.errorbar(d['t_s'] * 1e9, d['P_up'], d['stderr'], fmt='.', label='simulated')\n"
           "plt.xlabel('t_R (ns)'); plt.ylabel('up-spin probability')\n"
           "plt.title('free Ramsey, T2* = %.1f ns' % (float(f['timescale_s']) * 1e9))\n"
           "plt.savefig('ramsey.png', dpi=150)\n");
}

inline void run_feedback_ramsey(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  auto p = read_feedback_ramsey(sc.raw);
  p.loop.seed = seed;
  const auto fed = run_feedback_loop(sc.noise, sc.device, sc.estimator, p.loop);
  run.emit("history.csv", [&](std::ostream& os) { write_history_csv(os, fed.history); });
  run.emit("ramsey_feedback.csv", [&](std::ostream& os) { write_trace_csv(os, fed.target_trace); });
  const double floor = std::sqrt(fed.quantization_floor2);
  run.result("sigma_residual_Hz", std::sqrt(fed.sigma2));
  run.result("grid_floor_Hz", floor);
  run.result("sigma_over_floor", std::sqrt(fed.sigma2) / floor);
  run.result("latency_s", fed.timing.latency());
  const auto fit_fed = fit_ramsey(fed.target_trace, p.loop.target_detuning);
  run.result("t2star_feedback_s", fit_fed.timescale);

  // free-running reference: independent realizations per shot, i.e. averaged
  // over the whole noise history
  RamseyTraceOptions o;
  o.ramsey = p.loop.target_pulses;
  o.n_shots = p.free_shots;
  o.seed = derive_seed(seed, 0xf4ee);
  const auto free = simulate_ramsey_trace(p.free_delays, sc.device.f_qubit_0 + p.loop.target_detuning, sc.noise,
                                          sc.device, o);
  run.emit("ramsey_free.csv", [&](std::ostream& os) { write_trace_csv(os, free); });
  const auto fit_free = fit_ramsey(free, p.loop.target_detuning);
  run.emit("fit.csv", [&](std::ostream& os) { fit_csv(os, {&fit_free, &fit_fed}); });
  run.result("t2star_free_s", fit_free.timescale);
  run.result("t2star_gain", fit_fed.timescale / fit_free.timescale);
  run.result("t2star_residual_s", t2star_from_sigma(std::sqrt(fed.sigma2)));
  run.plot("plot_feedback_ramsey.py",
           "a = np.genfromtxt('ramsey_free.csv', delimiter=',', names=True)\n"
           "b = np.genfromtxt('ramsey_feedback.csv', delimiter=',', names=True)\n"
           "fig, ax = plt.subplots(2, 1)\n"
           "ax[0].plot(a['t_s'] * 1e9, a['P_up'], '.-'); ax[0].set_title('feedback off')\n"
           "ax[1].plot(b['t_s'] * 1e9, b['P_up'], '.-'); ax[1].set_title('feedback on')\n"
           "ax[1].set_xlabel('t_R (ns)')\n"
           "fig.tight_layout(); fig.savefig('feedback_ramsey.png', dpi=150)\n"
           "h = np.genfromtxt('history.csv', delimiter=',', names=True)\n"
           "plt.figure(); plt.hist(h['residual_Hz'] / 1e6, 40)\n"
           "plt.xlabel('residual (MHz)'); plt.savefig('residual_histogram.png', dpi=150)\n");
}

inline void run_latency(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  auto p = read_latency(sc.raw);
  p.loop.seed = seed;
  const auto sweep = latency_sweep(sc.noise, sc.device, sc.estimator, p.t_wait, p.loop);
  run.emit("sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, sweep.points); });
  run.result("alpha", sweep.fit.alpha);
  run.result("alpha_stderr", sweep.fit.alpha_stderr);
  run.result("floor_Hz", sweep.fit.floor);
  run.result("D_Hz2_per_s_alpha", sweep.fit.d);
  const auto last = std::max_element(sweep.points.begin(), sweep.points.end(),
                                     [](auto& a, auto& b) { return a.delta_t < b.delta_t; });
  run.result("sigma2_ratio_last", last->sigma2 / last->sigma_b2);
  std::ostringstream fit;
  fit.precision(10);
  fit << "D, alpha, floor = " << sweep.fit.d << ", " << sweep.fit.alpha << ", " << sweep.fit.floor << "\n";
  run.plot("plot_latency.py",
           "d = np.genfromtxt('sweep.csv', delimiter=',', names=True)\n" + fit.str() +
               "x = np.logspace(np.log10(d['delta_t_s'].min()), np.log10(d['delta_t_s'].max()), 100)\n"
               "plt.loglog(d['delta_t_s'], d['sigma2_Hz2'] / 1e12, 'o', label='sigma^2')\n"
               "plt.loglog(d['delta_t_s'], d['sigmaB2_Hz2'] / 1e12, 's', label='sigma_B^2')\n"
               "plt.loglog(x, (D * x**alpha + floor**2) / 1e12, '-', label='fit')\n"
               "plt.xlabel('latency (s)'); plt.ylabel('MHz^2'); plt.legend()\n"
               "plt.savefig('latency.png', dpi=150)\n");
}

inline void run_chevron_scenario(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  auto p = read_chevron(sc.raw);
  p.rabi.seed = seed;
  const auto map = simulate_chevron(p.detunings, p.durations, sc.noise, sc.device, p.rabi);
  run.emit("chevron.csv", [&](std::ostream& os) {
    os << "detuning_Hz,t_s,P_up\n";
    os.precision(10);
    for (std::size_t i = 0; i < map.detunings.size(); ++i)
      for (std::size_t j = 0; j < map.durations.size(); ++j)
        os << map.detunings[i] << ',' << map.durations[j] << ',' << map.p_up[i][j] << '\n';
  });
  const auto axis = fit_chevron_axis(map);
  const double expected = microwave_shift(sc.device, p.rabi.amplitude);
  const double step = (p.detunings.back() - p.detunings.front()) / static_cast<double>(p.detunings.size() - 1);
  run.result("axis_Hz", axis.axis);
  run.result("axis_stderr_Hz", axis.axis_stderr);
  run.result("expected_axis_Hz", expected);
  run.result("axis_error_Hz", axis.axis - expected);
  run.result("axis_error_steps", (axis.axis - expected) / step);
  run.plot("plot_chevron.py",
           "d = np.genfromtxt('chevron.csv', delimiter=',', names=True)\n"
           "det = np.unique(d['detuning_Hz']); t = np.unique(d['t_s'])\n"
           "z = d['P_up'].reshape(len(det), len(t))\n"
           "plt.pcolormesh(t * 1e9, det / 1e6, z, shading='auto')\n"
           "plt.xlabel('burst time (ns)'); plt.ylabel('detuning (MHz)'); plt.colorbar(label='P_up')\n"
           "plt.savefig('chevron.png', dpi=150)\n");
}

inline void run_shift(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto p = read_shift(sc.raw);
  std::vector<double> amps, shifts, errs;
  for (std::size_t i = 0; i < p.amplitudes.size(); ++i) {
    RamseyTraceOptions o;
    o.ramsey.drive_amplitude = p.amplitudes[i];
    o.ramsey.off_resonant_compensation = true;
    o.n_shots = p.n_shots;
    o.seed = derive_seed(seed, 0x5f17 + i);
    o.dt = p.dt;
    const auto trace = simulate_ramsey_trace(p.delays, sc.device.f_qubit_0 + p.reference_detuning, sc.noise,
                                             sc.device, o);
    std::vector<double> t, y;
    xy(trace, t, y);
    FitOptions fo;
    fo.frequency_guess = p.reference_detuning - microwave_shift(sc.device, p.amplitudes[i]);
    if (!(fo.frequency_guess > 0.0)) fo.frequency_guess = 0.0;
    // fringes at |reference_detuning - shift|; shifts above the reference alias
    const auto fit = fit_decay(t, y, DecayKind::gaussian, fo);
    const double shift = p.reference_detuning - fit.frequency;
    if (shift >= p.reference_detuning) warn("shift-vs-amplitude: shift reaches the reference detuning");
    amps.push_back(p.amplitudes[i]);
    shifts.push_back(shift);
    errs.push_back(fit.frequency_stderr);
  }
  run.emit("shift.csv", [&](std::ostream& os) {
    os << "amplitude,shift_Hz,stderr_Hz\n";
    os.precision(10);
    for (std::size_t i = 0; i < amps.size(); ++i) os << amps[i] << ',' << shifts[i] << ',' << errs[i] << '\n';
  });
  for (double s : shifts)
    if (!(s > 0.0)) throw NumericalError("shift-vs-amplitude: non-positive shift; cannot fit a power law");
  const auto fit = log_log_fit(amps, shifts);
  run.result("exponent", fit.slope);
  run.result("exponent_stderr", fit.slope_stderr);
  run.result("coefficient_Hz", std::exp(fit.intercept));
  run.plot("plot_shift.py",
           "d = np.genfromtxt('shift.csv', delimiter=',', names=True)\n"
           "plt.errorbar(d['amplitude'], d['shift_Hz'] / 1e6, d['stderr_Hz'] / 1e6, fmt='o')\n"
           "plt.xscale('log'); plt.yscale('log')\n"
           "plt.xlabel('microwave amplitude'); plt.ylabel('frequency shift (MHz)')\n"
           "plt.savefig('shift.png', dpi=150)\n");
}

// Shot-weighted mean of traces over the same durations, leaving out `skip`.
inline std::vector<TracePoint> pool_traces(const std::vector<std::vector<TracePoint>>& parts,
                                           const std::vector<std::size_t>& shots, std::size_t skip = SIZE_MAX) {
  std::vector<TracePoint> out(parts.front().size());
  double total = 0.0;
  for (std::size_t b = 0; b < parts.size(); ++b) {
    if (b == skip) continue;
    const double w = static_cast<double>(shots[b]);
    total += w;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].t = parts[b][i].t;
      out[i].p_up += w * parts[b][i].p_up;
      out[i].p_mean += w * parts[b][i].p_mean;
    }
  }
  for (auto& pt : out) {
    pt.p_up /= total;
    pt.p_mean /= total;
    pt.stderr_ = std::sqrt(std::max(pt.p_up * (1.0 - pt.p_up), 0.25 / total) / total);
  }
  return out;
}

// Each simulated shot follows one noise realization through every duration,
// so Monte-Carlo errors are correlated along the trace and the fit covariance
// understates them. The shots are therefore split into independent batches
// and Q gets a leave-one-batch-out jackknife error as well.
inline void run_rabi_scenario(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto p = read_rabi(sc.raw);
  const double f_rabi = sc.device.rabi_per_amplitude * p.rabi.amplitude;
  const double f_mw = sc.device.f_qubit_0 + microwave_shift(sc.device, p.rabi.amplitude) + p.detuning;
  std::vector<std::vector<TracePoint>> parts;
  std::vector<std::size_t> shots;
  for (std::size_t b = 0; b < p.batches; ++b) {
    RabiOptions o = p.rabi;
    o.n_shots = p.rabi.n_shots / p.batches + (b < p.rabi.n_shots % p.batches ? 1 : 0);
    o.seed = derive_seed(seed, b);
    parts.push_back(simulate_rabi_trace(p.durations, f_mw, sc.noise, sc.device, o));
    shots.push_back(o.n_shots);
  }
  const auto trace = pool_traces(parts, shots);
  run.emit("rabi.csv", [&](std::ostream& os) { write_trace_csv(os, trace); });
  FitOptions fo;
  fo.frequency_guess = std::hypot(f_rabi, p.detuning);
  auto fit_of = [&](const std::vector<TracePoint>& tr) {
    std::vector<double> t, y;
    xy(tr, t, y);
    return fit_decay(t, y, DecayKind::exponential, fo);
  };
  const auto fit = fit_of(trace);
  std::vector<double> loo;
  for (std::size_t b = 0; b < p.batches; ++b) {
    const auto f = fit_of(pool_traces(parts, shots, b));
    loo.push_back(2.0 * f.frequency * f.timescale);
  }
  const double nb = static_cast<double>(p.batches);
  run.result("q_stderr_jackknife", std::sqrt((nb - 1.0) * variance(loo) * (nb - 1.0) / nb));
  run.emit("fit.csv", [&](std::ostream& os) { fit_csv(os, {&fit}); });
  const auto q = quality_factor(fit.frequency, fit.timescale, fit.frequency_stderr, fit.timescale_stderr);
  run.result("f_rabi_Hz", fit.frequency);
  run.result("f_rabi_stderr_Hz", fit.frequency_stderr);
  run.result("t2_rabi_s", fit.timescale);
  run.result("t2_rabi_stderr_s", fit.timescale_stderr);
  run.result("q", q.q);
  run.result("q_stderr", q.q_stderr);
  run.result("pi_fidelity", pi_gate_fidelity(q.q));
  const double s_two = 0.5 * in_band_density(sc.noise, f_rabi);
  const double rate = 0.75 * sc.device.gamma1 + std::numbers::pi * std::numbers::pi * s_two;
  run.result("t2_rabi_predicted_s", rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity());
  run.result("s_extracted_Hz2_per_Hz", spectral_density_from_rate(1.0 / fit.timescale, sc.device.gamma1));
  run.plot("plot_rabi.py",
           "d = np.genfromtxt('rabi.csv', delimiter=',', names=True)\n"
           "plt.plot(d['t_s'] * 1e9, d['P_up'], '.-')\n"
           "plt.xlabel('burst time (ns)'); plt.ylabel('up-spin probability')\n"
           "plt.savefig('rabi.png', dpi=150)\n");
}

inline void run_rb_scenario(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  auto p = read_rb(sc.raw, sc.noise, sc.device);
  p.config.seed = seed;
  const auto ref = simulate_rb(p.config, p.error);
  run.emit("rb_reference.csv", [&](std::ostream& os) { write_rb_csv(os, ref); });
  run.result("p", ref.p);
  run.result("p_stderr", ref.p_stderr);
  run.result("fidelity", ref.fidelity);
  run.result("fidelity_stderr", ref.fidelity_stderr);
  std::vector<std::pair<std::string, RBResult>> inter;
  for (const auto& name : p.interleave) {
    const int idx = CliffordGroup::instance().index_of(parse_gate(name, "rb.interleave"));
    RBConfig cfg = p.config;
    cfg.interleaved = idx;
    cfg.seed = derive_seed(seed, 0x1e);
    const auto r = simulate_rb(cfg, p.error);
    const double ratio = r.p / ref.p;
    const double rel = std::hypot(r.p_stderr / r.p, ref.p_stderr / ref.p);
    run.emit("rb_" + name + ".csv", [&](std::ostream& os) { write_rb_csv(os, r); });
    run.result("p_" + name, r.p);
    run.result("fidelity_" + name, 1.0 - (1.0 - ratio) / 2.0);
    run.result("fidelity_" + name + "_stderr", 0.5 * ratio * rel);
    inter.emplace_back(name, r);
  }
  run.emit("rb_fit.csv", [&](std::ostream& os) {
    os << "sequence,A,B,p,p_stderr\n";
    os.precision(10);
    os << "reference," << ref.fit.amplitude << ',' << ref.fit.offset << ',' << ref.p << ',' << ref.p_stderr << '\n';
    for (const auto& [name, r] : inter)
      os << name << ',' << r.fit.amplitude << ',' << r.fit.offset << ',' << r.p << ',' << r.p_stderr << '\n';
  });
  std::string names = "['reference'";
  for (const auto& n : p.interleave) names += ", '" + n + "'";
  names += "]";
  run.plot("plot_rb.py",
           "fits = np.genfromtxt('rb_fit.csv', delimiter=',', names=True, dtype=None, encoding=None)\n"
           "for k, name in enumerate(" + names + "):\n"
           "    d = np.genfromtxt('rb_%s.csv' % name, delimiter=',', names=True)\n"
           "    f = fits[k]\n"
           "    norm = (d['mean_fidelity'] - f['B']) / f['A']\n"
           "    plt.semilogx(d['m'], norm + k, 'o', label=name)\n"
           "plt.xlabel('number of Cliffords'); plt.ylabel('normalized sequence fidelity (offset)')\n"
           "plt.legend(); plt.savefig('rb.png', dpi=150)\n");
}

inline double spectroscopy_results(ScenarioRun& run, const std::vector<SpectroscopyPoint>& pts, const std::string& tag) {
  std::vector<double> f, s;
  double worst = 0.0;
  for (const auto& p : pts) {
    f.push_back(p.f_rabi);
    s.push_back(std::max(p.s_extracted, 1e-300));
    worst = std::max(worst, std::abs(p.error_db));
  }
  const double a = fit_inverse_f_amplitude(f, s);
  run.result("A" + tag + "_Hz", a);
  run.result("max_abs_error_dB" + tag, worst);
  return a;
}

inline void run_spectroscopy_scenario(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto p = read_spectroscopy_section(sc.raw, "spectroscopy");
  const auto pts = run_spectroscopy(sc.noise, sc.device, p, seed);
  run.emit("spectroscopy.csv", [&](std::ostream& os) { write_spectroscopy_points(os, pts); });
  spectroscopy_results(run, pts, "");
  for (std::size_t i = 0; i < pts.size(); ++i) run.result("error_dB_" + std::to_string(i), pts[i].error_db);
  run.plot("plot_spectroscopy.py",
           "d = np.genfromtxt('spectroscopy.csv', delimiter=',', names=True)\n"
           "plt.loglog(d['f_rabi_Hz'] / 1e6, d['S_Hz2_per_Hz'], 'o', label='extracted')\n"
           "plt.loglog(d['f_rabi_Hz'] / 1e6, d['S_model_Hz2_per_Hz'], '-', label='model')\n"
           "plt.xlabel('f_rabi (MHz)'); plt.ylabel('S (Hz^2/Hz)'); plt.legend()\n"
           "plt.savefig('spectroscopy.png', dpi=150)\n");
}

inline void run_sec(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto p = read_sec(sc.raw);
  SpectrumModel small = sc.noise, large = sc.noise;
  small.power_laws.push_back({p.a_small * std::numbers::sqrt2, 1.0});
  large.power_laws.push_back({p.a_large * std::numbers::sqrt2, 1.0});
  SpectroscopyParams sp_large = p.spectroscopy;
  for (double& f : sp_large.rabi_frequencies) f *= p.rabi_scale;
  const auto pts_small = run_spectroscopy(small, sc.device, p.spectroscopy, seed);
  run.emit("spectroscopy_small.csv", [&](std::ostream& os) { write_spectroscopy_points(os, pts_small); });
  const double a_small = spectroscopy_results(run, pts_small, "_small");
  const auto pts_large = run_spectroscopy(large, sc.device, sp_large, derive_seed(seed, 0x5ec));
  run.emit("spectroscopy_large.csv", [&](std::ostream& os) { write_spectroscopy_points(os, pts_large); });
  const double a_large = spectroscopy_results(run, pts_large, "_large");
  run.result("A_ratio", a_large / a_small);
  const double a_cal = calibrate_A_from_t2star(p.t2star, p.f_c, p.t_cal);
  run.result("A_from_t2star_Hz", a_cal);
  run.result("sigma2_band_Hz2", sigma2_band(a_cal, p.f_c, p.t_band));
  run.plot("plot_sec.py",
           "for name in ['small', 'large']:\n"
           "    d = np.genfromtxt('spectroscopy_%s.csv' % name, delimiter=',', names=True)\n"
           "    plt.loglog(d['f_rabi_Hz'] / 1e6, d['S_Hz2_per_Hz'], 'o', label=name + ' SEC')\n"
           "    plt.loglog(d['f_rabi_Hz'] / 1e6, d['S_model_Hz2_per_Hz'], '-')\n"
           "plt.xlabel('f_rabi (MHz)'); plt.ylabel('S (Hz^2/Hz)'); plt.legend()\n"
           "plt.savefig('sec.png', dpi=150)\n");
}


inline double psd_slope(const PsdEstimate& psd, const std::vector<double>& band, double* stderr_ = nullptr) {
  std::vector<double> f, s;
  for (std::size_t k = 1; k < psd.frequency.size(); ++k)
    if (psd.frequency[k] >= band[0] && psd.frequency[k] <= band[1] && psd.density[k] > 0.0) {
      f.push_back(psd.frequency[k]);
      s.push_back(psd.density[k]);
    }
  if (f.size() < 3) throw NumericalError("residual-psd: fewer than 3 periodogram bins inside psd.fit_band");
  const auto fit = log_log_fit(f, s);
  if (stderr_) *stderr_ = fit.slope_stderr;
  return fit.slope;
}

inline void average_into(PsdEstimate& acc, const PsdEstimate& next, std::size_t count) {
  if (count == 0) {
    acc = next;
    return;
  }
  const double w = 1.0 / static_cast<double>(count + 1);
  for (std::size_t k = 0; k < acc.density.size(); ++k) acc.density[k] += w * (next.density[k] - acc.density[k]);
  acc.segments += next.segments;
}

inline void run_residual_psd(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  auto p = read_psd(sc.raw, sc.noise);
  std::string plot;
  if (p.mode == "direct") {
    PsdEstimate psd;
    for (std::size_t r = 0; r < p.realizations; ++r) {
      const auto traj = synthesize_trajectory(sc.noise, p.dt, p.n, derive_seed(seed, r), "psd");
      average_into(psd, estimate_psd(traj, p.segment_len), r);
    }
    std::vector<double> model(psd.frequency.size());
    for (std::size_t k = 1; k < model.size(); ++k) model[k] = psd_eval(sc.noise, psd.frequency[k]);
    run.emit("psd.csv", [&](std::ostream& os) {
      os << "f_Hz,S_Hz2_per_Hz,S_model_Hz2_per_Hz\n";
      os.precision(10);
      for (std::size_t k = 1; k < model.size(); ++k)
        os << psd.frequency[k] << ',' << psd.density[k] << ',' << model[k] << '\n';
    });
    double err = 0.0;
    run.result("slope", psd_slope(psd, p.fit_band, &err));
    run.result("slope_stderr", err);
    run.result("bin_Hz", psd.df);
    if (!p.peak_band.empty()) {
      const auto larmor = derive_larmor_frequencies(sc.device.b_total());
      const auto found = find_spectral_peaks(psd, p.peak_band[0], p.peak_band[1]);
      std::size_t matched = 0;
      double worst = 0.0;
      for (double f : larmor) {
        double best = std::numeric_limits<double>::infinity();
        for (auto i : found) best = std::min(best, std::abs(psd.frequency[i] - f) / psd.df);
        if (best <= 1.0) ++matched;
        worst = std::max(worst, best);
      }
      run.result("peaks_expected", static_cast<double>(larmor.size()));
      run.result("peaks_detected", static_cast<double>(found.size()));
      run.result("peaks_matched", static_cast<double>(matched));
      run.result("peak_offset_max_bins", worst);
      run.emit("peaks.csv", [&](std::ostream& os) {
        os << "larmor_Hz\n";
        os.precision(10);
        for (double f : larmor) os << f << '\n';
      });
    }
    plot = "d = np.genfromtxt('psd.csv', delimiter=',', names=True)\n"
           "plt.loglog(d['f_Hz'], d['S_Hz2_per_Hz'], '-', label='estimate')\n"
           "plt.loglog(d['f_Hz'], d['S_model_Hz2_per_Hz'], '--', label='model')\n"
           "plt.xlabel('f (Hz)'); plt.ylabel('S (Hz^2/Hz)'); plt.legend()\n"
           "plt.savefig('psd.png', dpi=150)\n";
  } else {
    // the residual as the controller itself measures it, one value per cycle
    auto series = [&](bool feedback, std::uint64_t s, double& period) {
      FeedbackOptions o = p.loop;
      o.feedback = feedback;
      o.seed = s;
      o.target_mode = TargetMode::bayesian;
      const auto r = run_feedback_loop(sc.noise, sc.device, sc.estimator, o);
      std::vector<double> x;
      for (std::size_t i = o.burn_in; i < r.history.size(); ++i) x.push_back(r.history[i].measured);
      period = (r.history.back().time - r.history.front().time) / static_cast<double>(r.history.size() - 1);
      return x;
    };
    double period_off = 0.0, period_on = 0.0;
    const auto off = series(false, seed, period_off);
    const auto on = series(true, derive_seed(seed, 0x0f), period_on);
    const auto psd_off = estimate_psd(off, period_off, p.segment_len);
    const auto psd_on = estimate_psd(on, period_on, p.segment_len);
    run.emit("psd.csv", [&](std::ostream& os) {
      os << "f_Hz,S_off_Hz2_per_Hz,S_on_Hz2_per_Hz\n";
      os.precision(10);
      for (std::size_t k = 1; k < psd_off.frequency.size(); ++k)
        os << psd_off.frequency[k] << ',' << psd_off.density[k] << ',' << psd_on.density[k] << '\n';
    });
    double err = 0.0;
    run.result("slope_off", psd_slope(psd_off, p.fit_band, &err));
    run.result("slope_off_stderr", err);
    run.result("slope_on", psd_slope(psd_on, p.fit_band, &err));
    run.result("slope_on_stderr", err);
    run.result("cycle_period_s", period_on);
    run.result("sigma_off_Hz", std::sqrt(mean_square(off)));
    run.result("sigma_on_Hz", std::sqrt(mean_square(on)));
    plot = "d = np.genfromtxt('psd.csv', delimiter=',', names=True)\n"
           "plt.loglog(d['f_Hz'], d['S_off_Hz2_per_Hz'], '-', label='feedback off')\n"
           "plt.loglog(d['f_Hz'], d['S_on_Hz2_per_Hz'], '-', label='feedback on')\n"
           "plt.xlabel('f (Hz)'); plt.ylabel('S (Hz^2/Hz)'); plt.legend()\n"
           "plt.savefig('psd.png', dpi=150)\n";
  }
  run.plot("plot_psd.py", plot);
}

inline void dispatch(const ScenarioConfig& sc, std::uint64_t seed, ScenarioRun& run) {
  const auto& n = sc.scenario;
  if (n == "ramsey-free") run_ramsey_free(sc, seed, run);
  else if (n == "feedback-ramsey") run_feedback_ramsey(sc, seed, run);
  else if (n == "latency-sweep") run_latency(sc, seed, run);
  else if (n == "chevron") run_chevron_scenario(sc, seed, run);
  else if (n == "shift-vs-amplitude") run_shift(sc, seed, run);
  else if (n == "rabi") run_rabi_scenario(sc, seed, run);
  else if (n == "rb") run_rb_scenario(sc, seed, run);
  else if (n == "rabi-spectroscopy") run_spectroscopy_scenario(sc, seed, run);
  else if (n == "residual-psd") run_residual_psd(sc, seed, run);
  else if (n == "sec-compare") run_sec(sc, seed, run);
  else throw ConfigError("unknown scenario '" + n + "'", "run.scenario");
}

inline void check_bands(ScenarioOutcome& out, const std::vector<AcceptanceBand>& bands) {
  out.checks.clear();
  for (const auto& b : bands) {
    BandCheck c;
    c.band = b;
    c.found = out.has(b.key);
    if (c.found) c.value = out.get(b.key);
    c.pass = c.found && b.check(c.value);
    out.checks.push_back(c);
  }
}

inline nlohmann::ordered_json summary_json(const ScenarioOutcome& o, const std::string& source) {
  nlohmann::ordered_json j;
  j["scenario"] = o.scenario;
  j["config"] = source;
  j["seed"] = o.seed;
  j["partial"] = o.partial;
  if (!o.error.empty()) j["error"] = o.error;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  auto& r = j["results"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : o.results) r[k] = num(v);
  auto& a = j["acceptance"] = nlohmann::ordered_json::array();
  for (const auto& c : o.checks) {
    nlohmann::ordered_json e{{"key", c.band.key}, {"mode", c.band.mode}, {"target", c.band.target}, {"band", c.band.describe()},
                     {"value", num(c.value)}, {"pass", c.pass}};
    if (c.band.mode == "abs" || c.band.mode == "rel") e["tolerance"] = c.band.tol;
    a.push_back(e);
  }
  j["files"] = o.files;
  j["passed"] = o.passed();
  return j;
}

inline void write_summary(const std::filesystem::path& dir, const nlohmann::ordered_json& j) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "summary.json");
  f << j.dump(2) << '\n';
}

}  // namespace detail

struct ScenarioReport {
  std::vector<ScenarioOutcome> runs;  // one per seed
  ScenarioOutcome aggregate;          // seed means; equals runs[0] for a single seed

  bool passed() const { return aggregate.passed(); }

  int exit_code() const {
    int kind = 0;
    for (const auto& r : runs) kind = std::max(kind, r.error_kind);
    if (kind != 0) return kind;
    return passed() ? 0 : 1;
  }
};

// Runs every seed of the configuration. Artifacts go to `out_dir` (nothing is
// written when it is empty); several seeds get one seed-<n>/ subdirectory
// each plus a top-level summary of the seed means. Failures are caught and
// recorded, so a report always comes back with partial outputs flagged.
inline ScenarioReport run_scenario(const ScenarioConfig& sc, const std::filesystem::path& out_dir = {}) {
  ScenarioReport rep;
  const bool multi = sc.seeds.size() > 1;
  for (const auto seed : sc.seeds) {
    ScenarioOutcome o;
    o.scenario = sc.scenario;
    o.seed = seed;
    const auto dir = out_dir.empty() || !multi ? out_dir : out_dir / ("seed-" + std::to_string(seed));
    detail::ScenarioRun run(dir, o);
    try {
      detail::dispatch(sc, seed, run);
    } catch (const ConfigError& e) {
      o.error = e.what();
      o.error_kind = 2;
      o.partial = true;
    } catch (const std::exception& e) {
      o.error = e.what();
      o.error_kind = 3;
      o.partial = true;
    }
    detail::check_bands(o, sc.bands);
    if (multi) detail::write_summary(dir, detail::summary_json(o, sc.raw.source()));
    rep.runs.push_back(std::move(o));
  }

  if (!multi) {
    rep.aggregate = rep.runs.front();
  } else {
    auto& a = rep.aggregate;
    a.scenario = sc.scenario;
    a.seed = sc.seeds.front();
    for (const auto& r : rep.runs) {
      a.partial = a.partial || r.partial;
      a.error_kind = std::max(a.error_kind, r.error_kind);
      if (!r.error.empty() && a.error.empty()) a.error = "seed " + std::to_string(r.seed) + ": " + r.error;
    }
    for (const auto& [key, unused] : rep.runs.front().results) {
      std::vector<double> v;
      for (const auto& r : rep.runs)
        if (r.has(key)) v.push_back(r.get(key));
      a.results.emplace_back(key, mean(v));
      if (v.size() > 1) a.results.emplace_back(key + "_seed_sd", std::sqrt(variance(v)));
    }
    for (const auto& r : rep.runs) a.files.push_back("seed-" + std::to_string(r.seed) + "/");
    detail::check_bands(a, sc.bands);
  }
  auto j = detail::summary_json(rep.aggregate, sc.raw.source());
  if (multi) {
    j.erase("seed");
    j["seeds"] = sc.seeds;
  }
  detail::write_summary(out_dir, j);
  return rep;
}

}  // namespace spinfb
