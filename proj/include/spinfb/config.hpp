#pragma once

// Key-value text configuration:
//
//   # comment
//   [noise]
//   power_law = 0.85e6 1.0      # one-sided amplitude [Hz], exponent (repeatable)
//   power_law_two_sided = 0.6e6 1.0   # S_L = A^2 / f^beta, stored as A sqrt(2)
//   peak = 7.87e6 2e9 40e3      # center [Hz], height [Hz^2/Hz], width [Hz]
//
// Values are whitespace-separated tokens. Numeric lists may be written as
// "linspace a b n" or "logspace a b n" (endpoints, not exponents).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spinfb/dynamics.hpp"
#include "spinfb/errors.hpp"
#include "spinfb/estimator.hpp"
#include "spinfb/noise.hpp"

namespace spinfb {

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string source = "<config>") {
    KeyValueConfig cfg;
    cfg.source_ = std::move(source);
    std::string section;
    int line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']' || trimmed.size() < 3)
          throw ConfigError(cfg.where(line_no) + ": malformed section header", cfg.source_);
        section = trim(trimmed.substr(1, trimmed.size() - 2));
        cfg.order_.push_back(section);
        cfg.sections_[section];
        continue;
      }
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) throw ConfigError(cfg.where(line_no) + ": expected key = value", cfg.source_);
      if (section.empty()) throw ConfigError(cfg.where(line_no) + ": key outside any [section]", cfg.source_);
      auto key = trim(trimmed.substr(0, eq));
      if (key.empty()) throw ConfigError(cfg.where(line_no) + ": empty key", cfg.source_);
      cfg.sections_[section].push_back({std::move(key), trim(trimmed.substr(eq + 1)), line_no});
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read configuration file", path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  const std::string& source() const { return source_; }
  bool has_section(const std::string& s) const { return sections_.count(s) != 0; }
  std::vector<std::string> section_names() const { return order_; }

  const std::vector<ConfigEntry>& entries(const std::string& section) const {
    static const std::vector<ConfigEntry> empty;
    auto it = sections_.find(section);
    return it == sections_.end() ? empty : it->second;
  }

  const ConfigEntry* find(const std::string& section, const std::string& key) const {
    const ConfigEntry* hit = nullptr;
    for (const auto& e : entries(section))
      if (e.key == key) hit = &e;  // last one wins
    return hit;
  }

  std::vector<const ConfigEntry*> find_all(const std::string& section, const std::string& key) const {
    std::vector<const ConfigEntry*> out;
    for (const auto& e : entries(section))
      if (e.key == key) out.push_back(&e);
    return out;
  }

  bool has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    const auto* e = find(section, key);
    return e ? to_double(*e, section) : fallback;
  }

  std::size_t get_count(const std::string& section, const std::string& key, std::size_t fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    const double v = to_double(*e, section);
    if (v < 0.0 || v != std::floor(v)) throw error(*e, section, "expected a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "on" || e->value == "yes" || e->value == "1") return true;
    if (e->value == "false" || e->value == "off" || e->value == "no" || e->value == "0") return false;
    throw error(*e, section, "expected a boolean");
  }

  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
    const auto* e = find(section, key);
    return e ? e->value : fallback;
  }

  std::optional<std::vector<double>> get_list(const std::string& section, const std::string& key) const {
    const auto* e = find(section, key);
    if (!e) return std::nullopt;
    return to_list(*e, section);
  }

  std::vector<double> to_list(const ConfigEntry& e, const std::string& section) const {
    auto tokens = split(e.value);
    if (tokens.empty()) return {};
    if (tokens[0] == "linspace" || tokens[0] == "logspace") {
      if (tokens.size() != 4) throw error(e, section, "expected '" + tokens[0] + " start stop count'");
      const double a = number(tokens[1], e, section), b = number(tokens[2], e, section);
      const double n = number(tokens[3], e, section);
      if (n < 1 || n != std::floor(n)) throw error(e, section, "count must be a positive integer");
      const auto count = static_cast<std::size_t>(n);
      const bool log = tokens[0] == "logspace";
      if (log && !(a > 0.0 && b > 0.0)) throw error(e, section, "logspace endpoints must be > 0");
      std::vector<double> out(count);
      for (std::size_t i = 0; i < count; ++i) {
        const double u = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        out[i] = log ? a * std::pow(b / a, u) : a + (b - a) * u;
      }
      return out;
    }
    std::vector<double> out;
    for (const auto& t : tokens) out.push_back(number(t, e, section));
    return out;
  }

  double to_double(const ConfigEntry& e, const std::string& section) const {
    const auto tokens = split(e.value);
    if (tokens.size() != 1) throw error(e, section, "expected a single number");
    return number(tokens[0], e, section);
  }

  // Rejects keys not in `known` for the given section.
  void check_keys(const std::string& section, const std::set<std::string>& known) const {
    for (const auto& e : entries(section))
      if (!known.count(e.key)) throw error(e, section, "unknown key");
  }

  ConfigError error(const ConfigEntry& e, const std::string& section, const std::string& what) const {
    return ConfigError(where(e.line) + ": " + what, section + "." + e.key);
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    if (!sections_.count(section)) order_.push_back(section);
    auto& v = sections_[section];
    for (auto& e : v)
      if (e.key == key) {
        e.value = value;
        return;
      }
    v.push_back({key, value, 0});
  }

  static std::vector<std::string> split(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string t; in >> t;) out.push_back(t);
    return out;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::string where(int line) const { return source_ + ":" + std::to_string(line); }

  double number(const std::string& token, const ConfigEntry& e, const std::string& section) const {
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (end == token.c_str() || *end != '\0') throw error(e, section, "'" + token + "' is not a number");
    if (token == "inf" || token == "+inf") return std::numeric_limits<double>::infinity();
    if (!std::isfinite(v)) throw error(e, section, "value must be finite");
    return v;
  }

  std::string source_;
  std::map<std::string, std::vector<ConfigEntry>> sections_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// Module types <-> configuration

inline DeviceParams read_device(const KeyValueConfig& c) {
  c.check_keys("device", {"b_ext", "b_mm_z", "f_qubit_0", "shift_coeff", "shift_exponent", "shift_settle_time",
                          "rabi_per_amplitude", "gamma1", "readout_alpha", "readout_beta"});
  DeviceParams d;
  d.b_ext = c.get_double("device", "b_ext", d.b_ext);
  d.b_mm_z = c.get_double("device", "b_mm_z", d.b_mm_z);
  d.f_qubit_0 = c.get_double("device", "f_qubit_0", d.f_qubit_0);
  d.shift_coeff = c.get_double("device", "shift_coeff", d.shift_coeff);
  d.shift_exponent = c.get_double("device", "shift_exponent", d.shift_exponent);
  d.shift_settle_time = c.get_double("device", "shift_settle_time", d.shift_settle_time);
  d.rabi_per_amplitude = c.get_double("device", "rabi_per_amplitude", d.rabi_per_amplitude);
  d.gamma1 = c.get_double("device", "gamma1", d.gamma1);
  d.readout_alpha = c.get_double("device", "readout_alpha", d.readout_alpha);
  d.readout_beta = c.get_double("device", "readout_beta", d.readout_beta);
  d.validate();
  return d;
}

// Larmor peaks ("larmor_peaks = height width") are placed at the nuclear
// Larmor frequencies of the device's total field.
inline SpectrumModel read_noise(const KeyValueConfig& c, const DeviceParams& device = {}) {
  c.check_keys("noise", {"power_law", "power_law_two_sided", "white_floor", "white_floor_two_sided", "peak",
                         "larmor_peaks", "rising_coefficient", "quasi_static_sigma", "f_low", "f_high"});
  SpectrumModel m;
  auto pairs = [&](const ConfigEntry* e, std::size_t n) {
    const auto v = c.to_list(*e, "noise");
    if (v.size() != n) throw c.error(*e, "noise", "expected " + std::to_string(n) + " numbers");
    return v;
  };
  for (const auto* e : c.find_all("noise", "power_law")) {
    const auto v = pairs(e, 2);
    m.power_laws.push_back({v[0], v[1]});
  }
  for (const auto* e : c.find_all("noise", "power_law_two_sided")) {
    const auto v = pairs(e, 2);
    m.power_laws.push_back({v[0] * std::numbers::sqrt2, v[1]});
  }
  for (const auto* e : c.find_all("noise", "peak")) {
    const auto v = pairs(e, 3);
    m.peaks.push_back({v[0], v[1], v[2]});
  }
  for (const auto* e : c.find_all("noise", "larmor_peaks")) {
    const auto v = pairs(e, 2);
    for (double f : derive_larmor_frequencies(device.b_total())) m.peaks.push_back({f, v[0], v[1]});
  }
  m.white_floor = c.get_double("noise", "white_floor", 0.0) + 2.0 * c.get_double("noise", "white_floor_two_sided", 0.0);
  m.rising_coefficient = c.get_double("noise", "rising_coefficient", m.rising_coefficient);
  m.quasi_static_sigma = c.get_double("noise", "quasi_static_sigma", m.quasi_static_sigma);
  m.f_low = c.get_double("noise", "f_low", m.f_low);
  m.f_high = c.get_double("noise", "f_high", m.f_high);
  m.validate();
  return m;
}

inline EstimatorConfig read_estimator(const KeyValueConfig& c, const DeviceParams& device = {}) {
  c.check_keys("estimator", {"n_shots", "t_r_start", "t_r_step", "delta_p", "bin_width", "grid_halfspan", "alpha",
                             "beta", "envelope_t2star", "finite_pulse_correction", "carry_prior"});
  EstimatorConfig e;
  // likelihood parameters default to the device readout
  e.alpha = device.readout_alpha;
  e.beta = device.readout_beta;
  e.n_shots = c.get_count("estimator", "n_shots", e.n_shots);
  e.t_r_start = c.get_double("estimator", "t_r_start", e.t_r_start);
  e.t_r_step = c.get_double("estimator", "t_r_step", e.t_r_step);
  e.delta_p = c.get_double("estimator", "delta_p", e.delta_p);
  e.bin_width = c.get_double("estimator", "bin_width", e.bin_width);
  e.grid_halfspan = c.get_double("estimator", "grid_halfspan", e.grid_halfspan);
  e.alpha = c.get_double("estimator", "alpha", e.alpha);
  e.beta = c.get_double("estimator", "beta", e.beta);
  e.envelope_t2star = c.get_double("estimator", "envelope_t2star", e.envelope_t2star);
  e.finite_pulse_correction = c.get_bool("estimator", "finite_pulse_correction", e.finite_pulse_correction);
  e.carry_prior = c.get_bool("estimator", "carry_prior", e.carry_prior);
  e.validate();
  return e;
}

inline FeedbackOptions read_feedback(const KeyValueConfig& c) {
  c.check_keys("feedback", {"n_cycles", "t_wait", "t_target", "repetition_time", "feedback", "traj_dt",
                            "probe_amplitude", "target_delays", "target_detuning", "target_amplitude", "burn_in"});
  FeedbackOptions o;
  o.n_cycles = c.get_count("feedback", "n_cycles", o.n_cycles);
  o.burn_in = c.get_count("feedback", "burn_in", o.burn_in);
  o.t_wait = c.get_double("feedback", "t_wait", o.t_wait);
  o.t_target = c.get_double("feedback", "t_target", o.t_target);
  o.repetition_time = c.get_double("feedback", "repetition_time", o.repetition_time);
  o.feedback = c.get_bool("feedback", "feedback", o.feedback);
  o.traj_dt = c.get_double("feedback", "traj_dt", o.traj_dt);
  o.probe_pulses.drive_amplitude = c.get_double("feedback", "probe_amplitude", o.probe_pulses.drive_amplitude);
  o.target_pulses.drive_amplitude = c.get_double("feedback", "target_amplitude", o.target_pulses.drive_amplitude);
  if (auto d = c.get_list("feedback", "target_delays")) {
    o.target_delays = *d;
    o.target_mode = TargetMode::ramsey_trace;
  }
  o.target_detuning = c.get_double("feedback", "target_detuning", o.target_detuning);
  if (o.n_cycles < 10) throw ConfigError("must be >= 10", "feedback.n_cycles");
  if (o.burn_in >= o.n_cycles / 2) throw ConfigError("must be < n_cycles / 2", "feedback.burn_in");
  if (o.t_wait < 0.0) throw ConfigError("must be >= 0", "feedback.t_wait");
  if (!(o.repetition_time > 0.0)) throw ConfigError("must be > 0", "feedback.repetition_time");
  if (!(o.probe_pulses.drive_amplitude > 0.0)) throw ConfigError("must be > 0", "feedback.probe_amplitude");
  return o;
}

inline void write_config(std::ostream& os, const SpectrumModel& m) {
  os.precision(17);
  os << "[noise]\n";
  for (const auto& p : m.power_laws) os << "power_law = " << p.amplitude << ' ' << p.exponent << '\n';
  if (m.white_floor != 0.0) os << "white_floor = " << m.white_floor << '\n';
  for (const auto& p : m.peaks) os << "peak = " << p.center << ' ' << p.height << ' ' << p.width << '\n';
  if (m.rising_coefficient != 0.0) os << "rising_coefficient = " << m.rising_coefficient << '\n';
  os << "quasi_static_sigma = " << m.quasi_static_sigma << '\n';
  os << "f_low = " << m.f_low << '\n';
  os << "f_high = " << m.f_high << '\n';
}

inline void write_config(std::ostream& os, const DeviceParams& d) {
  os.precision(17);
  os << "[device]\n"
     << "b_ext = " << d.b_ext << "\nb_mm_z = " << d.b_mm_z << "\nf_qubit_0 = " << d.f_qubit_0
     << "\nshift_coeff = " << d.shift_coeff << "\nshift_exponent = " << d.shift_exponent
     << "\nshift_settle_time = " << d.shift_settle_time << "\nrabi_per_amplitude = " << d.rabi_per_amplitude
     << "\ngamma1 = " << d.gamma1 << "\nreadout_alpha = " << d.readout_alpha << "\nreadout_beta = " << d.readout_beta
     << '\n';
}

inline void write_config(std::ostream& os, const EstimatorConfig& e) {
  os.precision(17);
  os << "[estimator]\n"
     << "n_shots = " << e.n_shots << "\nt_r_start = " << e.t_r_start << "\nt_r_step = " << e.t_r_step
     << "\ndelta_p = " << e.delta_p << "\nbin_width = " << e.bin_width << "\ngrid_halfspan = " << e.grid_halfspan
     << "\nalpha = " << e.alpha << "\nbeta = " << e.beta << "\nenvelope_t2star = " << e.envelope_t2star
     << "\nfinite_pulse_correction = " << (e.finite_pulse_correction ? "true" : "false")
     << "\ncarry_prior = " << (e.carry_prior ? "true" : "false") << '\n';
}

// Schedules: one "segment = kind frequency amplitude phase duration" line per
// segment, kind in {drive, off_resonant, idle}.
inline ExperimentSchedule read_schedule(const KeyValueConfig& c, const std::string& section = "schedule") {
  c.check_keys(section, {"segment", "frame_frequency"});
  ExperimentSchedule s;
  s.frame_frequency = c.get_double(section, "frame_frequency", 0.0);
  for (const auto* e : c.find_all(section, "segment")) {
    auto tokens = KeyValueConfig::split(e->value);
    if (tokens.size() != 5) throw c.error(*e, section, "expected 'kind frequency amplitude phase duration'");
    PulseSegment seg;
    if (tokens[0] == "drive") seg.kind = SegmentKind::drive;
    else if (tokens[0] == "off_resonant") seg.kind = SegmentKind::off_resonant;
    else if (tokens[0] == "idle") seg.kind = SegmentKind::idle;
    else throw c.error(*e, section, "unknown segment kind '" + tokens[0] + "'");
    tokens.erase(tokens.begin());
    std::string rest;
    for (const auto& t : tokens) rest += t + ' ';
    const auto v = c.to_list({e->key, rest, e->line}, section);
    seg.frequency = v[0];
    seg.amplitude = v[1];
    seg.phase = v[2];
    seg.duration = v[3];
    if (seg.duration < 0.0 || seg.amplitude < 0.0) throw c.error(*e, section, "duration and amplitude must be >= 0");
    s.segments.push_back(seg);
  }
  if (!s.segments.empty() && !(s.total_duration() > 0.0))
    throw ConfigError("schedule has zero total duration", section + ".segment");
  return s;
}

inline void write_config(std::ostream& os, const ExperimentSchedule& s) {
  os.precision(17);
  os << "[schedule]\nframe_frequency = " << s.frame_frequency << '\n';
  for (const auto& seg : s.segments) {
    const char* kind = seg.kind == SegmentKind::drive ? "drive" : seg.kind == SegmentKind::off_resonant ? "off_resonant" : "idle";
    os << "segment = " << kind << ' ' << seg.frequency << ' ' << seg.amplitude << ' ' << seg.phase << ' ' << seg.duration
       << '\n';
  }
}

}  // namespace spinfb
