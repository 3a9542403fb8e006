#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "spinfb/config.hpp"

using namespace spinfb;

namespace {

std::string field_of(const std::string& text, auto reader) {
  try {
    reader(KeyValueConfig::parse(text, "t.cfg"));
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(KeyValue, SectionsKeysAndComments) {
  const auto c = KeyValueConfig::parse(
      "# header\n[noise]\nf_low = 2   # trailing\n\n[device]\n  gamma1=5e3\n[noise]\nf_high = 1e7\n");
  EXPECT_EQ(c.get_double("noise", "f_low", 0), 2.0);
  EXPECT_EQ(c.get_double("noise", "f_high", 0), 1e7);
  EXPECT_EQ(c.get_double("device", "gamma1", 0), 5e3);
  EXPECT_EQ(c.get_double("device", "missing", 7.5), 7.5);
  EXPECT_TRUE(c.has_section("device"));
  EXPECT_FALSE(c.has_section("rb"));
}

TEST(KeyValue, LastValueWinsAndRepeatsAreKept) {
  const auto c = KeyValueConfig::parse("[noise]\npower_law = 1 1\npower_law = 2 1.5\nf_low = 1\nf_low = 3\n");
  EXPECT_EQ(c.find_all("noise", "power_law").size(), 2u);
  EXPECT_EQ(c.get_double("noise", "f_low", 0), 3.0);
}

TEST(KeyValue, Lists) {
  const auto c = KeyValueConfig::parse("[a]\nx = 1 2 3.5\ny = linspace 0 1 5\nz = logspace 1 1000 4\nw = linspace 2 9 1\n");
  EXPECT_EQ(*c.get_list("a", "x"), (std::vector<double>{1, 2, 3.5}));
  EXPECT_EQ(*c.get_list("a", "y"), (std::vector<double>{0, 0.25, 0.5, 0.75, 1}));
  const auto z = *c.get_list("a", "z");
  ASSERT_EQ(z.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z[i], std::pow(10.0, 1.0 * i), 1e-9);
  EXPECT_EQ(*c.get_list("a", "w"), (std::vector<double>{2}));
  EXPECT_FALSE(c.get_list("a", "missing").has_value());
}

TEST(KeyValue, ErrorsCarryLocationAndField) {
  try {
    KeyValueConfig::parse("[a]\nx = 1\nnot a pair\n", "f.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:3"), std::string::npos);
  }
  EXPECT_THROW(KeyValueConfig::parse("x = 1\n"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse("[a\n"), ConfigError);
  const auto c = KeyValueConfig::parse("[a]\nx = abc\ny = 1 2\nz = logspace 0 1 3\nn = 2.5\nb = maybe\n", "f.cfg");
  try {
    c.get_double("a", "x", 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "a.x");
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(c.get_double("a", "y", 0), ConfigError);
  EXPECT_THROW(c.get_list("a", "z"), ConfigError);
  EXPECT_THROW(c.get_count("a", "n", 0), ConfigError);
  EXPECT_THROW(c.get_bool("a", "b", false), ConfigError);
  EXPECT_THROW(KeyValueConfig::load("/nonexistent/x.cfg"), ConfigError);
}

TEST(ReadNoise, ConventionsForTwoSidedKeys) {
  const auto m = read_noise(KeyValueConfig::parse(
      "[noise]\npower_law = 1e5 1.7\npower_law_two_sided = 0.6e6 1\nwhite_floor = 10\nwhite_floor_two_sided = 8.04e4\n"
      "quasi_static_sigma = 0.294e6\nf_low = 1e3\nf_high = 1e8\n"));
  ASSERT_EQ(m.power_laws.size(), 2u);
  EXPECT_EQ(m.power_laws[0].amplitude, 1e5);
  EXPECT_NEAR(m.power_laws[1].amplitude, 0.6e6 * std::numbers::sqrt2, 1e-6);
  // the one-sided model density of the two-sided term is 2 A^2 / f
  EXPECT_NEAR(m.power_laws[1].amplitude * m.power_laws[1].amplitude / 1e6, 2 * 0.36e12 / 1e6, 1e-3);
  EXPECT_EQ(m.white_floor, 10 + 2 * 8.04e4);
  EXPECT_EQ(m.quasi_static_sigma, 0.294e6);
}

TEST(ReadNoise, LarmorPeaksFollowDeviceField) {
  const auto raw = KeyValueConfig::parse("[device]\nb_ext = 1.01\nb_mm_z = 0.07\n[noise]\nlarmor_peaks = 2e6 4e3\nf_high = 3e7\n");
  const auto m = read_noise(raw, read_device(raw));
  const auto want = derive_larmor_frequencies(1.08);
  ASSERT_EQ(m.peaks.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(m.peaks[i].center, want[i]);
    EXPECT_EQ(m.peaks[i].height, 2e6);
    EXPECT_EQ(m.peaks[i].width, 4e3);
  }
}

TEST(ReadNoise, FieldNamesOnBadInput) {
  EXPECT_EQ(field_of("[noise]\nf_low = -1\n", [](const auto& c) { read_noise(c); }), "noise.f_low");
  EXPECT_EQ(field_of("[noise]\nf_low = 10\nf_high = 5\n", [](const auto& c) { read_noise(c); }), "noise.f_high");
  EXPECT_EQ(field_of("[noise]\npower_law = 1\n", [](const auto& c) { read_noise(c); }), "noise.power_law");
  EXPECT_EQ(field_of("[noise]\ncolour = pink\n", [](const auto& c) { read_noise(c); }), "noise.colour");
}

TEST(ReadDevice, ValidationFields) {
  EXPECT_EQ(field_of("[device]\nreadout_beta = 0\n", [](const auto& c) { read_device(c); }), "device.readout_beta");
  EXPECT_EQ(field_of("[device]\nreadout_alpha = 0.5\n", [](const auto& c) { read_device(c); }), "device.readout_alpha");
  EXPECT_EQ(field_of("[device]\ngamma1 = -1\n", [](const auto& c) { read_device(c); }), "device.gamma1");
  EXPECT_EQ(field_of("[device]\nrabi_per_amplitude = 0\n", [](const auto& c) { read_device(c); }),
            "device.rabi_per_amplitude");
}

TEST(ReadEstimator, DefaultsAndFields) {
  const auto raw = KeyValueConfig::parse("[device]\nreadout_alpha = 0.1\nreadout_beta = 0.8\n");
  const auto e = read_estimator(raw, read_device(raw));
  EXPECT_EQ(e.alpha, 0.1);  // likelihood follows the device readout unless overridden
  EXPECT_EQ(e.beta, 0.8);
  EXPECT_EQ(e.n_shots, 150u);
  EXPECT_EQ(e.bin_width, 0.25e6);
  EXPECT_EQ(e.delta_p, 50e6);
  EXPECT_NEAR(e.t_r(149), 300e-9, 1e-18);
  EXPECT_EQ(field_of("[estimator]\nbin_width = 0\n", [](const auto& c) { read_estimator(c); }), "estimator.bin_width");
  EXPECT_EQ(field_of("[estimator]\nn_shots = 0\n", [](const auto& c) { read_estimator(c); }), "estimator.n_shots");
}

TEST(ReadFeedback, OptionsAndFields) {
  const auto o = read_feedback(KeyValueConfig::parse(
      "[feedback]\nn_cycles = 50\nt_wait = 5e-3\ntarget_delays = linspace 0 1e-6 11\nfeedback = off\n"));
  EXPECT_EQ(o.n_cycles, 50u);
  EXPECT_EQ(o.t_wait, 5e-3);
  EXPECT_FALSE(o.feedback);
  EXPECT_EQ(o.target_mode, TargetMode::ramsey_trace);
  EXPECT_EQ(o.target_delays.size(), 11u);
  EXPECT_EQ(field_of("[feedback]\nn_cycles = 3\n", [](const auto& c) { read_feedback(c); }), "feedback.n_cycles");
  EXPECT_EQ(field_of("[feedback]\nt_wait = -1\n", [](const auto& c) { read_feedback(c); }), "feedback.t_wait");
}

TEST(ReadSchedule, Segments) {
  const auto s = read_schedule(KeyValueConfig::parse(
      "[schedule]\nframe_frequency = 5.495e9\nsegment = drive 5.495e9 10 0 25e-9\nsegment = idle 0 0 0 1e-7\n"));
  ASSERT_EQ(s.segments.size(), 2u);
  EXPECT_EQ(s.segments[0].kind, SegmentKind::drive);
  EXPECT_EQ(s.segments[1].kind, SegmentKind::idle);
  EXPECT_NEAR(s.total_duration(), 125e-9, 1e-20);
  EXPECT_THROW(read_schedule(KeyValueConfig::parse("[schedule]\nsegment = hop 0 0 0 1\n")), ConfigError);
  EXPECT_THROW(read_schedule(KeyValueConfig::parse("[schedule]\nsegment = idle 0 0 0 0\n")), ConfigError);
}

TEST(ConfigProperty, WriteThenReadRoundTrips) {
  Rng rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    SpectrumModel m;
    const int terms = static_cast<int>(3 * u(rng));
    for (int k = 0; k < terms; ++k) m.power_laws.push_back({1e6 * u(rng), 3.0 * u(rng)});
    if (u(rng) < 0.5) m.white_floor = 1e5 * u(rng);
    if (u(rng) < 0.5) m.peaks.push_back({1e6 + 1e7 * u(rng), 1e6 * u(rng), 1e3 + 1e4 * u(rng)});
    m.quasi_static_sigma = 1e6 * u(rng);
    m.f_low = 10.0 * u(rng);
    m.f_high = 1e3 + 1e8 * u(rng);
    DeviceParams d;
    d.gamma1 = 1e4 * u(rng);
    d.shift_coeff = 1e5 * u(rng);
    d.readout_alpha = 0.2 * u(rng);
    d.readout_beta = 0.5 + 0.3 * u(rng);
    EstimatorConfig e;
    e.bin_width = 1e5 + 1e6 * u(rng);
    e.n_shots = 1 + static_cast<std::size_t>(300 * u(rng));
    e.carry_prior = u(rng) < 0.5;

    std::ostringstream os;
    write_config(os, m);
    write_config(os, d);
    write_config(os, e);
    const auto raw = KeyValueConfig::parse(os.str());
    const auto d2 = read_device(raw);
    const auto m2 = read_noise(raw, d2);
    const auto e2 = read_estimator(raw, d2);
    ASSERT_EQ(m2.power_laws.size(), m.power_laws.size());
    for (std::size_t k = 0; k < m.power_laws.size(); ++k) {
      EXPECT_EQ(m2.power_laws[k].amplitude, m.power_laws[k].amplitude);
      EXPECT_EQ(m2.power_laws[k].exponent, m.power_laws[k].exponent);
    }
    EXPECT_EQ(m2.white_floor, m.white_floor);
    EXPECT_EQ(m2.peaks.size(), m.peaks.size());
    EXPECT_EQ(m2.quasi_static_sigma, m.quasi_static_sigma);
    EXPECT_EQ(m2.f_low, m.f_low);
    EXPECT_EQ(m2.f_high, m.f_high);
    EXPECT_EQ(d2.gamma1, d.gamma1);
    EXPECT_EQ(d2.shift_coeff, d.shift_coeff);
    EXPECT_EQ(d2.readout_beta, d.readout_beta);
    EXPECT_EQ(e2.bin_width, e.bin_width);
    EXPECT_EQ(e2.n_shots, e.n_shots);
    EXPECT_EQ(e2.carry_prior, e.carry_prior);
  }
}
