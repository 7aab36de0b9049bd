#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "nvcam/fitters.hpp"

using namespace nvcam;

namespace {

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = a + (b - a) * i / (n - 1);
  return t;
}

std::vector<double> sample(const Params& p, const std::vector<double>& t) {
  std::vector<double> y;
  for (double x : t) y.push_back(model_value(p, x));
  return y;
}

bool close(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max(1.0, std::abs(b)); }

const Params kPaper{1.0, 0.05, 5.0, 0.4, 0.79};

// Fills a stack whose every pixel follows `p` with Poisson noise around
// `level` counts per frame.
SweepStack synthetic_stack(const Params& p, const std::vector<double>& t, double level, int frames, std::uint64_t seed,
                           int rows = 4, int cols = 8) {
  SweepStack s(rows, cols, t);
  std::mt19937_64 rng(seed);
  s.reference_frames = 100;
  for (auto& f : s.frames) f = static_cast<std::uint64_t>(frames);
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    s.reference[i] = std::poisson_distribution<long>(level * 100)(rng);
    for (std::size_t k = 0; k < t.size(); ++k)
      s.count(i, k) = std::poisson_distribution<long>(level * frames * model_value(p, t[k]))(rng);
  }
  return s;
}

}  // namespace

TEST(Model, JacobianMatchesCentralDifferences) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const Params p{0.5 + u(rng), 0.01 + 0.2 * u(rng), 0.5 + 8 * u(rng), -3 + 6 * u(rng), 0.1 + 3 * u(rng)};
    const double t = 2 * u(rng);
    const auto j = model_jacobian(p, t);
    for (std::size_t k = 0; k < 5; ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(p[k]));
      Params a = p, b = p;
      a[k] += h;
      b[k] -= h;
      const double fd = (model_value(a, t) - model_value(b, t)) / (2 * h);
      EXPECT_NEAR(j[k], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "param " << k << " trial " << trial;
    }
  }
}

TEST(InitialGuess, PureToneWithinOneBin) {
  const auto t = linspace(0, 2, 101);
  const Params p{1.0, 0.1, 4.0, 0.0, 1e6};
  const auto g = initial_guess(t, sample(p, t));
  EXPECT_LT(std::abs(g[kOmega] - 4.0), 1.0 / 2.0);
}

TEST(InitialGuess, FlatSeriesHasNoSignal) {
  const auto t = linspace(0, 1, 50);
  std::vector<double> y(50, 0.97);
  EXPECT_THROW((void)initial_guess(t, y), NoSignalError);
  EXPECT_THROW((void)fit_series(t, y), NoSignalError);
}

TEST(InitialGuess, PaperScaleSeedWithinTwentyPercent) {
  const auto t = linspace(0, 1, 50);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> phase(-std::numbers::pi, std::numbers::pi);
  int fails = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Params p = kPaper;
    p[kPhi] = phase(rng);
    const auto g = initial_guess(t, sample(p, t));
    const bool ok = close(g[kOmega], p[kOmega], 0.2) && std::abs(g[kOmega] - p[kOmega]) <= 0.2 * p[kOmega] &&
                    std::abs(g[kTau] - p[kTau]) <= 0.2 * p[kTau] &&
                    std::abs(g[kContrast] - p[kContrast]) <= 0.2 * p[kContrast] &&
                    std::abs(g[kC0] - p[kC0]) <= 0.2 * p[kC0] &&
                    std::abs(std::remainder(g[kPhi] - p[kPhi], 2 * std::numbers::pi)) <= 0.2 * std::numbers::pi;
    if (!ok) ++fails;
  }
  EXPECT_EQ(fails, 0);
}

TEST(Fit, ExactAtTruthSeed) {
  const auto t = linspace(0, 1, 50);
  const auto y = sample(kPaper, t);
  const auto r = fit_decaying_sinusoid(t, y, {}, kPaper);
  ASSERT_TRUE(r.converged);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_TRUE(close(r.params[k], kPaper[k], 1e-9)) << k;
}

TEST(Fit, NoiselessRecoveryFromPerturbedSeeds) {
  const auto t = linspace(0, 1, 50);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.2, 0.2), phase(-3, 3);
  for (int trial = 0; trial < 50; ++trial) {
    Params p = kPaper;
    p[kPhi] = phase(rng);
    const auto y = sample(p, t);
    Params seed = p;
    for (auto& v : seed) v *= 1 + u(rng);
    const auto r = fit_decaying_sinusoid(t, y, {}, seed);
    ASSERT_TRUE(r.converged) << trial;
    if (r.flags & flags::kAlias) {
      // above Nyquist the grid cannot tell the alias from the truth; it must be flagged and fit exactly
      for (double ti : t) EXPECT_NEAR(model_value(r.params, ti), model_value(p, ti), 1e-9) << trial;
      continue;
    }
    for (std::size_t k = 0; k < 5; ++k) {
      const double d = k == kPhi ? std::remainder(r.params[k] - p[k], 2 * std::numbers::pi) : r.params[k] - p[k];
      EXPECT_LE(std::abs(d), 1e-6 * std::max(1.0, std::abs(p[k]))) << "trial " << trial << " param " << k;
    }
  }
}

TEST(Fit, SeededFromDataRecoversNoiseless) {
  const auto t = linspace(0, 2, 101);
  const Params p{0.95, 0.046, 5.65, -1.1, 1.29};
  const auto r = fit_series(t, sample(p, t));
  ASSERT_TRUE(r.converged);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_TRUE(close(r.params[k], p[k], 1e-6)) << k;
}

TEST(Fit, CovarianceCoverage) {
  const auto t = linspace(0, 1, 50);
  const double sigma = 0.005;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0, sigma);
  std::array<int, 5> hits{};
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    auto y = sample(kPaper, t);
    for (auto& v : y) v += noise(rng);
    std::vector<double> w(t.size(), 1 / (sigma * sigma));
    const auto r = fit_series(t, y, w);
    ASSERT_TRUE(r.converged);
    for (std::size_t k = 0; k < 5; ++k)
      if (std::abs(r.params[k] - kPaper[k]) <= r.sigma(k)) ++hits[k];
  }
  for (std::size_t k = 0; k < 5; ++k) {
    const double cov = static_cast<double>(hits[k]) / trials;
    EXPECT_GE(cov, 0.60) << kFitParamNames[k];
    EXPECT_LE(cov, 0.75) << kFitParamNames[k];
  }
}

TEST(Fit, FoldsSigns) {
  const auto t = linspace(0, 1, 50);
  const auto y = sample(kPaper, t);
  Params seed{1.0, -0.05, -5.0, -0.4 + std::numbers::pi, 0.79};
  const auto r = fit_decaying_sinusoid(t, y, {}, seed);
  ASSERT_TRUE(r.converged);
  EXPECT_GT(r.params[kOmega], 0);
  EXPECT_GT(r.params[kContrast], 0);
  EXPECT_NEAR(r.params[kOmega], 5.0, 1e-9);
  EXPECT_NEAR(std::remainder(r.params[kPhi] - 0.4, 2 * std::numbers::pi), 0.0, 1e-9);
  EXPECT_GT(r.params[kPhi], -std::numbers::pi);
  EXPECT_LE(r.params[kPhi], std::numbers::pi);
}

TEST(Fit, TauClampFlag) {
  const auto t = linspace(0, 1, 50);
  const Params p{1.0, 0.05, 3.0, 0.0, 1e9};
  const auto r = fit_series(t, sample(p, t));
  EXPECT_TRUE(r.flags & flags::kTauClamped);
  EXPECT_NEAR(r.params[kTau], 100.0, 1e-9);
}

TEST(Fit, AliasFlag) {
  const auto t = linspace(0, 1, 21);  // Nyquist 10 MHz
  const Params p{1.0, 0.05, 13.0, 0.2, 2.0};
  const auto r = fit_decaying_sinusoid(t, sample(p, t), {}, p);
  EXPECT_TRUE(r.flags & flags::kAlias);
}

TEST(Fit, SingularWithoutOscillation) {
  const auto t = linspace(0, 1, 20);
  std::vector<double> y(20, 1.0);
  const auto r = fit_decaying_sinusoid(t, y, {}, Params{1.0, 0.0, 2.0, 0.0, 1.0});
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(r.flags & flags::kSingular);
}

TEST(Fit, InputValidation) {
  const auto t = linspace(0, 1, 20);
  const auto y = sample(kPaper, t);
  std::vector<double> bad_w(19, 1.0);
  EXPECT_THROW((void)fit_decaying_sinusoid(t, y, bad_w, kPaper), std::invalid_argument);
  Params seed = kPaper;
  seed[kTau] = 0;
  EXPECT_THROW((void)fit_decaying_sinusoid(t, y, {}, seed), std::invalid_argument);
  std::vector<double> short_t{0, 0.1, 0.2};
  EXPECT_THROW((void)initial_guess(short_t, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST(Fit, PhotonLimitedFrequencySigma) {
  // slow echo-like fringe; sigma falls as 1/sqrt(counts)
  const auto t = linspace(0, 3, 61);
  const Params p{0.955, 0.046, 2.0, 0.0, 1.5};
  auto sigma_at = [&](double counts) {
    std::mt19937_64 rng(5);
    std::vector<double> y, w;
    for (double x : t) {
      const double n = std::poisson_distribution<long>(counts * model_value(p, x))(rng);
      y.push_back(n / counts);
      w.push_back(counts * counts / std::max(n, 1.0));
    }
    const auto r = fit_series(t, y, w);
    EXPECT_TRUE(r.converged);
    return r.sigma(kOmega);
  };
  const double s1 = sigma_at(5e4), s4 = sigma_at(2e5);
  EXPECT_NEAR(s1 / s4, 2.0, 0.3);
}

TEST(SweepStack, NormalizeAndBin) {
  const auto t = linspace(0, 1, 10);
  SweepStack s(4, 8, t);
  s.reference_frames = 2;
  for (auto& f : s.frames) f = 5;
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    s.reference[i] = 200;
    for (std::size_t k = 0; k < t.size(); ++k) s.count(i, k) = 450;
  }
  const auto ser = s.series(3);
  EXPECT_DOUBLE_EQ(ser[0].y, 0.9);
  EXPECT_DOUBLE_EQ(ser[0].var, 450.0 / (500.0 * 500.0));
  s.saturated[9] = 1;
  const auto b = s.binned(2);
  EXPECT_EQ(b.rows, 2);
  EXPECT_EQ(b.cols, 4);
  EXPECT_DOUBLE_EQ(b.count(0, 0), 1800);
  EXPECT_DOUBLE_EQ(b.reference_level(0), 400);
  EXPECT_EQ(b.saturated[0], 1);
  EXPECT_DOUBLE_EQ(b.series(0)[0].y, 0.9);
  EXPECT_THROW((void)s.binned(3), std::invalid_argument);
}

TEST(FitMap, UniformSceneIsUniform) {
  const auto t = linspace(0, 1, 51);
  const Params p{1.0, 0.05, 5.0, 0.0, 0.79};
  const auto s = synthetic_stack(p, t, 2000, 20, 4);
  const auto map = fit_map(s, "rabi", 1, 0.0);
  const auto sum = map.summary();
  EXPECT_EQ(sum.converged, s.pixels());
  int outside = 0;
  for (const auto& px : map.pixels)
    if (std::abs(px.value[kOmega] - 5.0) > 3 * px.sigma[kOmega]) ++outside;
  EXPECT_LE(outside, 1);
}

TEST(FitMap, ThreadCountDoesNotMatter) {
  const auto t = linspace(0, 1, 51);
  const auto s = synthetic_stack(kPaper, t, 500, 10, 9);
  MapFitOptions one, four;
  one.threads = 1;
  four.threads = 4;
  const auto a = fit_map(s, "rabi", 2, 0.0, one);
  const auto b = fit_map(s, "rabi", 2, 0.0, four);
  ASSERT_EQ(a.pixels.size(), 8u);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) EXPECT_EQ(a.pixels[i].value, b.pixels[i].value);
}

TEST(FitMap, DarkPixelsAreNoSignal) {
  const auto t = linspace(0, 1, 51);
  auto s = synthetic_stack(kPaper, t, 500, 10, 2);
  s.reference[5] = 0;
  for (std::size_t k = 0; k < t.size(); ++k) s.count(5, k) = 0;
  const auto map = fit_map(s, "rabi", 1);
  EXPECT_FALSE(map.pixels[5].converged);
  EXPECT_TRUE(map.pixels[5].flags & flags::kNoSignal);
}

TEST(DerivedMaps, FieldFromFrequency) {
  ParameterMap m(1, 3);
  const double f[3] = {5.0, 5.0 - 0.8008, 5.0 + 0.28};
  for (int c = 0; c < 3; ++c) {
    m.at(0, c).converged = true;
    m.at(0, c).value = {1, 0.05, f[c], 0, 0.3};
    m.at(0, c).sigma = {0, 0, 0.028, 0, 0};
  }
  const auto sq = derive_field_map(m, RamseyMode::SQ, 5.0);
  EXPECT_NEAR(sq.value[0], 0.0, 1e-12);
  EXPECT_NEAR(sq.value[1], 0.286, 1e-12);
  EXPECT_NEAR(sq.sigma[1], 0.01, 1e-12);
  const auto dq = derive_field_map(m, RamseyMode::DQ, 5.0);
  EXPECT_NEAR(dq.value[2], 0.05, 1e-12);
  EXPECT_THROW((void)derive_field_map(m, RamseyMode::DQ_ECHO, 5.0), std::invalid_argument);
}

TEST(DerivedMaps, SameFieldFromBothModes) {
  const double bz = 0.13, nu = 5.0;
  ParameterMap sq(1, 1), dq(1, 1);
  sq.at(0, 0).converged = dq.at(0, 0).converged = true;
  sq.at(0, 0).value = {1, 0.05, nu - 2.8 * bz, 0, 0.3};
  dq.at(0, 0).value = {1, 0.05, nu + 2 * 2.8 * bz, 0, 0.3};
  EXPECT_NEAR(derive_field_map(sq, RamseyMode::SQ, nu).value[0], derive_field_map(dq, RamseyMode::DQ, nu).value[0],
              1e-12);
}

TEST(DerivedMaps, DdTemperatureAndStrain) {
  ParameterMap m(1, 2);
  m.at(0, 0).converged = m.at(0, 1).converged = true;
  m.at(0, 0).value = {1, 0.05, 2.0, 0, 1.5};
  m.at(0, 1).value = {1, 0.05, 2.01, 0, 1.5};
  auto d = derive_dD_map(m, 2.0);
  EXPECT_NEAR(d.dD.value[0], 0.0, 1e-12);
  EXPECT_NEAR(d.dD.value[1], 0.01, 1e-12);
  EXPECT_NEAR(d.temperature.value[1], 0.149, 1e-3);
  EXPECT_EQ(d.strain.valid[1], 0);
  DdCoefficients k;
  k.strain_ppm_per_mhz = 3.0;
  d = derive_dD_map(m, 2.0, k);
  EXPECT_EQ(d.strain.valid[1], 1);
  EXPECT_NEAR(d.strain.value[1], 0.03, 1e-12);
}

TEST(DerivedMaps, Density) {
  ParameterMap m(1, 3);
  for (int c = 0; c < 3; ++c) m.at(0, c).converged = true;
  m.at(0, 0).value = {1, 0.05, 5, 0, 0.35};
  m.at(0, 1).value = {1, 0.05, 5, 0, 0.5};
  m.at(0, 2).value = {1, 0.05, 5, 0, 0.25};
  auto d = density_map(m, 1 / 0.35, 2.0);
  EXPECT_NEAR(d.value[0], 0.0, 1e-12);
  EXPECT_EQ(d.value[1], 0.0);
  EXPECT_TRUE(d.flags[1] & flags::kNegativeDensity);
  d = density_map(m, 0.0, 2.0);
  EXPECT_NEAR(d.value[2], 2 * d.value[1], 1e-12);
  EXPECT_THROW((void)density_map(m, 0.0, 0.0), std::invalid_argument);
}

TEST(AreaSignal, RegionsOnUniformStack) {
  const auto t = linspace(0, 1, 51);
  const auto s = synthetic_stack(kPaper, t, 3000, 20, 12);
  const auto a = area_signal(s, SinglePixel{0, 0});
  const auto b = area_signal(s, SinglePixel{3, 7});
  ASSERT_TRUE(a.fit.converged && b.fit.converged);
  const double comb = std::hypot(a.fit.sigma(kTau), b.fit.sigma(kTau));
  EXPECT_LT(std::abs(a.fit.params[kTau] - b.fit.params[kTau]), 3 * comb);
  const auto all = area_signal(s, FullFrame{});
  EXPECT_LT(all.fit.sigma(kOmega), a.fit.sigma(kOmega));
  const auto g = area_signal(s, PixelGroup{0, 0, 2, 2});
  EXPECT_TRUE(g.fit.converged);
  EXPECT_THROW((void)area_signal(s, PixelGroup{0, 0, 5, 2}), std::invalid_argument);
}
