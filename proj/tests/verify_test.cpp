#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "esi/verify.hpp"
#include "oracle.hpp"

using namespace esi;

namespace {

std::vector<Model> small_discrete_models(std::uint64_t seed, int count) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_atoms(1, 6);
  std::uniform_real_distribution<double> val(-3.0, 1.5), w(0.05, 1.0);
  std::vector<Model> out;
  for (int k = 0; k < count; ++k) {
    const int n = n_atoms(rng);
    std::vector<Atom> atoms;
    double total = 0;
    for (int i = 0; i < n; ++i) {
      atoms.push_back({val(rng), w(rng)});
      total += atoms.back().prob;
    }
    double acc = 0;
    for (int i = 0; i < n - 1; ++i) acc += (atoms[i].prob /= total);
    atoms.back().prob = 1.0 - acc;
    out.push_back(Model::finite_discrete(atoms));
  }
  return out;
}

double brute_margin(const std::vector<Atom>& atoms, double eta, double eps) {
  // Summed relative to 1 in extended precision; probabilities are taken as
  // summing to exactly 1, otherwise their rounding is amplified by 1/eta.
  long double s = 0;
  for (const auto& a : atoms)
    s += static_cast<long double>(a.prob) * std::expm1(static_cast<long double>(eta) * a.value);
  if (s > -0.5) return static_cast<double>(std::log1p(s) / eta) - eps;
  long double d = 0;
  for (const auto& a : atoms) d += static_cast<long double>(a.prob) * std::exp(static_cast<long double>(eta) * a.value);
  return static_cast<double>(std::log(d) / eta) - eps;
}

}  // namespace

TEST(VerifyEsi, DeterministicNegativeHoldsWithMarginMinusOne) {
  auto cert = verify_esi(Model::constant(-1), std::nullopt, ScaleFunction::constant(5));
  ASSERT_TRUE(cert.evidence);
  EXPECT_EQ(cert.evidence->verdict, Verdict::holds);
  EXPECT_NEAR(cert.evidence->worst_margin, -1.0, 1e-15);
  EXPECT_EQ(cert.evidence->points.size(), 1u);
}

TEST(VerifyEsi, RademacherUnderHalfEpsilonScaleHolds) {
  auto cert = verify_esi(Model::rademacher(), std::nullopt, ScaleFunction::linear_capped(0.5));
  EXPECT_EQ(cert.evidence->verdict, Verdict::holds);
  EXPECT_EQ(cert.evidence->method, EvalMethod::closed_form);
  for (const auto& p : cert.evidence->points) {
    const double eta = p.eps / 2;
    const long double lc = std::log(std::cosh(static_cast<long double>(eta)));
    EXPECT_NEAR(p.margin, static_cast<double>(lc / eta) - p.eps, 1e-12);
    EXPECT_LE(p.margin, -0.75 * p.eps + 1e-15);
  }
}

TEST(VerifyEsi, VarianceNeededBelowItsConstant) {
  const double nu = 2.75, x = (nu - 1) / ((nu - 2) * (nu - 2));
  const double cstar = std::log(1 + std::exp(x));
  auto cert = verify_esi(Model::variance_needed(nu), std::nullopt, ScaleFunction::constant(1), RhsOffset::value(cstar));
  EXPECT_EQ(cert.evidence->verdict, Verdict::holds);
  // Independent value of E[e^U]: the atom plus the power-law tail on (-inf, -1].
  const double tail = oracle::power_tail_laplace(nu, 1.0);
  const double mgf = (nu - 2) / (nu - 1) * std::exp(x) + tail;
  EXPECT_NEAR(cert.evidence->worst_margin, std::log(mgf) - cstar, 1e-8);
}

TEST(VerifyEsi, FailsWhenDriftIsPositive) {
  auto cert = verify_esi(Model::gaussian(0.1, 1), std::nullopt, ScaleFunction::constant(0.1));
  EXPECT_EQ(cert.evidence->verdict, Verdict::fails);
  EXPECT_NEAR(cert.evidence->worst_margin, 0.1 + 0.05, 1e-12);
}

TEST(VerifyEsi, OutsideMgfDomainFails) {
  auto cert = verify_esi(Model::exponential(1), Model::constant(5), ScaleFunction::constant(2));
  EXPECT_EQ(cert.evidence->verdict, Verdict::fails);
  EXPECT_TRUE(std::isinf(cert.evidence->worst_margin));
}

TEST(VerifyEsi, NonConstantRightSideIsRejected) {
  try {
    verify_esi(Model::rademacher(), Model::gaussian(0, 1), ScaleFunction::constant(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IncomparableModels);
  }
}

TEST(VerifyEsi, EmpiricalSampleGetsMonteCarloBands) {
  Rng rng = substream(11, 0);
  std::vector<double> xs(20000);
  for (auto& x : xs) x = standard_normal(rng) - 1.0;
  auto cert = verify_esi(Model::empirical(xs), std::nullopt, ScaleFunction::constant(0.5));
  EXPECT_EQ(cert.evidence->method, EvalMethod::monte_carlo);
  EXPECT_GT(cert.evidence->margin_se, 0.0);
  EXPECT_EQ(cert.evidence->verdict, Verdict::holds);
  // A statement that is exactly critical must not be called conclusively.
  std::vector<double> ys(20000);
  for (auto& y : ys) y = standard_normal(rng) - 0.25;
  auto crit = verify_esi(Model::empirical(ys), std::nullopt, ScaleFunction::constant(0.5));
  EXPECT_NE(crit.evidence->verdict, Verdict::holds);
}

TEST(VerifyEsiProperty, MatchesBruteForceOnSmallDiscreteModels) {
  const std::vector<ScaleFunction> scales = {ScaleFunction::constant(0.7), ScaleFunction::linear_capped(0.5),
                                             ScaleFunction::linear_capped(2, 1.0),
                                             ScaleFunction::power_capped(1, 0.5, 3.0)};
  for (const auto& m : small_discrete_models(7, 60)) {
    const auto& atoms = m.as<family::FiniteDiscrete>()->atoms;
    for (const auto& u : scales) {
      const auto rep = verify_difference(m, u);
      double sup = -kInf;
      for (const auto& p : rep.points) {
        const double ref = brute_margin(atoms, u(p.eps), u.is_constant() ? 0.0 : p.eps);
        EXPECT_NEAR(p.margin, ref, 1e-12 * std::max(1.0, std::abs(ref)));
        sup = std::max(sup, ref);
      }
      const Verdict expect = sup > 1e-12 ? Verdict::fails : Verdict::holds;
      if (std::abs(sup) > 1e-10) {
        EXPECT_EQ(rep.verdict, expect);
      }
    }
  }
}

TEST(VerifyEsiProperty, AlmostSureOrderingMatchesLargeEtaAtoms) {
  // X - Y for coupled discrete pairs: holds at every large eta iff X <= Y a.s.
  for (const auto& m : small_discrete_models(99, 80)) {
    const auto& atoms = m.as<family::FiniteDiscrete>()->atoms;
    bool as_le = true;
    for (const auto& a : atoms)
      if (a.prob > 0 && a.value > 0) as_le = false;
    bool all_hold = true;
    for (double eta : {1.0, 10.0, 100.0, 1000.0})
      all_hold = all_hold && verify_difference(m, ScaleFunction::constant(eta)).verdict == Verdict::holds;
    EXPECT_EQ(as_le, all_hold);
  }
}

TEST(ExtractBounds, ConstantScaleGap) {
  auto cert = verify_esi(Model::constant(-1), std::nullopt, ScaleFunction::constant(2));
  auto b = extract_bounds(cert, std::exp(-2.0));
  EXPECT_NEAR(b.hp_bound - b.expectation_bound, 1.0, 1e-15);
}

TEST(ExtractBounds, LinearScaleOptimumAgainstGridSearch) {
  auto cert = verify_esi(Model::rademacher(), std::nullopt, ScaleFunction::linear_capped(1.0));
  ASSERT_TRUE(cert.holds());
  auto b = extract_bounds(cert, std::exp(-1.0));
  double best = kInf, arg = 0;
  for (int i = 0; i <= 200000; ++i) {
    const double e = 0.01 + i * 1e-5 * 10;
    if (1.0 / e + e < best) {
      best = 1.0 / e + e;
      arg = e;
    }
  }
  EXPECT_NEAR(b.hp_bound, best, 1e-6);
  EXPECT_NEAR(b.hp_bound, 2.0, 1e-12);
  EXPECT_NEAR(b.argmin_epsilon, arg, 1e-3);
  EXPECT_EQ(b.expectation_bound, 0.0);
}

TEST(ExtractBounds, PowerScaleRateInSampleSize) {
  const double gamma = 0.5, L = std::log(20.0);
  auto base = ScaleFunction::power_capped(1.0, gamma, 1.0);
  EsiCertificate c;
  c.provenance = {"asserted: test input"};
  std::vector<double> lx, ly;
  for (double n : {1e4, 1e5, 1e6, 1e7}) {
    c.scale = base.scaled(n);
    lx.push_back(std::log(n));
    ly.push_back(std::log(extract_bounds(c, std::exp(-L)).hp_bound));
  }
  for (std::size_t i = 1; i < lx.size(); ++i) EXPECT_NEAR((ly[i] - ly[i - 1]) / (lx[i] - lx[i - 1]), -1 / (1 + gamma), 1e-6);
}

TEST(ExtractBoundsProperty, HighProbabilityBoundNonincreasingInDelta) {
  EsiCertificate c;
  c.provenance = {"asserted: test input"};
  c.scale = ScaleFunction::power_capped(2.0, 0.7, 1.5);
  c.offset = RhsOffset::over_eta(0.3);
  double prev = kInf;
  for (double d : log_spaced(1e-9, 1.0, 50)) {
    const double hp = extract_bounds(c, d).hp_bound;
    EXPECT_LE(hp, prev + 1e-12);
    prev = hp;
  }
}

TEST(ExtractBounds, RejectsUncertified) {
  auto cert = verify_esi(Model::constant(1), std::nullopt, ScaleFunction::constant(1));
  EXPECT_THROW(extract_bounds(cert, 0.1), Error);
}

TEST(TailToEsi, HalfRateGivesTwoLogTwoOverEta) {
  for (double eta : {0.3, 1.0, 4.0}) {
    auto c = tail_to_esi({1.0, eta}, eta / 2);
    EXPECT_NEAR(c.rhs, 2 / eta * std::log(2.0), 1e-14);
    EXPECT_TRUE(c.asserted());
  }
}

TEST(TailToEsi, VanishingTailGivesZero) {
  EXPECT_LT(tail_to_esi({1e-300, 1.0}, 0.5).rhs, 1e-290);
}

TEST(TailToEsi, ExponentialIsTight) {
  auto c = tail_to_esi({1.0, 1.0}, 0.5, Model::exponential(1));
  EXPECT_NEAR(c.rhs, 2 * std::log(2.0), 1e-15);
  // E[e^{Z/2}] = 1/(1 - 1/2) = 2.
  EXPECT_NEAR(std::exp(0.5 * c.rhs), 2.0, 1e-14);
  auto rep = reverify(c);
  EXPECT_EQ(rep.verdict, Verdict::holds);
  EXPECT_NEAR(rep.worst_margin, 0.0, 1e-13);
}

TEST(TailToEsi, EtaRange) {
  EXPECT_THROW(tail_to_esi({1, 1}, 1.0), Error);
  EXPECT_THROW(tail_to_esi({1, 1}, 0.0), Error);
}

TEST(PositivePartBound, DeterministicNegative) {
  auto c = verify_esi(Model::constant(-1), std::nullopt, ScaleFunction::constant(1));
  auto p = positive_part_bound(c);
  auto rep = reverify(p);
  EXPECT_EQ(rep.verdict, Verdict::holds);
  EXPECT_NEAR(rep.worst_margin, -std::log(2.0), 1e-15);
}

TEST(PositivePartBound, RademacherOverTheGrid) {
  auto c = verify_esi(Model::rademacher(), std::nullopt, ScaleFunction::linear_capped(0.5));
  auto p = positive_part_bound(c);
  auto rep = reverify(p);
  EXPECT_EQ(rep.verdict, Verdict::holds);
  for (const auto& pt : rep.points) {
    const double eta = pt.eps / 2;
    // E[e^{eta Z_+}] = (1 + e^eta)/2 against 2 e^{eta eps}.
    const double ref = std::log(0.5 * (1 + std::exp(eta))) / eta - std::log(2.0) / eta - pt.eps;
    EXPECT_NEAR(pt.margin, ref, 1e-12 * std::max(1.0, std::abs(ref)));
  }
}

TEST(PositivePartBound, GaussianByQuadrature) {
  auto c = verify_esi(Model::gaussian(-1, 1), std::nullopt, ScaleFunction::constant(0.5));
  ASSERT_TRUE(c.holds());
  auto rep = reverify(positive_part_bound(c));
  EXPECT_EQ(rep.verdict, Verdict::holds);
  EXPECT_EQ(rep.method, EvalMethod::quadrature);
  const double m = oracle::gaussian_expect([](double x) { return std::exp(0.5 * std::max(x, 0.0)); }, -1, 1);
  EXPECT_NEAR(rep.worst_margin, 2 * std::log(m) - 2 * std::log(2.0), 1e-9);
}

TEST(PositivePartBound, WrongShape) {
  auto c = verify_esi(Model::constant(-1), Model::constant(0.5), ScaleFunction::constant(1));
  EXPECT_THROW(positive_part_bound(c), Error);
}

TEST(EsiMarkov, ReducesToMarkovWithoutNegativeMass) {
  auto [cert, b] = esi_markov(Model::exponential(1), 1.0, 3.0);
  EXPECT_NEAR(b.bound_exact, 1.0 / 3.0, 1e-15);
  EXPECT_GE(b.bound_e, b.bound_exact);
}

TEST(EsiMarkov, CorrectionPeaksAtOneOverE) {
  EsiCertificate c;
  c.provenance = {"asserted: test input"};
  c.scale = ScaleFunction::constant(1);
  const double peak = esi_markov(c, 0, std::exp(-1.0), 1).bound_exact;
  EXPECT_NEAR(peak, std::exp(-1.0), 1e-15);
  for (double p : {0.0, 0.1, 0.3, 0.5, 0.9, 1.0}) EXPECT_LE(esi_markov(c, 0, p, 1).bound_exact, peak + 1e-15);
}

TEST(EsiMarkov, TwoPointExample) {
  const Model x = Model::two_point(-1, 0.1, 9);
  const double mgf = 0.1 * std::exp(0.5) + 0.9 * std::exp(-4.5);
  EXPECT_NEAR(mgf, 0.175, 1e-3);
  auto [cert, b] = esi_markov(x, 0.5, 9.0);
  EXPECT_NEAR(b.bound_exact, 8.0 / 9.0 + 0.1 * std::log(10.0) / 4.5, 1e-14);
  EXPECT_NEAR(b.bound_exact, 0.9400, 1e-4);
  EXPECT_GE(b.bound_exact, 0.9);
}

TEST(EsiMarkov, RejectsNonpositiveA) {
  EXPECT_THROW(esi_markov(Model::exponential(1), 1.0, 0.0), Error);
}

TEST(EsiMarkovProperty, DominatesProbabilityOnRandomDiscreteModels) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> val(-2, 6), w(0.01, 1), et(0.05, 3);
  int tested = 0;
  while (tested < 300) {
    const int n = 2 + static_cast<int>(rng() % 4);
    std::vector<Atom> atoms;
    double tot = 0;
    for (int i = 0; i < n; ++i) {
      atoms.push_back({val(rng), w(rng)});
      tot += atoms.back().prob;
    }
    double acc = 0;
    for (int i = 0; i < n - 1; ++i) acc += (atoms[i].prob /= tot);
    atoms.back().prob = 1 - acc;
    const double eta = et(rng);
    double mneg = 0, mean = 0, pneg = 0;
    for (const auto& a : atoms) {
      mneg += a.prob * std::exp(-eta * a.value);
      mean += a.prob * a.value;
      if (a.value < 0) pneg += a.prob;
    }
    if (mneg > 1) continue;
    ++tested;
    const Model x = Model::finite_discrete(atoms);
    for (const auto& at : atoms) {
      if (!(at.value > 0)) continue;
      auto [cert, b] = esi_markov(x, eta, at.value);
      double p = 0;
      for (const auto& a2 : atoms)
        if (a2.value >= at.value) p += a2.prob;
      EXPECT_GE(b.bound_exact, p - 1e-12);
      EXPECT_NEAR(b.bound_exact, mean / at.value + plog_inv(pneg) / (eta * at.value), 1e-12);
    }
  }
}
