#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "neon/metrics.hpp"

using namespace neon;

namespace {

// Brute-force improved precision/recall: full sort of every distance row.
PrecisionRecall pr_oracle(const SampleSet& real, const SampleSet& fake, std::size_t k) {
  auto radii = [k](const SampleSet& s) {
    std::vector<double> r(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::vector<double> d;
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (j == i) continue;
        const double dx = s[i][0] - s[j][0], dy = s[i][1] - s[j][1];
        d.push_back(dx * dx + dy * dy);
      }
      std::sort(d.begin(), d.end());
      r[i] = d[k - 1];
    }
    return r;
  };
  auto frac = [](const SampleSet& refs, const std::vector<double>& r, const SampleSet& q) {
    std::size_t in = 0;
    for (const auto& x : q) {
      bool hit = false;
      for (std::size_t j = 0; j < refs.size(); ++j) {
        const double dx = x[0] - refs[j][0], dy = x[1] - refs[j][1];
        hit = hit || dx * dx + dy * dy <= r[j];
      }
      in += hit;
    }
    return static_cast<double>(in) / static_cast<double>(q.size());
  };
  const auto rr = radii(real), rf = radii(fake);
  return {frac(real, rr, fake), frac(fake, rf, real)};
}

SampleSet random_set(Rng& r, std::size_t n, bool lattice) {
  SampleSet s(n);
  const double shift = r.normal();
  for (auto& x : s) {
    if (lattice) {
      // integer lattice: many exact distance ties and duplicate points
      x = {static_cast<double>(r.below(6)), static_cast<double>(r.below(6))};
    } else {
      x = {r.normal() + shift, r.normal()};
    }
  }
  return s;
}

}  // namespace

TEST(Frechet, SpecExamples) {
  Rng r(1);
  const SampleSet a = gauss_sample(GaussianParams::from_moments({0, 0}, {2, 1, 2}), 500, r);
  EXPECT_EQ(frechet_2d(a, a), 0.0);
  SampleSet b = a;
  for (auto& x : b) x = {x[0] + 3, x[1] + 4};
  EXPECT_NEAR(frechet_2d(a, b), 25.0, 1e-9);
}

TEST(Frechet, CommutingCovariances) {
  // Sets whose MLE covariances are exactly 4I and I: W2^2 = tr(4I + I - 2*2I) = 2.
  const SampleSet unit{{1, 0}, {-1, 0}, {0, 1}, {0, -1}};  // mean 0, cov I/2
  SampleSet a, b;
  for (const auto& x : unit) a.push_back({x[0] * std::sqrt(8.0), x[1] * std::sqrt(8.0)});
  for (const auto& x : unit) b.push_back({x[0] * std::sqrt(2.0), x[1] * std::sqrt(2.0)});
  EXPECT_NEAR(frechet_2d(a, b), 2.0, 1e-9);
}

TEST(Frechet, ConsistentWithW2AndSymmetric) {
  Rng r(2);
  for (int i = 0; i < 50; ++i) {
    const SampleSet a = random_set(r, 100, false), b = random_set(r, 80, false);
    const double w = w2_gaussian(fit_moments(a), fit_moments(b));
    EXPECT_NEAR(frechet_2d(a, b), w * w, 1e-9);
    EXPECT_NEAR(frechet_2d(a, b), frechet_2d(b, a), 1e-9);
    EXPECT_GE(frechet_2d(a, b), 0.0);
  }
}

TEST(Frechet, RejectsDegenerate) {
  EXPECT_THROW(frechet_2d({{0, 0}, {1, 1}}, {{0, 0}, {1, 0}, {0, 1}}), std::invalid_argument);
  EXPECT_THROW(frechet_2d({{0, 0}, {1, 1}, {2, 2}}, {{0, 0}, {1, 0}, {0, 1}}), std::invalid_argument);
}

TEST(PrecisionRecall, IdenticalSetsArePerfect) {
  Rng r(3);
  const SampleSet a = random_set(r, 50, false);
  const auto pr = precision_recall(a, a);
  EXPECT_EQ(pr.precision, 1.0);
  EXPECT_EQ(pr.recall, 1.0);
}

TEST(PrecisionRecall, DisjointClustersAreZero) {
  Rng r(4);
  SampleSet a = random_set(r, 50, false), b = random_set(r, 50, false);
  for (auto& x : b) x[0] += 1000;
  const auto pr = precision_recall(a, b);
  EXPECT_EQ(pr.precision, 0.0);
  EXPECT_EQ(pr.recall, 0.0);
}

TEST(PrecisionRecall, HexagonWithCentroid) {
  SampleSet hex;
  for (int i = 0; i < 6; ++i) {
    const double a = i * std::numbers::pi / 3;
    hex.push_back({std::cos(a), std::sin(a)});
  }
  // Each vertex's 5th-nearest other vertex is the opposite one at distance 2, so
  // every real ball has radius 2 and contains the centroid.
  SampleSet fake(6, Vec2{0.0, 0.0});
  const auto pr = precision_recall(hex, fake, {5});
  const auto oracle = pr_oracle(hex, fake, 5);
  EXPECT_EQ(pr.precision, 1.0);
  EXPECT_EQ(pr.precision, oracle.precision);
  EXPECT_EQ(pr.recall, oracle.recall);
  // fake points coincide, so their 5-NN radius is 0: no real point is covered.
  EXPECT_EQ(pr.recall, 0.0);
}

TEST(PrecisionRecall, MatchesBruteForceOracle) {
  Rng r(5);
  for (int inst = 0; inst < 200; ++inst) {
    const bool lattice = inst % 3 == 0;
    const std::size_t n1 = 6 + r.below(195), n2 = 6 + r.below(195);
    const SampleSet a = random_set(r, n1, lattice), b = random_set(r, n2, lattice);
    const auto got = precision_recall(a, b, {5});
    const auto want = pr_oracle(a, b, 5);
    ASSERT_EQ(got.precision, want.precision) << "instance " << inst;
    ASSERT_EQ(got.recall, want.recall) << "instance " << inst;
  }
}

TEST(PrecisionRecall, RigidMotionInvariant) {
  Rng r(6);
  for (int inst = 0; inst < 20; ++inst) {
    const SampleSet a = random_set(r, 60, false), b = random_set(r, 70, false);
    const double th = r.uniform() * 6.28, tx = r.normal(), ty = r.normal();
    auto move = [&](SampleSet s) {
      for (auto& x : s) x = {std::cos(th) * x[0] - std::sin(th) * x[1] + tx, std::sin(th) * x[0] + std::cos(th) * x[1] + ty};
      return s;
    };
    const auto p0 = precision_recall(a, b), p1 = precision_recall(move(a), move(b));
    EXPECT_NEAR(p0.precision, p1.precision, 1e-12);
    EXPECT_NEAR(p0.recall, p1.recall, 1e-12);
  }
}

TEST(PrecisionRecall, RejectsSmallSets) {
  const SampleSet five(5, Vec2{0, 0});
  EXPECT_THROW(precision_recall(five, five, {5}), std::invalid_argument);
  EXPECT_THROW(precision_recall(five, five, {0}), std::invalid_argument);
}
