#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "neon/config.hpp"
#include "neon/core.hpp"
#include "neon/csv.hpp"

using namespace neon;

namespace {

// Reference xoshiro256** / splitmix64, transcribed from the published algorithms.
struct RefXoshiro {
  std::uint64_t s[4];
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  explicit RefXoshiro(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& v : s) {
      std::uint64_t z = (x += 0x9e3779b97f4a7c15);
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9;
      z = (z ^ (z >> 27)) * 0x94d049bb133111eb;
      v = z ^ (z >> 31);
    }
  }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

}  // namespace

TEST(ParamVector, RejectsNonFinite) {
  EXPECT_THROW(ParamVector({1.0, std::nan("")}), NumericDivergence);
  EXPECT_THROW(ParamVector({std::numeric_limits<double>::infinity()}), NumericDivergence);
  EXPECT_EQ(ParamVector({1.0, 2.0}).dim(), 2u);
}

TEST(LinComb, SpecExamples) {
  EXPECT_EQ(lin_comb(1, ParamVector({1, 2}), 0, ParamVector({9, 9})), ParamVector({1, 2}));
  EXPECT_EQ(lin_comb(2, ParamVector({1, 2}), -1, ParamVector({1, 1})), ParamVector({1, 3}));
  EXPECT_EQ(lin_comb(0.5, ParamVector({0, 0}), 0.5, ParamVector({0, 0})), ParamVector({0, 0}));
}

TEST(LinComb, DimensionMismatch) {
  EXPECT_THROW(lin_comb(1, ParamVector({1}), 1, ParamVector({1, 2})), std::invalid_argument);
}

TEST(LinComb, Linearity) {
  Rng rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> xv(7), yv(7);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : yv) v = rng.normal();
    const ParamVector x(xv), y(yv);
    const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
    const auto lhs = lin_comb(1, lin_comb(a, x, b, y), 1, lin_comb(c, x, d, y));
    const auto rhs = lin_comb(a + c, x, b + d, y);
    for (std::size_t i = 0; i < 7; ++i) {
      const double scale = std::abs(a * x[i]) + std::abs(b * y[i]) + std::abs(c * x[i]) + std::abs(d * y[i]);
      EXPECT_NEAR(lhs[i], rhs[i], 1e-12 * std::max(scale, 1.0));
    }
  }
}

TEST(DotP, SpecExamples) {
  EXPECT_EQ(dot_p(ParamVector({1, 0}), ParamVector({0, 1}), DiagPreconditioner({1, 1})), 0.0);
  EXPECT_EQ(dot_p(ParamVector({1, 2}), ParamVector({3, 4}), DiagPreconditioner({1, 1})), 11.0);
  EXPECT_EQ(dot_p(ParamVector({1, 1}), ParamVector({1, 1}), DiagPreconditioner({2, 3})), 5.0);
}

TEST(DotP, RejectsNonPositivePreconditioner) {
  EXPECT_THROW(DiagPreconditioner({1.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(DiagPreconditioner({-1.0}), std::invalid_argument);
}

TEST(DotP, SymmetricAndPositive) {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> xv(5), yv(5), pv(5);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : yv) v = rng.normal();
    for (auto& v : pv) v = 0.1 + rng.uniform();
    const ParamVector x(xv), y(yv);
    const DiagPreconditioner p(pv);
    EXPECT_NEAR(dot_p(x, y, p), dot_p(y, x, p), 1e-14 * (1 + std::abs(dot_p(x, y, p))));
    EXPECT_GT(dot_p(x, x, p), 0.0);
  }
  EXPECT_EQ(dot_p(ParamVector::zeros(3), ParamVector::zeros(3), DiagPreconditioner::identity(3)), 0.0);
}

TEST(Range, CountsAndValues) {
  EXPECT_EQ((Range{-1, 3, 0.1}).count(), 41u);
  EXPECT_EQ((Range{-1.25, 1.25, 0.05}).count(), 51u);
  const auto v = Range{0, 1, 0.25}.values();
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.back(), 1.0);
  EXPECT_THROW((Range{1, 0, 0.1}).count(), ConfigError);
  EXPECT_THROW((Range{0, 1, 0}).count(), ConfigError);
}

TEST(Rng, MatchesReferenceXoshiro) {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xDEADBEEFULL}) {
    Rng a(seed);
    RefXoshiro b(seed);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next());
  }
}

TEST(Rng, ForkIsDeterministic) {
  const Rng s(7);
  Rng a = s.fork("a"), b = s.fork("a");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = s.fork("a").fork("b"), d = Rng(7).fork("a").fork("b");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(c.next_u64(), d.next_u64());
}

TEST(Rng, ForkIgnoresParentConsumptionAndSiblingOrder) {
  Rng s(11);
  const std::uint64_t first = s.fork("x").next_u64();
  (void)s.fork("y");
  for (int i = 0; i < 10; ++i) s.next_u64();
  EXPECT_EQ(s.fork("x").next_u64(), first);
}

TEST(Rng, DistinctLabelsGiveDistinctStreams) {
  const Rng s(1);
  std::set<std::uint64_t> firsts;
  for (int i = 0; i < 1000; ++i) firsts.insert(s.fork("label" + std::to_string(i)).next_u64());
  EXPECT_EQ(firsts.size(), 1000u);
  std::set<std::uint64_t> by_index;
  for (std::uint64_t i = 0; i < 1000; ++i) by_index.insert(s.fork(i).next_u64());
  EXPECT_EQ(by_index.size(), 1000u);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng r(9);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  // 5 sigma envelopes
  EXPECT_NEAR(su / n, 0.5, 5 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sn / n, 0.0, 5 / std::sqrt(double(n)));
  EXPECT_NEAR(sn2 / n, 1.0, 5 * std::sqrt(2.0 / n));
}

TEST(Rng, BelowIsInRangeAndRejectsZero) {
  Rng r(2);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Csv, FormatsAndNan) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(format_double(std::nan("")), "nan");
  EXPECT_EQ(format_double(2.0), "2");
  ResultTable t({"a", "b"});
  t.add_row({1.5, std::string("x")});
  t.add_row({std::nan(""), std::int64_t{3}});
  EXPECT_EQ(t.to_csv(), "a,b\n1.5,x\nnan,3\n");
  EXPECT_THROW(t.add_row({1.0}), std::invalid_argument);
}

TEST(Csv, RoundTripsDoublesExactly) {
  Rng r(4);
  for (int i = 0; i < 1000; ++i) {
    const double v = r.normal() * std::pow(10.0, r.normal() * 5);
    EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  }
}

TEST(Config, ParsesTypedValues) {
  const Config c = Config::parse("# comment\nseed = 7\nzetas = 0.9, 1.1  # trailing\nw = -1:1:0.5\nflag=true\n");
  EXPECT_EQ(c.get_uint("seed", 0), 7u);
  EXPECT_EQ(c.get_doubles("zetas", {}), (std::vector<double>{0.9, 1.1}));
  EXPECT_EQ(c.get_doubles("w", {}), (std::vector<double>{-1, -0.5, 0, 0.5, 1}));
  EXPECT_TRUE(c.get_bool("flag", false));
  EXPECT_EQ(c.get_double("missing", 2.5), 2.5);
}

TEST(Config, Errors) {
  EXPECT_THROW(Config::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(Config::parse("just words\n"), ConfigError);
  EXPECT_THROW(Config::parse("= 3\n"), ConfigError);
  const Config c = Config::parse("seed = x\nlr = nan\nbogus = 1\n");
  EXPECT_THROW(c.get_uint("seed", 0), ConfigError);
  EXPECT_THROW(c.get_double("lr", 0), ConfigError);
  EXPECT_THROW(c.require_known({"seed", "lr"}), ConfigError);
  EXPECT_NO_THROW(c.require_known({"seed", "lr", "bogus"}));
  EXPECT_THROW(Config::load("/nonexistent/file.cfg"), IoError);
}
