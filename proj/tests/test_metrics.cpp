#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "tseg/error.hpp"
#include "tseg/metrics.hpp"
#include "tseg/rng.hpp"

using namespace tseg;

namespace {

double oracle_dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int na = 0, nb = 0, nab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    nab += a[i] && b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * nab / (na + nb);
}

// Two-sided Student-t tail by Simpson integration of the density.
double t_two_sided_p(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 200000;
  const double h = std::abs(t) / n;
  double s = pdf(0) + pdf(std::abs(t));
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  const double central = s * h / 3;  // integral from 0 to |t|
  return 1.0 - 2.0 * central;
}

}  // namespace

TEST_CASE("dice examples") {
  std::vector<std::uint8_t> a{1, 1, 0, 0}, empty(4, 0);
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(dice(a, empty) == 0.0);
  CHECK(dice(empty, a) == 0.0);
  std::vector<std::uint8_t> p(16, 0), g(16, 0);
  for (int i : {0, 1, 2, 3}) p[i] = 1;
  for (int i : {3, 4, 5, 6}) g[i] = 1;
  CHECK(dice(p, g) == doctest::Approx(0.25));
  CHECK_THROWS_AS(dice(p, a), Error);
}

TEST_CASE("dice agrees with a counting oracle and is symmetric") {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::uint8_t> a(64 * 64), b(64 * 64);
    const double pa = trial % 10 == 0 ? 0.0 : rng.uniform(), pb = trial % 7 == 0 ? 0.0 : rng.uniform();
    for (auto& v : a) v = rng.uniform() < pa;
    for (auto& v : b) v = rng.uniform() < pb;
    REQUIRE(dice(a, b) == oracle_dice(a, b));
    REQUIRE(dice(a, b) == dice(b, a));
    REQUIRE(dice(a, a) == 1.0);
  }
}

TEST_CASE("multiclass dice") {
  RasterMask gt(4, 4, 3), pred(4, 4, 3);
  gt.assign({1, 1, 2, 2, 1, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0});
  auto same = multiclass_dice(gt, gt, {1, 2});
  CHECK(same.per_class == std::vector<double>{1.0, 1.0});
  auto bg = multiclass_dice(pred, gt, {1, 2});
  CHECK(bg.per_class == std::vector<double>{0.0, 0.0});
  CHECK(bg.mean == 0.0);
  pred.assign({1, 0, 2, 2, 1, 1, 1, 2, 0, 0, 0, 2, 0, 0, 0, 0});
  // class 1: pred 4 px, gt 4 px, shared 3 -> 6/8. class 2: pred 4, gt 4, shared 3 -> 6/8.
  auto mixed = multiclass_dice(pred, gt, {1, 2});
  CHECK(mixed.per_class[0] == doctest::Approx(0.75));
  CHECK(mixed.per_class[1] == doctest::Approx(0.75));
  CHECK(mixed.mean == doctest::Approx(0.75));
  CHECK_THROWS_AS(multiclass_dice(RasterMask(3, 3), gt, {1}), Error);
}

TEST_CASE("bootstrap_ci") {
  std::vector<double> c(25, 0.3);
  auto flat = bootstrap_ci(c, 500, 0.95, 1);
  CHECK(flat.lower == doctest::Approx(0.3));
  CHECK(flat.upper == doctest::Approx(0.3));

  std::vector<double> coins(100);
  for (std::size_t i = 0; i < coins.size(); ++i) coins[i] = i % 2;
  auto r1 = bootstrap_ci(coins, 10000, 0.95, 7);
  auto r2 = bootstrap_ci(coins, 10000, 0.95, 7);
  CHECK(r1.lower == r2.lower);
  CHECK(r1.upper == r2.upper);
  CHECK(r1.lower <= 0.5);
  CHECK(r1.upper >= 0.5);

  // Independent resampling run with a different generator.
  std::mt19937 gen(99);
  std::uniform_int_distribution<std::size_t> pick(0, coins.size() - 1);
  std::vector<double> means(10000);
  for (auto& m : means) {
    double s = 0;
    for (std::size_t i = 0; i < coins.size(); ++i) s += coins[pick(gen)];
    m = s / coins.size();
  }
  std::sort(means.begin(), means.end());
  CHECK(std::abs(r1.lower - means[250]) < 0.02);
  CHECK(std::abs(r1.upper - means[9749]) < 0.02);
  CHECK_THROWS_AS(bootstrap_ci(std::vector<double>{}, 10), Error);
}

TEST_CASE("bootstrap width shrinks with sample size") {
  int narrower = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(100 + s);
    std::vector<double> small(20), large(200);
    for (auto& v : small) v = rng.uniform();
    for (auto& v : large) v = rng.uniform();
    const auto a = bootstrap_ci(small, 2000, 0.95, s), b = bootstrap_ci(large, 2000, 0.95, s);
    narrower += (b.upper - b.lower) <= (a.upper - a.lower);
  }
  CHECK(narrower >= 9);
}

TEST_CASE("paired t-test") {
  std::vector<double> a{0.5, 0.6, 0.7};
  CHECK_THROWS_AS(paired_ttest(a, a), Error);
  std::vector<double> ones{2, 3, 4, 5}, base{1, 2, 3, 4};
  auto flagged = paired_ttest(ones, base);
  CHECK(flagged.zero_variance);
  CHECK(flagged.p == 0.0);

  std::vector<double> x{0.1, 0.2, 0.3}, zero{0, 0, 0};
  auto r = paired_ttest(x, zero);
  const double mean = 0.2, sd = 0.1;
  CHECK(r.t == doctest::Approx(mean / (sd / std::sqrt(3.0))));
  CHECK(r.p == doctest::Approx(t_two_sided_p(r.t, 2)).epsilon(1e-7));
  CHECK(paired_ttest(zero, x).t == doctest::Approx(-r.t));

  Rng rng(3);
  std::vector<double> u(30), v(30);
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = rng.uniform();
    v[i] = u[i] + rng.normal(0.05, 0.1);
  }
  auto q = paired_ttest(u, v);
  CHECK(q.p == doctest::Approx(t_two_sided_p(q.t, 29)).epsilon(1e-7));
  CHECK(significance_stars(0.0004) == "***");
  CHECK(significance_stars(0.004) == "**");
  CHECK(significance_stars(0.04) == "*");
  CHECK(significance_stars(0.4) == "ns");
}

TEST_CASE("spearman") {
  std::vector<double> x{1, 2, 3, 4, 5}, neg{-1, -2, -3, -4, -5};
  CHECK(spearman(x, x) == doctest::Approx(1.0));
  CHECK(spearman(x, neg) == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 1, 2}) == doctest::Approx(-0.5));
  CHECK(average_ranks(std::vector<double>{10, 20, 20, 5}) == std::vector<double>{2, 3.5, 3.5, 1});
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), Error);
}

TEST_CASE("aggregate by organ and category") {
  std::vector<DiceRecord> one{{"s1", "tumor", "colon", "tumor-related", 0.4},
                              {"s2", "tumor", "colon", "tumor-related", 0.8}};
  auto g = aggregate(one, "organ", 200, 0);
  REQUIRE(g.size() == 1);
  CHECK(g[0].ci.mean == doctest::Approx(0.6));

  std::vector<DiceRecord> two{{"a", "x", "lung", "c1", 0.2}, {"b", "x", "skin", "c1", 0.8}};
  auto t = aggregate(two, "organ", 100, 0);
  CHECK(t[0].key == "lung");
  CHECK(t[0].ci.mean == doctest::Approx(0.2));
  CHECK(t[1].ci.mean == doctest::Approx(0.8));

  std::vector<DiceRecord> ten;
  const char* organs[] = {"colon", "lung", "skin"};
  double sums[3] = {0, 0, 0};
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 10; ++i) {
    const double d = 0.05 * i + 0.1;
    ten.push_back({"s" + std::to_string(i), "c", organs[i % 3], "cat", d});
    sums[i % 3] += d;
    counts[i % 3]++;
  }
  auto by = aggregate(ten, "organ", 100, 0);
  REQUIRE(by.size() == 3);
  for (int k = 0; k < 3; ++k) CHECK(by[k].ci.mean == doctest::Approx(sums[k] / counts[k]));
  CHECK(aggregate(ten, "category", 100, 0).size() == 1);
  CHECK_THROWS_AS(aggregate(ten, "dataset"), Error);
}

TEST_CASE("dice CSV round trip") {
  std::vector<DiceRecord> r{{"s1", "tumor", "colon", "tumor-related", 0.25}, {"s2", "stroma", "", "", 1.0}};
  const auto parsed = parse_dice_csv(dice_records_to_csv(r));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0].dice == 0.25);
  CHECK(parsed[1].organ.empty());
  CHECK_THROWS_AS(parse_dice_csv("sample_id,class,organ,category,dice\na,b,c,d,1.5\n"), Error);
  CHECK_THROWS_AS(parse_dice_csv("wrong\n"), Error);
}
