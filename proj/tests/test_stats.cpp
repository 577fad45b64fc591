#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "milbench/stats.hpp"
#include "oracles.hpp"

using namespace milbench;

namespace {

// Scores on a coarse grid so ties are common.
std::vector<double> tied_scores(std::mt19937_64& gen, std::size_t n, int levels) {
  std::vector<double> s(n);
  for (auto& v : s) v = static_cast<double>(gen() % static_cast<std::uint64_t>(levels)) / levels;
  return s;
}

std::vector<int> two_class_labels(std::mt19937_64& gen, std::size_t n) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(gen() % 2);
  y[0] = 0;
  y[1] = 1;
  return y;
}

}  // namespace

TEST(Auc, SmallKnownExample) {
  const std::vector<int> y{0, 0, 1, 1};
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  EXPECT_DOUBLE_EQ(auc(y, s), 0.75);
  const std::vector<double> all_tied{0.5, 0.5, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(auc(y, all_tied), 0.5);
}

TEST(Auc, EqualsPairCountingWithTies) {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + gen() % 200;
    const auto y = two_class_labels(gen, n);
    const auto s = tied_scores(gen, n, 1 + static_cast<int>(gen() % 20));
    EXPECT_NEAR(auc(y, s), oracle::pair_auc(y, s), 1e-12);
  }
}

TEST(Auc, RejectsDegenerateInput) {
  const std::vector<int> one_class{1, 1, 1};
  const std::vector<double> s{0.1, 0.2, 0.3};
  EXPECT_THROW(auc(one_class, s), NumericError);
  const std::vector<int> y{0, 1};
  const std::vector<double> nan{0.1, std::nan("")};
  EXPECT_THROW(auc(y, nan), ValidationError);
  const std::vector<double> short_s{0.1};
  EXPECT_THROW(auc(y, short_s), ValidationError);
}

TEST(Auc, MacroOneVsRestSkipsAbsentClasses) {
  std::mt19937_64 gen(32);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + gen() % 60, c = 3 + gen() % 3;
    std::vector<int> y(n);
    // class c-1 never appears in odd trials
    const std::size_t used = trial % 2 ? c - 1 : c;
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i < used ? i : gen() % used);
    ScoreTable t(n, c);
    for (auto& v : t.values) v = static_cast<double>(gen() % 7) / 7.0;
    EXPECT_NEAR(task_auc(y, t), oracle::macro_auc(y, t), 1e-12);
  }
}

TEST(Bootstrap, IsDeterministicAndIndependentOfJobs) {
  std::mt19937_64 gen(33);
  const auto y = two_class_labels(gen, 40);
  const auto s = tied_scores(gen, 40, 9);
  const auto a = bootstrap_auc(y, s, 500, 11, 1);
  EXPECT_EQ(a, bootstrap_auc(y, s, 500, 11, 4));
  EXPECT_NE(a, bootstrap_auc(y, s, 500, 12, 1));
  EXPECT_DOUBLE_EQ(a.point_auc, auc(y, s));
  EXPECT_LE(a.ci_low, a.median_auc);
  EXPECT_LE(a.median_auc, a.ci_high);
  EXPECT_EQ(a.n_boot, 500u);
}

TEST(Bootstrap, SurvivesRareClasses) {
  // one positive in 30: most resamples miss it and must be redrawn
  std::vector<int> y(30, 0);
  y[7] = 1;
  std::vector<double> s(30);
  for (std::size_t i = 0; i < 30; ++i) s[i] = static_cast<double>(i) / 30.0;
  const auto r = bootstrap_auc(y, s, 200, 1);
  EXPECT_EQ(r.n_boot, 200u);
  EXPECT_GE(r.ci_low, 0.0);
  EXPECT_LE(r.ci_high, 1.0);
  const std::vector<int> single{1, 1};
  const std::vector<double> two{0.1, 0.2};
  EXPECT_THROW(bootstrap_auc(single, two, 10, 1), NumericError);
}

TEST(Quantile, LinearInterpolation) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.025), 1.1);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.975), 4.9);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 5.0);
}

TEST(Permutation, ApproachesExactEnumeration) {
  std::mt19937_64 gen(34);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t n = 6 + gen() % 5;
    const auto y = two_class_labels(gen, n);
    auto a = tied_scores(gen, n, 6), b = tied_scores(gen, n, 6);
    const double exact = oracle::exact_swap_p(y, a, b);
    const std::size_t n_perm = 20000;
    const auto r = permutation_test_full(y, ScoreTable::column(a), ScoreTable::column(b), n_perm, 100 + trial);
    // add-one smoothing shifts the estimate by at most 1 / (n_perm + 1)
    EXPECT_NEAR(r.a_over_b, exact, 0.015) << "trial " << trial;
    EXPECT_NEAR(r.b_over_a, oracle::exact_swap_p(y, b, a), 0.015);
  }
}

TEST(Permutation, SmoothingAndJobInvariance) {
  std::mt19937_64 gen(35);
  const auto y = two_class_labels(gen, 30);
  const auto a = tied_scores(gen, 30, 10), b = tied_scores(gen, 30, 10);
  const double p1 = permutation_test(y, a, b, 999, 3, Sided::one, 1);
  EXPECT_EQ(p1, permutation_test(y, a, b, 999, 3, Sided::one, 3));
  EXPECT_GT(p1, 0.0);
  // (1 + k) / 1000 lands on a multiple of 1e-3
  EXPECT_NEAR(std::round(p1 * 1000.0), p1 * 1000.0, 1e-9);
  // identical models: every permutation ties the observed delta
  EXPECT_DOUBLE_EQ(permutation_test(y, a, a, 99, 3), 1.0);
  EXPECT_DOUBLE_EQ(permutation_test(y, a, a, 99, 3, Sided::two), 1.0);
}

TEST(Holm, KnownVector) {
  const std::vector<double> p{0.01, 0.04, 0.03};
  const auto adj = holm_adjust(p);
  const std::vector<double> want{0.03, 0.06, 0.06};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(adj[i], want[i], 1e-15);
}

TEST(Holm, MatchesDefinitionOnRandomFamilies) {
  std::mt19937_64 gen(36);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + gen() % 9;
    std::vector<double> p(m);
    for (auto& v : p) v = static_cast<double>(1 + gen() % 50) / 100.0;  // frequent ties
    const auto got = holm_adjust(p), want = oracle::holm(p);
    for (std::size_t i = 0; i < m; ++i) {
      EXPECT_NEAR(got[i], want[i], 1e-15);
      EXPECT_GE(got[i], p[i]);
      EXPECT_LE(got[i], 1.0);
    }
  }
  const std::vector<double> bad{0.0};
  EXPECT_THROW(holm_adjust(bad), ValidationError);
}

TEST(Fisher, KnownValuesAndClosedForm) {
  const std::vector<double> two{0.05, 0.05};
  EXPECT_NEAR(fisher_combine(two), 0.01748, 1e-4);
  std::mt19937_64 gen(37);
  std::uniform_real_distribution<double> ud(1e-6, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double p = ud(gen), q = ud(gen);
    const std::vector<double> single{p}, pair{p, q};
    EXPECT_NEAR(fisher_combine(single), p, 1e-12);
    EXPECT_NEAR(fisher_combine(pair), oracle::fisher2(p, q), 1e-12);
  }
  const std::vector<double> ones{1.0, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(fisher_combine(ones), 1.0);
  EXPECT_THROW(fisher_combine(std::vector<double>{}), ValidationError);
}

TEST(GammaQ, AgreesWithClosedFormsForIntegerShape) {
  // Q(k, x) = e^{-x} sum_{i<k} x^i / i!
  for (int k = 1; k <= 12; ++k)
    for (double x : {0.01, 0.5, 1.0, 3.0, 7.5, 20.0, 60.0}) {
      double term = 1.0, sum = 0.0;
      for (int i = 0; i < k; ++i) {
        sum += term;
        term *= x / (i + 1);
      }
      const double want = std::exp(-x) * sum;
      EXPECT_NEAR(gamma_q(k, x), want, 1e-13 + 1e-12 * want) << k << " " << x;
    }
  EXPECT_NEAR(gamma_q(0.5, 2.0), std::erfc(std::sqrt(2.0)), 1e-14);
}

namespace {

TaskPredictions make_task(std::mt19937_64& gen, const std::string& id, std::size_t n,
                          const std::vector<double>& strength) {
  TaskPredictions t;
  t.task_id = id;
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < n; ++i) {
    t.slide_ids.push_back(id + std::to_string(i));
    t.labels.push_back(static_cast<int>(i % 2));
  }
  for (double s : strength) {
    std::vector<double> sc(n);
    for (std::size_t i = 0; i < n; ++i) sc[i] = s * t.labels[i] + nd(gen);
    t.model_scores.push_back(ScoreTable::column(sc));
  }
  return t;
}

}  // namespace

TEST(Pairwise, StrongerModelWinsAndCellsFollowDefinition) {
  std::mt19937_64 gen(38);
  const std::vector<std::string> ids{"strong", "weak", "noise"};
  const std::vector<double> strength{3.0, 1.0, 0.0};
  const std::vector<TaskPredictions> tasks{make_task(gen, "a", 80, strength), make_task(gen, "b", 80, strength)};
  const auto m = pairwise_matrix(ids, tasks, 500, 9, Sided::one, 1);
  ASSERT_EQ(m.n_models(), 3u);
  EXPECT_TRUE(std::isnan(m.fisher_p(1, 1)));
  EXPECT_LT(m.fisher_p(0, 2), 0.01);
  EXPECT_GT(m.fisher_p(2, 0), 0.5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      const std::vector<double> raw{m.raw_p(i, j, 0), m.raw_p(i, j, 1)};
      const auto adj = oracle::holm(raw);
      EXPECT_DOUBLE_EQ(m.holm_p(i, j, 0), adj[0]);
      EXPECT_DOUBLE_EQ(m.holm_p(i, j, 1), adj[1]);
      EXPECT_NEAR(m.fisher_p(i, j), std::min(1.0, oracle::fisher2(adj[0], adj[1])), 1e-12);
    }
  const auto again = pairwise_matrix(ids, tasks, 500, 9, Sided::one, 3);
  ASSERT_EQ(m.raw.size(), again.raw.size());
  for (std::size_t k = 0; k < m.raw.size(); ++k)
    if (!std::isnan(m.raw[k])) {
      EXPECT_EQ(m.raw[k], again.raw[k]);
    }
}

TEST(Pairwise, RejectsTooSmallFamilies) {
  std::mt19937_64 gen(39);
  const std::vector<std::string> two{"x", "y"}, one{"x"};
  const std::vector<TaskPredictions> single{make_task(gen, "a", 10, {1.0, 0.0})};
  EXPECT_THROW(pairwise_matrix(two, single, 10, 1), ValidationError);
  const std::vector<TaskPredictions> tasks{make_task(gen, "a", 10, {1.0}), make_task(gen, "b", 10, {1.0})};
  EXPECT_THROW(pairwise_matrix(one, tasks, 10, 1), ValidationError);
}
