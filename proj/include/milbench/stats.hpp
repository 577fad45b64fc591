#pragma once

// AUC, bootstrap confidence intervals, paired permutation tests, Holm
// step-down adjustment, Fisher combination and the pairwise superiority
// matrix built from them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/parallel.hpp"
#include "milbench/rng.hpp"

namespace milbench {

/// Row-major n x width table of per-slide scores. Width 1 holds binary
/// probabilities; width C holds class probability vectors.
struct ScoreTable {
  std::size_t n_rows = 0;
  std::size_t width = 1;
  std::vector<double> values;

  ScoreTable() = default;
  ScoreTable(std::size_t rows, std::size_t w) : n_rows(rows), width(w), values(rows * w, 0.0) {}

  static ScoreTable column(std::vector<double> scores) {
    ScoreTable t;
    t.n_rows = scores.size();
    t.width = 1;
    t.values = std::move(scores);
    return t;
  }

  std::span<double> row(std::size_t i) { return {values.data() + i * width, width}; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * width, width}; }
  double at(std::size_t i, std::size_t c) const { return values[i * width + c]; }

  std::vector<double> col(std::size_t c) const {
    std::vector<double> out(n_rows);
    for (std::size_t i = 0; i < n_rows; ++i) out[i] = at(i, c);
    return out;
  }

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

namespace detail {

/// Twice the Mann-Whitney U statistic (correct pairs count 2, ties 1),
/// computed exactly in integers by a sweep over tie groups.
struct PairCount {
  std::uint64_t twice_u = 0;
  std::uint64_t n_pos = 0;
  std::uint64_t n_neg = 0;
};

template <typename IsPositive>
PairCount count_pairs(std::size_t n, std::span<const double> scores, IsPositive&& positive) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  PairCount pc;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (positive(order[j]) ? pos : neg) += 1;
      ++j;
    }
    pc.twice_u += 2 * pos * pc.n_neg + pos * neg;
    pc.n_pos += pos;
    pc.n_neg += neg;
    i = j;
  }
  return pc;
}

inline void check_scores(std::span<const double> scores) {
  for (double s : scores)
    if (std::isnan(s)) throw ValidationError("auc: NaN score");
}

}  // namespace detail

/// Binary AUC in Mann-Whitney form: (#correctly ordered pairs + ties/2) / (n+ n-).
/// Labels must be 0 or 1.
inline double auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ValidationError("auc: labels and scores differ in length");
  detail::check_scores(scores);
  for (int y : labels)
    if (y != 0 && y != 1) throw ValidationError("auc: binary labels must be 0 or 1");
  const auto pc = detail::count_pairs(labels.size(), scores, [&](std::size_t i) { return labels[i] == 1; });
  if (pc.n_pos == 0 || pc.n_neg == 0) throw NumericError("auc: undefined, only one class present");
  return static_cast<double>(pc.twice_u) / (2.0 * static_cast<double>(pc.n_pos) * static_cast<double>(pc.n_neg));
}

inline std::size_t count_classes_present(std::span<const int> labels) {
  std::vector<int> seen(labels.begin(), labels.end());
  std::sort(seen.begin(), seen.end());
  return static_cast<std::size_t>(std::unique(seen.begin(), seen.end()) - seen.begin());
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
/// Column c of `scores` is the score of class c.
inline double auc_macro_ovr(std::span<const int> labels, const ScoreTable& scores) {
  if (labels.size() != scores.n_rows) throw ValidationError("auc: labels and scores differ in length");
  detail::check_scores(scores.values);
  std::vector<std::size_t> present(scores.width, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= scores.width)
      throw ValidationError("auc: label " + std::to_string(y) + " has no score column");
    ++present[static_cast<std::size_t>(y)];
  }
  const auto n_present = std::count_if(present.begin(), present.end(), [](std::size_t k) { return k > 0; });
  if (n_present < 2) throw NumericError("auc: undefined, only one class present");
  double sum = 0.0;
  std::vector<double> col;
  for (std::size_t c = 0; c < scores.width; ++c) {
    if (present[c] == 0) continue;
    col = scores.col(c);
    const auto pc = detail::count_pairs(labels.size(), col, [&](std::size_t i) { return labels[i] == static_cast<int>(c); });
    sum += static_cast<double>(pc.twice_u) / (2.0 * static_cast<double>(pc.n_pos) * static_cast<double>(pc.n_neg));
  }
  return sum / static_cast<double>(n_present);
}

/// Binary AUC for width-1 tables, macro one-vs-rest otherwise.
inline double task_auc(std::span<const int> labels, const ScoreTable& scores) {
  if (scores.width == 1) return auc(labels, scores.values);
  return auc_macro_ovr(labels, scores);
}

struct AucSummary {
  double point_auc = 0.0;
  double median_auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_boot = 0;
  friend bool operator==(const AucSummary&, const AucSummary&) = default;
};

/// Linear-interpolation quantile of sorted data (numpy's default).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

/// Percentile bootstrap over slides. Replicate b draws from its own stream
/// (seed, b); a draw lacking two classes is redrawn from the same stream, so
/// exactly n_boot replicates contribute and the result does not depend on
/// `jobs`.
inline AucSummary bootstrap_auc(std::span<const int> labels, const ScoreTable& scores, std::size_t n_boot,
                                std::uint64_t seed, std::size_t jobs = 1) {
  const std::size_t n = labels.size();
  if (n != scores.n_rows) throw ValidationError("bootstrap: labels and scores differ in length");
  if (n_boot == 0) throw ValidationError("bootstrap: n_boot must be positive");
  if (count_classes_present(labels) < 2)
    throw NumericError("bootstrap: degenerate cohort, fewer than two classes present");
  AucSummary s;
  s.point_auc = task_auc(labels, scores);
  s.n_boot = n_boot;
  std::vector<double> reps(n_boot);
  constexpr int kMaxRedraws = 10000;
  parallel_for(n_boot, jobs, [&](std::size_t b) {
    rng::Stream stream(rng::combine(seed, static_cast<std::uint64_t>(b)));
    std::vector<int> y(n);
    ScoreTable t(n, scores.width);
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxRedraws) throw NumericError("bootstrap: could not draw a replicate with two classes");
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(stream.below(n));
        y[i] = labels[k];
        std::copy_n(scores.row(k).begin(), scores.width, t.row(i).begin());
      }
      if (count_classes_present(y) >= 2) break;
    }
    reps[b] = task_auc(y, t);
  });
  std::sort(reps.begin(), reps.end());
  s.median_auc = quantile_sorted(reps, 0.5);
  s.ci_low = quantile_sorted(reps, 0.025);
  s.ci_high = quantile_sorted(reps, 0.975);
  return s;
}

inline AucSummary bootstrap_auc(std::span<const int> labels, std::span<const double> scores, std::size_t n_boot,
                                std::uint64_t seed, std::size_t jobs = 1) {
  return bootstrap_auc(labels, ScoreTable::column({scores.begin(), scores.end()}), n_boot, seed, jobs);
}

enum class Sided { one, two };

/// Both one-sided p-values of a paired swap test, from a single set of
/// permutations: `a_over_b` tests auc(a) > auc(b), `b_over_a` the reverse.
struct PermutationResult {
  double observed_delta = 0.0;
  double a_over_b = 1.0;
  double b_over_a = 1.0;
  double two_sided = 1.0;
};

/// Paired permutation test. Permutation k swaps the two models' scores on
/// each slide with probability 1/2, using stream (seed, k). p-values carry
/// add-one smoothing: (1 + #{extreme}) / (n_perm + 1).
inline PermutationResult permutation_test_full(std::span<const int> labels, const ScoreTable& a, const ScoreTable& b,
                                               std::size_t n_perm, std::uint64_t seed, std::size_t jobs = 1) {
  const std::size_t n = labels.size();
  if (a.n_rows != n || b.n_rows != n || a.width != b.width)
    throw ValidationError("permutation test: score tables are not aligned with the labels");
  if (n_perm == 0) throw ValidationError("permutation test: n_perm must be positive");
  const double observed = task_auc(labels, a) - task_auc(labels, b);
  // AUC deltas are rationals with denominators <= n^2; 1e-12 only absorbs rounding
  constexpr double kTol = 1e-12;
  std::vector<double> deltas(n_perm);
  parallel_for(n_perm, jobs, [&](std::size_t k) {
    rng::Stream stream(rng::combine(seed, static_cast<std::uint64_t>(k)));
    ScoreTable pa = a, pb = b;
    for (std::size_t i = 0; i < n; ++i)
      if (stream.coin()) std::swap_ranges(pa.row(i).begin(), pa.row(i).end(), pb.row(i).begin());
    deltas[k] = task_auc(labels, pa) - task_auc(labels, pb);
  });
  std::size_t ge = 0, le = 0, abs_ge = 0;
  for (double d : deltas) {
    ge += d >= observed - kTol;
    le += d <= observed + kTol;
    abs_ge += std::abs(d) >= std::abs(observed) - kTol;
  }
  const double denom = static_cast<double>(n_perm) + 1.0;
  return {observed, (1.0 + static_cast<double>(ge)) / denom, (1.0 + static_cast<double>(le)) / denom,
          (1.0 + static_cast<double>(abs_ge)) / denom};
}

inline double permutation_test(std::span<const int> labels, const ScoreTable& a, const ScoreTable& b,
                               std::size_t n_perm, std::uint64_t seed, Sided sided = Sided::one,
                               std::size_t jobs = 1) {
  const auto r = permutation_test_full(labels, a, b, n_perm, seed, jobs);
  return sided == Sided::one ? r.a_over_b : r.two_sided;
}

inline double permutation_test(std::span<const int> labels, std::span<const double> a, std::span<const double> b,
                               std::size_t n_perm, std::uint64_t seed, Sided sided = Sided::one,
                               std::size_t jobs = 1) {
  return permutation_test(labels, ScoreTable::column({a.begin(), a.end()}), ScoreTable::column({b.begin(), b.end()}),
                          n_perm, seed, sided, jobs);
}

/// Holm step-down adjustment, returned in input order.
inline std::vector<double> holm_adjust(std::span<const double> p) {
  for (double v : p)
    if (!(v > 0.0 && v <= 1.0)) throw ValidationError("holm: p-values must lie in (0, 1]");
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> adjusted(m);
  double running = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    running = std::max(running, std::min(1.0, static_cast<double>(m - k) * p[order[k]]));
    adjusted[order[k]] = running;
  }
  return adjusted;
}

/// Regularized upper incomplete gamma Q(a, x): power series for x < a + 1,
/// Lentz continued fraction otherwise.
inline double gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw ValidationError("gamma_q: requires a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  constexpr double kEps = 1e-17;
  constexpr int kMaxIter = 100000;
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  if (x < a + 1.0) {
    double term = 1.0 / a, sum = term, ap = a;
    for (int i = 0; i < kMaxIter; ++i) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return 1.0 - sum * std::exp(log_prefix);
  }
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(log_prefix) * h;
}

inline double chi2_survival(double x, double dof) { return gamma_q(dof / 2.0, x / 2.0); }

/// Fisher's method: survival of chi-square with 2k dof at -2 sum ln p.
inline double fisher_combine(std::span<const double> p) {
  if (p.empty()) throw ValidationError("fisher: no p-values to combine");
  double x = 0.0;
  for (double v : p) {
    if (!(v > 0.0 && v <= 1.0)) throw ValidationError("fisher: p-values must lie in (0, 1]");
    x -= 2.0 * std::log(v);
  }
  return std::min(1.0, chi2_survival(x, 2.0 * static_cast<double>(p.size())));
}

/// One task's external-cohort predictions from every compared model, rows
/// aligned on slide_ids.
struct TaskPredictions {
  std::string task_id;
  std::vector<std::string> slide_ids;
  std::vector<int> labels;
  std::vector<ScoreTable> model_scores;
};

/// Cell (i, j) tests "model i is superior to model j": per-task one-sided
/// permutation p-values, Holm-adjusted across the task family, then
/// Fisher-combined. The diagonal holds NaN.
struct PairwiseMatrix {
  std::vector<std::string> model_ids;
  std::vector<std::string> task_ids;
  std::vector<double> raw;       // [i][j][t]
  std::vector<double> adjusted;  // [i][j][t]
  std::vector<double> combined;  // [i][j]

  std::size_t n_models() const { return model_ids.size(); }
  std::size_t n_tasks() const { return task_ids.size(); }
  double raw_p(std::size_t i, std::size_t j, std::size_t t) const { return raw[(i * n_models() + j) * n_tasks() + t]; }
  double holm_p(std::size_t i, std::size_t j, std::size_t t) const {
    return adjusted[(i * n_models() + j) * n_tasks() + t];
  }
  double fisher_p(std::size_t i, std::size_t j) const { return combined[i * n_models() + j]; }
};

inline PairwiseMatrix pairwise_matrix(std::span<const std::string> model_ids, std::span<const TaskPredictions> tasks,
                                      std::size_t n_perm, std::uint64_t seed, Sided sided = Sided::one,
                                      std::size_t jobs = 1) {
  const std::size_t m = model_ids.size();
  const std::size_t n_tasks = tasks.size();
  if (m < 2) throw ValidationError("pairwise matrix: need at least two models");
  if (n_tasks < 2) throw ValidationError("pairwise matrix: need at least two tasks");
  for (const auto& t : tasks) {
    if (t.model_scores.size() != m)
      throw ValidationError("task " + t.task_id + ": expected predictions from " + std::to_string(m) + " models");
    if (t.labels.size() != t.slide_ids.size())
      throw ValidationError("task " + t.task_id + ": labels and slide ids differ in length");
    for (const auto& s : t.model_scores)
      if (s.n_rows != t.labels.size() || s.width != t.model_scores.front().width)
        throw ValidationError("task " + t.task_id + ": misaligned predictions");
  }
  PairwiseMatrix out;
  out.model_ids.assign(model_ids.begin(), model_ids.end());
  for (const auto& t : tasks) out.task_ids.push_back(t.task_id);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.raw.assign(m * m * n_tasks, nan);
  out.adjusted.assign(m * m * n_tasks, nan);
  out.combined.assign(m * m, nan);

  // one permutation distribution per unordered pair and task serves both
  // directions, so cell (i, j) and (j, i) are tested on identical swaps
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) pairs.emplace_back(i, j);
  parallel_for(pairs.size() * n_tasks, jobs, [&](std::size_t job) {
    const auto [i, j] = pairs[job / n_tasks];
    const std::size_t t = job % n_tasks;
    const auto& task = tasks[t];
    const auto r = permutation_test_full(task.labels, task.model_scores[i], task.model_scores[j], n_perm,
                                         rng::combine(seed, t, i, j));
    out.raw[(i * m + j) * n_tasks + t] = sided == Sided::one ? r.a_over_b : r.two_sided;
    out.raw[(j * m + i) * n_tasks + t] = sided == Sided::one ? r.b_over_a : r.two_sided;
  });
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const auto base = out.raw.begin() + static_cast<std::ptrdiff_t>((i * m + j) * n_tasks);
      const std::vector<double> family(base, base + static_cast<std::ptrdiff_t>(n_tasks));
      const auto adj = holm_adjust(family);
      std::copy(adj.begin(), adj.end(), out.adjusted.begin() + static_cast<std::ptrdiff_t>((i * m + j) * n_tasks));
      out.combined[i * m + j] = fisher_combine(adj);
    }
  return out;
}

}  // namespace milbench
