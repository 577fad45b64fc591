#pragma once

// Benchmark report: median-AUC table with bootstrap CIs, pairwise
// superiority p-value matrix, and the ensembling / average / retraining
// comparison. Rendered as markdown; the underlying numbers round-trip
// through aucs.csv, pvalues.csv and estimators.csv.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/stats.hpp"
#include "milbench/text_io.hpp"

namespace milbench {

struct AucRow {
  std::string model_id;
  std::string task_id;
  AucSummary summary;
};

/// The three ways of scoring a CV run on an external cohort: bootstrap
/// median of the ensembled predictions, mean +- std of the individual
/// models' AUCs, and the one-shot retrained model's AUC.
struct EstimatorRow {
  std::string model_id;
  std::string task_id;
  AucSummary ensemble;
  double average_mean = 0.0;
  double average_std = 0.0;
  double retrain_auc = std::numeric_limits<double>::quiet_NaN();
};

struct ReportData {
  std::vector<AucRow> aucs;
  std::optional<PairwiseMatrix> pairwise;
  std::size_t n_perm = 0;
  std::vector<EstimatorRow> estimators;
};

namespace detail {

inline std::vector<std::string> ordered_unique(const std::vector<std::string>& xs) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& x : xs)
    if (seen.insert(x).second) out.push_back(x);
  return out;
}

inline std::string format_p(double p) {
  if (std::isnan(p)) return "–";
  if (p < 0.001) return "<0.001";
  return format_fixed(p, 3);
}

}  // namespace detail

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Models ranked by the mean of their per-task median AUCs (descending,
/// ties by id), with that mean.
inline std::vector<std::pair<std::string, double>> rank_models(const std::vector<AucRow>& rows) {
  std::map<std::string, std::vector<double>> medians;
  for (const auto& r : rows) medians[r.model_id].push_back(r.summary.median_auc);
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [id, v] : medians) out.emplace_back(id, mean_of(v));
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

inline std::string render_report(const ReportData& data) {
  std::vector<std::string> task_names, model_names;
  for (const auto& r : data.aucs) {
    task_names.push_back(r.task_id);
    model_names.push_back(r.model_id);
  }
  const auto tasks = detail::ordered_unique(task_names);
  const auto ranking = rank_models(data.aucs);
  std::map<std::pair<std::string, std::string>, AucSummary> cell;
  for (const auto& r : data.aucs) cell[{r.model_id, r.task_id}] = r.summary;

  std::string md = "# Benchmark report\n\n";
  md += "## Downstream performance\n\n";
  const std::size_t n_boot = data.aucs.empty() ? 0 : data.aucs.front().summary.n_boot;
  md += "Median AUC over " + std::to_string(n_boot) +
        " bootstrap runs with 95% confidence interval. Per task, the best model is in **bold** and the second best "
        "is <u>underlined</u>. Average is the mean of the per-task medians; models are ranked by it.\n\n";
  md += "| Model |";
  for (const auto& t : tasks) md += " " + t + " |";
  md += " Average |\n|---|";
  for (std::size_t i = 0; i < tasks.size(); ++i) md += "---|";
  md += "---|\n";

  // per task: best and second-best distinct median values
  std::map<std::string, std::pair<double, double>> podium;
  for (const auto& t : tasks) {
    std::vector<double> v;
    for (const auto& [id, avg] : ranking)
      if (cell.count({id, t})) v.push_back(cell[{id, t}].median_auc);
    std::sort(v.begin(), v.end(), std::greater<>());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    podium[t] = {v.empty() ? NAN : v[0], v.size() > 1 ? v[1] : NAN};
  }
  for (const auto& [id, avg] : ranking) {
    md += "| " + id + " |";
    for (const auto& t : tasks) {
      const auto it = cell.find({id, t});
      if (it == cell.end()) {
        md += " – |";
        continue;
      }
      const auto& s = it->second;
      std::string text = format_fixed(s.median_auc, 3) + " [" + format_fixed(s.ci_low, 3) + ", " +
                         format_fixed(s.ci_high, 3) + "]";
      if (s.median_auc == podium[t].first && ranking.size() > 1)
        text = "**" + text + "**";
      else if (s.median_auc == podium[t].second)
        text = "<u>" + text + "</u>";
      md += " " + text + " |";
    }
    md += " " + format_fixed(avg, 3) + " |\n";
  }

  md += "\n## Pairwise comparison\n\n";
  if (!data.pairwise) {
    md += "Pairwise p-value matrix omitted: it needs at least two models evaluated on at least two tasks.\n";
  } else {
    const auto& pm = *data.pairwise;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < pm.model_ids.size(); ++i) index[pm.model_ids[i]] = i;
    md += "Cell (row i, column j) is the p-value for model i outperforming model j: one-sided paired permutation "
          "tests (" +
          std::to_string(data.n_perm) +
          " permutations) per task, Holm-adjusted across tasks, combined with Fisher's method. `*` marks p < "
          "0.05.\n\n";
    md += "| |";
    for (const auto& [id, avg] : ranking) md += " " + id + " |";
    md += "\n|---|";
    for (std::size_t i = 0; i < ranking.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& [row_id, ra] : ranking) {
      md += "| " + row_id + " |";
      for (const auto& [col_id, ca] : ranking) {
        if (row_id == col_id || !index.count(row_id) || !index.count(col_id)) {
          md += " – |";
          continue;
        }
        const double p = pm.fisher_p(index[row_id], index[col_id]);
        md += " " + detail::format_p(p) + (p < 0.05 ? "*" : "") + " |";
      }
      md += "\n";
    }
  }

  md += "\n## Ensembling vs. average vs. retraining\n\n";
  if (data.estimators.empty()) {
    md += "No estimator comparison available.\n";
  } else {
    md += "Ensembling: bootstrap median AUC [95% CI] of the averaged predictions of all cross-validation models. "
          "Average: mean ± std of the individual models' AUCs. Retraining: AUC of a single model retrained on the full "
          "training set for the cross-validation-selected number of epochs. Gain is the ensemble's full-cohort AUC minus "
          "the retrained model's AUC.\n\n";
    md += "| Model | Task | Ensembling | Average | Retraining | Gain (point AUC) |\n";
    md += "|---|---|---|---|---|---|\n";
    std::map<std::string, std::vector<double>> gains;
    for (const auto& e : data.estimators) {
      md += "| " + e.model_id + " | " + e.task_id + " | " + format_fixed(e.ensemble.median_auc, 3) + " [" +
            format_fixed(e.ensemble.ci_low, 3) + ", " + format_fixed(e.ensemble.ci_high, 3) + "] | " +
            format_fixed(e.average_mean, 3) + " ± " + format_fixed(e.average_std, 3) + " | ";
      if (std::isnan(e.retrain_auc)) {
        md += "– | – |\n";
      } else {
        const double gain = e.ensemble.point_auc - e.retrain_auc;
        gains[e.model_id].push_back(gain);
        md += format_fixed(e.retrain_auc, 3) + " | " + (gain >= 0 ? "+" : "") + format_fixed(gain, 3) + " |\n";
      }
    }
    if (!gains.empty()) {
      md += "\nMean gain of ensembling over retraining across tasks:";
      for (const auto& [id, g] : gains) {
        const double m = mean_of(g);
        md += " " + id + " " + (m >= 0 ? "+" : "") + format_fixed(m, 3) + ";";
      }
      md.back() = '\n';
    }
  }
  return md;
}

// CSV forms

inline std::string format_aucs_csv(const std::vector<AucRow>& rows) {
  std::string s = "model_id,task_id,point_auc,median_auc,ci_low,ci_high,n_boot\n";
  for (const auto& r : rows)
    s += r.model_id + "," + r.task_id + "," + format_double(r.summary.point_auc) + "," +
         format_double(r.summary.median_auc) + "," + format_double(r.summary.ci_low) + "," +
         format_double(r.summary.ci_high) + "," + std::to_string(r.summary.n_boot) + "\n";
  return s;
}

inline std::vector<AucRow> parse_aucs_csv(const CsvTable& t) {
  std::vector<AucRow> out;
  const auto cm = t.column("model_id"), ct = t.column("task_id"), cp = t.column("point_auc"),
             cmed = t.column("median_auc"), cl = t.column("ci_low"), ch = t.column("ci_high"),
             cn = t.column("n_boot");
  for (const auto& row : t.rows)
    out.push_back({row[cm], row[ct],
                   AucSummary{parse_number<double>(row[cp], t.origin), parse_number<double>(row[cmed], t.origin),
                              parse_number<double>(row[cl], t.origin), parse_number<double>(row[ch], t.origin),
                              parse_number<std::size_t>(row[cn], t.origin)}});
  return out;
}

inline std::string format_pvalues_csv(const PairwiseMatrix& pm, std::size_t n_perm) {
  std::string s = "model_i,model_j,task_id,raw_p,holm_p,fisher_p,n_perm\n";
  for (std::size_t i = 0; i < pm.n_models(); ++i)
    for (std::size_t j = 0; j < pm.n_models(); ++j) {
      if (i == j) continue;
      for (std::size_t t = 0; t < pm.n_tasks(); ++t)
        s += pm.model_ids[i] + "," + pm.model_ids[j] + "," + pm.task_ids[t] + "," + format_double(pm.raw_p(i, j, t)) +
             "," + format_double(pm.holm_p(i, j, t)) + "," + format_double(pm.fisher_p(i, j)) + "," +
             std::to_string(n_perm) + "\n";
    }
  return s;
}

inline std::pair<PairwiseMatrix, std::size_t> parse_pvalues_csv(const CsvTable& t) {
  const auto ci = t.column("model_i"), cj = t.column("model_j"), ct = t.column("task_id"), cr = t.column("raw_p"),
             ch = t.column("holm_p"), cf = t.column("fisher_p"), cn = t.column("n_perm");
  std::vector<std::string> models, tasks;
  for (const auto& row : t.rows) {
    models.push_back(row[ci]);
    models.push_back(row[cj]);
    tasks.push_back(row[ct]);
  }
  PairwiseMatrix pm;
  pm.model_ids = detail::ordered_unique(models);
  pm.task_ids = detail::ordered_unique(tasks);
  const std::size_t m = pm.n_models(), n_tasks = pm.n_tasks();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  pm.raw.assign(m * m * n_tasks, nan);
  pm.adjusted.assign(m * m * n_tasks, nan);
  pm.combined.assign(m * m, nan);
  auto pos = [](const std::vector<std::string>& v, const std::string& x) {
    return static_cast<std::size_t>(std::find(v.begin(), v.end(), x) - v.begin());
  };
  std::size_t n_perm = 0;
  for (const auto& row : t.rows) {
    const auto i = pos(pm.model_ids, row[ci]), j = pos(pm.model_ids, row[cj]), k = pos(pm.task_ids, row[ct]);
    pm.raw[(i * m + j) * n_tasks + k] = parse_number<double>(row[cr], t.origin);
    pm.adjusted[(i * m + j) * n_tasks + k] = parse_number<double>(row[ch], t.origin);
    pm.combined[i * m + j] = parse_number<double>(row[cf], t.origin);
    n_perm = parse_number<std::size_t>(row[cn], t.origin);
  }
  return {pm, n_perm};
}

inline std::string format_estimators_csv(const std::vector<EstimatorRow>& rows) {
  std::string s =
      "model_id,task_id,ensemble_point,ensemble_median,ensemble_ci_low,ensemble_ci_high,n_boot,average_mean,"
      "average_std,retrain_auc\n";
  for (const auto& e : rows)
    s += e.model_id + "," + e.task_id + "," + format_double(e.ensemble.point_auc) + "," +
         format_double(e.ensemble.median_auc) + "," + format_double(e.ensemble.ci_low) + "," +
         format_double(e.ensemble.ci_high) + "," + std::to_string(e.ensemble.n_boot) + "," +
         format_double(e.average_mean) + "," + format_double(e.average_std) + "," +
         (std::isnan(e.retrain_auc) ? std::string("nan") : format_double(e.retrain_auc)) + "\n";
  return s;
}

inline std::vector<EstimatorRow> parse_estimators_csv(const CsvTable& t) {
  std::vector<EstimatorRow> out;
  const auto cm = t.column("model_id"), ct = t.column("task_id"), cp = t.column("ensemble_point"),
             cmed = t.column("ensemble_median"), cl = t.column("ensemble_ci_low"), ch = t.column("ensemble_ci_high"),
             cn = t.column("n_boot"), cam = t.column("average_mean"), cas = t.column("average_std"),
             cr = t.column("retrain_auc");
  for (const auto& row : t.rows) {
    EstimatorRow e;
    e.model_id = row[cm];
    e.task_id = row[ct];
    e.ensemble = {parse_number<double>(row[cp], t.origin), parse_number<double>(row[cmed], t.origin),
                  parse_number<double>(row[cl], t.origin), parse_number<double>(row[ch], t.origin),
                  parse_number<std::size_t>(row[cn], t.origin)};
    e.average_mean = parse_number<double>(row[cam], t.origin);
    e.average_std = parse_number<double>(row[cas], t.origin);
    e.retrain_auc = row[cr] == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_number<double>(row[cr], t.origin);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace milbench
