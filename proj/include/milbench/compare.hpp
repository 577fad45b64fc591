#pragma once

// Cross-model comparison of saved external-cohort predictions.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/report.hpp"
#include "milbench/rng.hpp"
#include "milbench/run_io.hpp"
#include "milbench/stats.hpp"
#include "milbench/text_io.hpp"

namespace milbench {

/// One row of a comparison config: a trained run scored on one task's
/// external cohort. Predictions are read from run_dir/preds_{cohort}.csv.
struct CompareEntry {
  std::string model_id;
  std::string task_id;
  fs::path run_dir;
  fs::path manifest;
  std::string cohort;
};

/// CSV with columns model_id,task_id,run_dir,manifest and an optional
/// cohort column (default: manifest file stem). Paths are relative to the
/// CSV's directory.
inline std::vector<CompareEntry> parse_compare_config(const CsvTable& t, const fs::path& base_dir) {
  const auto cm = t.column("model_id"), ct = t.column("task_id"), cr = t.column("run_dir"), cf = t.column("manifest");
  std::optional<std::size_t> cc;
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == "cohort") cc = i;
  std::vector<CompareEntry> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto where = t.origin + ":" + std::to_string(t.line_numbers[r]);
    CompareEntry e;
    e.model_id = row[cm];
    e.task_id = row[ct];
    if (e.model_id.empty() || e.task_id.empty()) throw ValidationError(where + ": empty model_id or task_id");
    if (!seen.insert({e.model_id, e.task_id}).second)
      throw ValidationError(where + ": duplicate entry for model '" + e.model_id + "' on task '" + e.task_id + "'");
    e.run_dir = (base_dir / row[cr]).lexically_normal();
    e.manifest = (base_dir / row[cf]).lexically_normal();
    e.cohort = cc && !row[*cc].empty() ? row[*cc] : e.manifest.stem().string();
    out.push_back(std::move(e));
  }
  if (out.empty()) throw ValidationError(t.origin + ": no comparison entries");
  return out;
}

inline std::vector<CompareEntry> load_compare_config(const fs::path& path) {
  return parse_compare_config(CsvTable::load(path), path.parent_path());
}

/// Task settings recorded by the training run.
inline TaskSpec run_task_spec(const fs::path& run_dir) {
  const auto path = run_dir / "run.json";
  try {
    const auto j = nlohmann::json::parse(read_text_file(path));
    return parse_task_spec(KeyValueConfig::parse(j.at("config").at("task_spec").get<std::string>(), path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

struct CompareOptions {
  std::size_t n_boot = 10000;
  std::size_t n_perm = 10000;
  std::uint64_t seed = 0;
  Sided sided = Sided::one;
  std::size_t jobs = 1;
};

/// Predictions of one entry, reordered to its manifest.
struct AlignedPredictions {
  std::vector<std::string> slide_ids;
  std::vector<int> labels;
  ScoreTable scores;
  std::vector<ScoreTable> per_model;
  std::optional<ScoreTable> retrain;
};

namespace detail {

inline ScoreTable reorder(const ScoreTable& t, const std::vector<std::size_t>& rows) {
  ScoreTable out(rows.size(), t.width);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.row(rows[i]).begin(), t.width, out.row(i).begin());
  return out;
}

inline std::vector<std::size_t> align_rows(const PredictionSet& ps, const std::vector<SlideManifestEntry>& entries,
                                           const fs::path& origin) {
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < ps.slide_ids.size(); ++i)
    if (!row_of.emplace(ps.slide_ids[i], i).second)
      throw ValidationError(origin.string() + ": duplicate slide_id '" + ps.slide_ids[i] + "'");
  if (ps.slide_ids.size() != entries.size())
    throw ValidationError(origin.string() + ": has " + std::to_string(ps.slide_ids.size()) +
                          " slides, manifest has " + std::to_string(entries.size()));
  std::vector<std::size_t> rows;
  for (const auto& e : entries) {
    const auto it = row_of.find(e.slide_id);
    if (it == row_of.end()) throw ValidationError(origin.string() + ": no prediction for slide '" + e.slide_id + "'");
    rows.push_back(it->second);
  }
  return rows;
}

}  // namespace detail

inline AlignedPredictions load_aligned(const CompareEntry& e) {
  const TaskSpec task = run_task_spec(e.run_dir);
  const auto entries = load_manifest(e.manifest, task);
  const auto path = e.run_dir / ("preds_" + e.cohort + ".csv");
  const auto ps = read_predictions(path, e.cohort);
  if (ps.scores.width != task.output_dim())
    throw ValidationError(path.string() + ": score width " + std::to_string(ps.scores.width) + " does not match task '" +
                          task.task_id + "'");
  const auto rows = detail::align_rows(ps, entries, path);
  AlignedPredictions out;
  for (const auto& en : entries) {
    out.slide_ids.push_back(en.slide_id);
    out.labels.push_back(en.label);
  }
  out.scores = detail::reorder(ps.scores, rows);
  for (const auto& t : ps.per_model) out.per_model.push_back(detail::reorder(t, rows));
  const auto retrain_path = e.run_dir / ("preds_" + e.cohort + "_retrain.csv");
  if (fs::exists(retrain_path)) {
    const auto rp = read_predictions(retrain_path, e.cohort);
    if (rp.scores.width != task.output_dim())
      throw ValidationError(retrain_path.string() + ": score width does not match task '" + task.task_id + "'");
    out.retrain = detail::reorder(rp.scores, detail::align_rows(rp, entries, retrain_path));
  }
  return out;
}

/// AUC table, estimator comparison and (given >= 2 models and >= 2 tasks)
/// the pairwise p-value matrix. Bootstrap resamples are shared by every
/// model on a task.
inline ReportData run_compare(const std::vector<CompareEntry>& entries, const CompareOptions& opt) {
  ReportData data;
  data.n_perm = opt.n_perm;
  std::vector<AlignedPredictions> preds;
  for (const auto& e : entries) preds.push_back(load_aligned(e));

  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    const auto& p = preds[k];
    const auto seed = rng::combine(opt.seed, rng::hash_string("bootstrap"), rng::hash_string(e.task_id));
    const auto summary = bootstrap_auc(p.labels, p.scores, opt.n_boot, seed, opt.jobs);
    data.aucs.push_back({e.model_id, e.task_id, summary});
    EstimatorRow est;
    est.model_id = e.model_id;
    est.task_id = e.task_id;
    est.ensemble = summary;
    std::vector<double> individual;
    for (const auto& t : p.per_model) individual.push_back(task_auc(p.labels, t));
    est.average_mean = individual.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_of(individual);
    est.average_std = individual.empty() ? std::numeric_limits<double>::quiet_NaN() : stddev_of(individual);
    if (p.retrain) est.retrain_auc = task_auc(p.labels, *p.retrain);
    data.estimators.push_back(est);
  }

  std::vector<std::string> model_names, task_names;
  for (const auto& e : entries) {
    model_names.push_back(e.model_id);
    task_names.push_back(e.task_id);
  }
  const auto models = detail::ordered_unique(model_names);
  const auto tasks = detail::ordered_unique(task_names);
  if (models.size() < 2 || tasks.size() < 2) return data;

  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (std::size_t k = 0; k < entries.size(); ++k) index[{entries[k].model_id, entries[k].task_id}] = k;
  std::vector<TaskPredictions> per_task;
  for (const auto& t : tasks) {
    TaskPredictions tp;
    tp.task_id = t;
    for (const auto& m : models) {
      const auto it = index.find({m, t});
      if (it == index.end())
        throw ValidationError("pairwise comparison: model '" + m + "' has no predictions for task '" + t + "'");
      const auto& p = preds[it->second];
      if (tp.model_scores.empty()) {
        tp.slide_ids = p.slide_ids;
        tp.labels = p.labels;
      } else if (p.slide_ids != tp.slide_ids || p.labels != tp.labels) {
        throw ValidationError("pairwise comparison: model '" + m + "' was evaluated on a different cohort for task '" +
                              t + "'");
      }
      tp.model_scores.push_back(p.scores);
    }
    per_task.push_back(std::move(tp));
  }
  data.pairwise = pairwise_matrix(models, per_task, opt.n_perm,
                                  rng::combine(opt.seed, rng::hash_string("permutation")), opt.sided, opt.jobs);
  return data;
}

}  // namespace milbench
