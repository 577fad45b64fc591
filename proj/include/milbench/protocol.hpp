#pragma once

// Evaluation protocol: case- and label-stratified folds, 5 x 5
// cross-validation with per-model epoch selection, ensembling of the 25
// models on external cohorts, and one-shot retraining as comparator.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "milbench/abmil.hpp"
#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/optim.hpp"
#include "milbench/parallel.hpp"
#include "milbench/rng.hpp"
#include "milbench/stats.hpp"

namespace milbench {

inline const std::vector<int> kStandardEpochGrid{1, 3, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100};
inline const std::vector<int> kExtendedEpochGrid{1,  3,  5,  10, 15, 20,  30,  40,  50,  60,  70,
                                                 80, 90, 100, 120, 150, 180, 200, 220, 250, 280, 300};

struct ProtocolConfig {
  std::size_t n_folds = 5;
  std::size_t n_replicates = 5;
  std::vector<int> epoch_grid = kStandardEpochGrid;
  AdamConfig adam;
  std::size_t jobs = 1;

  void validate() const {
    if (n_folds < 2) throw ValidationError("need at least two folds");
    if (n_replicates < 1) throw ValidationError("need at least one replicate");
    if (epoch_grid.empty()) throw ValidationError("epoch grid is empty");
    if (!std::is_sorted(epoch_grid.begin(), epoch_grid.end()) ||
        std::adjacent_find(epoch_grid.begin(), epoch_grid.end()) != epoch_grid.end() || epoch_grid.front() < 1)
      throw ValidationError("epoch grid must be strictly increasing positive integers");
  }
};

/// Sampled bags of one cohort, aligned with its manifest entries.
struct Cohort {
  std::string cohort_id;
  std::vector<SlideManifestEntry> entries;
  std::vector<FeatureMatrix> bags;

  std::size_t size() const { return entries.size(); }
  std::vector<int> labels() const {
    std::vector<int> y;
    for (const auto& e : entries) y.push_back(e.label);
    return y;
  }
};

inline Cohort load_cohort(const std::filesystem::path& manifest_path, const TaskSpec& spec, std::uint64_t sample_seed,
                          std::string cohort_id, std::size_t jobs = 1) {
  Cohort c;
  c.cohort_id = std::move(cohort_id);
  c.entries = load_manifest(manifest_path, spec);
  c.bags.resize(c.entries.size());
  parallel_for(c.entries.size(), jobs, [&](std::size_t i) {
    const auto& e = c.entries[i];
    c.bags[i] = sample_bag(read_features(resolve_feature_path(manifest_path, e)), e.slide_id, spec.n_t, sample_seed);
  });
  return c;
}

/// Throws if any external slide also appears in the training cohort.
inline void check_no_leakage(const Cohort& train, const Cohort& external) {
  std::set<std::string> ids;
  for (const auto& e : train.entries) ids.insert(e.slide_id);
  for (const auto& e : external.entries)
    if (ids.count(e.slide_id))
      throw ValidationError("data leakage: slide '" + e.slide_id + "' of cohort '" + external.cohort_id +
                            "' is also in the training cohort");
}

struct SplitPlan {
  std::size_t n_folds = 5;
  std::map<std::string, int> fold_of_case;

  int fold_of(const std::string& case_id) const {
    const auto it = fold_of_case.find(case_id);
    if (it == fold_of_case.end()) throw ValidationError("case '" + case_id + "' is not in the split plan");
    return it->second;
  }
  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

/// Stratification label of a case: its most frequent slide label, lowest on ties.
inline std::map<std::string, int> case_labels(std::span<const SlideManifestEntry> entries) {
  std::map<std::string, std::map<int, std::size_t>> counts;
  for (const auto& e : entries) ++counts[e.case_id][e.label];
  std::map<std::string, int> out;
  for (const auto& [case_id, by_label] : counts) {
    const auto best = std::max_element(by_label.begin(), by_label.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    out[case_id] = best->first;
  }
  return out;
}

/// Greedy largest-first stratified assignment. Per class (ascending), cases
/// are shuffled by (seed, class), stably ordered by slide count descending,
/// and each goes to the fold holding the fewest cases of that class (ties:
/// fewest cases overall, then fewest slides, then lowest index). Per-class
/// fold counts therefore differ by at most one.
inline SplitPlan make_splits(std::span<const SlideManifestEntry> entries, std::size_t n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw ValidationError("need at least two folds");
  const auto labels = case_labels(entries);
  std::map<std::string, std::size_t> slides_per_case;
  for (const auto& e : entries) ++slides_per_case[e.case_id];
  std::map<int, std::vector<std::string>> cases_by_class;
  for (const auto& [case_id, label] : labels) cases_by_class[label].push_back(case_id);

  SplitPlan plan;
  plan.n_folds = n_folds;
  std::vector<std::size_t> fold_cases(n_folds, 0), fold_slides(n_folds, 0);
  for (auto& [label, cases] : cases_by_class) {
    if (cases.size() < n_folds)
      throw ValidationError("class " + std::to_string(label) + " has " + std::to_string(cases.size()) +
                            " cases, fewer than the " + std::to_string(n_folds) + " folds");
    rng::Stream stream(rng::combine(seed, static_cast<std::uint64_t>(label)));
    rng::shuffle(cases, stream);
    std::stable_sort(cases.begin(), cases.end(), [&](const std::string& a, const std::string& b) {
      return slides_per_case[a] > slides_per_case[b];
    });
    std::vector<std::size_t> class_cases(n_folds, 0);
    for (const auto& case_id : cases) {
      std::size_t best = 0;
      for (std::size_t f = 1; f < n_folds; ++f)
        if (std::tie(class_cases[f], fold_cases[f], fold_slides[f]) <
            std::tie(class_cases[best], fold_cases[best], fold_slides[best]))
          best = f;
      plan.fold_of_case[case_id] = static_cast<int>(best);
      ++class_cases[best];
      ++fold_cases[best];
      fold_slides[best] += slides_per_case[case_id];
    }
  }
  return plan;
}

/// Index of the maximum, earliest on ties.
inline std::size_t earliest_argmax(std::span<const double> values) {
  if (values.empty()) throw ValidationError("argmax of empty sequence");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

struct CvRecord {
  int fold = 0;
  int replicate = 0;
  int selected_epoch = 0;
  std::vector<double> val_auc_by_epoch;  // aligned with CvRun::epoch_grid
  AbmilModel model;                      // snapshot at selected_epoch

  std::string model_id() const { return "fold" + std::to_string(fold) + "_rep" + std::to_string(replicate); }
  friend bool operator==(const CvRecord&, const CvRecord&) = default;
};

struct CvRun {
  std::uint64_t seed = 0;
  std::size_t n_folds = 0;
  std::size_t n_replicates = 0;
  std::vector<int> epoch_grid;
  std::vector<CvRecord> records;  // ordered by (fold, replicate)
  friend bool operator==(const CvRun&, const CvRun&) = default;
};

/// Replicates of one fold share the data order and differ only in their
/// initialization.
inline std::uint64_t init_seed(std::uint64_t master, std::size_t fold, std::size_t replicate) {
  return rng::combine(master, rng::hash_string("init"), fold, replicate);
}
inline std::uint64_t order_seed(std::uint64_t master, std::size_t fold) {
  return rng::combine(master, rng::hash_string("order"), fold);
}

inline ScoreTable predict_cohort(const AbmilModel& model, std::span<const FeatureMatrix* const> bags) {
  ScoreTable t(bags.size(), model.output_dim());
  const AbmilGradient working = model.cast<double>();
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const auto p = predict(working, *bags[i]);
    std::copy(p.begin(), p.end(), t.row(i).begin());
  }
  return t;
}

inline ScoreTable predict_cohort(const AbmilModel& model, const Cohort& cohort) {
  std::vector<const FeatureMatrix*> ptrs;
  for (const auto& b : cohort.bags) ptrs.push_back(&b);
  return predict_cohort(model, ptrs);
}

/// Runs the n_folds x n_replicates training jobs (in parallel when
/// cfg.jobs > 1) and merges them in (fold, replicate) order.
inline CvRun cross_validate(const Cohort& cohort, const TaskSpec& spec, const SplitPlan& plan,
                            const ProtocolConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (plan.n_folds != cfg.n_folds) throw ValidationError("split plan fold count does not match the protocol");
  const std::size_t n = cohort.size();
  std::vector<int> fold_of_slide(n);
  for (std::size_t i = 0; i < n; ++i) fold_of_slide[i] = plan.fold_of(cohort.entries[i].case_id);

  std::vector<std::vector<std::size_t>> val_idx(cfg.n_folds), train_idx(cfg.n_folds);
  for (std::size_t f = 0; f < cfg.n_folds; ++f) {
    for (std::size_t i = 0; i < n; ++i)
      (fold_of_slide[i] == static_cast<int>(f) ? val_idx[f] : train_idx[f]).push_back(i);
    std::vector<int> y;
    for (auto i : val_idx[f]) y.push_back(cohort.entries[i].label);
    if (count_classes_present(y) < 2)
      throw NumericError("fold " + std::to_string(f) + ": validation split has a single class, AUC undefined");
    if (train_idx[f].empty()) throw ValidationError("fold " + std::to_string(f) + ": empty training split");
  }

  CvRun run;
  run.seed = seed;
  run.n_folds = cfg.n_folds;
  run.n_replicates = cfg.n_replicates;
  run.epoch_grid = cfg.epoch_grid;
  run.records.resize(cfg.n_folds * cfg.n_replicates);
  parallel_for(run.records.size(), cfg.jobs, [&](std::size_t job) {
    const std::size_t f = job / cfg.n_replicates;
    const std::size_t r = job % cfg.n_replicates;
    std::vector<LabeledBag> train;
    for (auto i : train_idx[f]) train.push_back({&cohort.bags[i], cohort.entries[i].label});
    std::vector<const FeatureMatrix*> val_bags;
    std::vector<int> val_labels;
    for (auto i : val_idx[f]) {
      val_bags.push_back(&cohort.bags[i]);
      val_labels.push_back(cohort.entries[i].label);
    }
    auto trained = train_epochs(init_abmil(cohort.bags.front().dim, spec.output_dim(), init_seed(seed, f, r)), train,
                                spec, cfg.adam, cfg.epoch_grid, order_seed(seed, f));
    CvRecord rec;
    rec.fold = static_cast<int>(f);
    rec.replicate = static_cast<int>(r);
    for (int epoch : cfg.epoch_grid)
      rec.val_auc_by_epoch.push_back(task_auc(val_labels, predict_cohort(trained.snapshots.at(epoch), val_bags)));
    rec.selected_epoch = cfg.epoch_grid[earliest_argmax(rec.val_auc_by_epoch)];
    rec.model = std::move(trained.snapshots.at(rec.selected_epoch));
    run.records[job] = std::move(rec);
  });
  return run;
}

/// Per-slide scores of one cohort. `per_model` keeps each contributing
/// model's scores alongside the combined `scores`.
struct PredictionSet {
  std::string cohort_id;
  std::vector<std::string> slide_ids;
  ScoreTable scores;
  std::vector<std::string> model_ids;
  std::vector<ScoreTable> per_model;
};

/// Mean of the models' probabilities. Each slide's values are summed in
/// sorted order, so the result is bitwise independent of model order.
inline PredictionSet ensemble_predict(std::span<const AbmilModel> models, std::span<const std::string> model_ids,
                                      const Cohort& cohort, std::size_t jobs = 1) {
  if (models.empty()) throw ValidationError("ensemble: no models");
  if (model_ids.size() != models.size()) throw ValidationError("ensemble: one id per model required");
  const std::size_t width = models.front().output_dim();
  for (const auto& m : models) {
    if (m.output_dim() != width) throw ValidationError("ensemble: models disagree on output width");
    for (const auto& b : cohort.bags)
      if (b.dim != m.input_dim())
        throw ValidationError("ensemble: cohort '" + cohort.cohort_id + "' feature dim " + std::to_string(b.dim) +
                              " does not match model dim " + std::to_string(m.input_dim()));
  }
  PredictionSet ps;
  ps.cohort_id = cohort.cohort_id;
  for (const auto& e : cohort.entries) ps.slide_ids.push_back(e.slide_id);
  ps.model_ids.assign(model_ids.begin(), model_ids.end());
  ps.per_model.resize(models.size());
  parallel_for(models.size(), jobs, [&](std::size_t k) { ps.per_model[k] = predict_cohort(models[k], cohort); });
  ps.scores = ScoreTable(cohort.size(), width);
  std::vector<double> column(models.size());
  for (std::size_t i = 0; i < cohort.size(); ++i)
    for (std::size_t c = 0; c < width; ++c) {
      for (std::size_t k = 0; k < models.size(); ++k) column[k] = ps.per_model[k].at(i, c);
      std::sort(column.begin(), column.end());
      double sum = 0.0;
      for (double v : column) sum += v;
      ps.scores.row(i)[c] = sum / static_cast<double>(models.size());
    }
  return ps;
}

inline PredictionSet ensemble_predict(const CvRun& run, const Cohort& cohort, std::size_t jobs = 1) {
  if (run.records.size() != run.n_folds * run.n_replicates)
    throw ValidationError("ensemble: run has " + std::to_string(run.records.size()) + " checkpoints, expected " +
                          std::to_string(run.n_folds * run.n_replicates));
  std::vector<AbmilModel> models;
  std::vector<std::string> ids;
  for (const auto& r : run.records) {
    models.push_back(r.model);
    ids.push_back(r.model_id());
  }
  return ensemble_predict(models, ids, cohort, jobs);
}

/// Grid epoch maximizing the validation AUC averaged over all CV models,
/// earliest on ties.
inline int select_retrain_epoch(const CvRun& run) {
  if (run.records.empty()) throw ValidationError("retrain: run has no validation curves");
  std::vector<double> mean(run.epoch_grid.size(), 0.0);
  for (const auto& r : run.records) {
    if (r.val_auc_by_epoch.size() != run.epoch_grid.size())
      throw ValidationError("retrain: validation curve of " + r.model_id() + " does not cover the epoch grid");
    for (std::size_t e = 0; e < mean.size(); ++e) mean[e] += r.val_auc_by_epoch[e];
  }
  for (auto& v : mean) v /= static_cast<double>(run.records.size());
  return run.epoch_grid[earliest_argmax(mean)];
}

struct RetrainResult {
  int epoch = 0;
  AbmilModel model;
};

/// Trains a single model on the whole training cohort for the CV-selected
/// number of epochs.
inline RetrainResult one_shot_retrain(const CvRun& run, const Cohort& train, const TaskSpec& spec,
                                      const ProtocolConfig& cfg, std::uint64_t seed) {
  RetrainResult out;
  out.epoch = select_retrain_epoch(run);
  std::vector<LabeledBag> bags;
  for (std::size_t i = 0; i < train.size(); ++i) bags.push_back({&train.bags[i], train.entries[i].label});
  const std::vector<int> last{out.epoch};
  auto trained = train_epochs(init_abmil(train.bags.front().dim, spec.output_dim(),
                                         rng::combine(seed, rng::hash_string("retrain-init"))),
                              bags, spec, cfg.adam, last, rng::combine(seed, rng::hash_string("retrain-order")));
  out.model = std::move(trained.snapshots.at(out.epoch));
  return out;
}

inline PredictionSet predict_single(const AbmilModel& model, std::string model_id, const Cohort& cohort) {
  const std::vector<AbmilModel> models{model};
  const std::vector<std::string> ids{std::move(model_id)};
  return ensemble_predict(models, ids, cohort);
}

}  // namespace milbench
