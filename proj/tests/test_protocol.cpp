#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "milbench/protocol.hpp"
#include "milbench/run_io.hpp"
#include "milbench/synthgen.hpp"

using namespace milbench;

namespace {

std::vector<SlideManifestEntry> random_entries(std::mt19937_64& gen, std::size_t n_cases, int n_classes) {
  std::vector<SlideManifestEntry> out;
  for (std::size_t c = 0; c < n_cases; ++c) {
    const int label = static_cast<int>(c % static_cast<std::size_t>(n_classes));
    const std::size_t slides = 1 + gen() % 4;
    for (std::size_t s = 0; s < slides; ++s)
      out.push_back({"c" + std::to_string(c) + "_s" + std::to_string(s), "c" + std::to_string(c), label, "x.fmx"});
  }
  return out;
}

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.n_slides = 40;
  s.n_external = 30;
  s.tiles_min = 4;
  s.tiles_max = 8;
  s.dim = 4;
  s.shift = 3.0;
  s.seed = seed;
  return s;
}

ProtocolConfig quick_protocol(std::size_t jobs) {
  ProtocolConfig cfg;
  cfg.epoch_grid = {1, 2, 4};
  cfg.jobs = jobs;
  return cfg;
}

}  // namespace

TEST(Splits, GroupCasesAndBalanceClasses) {
  std::mt19937_64 gen(41);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + static_cast<int>(gen() % 3);
    const std::size_t folds = 2 + gen() % 5;
    const auto entries = random_entries(gen, folds * static_cast<std::size_t>(classes) + gen() % 60, classes);
    const auto plan = make_splits(entries, folds, static_cast<std::uint64_t>(trial));
    std::map<int, std::vector<std::size_t>> per_class;
    std::set<std::string> cases;
    for (const auto& e : entries) {
      if (!cases.insert(e.case_id).second) continue;
      auto& v = per_class[e.label];
      v.resize(folds, 0);
      const int f = plan.fold_of(e.case_id);
      ASSERT_GE(f, 0);
      ASSERT_LT(static_cast<std::size_t>(f), folds);
      ++v[static_cast<std::size_t>(f)];
    }
    for (const auto& [label, counts] : per_class) {
      const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      EXPECT_LE(*hi - *lo, 1u) << "class " << label;
    }
    // every slide of a case falls in the case's fold by construction of the plan
    EXPECT_EQ(plan.fold_of_case.size(), cases.size());
  }
}

TEST(Splits, SeededAndRejectsTinyClasses) {
  std::mt19937_64 gen(42);
  const auto entries = random_entries(gen, 50, 2);
  EXPECT_EQ(make_splits(entries, 5, 1), make_splits(entries, 5, 1));
  EXPECT_NE(make_splits(entries, 5, 1), make_splits(entries, 5, 2));
  const auto few = random_entries(gen, 6, 2);
  EXPECT_THROW(make_splits(few, 5, 1), ValidationError);
  EXPECT_THROW(make_splits(entries, 1, 1), ValidationError);
}

TEST(Splits, CaseLabelIsMajorityLowestOnTies) {
  const std::vector<SlideManifestEntry> e{
      {"a1", "a", 1, "f"}, {"a2", "a", 0, "f"}, {"b1", "b", 2, "f"}, {"b2", "b", 1, "f"}, {"b3", "b", 2, "f"}};
  const auto l = case_labels(e);
  EXPECT_EQ(l.at("a"), 0);
  EXPECT_EQ(l.at("b"), 2);
}

TEST(Leakage, ExternalSlidesNeverIntersectTraining) {
  Cohort train, ext;
  train.entries = {{"s1", "c1", 0, "f"}, {"s2", "c2", 1, "f"}};
  ext.entries = {{"s3", "c3", 0, "f"}};
  ext.cohort_id = "ext";
  EXPECT_NO_THROW(check_no_leakage(train, ext));
  ext.entries.push_back({"s2", "c9", 1, "f"});
  EXPECT_THROW(check_no_leakage(train, ext), ValidationError);

  const auto ds = generate(small_spec(3));
  std::set<std::string> ids;
  for (const auto& s : ds.train.slides) ids.insert(s.entry.slide_id);
  for (const auto& s : ds.external.slides) EXPECT_EQ(ids.count(s.entry.slide_id), 0u);
}

TEST(ArgMax, PrefersEarliest) {
  const std::vector<double> v{0.5, 0.9, 0.9, 0.1};
  EXPECT_EQ(earliest_argmax(v), 1u);
  EXPECT_THROW(earliest_argmax(std::vector<double>{}), ValidationError);
}

TEST(CrossValidation, OneWorkerAndManyWorkersAreByteIdentical) {
  const auto ds = generate(small_spec(4));
  const auto cohort = to_cohort(ds.train, ds.task, 1);
  const auto plan = make_splits(cohort.entries, 5, 7);
  const auto a = cross_validate(cohort, ds.task, plan, quick_protocol(1), 7);
  const auto b = cross_validate(cohort, ds.task, plan, quick_protocol(4), 7);
  ASSERT_EQ(a.records.size(), 25u);
  EXPECT_EQ(serialize_cv_run(a), serialize_cv_run(b));
  for (std::size_t k = 0; k < 25; ++k) {
    EXPECT_EQ(a.records[k].fold, static_cast<int>(k / 5));
    EXPECT_EQ(a.records[k].replicate, static_cast<int>(k % 5));
    EXPECT_EQ(a.records[k].val_auc_by_epoch.size(), 3u);
    EXPECT_EQ(a.records[k].selected_epoch,
              a.epoch_grid[earliest_argmax(a.records[k].val_auc_by_epoch)]);
  }
}

TEST(CrossValidation, ReplicatesDifferOnlyInInitialization) {
  EXPECT_NE(init_seed(1, 0, 0), init_seed(1, 0, 1));
  EXPECT_NE(init_seed(1, 0, 0), init_seed(1, 1, 0));
  EXPECT_NE(order_seed(1, 0), order_seed(1, 1));
  const auto ds = generate(small_spec(5));
  const auto cohort = to_cohort(ds.train, ds.task, 1);
  const auto plan = make_splits(cohort.entries, 5, 1);
  const auto run = cross_validate(cohort, ds.task, plan, quick_protocol(1), 3);
  EXPECT_NE(run.records[0].model, run.records[1].model);
}

TEST(Ensemble, AveragesAndIgnoresModelOrder) {
  const auto ds = generate(small_spec(6));
  const auto train = to_cohort(ds.train, ds.task, 1), ext = to_cohort(ds.external, ds.task, 1);
  const auto plan = make_splits(train.entries, 5, 2);
  const auto run = cross_validate(train, ds.task, plan, quick_protocol(1), 2);
  const auto ps = ensemble_predict(run, ext);
  ASSERT_EQ(ps.per_model.size(), 25u);
  for (std::size_t i = 0; i < ext.size(); ++i) {
    double s = 0.0;
    for (const auto& t : ps.per_model) s += t.at(i, 0);
    EXPECT_NEAR(ps.scores.at(i, 0), s / 25.0, 1e-15);
  }
  std::vector<AbmilModel> rev;
  std::vector<std::string> ids;
  for (auto it = run.records.rbegin(); it != run.records.rend(); ++it) {
    rev.push_back(it->model);
    ids.push_back(it->model_id());
  }
  EXPECT_EQ(ensemble_predict(rev, ids, ext).scores, ps.scores);

  const auto single = predict_single(run.records[3].model, "m", ext);
  EXPECT_EQ(single.scores, ps.per_model[3]);
}

TEST(Retrain, UsesEpochWithBestMeanValidationAuc) {
  CvRun run;
  run.epoch_grid = {1, 5, 10};
  CvRecord a, b;
  a.val_auc_by_epoch = {0.6, 0.8, 0.7};
  b.val_auc_by_epoch = {0.6, 0.6, 0.7};
  run.records = {a, b};
  EXPECT_EQ(select_retrain_epoch(run), 5);  // means 0.6, 0.7, 0.7 -> earliest
  run.records[1].val_auc_by_epoch.pop_back();
  EXPECT_THROW(select_retrain_epoch(run), ValidationError);
}

TEST(Protocol, ValidatesConfig) {
  ProtocolConfig cfg;
  cfg.epoch_grid = {3, 1};
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg.epoch_grid = {};
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg.epoch_grid = {1};
  cfg.n_replicates = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}
