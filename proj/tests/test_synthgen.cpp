#include <gtest/gtest.h>

#include <cmath>

#include "milbench/stats.hpp"
#include "milbench/synthgen.hpp"
#include "oracles.hpp"

using namespace milbench;
using testing_support::TempDir;

namespace {

SynthSpec spec_with(double shift, std::uint64_t seed) {
  SynthSpec s;
  s.n_slides = 60;
  s.tiles_min = 10;
  s.tiles_max = 20;
  s.dim = 8;
  s.shift = shift;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Synth, ShapesLabelsAndWitnessCount) {
  const auto s = spec_with(4.0, 1);
  const auto ds = generate(s);
  ASSERT_EQ(ds.train.slides.size(), 60u);
  ASSERT_EQ(ds.external.slides.size(), 60u);
  const auto u = signal_direction(s, 1);
  for (std::size_t i = 0; i < 60; ++i) {
    const auto& sl = ds.train.slides[i];
    EXPECT_EQ(sl.true_label, static_cast<int>(i % 2));
    EXPECT_EQ(sl.entry.label, sl.true_label);  // no noise
    EXPECT_GE(sl.features.n_real, 10u);
    EXPECT_LE(sl.features.n_real, 20u);
    EXPECT_EQ(sl.features.dim, 8u);
  }
  EXPECT_EQ(s.witness_count(30), 6u);
  EXPECT_EQ(s.witness_count(31), 7u);
  double norm = 0.0;
  for (double v : u) norm += v * v;
  EXPECT_NEAR(norm, 1.0, 1e-12);
}

TEST(Synth, DeterministicAndJobInvariant) {
  const auto s = spec_with(2.0, 9);
  const auto a = generate(s, 1), b = generate(s, 4);
  for (std::size_t i = 0; i < a.train.slides.size(); ++i) {
    EXPECT_EQ(a.train.slides[i].features, b.train.slides[i].features);
    EXPECT_EQ(a.train.slides[i].entry, b.train.slides[i].entry);
  }
  const auto c = generate(spec_with(2.0, 10));
  EXPECT_NE(a.train.slides[0].features, c.train.slides[0].features);
}

TEST(Synth, OracleSeparatesWhenSignalPresent) {
  const auto strong = generate(spec_with(4.0, 2));
  std::vector<int> y;
  std::vector<double> s;
  for (const auto& sl : strong.external.slides) {
    y.push_back(sl.entry.label);
    s.push_back(oracle_score(strong.spec, sl.features));
  }
  EXPECT_GT(auc(y, s), 0.95);

  const auto null = generate(spec_with(0.0, 2));
  s.clear();
  y.clear();
  for (const auto& sl : null.external.slides) {
    y.push_back(sl.entry.label);
    s.push_back(oracle_score(null.spec, sl.features));
  }
  EXPECT_GT(auc(y, s), 0.25);
  EXPECT_LT(auc(y, s), 0.75);
}

TEST(Synth, LabelNoiseFlipsAboutTheRequestedShare) {
  auto s = spec_with(1.0, 3);
  s.n_slides = 4000;
  s.n_external = 10;
  s.tiles_min = s.tiles_max = 1;
  s.label_noise = 0.15;
  const auto ds = generate(s);
  std::size_t flipped = 0;
  for (const auto& sl : ds.train.slides) flipped += sl.entry.label != sl.true_label;
  EXPECT_NEAR(flipped / 4000.0, 0.15, 0.02);
}

TEST(Synth, MultiClassAndMultiSlideCases) {
  auto s = spec_with(3.0, 4);
  s.class_count = 3;
  s.slides_per_case = 2;
  const auto ds = generate(s);
  EXPECT_EQ(ds.task.output_dim(), 3u);
  EXPECT_EQ(ds.train.slides[0].entry.case_id, ds.train.slides[1].entry.case_id);
  EXPECT_NE(ds.train.slides[1].entry.case_id, ds.train.slides[2].entry.case_id);
  EXPECT_EQ(ds.train.slides[2].true_label, 1);
  EXPECT_EQ(ds.train.slides[4].true_label, 2);
}

TEST(Synth, SpecRoundTripAndValidation) {
  auto s = spec_with(1.5, 77);
  s.n_external = 13;
  const auto again = parse_synth_spec(KeyValueConfig::parse(format_synth_spec(s)));
  EXPECT_EQ(format_synth_spec(again), format_synth_spec(s));
  EXPECT_THROW(parse_synth_spec(KeyValueConfig::parse("witness_rate = 0\n")), ValidationError);
  EXPECT_THROW(parse_synth_spec(KeyValueConfig::parse("label_noise = 0.5\n")), ValidationError);
  EXPECT_THROW(parse_synth_spec(KeyValueConfig::parse("tiles_min = 9\ntiles_max = 3\n")), ValidationError);
}

TEST(Synth, WrittenDatasetLoadsLikeInMemoryCohort) {
  TempDir dir("synth");
  auto s = spec_with(2.0, 5);
  s.n_slides = 12;
  s.n_external = 6;
  const auto ds = generate(s);
  write_dataset(ds, dir.path());
  const auto task = parse_task_spec(KeyValueConfig::load(dir / "task.cfg"));
  const auto loaded = load_cohort(dir / "train.csv", task, 4, "train");
  const auto mem = to_cohort(ds.train, ds.task, 4);
  EXPECT_EQ(loaded.entries, mem.entries);
  EXPECT_EQ(loaded.bags, mem.bags);
  EXPECT_EQ(load_synth_spec(dir / "synth.cfg").seed, 5u);
}
