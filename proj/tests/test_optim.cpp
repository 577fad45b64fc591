#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "milbench/optim.hpp"
#include "oracles.hpp"

using namespace milbench;
using testing_support::random_bag;

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  AbmilParameters<double> m(2, 1, 3);
  AbmilGradient g(2, 1, 3);
  for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = (i % 2 ? -1.0 : 1.0) * (0.5 + static_cast<double>(i));
  AdamState s(m.size());
  adam_step(m, g, s);
  EXPECT_EQ(s.step, 1u);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double gi = g.values()[i];
    EXPECT_NEAR(m.values()[i], -1e-3 * gi / (std::abs(gi) + 1e-8), 1e-18);
  }
}

TEST(Adam, MatchesHandRolledRecurrence) {
  AbmilParameters<double> m(1, 1, 2);
  AbmilGradient g(1, 1, 2);
  AdamState s(m.size());
  double w = 0.0, mo = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double gi = 0.3 * t - 0.7;
    g.values()[0] = gi;
    adam_step(m, g, s);
    mo = 0.9 * mo + 0.1 * gi;
    v = 0.999 * v + 0.001 * gi * gi;
    w -= 1e-3 * (mo / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(m.values()[0], w, 1e-15) << "step " << t;
  }
}

TEST(Adam, RejectsNonFiniteGradients) {
  AbmilModel m(2, 1);
  AbmilGradient g(2, 1);
  g.values()[17] = std::numeric_limits<double>::quiet_NaN();
  AdamState s(m.size());
  EXPECT_THROW(adam_step(m, g, s), NumericError);
  EXPECT_EQ(s.step, 0u);
  AdamState wrong(3);
  g.set_zero();
  EXPECT_THROW(adam_step(m, g, wrong), ValidationError);
}

namespace {

struct Toy {
  std::vector<FeatureMatrix> bags;
  std::vector<LabeledBag> items;
};

Toy toy_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Toy t;
  for (std::size_t i = 0; i < n; ++i) t.bags.push_back(random_bag(gen, 6, d, 3 + gen() % 4));
  for (std::size_t i = 0; i < n; ++i) {
    // class signal: shift the first feature of positives
    const int y = static_cast<int>(i % 2);
    if (y) t.bags[i].row(0)[0] += 3.0f;
    t.items.push_back({&t.bags[i], y});
  }
  return t;
}

}  // namespace

TEST(Training, StepCountFollowsBatching) {
  const auto data = toy_data(33, 4, 1);
  TaskSpec spec;
  AdamConfig adam;
  const std::vector<int> epochs{1, 2};
  const auto r = train_epochs(init_abmil(4, 1, 0), data.items, spec, adam, epochs, 5);
  EXPECT_EQ(r.optimizer_steps, 6u);  // ceil(33 / 16) per epoch
  EXPECT_EQ(r.snapshots.size(), 2u);
  EXPECT_EQ(r.epoch_loss.size(), 2u);
}

TEST(Training, IsDeterministicAndSeedSensitive) {
  const auto data = toy_data(20, 3, 2);
  TaskSpec spec;
  const std::vector<int> epochs{3};
  const auto a = train_epochs(init_abmil(3, 1, 1), data.items, spec, {}, epochs, 7);
  const auto b = train_epochs(init_abmil(3, 1, 1), data.items, spec, {}, epochs, 7);
  const auto c = train_epochs(init_abmil(3, 1, 1), data.items, spec, {}, epochs, 8);
  EXPECT_EQ(a.snapshots.at(3), b.snapshots.at(3));
  EXPECT_NE(a.snapshots.at(3), c.snapshots.at(3));
}

TEST(Training, SnapshotsAreIntermediateStates) {
  const auto data = toy_data(10, 2, 3);
  TaskSpec spec;
  const std::vector<int> both{1, 4}, one{1};
  const auto r = train_epochs(init_abmil(2, 1, 1), data.items, spec, {}, both, 9);
  const auto s = train_epochs(init_abmil(2, 1, 1), data.items, spec, {}, one, 9);
  EXPECT_EQ(r.snapshots.at(1), s.snapshots.at(1));
  EXPECT_NE(r.snapshots.at(1), r.snapshots.at(4));
}

TEST(Training, LossDecreasesOnSeparableData) {
  const auto data = toy_data(64, 4, 4);
  TaskSpec spec;
  AdamConfig adam;
  adam.lr = 1e-2;
  const std::vector<int> epochs{30};
  const auto r = train_epochs(init_abmil(4, 1, 2), data.items, spec, adam, epochs, 1);
  EXPECT_LT(r.epoch_loss.back(), 0.5 * r.epoch_loss.front());
}

TEST(Training, ValidatesInputs) {
  const auto data = toy_data(4, 2, 5);
  TaskSpec spec;
  const std::vector<int> ok{1}, zero{0}, none;
  EXPECT_THROW(train_epochs(init_abmil(2, 1, 0), {}, spec, {}, ok, 1), ValidationError);
  EXPECT_THROW(train_epochs(init_abmil(2, 1, 0), data.items, spec, {}, none, 1), ValidationError);
  EXPECT_THROW(train_epochs(init_abmil(2, 1, 0), data.items, spec, {}, zero, 1), ValidationError);
  EXPECT_THROW(train_epochs(init_abmil(2, 3, 0), data.items, spec, {}, ok, 1), ValidationError);
  AdamConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(train_epochs(init_abmil(2, 1, 0), data.items, spec, bad, ok, 1), ValidationError);
}
