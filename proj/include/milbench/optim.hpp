#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "milbench/abmil.hpp"
#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/rng.hpp"

namespace milbench {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
};

/// Moment buffers are 64-bit regardless of the model's storage type.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t n_params, AdamConfig cfg = {}) : config(cfg), m(n_params, 0.0), v(n_params, 0.0) {}
};

template <typename T>
void adam_step(AbmilParameters<T>& model, const AbmilGradient& grad, AdamState& state) {
  const std::size_t n = model.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n)
    throw ValidationError("adam: gradient/state shape does not match the model");
  const auto g = grad.values();
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(g[i]))
      throw NumericError("adam: non-finite gradient at parameter index " + std::to_string(i) + " (step " +
                         std::to_string(state.step + 1) + ")");
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  auto w = model.values();
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double m_hat = state.m[i] / correction1;
    const double v_hat = state.v[i] / correction2;
    w[i] = static_cast<T>(static_cast<double>(w[i]) - c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
  }
}

struct LabeledBag {
  const FeatureMatrix* features = nullptr;
  int label = 0;
};

struct TrainResult {
  std::map<int, AbmilModel> snapshots;  // epoch -> model after that epoch
  std::vector<double> epoch_loss;       // mean training loss per epoch
  std::uint64_t optimizer_steps = 0;
};

/// Mini-batch training for max(snapshot_epochs) epochs. Each epoch visits
/// the bags in an order drawn from (seed, epoch); gradients are averaged
/// over each batch, the last partial batch over its own size.
inline TrainResult train_epochs(AbmilModel model, std::span<const LabeledBag> bags, const TaskSpec& spec,
                                const AdamConfig& adam, std::span<const int> snapshot_epochs, std::uint64_t seed) {
  if (bags.empty()) throw ValidationError("training set is empty");
  if (snapshot_epochs.empty()) throw ValidationError("no snapshot epochs requested");
  if (adam.batch_size == 0) throw ValidationError("batch size must be positive");
  if (model.output_dim() != spec.output_dim()) throw ValidationError("model head does not match task " + spec.task_id);
  const std::set<int> wanted(snapshot_epochs.begin(), snapshot_epochs.end());
  if (*wanted.begin() < 1) throw ValidationError("snapshot epochs must be >= 1");
  const int last_epoch = *wanted.rbegin();

  TrainResult result;
  AdamState state(model.size(), adam);
  AbmilGradient grad(model.input_dim(), model.output_dim(), model.embed_dim());
  for (int epoch = 1; epoch <= last_epoch; ++epoch) {
    rng::Stream order_stream(rng::combine(seed, static_cast<std::uint64_t>(epoch)));
    const auto order = rng::permutation(bags.size(), order_stream);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += adam.batch_size) {
      const std::size_t stop = std::min(order.size(), start + adam.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      const AbmilGradient working = model.cast<double>();
      grad.set_zero();
      for (std::size_t k = start; k < stop; ++k) {
        const LabeledBag& item = bags[order[k]];
        const ForwardTrace trace = forward(working, *item.features);
        const double l = loss(trace.scores(), item.label);
        if (!std::isfinite(l))
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        loss_sum += l;
        accumulate_gradient(working, trace, item.label, grad, scale);
      }
      adam_step(model, grad, state);
      ++result.optimizer_steps;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(bags.size()));
    if (wanted.count(epoch)) result.snapshots.emplace(epoch, model);
  }
  return result;
}

}  // namespace milbench
