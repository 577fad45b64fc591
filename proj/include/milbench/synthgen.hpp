#pragma once

// Synthetic MIL cohorts with a known witness-tile structure.
//
// Background tiles are standard normal in R^d. A slide of true class c >= 1
// carries ceil(witness_rate * n) witness tiles shifted by shift * u_c, with
// u_c a fixed unit direction per class. Observed labels are flipped with
// probability label_noise. For binary tasks, max_i u_1^T x_i is the
// sufficient statistic for witness detection and serves as an oracle score.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/parallel.hpp"
#include "milbench/protocol.hpp"
#include "milbench/rng.hpp"
#include "milbench/text_io.hpp"

namespace milbench {

struct SynthSpec {
  std::size_t n_slides = 200;
  std::size_t n_external = 0;  // 0: same as n_slides
  std::size_t tiles_min = 30;
  std::size_t tiles_max = 60;
  std::size_t dim = 16;
  double witness_rate = 0.2;
  double shift = 4.0;
  double label_noise = 0.0;
  std::size_t class_count = 2;
  std::size_t slides_per_case = 1;
  std::uint64_t seed = 0;
  std::string task_id = "synth";

  std::size_t external_size() const { return n_external == 0 ? n_slides : n_external; }

  void validate() const {
    if (!(witness_rate > 0.0 && witness_rate <= 1.0)) throw ValidationError("synth: witness_rate must lie in (0, 1]");
    if (!(shift >= 0.0)) throw ValidationError("synth: shift must be >= 0");
    if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ValidationError("synth: label_noise must lie in [0, 0.5)");
    if (class_count < 2) throw ValidationError("synth: class_count must be >= 2");
    if (tiles_min < 1 || tiles_max < tiles_min) throw ValidationError("synth: need 1 <= tiles_min <= tiles_max");
    if (dim < 1) throw ValidationError("synth: dim must be >= 1");
    if (n_slides < 1) throw ValidationError("synth: n_slides must be >= 1");
    if (slides_per_case < 1) throw ValidationError("synth: slides_per_case must be >= 1");
  }

  /// Number of witness tiles in a positive slide of n tiles.
  std::size_t witness_count(std::size_t n) const {
    // the epsilon keeps e.g. 0.2 * 30 from rounding up to 7
    return static_cast<std::size_t>(std::ceil(witness_rate * static_cast<double>(n) - 1e-9));
  }
};

inline SynthSpec parse_synth_spec(const KeyValueConfig& cfg) {
  SynthSpec s;
  s.n_slides = cfg.number_or<std::size_t>("n_slides", s.n_slides);
  s.n_external = cfg.number_or<std::size_t>("n_external", s.n_external);
  s.tiles_min = cfg.number_or<std::size_t>("tiles_min", s.tiles_min);
  s.tiles_max = cfg.number_or<std::size_t>("tiles_max", s.tiles_max);
  s.dim = cfg.number_or<std::size_t>("dim", s.dim);
  s.witness_rate = cfg.number_or<double>("witness_rate", s.witness_rate);
  s.shift = cfg.number_or<double>("shift", s.shift);
  s.label_noise = cfg.number_or<double>("label_noise", s.label_noise);
  s.class_count = cfg.number_or<std::size_t>("class_count", s.class_count);
  s.slides_per_case = cfg.number_or<std::size_t>("slides_per_case", s.slides_per_case);
  s.seed = cfg.number_or<std::uint64_t>("seed", s.seed);
  s.task_id = cfg.get_or("task_id", s.task_id);
  s.validate();
  return s;
}

inline SynthSpec load_synth_spec(const std::filesystem::path& path) {
  return parse_synth_spec(KeyValueConfig::load(path));
}

inline std::string format_synth_spec(const SynthSpec& s) {
  std::string out;
  out += "task_id = " + s.task_id + "\n";
  out += "n_slides = " + std::to_string(s.n_slides) + "\n";
  out += "n_external = " + std::to_string(s.external_size()) + "\n";
  out += "tiles_min = " + std::to_string(s.tiles_min) + "\n";
  out += "tiles_max = " + std::to_string(s.tiles_max) + "\n";
  out += "dim = " + std::to_string(s.dim) + "\n";
  out += "witness_rate = " + format_double(s.witness_rate) + "\n";
  out += "shift = " + format_double(s.shift) + "\n";
  out += "label_noise = " + format_double(s.label_noise) + "\n";
  out += "class_count = " + std::to_string(s.class_count) + "\n";
  out += "slides_per_case = " + std::to_string(s.slides_per_case) + "\n";
  out += "seed = " + std::to_string(s.seed) + "\n";
  return out;
}

/// Unit signal direction of class c (c >= 1).
inline std::vector<double> signal_direction(const SynthSpec& spec, std::size_t c) {
  rng::Stream stream(rng::combine(spec.seed, rng::hash_string("direction"), c));
  std::vector<double> u(spec.dim);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& v : u) {
      v = stream.normal();
      norm += v * v;
    }
  }
  norm = std::sqrt(norm);
  for (auto& v : u) v /= norm;
  return u;
}

struct SynthSlide {
  SlideManifestEntry entry;
  int true_label = 0;
  FeatureMatrix features;
};

struct SynthCohort {
  std::string cohort_id;
  std::vector<SynthSlide> slides;
};

struct SynthDataset {
  SynthSpec spec;
  TaskSpec task;
  SynthCohort train;
  SynthCohort external;
};

inline TaskSpec synth_task(const SynthSpec& s) {
  TaskSpec t;
  t.task_id = s.task_id;
  t.class_count = s.class_count;
  t.n_t = s.tiles_max;
  t.mpp = 0.5;
  t.loss = s.class_count == 2 ? LossKind::binary_ce : LossKind::multi_ce;
  return t;
}

namespace detail {

inline std::string padded(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", i);
  return buf;
}

inline SynthCohort generate_cohort(const SynthSpec& s, std::size_t cohort, const std::string& prefix, std::size_t n,
                                   std::size_t jobs) {
  std::vector<std::vector<double>> directions(s.class_count);
  for (std::size_t c = 1; c < s.class_count; ++c) directions[c] = signal_direction(s, c);
  SynthCohort out;
  out.cohort_id = prefix;
  out.slides.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    rng::Stream stream(rng::combine(s.seed, rng::hash_string("slide"), cohort, i));
    const std::size_t case_index = i / s.slides_per_case;
    const auto true_label = static_cast<int>(case_index % s.class_count);
    const std::size_t n_tiles = s.tiles_min + static_cast<std::size_t>(stream.below(s.tiles_max - s.tiles_min + 1));
    FeatureMatrix m(n_tiles, s.dim, n_tiles);
    const auto grid_w = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_tiles))));
    for (std::size_t r = 0; r < n_tiles; ++r) {
      m.coords[r] = {static_cast<std::uint32_t>((r % grid_w) * 224), static_cast<std::uint32_t>((r / grid_w) * 224)};
      for (auto& v : m.row(r)) v = static_cast<float>(stream.normal());
    }
    if (true_label > 0) {
      const auto& u = directions[static_cast<std::size_t>(true_label)];
      const auto rows = rng::permutation(n_tiles, stream);
      for (std::size_t k = 0; k < s.witness_count(n_tiles); ++k) {
        auto row = m.row(rows[k]);
        for (std::size_t j = 0; j < s.dim; ++j) row[j] = static_cast<float>(row[j] + s.shift * u[j]);
      }
    }
    int label = true_label;
    if (stream.uniform() < s.label_noise) {
      if (s.class_count == 2) {
        label = 1 - true_label;
      } else {
        const auto shift = 1 + static_cast<int>(stream.below(s.class_count - 1));
        label = (true_label + shift) % static_cast<int>(s.class_count);
      }
    }
    auto& slide = out.slides[i];
    slide.entry.slide_id = prefix + "_" + padded(i);
    slide.entry.case_id = prefix + "_case_" + padded(case_index);
    slide.entry.label = label;
    slide.entry.feature_path = "features/" + slide.entry.slide_id + ".fmx";
    slide.true_label = true_label;
    slide.features = std::move(m);
  });
  return out;
}

}  // namespace detail

/// Training and external cohorts, fully determined by spec.seed.
inline SynthDataset generate(const SynthSpec& spec, std::size_t jobs = 1) {
  spec.validate();
  SynthDataset ds;
  ds.spec = spec;
  ds.task = synth_task(spec);
  ds.train = detail::generate_cohort(spec, 0, "train", spec.n_slides, jobs);
  ds.external = detail::generate_cohort(spec, 1, "ext", spec.external_size(), jobs);
  return ds;
}

/// Writes features/*.fmx, train.csv, external.csv, task.cfg and synth.cfg.
inline std::vector<std::filesystem::path> write_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (const auto* cohort : {&ds.train, &ds.external}) {
    std::vector<SlideManifestEntry> entries;
    for (const auto& s : cohort->slides) {
      write_features(s.features, dir / s.entry.feature_path);
      written.push_back(dir / s.entry.feature_path);
      entries.push_back(s.entry);
    }
    const auto manifest = dir / (cohort == &ds.train ? "train.csv" : "external.csv");
    write_text_file(manifest, format_manifest(entries));
    written.push_back(manifest);
  }
  write_text_file(dir / "task.cfg", format_task_spec(ds.task));
  write_text_file(dir / "synth.cfg", format_synth_spec(ds.spec));
  written.push_back(dir / "task.cfg");
  written.push_back(dir / "synth.cfg");
  return written;
}

/// In-memory cohort with bags sampled exactly as load_cohort would.
inline Cohort to_cohort(const SynthCohort& sc, const TaskSpec& task, std::uint64_t sample_seed) {
  Cohort c;
  c.cohort_id = sc.cohort_id;
  for (const auto& s : sc.slides) {
    c.entries.push_back(s.entry);
    c.bags.push_back(sample_bag(s.features, s.entry.slide_id, task.n_t, sample_seed));
  }
  return c;
}

/// max over real tiles of u_1^T x.
inline double oracle_score(const SynthSpec& spec, const FeatureMatrix& bag) {
  if (bag.dim != spec.dim) throw ValidationError("oracle: bag dim does not match the synthetic spec");
  if (bag.n_real == 0) throw ValidationError("oracle: bag has no real tiles");
  const auto u = signal_direction(spec, 1);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < bag.n_real; ++r) {
    double dot = 0.0;
    const auto row = bag.row(r);
    for (std::size_t j = 0; j < spec.dim; ++j) dot += u[j] * row[j];
    best = std::max(best, dot);
  }
  return best;
}

}  // namespace milbench
