#pragma once

// Run directory layout:
//   run.json                  configuration echo, seeds, selected epochs
//   splits.csv                case_id,fold
//   fold{F}_rep{R}.abm1       the 25 selected checkpoints
//   val_curves.csv            fold,replicate,epoch,val_auc,selected
//   retrain.abm1              one-shot retrained model (when present)
//   preds_{cohort}.csv        ensemble scores plus per-model columns
//   preds_{cohort}_retrain.csv

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milbench/abmil.hpp"
#include "milbench/error.hpp"
#include "milbench/protocol.hpp"
#include "milbench/text_io.hpp"

namespace milbench {

namespace fs = std::filesystem;

/// Training run settings. Paths in the file are relative to its directory.
struct RunConfig {
  fs::path task;
  fs::path train_manifest;
  std::vector<fs::path> external_manifests;
  std::uint64_t seed = 0;
  std::uint64_t sample_seed = 0;
  std::vector<int> epoch_grid = kStandardEpochGrid;
  std::size_t folds = 5;
  std::size_t replicates = 5;
  std::size_t n_boot = 10000;
  std::size_t n_perm = 10000;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  bool retrain = true;

  ProtocolConfig protocol(std::size_t jobs) const {
    ProtocolConfig p;
    p.n_folds = folds;
    p.n_replicates = replicates;
    p.epoch_grid = epoch_grid;
    p.adam.lr = lr;
    p.adam.batch_size = batch_size;
    p.jobs = jobs;
    p.validate();
    return p;
  }
};

inline RunConfig parse_run_config(const KeyValueConfig& cfg, const fs::path& base_dir) {
  auto resolve = [&](const std::string& p) { return (base_dir / fs::path(p)).lexically_normal(); };
  RunConfig r;
  r.task = resolve(cfg.get("task"));
  r.train_manifest = resolve(cfg.get("train_manifest"));
  if (cfg.has("external_manifests"))
    for (const auto& p : split(cfg.get("external_manifests"), ','))
      if (!trim(p).empty()) r.external_manifests.push_back(resolve(std::string(trim(p))));
  r.seed = cfg.number_or<std::uint64_t>("seed", 0);
  r.sample_seed = cfg.number_or<std::uint64_t>("sample_seed", r.seed);
  if (cfg.has("epoch_grid")) {
    const auto& g = cfg.get("epoch_grid");
    if (g == "standard")
      r.epoch_grid = kStandardEpochGrid;
    else if (g == "extended")
      r.epoch_grid = kExtendedEpochGrid;
    else
      r.epoch_grid = cfg.number_list<int>("epoch_grid");
  }
  r.folds = cfg.number_or<std::size_t>("folds", r.folds);
  r.replicates = cfg.number_or<std::size_t>("replicates", r.replicates);
  r.n_boot = cfg.number_or<std::size_t>("n_boot", r.n_boot);
  r.n_perm = cfg.number_or<std::size_t>("n_perm", r.n_perm);
  r.lr = cfg.number_or<double>("lr", r.lr);
  r.batch_size = cfg.number_or<std::size_t>("batch_size", r.batch_size);
  if (r.batch_size == 0) throw ValidationError(cfg.origin() + ": batch_size must be positive");
  if (!(r.lr > 0.0)) throw ValidationError(cfg.origin() + ": lr must be positive");
  const auto retrain = cfg.get_or("retrain", "true");
  if (retrain != "true" && retrain != "false")
    throw ValidationError(cfg.origin() + ": retrain must be true or false");
  r.retrain = retrain == "true";
  r.protocol(1);
  return r;
}

inline RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(KeyValueConfig::load(path), path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& r) {
  std::vector<std::string> externals;
  for (const auto& p : r.external_manifests) externals.push_back(p.generic_string());
  return {{"task", r.task.generic_string()},
          {"train_manifest", r.train_manifest.generic_string()},
          {"external_manifests", externals},
          {"seed", r.seed},
          {"sample_seed", r.sample_seed},
          {"epoch_grid", r.epoch_grid},
          {"folds", r.folds},
          {"replicates", r.replicates},
          {"n_boot", r.n_boot},
          {"n_perm", r.n_perm},
          {"lr", r.lr},
          {"batch_size", r.batch_size},
          {"retrain", r.retrain}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig r;
  r.task = j.at("task").get<std::string>();
  r.train_manifest = j.at("train_manifest").get<std::string>();
  for (const auto& p : j.at("external_manifests")) r.external_manifests.emplace_back(p.get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.sample_seed = j.at("sample_seed").get<std::uint64_t>();
  r.epoch_grid = j.at("epoch_grid").get<std::vector<int>>();
  r.folds = j.at("folds").get<std::size_t>();
  r.replicates = j.at("replicates").get<std::size_t>();
  r.n_boot = j.at("n_boot").get<std::size_t>();
  r.n_perm = j.at("n_perm").get<std::size_t>();
  r.lr = j.at("lr").get<double>();
  r.batch_size = j.at("batch_size").get<std::size_t>();
  r.retrain = j.at("retrain").get<bool>();
  return r;
}

inline std::string checkpoint_name(int fold, int replicate) {
  return "fold" + std::to_string(fold) + "_rep" + std::to_string(replicate) + ".abm1";
}

inline std::string format_splits(const SplitPlan& plan) {
  std::string s = "case_id,fold\n";
  for (const auto& [case_id, fold] : plan.fold_of_case) s += case_id + "," + std::to_string(fold) + "\n";
  return s;
}

inline SplitPlan parse_splits(const CsvTable& t, std::size_t n_folds) {
  SplitPlan plan;
  plan.n_folds = n_folds;
  const auto c_case = t.column("case_id");
  const auto c_fold = t.column("fold");
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto fold = parse_number<int>(t.rows[r][c_fold], t.origin + ":" + std::to_string(t.line_numbers[r]));
    if (fold < 0 || static_cast<std::size_t>(fold) >= n_folds)
      throw ValidationError(t.origin + ":" + std::to_string(t.line_numbers[r]) + ": fold out of range");
    plan.fold_of_case[t.rows[r][c_case]] = fold;
  }
  return plan;
}

inline std::string format_val_curves(const CvRun& run) {
  std::string s = "fold,replicate,epoch,val_auc,selected\n";
  for (const auto& r : run.records)
    for (std::size_t e = 0; e < run.epoch_grid.size(); ++e)
      s += std::to_string(r.fold) + "," + std::to_string(r.replicate) + "," + std::to_string(run.epoch_grid[e]) + "," +
           format_double(r.val_auc_by_epoch[e]) + "," + (run.epoch_grid[e] == r.selected_epoch ? "1" : "0") + "\n";
  return s;
}

/// Canonical byte image of a CV run (curves followed by checkpoints), used
/// to compare runs for bitwise equality.
inline std::string serialize_cv_run(const CvRun& run) {
  std::string s = format_val_curves(run);
  for (const auto& r : run.records) s += encode_checkpoint(r.model);
  return s;
}

/// Writes the run directory. `config` is echoed into run.json under "config".
inline void write_run(const fs::path& dir, const CvRun& run, const SplitPlan& plan, const nlohmann::json& config,
                      const std::optional<RetrainResult>& retrain = std::nullopt) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["config"] = config;
  j["seed"] = run.seed;
  j["n_folds"] = run.n_folds;
  j["n_replicates"] = run.n_replicates;
  j["epoch_grid"] = run.epoch_grid;
  j["models"] = nlohmann::json::array();
  for (const auto& r : run.records) {
    j["models"].push_back({{"fold", r.fold},
                           {"replicate", r.replicate},
                           {"selected_epoch", r.selected_epoch},
                           {"checkpoint", checkpoint_name(r.fold, r.replicate)}});
    write_checkpoint(r.model, dir / checkpoint_name(r.fold, r.replicate));
  }
  if (retrain) {
    j["retrain"] = {{"epoch", retrain->epoch}, {"checkpoint", "retrain.abm1"}};
    write_checkpoint(retrain->model, dir / "retrain.abm1");
  }
  write_text_file(dir / "run.json", j.dump(2) + "\n");
  write_text_file(dir / "splits.csv", format_splits(plan));
  write_text_file(dir / "val_curves.csv", format_val_curves(run));
}

struct LoadedRun {
  CvRun run;
  SplitPlan plan;
  nlohmann::json config;
  std::optional<RetrainResult> retrain;
};

inline LoadedRun read_run(const fs::path& dir) {
  const auto meta_path = dir / "run.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(meta_path.string() + ": " + e.what());
  }
  LoadedRun out;
  try {
    out.config = j.at("config");
    out.run.seed = j.at("seed").get<std::uint64_t>();
    out.run.n_folds = j.at("n_folds").get<std::size_t>();
    out.run.n_replicates = j.at("n_replicates").get<std::size_t>();
    out.run.epoch_grid = j.at("epoch_grid").get<std::vector<int>>();
    for (const auto& m : j.at("models")) {
      CvRecord r;
      r.fold = m.at("fold").get<int>();
      r.replicate = m.at("replicate").get<int>();
      r.selected_epoch = m.at("selected_epoch").get<int>();
      const auto ckpt = dir / m.at("checkpoint").get<std::string>();
      if (!fs::exists(ckpt)) throw ValidationError("missing checkpoint '" + ckpt.string() + "'");
      r.model = read_checkpoint(ckpt);
      out.run.records.push_back(std::move(r));
    }
    if (j.contains("retrain")) {
      RetrainResult rr;
      rr.epoch = j["retrain"].at("epoch").get<int>();
      rr.model = read_checkpoint(dir / j["retrain"].at("checkpoint").get<std::string>());
      out.retrain = std::move(rr);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(meta_path.string() + ": " + e.what());
  }
  if (out.run.records.size() != out.run.n_folds * out.run.n_replicates)
    throw ValidationError(meta_path.string() + ": expected " + std::to_string(out.run.n_folds * out.run.n_replicates) +
                          " checkpoints, found " + std::to_string(out.run.records.size()));

  const auto curves = CsvTable::load(dir / "val_curves.csv");
  const auto c_fold = curves.column("fold"), c_rep = curves.column("replicate"), c_epoch = curves.column("epoch"),
             c_auc = curves.column("val_auc");
  std::map<std::tuple<int, int, int>, double> auc_of;
  for (const auto& row : curves.rows)
    auc_of[{parse_number<int>(row[c_fold], curves.origin), parse_number<int>(row[c_rep], curves.origin),
            parse_number<int>(row[c_epoch], curves.origin)}] = parse_number<double>(row[c_auc], curves.origin);
  for (auto& r : out.run.records)
    for (int epoch : out.run.epoch_grid) {
      const auto it = auc_of.find({r.fold, r.replicate, epoch});
      if (it == auc_of.end())
        throw ValidationError(curves.origin + ": no validation AUC for " + r.model_id() + " at epoch " +
                              std::to_string(epoch));
      r.val_auc_by_epoch.push_back(it->second);
    }
  out.plan = parse_splits(CsvTable::load(dir / "splits.csv"), out.run.n_folds);
  return out;
}

inline std::string score_column_name(std::size_t width, std::size_t c, const std::string& prefix) {
  return width == 1 ? prefix : prefix + "_" + std::to_string(c);
}

/// slide_id, ensemble score column(s), then optionally one column (or one
/// per class) per contributing model.
inline std::string format_predictions(const PredictionSet& ps, bool per_model = true) {
  const std::size_t w = ps.scores.width;
  std::string s = "slide_id";
  for (std::size_t c = 0; c < w; ++c) s += "," + score_column_name(w, c, "score");
  if (per_model)
    for (const auto& id : ps.model_ids)
      for (std::size_t c = 0; c < w; ++c) s += "," + score_column_name(w, c, id);
  s += "\n";
  for (std::size_t i = 0; i < ps.slide_ids.size(); ++i) {
    s += ps.slide_ids[i];
    for (std::size_t c = 0; c < w; ++c) s += "," + format_double(ps.scores.at(i, c));
    if (per_model)
      for (const auto& t : ps.per_model)
        for (std::size_t c = 0; c < w; ++c) s += "," + format_double(t.at(i, c));
    s += "\n";
  }
  return s;
}

inline PredictionSet parse_predictions(const CsvTable& t, std::string cohort_id) {
  PredictionSet ps;
  ps.cohort_id = std::move(cohort_id);
  if (t.header.empty() || t.header[0] != "slide_id") throw ValidationError(t.origin + ": first column must be slide_id");
  std::size_t width = 0;
  while (width + 1 < t.header.size() && t.header[width + 1].rfind("score", 0) == 0) ++width;
  if (width == 0) throw ValidationError(t.origin + ": no score column");
  const std::size_t extra = t.header.size() - 1 - width;
  if (extra % width != 0) throw ValidationError(t.origin + ": per-model columns do not match the score width");
  for (std::size_t k = 0; k < extra / width; ++k) {
    auto name = t.header[1 + width + k * width];
    if (width > 1) name = name.substr(0, name.rfind('_'));
    ps.model_ids.push_back(name);
  }
  const std::size_t n = t.rows.size();
  ps.scores = ScoreTable(n, width);
  ps.per_model.assign(ps.model_ids.size(), ScoreTable(n, width));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    const auto where = t.origin + ":" + std::to_string(t.line_numbers[i]);
    ps.slide_ids.push_back(row[0]);
    for (std::size_t c = 0; c < width; ++c) ps.scores.row(i)[c] = parse_number<double>(row[1 + c], where);
    for (std::size_t k = 0; k < ps.model_ids.size(); ++k)
      for (std::size_t c = 0; c < width; ++c)
        ps.per_model[k].row(i)[c] = parse_number<double>(row[1 + width + k * width + c], where);
  }
  return ps;
}

inline PredictionSet read_predictions(const fs::path& path, std::string cohort_id) {
  return parse_predictions(CsvTable::load(path), std::move(cohort_id));
}

}  // namespace milbench
