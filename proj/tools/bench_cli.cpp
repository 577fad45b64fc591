// bench_cli: tile, featurize, synth, train, eval, compare, report.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "milbench/compare.hpp"
#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/parallel.hpp"
#include "milbench/protocol.hpp"
#include "milbench/report.hpp"
#include "milbench/run_io.hpp"
#include "milbench/synthgen.hpp"
#include "milbench/text_io.hpp"
#include "milbench/tiler.hpp"
#include "milbench/toy_encoders.hpp"
#include "png_io.hpp"

namespace fs = std::filesystem;
using namespace milbench;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string config;
  std::string out;
  std::optional<std::size_t> jobs_flag;
  std::size_t jobs = 1;
};

fs::path require_out(const Globals& g, const std::string& cmd) {
  if (g.out.empty()) throw UsageError(cmd + ": --out is required");
  return fs::path(g.out);
}

fs::path require_config(const Globals& g, const std::string& cmd) {
  if (g.config.empty()) throw UsageError(cmd + ": --config is required");
  const fs::path p(g.config);
  if (!fs::exists(p)) throw ValidationError("config file '" + p.string() + "' does not exist");
  return p;
}

/// Records every file under `dir` (except artifact manifests) with its size.
void write_artifacts(const fs::path& dir, const std::string& cmd, const std::vector<fs::path>& produced) {
  std::set<std::string> rel;
  for (const auto& p : produced) rel.insert(fs::relative(p, dir).generic_string());
  nlohmann::json j;
  j["command"] = cmd;
  j["artifacts"] = nlohmann::json::array();
  for (const auto& r : rel) j["artifacts"].push_back({{"path", r}, {"bytes", fs::file_size(dir / r)}});
  write_text_file(dir / ("artifacts_" + cmd + ".json"), j.dump(2) + "\n");
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().rfind("artifacts_", 0) != 0) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// tile

struct TileArgs {
  std::string image;
  std::string mask;
  std::string slide_id;
  std::optional<std::size_t> tile_px, mask_downsample;
  std::optional<double> mpp_in, mpp_out, min_tissue;
  bool no_images = false;
};

Mask load_external_mask(const fs::path& path, const Raster& img, std::size_t ds) {
  const Mask m = png::read_mask(path);
  if (m.width == ceil_div(img.width, ds) && m.height == ceil_div(img.height, ds)) return m;
  if (m.width == img.width && m.height == img.height) return downsample_mask(m, ds);
  throw ValidationError(path.string() + ": mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                        ", expected the resampled image size or its 1/" + std::to_string(ds) + " size");
}

void cmd_tile(const Globals& g, const TileArgs& a) {
  const auto out = require_out(g, "tile");
  TilingConfig cfg;
  if (!g.config.empty()) {
    const auto kv = KeyValueConfig::load(require_config(g, "tile"));
    cfg.tile_px = kv.number_or<std::size_t>("tile_px", cfg.tile_px);
    cfg.mpp_in = kv.number_or<double>("mpp_in", cfg.mpp_in);
    cfg.mpp_out = kv.number_or<double>("mpp_out", cfg.mpp_out);
    cfg.min_tissue = kv.number_or<double>("min_tissue", cfg.min_tissue);
    cfg.mask_downsample = kv.number_or<std::size_t>("mask_downsample", cfg.mask_downsample);
  }
  if (a.tile_px) cfg.tile_px = *a.tile_px;
  if (a.mpp_in) cfg.mpp_in = *a.mpp_in;
  if (a.mpp_out) cfg.mpp_out = *a.mpp_out;
  if (a.min_tissue) cfg.min_tissue = *a.min_tissue;
  if (a.mask_downsample) cfg.mask_downsample = *a.mask_downsample;
  cfg.validate();

  const fs::path image_path(a.image);
  const std::string slide = a.slide_id.empty() ? image_path.stem().string() : a.slide_id;
  const Raster img = resample_to_mpp(png::read(image_path), cfg.mpp_in, cfg.mpp_out);
  const Mask mask = a.mask.empty() ? tissue_mask_otsu(img, cfg.mask_downsample)
                                   : load_external_mask(a.mask, img, cfg.mask_downsample);
  const auto tiles = enumerate_tiles(img.width, img.height, mask, cfg);

  fs::create_directories(out);
  std::vector<fs::path> produced;
  std::string csv = "slide_id,x,y,tissue_fraction\n";
  std::vector<fs::path> tile_paths(tiles.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto& t = tiles[i];
    csv += slide + "," + std::to_string(t.x) + "," + std::to_string(t.y) + "," + format_double(t.tissue_fraction) + "\n";
    tile_paths[i] = out / "tiles" / (slide + "_" + std::to_string(t.x) + "_" + std::to_string(t.y) + ".png");
  }
  if (!a.no_images) {
    parallel_for(tiles.size(), g.jobs, [&](std::size_t i) {
      png::write(tile_paths[i], crop(img, tiles[i].x, tiles[i].y, cfg.tile_px, cfg.tile_px));
    });
    produced.insert(produced.end(), tile_paths.begin(), tile_paths.end());
  }
  write_text_file(out / "tiles.csv", csv);
  produced.push_back(out / "tiles.csv");
  png::write_mask(out / "masks" / (slide + ".png"), mask);
  produced.push_back(out / "masks" / (slide + ".png"));
  write_artifacts(out, "tile", produced);
  std::cout << slide << ": " << tiles.size() << " tiles (" << img.width << "x" << img.height << " at "
            << format_double(cfg.mpp_out) << " mpp)\n";
}

// featurize

struct FeaturizeArgs {
  std::string tiles_dir;
  std::string encoder = "mean";
  std::size_t dim = 64;
};

void cmd_featurize(const Globals& g, const FeaturizeArgs& a) {
  const auto out = require_out(g, "featurize");
  const fs::path dir(a.tiles_dir);
  const auto table = CsvTable::load(dir / "tiles.csv");
  const auto cs = table.column("slide_id"), cx = table.column("x"), cy = table.column("y");

  std::optional<RandomProjectionEncoder> proj;
  std::size_t dim = 3;
  if (a.encoder == "randproj") {
    proj.emplace(a.dim, g.seed);
    dim = a.dim;
  } else if (a.encoder != "mean") {
    throw UsageError("featurize: unknown encoder '" + a.encoder + "' (expected mean or randproj)");
  }

  std::vector<std::string> slides;
  std::map<std::string, std::vector<std::size_t>> rows_of;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& id = table.rows[r][cs];
    if (!rows_of.count(id)) slides.push_back(id);
    rows_of[id].push_back(r);
  }
  if (slides.empty()) throw ValidationError(table.origin + ": no tiles listed");

  fs::create_directories(out);
  std::vector<fs::path> produced;
  std::string index = "slide_id,n_tiles,dim,feature_path\n";
  for (const auto& slide : slides) {
    const auto& rows = rows_of[slide];
    FeatureMatrix m(rows.size(), dim, rows.size());
    parallel_for(rows.size(), g.jobs, [&](std::size_t k) {
      const auto& row = table.rows[rows[k]];
      const auto where = table.origin + ":" + std::to_string(table.line_numbers[rows[k]]);
      const auto x = parse_number<std::uint32_t>(row[cx], where);
      const auto y = parse_number<std::uint32_t>(row[cy], where);
      const auto tile_path = dir / "tiles" / (slide + "_" + row[cx] + "_" + row[cy] + ".png");
      if (!fs::exists(tile_path)) throw ValidationError(where + ": tile image '" + tile_path.string() + "' is missing");
      const Raster tile = png::read(tile_path);
      const auto v = proj ? (*proj)(tile) : encode_channel_means(tile);
      m.coords[k] = {x, y};
      std::copy(v.begin(), v.end(), m.row(k).begin());
    });
    const auto path = out / (slide + ".fmx");
    write_features(m, path);
    produced.push_back(path);
    index += slide + "," + std::to_string(rows.size()) + "," + std::to_string(dim) + "," + slide + ".fmx\n";
  }
  write_text_file(out / "features.csv", index);
  produced.push_back(out / "features.csv");
  write_artifacts(out, "featurize", produced);
  std::cout << "featurized " << slides.size() << " slide(s) with encoder " << a.encoder << " (dim " << dim << ")\n";
}

// synth

void cmd_synth(const Globals& g) {
  const auto out = require_out(g, "synth");
  auto spec = load_synth_spec(require_config(g, "synth"));
  if (g.seed_given) spec.seed = g.seed;
  const auto ds = generate(spec, g.jobs);
  const auto produced = write_dataset(ds, out);
  write_artifacts(out, "synth", produced);
  std::cout << "synthesized " << ds.train.slides.size() << " training and " << ds.external.slides.size()
            << " external slides\n";
}

// train

void cmd_train(const Globals& g) {
  const auto out = require_out(g, "train");
  auto rc = load_run_config(require_config(g, "train"));
  if (g.seed_given) rc.seed = rc.sample_seed = g.seed;
  const TaskSpec task = load_task_spec(rc.task);
  const auto protocol = rc.protocol(g.jobs);
  const Cohort train = load_cohort(rc.train_manifest, task, rc.sample_seed, "train", g.jobs);
  for (const auto& ext : rc.external_manifests)
    check_no_leakage(train, Cohort{ext.stem().string(), load_manifest(ext, task), {}});

  const auto plan = make_splits(train.entries, rc.folds, rc.seed);
  const auto run = cross_validate(train, task, plan, protocol, rc.seed);
  std::optional<RetrainResult> retrain;
  if (rc.retrain) retrain = one_shot_retrain(run, train, task, protocol, rc.seed);

  auto echo = to_json(rc);
  echo["task_spec"] = format_task_spec(task);
  write_run(out, run, plan, echo, retrain);
  write_artifacts(out, "train", files_under(out));
  std::cout << "trained " << run.records.size() << " models on " << train.size() << " slides";
  if (retrain) std::cout << "; retrained for " << retrain->epoch << " epochs";
  std::cout << "\n";
}

// eval

struct EvalArgs {
  std::string run_dir;
  std::vector<std::string> manifests;
  std::string cohort;
};

void cmd_eval(const Globals& g, const EvalArgs& a) {
  const fs::path run_dir(a.run_dir);
  const fs::path out = g.out.empty() ? run_dir : fs::path(g.out);
  const auto loaded = read_run(run_dir);
  const RunConfig rc = [&] {
    try {
      return run_config_from_json(loaded.config);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError((run_dir / "run.json").string() + ": " + e.what());
    }
  }();
  const TaskSpec task = parse_task_spec(
      KeyValueConfig::parse(loaded.config.value("task_spec", std::string()), (run_dir / "run.json").string()));

  std::vector<fs::path> manifests;
  for (const auto& m : a.manifests) manifests.emplace_back(m);
  if (manifests.empty()) manifests = rc.external_manifests;
  if (manifests.empty()) throw UsageError("eval: no --manifest given and the run lists no external manifests");
  if (!a.cohort.empty() && manifests.size() != 1) throw UsageError("eval: --cohort requires exactly one manifest");

  const Cohort train{"train", load_manifest(rc.train_manifest, task), {}};
  fs::create_directories(out);
  std::vector<fs::path> produced;
  for (const auto& m : manifests) {
    const std::string name = a.cohort.empty() ? m.stem().string() : a.cohort;
    const Cohort ext = load_cohort(m, task, rc.sample_seed, name, g.jobs);
    check_no_leakage(train, ext);
    const auto ps = ensemble_predict(loaded.run, ext, g.jobs);
    const auto path = out / ("preds_" + name + ".csv");
    write_text_file(path, format_predictions(ps));
    produced.push_back(path);
    if (loaded.retrain) {
      const auto rp = predict_single(loaded.retrain->model, "retrain", ext);
      const auto rpath = out / ("preds_" + name + "_retrain.csv");
      write_text_file(rpath, format_predictions(rp, false));
      produced.push_back(rpath);
    }
    std::cout << name << ": scored " << ext.size() << " slides";
    if (count_classes_present(ext.labels()) >= 2)
      std::cout << ", ensemble AUC " << format_fixed(task_auc(ext.labels(), ps.scores), 4);
    std::cout << "\n";
  }
  write_artifacts(out, "eval", produced);
}

// compare / report

struct CompareArgs {
  std::optional<std::size_t> n_boot, n_perm;
  std::string sided = "one";
};

std::vector<fs::path> write_report_files(const fs::path& out, const ReportData& data) {
  std::vector<fs::path> produced{out / "aucs.csv", out / "estimators.csv", out / "report.md"};
  write_text_file(out / "aucs.csv", format_aucs_csv(data.aucs));
  write_text_file(out / "estimators.csv", format_estimators_csv(data.estimators));
  if (data.pairwise) {
    write_text_file(out / "pvalues.csv", format_pvalues_csv(*data.pairwise, data.n_perm));
    produced.push_back(out / "pvalues.csv");
  } else if (fs::exists(out / "pvalues.csv")) {
    fs::remove(out / "pvalues.csv");
  }
  write_text_file(out / "report.md", render_report(data));
  return produced;
}

void cmd_compare(const Globals& g, const CompareArgs& a) {
  const auto out = require_out(g, "compare");
  const auto entries = load_compare_config(require_config(g, "compare"));
  CompareOptions opt;
  opt.seed = g.seed;
  opt.jobs = g.jobs;
  if (a.n_boot) opt.n_boot = *a.n_boot;
  if (a.n_perm) opt.n_perm = *a.n_perm;
  if (opt.n_boot == 0 || opt.n_perm == 0) throw UsageError("compare: --n-boot and --n-perm must be positive");
  if (a.sided == "one")
    opt.sided = Sided::one;
  else if (a.sided == "two")
    opt.sided = Sided::two;
  else
    throw UsageError("compare: --sided must be one or two");
  const auto data = run_compare(entries, opt);
  fs::create_directories(out);
  write_artifacts(out, "compare", write_report_files(out, data));
  std::cout << "compared " << entries.size() << " model/task entries"
            << (data.pairwise ? "" : " (pairwise matrix omitted)") << "\n";
}

void cmd_report(const Globals& g) {
  const auto out = require_out(g, "report");
  ReportData data;
  data.aucs = parse_aucs_csv(CsvTable::load(out / "aucs.csv"));
  if (fs::exists(out / "pvalues.csv")) {
    auto [pm, n_perm] = parse_pvalues_csv(CsvTable::load(out / "pvalues.csv"));
    data.pairwise = std::move(pm);
    data.n_perm = n_perm;
  }
  if (fs::exists(out / "estimators.csv")) data.estimators = parse_estimators_csv(CsvTable::load(out / "estimators.csv"));
  write_text_file(out / "report.md", render_report(data));
  write_artifacts(out, "report", {out / "report.md"});
  std::cout << "wrote " << (out / "report.md").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Benchmark pipeline for attention-based MIL on slide-level tile features"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--config", g.config, "Command configuration file");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--jobs", g.jobs_flag, "Worker threads (default: $BENCH_JOBS or 1)");

  TileArgs tile;
  auto* c_tile = app.add_subcommand("tile", "Cut tissue tiles from a PNG slide image");
  c_tile->add_option("--image", tile.image, "Slide image (PNG)")->required()->check(CLI::ExistingFile);
  c_tile->add_option("--mask", tile.mask, "Tissue mask (PNG, nonzero = tissue); default Otsu")
      ->check(CLI::ExistingFile);
  c_tile->add_option("--slide-id", tile.slide_id, "Slide id (default: image file stem)");
  c_tile->add_option("--tile-px", tile.tile_px);
  c_tile->add_option("--mpp-in", tile.mpp_in);
  c_tile->add_option("--mpp-out", tile.mpp_out);
  c_tile->add_option("--min-tissue", tile.min_tissue);
  c_tile->add_option("--mask-downsample", tile.mask_downsample);
  c_tile->add_flag("--no-tile-images", tile.no_images, "Only write tiles.csv and the mask");

  FeaturizeArgs feat;
  auto* c_feat = app.add_subcommand("featurize", "Encode tiles with a toy encoder into feature files");
  c_feat->add_option("--tiles", feat.tiles_dir, "Output directory of the tile command")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_feat->add_option("--encoder", feat.encoder, "mean (3 channel means) or randproj");
  c_feat->add_option("--dim", feat.dim, "Output dim of randproj");

  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic MIL dataset");
  auto* c_train = app.add_subcommand("train", "Cross-validate, select epochs and retrain");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score external cohorts with a trained run");
  c_eval->add_option("--run", ev.run_dir, "Run directory written by train")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--manifest", ev.manifests, "External manifest(s); default: those in the run config");
  c_eval->add_option("--cohort", ev.cohort, "Cohort name (default: manifest stem)");

  CompareArgs cmp;
  auto* c_cmp = app.add_subcommand("compare", "AUC tables, pairwise tests and estimator comparison");
  c_cmp->add_option("--n-boot", cmp.n_boot, "Bootstrap replicates (default 10000)");
  c_cmp->add_option("--n-perm", cmp.n_perm, "Permutations per test (default 10000)");
  c_cmp->add_option("--sided", cmp.sided, "one or two");

  auto* c_report = app.add_subcommand("report", "Re-render report.md from the CSVs in --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    g.seed_given = app.count("--seed") > 0;
    g.jobs = resolve_jobs(g.jobs_flag);
    if (c_tile->parsed()) cmd_tile(g, tile);
    if (c_feat->parsed()) cmd_featurize(g, feat);
    if (c_synth->parsed()) cmd_synth(g);
    if (c_train->parsed()) cmd_train(g);
    if (c_eval->parsed()) cmd_eval(g, ev);
    if (c_cmp->parsed()) cmd_compare(g, cmp);
    if (c_report->parsed()) cmd_report(g);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
