// vqa_anatomy: config-driven runner for the component study.
//
//   run    <config>                train + evaluate one experiment
//   grid   <grid>                  run an ablation grid (resumable)
//   report <results_dir>           rebuild the Markdown / CSV tables
//   score  <predictions> <annotations>   standalone consensus scoring
//   synth                          emit a synthetic dataset to disk

#include <cinttypes>
#include <cstdio>
#include <filesystem>

#include <CLI11.hpp>

#include "vqa/experiment.hpp"

namespace fs = std::filesystem;

namespace {

void apply_overrides(vqa::ConfigEntries& entries, const CLI::Option* seed_opt,
                     std::uint64_t seed, const CLI::Option* out_opt,
                     const std::string& out) {
  if (seed_opt->count() > 0) {
    bool found = false;
    for (auto& [k, v] : entries)
      if (k == "seed") v = std::to_string(seed), found = true;
    if (!found) entries.emplace_back("seed", std::to_string(seed));
  }
  if (out_opt->count() > 0) {
    bool found = false;
    for (auto& [k, v] : entries)
      if (k == "out") v = out, found = true;
    if (!found) entries.emplace_back("out", out);
  }
}

void print_result(const vqa::ExperimentResult& r) {
  std::printf("%s: params %zu  train %.4f  val %.4f", r.name.c_str(),
              r.parameter_count, r.train_accuracy, r.val_accuracy);
  for (const auto& [type, acc] : r.per_type)
    std::printf("  %s %.4f", type.c_str(), acc);
  std::printf("  (%.1fs)\n", r.wall_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"component laboratory for visual question answering"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out = "results";
  std::size_t jobs = 1;
  bool quiet = false;
  auto* seed_opt =
      app.add_option("--seed", seed, "override the experiment seed");
  auto* out_opt = app.add_option("--out", out, "output directory")
                      ->envname("VQA_ANATOMY_OUT");
  app.add_option("--jobs", jobs, "max concurrent grid cells")
      ->check(CLI::PositiveNumber);
  app.add_flag("--quiet", quiet, "suppress per-epoch progress");

  std::string config_path, grid_path, results_dir, baseline;
  std::string predictions_path, annotations_path;

  auto* run_cmd = app.add_subcommand("run", "train and evaluate one config");
  run_cmd->fallthrough();
  run_cmd->add_option("config", config_path, "flat key-value config file")
      ->required();

  auto* grid_cmd = app.add_subcommand("grid", "run an ablation grid");
  grid_cmd->fallthrough();
  grid_cmd->add_option("grid", grid_path, "grid file (config + grid.* keys)")
      ->required();

  auto* report_cmd =
      app.add_subcommand("report", "emit tables from stored results");
  report_cmd->fallthrough();
  report_cmd->add_option("results_dir", results_dir, "directory of results")
      ->required();
  report_cmd->add_option("--baseline", baseline,
                         "experiment name the delta column refers to");

  auto* score_cmd =
      app.add_subcommand("score", "score a prediction file against annotations");
  score_cmd->fallthrough();
  score_cmd->add_option("predictions", predictions_path, "prediction JSON")
      ->required();
  score_cmd->add_option("annotations", annotations_path, "annotation JSON")
      ->required();

  vqa::SyntheticTaskConfig synth_cfg;
  auto* synth_cmd =
      app.add_subcommand("synth", "write a synthetic dataset to disk");
  synth_cmd->fallthrough();
  synth_cmd->add_option("--k", synth_cfg.k, "regions per image");
  synth_cmd->add_option("--dv", synth_cfg.dv, "feature width");
  synth_cmd->add_option("--sigma", synth_cfg.sigma, "feature noise stddev");
  synth_cmd->add_option("--train", synth_cfg.train_count, "training questions");
  synth_cmd->add_option("--val", synth_cfg.val_count, "validation questions");
  std::string colors, shapes;
  synth_cmd->add_option("--colors", colors, "comma-separated color tokens");
  synth_cmd->add_option("--shapes", shapes, "comma-separated shape tokens");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      vqa::ConfigEntries entries = vqa::parse_config_file(config_path);
      apply_overrides(entries, seed_opt, seed, out_opt, out);
      const vqa::ExperimentConfig cfg = vqa::config_from_entries(entries);
      const vqa::ExperimentResult result = vqa::run_experiment(cfg, quiet);
      print_result(result);
      std::printf("artifacts: %s\n",
                  (fs::path(cfg.out_dir) / cfg.name).string().c_str());
      return 0;
    }

    if (*grid_cmd) {
      vqa::ConfigEntries entries = vqa::parse_config_file(grid_path);
      apply_overrides(entries, seed_opt, seed, out_opt, out);
      const vqa::GridConfig grid = vqa::grid_from_entries(entries);
      std::size_t total = 1;
      for (const auto& axis : grid.axes) total *= axis.values.size();
      std::printf("grid: %zu cell(s) across %zu axis/axes, baseline '%s'\n",
                  total, grid.axes.size(), grid.baseline.c_str());
      const vqa::GridOutcome outcome = vqa::run_grid(grid, jobs, quiet);
      for (const auto& r : outcome.results) print_result(r);
      for (const auto& [name, reason] : outcome.failures)
        std::fprintf(stderr, "%s: FAILED: %s\n", name.c_str(), reason.c_str());
      if (outcome.reused > 0)
        std::printf("%zu completed cell(s) reused\n", outcome.reused);
      std::string out_dir = "results";
      for (const auto& [k, v] : grid.base)
        if (k == "out") out_dir = v;
      std::printf("report: %s\n",
                  (fs::path(out_dir) / "report.md").string().c_str());
      return outcome.failures.empty() ? 0 : 1;
    }

    if (*report_cmd) {
      const vqa::ReportTables tables =
          vqa::report_from_dir(results_dir, baseline);
      if (tables.markdown.rfind("No results", 0) == 0) {
        std::fprintf(stderr, "%s", tables.markdown.c_str());
        return 1;
      }
      vqa::write_report(results_dir, tables);
      std::printf("%s", tables.markdown.c_str());
      return 0;
    }

    if (*score_cmd) {
      const vqa::EvalResult result =
          vqa::score_predictions(predictions_path, annotations_path);
      std::printf("overall  %.4f  (%zu questions)\n", result.overall,
                  result.count);
      for (const auto& [type, acc] : result.per_type)
        std::printf("%-8s %.4f\n", type.c_str(), acc);
      return 0;
    }

    if (*synth_cmd) {
      auto parse_tokens = [](const std::string& text) {
        std::vector<std::string> tokens;
        std::size_t start = 0;
        while (start <= text.size()) {
          std::size_t comma = text.find(',', start);
          if (comma == std::string::npos) comma = text.size();
          const std::string token = text.substr(start, comma - start);
          if (!token.empty()) tokens.push_back(token);
          start = comma + 1;
        }
        return tokens;
      };
      if (!colors.empty()) synth_cfg.colors = parse_tokens(colors);
      if (!shapes.empty()) synth_cfg.shapes = parse_tokens(shapes);
      const vqa::SyntheticDataset data =
          vqa::generate_synthetic(synth_cfg, seed);
      fs::create_directories(out);
      const fs::path dir(out);
      vqa::save_questions((dir / "train_questions.json").string(),
                          data.train.questions);
      vqa::save_annotations((dir / "train_annotations.json").string(),
                            data.train.annotations);
      vqa::save_questions((dir / "val_questions.json").string(),
                          data.val.questions);
      vqa::save_annotations((dir / "val_annotations.json").string(),
                            data.val.annotations);
      std::vector<vqa::RegionFeatures> images;
      images.reserve(data.features.size());
      for (const auto& [id, rf] : data.features) images.push_back(rf);
      vqa::save_region_features((dir / "features.vqrf").string(), data.k,
                                data.dv, images);
      std::printf(
          "wrote %zu train + %zu val questions, %zu images (k=%" PRIu32
          ", dv=%" PRIu32 ") under %s\n",
          data.train.questions.size(), data.val.questions.size(),
          data.features.size(), data.k, data.dv, dir.string().c_str());
      return 0;
    }
  } catch (const vqa::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
