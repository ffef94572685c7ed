// Config-driven experiment runner: flat key-value configs, ablation grids,
// report emission, and standalone prediction scoring.

#ifndef VQA_EXPERIMENT_HPP
#define VQA_EXPERIMENT_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vqa/data_io.hpp"
#include "vqa/error.hpp"
#include "vqa/metrics.hpp"
#include "vqa/model.hpp"
#include "vqa/training.hpp"

namespace vqa {

// --- flat config grammar ----------------------------------------------------

// `key = value` per line, full-line `#` comments, blank lines ignored.
// Dotted keys pick the section (`model.fusion = mult`). Order-preserving;
// duplicate keys, missing `=`, or empty keys/values raise ParseError with
// the line number.
using ConfigEntries = std::vector<std::pair<std::string, std::string>>;
ConfigEntries parse_config_text(const std::string& text);
ConfigEntries parse_config_file(const std::string& path);  // FormatError

// --- experiment configuration -----------------------------------------------

struct DatasetSource {
  enum class Kind { synthetic, vqa };
  Kind kind = Kind::synthetic;

  SyntheticTaskConfig synthetic;  // kind == synthetic

  // kind == vqa: question/annotation JSON per split plus one VQRF file
  // covering both splits.
  std::string train_questions, train_annotations;
  std::string val_questions, val_annotations;
  std::string features;

  std::size_t answer_vocab = 3000;  // most-frequent answers kept
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string out_dir = "results";
  std::uint64_t seed = 0;
  std::string pretrained_vectors;  // optional word-vector file for the table

  ModelConfig model;
  TrainConfig train;
  ScheduleConfig schedule;
  DatasetSource dataset;
};

// Builds a config from parsed entries; unknown keys, unparseable values, and
// keys of the wrong dataset kind raise ConfigError naming the key. The model
// answer count and visual geometry stay unset here — the dataset supplies
// them at run time.
ExperimentConfig config_from_entries(const ConfigEntries& entries);

// Canonical flat serialization (the `config` echo in result.json); feeding
// it back through config_from_entries reproduces the config.
ConfigEntries config_entries(const ExperimentConfig& config);

// Structural pre-flight: dataset source exclusivity, schedule and loop
// sanity, and every model-combination rule that does not need data. Throws
// ConfigError without touching the filesystem.
void validate_experiment_config(const ExperimentConfig& config);

// --- grids ------------------------------------------------------------------

struct GridAxis {
  std::string key;                  // dotted config key, e.g. "model.fusion"
  std::vector<std::string> values;  // raw value texts, comma-separated in file
};

struct GridConfig {
  ConfigEntries base;           // everything that is not a grid.* key
  std::vector<GridAxis> axes;   // file order; outermost first
  std::string baseline;         // cell name; must be a grid member
};

GridConfig parse_grid_file(const std::string& path);
GridConfig grid_from_entries(const ConfigEntries& entries);

// Cartesian product in axis order. Cell names are
// `<base name>-<axis leaf>-<value>...`; duplicates or a baseline that is
// not a member raise ConfigError.
std::vector<ExperimentConfig> expand_grid(const GridConfig& grid);

// --- running ----------------------------------------------------------------

struct ExperimentResult {
  std::string name;
  std::size_t parameter_count = 0;
  double train_accuracy = 0.0;  // final epoch, running top-1
  double val_accuracy = 0.0;    // consensus metric on the validation split
  std::map<std::string, double> per_type;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string status;  // "ok" for completed runs
};

// Trains and evaluates one configuration. Artifacts land under
// <out_dir>/<name>/: result.json, train_log.csv, predictions.json — written
// only after the run completes, so a failed run leaves nothing behind.
// Deterministic under the config seed (wall_seconds excepted).
ExperimentResult run_experiment(const ExperimentConfig& config,
                                bool quiet = true);

// result.json round-trip used for grid resume and reports.
void save_result(const std::string& path, const ExperimentResult& result,
                 const ConfigEntries& config_echo);
ExperimentResult load_result(const std::string& path);

// Every <dir>/*/result.json, sorted by experiment name.
std::vector<ExperimentResult> load_results_dir(const std::string& dir);

struct GridOutcome {
  std::size_t total = 0;    // Cartesian product size
  std::size_t reused = 0;   // cells skipped via an existing ok result.json
  std::vector<ExperimentResult> results;           // completed cells
  std::vector<std::pair<std::string, std::string>> failures;  // name, reason
};

// Runs every cell (up to `jobs` concurrently), reusing completed cells and
// recording failures without stopping. Writes report.md / report.csv plus a
// grid.json marker into the shared out_dir. Results are independent of cell
// execution order.
GridOutcome run_grid(const GridConfig& grid, std::size_t jobs = 1,
                     bool quiet = true);

// --- reports ----------------------------------------------------------------

struct ReportTables {
  std::string markdown;
  std::string csv;
};

// Rows sorted by validation accuracy descending (name ascending on ties),
// accuracies with 4 decimals, columns name, params, train, val, delta, then
// any per-type columns present. Without a resolvable baseline the delta
// column holds "-". Empty input yields an explicit no-results message.
ReportTables emit_report(const std::vector<ExperimentResult>& results,
                         const std::string& baseline = "");

// Loads <results_dir>/*/result.json; baseline falls back to the grid.json
// marker when present.
ReportTables report_from_dir(const std::string& results_dir,
                             const std::string& baseline = "");

void write_report(const std::string& dir, const ReportTables& tables);

// --- standalone scoring -----------------------------------------------------

// Scores a prediction file against a VQA-format annotation file without any
// model. Every annotated question needs exactly one prediction: unmatched
// ids on either side raise AlignmentError listing them.
EvalResult score_predictions(const std::string& predictions_path,
                             const std::string& annotations_path);

}  // namespace vqa

#endif  // VQA_EXPERIMENT_HPP
