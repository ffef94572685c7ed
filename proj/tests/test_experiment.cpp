#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vqa/experiment.hpp"

using namespace vqa;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

// result.json differs between reruns only in the wall-clock field
std::string mask_wall_seconds(const std::string& text) {
  std::string out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.find("\"wall_seconds\"") != std::string::npos)
      line = "  \"wall_seconds\": <masked>,";
    out += line + "\n";
  }
  return out;
}

fs::path fresh_dir(const std::string& leaf) {
  fs::path dir = fs::temp_directory_path() / "vqa_experiment_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small config that trains in well under a second.
ConfigEntries tiny_entries(const std::string& out_dir) {
  return {
      {"name", "tiny"},
      {"out", out_dir},
      {"seed", "11"},
      {"dataset.kind", "synthetic"},
      {"dataset.k", "3"},
      {"dataset.dv", "16"},
      {"dataset.colors", "red, blue, green, gray"},
      {"dataset.shapes", "cube, ball, cone, ring"},
      {"dataset.train_count", "30"},
      {"dataset.val_count", "10"},
      {"dataset.answer_vocab", "8"},
      {"model.encoder", "gru"},
      {"model.hidden", "8"},
      {"model.embed_dim", "6"},
      {"model.attention", "none"},
      {"model.fusion", "mult"},
      {"model.fused_dim", "8"},
      {"train.batch_size", "8"},
      {"train.epochs", "2"},
  };
}

}  // namespace

TEST_CASE("flat config text parses in order with comments and blanks") {
  const std::string text =
      "# experiment sheet\n"
      "\n"
      "name = demo\n"
      "  model.fusion   =   mult\n"
      "schedule.base_lr = 7e-4\n";
  ConfigEntries e = parse_config_text(text);
  REQUIRE(e.size() == 3);
  CHECK(e[0].first == "name");
  CHECK(e[0].second == "demo");
  CHECK(e[1].first == "model.fusion");
  CHECK(e[1].second == "mult");
  CHECK(e[2].second == "7e-4");
}

TEST_CASE("config grammar violations carry line numbers") {
  CHECK_THROWS_WITH_AS(parse_config_text("name demo\n"),
                       doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config_text("\n = mult\n"),
                       doctest::Contains("line 2"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config_text("a = 1\na =\n"),
                       doctest::Contains("empty value"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config_text("a = 1\n# fine\na = 2\n"),
                       doctest::Contains("duplicate key 'a'"), ParseError);
}

TEST_CASE("config entries map onto every section") {
  ConfigEntries e = {
      {"name", "big"},
      {"out", "/tmp/somewhere"},
      {"seed", "42"},
      {"dataset.kind", "synthetic"},
      {"dataset.k", "6"},
      {"dataset.dv", "64"},
      {"dataset.sigma", "0.2"},
      {"dataset.train_count", "123"},
      {"dataset.val_count", "45"},
      {"dataset.answer_vocab", "100"},
      {"model.encoder", "bilstm"},
      {"model.hidden", "32"},
      {"model.layers", "2"},
      {"model.embed_dim", "20"},
      {"model.frozen_embeddings", "true"},
      {"model.visual", "regions"},
      {"model.attention", "top_down"},
      {"model.attention_activation", "gated_tanh"},
      {"model.glimpses", "2"},
      {"model.attention_dim", "48"},
      {"model.fusion", "concat"},
      {"model.fused_dim", "24"},
      {"model.q_dim", "10"},
      {"model.v_dim", "12"},
      {"train.batch_size", "16"},
      {"train.epochs", "7"},
      {"schedule.base_lr", "0.002"},
      {"schedule.warm_end", "3"},
      {"schedule.plateau_end", "8"},
      {"schedule.decay_factor", "0.5"},
      {"schedule.decay_period", "1"},
      {"schedule.lr_divisor", "5"},
  };
  ExperimentConfig c = config_from_entries(e);
  CHECK(c.name == "big");
  CHECK(c.seed == 42);
  CHECK(c.dataset.kind == DatasetSource::Kind::synthetic);
  CHECK(c.dataset.synthetic.k == 6);
  CHECK(c.dataset.synthetic.sigma == 0.2);
  CHECK(c.dataset.answer_vocab == 100);
  CHECK(c.model.encoder.kind == EncoderKind::bilstm);
  CHECK(c.model.encoder.layers == 2);
  CHECK(c.model.frozen_embeddings);
  CHECK(c.model.attention == AttentionKind::top_down);
  CHECK(c.model.attention_activation == Activation::gated_tanh);
  CHECK(c.model.glimpses == 2);
  CHECK(c.model.fusion == FusionKind::concat);
  CHECK(c.model.q_dim == 10);
  CHECK(c.train.epochs == 7);
  CHECK(c.schedule.base_lr == 0.002);
  CHECK(c.schedule.decay_period == 1);

  // canonical serialization survives a round trip
  ConfigEntries echo = config_entries(c);
  ExperimentConfig again = config_from_entries(echo);
  CHECK(config_entries(again) == echo);
}

TEST_CASE("config rejects unknown keys, bad values, and mixed sources") {
  CHECK_THROWS_WITH_AS(config_from_entries({{"model.fuson", "mult"}}),
                       doctest::Contains("model.fuson"), ConfigError);
  CHECK_THROWS_AS(config_from_entries({{"train.epochs", "many"}}), ConfigError);
  CHECK_THROWS_AS(config_from_entries({{"model.fusion", "average"}}),
                  ConfigError);
  CHECK_THROWS_AS(config_from_entries({{"seed", "-3"}}), ConfigError);
  // synthetic kind (the default) rejects VQA-source paths
  CHECK_THROWS_WITH_AS(
      config_from_entries({{"dataset.features", "feat.vqrf"}}),
      doctest::Contains("exactly one dataset source"), ConfigError);
  // and vqa kind rejects synthetic knobs
  CHECK_THROWS_AS(
      config_from_entries({{"dataset.kind", "vqa"}, {"dataset.k", "6"}}),
      ConfigError);
}

TEST_CASE("pre-flight validation catches invalid combinations") {
  ExperimentConfig base = config_from_entries(tiny_entries("/tmp/unused"));

  ExperimentConfig c = base;
  c.model.q_dim = 5;
  c.model.v_dim = 7;  // mult fusion cannot combine mismatched projections
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.model.attention = AttentionKind::co_attention;
  c.model.encoder.kind = EncoderKind::linear_gap;
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.name = "a/b";
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.train.batch_size = 0;
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.schedule.base_lr = -1.0;
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.dataset.features = "feat.vqrf";  // second source injected by hand
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.dataset.answer_vocab = 1;
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);

  c = base;
  c.dataset.kind = DatasetSource::Kind::vqa;
  c.dataset.synthetic = {};
  CHECK_THROWS_AS(validate_experiment_config(c), ConfigError);  // no paths
}

TEST_CASE("grid parsing keeps axis order and demands a baseline") {
  ConfigEntries e = {
      {"name", "abl"},
      {"model.hidden", "8"},
      {"grid.baseline", "abl-fusion-mult"},
      {"grid.axis.model.fusion", "mult, concat, sum"},
  };
  GridConfig g = grid_from_entries(e);
  CHECK(g.baseline == "abl-fusion-mult");
  REQUIRE(g.axes.size() == 1);
  CHECK(g.axes[0].key == "model.fusion");
  CHECK(g.axes[0].values == std::vector<std::string>{"mult", "concat", "sum"});
  REQUIRE(g.base.size() == 2);
  CHECK(g.base[0].first == "name");

  ConfigEntries no_baseline = {{"grid.axis.model.fusion", "mult, sum"}};
  CHECK_THROWS_AS(grid_from_entries(no_baseline), ConfigError);
  CHECK_THROWS_AS(grid_from_entries({{"grid.baseline", "x"},
                                     {"grid.rows", "3"}}),
                  ConfigError);
}

TEST_CASE("grid expansion walks the product with the first axis slowest") {
  GridConfig g = grid_from_entries({
      {"name", "abl"},
      {"out", "/tmp/unused"},
      {"dataset.k", "3"},
      {"grid.baseline", "abl-fusion-mult-hidden-8"},
      {"grid.axis.model.fusion", "mult, sum"},
      {"grid.axis.model.hidden", "8, 16"},
  });
  std::vector<ExperimentConfig> cells = expand_grid(g);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].name == "abl-fusion-mult-hidden-8");
  CHECK(cells[1].name == "abl-fusion-mult-hidden-16");
  CHECK(cells[2].name == "abl-fusion-sum-hidden-8");
  CHECK(cells[3].name == "abl-fusion-sum-hidden-16");
  CHECK(cells[0].model.fusion == FusionKind::mult);
  CHECK(cells[3].model.fusion == FusionKind::sum);
  CHECK(cells[1].model.encoder.hidden == 16);
  // base keys flow into every cell
  for (const auto& c : cells) CHECK(c.dataset.synthetic.k == 3);

  GridConfig bad = g;
  bad.baseline = "abl-fusion-avg-hidden-8";
  CHECK_THROWS_WITH_AS(expand_grid(bad), doctest::Contains("baseline"),
                       ConfigError);

  GridConfig dup = g;
  dup.axes[1].values = {"8", "8"};  // repeated value collides cell names
  CHECK_THROWS_WITH_AS(expand_grid(dup), doctest::Contains("duplicate"),
                       ConfigError);
}

TEST_CASE("run_experiment trains, writes artifacts, and reruns byte-stable") {
  fs::path out = fresh_dir("run");
  ExperimentConfig cfg = config_from_entries(tiny_entries(out.string()));
  ExperimentResult r = run_experiment(cfg);

  CHECK(r.name == "tiny");
  CHECK(r.status == "ok");
  CHECK(r.seed == 11);
  CHECK(r.parameter_count > 0);
  CHECK(r.val_accuracy >= 0.0);
  CHECK(r.val_accuracy <= 1.0);
  CHECK(r.per_type.count("other") == 1);
  CHECK(r.wall_seconds > 0.0);

  const fs::path dir = out / "tiny";
  REQUIRE(fs::exists(dir / "result.json"));
  REQUIRE(fs::exists(dir / "train_log.csv"));
  REQUIRE(fs::exists(dir / "predictions.json"));

  const std::string result1 = slurp(dir / "result.json");
  const std::string log1 = slurp(dir / "train_log.csv");

  // the stored result round-trips
  ExperimentResult loaded = load_result((dir / "result.json").string());
  CHECK(loaded.name == r.name);
  CHECK(loaded.val_accuracy == r.val_accuracy);
  CHECK(loaded.train_accuracy == r.train_accuracy);
  CHECK(loaded.parameter_count == r.parameter_count);
  CHECK(loaded.status == "ok");

  // the prediction artifact parses and covers the validation split
  std::vector<Prediction> preds =
      parse_predictions((dir / "predictions.json").string());
  CHECK(preds.size() == 10);

  // identical rerun: identical bytes outside the wall clock
  ExperimentResult again = run_experiment(cfg);
  CHECK(again.val_accuracy == r.val_accuracy);
  CHECK(again.train_accuracy == r.train_accuracy);
  const std::string result2 = slurp(dir / "result.json");
  const std::string log2 = slurp(dir / "train_log.csv");
  CHECK(log2 == log1);
  CHECK(mask_wall_seconds(result2) == mask_wall_seconds(result1));

  fs::remove_all(out);
}

TEST_CASE("invalid configuration leaves no artifacts behind") {
  fs::path out = fresh_dir("preflight");
  ConfigEntries e = tiny_entries((out / "sub").string());
  e.emplace_back("model.q_dim", "5");
  e.emplace_back("model.v_dim", "7");
  ExperimentConfig cfg = config_from_entries(e);
  CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
  CHECK(!fs::exists(out / "sub"));
  fs::remove_all(out);
}

TEST_CASE("run_grid covers the product, resumes, and records failures") {
  fs::path out = fresh_dir("grid");
  ConfigEntries base = tiny_entries(out.string());
  ConfigEntries ge = base;
  for (auto& [k, v] : ge)
    if (k == "name") v = "abl";
  ge.emplace_back("grid.baseline", "abl-fusion-mult");
  ge.emplace_back("grid.axis.model.fusion", "mult, concat, sum");
  GridConfig grid = grid_from_entries(ge);

  GridOutcome outcome = run_grid(grid);
  CHECK(outcome.total == 3);
  CHECK(outcome.reused == 0);
  CHECK(outcome.failures.empty());
  REQUIRE(outcome.results.size() == 3);
  for (const char* cell :
       {"abl-fusion-mult", "abl-fusion-concat", "abl-fusion-sum"})
    REQUIRE(fs::exists(out / cell / "result.json"));
  REQUIRE(fs::exists(out / "report.md"));
  REQUIRE(fs::exists(out / "report.csv"));
  REQUIRE(fs::exists(out / "grid.json"));
  const std::string report1 = slurp(out / "report.csv");

  // baseline row shows a zero delta
  {
    std::stringstream ss(report1);
    std::string line;
    std::getline(ss, line);  // header
    bool saw_baseline = false;
    while (std::getline(ss, line)) {
      if (line.rfind("abl-fusion-mult,", 0) == 0) {
        saw_baseline = true;
        CHECK(line.find(",0.0000") != std::string::npos);
      }
    }
    CHECK(saw_baseline);
  }

  // a second pass reuses every completed cell and reproduces the report
  GridOutcome resumed = run_grid(grid);
  CHECK(resumed.reused == 3);
  CHECK(resumed.failures.empty());
  REQUIRE(resumed.results.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(resumed.results[i].name == outcome.results[i].name);
    CHECK(resumed.results[i].val_accuracy == outcome.results[i].val_accuracy);
  }
  CHECK(slurp(out / "report.csv") == report1);

  // interrupted halfway: seed one cell by hand, the grid completes the rest
  fs::path out2 = fresh_dir("grid_resume");
  ConfigEntries ge2 = ge;
  for (auto& [k, v] : ge2)
    if (k == "out") v = out2.string();
  GridConfig grid2 = grid_from_entries(ge2);
  std::vector<ExperimentConfig> cells = expand_grid(grid2);
  run_experiment(cells[1]);
  GridOutcome after = run_grid(grid2);
  CHECK(after.reused == 1);
  REQUIRE(after.results.size() == 3);
  CHECK(slurp(out2 / "report.csv") == report1);

  fs::remove_all(out);
  fs::remove_all(out2);
}

TEST_CASE("failed grid cells are recorded while the rest completes") {
  fs::path out = fresh_dir("grid_fail");
  ConfigEntries ge = tiny_entries(out.string());
  ge.emplace_back("grid.baseline", "tiny-q_dim-0");
  // q_dim = 5 with v_dim defaulting to fused breaks mult fusion at run time
  ge.emplace_back("grid.axis.model.q_dim", "0, 5");
  GridConfig grid = grid_from_entries(ge);

  GridOutcome outcome = run_grid(grid);
  CHECK(outcome.total == 2);
  REQUIRE(outcome.results.size() == 1);
  CHECK(outcome.results[0].name == "tiny-q_dim-0");
  REQUIRE(outcome.failures.size() == 1);
  CHECK(outcome.failures[0].first == "tiny-q_dim-5");
  CHECK(!fs::exists(out / "tiny-q_dim-5" / "result.json"));
  fs::remove_all(out);
}

TEST_CASE("reports sort by validation accuracy with fixed columns") {
  std::vector<ExperimentResult> results(3);
  results[0].name = "alpha";
  results[0].parameter_count = 100;
  results[0].train_accuracy = 0.5;
  results[0].val_accuracy = 0.41237;
  results[0].per_type = {{"other", 0.41237}};
  results[1].name = "beta";
  results[1].parameter_count = 200;
  results[1].train_accuracy = 0.9;
  results[1].val_accuracy = 0.80004;
  results[1].per_type = {{"other", 0.9}, {"number", 0.7}};
  results[2].name = "gamma";
  results[2].parameter_count = 50;
  results[2].train_accuracy = 0.6;
  results[2].val_accuracy = 0.55;

  ReportTables t = emit_report(results, "alpha");
  std::stringstream ss(t.csv);
  std::string header, r1, r2, r3;
  std::getline(ss, header);
  std::getline(ss, r1);
  std::getline(ss, r2);
  std::getline(ss, r3);
  CHECK(header == "name,params,train,val,delta,number,other");
  CHECK(r1 == "beta,200,0.9000,0.8000,0.3877,0.7000,0.9000");
  CHECK(r2 == "gamma,50,0.6000,0.5500,0.1376,-,-");
  CHECK(r3 == "alpha,100,0.5000,0.4124,0.0000,-,0.4124");

  // markdown mirrors the same ordering and shows signed deltas
  CHECK(t.markdown.find("| beta | 200 | 0.9000 | 0.8000 | +0.3877 |") !=
        std::string::npos);
  CHECK(t.markdown.find("| alpha | 100 | 0.5000 | 0.4124 | +0.0000 |") !=
        std::string::npos);
  CHECK(t.markdown.find("| name | params | train | val | delta |") !=
        std::string::npos);

  // no baseline known: delta column degrades to "-"
  ReportTables bare = emit_report(results, "");
  CHECK(bare.csv.find("beta,200,0.9000,0.8000,-") != std::string::npos);

  // empty inputs produce the explicit message
  ReportTables none = emit_report({}, "");
  CHECK(none.markdown == "No results.\n");
  CHECK(none.csv == "name,params,train,val,delta\n");
}

TEST_CASE("report CSV re-parses to the stored accuracies") {
  fs::path out = fresh_dir("report_roundtrip");
  ExperimentConfig cfg = config_from_entries(tiny_entries(out.string()));
  ExperimentResult r = run_experiment(cfg);
  ReportTables t = report_from_dir(out.string());

  std::stringstream ss(t.csv);
  std::string header, row;
  std::getline(ss, header);
  REQUIRE(std::getline(ss, row));
  std::stringstream cells(row);
  std::string name, params, train, val;
  std::getline(cells, name, ',');
  std::getline(cells, params, ',');
  std::getline(cells, train, ',');
  std::getline(cells, val, ',');
  CHECK(name == r.name);
  CHECK(std::stoull(params) == r.parameter_count);
  char expect_train[32], expect_val[32];
  std::snprintf(expect_train, sizeof(expect_train), "%.4f", r.train_accuracy);
  std::snprintf(expect_val, sizeof(expect_val), "%.4f", r.val_accuracy);
  CHECK(train == expect_train);
  CHECK(val == expect_val);

  ReportTables empty = report_from_dir((out / "nonexistent").string());
  CHECK(empty.markdown.find("No results") != std::string::npos);
  fs::remove_all(out);
}

TEST_CASE("score_predictions reproduces hand-computed consensus scores") {
  fs::path dir = fresh_dir("score");
  std::vector<AnnotationRecord> anns(3);
  anns[0].question_id = 1;
  anns[0].answer_type = "yes/no";
  anns[0].designated_answer = "yes";
  anns[0].humans.assign(10, "yes");
  anns[1].question_id = 2;
  anns[1].answer_type = "number";
  anns[1].designated_answer = "3";
  anns[1].humans = {"3", "3", "4", "4", "4", "4", "4", "4", "4", "4"};
  anns[2].question_id = 3;
  anns[2].answer_type = "other";
  anns[2].designated_answer = "red";
  anns[2].humans = {"The Red", "blue", "blue", "blue", "blue",
                    "blue",    "blue", "blue", "blue", "blue"};
  save_annotations((dir / "ann.json").string(), anns);

  std::vector<Prediction> preds = {{1, "yes"}, {2, "3"}, {3, "red"}};
  save_predictions((dir / "pred.json").string(), preds);

  EvalResult r = score_predictions((dir / "pred.json").string(),
                                   (dir / "ann.json").string());
  CHECK(r.count == 3);
  // 10 matches -> 1; 2 matches -> 2/3; 1 match after normalization -> 1/3
  CHECK(r.per_type.at("yes/no") == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.per_type.at("number") == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.per_type.at("other") == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(r.overall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // alignment failures
  save_predictions((dir / "empty.json").string(), {});
  CHECK_THROWS_AS(score_predictions((dir / "empty.json").string(),
                                    (dir / "ann.json").string()),
                  AlignmentError);
  save_predictions((dir / "unknown.json").string(),
                   {{1, "yes"}, {2, "3"}, {3, "red"}, {99, "no"}});
  CHECK_THROWS_WITH_AS(score_predictions((dir / "unknown.json").string(),
                                         (dir / "ann.json").string()),
                       doctest::Contains("99"), AlignmentError);
  save_predictions((dir / "partial.json").string(), {{1, "yes"}});
  CHECK_THROWS_WITH_AS(score_predictions((dir / "partial.json").string(),
                                         (dir / "ann.json").string()),
                       doctest::Contains("no prediction"), AlignmentError);

  // duplicate ids are already a prediction-file defect
  spit(dir / "dup.json",
       "[{\"question_id\": 1, \"answer\": \"yes\"},"
       " {\"question_id\": 1, \"answer\": \"no\"}]");
  CHECK_THROWS_AS(score_predictions((dir / "dup.json").string(),
                                    (dir / "ann.json").string()),
                  ValidationError);
  fs::remove_all(dir);
}
