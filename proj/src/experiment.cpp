#include "vqa/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "vqa/encoders.hpp"
#include "vqa/rng.hpp"

namespace fs = std::filesystem;

namespace vqa {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& text,
                                    const std::string& key) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw ConfigError("empty item in list value of '" + key + "'");
    items.push_back(item);
  }
  if (items.empty()) throw ConfigError("empty list value for '" + key + "'");
  return items;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing text");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value +
                      "' as a number");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("sign");
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing text");
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value +
                      "' as a non-negative integer");
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" +
                    value + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_acc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out;
}

std::string list_ids(const std::vector<std::uint64_t>& ids) {
  std::string out;
  const std::size_t shown = std::min<std::size_t>(ids.size(), 8);
  for (std::size_t i = 0; i < shown; ++i) {
    if (i) out += ", ";
    out += std::to_string(ids[i]);
  }
  if (ids.size() > shown)
    out += " (+" + std::to_string(ids.size() - shown) + " more)";
  return out;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << body;
  if (!out) throw FormatError("short write to " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Pulls a value out of an entry map; the leftovers after all takes are the
// unknown keys.
class EntryBag {
 public:
  explicit EntryBag(const ConfigEntries& entries) {
    for (const auto& [k, v] : entries) {
      if (!map_.emplace(k, v).second)
        throw ConfigError("duplicate config key '" + k + "'");
    }
  }

  const std::string* take(const std::string& key) {
    auto it = map_.find(key);
    if (it == map_.end()) return nullptr;
    taken_.push_back(it);
    return &it->second;
  }

  void finish() const {
    std::map<std::string, std::string> left = map_;
    for (auto it : taken_) left.erase(it->first);
    if (!left.empty()) {
      std::string keys;
      for (const auto& [k, v] : left) {
        if (!keys.empty()) keys += ", ";
        keys += "'" + k + "'";
      }
      throw ConfigError("unknown config key(s): " + keys);
    }
  }

  bool has(const std::string& key) const { return map_.count(key) != 0; }

 private:
  std::map<std::string, std::string> map_;
  std::vector<std::map<std::string, std::string>::iterator> taken_;
};

void set_entry(ConfigEntries& entries, const std::string& key,
               const std::string& value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries.emplace_back(key, value);
}

std::string axis_leaf(const std::string& key) {
  const std::size_t dot = key.rfind('.');
  return dot == std::string::npos ? key : key.substr(dot + 1);
}

std::string name_safe(const std::string& text) {
  std::string out = text;
  for (char& c : out) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
                    c == '-' || c == '_';
    if (!ok) c = '_';
  }
  return out;
}

ordered_json echo_object(const ConfigEntries& echo) {
  ordered_json obj = ordered_json::object();
  for (const auto& [k, v] : echo) obj[k] = v;
  return obj;
}

}  // namespace

// --- config parsing ---------------------------------------------------------

ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries entries;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(lineno) +
                       ": expected 'key = value', got '" + body + "'");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty())
      throw ParseError("config line " + std::to_string(lineno) +
                       ": empty key");
    if (value.empty())
      throw ParseError("config line " + std::to_string(lineno) +
                       ": empty value for '" + key + "'");
    if (!seen.insert(key).second)
      throw ParseError("config line " + std::to_string(lineno) +
                       ": duplicate key '" + key + "'");
    entries.emplace_back(key, value);
  }
  return entries;
}

ConfigEntries parse_config_file(const std::string& path) {
  return parse_config_text(read_text(path));
}

ExperimentConfig config_from_entries(const ConfigEntries& entries) {
  EntryBag bag(entries);
  ExperimentConfig cfg;

  if (const auto* v = bag.take("name")) cfg.name = *v;
  if (const auto* v = bag.take("out")) cfg.out_dir = *v;
  if (const auto* v = bag.take("seed")) cfg.seed = parse_u64("seed", *v);

  // dataset
  DatasetSource& ds = cfg.dataset;
  if (const auto* v = bag.take("dataset.kind")) {
    if (*v == "synthetic")
      ds.kind = DatasetSource::Kind::synthetic;
    else if (*v == "vqa")
      ds.kind = DatasetSource::Kind::vqa;
    else
      throw ConfigError("dataset.kind must be synthetic or vqa, got '" + *v +
                        "'");
  }
  if (const auto* v = bag.take("dataset.answer_vocab"))
    ds.answer_vocab = parse_size("dataset.answer_vocab", *v);

  const bool synthetic = ds.kind == DatasetSource::Kind::synthetic;
  auto wrong_kind = [&](const std::string& key, const char* needs) {
    if (bag.has(key)) {
      throw ConfigError("key '" + key + "' applies to dataset.kind = " +
                        needs + "; exactly one dataset source must be "
                        "configured");
    }
  };
  if (synthetic) {
    if (const auto* v = bag.take("dataset.k"))
      ds.synthetic.k = parse_size("dataset.k", *v);
    if (const auto* v = bag.take("dataset.dv"))
      ds.synthetic.dv = parse_size("dataset.dv", *v);
    if (const auto* v = bag.take("dataset.sigma"))
      ds.synthetic.sigma = parse_double("dataset.sigma", *v);
    if (const auto* v = bag.take("dataset.train_count"))
      ds.synthetic.train_count = parse_size("dataset.train_count", *v);
    if (const auto* v = bag.take("dataset.val_count"))
      ds.synthetic.val_count = parse_size("dataset.val_count", *v);
    if (const auto* v = bag.take("dataset.colors"))
      ds.synthetic.colors = split_list(*v, "dataset.colors");
    if (const auto* v = bag.take("dataset.shapes"))
      ds.synthetic.shapes = split_list(*v, "dataset.shapes");
    for (const char* key :
         {"dataset.train_questions", "dataset.train_annotations",
          "dataset.val_questions", "dataset.val_annotations",
          "dataset.features"})
      wrong_kind(key, "vqa");
  } else {
    if (const auto* v = bag.take("dataset.train_questions"))
      ds.train_questions = *v;
    if (const auto* v = bag.take("dataset.train_annotations"))
      ds.train_annotations = *v;
    if (const auto* v = bag.take("dataset.val_questions")) ds.val_questions = *v;
    if (const auto* v = bag.take("dataset.val_annotations"))
      ds.val_annotations = *v;
    if (const auto* v = bag.take("dataset.features")) ds.features = *v;
    for (const char* key : {"dataset.k", "dataset.dv", "dataset.sigma",
                            "dataset.train_count", "dataset.val_count",
                            "dataset.colors", "dataset.shapes"})
      wrong_kind(key, "synthetic");
  }

  // model
  ModelConfig& m = cfg.model;
  if (const auto* v = bag.take("model.encoder"))
    m.encoder.kind = encoder_kind_from_string(*v);
  if (const auto* v = bag.take("model.hidden"))
    m.encoder.hidden = parse_size("model.hidden", *v);
  if (const auto* v = bag.take("model.layers"))
    m.encoder.layers = parse_size("model.layers", *v);
  if (const auto* v = bag.take("model.embed_dim"))
    m.encoder.embed_dim = parse_size("model.embed_dim", *v);
  if (const auto* v = bag.take("model.frozen_embeddings"))
    m.frozen_embeddings = parse_bool("model.frozen_embeddings", *v);
  if (const auto* v = bag.take("model.pretrained_vectors"))
    cfg.pretrained_vectors = *v;
  if (const auto* v = bag.take("model.visual"))
    m.visual.kind = visual_kind_from_string(*v);
  if (const auto* v = bag.take("model.attention"))
    m.attention = attention_from_string(*v);
  if (const auto* v = bag.take("model.attention_activation"))
    m.attention_activation = activation_from_string(*v);
  if (const auto* v = bag.take("model.glimpses"))
    m.glimpses = parse_size("model.glimpses", *v);
  if (const auto* v = bag.take("model.attention_dim"))
    m.attention_dim = parse_size("model.attention_dim", *v);
  if (const auto* v = bag.take("model.coattention_l2"))
    m.coattention_l2 = parse_bool("model.coattention_l2", *v);
  if (const auto* v = bag.take("model.fusion"))
    m.fusion = fusion_from_string(*v);
  if (const auto* v = bag.take("model.fused_dim"))
    m.fused_dim = parse_size("model.fused_dim", *v);
  if (const auto* v = bag.take("model.q_dim"))
    m.q_dim = parse_size("model.q_dim", *v);
  if (const auto* v = bag.take("model.v_dim"))
    m.v_dim = parse_size("model.v_dim", *v);

  // training and schedule
  if (const auto* v = bag.take("train.batch_size"))
    cfg.train.batch_size = parse_size("train.batch_size", *v);
  if (const auto* v = bag.take("train.epochs"))
    cfg.train.epochs = parse_size("train.epochs", *v);
  if (const auto* v = bag.take("schedule.base_lr"))
    cfg.schedule.base_lr = parse_double("schedule.base_lr", *v);
  if (const auto* v = bag.take("schedule.warm_end"))
    cfg.schedule.warm_end_epoch = parse_size("schedule.warm_end", *v);
  if (const auto* v = bag.take("schedule.plateau_end"))
    cfg.schedule.plateau_end_epoch = parse_size("schedule.plateau_end", *v);
  if (const auto* v = bag.take("schedule.decay_factor"))
    cfg.schedule.decay_factor = parse_double("schedule.decay_factor", *v);
  if (const auto* v = bag.take("schedule.decay_period"))
    cfg.schedule.decay_period = parse_size("schedule.decay_period", *v);
  if (const auto* v = bag.take("schedule.lr_divisor"))
    cfg.schedule.lr_divisor = parse_double("schedule.lr_divisor", *v);

  bag.finish();
  return cfg;
}

ConfigEntries config_entries(const ExperimentConfig& cfg) {
  ConfigEntries e;
  e.emplace_back("name", cfg.name);
  e.emplace_back("out", cfg.out_dir);
  e.emplace_back("seed", std::to_string(cfg.seed));

  const DatasetSource& ds = cfg.dataset;
  if (ds.kind == DatasetSource::Kind::synthetic) {
    e.emplace_back("dataset.kind", "synthetic");
    e.emplace_back("dataset.k", std::to_string(ds.synthetic.k));
    e.emplace_back("dataset.dv", std::to_string(ds.synthetic.dv));
    e.emplace_back("dataset.sigma", fmt_double(ds.synthetic.sigma));
    e.emplace_back("dataset.train_count",
                   std::to_string(ds.synthetic.train_count));
    e.emplace_back("dataset.val_count", std::to_string(ds.synthetic.val_count));
    if (!ds.synthetic.colors.empty())
      e.emplace_back("dataset.colors", join_list(ds.synthetic.colors));
    if (!ds.synthetic.shapes.empty())
      e.emplace_back("dataset.shapes", join_list(ds.synthetic.shapes));
  } else {
    e.emplace_back("dataset.kind", "vqa");
    e.emplace_back("dataset.train_questions", ds.train_questions);
    e.emplace_back("dataset.train_annotations", ds.train_annotations);
    e.emplace_back("dataset.val_questions", ds.val_questions);
    e.emplace_back("dataset.val_annotations", ds.val_annotations);
    e.emplace_back("dataset.features", ds.features);
  }
  e.emplace_back("dataset.answer_vocab", std::to_string(ds.answer_vocab));

  const ModelConfig& m = cfg.model;
  e.emplace_back("model.encoder", to_string(m.encoder.kind));
  e.emplace_back("model.hidden", std::to_string(m.encoder.hidden));
  e.emplace_back("model.layers", std::to_string(m.encoder.layers));
  e.emplace_back("model.embed_dim", std::to_string(m.encoder.embed_dim));
  e.emplace_back("model.frozen_embeddings",
                 m.frozen_embeddings ? "true" : "false");
  if (!cfg.pretrained_vectors.empty())
    e.emplace_back("model.pretrained_vectors", cfg.pretrained_vectors);
  e.emplace_back("model.visual", to_string(m.visual.kind));
  e.emplace_back("model.attention", to_string(m.attention));
  e.emplace_back("model.attention_activation",
                 to_string(m.attention_activation));
  e.emplace_back("model.glimpses", std::to_string(m.glimpses));
  e.emplace_back("model.attention_dim", std::to_string(m.attention_dim));
  e.emplace_back("model.coattention_l2", m.coattention_l2 ? "true" : "false");
  e.emplace_back("model.fusion", to_string(m.fusion));
  e.emplace_back("model.fused_dim", std::to_string(m.fused_dim));
  e.emplace_back("model.q_dim", std::to_string(m.q_dim));
  e.emplace_back("model.v_dim", std::to_string(m.v_dim));

  e.emplace_back("train.batch_size", std::to_string(cfg.train.batch_size));
  e.emplace_back("train.epochs", std::to_string(cfg.train.epochs));

  const ScheduleConfig& s = cfg.schedule;
  e.emplace_back("schedule.base_lr", fmt_double(s.base_lr));
  e.emplace_back("schedule.warm_end", std::to_string(s.warm_end_epoch));
  e.emplace_back("schedule.plateau_end", std::to_string(s.plateau_end_epoch));
  e.emplace_back("schedule.decay_factor", fmt_double(s.decay_factor));
  e.emplace_back("schedule.decay_period", std::to_string(s.decay_period));
  e.emplace_back("schedule.lr_divisor", fmt_double(s.lr_divisor));
  return e;
}

void validate_experiment_config(const ExperimentConfig& cfg) {
  if (cfg.name.empty()) throw ConfigError("experiment name must not be empty");
  if (cfg.name.find('/') != std::string::npos ||
      cfg.name.find('\\') != std::string::npos || cfg.name == "." ||
      cfg.name == "..") {
    throw ConfigError("experiment name '" + cfg.name +
                      "' is not usable as a directory name");
  }
  if (cfg.out_dir.empty())
    throw ConfigError("output directory must not be empty");
  if (cfg.train.batch_size == 0)
    throw ConfigError("train.batch_size must be at least 1");
  if (cfg.train.epochs == 0) throw ConfigError("train.epochs must be at least 1");
  validate_schedule(cfg.schedule);

  const DatasetSource& ds = cfg.dataset;
  const bool any_vqa_path = !ds.train_questions.empty() ||
                            !ds.train_annotations.empty() ||
                            !ds.val_questions.empty() ||
                            !ds.val_annotations.empty() || !ds.features.empty();
  if (ds.kind == DatasetSource::Kind::synthetic) {
    if (any_vqa_path) {
      throw ConfigError(
          "synthetic dataset configured together with VQA file paths; exactly "
          "one dataset source is allowed");
    }
    if (ds.synthetic.k == 0 || ds.synthetic.dv == 0)
      throw ConfigError("synthetic dataset needs k >= 1 and dv >= 1");
    if (ds.synthetic.train_count == 0 || ds.synthetic.val_count == 0)
      throw ConfigError("synthetic dataset needs nonempty splits");
    if (ds.synthetic.sigma < 0.0)
      throw ConfigError("dataset.sigma must be non-negative");
  } else {
    if (ds.train_questions.empty() || ds.train_annotations.empty() ||
        ds.val_questions.empty() || ds.val_annotations.empty() ||
        ds.features.empty()) {
      throw ConfigError(
          "vqa dataset needs train/val question and annotation files plus a "
          "feature file");
    }
  }
  if (ds.answer_vocab < 2)
    throw ConfigError("dataset.answer_vocab must be at least 2");

  // Model-combination rules that do not need the data: check with the
  // geometry the dataset will supply (known up front for synthetic data).
  ModelConfig m = cfg.model;
  m.answers = 2;
  const bool pooled = m.visual.kind == VisualMode::Kind::pooled_vector;
  if (ds.kind == DatasetSource::Kind::synthetic) {
    m.visual.k = pooled ? 1 : ds.synthetic.k;
    m.visual.dv = ds.synthetic.dv;
  } else {
    m.visual.k = pooled ? 1 : 36;
    m.visual.dv = m.attention == AttentionKind::co_attention
                      ? encoder_output_dim(m.encoder)
                      : 2048;
  }
  validate_model_config(m);
}

// --- grids ------------------------------------------------------------------

GridConfig grid_from_entries(const ConfigEntries& entries) {
  GridConfig grid;
  for (const auto& [key, value] : entries) {
    if (key == "grid.baseline") {
      grid.baseline = value;
    } else if (key.rfind("grid.axis.", 0) == 0) {
      GridAxis axis;
      axis.key = key.substr(std::string("grid.axis.").size());
      if (axis.key.empty())
        throw ConfigError("grid axis with empty config key");
      axis.values = split_list(value, key);
      grid.axes.push_back(std::move(axis));
    } else if (key.rfind("grid.", 0) == 0) {
      throw ConfigError("unknown grid key '" + key + "'");
    } else {
      grid.base.emplace_back(key, value);
    }
  }
  if (grid.baseline.empty())
    throw ConfigError("grid.baseline is required in a grid file");
  return grid;
}

GridConfig parse_grid_file(const std::string& path) {
  return grid_from_entries(parse_config_file(path));
}

std::vector<ExperimentConfig> expand_grid(const GridConfig& grid) {
  std::string prefix = "experiment";
  for (const auto& [k, v] : grid.base)
    if (k == "name") prefix = v;

  std::size_t total = 1;
  for (const auto& axis : grid.axes) total *= axis.values.size();

  std::vector<ExperimentConfig> cells;
  cells.reserve(total);
  std::set<std::string> names;
  for (std::size_t index = 0; index < total; ++index) {
    ConfigEntries entries = grid.base;
    std::string name = prefix;
    // first axis varies slowest
    std::size_t rest = index;
    std::vector<std::size_t> pick(grid.axes.size(), 0);
    for (std::size_t a = grid.axes.size(); a-- > 0;) {
      pick[a] = rest % grid.axes[a].values.size();
      rest /= grid.axes[a].values.size();
    }
    for (std::size_t a = 0; a < grid.axes.size(); ++a) {
      const GridAxis& axis = grid.axes[a];
      const std::string& value = axis.values[pick[a]];
      set_entry(entries, axis.key, value);
      name += "-" + axis_leaf(axis.key) + "-" + name_safe(value);
    }
    set_entry(entries, "name", name);
    if (!names.insert(name).second)
      throw ConfigError("grid produces duplicate cell name '" + name + "'");
    cells.push_back(config_from_entries(entries));
  }
  if (names.count(grid.baseline) == 0) {
    throw ConfigError("grid.baseline '" + grid.baseline +
                      "' is not one of the grid cells");
  }
  return cells;
}

// --- result files -----------------------------------------------------------

void save_result(const std::string& path, const ExperimentResult& result,
                 const ConfigEntries& config_echo) {
  ordered_json j;
  j["name"] = result.name;
  j["config"] = echo_object(config_echo);
  j["parameter_count"] = result.parameter_count;
  j["train_accuracy"] = result.train_accuracy;
  j["val_accuracy"] = result.val_accuracy;
  ordered_json types = ordered_json::object();
  for (const auto& [type, acc] : result.per_type) types[type] = acc;
  j["per_type"] = types;
  j["wall_seconds"] = result.wall_seconds;
  j["seed"] = result.seed;
  j["status"] = result.status;
  write_text(path, j.dump(2) + "\n");
}

ExperimentResult load_result(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": malformed JSON: " + e.what());
  }
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key))
      throw ParseError(path + " missing field '" + key + "'");
    return j.at(key);
  };
  ExperimentResult r;
  try {
    r.name = need("name").get<std::string>();
    r.parameter_count = need("parameter_count").get<std::size_t>();
    r.train_accuracy = need("train_accuracy").get<double>();
    r.val_accuracy = need("val_accuracy").get<double>();
    for (const auto& [type, acc] : need("per_type").items())
      r.per_type[type] = acc.get<double>();
    r.wall_seconds = need("wall_seconds").get<double>();
    r.seed = need("seed").get<std::uint64_t>();
    r.status = need("status").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(path + ": mistyped field: " + e.what());
  }
  return r;
}

std::vector<ExperimentResult> load_results_dir(const std::string& dir) {
  std::vector<ExperimentResult> results;
  if (!fs::is_directory(dir)) return results;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    const fs::path file = entry.path() / "result.json";
    if (fs::exists(file)) results.push_back(load_result(file.string()));
  }
  std::sort(results.begin(), results.end(),
            [](const ExperimentResult& a, const ExperimentResult& b) {
              return a.name < b.name;
            });
  return results;
}

// --- running ----------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& cfg, bool quiet) {
  validate_experiment_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<QuestionRecord> train_q, val_q;
  std::vector<AnnotationRecord> train_a, val_a;
  std::map<std::uint64_t, RegionFeatures> features;
  std::size_t data_k = 0, data_dv = 0;
  if (cfg.dataset.kind == DatasetSource::Kind::synthetic) {
    SyntheticDataset data =
        generate_synthetic(cfg.dataset.synthetic, derive_seed(cfg.seed, "data"));
    train_q = std::move(data.train.questions);
    train_a = std::move(data.train.annotations);
    val_q = std::move(data.val.questions);
    val_a = std::move(data.val.annotations);
    features = std::move(data.features);
    data_k = data.k;
    data_dv = data.dv;
  } else {
    train_q = parse_questions(cfg.dataset.train_questions);
    train_a = parse_annotations(cfg.dataset.train_annotations);
    val_q = parse_questions(cfg.dataset.val_questions);
    val_a = parse_annotations(cfg.dataset.val_annotations);
    features = load_region_features(cfg.dataset.features);
    if (features.empty())
      throw ValidationError(cfg.dataset.features + " holds no images");
    data_k = features.begin()->second.V.dim(0);
    data_dv = features.begin()->second.V.dim(1);
  }

  ModelConfig mc = cfg.model;
  mc.visual.dv = data_dv;
  if (mc.visual.kind == VisualMode::Kind::pooled_vector) {
    // collapse each region matrix to its mean vector up front
    mc.visual.k = 1;
    for (auto& [id, rf] : features) {
      const Tensor& V = rf.V;
      Tensor pooled = Tensor::zeros({data_dv});
      for (std::size_t j = 0; j < data_dv; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < V.dim(0); ++i) sum += V(i, j);
        pooled.mutable_values()[j] = sum / static_cast<double>(V.dim(0));
      }
      rf.V = pooled;
    }
  } else {
    mc.visual.k = data_k;
  }

  std::vector<std::string> texts;
  texts.reserve(train_q.size());
  for (const auto& q : train_q) texts.push_back(q.question);
  const Vocabulary words = Vocabulary::build(texts);
  const AnswerVocab answers =
      build_answer_vocab(train_a, cfg.dataset.answer_vocab);
  mc.answers = answers.size();
  validate_model_config(mc);

  Rng init_rng(derive_seed(cfg.seed, "init"));
  std::optional<VqaModel> model;
  if (!cfg.pretrained_vectors.empty()) {
    PretrainedLoad load =
        load_pretrained_vectors(cfg.pretrained_vectors, words,
                                !mc.frozen_embeddings,
                                derive_seed(cfg.seed, "vectors"));
    // fine-tuned ingested vectors move at a reduced rate
    if (load.table.trainable)
      mc.embedding_lr_scale = 1.0 / cfg.schedule.lr_divisor;
    model.emplace(mc, std::move(load.table), init_rng);
  } else {
    model.emplace(mc, words.size(), init_rng);
  }

  PreparedSplit train = prepare_split(train_q, train_a, features, words, answers);
  PreparedSplit val = prepare_split(val_q, val_a, features, words, answers);

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const TrainLog log =
      train_model(*model, train, val, answers, tc, cfg.schedule, quiet);
  const Evaluation eval = evaluate(*model, val, answers);

  ExperimentResult result;
  result.name = cfg.name;
  result.parameter_count = model->parameter_count();
  result.train_accuracy = log.epochs.back().train_accuracy;
  result.val_accuracy = eval.result.overall;
  result.per_type = eval.result.per_type;
  result.seed = cfg.seed;
  result.status = "ok";
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  const fs::path dir = fs::path(cfg.out_dir) / cfg.name;
  fs::create_directories(dir);
  save_train_log((dir / "train_log.csv").string(), log);
  save_predictions((dir / "predictions.json").string(), eval.predictions);
  save_result((dir / "result.json").string(), result, config_entries(cfg));
  return result;
}

GridOutcome run_grid(const GridConfig& grid, std::size_t jobs, bool quiet) {
  const std::vector<ExperimentConfig> cells = expand_grid(grid);
  GridOutcome outcome;
  outcome.total = cells.size();
  if (cells.empty()) return outcome;

  std::vector<std::optional<ExperimentResult>> slots(cells.size());
  std::mutex failures_mutex;
  std::atomic<std::size_t> reused{0};
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) break;
      const ExperimentConfig& cell = cells[i];
      const fs::path marker = fs::path(cell.out_dir) / cell.name / "result.json";
      try {
        if (fs::exists(marker)) {
          try {
            ExperimentResult previous = load_result(marker.string());
            if (previous.status == "ok") {
              slots[i] = std::move(previous);
              reused.fetch_add(1);
              continue;
            }
          } catch (const Error&) {
            // stale or truncated marker: rerun the cell
          }
        }
        slots[i] = run_experiment(cell, quiet);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failures_mutex);
        outcome.failures.emplace_back(cell.name, e.what());
      }
    }
  };

  const std::size_t n_threads =
      std::max<std::size_t>(1, std::min(jobs, cells.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& slot : slots)
    if (slot) outcome.results.push_back(std::move(*slot));
  outcome.reused = reused.load();
  std::sort(outcome.failures.begin(), outcome.failures.end());

  const std::string out_dir = cells.front().out_dir;
  fs::create_directories(out_dir);
  ordered_json marker;
  marker["baseline"] = grid.baseline;
  marker["total"] = outcome.total;
  ordered_json names = ordered_json::array();
  for (const auto& cell : cells) names.push_back(cell.name);
  marker["cells"] = names;
  write_text((fs::path(out_dir) / "grid.json").string(), marker.dump(2) + "\n");
  write_report(out_dir, emit_report(outcome.results, grid.baseline));
  return outcome;
}

// --- reports ----------------------------------------------------------------

ReportTables emit_report(const std::vector<ExperimentResult>& results,
                         const std::string& baseline) {
  if (results.empty()) {
    return {"No results.\n", "name,params,train,val,delta\n"};
  }
  std::vector<ExperimentResult> rows = results;
  std::sort(rows.begin(), rows.end(),
            [](const ExperimentResult& a, const ExperimentResult& b) {
              if (a.val_accuracy != b.val_accuracy)
                return a.val_accuracy > b.val_accuracy;
              return a.name < b.name;
            });

  const ExperimentResult* base = nullptr;
  for (const auto& r : rows)
    if (!baseline.empty() && r.name == baseline) base = &r;

  std::set<std::string> type_cols;
  for (const auto& r : rows)
    for (const auto& [type, acc] : r.per_type) type_cols.insert(type);

  std::string csv = "name,params,train,val,delta";
  std::string md = "| name | params | train | val | delta |";
  std::string rule = "| --- | ---: | ---: | ---: | ---: |";
  for (const auto& type : type_cols) {
    csv += "," + type;
    md += " " + type + " |";
    rule += " ---: |";
  }
  csv += "\n";
  md += "\n" + rule + "\n";

  for (const auto& r : rows) {
    std::string delta_csv = "-", delta_md = "-";
    if (base) {
      const double d = r.val_accuracy - base->val_accuracy;
      delta_csv = fmt_acc(d);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%+.4f", d);
      delta_md = buf;
    }
    csv += r.name + "," + std::to_string(r.parameter_count) + "," +
           fmt_acc(r.train_accuracy) + "," + fmt_acc(r.val_accuracy) + "," +
           delta_csv;
    md += "| " + r.name + " | " + std::to_string(r.parameter_count) + " | " +
          fmt_acc(r.train_accuracy) + " | " + fmt_acc(r.val_accuracy) + " | " +
          delta_md + " |";
    for (const auto& type : type_cols) {
      auto it = r.per_type.find(type);
      const std::string cell = it == r.per_type.end() ? "-" : fmt_acc(it->second);
      csv += "," + cell;
      md += " " + cell + " |";
    }
    csv += "\n";
    md += "\n";
  }
  if (!baseline.empty() && !base)
    md += "\nbaseline '" + baseline + "' has no completed result\n";
  return {md, csv};
}

ReportTables report_from_dir(const std::string& results_dir,
                             const std::string& baseline) {
  const std::vector<ExperimentResult> results = load_results_dir(results_dir);
  if (results.empty())
    return {"No results found under " + results_dir + ".\n",
            "name,params,train,val,delta\n"};
  std::string resolved = baseline;
  const fs::path marker = fs::path(results_dir) / "grid.json";
  if (resolved.empty() && fs::exists(marker)) {
    try {
      const json j = json::parse(read_text(marker.string()));
      if (j.contains("baseline")) resolved = j.at("baseline").get<std::string>();
    } catch (const std::exception&) {
      // unreadable marker: report without a baseline
    }
  }
  return emit_report(results, resolved);
}

void write_report(const std::string& dir, const ReportTables& tables) {
  fs::create_directories(dir);
  write_text((fs::path(dir) / "report.md").string(), tables.markdown);
  write_text((fs::path(dir) / "report.csv").string(), tables.csv);
}

// --- standalone scoring -----------------------------------------------------

EvalResult score_predictions(const std::string& predictions_path,
                             const std::string& annotations_path) {
  std::vector<Prediction> predictions = parse_predictions(predictions_path);
  const std::vector<AnnotationRecord> annotations =
      parse_annotations(annotations_path);
  if (predictions.empty())
    throw AlignmentError(predictions_path + " holds no predictions");

  std::map<std::uint64_t, const AnnotationRecord*> by_id;
  for (const auto& ann : annotations) {
    if (!by_id.emplace(ann.question_id, &ann).second) {
      throw AlignmentError("annotation file repeats question id " +
                           std::to_string(ann.question_id));
    }
  }

  std::vector<std::uint64_t> unknown;
  std::set<std::uint64_t> predicted;
  for (const auto& p : predictions) {
    predicted.insert(p.question_id);
    if (by_id.count(p.question_id) == 0) unknown.push_back(p.question_id);
  }
  if (!unknown.empty()) {
    throw AlignmentError("predictions for unknown question ids: " +
                         list_ids(unknown));
  }
  std::vector<std::uint64_t> missing;
  for (const auto& [id, ann] : by_id)
    if (predicted.count(id) == 0) missing.push_back(id);
  if (!missing.empty()) {
    throw AlignmentError("no prediction for question ids: " +
                         list_ids(missing));
  }

  std::sort(predictions.begin(), predictions.end(),
            [](const Prediction& a, const Prediction& b) {
              return a.question_id < b.question_id;
            });
  std::vector<QuestionScore> scores;
  scores.reserve(predictions.size());
  std::map<std::uint64_t, std::string> types;
  for (const auto& p : predictions) {
    const AnnotationRecord& ann = *by_id.at(p.question_id);
    std::vector<std::string> humans;
    humans.reserve(ann.humans.size());
    for (const auto& h : ann.humans) humans.push_back(normalize_answer(h));
    scores.push_back(
        {p.question_id, vqa_accuracy(normalize_answer(p.answer), humans)});
    types[p.question_id] = ann.answer_type;
  }
  return aggregate(scores, types);
}

}  // namespace vqa
