#include "vqa/data_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "byte_io.hpp"
#include "vqa/rng.hpp"

namespace vqa {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": malformed JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << body;
  if (!out) throw FormatError("short write to " + path);
}

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) {
    throw ParseError(where + " missing field '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + " field '" + key + "' has the wrong type");
  }
}

}  // namespace

// --- VQA v2 JSON -----------------------------------------------------------

std::vector<QuestionRecord> parse_questions(const std::string& path) {
  json doc = load_json(path);
  if (!doc.is_object() || !doc.contains("questions") ||
      !doc["questions"].is_array()) {
    throw FormatError(path + ": expected a top-level \"questions\" array");
  }
  std::vector<QuestionRecord> records;
  const auto& arr = doc["questions"];
  records.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "questions[" + std::to_string(i) + "]";
    if (!arr[i].is_object()) throw ParseError(where + " is not an object");
    QuestionRecord r;
    r.question_id = field<std::uint64_t>(arr[i], "question_id", where);
    r.image_id = field<std::uint64_t>(arr[i], "image_id", where);
    r.question = field<std::string>(arr[i], "question", where);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<AnnotationRecord> parse_annotations(const std::string& path) {
  json doc = load_json(path);
  if (!doc.is_object() || !doc.contains("annotations") ||
      !doc["annotations"].is_array()) {
    throw FormatError(path + ": expected a top-level \"annotations\" array");
  }
  std::vector<AnnotationRecord> records;
  const auto& arr = doc["annotations"];
  records.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    if (!arr[i].is_object()) throw ParseError(where + " is not an object");
    AnnotationRecord r;
    r.question_id = field<std::uint64_t>(arr[i], "question_id", where);
    r.answer_type = field<std::string>(arr[i], "answer_type", where);
    r.designated_answer =
        field<std::string>(arr[i], "multiple_choice_answer", where);
    if (!arr[i].contains("answers") || !arr[i]["answers"].is_array()) {
      throw ParseError(where + " missing field 'answers'");
    }
    for (std::size_t j = 0; j < arr[i]["answers"].size(); ++j) {
      const std::string aw = where + ".answers[" + std::to_string(j) + "]";
      r.humans.push_back(field<std::string>(arr[i]["answers"][j], "answer", aw));
    }
    if (r.humans.size() != 10) {
      throw ValidationError("question " + std::to_string(r.question_id) +
                            " carries " + std::to_string(r.humans.size()) +
                            " answers; exactly 10 required");
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_questions(const std::string& path,
                    const std::vector<QuestionRecord>& records) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : records) {
    arr.push_back({{"question_id", r.question_id},
                   {"image_id", r.image_id},
                   {"question", r.question}});
  }
  write_text(path, ordered_json{{"questions", arr}}.dump(2) + "\n");
}

void save_annotations(const std::string& path,
                      const std::vector<AnnotationRecord>& records) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : records) {
    ordered_json answers = ordered_json::array();
    for (const auto& h : r.humans) answers.push_back({{"answer", h}});
    arr.push_back({{"question_id", r.question_id},
                   {"answer_type", r.answer_type},
                   {"multiple_choice_answer", r.designated_answer},
                   {"answers", answers}});
  }
  write_text(path, ordered_json{{"annotations", arr}}.dump(2) + "\n");
}

// --- answer normalization ---------------------------------------------------

std::string normalize_answer(const std::string& text) {
  static const std::map<std::string, std::string> number_words = {
      {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"},
      {"four", "4"}, {"five", "5"}, {"six", "6"},  {"seven", "7"},
      {"eight", "8"}, {"nine", "9"}, {"ten", "10"}};
  static const std::string trailing_punct = ",!?;:'\"";

  std::string lowered;
  lowered.reserve(text.size());
  for (unsigned char c : text)
    lowered.push_back(static_cast<char>(std::tolower(c)));

  std::istringstream stream(lowered);
  std::string token, result;
  while (stream >> token) {
    token.erase(std::remove(token.begin(), token.end(), '.'), token.end());
    while (!token.empty() &&
           trailing_punct.find(token.back()) != std::string::npos) {
      token.pop_back();
    }
    if (token.empty() || token == "a" || token == "an" || token == "the")
      continue;
    if (auto it = number_words.find(token); it != number_words.end())
      token = it->second;
    if (!result.empty()) result.push_back(' ');
    result += token;
  }
  return result;
}

// --- answer vocabulary ------------------------------------------------------

AnswerVocab build_answer_vocab(const std::vector<AnnotationRecord>& annotations,
                               std::size_t size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& ann : annotations)
    for (const auto& h : ann.humans) ++counts[normalize_answer(h)];
  counts.erase("");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  AnswerVocab vocab;
  vocab.size_exceeds_distinct = size > ranked.size();
  const std::size_t keep = std::min(size, ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    vocab.index[ranked[i].first] = i;
    vocab.answers.push_back(ranked[i].first);
  }
  return vocab;
}

// --- VQRF binary region features -------------------------------------------

namespace {

constexpr char kVqrfMagic[4] = {'V', 'Q', 'R', 'F'};

using detail::ByteReader;
using detail::ByteWriter;

}  // namespace

std::map<std::uint64_t, RegionFeatures> load_region_features(
    const std::string& path) {
  ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kVqrfMagic)) {
    throw FormatError(path + ": bad magic at byte 0, expected \"VQRF\"");
  }
  const std::uint32_t version = r.u32("version");
  if (version != 1) {
    throw FormatError(path + ": unsupported version " +
                      std::to_string(version));
  }
  const std::uint32_t k = r.u32("k");
  const std::uint32_t dv = r.u32("dv");
  const std::uint32_t count = r.u32("record count");
  if (k == 0 || dv == 0) {
    throw FormatError(path + ": zero region count or feature width in header");
  }
  std::map<std::uint64_t, RegionFeatures> out;
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    RegionFeatures rf;
    rf.image_id = r.u64("image id");
    rf.V = Tensor::zeros({k, dv});
    auto vals = rf.V.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i)
      vals[i] = static_cast<double>(r.f32("feature value"));
    out.emplace(rf.image_id, std::move(rf));
  }
  return out;
}

void save_region_features(const std::string& path, std::uint32_t k,
                          std::uint32_t dv,
                          const std::vector<RegionFeatures>& images) {
  for (const auto& rf : images) {
    if (rf.V.shape() != Shape{k, dv}) {
      throw DimensionError("image " + std::to_string(rf.image_id) +
                           " features " + shape_str(rf.V.shape()) +
                           " do not match header " +
                           shape_str({k, dv}));
    }
  }
  ByteWriter w(path);
  w.bytes(kVqrfMagic, 4);
  w.u32(1);
  w.u32(k);
  w.u32(dv);
  w.u32(static_cast<std::uint32_t>(images.size()));
  for (const auto& rf : images) {
    w.u64(rf.image_id);
    for (double v : rf.V.values()) w.f32(static_cast<float>(v));
  }
}

// --- prediction files -------------------------------------------------------

std::vector<Prediction> parse_predictions(const std::string& path) {
  json doc = load_json(path);
  if (!doc.is_array()) {
    throw FormatError(path + ": expected a top-level JSON array");
  }
  std::vector<Prediction> out;
  std::map<std::uint64_t, bool> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string where = "predictions[" + std::to_string(i) + "]";
    Prediction p;
    p.question_id = field<std::uint64_t>(doc[i], "question_id", where);
    p.answer = field<std::string>(doc[i], "answer", where);
    if (seen[p.question_id]) {
      throw ValidationError("duplicate prediction for question id " +
                            std::to_string(p.question_id));
    }
    seen[p.question_id] = true;
    out.push_back(std::move(p));
  }
  return out;
}

void save_predictions(const std::string& path,
                      const std::vector<Prediction>& predictions) {
  ordered_json arr = ordered_json::array();
  for (const auto& p : predictions)
    arr.push_back({{"question_id", p.question_id}, {"answer", p.answer}});
  write_text(path, arr.dump(2) + "\n");
}

// --- synthetic compositional task ------------------------------------------

const std::vector<std::string>& default_attribute_tokens() {
  // shared by colors and shapes on purpose: with one token set, reading the
  // right attribute requires a question-kind x feature-block interaction,
  // which separates multiplicative fusion from additive fusion on this task
  static const std::vector<std::string> tokens = {
      "alpha", "bravo", "delta", "echo", "gamma", "kilo", "omega", "sigma"};
  return tokens;
}

namespace {

struct BlockLayout {
  std::size_t index_off, index_w;  // per-region-index slot width
  std::size_t color_off, color_w;
  std::size_t shape_off, shape_w;
};

// Identity slots and attribute slots share the same unit scale: similarity
// against word states stays sensitive to region identity while the attribute
// payload keeps enough mass after row normalization for downstream readouts.
constexpr double kIndexGain = 1.0;

BlockLayout plan_blocks(const SyntheticTaskConfig& cfg) {
  const std::size_t index_block = cfg.dv / 4;
  const std::size_t color_block = (cfg.dv - index_block) / 2;
  const std::size_t shape_block = cfg.dv - index_block - color_block;
  BlockLayout b{};
  b.index_off = 0;
  b.index_w = index_block / cfg.k;
  b.color_off = index_block;
  b.color_w = color_block / cfg.colors.size();
  b.shape_off = index_block + color_block;
  b.shape_w = shape_block / cfg.shapes.size();
  if (b.index_w == 0 || b.color_w == 0 || b.shape_w == 0) {
    throw ConfigError("synthetic dv=" + std::to_string(cfg.dv) +
                      " too small for k=" + std::to_string(cfg.k) + " and " +
                      std::to_string(cfg.colors.size()) + "x" +
                      std::to_string(cfg.shapes.size()) +
                      " attribute vocabularies");
  }
  return b;
}

void generate_split(const SyntheticTaskConfig& cfg, const BlockLayout& blocks,
                    std::uint64_t split_seed, std::size_t count,
                    std::uint64_t first_id, SyntheticSplit& split,
                    std::map<std::uint64_t, RegionFeatures>& features) {
  Rng rng(split_seed);
  for (std::size_t n = 0; n < count; ++n) {
    const std::uint64_t id = first_id + n;

    std::vector<std::size_t> region_color(cfg.k), region_shape(cfg.k);
    for (std::size_t i = 0; i < cfg.k; ++i)
      region_color[i] = rng.index(cfg.colors.size());
    for (std::size_t i = 0; i < cfg.k; ++i)
      region_shape[i] = rng.index(cfg.shapes.size());

    RegionFeatures rf;
    rf.image_id = id;
    rf.V = Tensor::zeros({cfg.k, cfg.dv});
    auto vals = rf.V.mutable_values();
    for (std::size_t i = 0; i < cfg.k; ++i) {
      double* row = &vals[i * cfg.dv];
      for (std::size_t w = 0; w < blocks.index_w; ++w)
        row[blocks.index_off + i * blocks.index_w + w] = kIndexGain;
      for (std::size_t w = 0; w < blocks.color_w; ++w)
        row[blocks.color_off + region_color[i] * blocks.color_w + w] = 1.0;
      for (std::size_t w = 0; w < blocks.shape_w; ++w)
        row[blocks.shape_off + region_shape[i] * blocks.shape_w + w] = 1.0;
      for (std::size_t j = 0; j < cfg.dv; ++j) {
        row[j] += rng.normal(0.0, cfg.sigma);
        // keep the in-memory dataset identical to its VQRF round-trip
        row[j] = static_cast<double>(static_cast<float>(row[j]));
      }
    }
    features.emplace(id, std::move(rf));

    const std::size_t target = rng.index(cfg.k);
    const bool ask_color = rng.index(2) == 0;
    const std::string& answer = ask_color ? cfg.colors[region_color[target]]
                                          : cfg.shapes[region_shape[target]];

    QuestionRecord q;
    q.question_id = id;
    q.image_id = id;
    q.question = std::string("what ") + (ask_color ? "color" : "shape") +
                 " is object " + std::to_string(target);
    split.questions.push_back(std::move(q));

    AnnotationRecord ann;
    ann.question_id = id;
    ann.answer_type = "other";
    ann.designated_answer = answer;
    ann.humans.assign(10, answer);
    split.annotations.push_back(std::move(ann));
  }
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticTaskConfig& config,
                                    std::uint64_t seed) {
  SyntheticTaskConfig cfg = config;
  if (cfg.colors.empty()) cfg.colors = default_attribute_tokens();
  if (cfg.shapes.empty()) cfg.shapes = default_attribute_tokens();
  if (cfg.k < 2) {
    throw ConfigError("synthetic task needs k >= 2 regions, got " +
                      std::to_string(cfg.k));
  }
  if (cfg.colors.size() < 2 || cfg.shapes.size() < 2) {
    throw ConfigError("synthetic attribute vocabularies need >= 2 tokens");
  }
  if (cfg.sigma < 0.0) {
    throw ConfigError("synthetic noise sigma must be non-negative");
  }
  if (cfg.train_count == 0 || cfg.val_count == 0) {
    throw ConfigError("synthetic split sizes must be positive");
  }
  const BlockLayout blocks = plan_blocks(cfg);

  SyntheticDataset ds;
  ds.k = static_cast<std::uint32_t>(cfg.k);
  ds.dv = static_cast<std::uint32_t>(cfg.dv);
  generate_split(cfg, blocks, derive_seed(seed, "synth-train"),
                 cfg.train_count, 0, ds.train, ds.features);
  generate_split(cfg, blocks, derive_seed(seed, "synth-val"), cfg.val_count,
                 cfg.train_count, ds.val, ds.features);
  return ds;
}

}  // namespace vqa
