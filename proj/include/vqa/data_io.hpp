#pragma once

// VQA v2 JSON ingestion, answer normalization and vocabulary construction,
// the VQRF binary region-feature format, prediction files, and the synthetic
// compositional task generator used for desk-scale experiments.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vqa/error.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

struct QuestionRecord {
  std::uint64_t question_id = 0;
  std::uint64_t image_id = 0;
  std::string question;
};

struct AnnotationRecord {
  std::uint64_t question_id = 0;
  std::string answer_type;         // "yes/no" | "number" | "other", verbatim
  std::string designated_answer;   // the JSON "multiple_choice_answer"
  std::vector<std::string> humans; // exactly 10, verbatim
};

// Per-image matrix V of k region vectors, each dv wide.
struct RegionFeatures {
  std::uint64_t image_id = 0;
  Tensor V;
};

// --- VQA v2 JSON -----------------------------------------------------------

// Top-level {"questions": [{"question_id", "image_id", "question"}, ...]}.
// Malformed JSON raises FormatError; a missing or mistyped field raises
// ParseError naming the record index.
std::vector<QuestionRecord> parse_questions(const std::string& path);

// Top-level {"annotations": [{"question_id", "answer_type",
// "multiple_choice_answer", "answers": [{"answer"} x 10]}, ...]}. A record
// without exactly 10 answers raises ValidationError naming the question id.
std::vector<AnnotationRecord> parse_annotations(const std::string& path);

void save_questions(const std::string& path,
                    const std::vector<QuestionRecord>& records);
void save_annotations(const std::string& path,
                      const std::vector<AnnotationRecord>& records);

// --- answer normalization ---------------------------------------------------

// Canonicalizes an answer string: lowercase, strip surrounding whitespace,
// drop articles (a/an/the), map number words zero..ten to digits, remove
// periods and trailing punctuation, collapse internal whitespace.
// Idempotent.
std::string normalize_answer(const std::string& text);

// --- answer vocabulary ------------------------------------------------------

struct AnswerVocab {
  std::vector<std::string> answers;          // index -> normalized answer
  std::map<std::string, std::size_t> index;  // normalized answer -> index
  // set when the requested size exceeded the distinct answers available
  bool size_exceeds_distinct = false;

  std::size_t size() const { return answers.size(); }
};

// Counts every normalized human answer (10 per question) and keeps the
// `size` most frequent, ties broken lexicographically ascending.
AnswerVocab build_answer_vocab(const std::vector<AnnotationRecord>& annotations,
                               std::size_t size = 3000);

// --- VQRF binary region features -------------------------------------------

// Layout (all integers little-endian): magic "VQRF", u32 version=1, u32 k,
// u32 dv, u32 record count, then per record: u64 image id followed by k*dv
// little-endian f32 values. Values are widened to f64 in memory.
std::map<std::uint64_t, RegionFeatures> load_region_features(
    const std::string& path);
void save_region_features(const std::string& path, std::uint32_t k,
                          std::uint32_t dv,
                          const std::vector<RegionFeatures>& images);

// --- prediction files -------------------------------------------------------

struct Prediction {
  std::uint64_t question_id = 0;
  std::string answer;
};

// JSON array of {"question_id": u64, "answer": string}. Duplicate question
// ids raise ValidationError.
std::vector<Prediction> parse_predictions(const std::string& path);
void save_predictions(const std::string& path,
                      const std::vector<Prediction>& predictions);

// --- synthetic compositional task ------------------------------------------

// Desk-scale surrogate: every image holds k regions, each carrying a
// (color, shape) attribute pair; questions ask "what color is object <i>"
// or "what shape is object <i>" about one region. By default colors and
// shapes draw from one shared token set, so answering requires combining
// the asked-about kind with the region's features multiplicatively rather
// than reading either attribute histogram alone.
struct SyntheticTaskConfig {
  std::size_t k = 6;                // regions per image
  std::vector<std::string> colors;  // empty -> default_attribute_tokens()
  std::vector<std::string> shapes;  // empty -> default_attribute_tokens()
  double sigma = 0.1;               // feature noise stddev
  std::size_t dv = 64;              // feature width
  std::size_t train_count = 4000;
  std::size_t val_count = 1000;
  std::uint64_t seed = 0;
};

struct SyntheticSplit {
  std::vector<QuestionRecord> questions;
  std::vector<AnnotationRecord> annotations;
};

struct SyntheticDataset {
  SyntheticSplit train, val;
  std::map<std::uint64_t, RegionFeatures> features;  // both splits
  std::uint32_t k = 0;
  std::uint32_t dv = 0;
};

const std::vector<std::string>& default_attribute_tokens();

// Deterministic under (config, seed). Region i's feature vector lays out
// one-hot blocks for [region index | color | shape] scaled to dv, plus
// N(0, sigma^2) noise; the index block is what lets attention find the
// region a question names. Values are rounded to f32 precision so the
// in-memory dataset matches a VQRF export bit-for-bit.
SyntheticDataset generate_synthetic(const SyntheticTaskConfig& config,
                                    std::uint64_t seed);

}  // namespace vqa
