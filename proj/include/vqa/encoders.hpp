#pragma once

// Question-side encoders (embedding table, GRU/LSTM and their bidirectional
// variants, the linear+GAP baseline, pretrained-vector and precomputed-
// feature ingestion) plus the visual-side feature-mode adapter.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vqa/error.hpp"
#include "vqa/param.hpp"
#include "vqa/rng.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

// --- vocabulary and tokenization -------------------------------------------

inline constexpr std::size_t kPadIndex = 0;
inline constexpr std::size_t kUnkIndex = 1;
inline constexpr std::size_t kMaxQuestionLen = 14;

class Vocabulary {
 public:
  // Collects every token appearing in the given texts, sorted
  // lexicographically after the PAD/UNK reserved slots, so construction is
  // independent of text order.
  static Vocabulary build(const std::vector<std::string>& texts);

  std::size_t size() const { return tokens_.size(); }
  // UNK for unknown tokens.
  std::size_t lookup(const std::string& token) const;
  const std::string& token(std::size_t index) const;
  bool contains(const std::string& token) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

struct TokenSeq {
  std::vector<std::size_t> ids;  // length max_len, PAD-padded
  std::size_t n = 0;             // leading non-PAD count, always >= 1
};

// Lowercase, strip punctuation, whitespace-split, map through the
// vocabulary with UNK fallback, then pad/truncate to max_len. Text that
// cleans to nothing yields a single UNK token.
TokenSeq tokenize(const std::string& text, const Vocabulary& vocab,
                  std::size_t max_len = kMaxQuestionLen);

// Bare token split with the same cleaning, for vocabulary construction.
std::vector<std::string> tokenize_words(const std::string& text);

// --- embedding table --------------------------------------------------------

struct EmbeddingTable {
  Tensor table;  // |V| x E; row 0 (PAD) pinned at zeros
  bool trainable = true;

  std::size_t vocab_size() const { return table.dim(0); }
  std::size_t dim() const { return table.dim(1); }
};

// Randomly initialized table, uniform +-1/sqrt(E), PAD row zeroed.
EmbeddingTable make_embedding_table(std::size_t vocab_size, std::size_t dim,
                                    Rng& rng);

// Row lookup: n x E matrix. Gradients reach the table iff it is trainable.
Tensor embed(Tape& tape, const EmbeddingTable& table,
             const std::vector<std::size_t>& ids);

// --- pretrained word vectors ------------------------------------------------

struct PretrainedLoad {
  EmbeddingTable table;
  std::size_t miss_count = 0;  // vocab tokens absent from the file
};

// Text format: one line per token, `token v1 v2 ... vE`. E is taken from
// the first line; later lines with a different count raise FormatError, and
// unparseable numbers raise ParseError with the line number. Vocab tokens
// missing from the file are drawn from N(0, 0.1^2) and counted; the UNK row
// is always drawn that way and never counted as a miss.
PretrainedLoad load_pretrained_vectors(const std::string& path,
                                       const Vocabulary& vocab, bool trainable,
                                       std::uint64_t seed);

void save_word_vectors(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<double>>>& entries);

// --- precomputed token features (VQTF) --------------------------------------

// Binary: magic "VQTF", u32 count, then per record u64 question id, u32 n,
// u32 E, n*E little-endian f32 values (widened to f64 in memory).
std::map<std::uint64_t, Tensor> load_token_features(const std::string& path);
void save_token_features(const std::string& path,
                         const std::map<std::uint64_t, Tensor>& features);

// Throws LookupError for unknown question ids.
const Tensor& lookup_token_features(
    const std::map<std::uint64_t, Tensor>& features, std::uint64_t question_id);

// --- question encoders ------------------------------------------------------

enum class EncoderKind { lstm, bilstm, gru, bigru, linear_gap };

EncoderKind encoder_kind_from_string(const std::string& name);
std::string to_string(EncoderKind kind);

struct QuestionEncoderConfig {
  EncoderKind kind = EncoderKind::gru;
  std::size_t hidden = 2048;  // H
  std::size_t layers = 1;     // 1 or 2
  std::size_t embed_dim = 300;  // E; must match ingested features when used
};

bool is_bidirectional(EncoderKind kind);

// ConfigError on any unusable field combination; safe to call before any
// allocation (pre-flight checks use it).
void validate_encoder_config(const QuestionEncoderConfig& config);

// q / word-state width the config will produce: H, or 2H if bidirectional.
std::size_t encoder_output_dim(const QuestionEncoderConfig& config);

struct QuestionEncoding {
  Tensor q;  // 1 x D global question vector, D = hidden (2x if bidirectional)
  Tensor Q;  // word-level states, one row per (padded) position
  std::size_t n_valid = 0;
  bool degenerate = false;  // linear_gap saw an effectively empty question
};

// One direction of one recurrent layer. Gate order: GRU [z, r, n] with
// h' = z*h + (1-z)*n_tilde; LSTM [i, f, o, c] with c' = f*c + i*c_tilde and
// h' = o*tanh(c').
struct RnnCellParams {
  std::vector<Tensor> W;  // input projections, in_dim x H
  std::vector<Tensor> U;  // recurrent projections, H x H
  std::vector<Tensor> b;  // biases, 1 x H
};

// Single recurrence steps, exposed for direct gradient checking.
Tensor gru_step(Tape& tape, const RnnCellParams& cell, const Tensor& x,
                const Tensor& h);
// Returns (h', c').
std::pair<Tensor, Tensor> lstm_step(Tape& tape, const RnnCellParams& cell,
                                    const Tensor& x, const Tensor& h,
                                    const Tensor& c);

class QuestionEncoder {
 public:
  // Owns a fresh random embedding table.
  QuestionEncoder(const QuestionEncoderConfig& config, std::size_t vocab_size,
                  Rng& rng);
  // Adopts an externally built (possibly pretrained/frozen) table.
  QuestionEncoder(const QuestionEncoderConfig& config, EmbeddingTable table,
                  Rng& rng);
  // Tableless: only encode_features may be called (ingested-feature mode).
  QuestionEncoder(const QuestionEncoderConfig& config, Rng& rng);

  // Token pipeline: embeds seq.ids[0..n) and encodes. Q is padded with zero
  // rows out to seq.ids.size().
  QuestionEncoding encode(Tape& tape, const TokenSeq& seq) const;

  // Feature pipeline: rows of word_feats are the word-level inputs; all
  // rows count as valid.
  QuestionEncoding encode_features(Tape& tape, const Tensor& word_feats) const;

  // Trainable parameters; a frozen embedding table is not included.
  ParameterList parameters() const;

  const QuestionEncoderConfig& config() const { return config_; }
  bool has_table() const { return table_.has_value(); }
  const EmbeddingTable& table() const;
  std::size_t output_dim() const;
  // cells()[layer][direction]; empty for linear_gap
  const std::vector<std::vector<RnnCellParams>>& cells() const {
    return cells_;
  }

  // Applies lr_scale to every encoder parameter (the 10-fold reduction used
  // when fine-tuning on top of ingested features).
  void set_lr_scale(double scale);

 private:
  void build_params(Rng& rng);
  QuestionEncoding encode_rows(Tape& tape, const Tensor& word_rows,
                               std::size_t n_valid,
                               std::size_t padded_len) const;

  QuestionEncoderConfig config_;
  std::optional<EmbeddingTable> table_;
  // cells_[layer][direction]; direction 1 exists for bidirectional kinds
  std::vector<std::vector<RnnCellParams>> cells_;
  Tensor gap_W_, gap_b_;  // linear_gap projection
  double lr_scale_ = 1.0;
};

// --- visual adapter ---------------------------------------------------------

struct VisualMode {
  enum class Kind { regions, pooled_vector };
  Kind kind = Kind::regions;
  std::size_t k = 36;
  std::size_t dv = 2048;
};

VisualMode::Kind visual_kind_from_string(const std::string& name);
std::string to_string(VisualMode::Kind kind);

// Regions mode passes a k x dv matrix through; pooled mode accepts a dv
// vector (or 1 x dv matrix) and yields 1 x dv, so attention over k=1
// degenerates to identity. Shape mismatches raise DimensionError; a pooled
// mode configured with k != 1 raises ConfigError.
Tensor adapt_visual(const Tensor& features, const VisualMode& mode);

}  // namespace vqa
