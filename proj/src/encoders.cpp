#include "vqa/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "byte_io.hpp"

namespace vqa {

// --- vocabulary and tokenization -------------------------------------------

std::vector<std::string> tokenize_words(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    } else {
      cleaned.push_back(' ');
    }
  }
  std::istringstream stream(cleaned);
  std::vector<std::string> words;
  std::string w;
  while (stream >> w) words.push_back(w);
  return words;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const auto& text : texts)
    for (auto& w : tokenize_words(text)) seen.insert(std::move(w));

  Vocabulary v;
  v.tokens_ = {"<pad>", "<unk>"};
  v.tokens_.insert(v.tokens_.end(), seen.begin(), seen.end());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = i;
  return v;
}

std::size_t Vocabulary::lookup(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkIndex : it->second;
}

const std::string& Vocabulary::token(std::size_t index) const {
  if (index >= tokens_.size()) {
    throw IndexError("vocabulary index " + std::to_string(index) +
                     " out of range for size " + std::to_string(size()));
  }
  return tokens_[index];
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.count(token) != 0;
}

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab,
                  std::size_t max_len) {
  TokenSeq seq;
  auto words = tokenize_words(text);
  if (words.empty()) {
    seq.ids.assign(max_len, kPadIndex);
    seq.ids[0] = kUnkIndex;
    seq.n = 1;
    return seq;
  }
  seq.n = std::min(words.size(), max_len);
  seq.ids.assign(max_len, kPadIndex);
  for (std::size_t i = 0; i < seq.n; ++i) seq.ids[i] = vocab.lookup(words[i]);
  return seq;
}

// --- embedding table --------------------------------------------------------

EmbeddingTable make_embedding_table(std::size_t vocab_size, std::size_t dim,
                                    Rng& rng) {
  if (vocab_size < 2 || dim == 0) {
    throw ConfigError("embedding table needs vocab size >= 2 and dim >= 1");
  }
  EmbeddingTable table;
  table.table = init_uniform(rng, {vocab_size, dim}, dim);
  auto vals = table.table.mutable_values();
  for (std::size_t j = 0; j < dim; ++j) vals[j] = 0.0;  // PAD row
  table.trainable = true;
  return table;
}

Tensor embed(Tape& tape, const EmbeddingTable& table,
             const std::vector<std::size_t>& ids) {
  for (std::size_t id : ids) {
    if (id >= table.vocab_size()) {
      throw IndexError("token id " + std::to_string(id) +
                       " out of range for vocabulary of " +
                       std::to_string(table.vocab_size()));
    }
  }
  return rows(tape, table.table, ids);
}

// --- pretrained word vectors ------------------------------------------------

PretrainedLoad load_pretrained_vectors(const std::string& path,
                                       const Vocabulary& vocab, bool trainable,
                                       std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);

  std::map<std::string, std::vector<double>> rows_by_token;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::vector<double> values;
    std::string num;
    while (fields >> num) {
      char* end = nullptr;
      const double v = std::strtod(num.c_str(), &end);
      if (end == num.c_str() || *end != '\0') {
        throw ParseError(path + " line " + std::to_string(line_no) +
                         ": cannot parse value '" + num + "'");
      }
      values.push_back(v);
    }
    if (token.empty() || values.empty()) {
      throw ParseError(path + " line " + std::to_string(line_no) +
                       ": expected `token v1 ... vE`");
    }
    if (dim == 0) {
      dim = values.size();
    } else if (values.size() != dim) {
      throw FormatError(path + " line " + std::to_string(line_no) + ": " +
                        std::to_string(values.size()) +
                        " values where earlier lines had " +
                        std::to_string(dim));
    }
    rows_by_token[token] = std::move(values);
  }
  if (dim == 0) throw FormatError(path + ": no vector records");

  PretrainedLoad out;
  out.table.table = Tensor::zeros({vocab.size(), dim}, trainable);
  out.table.trainable = trainable;
  auto vals = out.table.table.mutable_values();
  Rng rng(derive_seed(seed, "pretrained-miss"));
  for (std::size_t idx = 1; idx < vocab.size(); ++idx) {  // PAD row stays zero
    auto it = rows_by_token.find(vocab.token(idx));
    if (it != rows_by_token.end()) {
      std::copy(it->second.begin(), it->second.end(), &vals[idx * dim]);
    } else {
      for (std::size_t j = 0; j < dim; ++j)
        vals[idx * dim + j] = rng.normal(0.0, 0.1);
      if (idx != kUnkIndex) ++out.miss_count;  // UNK is never in any file
    }
  }
  return out;
}

void save_word_vectors(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  char buf[64];
  for (const auto& [token, values] : entries) {
    out << token;
    for (double v : values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw FormatError("short write to " + path);
}

// --- precomputed token features (VQTF) --------------------------------------

namespace {
constexpr char kVqtfMagic[4] = {'V', 'Q', 'T', 'F'};
}

std::map<std::uint64_t, Tensor> load_token_features(const std::string& path) {
  detail::ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kVqtfMagic)) {
    throw FormatError(path + ": bad magic at byte 0, expected \"VQTF\"");
  }
  const std::uint32_t count = r.u32("record count");
  std::map<std::uint64_t, Tensor> out;
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    const std::uint64_t qid = r.u64("question id");
    const std::uint32_t n = r.u32("token count");
    const std::uint32_t dim = r.u32("feature dim");
    if (n == 0 || dim == 0) {
      throw FormatError(path + ": empty feature matrix for question " +
                        std::to_string(qid));
    }
    Tensor m = Tensor::zeros({n, dim});
    auto vals = m.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i)
      vals[i] = static_cast<double>(r.f32("feature value"));
    out.emplace(qid, std::move(m));
  }
  return out;
}

void save_token_features(const std::string& path,
                         const std::map<std::uint64_t, Tensor>& features) {
  detail::ByteWriter w(path);
  w.bytes(kVqtfMagic, 4);
  w.u32(static_cast<std::uint32_t>(features.size()));
  for (const auto& [qid, m] : features) {
    if (m.rank() != 2) {
      throw DimensionError("token features for question " +
                           std::to_string(qid) + " must be a matrix, got " +
                           shape_str(m.shape()));
    }
    w.u64(qid);
    w.u32(static_cast<std::uint32_t>(m.dim(0)));
    w.u32(static_cast<std::uint32_t>(m.dim(1)));
    for (double v : m.values()) w.f32(static_cast<float>(v));
  }
}

const Tensor& lookup_token_features(
    const std::map<std::uint64_t, Tensor>& features,
    std::uint64_t question_id) {
  auto it = features.find(question_id);
  if (it == features.end()) {
    throw LookupError("no token features stored for question id " +
                      std::to_string(question_id));
  }
  return it->second;
}

// --- question encoders ------------------------------------------------------

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "lstm") return EncoderKind::lstm;
  if (name == "bilstm") return EncoderKind::bilstm;
  if (name == "gru") return EncoderKind::gru;
  if (name == "bigru") return EncoderKind::bigru;
  if (name == "linear_gap") return EncoderKind::linear_gap;
  throw ConfigError("unknown text encoder kind: " + name);
}

std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::lstm: return "lstm";
    case EncoderKind::bilstm: return "bilstm";
    case EncoderKind::gru: return "gru";
    case EncoderKind::bigru: return "bigru";
    case EncoderKind::linear_gap: return "linear_gap";
  }
  return "?";
}

namespace {

bool is_lstm(EncoderKind kind) {
  return kind == EncoderKind::lstm || kind == EncoderKind::bilstm;
}

}  // namespace

bool is_bidirectional(EncoderKind kind) {
  return kind == EncoderKind::bilstm || kind == EncoderKind::bigru;
}

void validate_encoder_config(const QuestionEncoderConfig& cfg) {
  if (cfg.hidden == 0) throw ConfigError("encoder hidden size must be > 0");
  if (cfg.embed_dim == 0) throw ConfigError("encoder embed dim must be > 0");
  if (cfg.layers != 1 && cfg.layers != 2) {
    throw ConfigError("encoder layer count must be 1 or 2, got " +
                      std::to_string(cfg.layers));
  }
  if (cfg.kind == EncoderKind::linear_gap && cfg.layers != 1) {
    throw ConfigError("linear_gap encoder supports a single layer only");
  }
}

std::size_t encoder_output_dim(const QuestionEncoderConfig& cfg) {
  return cfg.hidden * (is_bidirectional(cfg.kind) ? 2 : 1);
}

Tensor gru_step(Tape& tape, const RnnCellParams& cell, const Tensor& x,
                const Tensor& h) {
  if (cell.W.size() != 3) {
    throw ContractError("gru_step expects 3 gates [z, r, n], got " +
                        std::to_string(cell.W.size()));
  }
  auto gate = [&](std::size_t g, const Tensor& rec) {
    return add(tape,
               add(tape, matmul(tape, x, cell.W[g]),
                   matmul(tape, rec, cell.U[g])),
               cell.b[g]);
  };
  Tensor z = activation(tape, gate(0, h), Activation::sigmoid);
  Tensor r = activation(tape, gate(1, h), Activation::sigmoid);
  Tensor n = activation(tape, gate(2, mul(tape, r, h)), Activation::tanh);
  Tensor one = Tensor::full(z.shape(), 1.0);
  return add(tape, mul(tape, z, h), mul(tape, sub(tape, one, z), n));
}

std::pair<Tensor, Tensor> lstm_step(Tape& tape, const RnnCellParams& cell,
                                    const Tensor& x, const Tensor& h,
                                    const Tensor& c) {
  if (cell.W.size() != 4) {
    throw ContractError("lstm_step expects 4 gates [i, f, o, c], got " +
                        std::to_string(cell.W.size()));
  }
  auto gate = [&](std::size_t g) {
    return add(tape,
               add(tape, matmul(tape, x, cell.W[g]),
                   matmul(tape, h, cell.U[g])),
               cell.b[g]);
  };
  Tensor i = activation(tape, gate(0), Activation::sigmoid);
  Tensor f = activation(tape, gate(1), Activation::sigmoid);
  Tensor o = activation(tape, gate(2), Activation::sigmoid);
  Tensor c_tilde = activation(tape, gate(3), Activation::tanh);
  Tensor c_next = add(tape, mul(tape, f, c), mul(tape, i, c_tilde));
  Tensor h_next = mul(tape, o, activation(tape, c_next, Activation::tanh));
  return {h_next, c_next};
}

QuestionEncoder::QuestionEncoder(const QuestionEncoderConfig& config,
                                 std::size_t vocab_size, Rng& rng)
    : config_(config) {
  validate_encoder_config(config_);
  table_ = make_embedding_table(vocab_size, config_.embed_dim, rng);
  build_params(rng);
}

QuestionEncoder::QuestionEncoder(const QuestionEncoderConfig& config,
                                 EmbeddingTable table, Rng& rng)
    : config_(config) {
  validate_encoder_config(config_);
  if (table.dim() != config_.embed_dim) {
    throw ConfigError("embedding table dim " + std::to_string(table.dim()) +
                      " does not match configured embed dim " +
                      std::to_string(config_.embed_dim));
  }
  table_ = std::move(table);
  build_params(rng);
}

QuestionEncoder::QuestionEncoder(const QuestionEncoderConfig& config, Rng& rng)
    : config_(config) {
  validate_encoder_config(config_);
  build_params(rng);
}

void QuestionEncoder::build_params(Rng& rng) {
  const std::size_t H = config_.hidden;
  if (config_.kind == EncoderKind::linear_gap) {
    gap_W_ = init_uniform(rng, {config_.embed_dim, H}, config_.embed_dim);
    gap_b_ = Tensor::zeros({1, H}, true);
    return;
  }
  const std::size_t dirs = is_bidirectional(config_.kind) ? 2 : 1;
  const std::size_t gates = is_lstm(config_.kind) ? 4 : 3;
  for (std::size_t layer = 0; layer < config_.layers; ++layer) {
    const std::size_t in_dim =
        layer == 0 ? config_.embed_dim : H * dirs;
    cells_.emplace_back();
    for (std::size_t d = 0; d < dirs; ++d) {
      RnnCellParams cell;
      for (std::size_t g = 0; g < gates; ++g) {
        cell.W.push_back(init_uniform(rng, {in_dim, H}, in_dim));
        cell.U.push_back(init_uniform(rng, {H, H}, H));
        cell.b.push_back(Tensor::zeros({1, H}, true));
      }
      cells_.back().push_back(std::move(cell));
    }
  }
}

const EmbeddingTable& QuestionEncoder::table() const {
  if (!table_) throw ContractError("encoder was built without a table");
  return *table_;
}

std::size_t QuestionEncoder::output_dim() const {
  return encoder_output_dim(config_);
}

void QuestionEncoder::set_lr_scale(double scale) {
  if (scale <= 0.0) throw ConfigError("lr scale must be positive");
  lr_scale_ = scale;
}

QuestionEncoding QuestionEncoder::encode(Tape& tape,
                                         const TokenSeq& seq) const {
  if (!table_) {
    throw ContractError(
        "encoder has no embedding table; use encode_features");
  }
  if (seq.n == 0) {
    // an all-PAD sequence; only the order-free baseline has a defined value
    if (config_.kind != EncoderKind::linear_gap) {
      throw ContractError("recurrent encoders need at least one real token");
    }
    QuestionEncoding enc;
    enc.q = Tensor::zeros({1, config_.hidden});
    enc.Q = Tensor::zeros({std::max<std::size_t>(seq.ids.size(), 1),
                           config_.hidden});
    enc.n_valid = 0;
    enc.degenerate = true;
    return enc;
  }
  std::vector<std::size_t> real(seq.ids.begin(), seq.ids.begin() + seq.n);
  Tensor word_rows = embed(tape, *table_, real);
  return encode_rows(tape, word_rows, seq.n, seq.ids.size());
}

QuestionEncoding QuestionEncoder::encode_features(Tape& tape,
                                                  const Tensor& feats) const {
  if (feats.rank() != 2 || feats.dim(1) != config_.embed_dim) {
    throw DimensionError("word features " + shape_str(feats.shape()) +
                         " do not match configured embed dim " +
                         std::to_string(config_.embed_dim));
  }
  return encode_rows(tape, feats, feats.dim(0), feats.dim(0));
}

QuestionEncoding QuestionEncoder::encode_rows(Tape& tape,
                                              const Tensor& word_rows,
                                              std::size_t n_valid,
                                              std::size_t padded_len) const {
  QuestionEncoding enc;
  enc.n_valid = n_valid;

  if (config_.kind == EncoderKind::linear_gap) {
    Tensor proj = add_rowwise(tape, matmul(tape, word_rows, gap_W_), gap_b_);
    Tensor pooled = mean_rows_canonical(tape, proj, n_valid);
    enc.q = reshape(tape, pooled, {1, config_.hidden});
    enc.Q = padded_len > n_valid
                ? concat(tape, proj,
                         Tensor::zeros({padded_len - n_valid, config_.hidden}),
                         0)
                : proj;
    return enc;
  }

  const bool bidir = is_bidirectional(config_.kind);
  const bool lstm = is_lstm(config_.kind);
  const std::size_t H = config_.hidden;

  // per-position input rows for the current layer
  std::vector<Tensor> inputs;
  inputs.reserve(n_valid);
  for (std::size_t t = 0; t < n_valid; ++t)
    inputs.push_back(rows(tape, word_rows, {t}));

  std::vector<Tensor> outputs;
  Tensor fwd_final, bwd_final;
  for (std::size_t layer = 0; layer < cells_.size(); ++layer) {
    std::vector<Tensor> fwd(n_valid), bwd;
    {
      Tensor h = Tensor::zeros({1, H});
      Tensor c = Tensor::zeros({1, H});
      for (std::size_t t = 0; t < n_valid; ++t) {
        if (lstm) {
          auto [hn, cn] = lstm_step(tape, cells_[layer][0], inputs[t], h, c);
          h = hn;
          c = cn;
        } else {
          h = gru_step(tape, cells_[layer][0], inputs[t], h);
        }
        fwd[t] = h;
      }
      fwd_final = h;
    }
    if (bidir) {
      bwd.resize(n_valid);
      Tensor h = Tensor::zeros({1, H});
      Tensor c = Tensor::zeros({1, H});
      for (std::size_t ti = n_valid; ti-- > 0;) {
        if (lstm) {
          auto [hn, cn] = lstm_step(tape, cells_[layer][1], inputs[ti], h, c);
          h = hn;
          c = cn;
        } else {
          h = gru_step(tape, cells_[layer][1], inputs[ti], h);
        }
        bwd[ti] = h;
      }
      bwd_final = h;  // the state after consuming position 0
    }

    outputs.clear();
    outputs.reserve(n_valid);
    for (std::size_t t = 0; t < n_valid; ++t) {
      outputs.push_back(bidir ? concat(tape, fwd[t], bwd[t], 1) : fwd[t]);
    }
    inputs = outputs;  // feed layer-1 states into layer 2
  }

  enc.q = bidir ? concat(tape, fwd_final, bwd_final, 1) : fwd_final;

  Tensor Q = outputs[0];
  for (std::size_t t = 1; t < n_valid; ++t) Q = concat(tape, Q, outputs[t], 0);
  if (padded_len > n_valid) {
    Q = concat(tape, Q,
               Tensor::zeros({padded_len - n_valid, output_dim()}), 0);
  }
  enc.Q = Q;
  return enc;
}

ParameterList QuestionEncoder::parameters() const {
  ParameterList params;
  auto push = [&](const Tensor& t, const std::string& name, long frozen_row) {
    params.push_back({t, name, lr_scale_, frozen_row});
  };
  if (table_ && table_->trainable) {
    push(table_->table, "encoder.embedding", 0);  // PAD row pinned
  }
  if (config_.kind == EncoderKind::linear_gap) {
    push(gap_W_, "encoder.gap.W", -1);
    push(gap_b_, "encoder.gap.b", -1);
    return params;
  }
  static const char* gru_gates[] = {"z", "r", "n"};
  static const char* lstm_gates[] = {"i", "f", "o", "c"};
  const char** gate_names = is_lstm(config_.kind) ? lstm_gates : gru_gates;
  for (std::size_t layer = 0; layer < cells_.size(); ++layer) {
    for (std::size_t d = 0; d < cells_[layer].size(); ++d) {
      const std::string prefix = "encoder.l" + std::to_string(layer) +
                                 (d == 0 ? ".fwd." : ".bwd.");
      const auto& cell = cells_[layer][d];
      for (std::size_t g = 0; g < cell.W.size(); ++g) {
        push(cell.W[g], prefix + "W." + gate_names[g], -1);
        push(cell.U[g], prefix + "U." + gate_names[g], -1);
        push(cell.b[g], prefix + "b." + gate_names[g], -1);
      }
    }
  }
  return params;
}

// --- visual adapter ---------------------------------------------------------

VisualMode::Kind visual_kind_from_string(const std::string& name) {
  if (name == "regions") return VisualMode::Kind::regions;
  if (name == "pooled_vector") return VisualMode::Kind::pooled_vector;
  throw ConfigError("unknown visual mode: " + name);
}

std::string to_string(VisualMode::Kind kind) {
  return kind == VisualMode::Kind::regions ? "regions" : "pooled_vector";
}

Tensor adapt_visual(const Tensor& features, const VisualMode& mode) {
  if (mode.kind == VisualMode::Kind::pooled_vector && mode.k != 1) {
    throw ConfigError("pooled_vector visual mode requires k = 1, got k = " +
                      std::to_string(mode.k));
  }
  if (mode.kind == VisualMode::Kind::regions) {
    if (features.shape() != Shape{mode.k, mode.dv}) {
      throw DimensionError("region features " + shape_str(features.shape()) +
                           " do not match configured " +
                           shape_str({mode.k, mode.dv}));
    }
    return features;
  }
  if (features.size() != mode.dv || features.rank() > 2 ||
      (features.rank() == 2 && features.dim(0) != 1)) {
    throw DimensionError("pooled features " + shape_str(features.shape()) +
                         " do not match configured width " +
                         std::to_string(mode.dv));
  }
  return Tensor::from({1, mode.dv},
                      {features.values().begin(), features.values().end()});
}

}  // namespace vqa
