#include "vqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "vqa/rng.hpp"

namespace vqa {

// --- schedule ---------------------------------------------------------------

void validate_schedule(const ScheduleConfig& c) {
  if (!(c.base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (c.warm_end_epoch == 0) throw ConfigError("warm_end_epoch must be >= 1");
  if (c.plateau_end_epoch < c.warm_end_epoch) {
    throw ConfigError("plateau_end_epoch must be >= warm_end_epoch");
  }
  if (c.decay_period == 0) throw ConfigError("decay_period must be >= 1");
  if (!(c.decay_factor > 0.0 && c.decay_factor <= 1.0)) {
    throw ConfigError("decay_factor must lie in (0, 1]");
  }
  if (!(c.lr_divisor >= 1.0)) throw ConfigError("lr_divisor must be >= 1");
}

double lr_multiplier(long epoch, const ScheduleConfig& c) {
  if (epoch < 0) {
    throw ContractError("lr_multiplier: negative epoch " +
                        std::to_string(epoch));
  }
  const auto e = static_cast<std::size_t>(epoch);
  if (e < c.warm_end_epoch) {
    return 0.5 + 1.5 * (static_cast<double>(e) /
                        static_cast<double>(c.warm_end_epoch));
  }
  if (e < c.plateau_end_epoch) return 2.0;
  // repeated multiplication keeps the representable cases (0.75 steps) exact
  double factor = 2.0;
  const std::size_t steps = (e - c.plateau_end_epoch) / c.decay_period + 1;
  for (std::size_t i = 0; i < steps; ++i) factor *= c.decay_factor;
  return factor;
}

double lr_multiplier(long epoch) { return lr_multiplier(epoch, {}); }

// --- Adamax -----------------------------------------------------------------

AdamaxState::AdamaxState(const ParameterList& params) {
  m.reserve(params.size());
  u.reserve(params.size());
  for (const auto& p : params) {
    m.push_back(Tensor::zeros(p.tensor.shape()));
    u.push_back(Tensor::zeros(p.tensor.shape()));
  }
}

void adamax_step(ParameterList& params, AdamaxState& state, double lr) {
  if (params.size() != state.m.size()) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  // abort before touching anything if any gradient went non-finite
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + p.name +
                           "'; optimizer step aborted");
      }
    }
  }

  state.t += 1;
  state.beta1_pow *= AdamaxState::beta1;
  const double bias = 1.0 - state.beta1_pow;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params[pi];
    const double rate = lr * p.lr_scale / bias;
    auto theta = p.tensor.mutable_values();
    auto mv = state.m[pi].mutable_values();
    auto uv = state.u[pi].mutable_values();
    const bool has = p.tensor.has_grad();
    std::span<const double> gv;
    if (has) gv = p.tensor.grad();
    const std::size_t cols =
        p.tensor.rank() == 2 ? p.tensor.dim(1) : p.tensor.size();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = has ? gv[i] : 0.0;
      if (p.frozen_row >= 0 &&
          i / cols == static_cast<std::size_t>(p.frozen_row)) {
        g = 0.0;
      }
      mv[i] = AdamaxState::beta1 * mv[i] + (1.0 - AdamaxState::beta1) * g;
      uv[i] = std::max(AdamaxState::beta2 * uv[i], std::fabs(g));
      theta[i] -= rate * mv[i] / (uv[i] + AdamaxState::epsilon);
    }
  }
}

// --- data preparation -------------------------------------------------------

PreparedSplit prepare_split(
    const std::vector<QuestionRecord>& questions,
    const std::vector<AnnotationRecord>& annotations,
    const std::map<std::uint64_t, RegionFeatures>& features,
    const Vocabulary& words, const AnswerVocab& answers) {
  std::map<std::uint64_t, const AnnotationRecord*> by_id;
  for (const auto& a : annotations) {
    if (!by_id.emplace(a.question_id, &a).second) {
      throw AlignmentError("duplicate annotation for question " +
                           std::to_string(a.question_id));
    }
  }

  PreparedSplit out;
  out.instances.reserve(questions.size());
  std::set<std::uint64_t> seen;
  for (const auto& q : questions) {
    if (!seen.insert(q.question_id).second) {
      throw AlignmentError("duplicate question id " +
                           std::to_string(q.question_id));
    }
    auto ai = by_id.find(q.question_id);
    if (ai == by_id.end()) {
      throw AlignmentError("question " + std::to_string(q.question_id) +
                           " has no annotation");
    }
    auto fi = features.find(q.image_id);
    if (fi == features.end()) {
      throw AlignmentError("image " + std::to_string(q.image_id) +
                           " has no region features");
    }
    TrainInstance inst;
    inst.question_id = q.question_id;
    inst.tokens = tokenize(q.question, words);
    inst.visual = fi->second.V;
    inst.answer_type = ai->second->answer_type;
    inst.humans_normalized.reserve(ai->second->humans.size());
    for (const auto& h : ai->second->humans) {
      inst.humans_normalized.push_back(normalize_answer(h));
    }
    auto vi = answers.index.find(normalize_answer(ai->second->designated_answer));
    if (vi == answers.index.end()) {
      ++out.out_of_vocab;
    } else {
      inst.in_vocab = true;
      inst.answer_index = vi->second;
    }
    out.instances.push_back(std::move(inst));
  }
  std::sort(out.instances.begin(), out.instances.end(),
            [](const TrainInstance& a, const TrainInstance& b) {
              return a.question_id < b.question_id;
            });
  return out;
}

// --- evaluation -------------------------------------------------------------

Evaluation evaluate(const VqaModel& model, const PreparedSplit& split,
                    const AnswerVocab& answers) {
  if (split.instances.empty()) {
    throw ContractError("evaluate called on an empty split");
  }
  Evaluation ev;
  std::vector<QuestionScore> scores;
  std::map<std::uint64_t, std::string> types;
  scores.reserve(split.instances.size());
  ev.predictions.reserve(split.instances.size());
  for (const auto& inst : split.instances) {
    const std::size_t pred = model.predict(inst.tokens, inst.visual);
    const std::string& answer = answers.answers.at(pred);
    ev.predictions.push_back({inst.question_id, answer});
    scores.push_back(
        {inst.question_id, vqa_accuracy(answer, inst.humans_normalized)});
    types.emplace(inst.question_id, inst.answer_type);
  }
  ev.result = aggregate(scores, types);
  return ev;
}

// --- training loop ----------------------------------------------------------

TrainLog train_model(VqaModel& model, const PreparedSplit& train,
                     const PreparedSplit& val, const AnswerVocab& answers,
                     const TrainConfig& config, const ScheduleConfig& schedule,
                     bool quiet) {
  validate_schedule(schedule);
  if (config.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (val.instances.empty()) throw ContractError("validation split is empty");

  std::vector<std::size_t> usable;
  usable.reserve(train.instances.size());
  for (std::size_t i = 0; i < train.instances.size(); ++i) {
    if (train.instances[i].in_vocab) usable.push_back(i);
  }
  if (usable.empty()) {
    throw ContractError(
        "no training instance with an in-vocabulary designated answer");
  }

  ParameterList params = model.parameters();
  AdamaxState state(params);
  TrainLog log;
  log.skipped_out_of_vocab = train.out_of_vocab;
  const std::size_t n_answers = answers.size();

  std::vector<std::size_t> order;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double mult = lr_multiplier(static_cast<long>(epoch), schedule);
    const double lr = schedule.base_lr * mult;

    order = usable;
    Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      const std::size_t end = std::min(pos + config.batch_size, order.size());
      Tape tape;
      Tensor batch_total;
      std::size_t b = 0;
      for (; pos < end; ++pos) {
        const TrainInstance& inst = train.instances[order[pos]];
        AnswerLogits out = model.forward(tape, inst.tokens, inst.visual);
        ++seen;
        if (out.predicted == inst.answer_index) ++correct;
        Tensor li = cross_entropy(tape, reshape(tape, out.logits, {n_answers}),
                                  inst.answer_index);
        batch_total = b == 0 ? li : add(tape, batch_total, li);
        ++b;
      }
      Tensor batch_loss =
          scale(tape, batch_total, 1.0 / static_cast<double>(b));
      tape.backward(batch_loss);
      loss_sum += batch_loss(0) * static_cast<double>(b);
      adamax_step(params, state, lr);
      for (auto& p : params) p.tensor.zero_grad();
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr_multiplier = mult;
    stats.mean_loss = loss_sum / static_cast<double>(seen);
    stats.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(seen);
    stats.val_accuracy = evaluate(model, val, answers).result.overall;
    log.epochs.push_back(stats);
    if (!quiet) {
      std::fprintf(stderr,
                   "epoch %2zu  lr x%-7.4g loss %.5f  train %.4f  val %.4f\n",
                   epoch, mult, stats.mean_loss, stats.train_accuracy,
                   stats.val_accuracy);
    }
  }
  return log;
}

void save_train_log(const std::string& path, const TrainLog& log) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("cannot open train log for writing: " + path);
  std::fputs("epoch,lr_multiplier,mean_loss,train_accuracy,val_accuracy\n", f);
  char line[192];
  for (const auto& e : log.epochs) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch,
                  e.lr_multiplier, e.mean_loss, e.train_accuracy,
                  e.val_accuracy);
    std::fputs(line, f);
  }
  if (std::fclose(f) != 0) {
    throw FormatError("failed writing train log: " + path);
  }
}

}  // namespace vqa
