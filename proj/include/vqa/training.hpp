// Adamax, the epoch learning-rate schedule, the mini-batch training loop,
// and split evaluation.

#ifndef VQA_TRAINING_HPP
#define VQA_TRAINING_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vqa/data_io.hpp"
#include "vqa/encoders.hpp"
#include "vqa/error.hpp"
#include "vqa/metrics.hpp"
#include "vqa/model.hpp"
#include "vqa/param.hpp"

namespace vqa {

// --- learning-rate schedule -------------------------------------------------

struct ScheduleConfig {
  double base_lr = 7e-4;
  std::size_t warm_end_epoch = 4;     // linear 0.5 -> 2.0 over [0, warm_end]
  std::size_t plateau_end_epoch = 10;  // constant 2.0 until here
  double decay_factor = 0.75;          // multiplied in every decay_period
  std::size_t decay_period = 2;
  double lr_divisor = 10.0;  // rate reduction for fine-tuned ingested tables
};

void validate_schedule(const ScheduleConfig& config);

// Factor applied to base_lr at the given epoch: 0.5 warm start, linear rise
// to 2.0 at warm_end, plateau, then decay_factor every decay_period epochs
// starting at plateau_end. Negative epochs are a ContractError.
double lr_multiplier(long epoch, const ScheduleConfig& config);
double lr_multiplier(long epoch);  // default schedule

// --- Adamax -----------------------------------------------------------------

struct AdamaxState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  std::vector<Tensor> m;  // first moment, parallel to the parameter list
  std::vector<Tensor> u;  // infinity norm
  std::size_t t = 0;
  double beta1_pow = 1.0;  // beta1^t, maintained incrementally

  explicit AdamaxState(const ParameterList& params);
};

// One update at rate lr (scaled per parameter by lr_scale). Reads gradients
// from the parameters; missing gradients count as zero, the frozen_row of a
// parameter never moves, and any non-finite gradient aborts the whole step
// with a NumericError naming the parameter. Gradients are left in place for
// the caller to clear.
void adamax_step(ParameterList& params, AdamaxState& state, double lr);

// --- prepared data ----------------------------------------------------------

struct TrainInstance {
  std::uint64_t question_id = 0;
  TokenSeq tokens;
  Tensor visual;  // shares storage with the feature map
  std::string answer_type;
  std::vector<std::string> humans_normalized;  // all 10, pre-normalized
  bool in_vocab = false;     // designated answer present in the answer vocab
  std::size_t answer_index = 0;  // valid only when in_vocab
};

struct PreparedSplit {
  std::vector<TrainInstance> instances;  // sorted by question_id
  std::size_t out_of_vocab = 0;          // instances with OOV designated answer
};

// Joins questions to annotations and image features and tokenizes. A
// question without an annotation or features raises AlignmentError, as does
// a duplicated question id.
PreparedSplit prepare_split(
    const std::vector<QuestionRecord>& questions,
    const std::vector<AnnotationRecord>& annotations,
    const std::map<std::uint64_t, RegionFeatures>& features,
    const Vocabulary& words, const AnswerVocab& answers);

// --- training loop ----------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr_multiplier = 0.0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  // running top-1 vs designated answer
  double val_accuracy = 0.0;    // consensus metric on the validation split
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t skipped_out_of_vocab = 0;  // training instances never used
};

// CSV with a fixed header; doubles printed with %.17g so reruns are
// byte-comparable.
void save_train_log(const std::string& path, const TrainLog& log);

// Deterministic under config.seed: epoch shuffles derive from the seed, not
// from dataset storage order (instances are identity-sorted first). Batch
// loss is the mean cross-entropy over usable instances; out-of-vocabulary
// answers are skipped and counted. Throws ContractError when no usable
// training instance exists.
TrainLog train_model(VqaModel& model, const PreparedSplit& train,
                     const PreparedSplit& val, const AnswerVocab& answers,
                     const TrainConfig& config, const ScheduleConfig& schedule,
                     bool quiet = true);

// --- evaluation -------------------------------------------------------------

struct Evaluation {
  EvalResult result;
  std::vector<Prediction> predictions;  // one per instance, sorted by id
};

// Pure: no parameter updates, identical results on repeated calls. Empty
// splits raise ContractError.
Evaluation evaluate(const VqaModel& model, const PreparedSplit& split,
                    const AnswerVocab& answers);

}  // namespace vqa

#endif  // VQA_TRAINING_HPP
