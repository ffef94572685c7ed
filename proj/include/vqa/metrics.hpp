#pragma once

// Consensus accuracy metric, per-answer-type aggregation, and
// delta-vs-baseline tables. All strings entering vqa_accuracy are expected
// to be pre-normalized (see data_io::normalize_answer); the metric itself is
// plain string equality.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vqa/error.hpp"

namespace vqa {

struct QuestionScore {
  std::uint64_t question_id = 0;
  double score = 0.0;
};

struct EvalResult {
  double overall = 0.0;
  std::size_t count = 0;
  // bucket -> mean score; a type with no questions is absent, never zero
  std::map<std::string, double> per_type;
  std::vector<QuestionScore> per_question;
};

// Consensus score against exactly ten human answers: min(#matches / 3, 1).
// With average_leave_one_out set, averages that score over the ten
// leave-one-out 9-human subsets (the official evaluation's convention).
// Throws ContractError unless exactly 10 human answers are supplied.
double vqa_accuracy(const std::string& prediction,
                    const std::vector<std::string>& humans,
                    bool average_leave_one_out = false);

// Buckets per-question scores by answer type and reports the overall mean.
// Every scored question id must appear in answer_types and may appear only
// once among the scores; violations raise AlignmentError.
EvalResult aggregate(const std::vector<QuestionScore>& scores,
                     const std::map<std::uint64_t, std::string>& answer_types);

// Overall-accuracy deltas in accuracy points against the named baseline,
// preserving input order. Throws LookupError when the baseline is absent.
std::vector<std::pair<std::string, double>> delta_vs_baseline(
    const std::vector<std::pair<std::string, EvalResult>>& results,
    const std::string& baseline_name);

}  // namespace vqa
