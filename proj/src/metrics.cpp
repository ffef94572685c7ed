#include "vqa/metrics.hpp"

#include <algorithm>
#include <set>

namespace vqa {

namespace {

double thirds_score(std::size_t matches) {
  return std::min(matches, std::size_t{3}) / 3.0;
}

}  // namespace

double vqa_accuracy(const std::string& prediction,
                    const std::vector<std::string>& humans,
                    bool average_leave_one_out) {
  if (humans.size() != 10) {
    throw ContractError("vqa_accuracy expects exactly 10 human answers, got " +
                        std::to_string(humans.size()));
  }
  std::size_t matches = 0;
  for (const auto& h : humans) matches += (h == prediction) ? 1 : 0;
  if (!average_leave_one_out) return thirds_score(matches);

  // Official convention: average the consensus score over all ten 9-human
  // subsets obtained by dropping one annotator.
  double total = 0.0;
  for (std::size_t drop = 0; drop < humans.size(); ++drop) {
    const std::size_t subset = matches - ((humans[drop] == prediction) ? 1 : 0);
    total += thirds_score(subset);
  }
  return total / 10.0;
}

EvalResult aggregate(const std::vector<QuestionScore>& scores,
                     const std::map<std::uint64_t, std::string>& answer_types) {
  EvalResult result;
  result.per_question = scores;
  result.count = scores.size();

  std::set<std::uint64_t> seen;
  std::map<std::string, std::pair<double, std::size_t>> buckets;
  double total = 0.0;
  for (const auto& s : scores) {
    if (!seen.insert(s.question_id).second) {
      throw AlignmentError("duplicate score for question id " +
                           std::to_string(s.question_id));
    }
    auto it = answer_types.find(s.question_id);
    if (it == answer_types.end()) {
      throw AlignmentError("score for question id " +
                           std::to_string(s.question_id) +
                           " has no matching annotation");
    }
    total += s.score;
    auto& [sum, n] = buckets[it->second];
    sum += s.score;
    ++n;
  }
  result.overall = scores.empty() ? 0.0 : total / scores.size();
  for (const auto& [type, acc] : buckets)
    result.per_type[type] = acc.first / acc.second;
  return result;
}

std::vector<std::pair<std::string, double>> delta_vs_baseline(
    const std::vector<std::pair<std::string, EvalResult>>& results,
    const std::string& baseline_name) {
  const EvalResult* baseline = nullptr;
  for (const auto& [name, r] : results) {
    if (name == baseline_name) {
      baseline = &r;
      break;
    }
  }
  if (!baseline) {
    throw LookupError("baseline '" + baseline_name +
                      "' not found among results");
  }
  std::vector<std::pair<std::string, double>> deltas;
  deltas.reserve(results.size());
  for (const auto& [name, r] : results)
    deltas.emplace_back(name, r.overall - baseline->overall);
  return deltas;
}

}  // namespace vqa
