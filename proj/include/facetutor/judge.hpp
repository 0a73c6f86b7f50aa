#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/llm.hpp"
#include "facetutor/prompt.hpp"
#include "facetutor/sim.hpp"

namespace facetutor::judge {

using prompt::Question;
using prompt::TutorVariant;

enum class TargetPair : std::uint8_t { LLM_AUM_vs_LLM, MLLM_AUM_vs_MLLM, LLM_AUM_vs_MLLM_AUM };
inline constexpr std::array<TargetPair, 3> kAllPairs = {TargetPair::LLM_AUM_vs_LLM, TargetPair::MLLM_AUM_vs_MLLM,
                                                        TargetPair::LLM_AUM_vs_MLLM_AUM};
std::string_view to_string(TargetPair p);
// Table label, e.g. "LLM+AUM vs. LLM".
std::string_view display_name(TargetPair p);
std::optional<TargetPair> parse_pair(std::string_view s);
TutorVariant left(TargetPair p);
TutorVariant right(TargetPair p);

enum class Outcome : std::uint8_t { Better, Equal, Worse };
std::string_view to_string(Outcome o);
std::optional<Outcome> parse_outcome(std::string_view s);
int score_outcome(Outcome o);

enum class TrialOrder : std::uint8_t { LeftFirst, RightFirst };
std::string_view to_string(TrialOrder o);

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ItemKey {
  std::string backbone;
  std::string conversation_id;
  int turn_index = 0;
  auto operator<=>(const ItemKey&) const = default;
};
std::string to_string(const ItemKey& k);

enum class EvaluatorKind : std::uint8_t { AI, Human };
std::string_view to_string(EvaluatorKind k);

struct PairwiseJudgment {
  ItemKey item;
  Question question = Question::Q1;
  TargetPair pair = TargetPair::LLM_AUM_vs_LLM;
  EvaluatorKind kind = EvaluatorKind::AI;
  std::string evaluator;
  std::optional<Outcome> outcome;  // absent when abstained or failed
  std::optional<TrialOrder> trial_order;  // AI only
  std::string verdict;  // raw AI verdict
  bool abstained = false;  // human only
  bool failed = false;     // AI verdict unparseable after reprompt
};

nlohmann::json to_json(const PairwiseJudgment& j);
PairwiseJudgment judgment_from_json(const nlohmann::json& j);
std::vector<PairwiseJudgment> read_judgment_log(const std::filesystem::path& path);

// Ordered chain over the four variants: relations[i] joins order[i] and order[i+1].
struct FourWayRanking {
  std::array<TutorVariant, 4> order{};
  std::array<char, 3> relations{};  // '>' or '='
};

// Parses "D>B=A>C" given the label -> variant map (labels are single characters).
FourWayRanking parse_ranking(std::string_view chain, const std::map<char, TutorVariant>& labels);
// Renders back using variant names as "LLM_AUM>MLLM_AUM=LLM>MLLM".
std::string to_string(const FourWayRanking& r);
std::map<TargetPair, Outcome> extract_pairs(const FourWayRanking& ranking);

// Strict verdict parser: trims whitespace, accepts exactly Equal, A or B.
std::optional<std::string> parse_verdict(std::string_view text);

struct AiItemResult {
  std::optional<double> score;  // mean of the two trials, relative to the pair's left option
  std::array<PairwiseJudgment, 2> trials;
  bool failed = false;
};

// Two counterbalanced queries (left-first, then right-first); one reprompt per
// trial for an unparseable verdict before the item is marked failed.
AiItemResult ai_judge_item(llm::Client& judge, const prompt::TurnContext& ctx,
                           const std::map<TutorVariant, std::string>& responses, TargetPair pair, Question question,
                           const ItemKey& key, const prompt::Templates& templates = prompt::Templates::defaults());

struct AiCampaignResult {
  std::size_t scored_items = 0;   // items with both trials judged (including earlier runs)
  std::size_t failed_items = 0;
  std::size_t new_calls = 0;
  std::vector<PairwiseJudgment> judgments;  // full log contents after the run
};

// Judges every (complete conversation, turn) x 3 pairs x applicable questions,
// skipping Q3 on silent turns. Appends to `log_path` in deterministic order and
// skips items already present there.
AiCampaignResult ai_judge_campaign(const std::vector<sim::ConversationRecord>& records, llm::Client& judge,
                                   const std::filesystem::path& log_path, std::size_t concurrency = 1,
                                   const prompt::Templates& templates = prompt::Templates::defaults());

// What an importer knows about each item: whether the student spoke.
using ItemCatalog = std::map<ItemKey, bool>;
ItemCatalog item_catalog(const std::vector<sim::ConversationRecord>& records);

// Human rating file: NDJSON, one object per (rater, item) with rater_id,
// backbone, conversation_id, turn_index, label_map {"A": "LLM", ...} and
// questions {"Q1": {"chain": "D>B=A>C"} | {"abstain": true}, ...}.
std::vector<PairwiseJudgment> parse_human_ratings(const std::vector<nlohmann::json>& rows,
                                                  const ItemCatalog* known = nullptr);
std::vector<PairwiseJudgment> import_human_ratings(const std::filesystem::path& path,
                                                   const ItemCatalog* known = nullptr);

struct ItemScore {
  ItemKey item;
  Question question = Question::Q1;
  TargetPair pair = TargetPair::LLM_AUM_vs_LLM;
  std::optional<double> ai_score;
  std::optional<double> human_score;
  double human_std = 0.0;  // population standard deviation
  std::size_t n_human_raters = 0;
};

std::vector<ItemScore> aggregate_scores(const std::vector<PairwiseJudgment>& judgments);

struct HumanEvalItem {
  ItemKey item;
  au::AuId dominant_au = au::AuId::AU1;
};

// n conversations per backbone, one turn each, turn counts within 1 of each
// other; inside each turn stratum the pick greedily spreads dominant AUs.
std::vector<HumanEvalItem> sample_human_eval_set(const std::vector<sim::ConversationRecord>& records,
                                                 std::size_t n_per_backbone, std::uint64_t seed);

nlohmann::json assignment_to_json(const std::vector<HumanEvalItem>& items, std::uint64_t seed);
std::vector<HumanEvalItem> assignment_from_json(const nlohmann::json& j);

}  // namespace facetutor::judge
