#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/judge.hpp"
#include "facetutor/sim.hpp"

namespace facetutor::stats {

using judge::EvaluatorKind;
using judge::TargetPair;
using prompt::Question;

class StatsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultPermutations = 100000;
inline constexpr std::uint64_t kDefaultSeed = 20251;

struct PermutationResult {
  std::size_t n_nonzero = 0;
  double mu = 0.0;
  double p = 1.0;
};

// Two-sided sign-flip test on the non-zero scores. Permutation k draws its
// signs from its own stream seeded by (seed, k), so any worker count gives the
// same p.
PermutationResult permutation_test(const std::vector<double>& scores, std::size_t n_perm = kDefaultPermutations,
                                   std::uint64_t seed = kDefaultSeed, std::size_t workers = 1);

// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& x);

struct Correlation {
  std::size_t n = 0;
  std::optional<double> rho;  // absent when either input has zero variance
  std::optional<double> p;
};

Correlation spearman(const std::vector<double>& x, const std::vector<double>& y);
double mae(const std::vector<double>& x, const std::vector<double>& y);

struct StatsSummary {
  std::string backbone;
  TargetPair pair = TargetPair::LLM_AUM_vs_LLM;
  Question question = Question::Q1;
  EvaluatorKind kind = EvaluatorKind::AI;
  std::size_t n_items = 0;
  std::size_t n_nonzero = 0;
  double mu = 0.0;
  double p = 1.0;
};

std::vector<StatsSummary> build_cell_summaries(const std::vector<judge::ItemScore>& scores, EvaluatorKind kind,
                                               std::size_t n_perm = kDefaultPermutations,
                                               std::uint64_t seed = kDefaultSeed, std::size_t workers = 1);

struct QuestionAgreement {
  Question question = Question::Q1;
  std::size_t n_items = 0;
  Correlation agreement;  // ai vs human
  double mae = 0.0;
  Correlation disagreement;  // |ai - human| vs human_std
};

struct AgreementReport {
  std::vector<QuestionAgreement> questions;
  std::vector<std::string> notices;
};

inline constexpr std::size_t kMinAgreementItems = 3;
AgreementReport agreement_report(const std::vector<judge::ItemScore>& scores);

struct VariantTokens {
  prompt::TutorVariant variant = prompt::TutorVariant::LLM;
  std::size_t turns = 0;
  double mean_input_tokens = 0.0;
  std::optional<double> ratio_vs_llm_aum;
};

struct TokenOverheadReport {
  std::vector<VariantTokens> variants;
  std::optional<double> mllm_aum_over_llm_aum;
};

TokenOverheadReport token_overhead_report(const std::vector<sim::ConversationRecord>& records);

std::string format_p(double p);
std::string summaries_csv(const std::vector<StatsSummary>& summaries);
// Table 1 layout: backbone, comparison, then n/mu/p for Human and AI, one table per question.
std::string summary_table(const std::vector<StatsSummary>& summaries, Question question);
std::string agreement_text(const AgreementReport& report);
std::string token_overhead_text(const TokenOverheadReport& report);

nlohmann::json to_json(const StatsSummary& s);
nlohmann::json to_json(const AgreementReport& r);
nlohmann::json to_json(const TokenOverheadReport& r);

}  // namespace facetutor::stats
