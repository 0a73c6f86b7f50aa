#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/judge.hpp"
#include "facetutor/llm.hpp"
#include "facetutor/prompt.hpp"
#include "facetutor/sim.hpp"
#include "facetutor/stats.hpp"

namespace facetutor::campaign {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Relative paths are resolved against the directory of the config file.
struct CampaignConfig {
  std::filesystem::path bank;
  std::filesystem::path manifest;
  std::filesystem::path output;
  std::optional<std::filesystem::path> templates;
  std::vector<llm::BackendHandle> backbones;
  llm::BackendHandle student;
  llm::BackendHandle judge;
  std::optional<llm::BackendHandle> generator;  // defaults to the student handle
  std::uint64_t seed = 1;
  std::uint64_t judge_seed = 1;
  std::uint64_t stats_seed = stats::kDefaultSeed;
  std::size_t permutations = stats::kDefaultPermutations;
  std::size_t concurrency = 4;
  bool history_au = true;
  bool history_images = false;
  bool partial_bank = false;
};

CampaignConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
CampaignConfig load_config(const std::filesystem::path& path);
// Absolute paths, so the snapshot alone reruns the campaign.
nlohmann::json to_json(const CampaignConfig& c);

// Fails before any backend call when a referenced path or credential is missing.
void validate_for_simulation(const CampaignConfig& c);
const llm::BackendHandle& find_backbone(const CampaignConfig& c, const std::string& name);

prompt::Templates load_templates(const CampaignConfig& c);
sim::SimulationOptions simulation_options(const CampaignConfig& c);

std::filesystem::path run_dir(const CampaignConfig& c, const std::string& backbone);
std::filesystem::path judgment_log(const CampaignConfig& c, const std::string& backbone);
std::filesystem::path audit_path(const CampaignConfig& c, const std::string& command);

sim::CampaignResult simulate_backbone(const CampaignConfig& c, const std::string& backbone);
judge::AiCampaignResult judge_backbone(const CampaignConfig& c, const std::string& backbone);

void write_text_atomic(const std::filesystem::path& path, const std::string& text);

struct ReportInputs {
  std::vector<sim::ConversationRecord> records;
  std::vector<judge::PairwiseJudgment> judgments;  // AI and human combined
  std::size_t permutations = stats::kDefaultPermutations;
  std::uint64_t seed = stats::kDefaultSeed;
  std::size_t workers = 1;
};

struct ReportOutputs {
  std::vector<stats::StatsSummary> summaries;
  stats::AgreementReport agreement;
  stats::TokenOverheadReport tokens;
};

// Writes summary.csv, summary.json, table_Q{1,2,3}.txt, agreement.{txt,json}
// and token_overhead.{txt,json} into `dir`.
ReportOutputs write_report(const std::filesystem::path& dir, const ReportInputs& inputs);

}  // namespace facetutor::campaign
