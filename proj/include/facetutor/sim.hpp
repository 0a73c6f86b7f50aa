#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/au.hpp"
#include "facetutor/corpus.hpp"
#include "facetutor/llm.hpp"
#include "facetutor/prompt.hpp"

namespace facetutor::sim {

using prompt::TutorVariant;

inline constexpr int kTurnsPerConversation = 5;
inline constexpr std::size_t kMaxStudentTextChars = 280;

struct StudentAction {
  std::string video_id;
  std::string description;
  au::PooledAus pooled;
  au::AuId dominant_au = au::AuId::AU1;
  std::string text;  // empty = silent

  bool silent() const;
};

class StudentParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extracts {"video_id": ..., "text": ...} from the student model's reply and
// checks the id against the participant's catalog. Blank text means silent.
StudentAction parse_student_action(std::string_view model_text, const corpus::ParticipantEntry& catalog);

// Counts terminal punctuation groups; a single-sentence reply has at most one.
bool is_single_sentence(std::string_view text);

struct TurnRecord {
  int turn_index = 0;
  StudentAction student;
  std::uint64_t frame_seed = 0;
  std::uint64_t random_frame_index = 0;  // shown to MLLM
  std::uint64_t peak_frame_index = 0;    // shown to MLLM_AUM
  std::string canonical_response;        // LLM_AUM
  std::map<TutorVariant, std::string> responses;
  std::map<TutorVariant, llm::Usage> usage;
  llm::Usage student_usage;
  // Fingerprint of each variant payload's shared text (markers stripped).
  std::map<TutorVariant, std::string> context_fingerprints;
  std::vector<std::string> warnings;
};

enum class ConversationStatus : std::uint8_t { Running, Complete, Failed };

struct ConversationRecord {
  std::string conversation_id;
  corpus::Problem problem;
  std::string backbone;
  std::string participant_id;
  std::uint64_t conversation_seed = 0;
  std::vector<TurnRecord> turns;
  ConversationStatus status = ConversationStatus::Running;
  int failed_turn = 0;
  std::string error;

  // "complete", "running" or "failed-at-turn-<k>".
  std::string status_text() const;
  const TurnRecord& turn(int turn_index) const;
};

nlohmann::json to_json(const ConversationRecord& r);
ConversationRecord record_from_json(const nlohmann::json& j);

// Rebuilds the canonical context of one turn from a stored record. Expression
// entries are attached when a participant catalog is supplied.
prompt::TurnContext turn_context(const ConversationRecord& record, int turn_index,
                                 const corpus::ParticipantEntry* participant = nullptr);

// One JSON file per conversation under a directory; writes are serialized.
class RecordStore {
 public:
  explicit RecordStore(std::filesystem::path dir);
  void save(const ConversationRecord& record);
  std::optional<ConversationRecord> load(const std::string& conversation_id) const;
  std::vector<ConversationRecord> load_all() const;
  std::filesystem::path path_for(const std::string& conversation_id) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mutex_;
};

struct SimulationOptions {
  prompt::TutorOptions tutor;
  prompt::Templates templates = prompt::Templates::defaults();
  bool parallel_branches = true;
};

std::uint64_t conversation_seed(std::uint64_t campaign_seed, const std::string& problem_id);
std::uint64_t frame_seed(std::uint64_t conversation_seed, int turn_index);

// Expressions offered to the student: entries usable by all four variants.
std::vector<std::shared_ptr<const corpus::ExpressionEntry>> usable_catalog(const corpus::ParticipantEntry& participant);

// Runs the five-turn canonical conversation with LLM_AUM and branches the other
// three variants on each turn from the identical history. Failures end the
// conversation with status Failed; completed turns are kept (and persisted
// after every turn when a store is given).
ConversationRecord run_conversation(const corpus::Problem& problem, const corpus::ParticipantEntry& participant,
                                    llm::Client& student, llm::Client& tutor, std::uint64_t conversation_seed,
                                    const SimulationOptions& options = {}, RecordStore* store = nullptr);

struct CampaignOptions {
  std::uint64_t seed = 0;
  std::size_t concurrency = 1;
  SimulationOptions simulation;
};

struct CampaignResult {
  std::vector<ConversationRecord> records;  // sorted by conversation id, includes failures
  std::vector<std::string> failed_ids;
  std::size_t newly_run = 0;
  double silence_rate = 0.0;  // fraction of silent turns across complete records
};

// One conversation per problem into `run_dir`, checkpointed in
// run_dir/checkpoint.json so reruns skip completed ids. Failures are listed in
// run_dir/retry_manifest.json and never abort the campaign.
CampaignResult run_campaign(const corpus::ProblemBank& bank, const corpus::ExpressionManifest& manifest,
                            llm::Client& student, llm::Client& tutor, const std::filesystem::path& run_dir,
                            const CampaignOptions& options);

std::vector<ConversationRecord> load_run(const std::filesystem::path& run_dir);

}  // namespace facetutor::sim
