#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/au.hpp"

namespace facetutor::llm {
class Client;
}

namespace facetutor::corpus {

enum class Subject : std::uint8_t { Mathematics, Physics, Chemistry, Biology };
inline constexpr std::array<Subject, 4> kAllSubjects = {Subject::Mathematics, Subject::Physics, Subject::Chemistry,
                                                        Subject::Biology};
inline constexpr std::array<int, 4> kAllGrades = {9, 10, 11, 12};
inline constexpr int kTopicsPerPair = 10;
inline constexpr int kQuestionsPerTopic = 2;
inline constexpr std::size_t kProblemsPerPair = kTopicsPerPair * kQuestionsPerTopic;
inline constexpr std::size_t kFullBankSize = kAllSubjects.size() * kAllGrades.size() * kProblemsPerPair;

std::string_view to_string(Subject s);
std::optional<Subject> parse_subject(std::string_view s);

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Problem {
  std::string id;
  Subject subject = Subject::Mathematics;
  int grade = 9;
  std::string topic;
  std::string question;

  bool operator==(const Problem&) const = default;
};

// Stable id, e.g. "physics-g10-t03-q2".
std::string make_problem_id(Subject subject, int grade, int topic_index, int question_index);

nlohmann::json to_json(const Problem& p);
Problem problem_from_json(const nlohmann::json& j);

struct ProblemBank {
  std::vector<Problem> problems;
  // Partial banks skip the 320-problem structural check.
  bool partial = false;

  bool operator==(const ProblemBank&) const = default;
};

// Throws CorpusError when ids repeat, fields are out of range, or (for a full
// bank) the 16 (subject, grade) groups do not each hold exactly 20 problems.
void validate_bank(const ProblemBank& bank);

ProblemBank load_problem_bank(const std::filesystem::path& path);
void save_problem_bank(const ProblemBank& bank, const std::filesystem::path& path);

// Parses one generation response: {"topics":[{"topic":..., "questions":[q, q]}, ...]}.
// Requires exactly 10 topics with 2 non-empty questions each.
std::vector<Problem> parse_generated_problems(std::string_view text, Subject subject, int grade);

struct GenerationOptions {
  std::uint64_t seed = 0;
  std::filesystem::path transcript_path;  // raw generation transcript (NDJSON), written when non-empty
  std::size_t concurrency = 1;
};

// One backend call per (subject, grade) pair; aborts on the first failure.
ProblemBank generate_problem_bank(llm::Client& backend, const GenerationOptions& options);

// Keeps the first `n` problems in round-robin order over the 16 groups and
// flags the result partial.
ProblemBank take_partial(const ProblemBank& full, std::size_t n);

struct ExpressionEntry {
  std::string video_id;
  std::string participant_id;
  std::filesystem::path trace_path;
  std::optional<std::filesystem::path> peak_image;
  std::optional<std::filesystem::path> frames_dir;

  au::AuTrace trace;
  au::PooledAus pooled;
  au::ExpressionDescription description;
  std::uint64_t peak_index = 0;

  // Set at load time after checking files on disk.
  bool frame_images_ok = false;
  bool peak_image_ok = false;

  // Frame images live at <frames_dir>/<frame_index>.png.
  std::filesystem::path frame_image(std::uint64_t frame_index) const;
  // Explicit peak image if given, otherwise the peak frame inside frames_dir.
  std::filesystem::path peak_image_path() const;
  bool image_ready() const { return frame_images_ok && peak_image_ok; }
};

// Builds an entry in memory (used by loaders and tests).
ExpressionEntry make_expression_entry(std::string video_id, std::string participant_id, au::AuTrace trace);

struct ParticipantEntry {
  std::string participant_id;
  std::vector<std::shared_ptr<const ExpressionEntry>> expressions;

  std::shared_ptr<const ExpressionEntry> find(std::string_view video_id) const;
};

struct ExpressionManifest {
  std::filesystem::path root;
  std::vector<ParticipantEntry> participants;
  std::vector<std::string> warnings;
};

inline constexpr std::size_t kMinEntriesPerParticipant = 20;
inline constexpr std::size_t kMaxEntriesPerParticipant = 25;

// Paths inside the manifest are relative to its directory. A missing trace is
// a hard error; missing images only disable the image variants for that entry.
ExpressionManifest load_expression_manifest(const std::filesystem::path& path);

const ParticipantEntry& assign_participant(const ExpressionManifest& manifest, std::uint64_t conversation_seed);

}  // namespace facetutor::corpus
