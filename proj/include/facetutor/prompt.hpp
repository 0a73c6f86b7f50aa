#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/corpus.hpp"

namespace facetutor::prompt {

enum class TutorVariant : std::uint8_t { LLM, LLM_AUM, MLLM, MLLM_AUM };
inline constexpr std::array<TutorVariant, 4> kAllVariants = {TutorVariant::LLM, TutorVariant::LLM_AUM,
                                                             TutorVariant::MLLM, TutorVariant::MLLM_AUM};
std::string_view to_string(TutorVariant v);
std::optional<TutorVariant> parse_variant(std::string_view s);
constexpr bool uses_images(TutorVariant v) { return v == TutorVariant::MLLM || v == TutorVariant::MLLM_AUM; }

enum class Question : std::uint8_t { Q1, Q2, Q3 };
inline constexpr std::array<Question, 3> kAllQuestions = {Question::Q1, Question::Q2, Question::Q3};
std::string_view to_string(Question q);
std::optional<Question> parse_question(std::string_view s);
// Evaluator-facing wording of each question.
std::string_view question_text(Question q);

enum class Role : std::uint8_t { Tutor, Student, Instruction };
std::string_view to_string(Role r);

enum class Task : std::uint8_t { Tutor, Student, Judge, ProblemGeneration };
std::string_view to_string(Task t);

struct ImageRef {
  std::filesystem::path path;
  std::uint64_t frame_index = 0;
  bool operator==(const ImageRef&) const = default;
};

struct Message {
  Role role = Role::Instruction;
  std::string text;
  std::optional<ImageRef> image;
  // Optional tag identifying a message's purpose (e.g. "A"/"B" candidates).
  std::string label;
  bool operator==(const Message&) const = default;
};

struct PromptPayload {
  Task task = Task::Tutor;
  std::string system_text;
  std::vector<Message> messages;
  // Allowed answers for structured tasks (catalog ids, verdict tokens).
  std::vector<std::string> response_options;
  // Routing metadata (subject, grade, question, variant); part of the fingerprint.
  std::map<std::string, std::string> tags;

  bool has_image() const;
  std::size_t image_count() const;
  // Concatenated system + message text, for marker searches.
  std::string all_text() const;
  nlohmann::json to_json() const;
  // Hex FNV-1a over the canonical JSON form.
  std::string fingerprint() const;

  bool operator==(const PromptPayload&) const = default;
};

inline constexpr std::string_view kExpressionMarkerPrefix = "[Student's facial expression: ";
std::string expression_marker(std::string_view description);
// Removes every expression marker so the remaining text can be compared across variants.
std::string strip_expression_markers(std::string_view text);
// System and message text with expression markers stripped and images ignored:
// the part of a tutor payload every variant must share byte for byte.
std::string shared_text(const PromptPayload& payload);

class PromptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Plain-text templates with {{name}} placeholders.
struct Templates {
  std::string tutor_system;
  std::string tutor_problem;
  std::string student_system;
  std::string student_instruction;
  std::string judge_system;
  std::string judge_context;
  std::string judge_question;
  std::string problem_generation;

  static const Templates& defaults();
  // Reads <dir>/<name>.txt for each template; missing files fall back to defaults.
  static Templates load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;
};

inline constexpr std::array<std::string_view, 8> kTemplateNames = {
    "tutor_system", "tutor_problem",  "student_system", "student_instruction",
    "judge_system", "judge_context", "judge_question", "problem_generation"};

// Replaces {{key}} placeholders; throws PromptError on an unknown placeholder.
std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values);

struct StudentTurn {
  std::string video_id;
  std::string description;  // ExpressionDescription text
  std::string text;         // empty = silent
  // Seed for the random frame shown to the MLLM variant on this turn.
  std::uint64_t frame_seed = 0;
  std::shared_ptr<const corpus::ExpressionEntry> expression;

  bool silent() const;
};

struct HistoryTurn {
  StudentTurn student;
  std::string tutor_sentence;
};

struct TurnContext {
  corpus::Problem problem;
  std::vector<HistoryTurn> history;  // 0..4 prior turns of the canonical conversation
  StudentTurn current;
};

struct TutorOptions {
  bool history_au = true;       // AU markers on historical student messages (LLM_AUM)
  bool history_images = false;  // images on historical student messages (MLLM variants)
};

// Position into trace.frames of the random frame shown to the MLLM variant.
std::size_t random_frame_position(std::uint64_t frame_seed, std::size_t frame_count);
std::optional<ImageRef> variant_image(TutorVariant variant, const StudentTurn& turn);

PromptPayload build_tutor_payload(TutorVariant variant, const TurnContext& ctx, const TutorOptions& options = {},
                                  const Templates& templates = Templates::defaults());

struct CatalogItem {
  std::string video_id;
  std::string description;
};

PromptPayload build_student_payload(const TurnContext& ctx, const std::vector<CatalogItem>& catalog,
                                    const Templates& templates = Templates::defaults());

inline constexpr std::array<std::string_view, 3> kVerdicts = {"Equal", "A", "B"};

PromptPayload build_judge_payload(Question question, const TurnContext& ctx, std::string_view response_first,
                                  std::string_view response_second,
                                  const Templates& templates = Templates::defaults());

PromptPayload build_problem_generation_payload(corpus::Subject subject, int grade, std::uint64_t seed,
                                               const Templates& templates = Templates::defaults());

}  // namespace facetutor::prompt
