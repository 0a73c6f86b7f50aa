#include "facetutor/prompt.hpp"

#include <fstream>
#include <sstream>

#include "facetutor/seed.hpp"

namespace facetutor::prompt {

namespace {

constexpr std::string_view kSilentText = "(The student stays silent.)";

const std::map<std::string_view, std::string> kDefaultTemplateText = {
    {"tutor_system",
     "You are a patient, attentive tutor helping a grade {{grade}} student with {{subject}}.\n"
     "The student often stays silent, so pay attention to every cue you are given about how they are doing.\n"
     "Respond with exactly one sentence per turn, adapting your pacing and strategy to the student's state.\n"},
    {"tutor_problem",
     "Topic: {{topic}}\n"
     "Problem: {{question}}\n"
     "Guide the student toward solving this problem, one sentence at a time.\n"},
    {"student_system",
     "You are role-playing a grade {{grade}} student working through a {{subject}} problem with a tutor.\n"
     "You communicate mainly through facial expressions. Each turn you choose the facial expression video from "
     "your catalog that most realistically reflects how you feel about the tutor's last sentence, and you may "
     "add a short text reply.\n"},
    {"student_instruction",
     "Problem: {{question}}\n"
     "\n"
     "Conversation so far:\n"
     "{{transcript}}\n"
     "\n"
     "Your facial expression catalog (video id: expression):\n"
     "{{catalog}}\n"
     "\n"
     "Stay silent (leave \"text\" empty) unless the tutor explicitly asks you to say something. "
     "Any text must be short (under 280 characters).\n"
     "Respond with only a JSON object with the fields \"video_id\" (one id from the catalog) and \"text\".\n"},
    {"judge_system",
     "You are an expert evaluator of tutoring conversations. You compare two candidate tutor responses that "
     "continue the same conversation.\n"},
    {"judge_context",
     "Subject: {{subject}}, grade {{grade}}\n"
     "Problem: {{question}}\n"
     "\n"
     "Conversation so far:\n"
     "{{transcript}}\n"
     "\n"
     "Current student turn:\n"
     "{{student_turn}}\n"},
    {"judge_question",
     "{{question_text}}\n"
     "Answer with exactly one word: Equal, A, or B.\n"},
    {"problem_generation",
     "Create tutoring material for grade {{grade}} {{subject}}.\n"
     "Generate exactly 10 distinct topics appropriate for this grade, and for each topic write exactly 2 "
     "concrete questions a student could be tutored through.\n"
     "Respond with only a JSON object of the form "
     "{\"topics\": [{\"topic\": \"...\", \"questions\": [\"...\", \"...\"]}]}.\n"
     "Variation seed: {{seed}}\n"},
};

std::string* slot(Templates& t, std::string_view name) {
  if (name == "tutor_system") return &t.tutor_system;
  if (name == "tutor_problem") return &t.tutor_problem;
  if (name == "student_system") return &t.student_system;
  if (name == "student_instruction") return &t.student_instruction;
  if (name == "judge_system") return &t.judge_system;
  if (name == "judge_context") return &t.judge_context;
  if (name == "judge_question") return &t.judge_question;
  if (name == "problem_generation") return &t.problem_generation;
  return nullptr;
}

std::map<std::string, std::string> problem_values(const corpus::Problem& p) {
  return {{"subject", std::string(corpus::to_string(p.subject))},
          {"grade", std::to_string(p.grade)},
          {"topic", p.topic},
          {"question", p.question}};
}

std::map<std::string, std::string> problem_tags(const corpus::Problem& p) {
  return {{"subject", std::string(corpus::to_string(p.subject))}, {"grade", std::to_string(p.grade)}};
}

std::string student_reply(const StudentTurn& turn) { return turn.silent() ? std::string(kSilentText) : turn.text; }

// Tutor-visible transcript of the canonical conversation (no expression channel).
std::string tutor_transcript(const std::vector<HistoryTurn>& history) {
  if (history.empty()) return "(the session is just starting)";
  std::ostringstream out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    out << "Turn " << (i + 1) << "\n";
    out << "Student: " << student_reply(history[i].student) << "\n";
    out << "Tutor: " << history[i].tutor_sentence << "\n";
  }
  return out.str();
}

std::string require_text(const std::map<std::string, std::string>& values, const std::string& key) {
  auto it = values.find(key);
  if (it == values.end()) throw PromptError("template placeholder {{" + key + "}} has no value");
  return it->second;
}

}  // namespace

std::string_view to_string(TutorVariant v) {
  switch (v) {
    case TutorVariant::LLM: return "LLM";
    case TutorVariant::LLM_AUM: return "LLM_AUM";
    case TutorVariant::MLLM: return "MLLM";
    case TutorVariant::MLLM_AUM: return "MLLM_AUM";
  }
  return "";
}

std::optional<TutorVariant> parse_variant(std::string_view s) {
  for (auto v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::string_view to_string(Question q) {
  switch (q) {
    case Question::Q1: return "Q1";
    case Question::Q2: return "Q2";
    case Question::Q3: return "Q3";
  }
  return "";
}

std::optional<Question> parse_question(std::string_view s) {
  for (auto q : kAllQuestions) {
    if (to_string(q) == s) return q;
  }
  return std::nullopt;
}

std::string_view question_text(Question q) {
  switch (q) {
    case Question::Q1: return "Which response is clearer and more pedagogically effective?";
    case Question::Q2:
      return "Which response shows greater awareness of and responsiveness to the student's emotional or "
             "cognitive state reflected in their facial expression?";
    case Question::Q3:
      return "Which response shows greater awareness of and responsiveness to the student's emotional or "
             "cognitive state reflected in their textual response?";
  }
  return "";
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::Tutor: return "tutor";
    case Role::Student: return "student";
    case Role::Instruction: return "instruction";
  }
  return "";
}

std::string_view to_string(Task t) {
  switch (t) {
    case Task::Tutor: return "tutor";
    case Task::Student: return "student";
    case Task::Judge: return "judge";
    case Task::ProblemGeneration: return "problem_generation";
  }
  return "";
}

bool PromptPayload::has_image() const { return image_count() > 0; }

std::size_t PromptPayload::image_count() const {
  std::size_t n = 0;
  for (const auto& m : messages) n += m.image.has_value() ? 1 : 0;
  return n;
}

std::string PromptPayload::all_text() const {
  std::string out = system_text;
  for (const auto& m : messages) {
    out += '\n';
    out += m.text;
  }
  return out;
}

nlohmann::json PromptPayload::to_json() const {
  nlohmann::json j;
  j["task"] = std::string(to_string(task));
  j["system"] = system_text;
  auto& msgs = j["messages"] = nlohmann::json::array();
  for (const auto& m : messages) {
    nlohmann::json jm{{"role", std::string(to_string(m.role))}, {"text", m.text}};
    if (!m.label.empty()) jm["label"] = m.label;
    if (m.image) jm["image"] = {{"path", m.image->path.generic_string()}, {"frame_index", m.image->frame_index}};
    msgs.push_back(std::move(jm));
  }
  j["response_options"] = response_options;
  j["tags"] = tags;
  return j;
}

std::string PromptPayload::fingerprint() const {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << seed::fnv1a64(to_json().dump());
  return out.str();
}

std::string expression_marker(std::string_view description) {
  std::string out(kExpressionMarkerPrefix);
  out += description;
  out += ']';
  return out;
}

std::string strip_expression_markers(std::string_view text) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto start = text.find(kExpressionMarkerPrefix, pos);
    if (start == std::string_view::npos) {
      out += text.substr(pos);
      break;
    }
    out += text.substr(pos, start - pos);
    auto end = text.find(']', start);
    if (end == std::string_view::npos) {
      out += text.substr(start);
      break;
    }
    pos = end + 1;
    if (pos < text.size() && text[pos] == ' ') ++pos;
  }
  return out;
}

std::string shared_text(const PromptPayload& payload) { return strip_expression_markers(payload.all_text()); }

const Templates& Templates::defaults() {
  static const Templates t = [] {
    Templates out;
    for (auto name : kTemplateNames) *slot(out, name) = kDefaultTemplateText.at(name);
    return out;
  }();
  return t;
}

Templates Templates::load(const std::filesystem::path& dir) {
  Templates out = defaults();
  for (auto name : kTemplateNames) {
    auto path = dir / (std::string(name) + ".txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) continue;
    std::ostringstream buf;
    buf << in.rdbuf();
    *slot(out, name) = buf.str();
  }
  return out;
}

void Templates::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  Templates copy = *this;
  for (auto name : kTemplateNames) {
    std::ofstream out(dir / (std::string(name) + ".txt"), std::ios::binary);
    if (!out) throw PromptError("cannot write template " + std::string(name));
    out << *slot(copy, name);
  }
}

std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out += tmpl.substr(pos);
      break;
    }
    auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) throw PromptError("unterminated placeholder in template");
    out += tmpl.substr(pos, open - pos);
    out += require_text(values, std::string(tmpl.substr(open + 2, close - open - 2)));
    pos = close + 2;
  }
  return out;
}

bool StudentTurn::silent() const { return text.find_first_not_of(" \t\r\n") == std::string::npos; }

std::size_t random_frame_position(std::uint64_t frame_seed, std::size_t frame_count) {
  return seed::uniform_index(frame_seed, frame_count);
}

std::optional<ImageRef> variant_image(TutorVariant variant, const StudentTurn& turn) {
  if (!uses_images(variant)) return std::nullopt;
  const auto& entry = turn.expression;
  if (!entry) throw PromptError("image variant requires the student's expression entry");
  if (variant == TutorVariant::MLLM) {
    if (!entry->frame_images_ok) throw PromptError("no frame images for video " + entry->video_id);
    const auto& frames = entry->trace.frames;
    auto idx = frames[random_frame_position(turn.frame_seed, frames.size())].index;
    return ImageRef{entry->frame_image(idx), idx};
  }
  if (!entry->peak_image_ok) throw PromptError("no peak-frame image for video " + entry->video_id);
  return ImageRef{entry->peak_image_path(), entry->peak_index};
}

PromptPayload build_tutor_payload(TutorVariant variant, const TurnContext& ctx, const TutorOptions& options,
                                  const Templates& templates) {
  auto values = problem_values(ctx.problem);
  PromptPayload payload;
  payload.task = Task::Tutor;
  payload.tags = problem_tags(ctx.problem);
  payload.system_text = render(templates.tutor_system, values);
  payload.messages.push_back({Role::Instruction, render(templates.tutor_problem, values), std::nullopt, ""});

  auto student_message = [&](const StudentTurn& turn, bool current) {
    Message m{Role::Student, student_reply(turn), std::nullopt, ""};
    if (variant == TutorVariant::LLM_AUM && (current || options.history_au)) {
      if (turn.description.empty()) throw PromptError("LLM_AUM requires an expression description");
      m.text = expression_marker(turn.description) + " " + m.text;
    }
    if (uses_images(variant) && (current || options.history_images)) m.image = variant_image(variant, turn);
    return m;
  };

  for (const auto& h : ctx.history) {
    payload.messages.push_back(student_message(h.student, false));
    payload.messages.push_back({Role::Tutor, h.tutor_sentence, std::nullopt, ""});
  }
  payload.messages.push_back(student_message(ctx.current, true));
  return payload;
}

PromptPayload build_student_payload(const TurnContext& ctx, const std::vector<CatalogItem>& catalog,
                                    const Templates& templates) {
  if (catalog.empty()) throw PromptError("student catalog is empty");
  auto values = problem_values(ctx.problem);

  std::ostringstream transcript;
  if (ctx.history.empty()) {
    transcript << "(the session is just starting; the tutor is about to present the problem)\n";
  }
  for (std::size_t i = 0; i < ctx.history.size(); ++i) {
    const auto& h = ctx.history[i];
    transcript << "Turn " << (i + 1) << "\n";
    transcript << "You showed expression " << h.student.video_id << " (" << h.student.description << ")";
    if (h.student.silent()) {
      transcript << " and stayed silent.\n";
    } else {
      transcript << " and said: \"" << h.student.text << "\"\n";
    }
    transcript << "Tutor: " << h.tutor_sentence << "\n";
  }
  std::ostringstream listing;
  for (const auto& item : catalog) listing << "- " << item.video_id << ": " << item.description << "\n";

  values["transcript"] = transcript.str();
  values["catalog"] = listing.str();

  PromptPayload payload;
  payload.task = Task::Student;
  payload.tags = problem_tags(ctx.problem);
  payload.system_text = render(templates.student_system, values);
  payload.messages.push_back({Role::Instruction, render(templates.student_instruction, values), std::nullopt, ""});
  for (const auto& item : catalog) payload.response_options.push_back(item.video_id);
  return payload;
}

PromptPayload build_judge_payload(Question question, const TurnContext& ctx, std::string_view response_first,
                                  std::string_view response_second, const Templates& templates) {
  if (question == Question::Q3 && ctx.current.silent()) {
    throw PromptError("Q3 is not asked when the student remains silent");
  }
  auto values = problem_values(ctx.problem);
  values["transcript"] = tutor_transcript(ctx.history);
  std::string student_turn = "Student reply: " + student_reply(ctx.current);
  if (question == Question::Q2) {
    student_turn = "Student's facial expression: " + ctx.current.description + "\n" + student_turn;
  }
  values["student_turn"] = student_turn;
  values["question_text"] = std::string(question_text(question));

  PromptPayload payload;
  payload.task = Task::Judge;
  payload.tags = problem_tags(ctx.problem);
  payload.tags["question"] = std::string(to_string(question));
  payload.system_text = render(templates.judge_system, values);
  payload.messages.push_back({Role::Instruction, render(templates.judge_context, values), std::nullopt, ""});
  payload.messages.push_back(
      {Role::Instruction, "Response A:\n" + std::string(response_first), std::nullopt, "A"});
  payload.messages.push_back(
      {Role::Instruction, "Response B:\n" + std::string(response_second), std::nullopt, "B"});
  payload.messages.push_back({Role::Instruction, render(templates.judge_question, values), std::nullopt, ""});
  payload.response_options.assign(kVerdicts.begin(), kVerdicts.end());
  return payload;
}

PromptPayload build_problem_generation_payload(corpus::Subject subject, int grade, std::uint64_t seed,
                                               const Templates& templates) {
  std::map<std::string, std::string> values{{"subject", std::string(corpus::to_string(subject))},
                                            {"grade", std::to_string(grade)},
                                            {"seed", std::to_string(seed)}};
  PromptPayload payload;
  payload.task = Task::ProblemGeneration;
  payload.tags = {{"subject", values["subject"]}, {"grade", values["grade"]}};
  payload.messages.push_back({Role::Instruction, render(templates.problem_generation, values), std::nullopt, ""});
  return payload;
}

}  // namespace facetutor::prompt
