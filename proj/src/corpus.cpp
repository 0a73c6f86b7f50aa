#include "facetutor/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>

#include "facetutor/llm.hpp"
#include "facetutor/prompt.hpp"
#include "facetutor/seed.hpp"

namespace facetutor::corpus {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError(std::string(what) + " not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError(std::string("malformed ") + std::string(what) + " " + path.string() + ": " + e.what());
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CorpusError("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

// Extracts the outermost JSON object from a model reply that may carry code fences or prose.
std::string_view json_object_span(std::string_view text) {
  auto open = text.find('{');
  auto close = text.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return {};
  return text.substr(open, close - open + 1);
}

bool all_frame_images_present(const ExpressionEntry& e) {
  if (!e.frames_dir || !fs::is_directory(*e.frames_dir)) return false;
  for (const auto& f : e.trace.frames) {
    if (!fs::is_regular_file(e.frame_image(f.index))) return false;
  }
  return true;
}

}  // namespace

std::string_view to_string(Subject s) {
  switch (s) {
    case Subject::Mathematics: return "mathematics";
    case Subject::Physics: return "physics";
    case Subject::Chemistry: return "chemistry";
    case Subject::Biology: return "biology";
  }
  return "";
}

std::optional<Subject> parse_subject(std::string_view s) {
  for (auto subject : kAllSubjects) {
    if (to_string(subject) == s) return subject;
  }
  return std::nullopt;
}

std::string make_problem_id(Subject subject, int grade, int topic_index, int question_index) {
  std::ostringstream out;
  out << to_string(subject) << "-g" << grade << "-t";
  out.width(2);
  out.fill('0');
  out << topic_index << "-q" << question_index;
  return out.str();
}

nlohmann::json to_json(const Problem& p) {
  return {{"id", p.id},
          {"subject", std::string(to_string(p.subject))},
          {"grade", p.grade},
          {"topic", p.topic},
          {"question", p.question}};
}

Problem problem_from_json(const nlohmann::json& j) {
  Problem p;
  try {
    p.id = j.at("id").get<std::string>();
    auto subject = parse_subject(j.at("subject").get<std::string>());
    if (!subject) throw CorpusError("unknown subject '" + j.at("subject").get<std::string>() + "'");
    p.subject = *subject;
    p.grade = j.at("grade").get<int>();
    p.topic = j.at("topic").get<std::string>();
    p.question = j.at("question").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("malformed problem record: ") + e.what());
  }
  if (std::find(kAllGrades.begin(), kAllGrades.end(), p.grade) == kAllGrades.end()) {
    throw CorpusError("problem " + p.id + ": grade " + std::to_string(p.grade) + " outside 9-12");
  }
  if (p.id.empty()) throw CorpusError("problem with empty id");
  if (p.question.empty()) throw CorpusError("problem " + p.id + ": empty question");
  return p;
}

void validate_bank(const ProblemBank& bank) {
  std::set<std::string> ids;
  std::map<std::pair<Subject, int>, std::size_t> groups;
  for (const auto& p : bank.problems) {
    if (!ids.insert(p.id).second) throw CorpusError("duplicate problem id " + p.id);
    if (p.question.empty()) throw CorpusError("problem " + p.id + ": empty question");
    if (std::find(kAllGrades.begin(), kAllGrades.end(), p.grade) == kAllGrades.end()) {
      throw CorpusError("problem " + p.id + ": grade outside 9-12");
    }
    ++groups[{p.subject, p.grade}];
  }
  if (bank.partial) return;
  if (bank.problems.size() != kFullBankSize) {
    throw CorpusError("full bank must hold " + std::to_string(kFullBankSize) + " problems, found " +
                      std::to_string(bank.problems.size()));
  }
  for (auto s : kAllSubjects) {
    for (int g : kAllGrades) {
      auto n = groups[{s, g}];
      if (n != kProblemsPerPair) {
        throw CorpusError(std::string(to_string(s)) + " grade " + std::to_string(g) + " has " + std::to_string(n) +
                          " problems, expected " + std::to_string(kProblemsPerPair));
      }
    }
  }
}

ProblemBank load_problem_bank(const fs::path& path) {
  auto doc = read_json_file(path, "problem bank");
  ProblemBank bank;
  if (!doc.is_object() || !doc.contains("problems") || !doc["problems"].is_array()) {
    throw CorpusError("malformed problem bank " + path.string() + ": missing problems array");
  }
  bank.partial = doc.value("partial", false);
  for (const auto& j : doc["problems"]) bank.problems.push_back(problem_from_json(j));
  validate_bank(bank);
  return bank;
}

void save_problem_bank(const ProblemBank& bank, const fs::path& path) {
  validate_bank(bank);
  nlohmann::json doc{{"partial", bank.partial}, {"problems", nlohmann::json::array()}};
  for (const auto& p : bank.problems) doc["problems"].push_back(to_json(p));
  write_text_atomic(path, doc.dump(2) + "\n");
}

std::vector<Problem> parse_generated_problems(std::string_view text, Subject subject, int grade) {
  auto span = json_object_span(text);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(span);
  } catch (const nlohmann::json::parse_error&) {
    throw CorpusError("unparseable problem generation for " + std::string(to_string(subject)) + " grade " +
                      std::to_string(grade));
  }
  if (!doc.is_object() || !doc.contains("topics") || !doc["topics"].is_array()) {
    throw CorpusError("problem generation lacks a topics array");
  }
  const auto& topics = doc["topics"];
  if (topics.size() != static_cast<std::size_t>(kTopicsPerPair)) {
    throw CorpusError(std::string(to_string(subject)) + " grade " + std::to_string(grade) + ": expected " +
                      std::to_string(kTopicsPerPair) + " topics, got " + std::to_string(topics.size()));
  }
  std::vector<Problem> out;
  int t = 0;
  for (const auto& topic : topics) {
    ++t;
    if (!topic.is_object() || !topic.contains("topic") || !topic["topic"].is_string() ||
        !topic.contains("questions") || !topic["questions"].is_array()) {
      throw CorpusError("malformed topic entry " + std::to_string(t));
    }
    const auto& qs = topic["questions"];
    if (qs.size() != static_cast<std::size_t>(kQuestionsPerTopic)) {
      throw CorpusError("topic " + std::to_string(t) + ": expected " + std::to_string(kQuestionsPerTopic) +
                        " questions, got " + std::to_string(qs.size()));
    }
    int q = 0;
    for (const auto& question : qs) {
      ++q;
      if (!question.is_string() || question.get<std::string>().empty()) {
        throw CorpusError("topic " + std::to_string(t) + " question " + std::to_string(q) + " is empty");
      }
      out.push_back(
          {make_problem_id(subject, grade, t, q), subject, grade, topic["topic"].get<std::string>(), question});
    }
  }
  return out;
}

ProblemBank generate_problem_bank(llm::Client& backend, const GenerationOptions& options) {
  struct Request {
    Subject subject;
    int grade;
    prompt::PromptPayload payload;
  };
  std::vector<Request> requests;
  for (auto s : kAllSubjects) {
    for (int g : kAllGrades) {
      requests.push_back({s, g, prompt::build_problem_generation_payload(s, g, options.seed)});
    }
  }

  struct Outcome {
    std::optional<llm::Completion> completion;
    std::string error;
  };
  std::vector<Outcome> outcomes(requests.size());
  auto run = [&](std::size_t i) {
    try {
      outcomes[i].completion = backend.complete(requests[i].payload);
    } catch (const std::exception& e) {
      outcomes[i].error = e.what();
    }
  };
  const std::size_t width = std::max<std::size_t>(1, options.concurrency);
  for (std::size_t start = 0; start < requests.size(); start += width) {
    std::vector<std::future<void>> batch;
    for (std::size_t i = start; i < std::min(requests.size(), start + width); ++i) {
      batch.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async, run, i));
    }
    for (auto& f : batch) f.get();
  }

  if (!options.transcript_path.empty()) {
    std::ostringstream transcript;
    for (std::size_t i = 0; i < requests.size(); ++i) {
      nlohmann::json line{{"subject", std::string(to_string(requests[i].subject))},
                          {"grade", requests[i].grade},
                          {"payload_fingerprint", requests[i].payload.fingerprint()},
                          {"request", requests[i].payload.to_json()}};
      if (outcomes[i].completion) {
        line["response"] = outcomes[i].completion->text;
        line["transcript_ref"] = outcomes[i].completion->transcript_ref;
      } else {
        line["error"] = outcomes[i].error;
      }
      transcript << line.dump() << "\n";
    }
    write_text_atomic(options.transcript_path, transcript.str());
  }

  ProblemBank bank;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& req = requests[i];
    const auto where = std::string(to_string(req.subject)) + " grade " + std::to_string(req.grade);
    if (!outcomes[i].completion) throw CorpusError("generation failed for " + where + ": " + outcomes[i].error);
    try {
      auto problems = parse_generated_problems(outcomes[i].completion->text, req.subject, req.grade);
      bank.problems.insert(bank.problems.end(), problems.begin(), problems.end());
    } catch (const CorpusError& e) {
      throw CorpusError(std::string(e.what()) + " (transcript " + outcomes[i].completion->transcript_ref + ")");
    }
  }
  validate_bank(bank);
  return bank;
}

ProblemBank take_partial(const ProblemBank& full, std::size_t n) {
  std::map<std::pair<Subject, int>, std::vector<const Problem*>> groups;
  for (const auto& p : full.problems) groups[{p.subject, p.grade}].push_back(&p);
  ProblemBank out;
  out.partial = true;
  for (std::size_t depth = 0; out.problems.size() < n; ++depth) {
    bool any = false;
    for (auto& [key, list] : groups) {
      if (depth < list.size() && out.problems.size() < n) {
        out.problems.push_back(*list[depth]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

fs::path ExpressionEntry::frame_image(std::uint64_t frame_index) const {
  return frames_dir ? *frames_dir / (std::to_string(frame_index) + ".png") : fs::path();
}

fs::path ExpressionEntry::peak_image_path() const {
  if (peak_image) return *peak_image;
  return frame_image(peak_index);
}

ExpressionEntry make_expression_entry(std::string video_id, std::string participant_id, au::AuTrace trace) {
  ExpressionEntry e;
  e.video_id = std::move(video_id);
  e.participant_id = std::move(participant_id);
  if (trace.video_id.empty()) trace.video_id = e.video_id;
  if (trace.participant_id.empty()) trace.participant_id = e.participant_id;
  e.trace = std::move(trace);
  e.pooled = au::max_pool(e.trace);
  e.description = au::describe_expression(e.pooled);
  e.peak_index = au::peak_frame(e.trace);
  return e;
}

std::shared_ptr<const ExpressionEntry> ParticipantEntry::find(std::string_view video_id) const {
  for (const auto& e : expressions) {
    if (e->video_id == video_id) return e;
  }
  return nullptr;
}

ExpressionManifest load_expression_manifest(const fs::path& path) {
  auto doc = read_json_file(path, "expression manifest");
  ExpressionManifest manifest;
  manifest.root = path.parent_path();
  if (!doc.is_object() || !doc.contains("participants") || !doc["participants"].is_array()) {
    throw CorpusError("malformed manifest " + path.string() + ": missing participants array");
  }
  const bool partial = doc.value("partial", false);
  std::set<std::string> video_ids;
  std::set<std::string> participant_ids;
  for (const auto& jp : doc["participants"]) {
    ParticipantEntry participant;
    try {
      participant.participant_id = jp.at("participant_id").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw CorpusError("manifest participant without participant_id");
    }
    if (!participant_ids.insert(participant.participant_id).second) {
      throw CorpusError("duplicate participant id " + participant.participant_id);
    }
    for (const auto& je : jp.value("expressions", nlohmann::json::array())) {
      std::string video_id;
      std::string trace_rel;
      try {
        video_id = je.at("video_id").get<std::string>();
        trace_rel = je.at("trace").get<std::string>();
      } catch (const nlohmann::json::exception&) {
        throw CorpusError("manifest entry for " + participant.participant_id + " lacks video_id or trace");
      }
      if (!video_ids.insert(video_id).second) throw CorpusError("duplicate video id " + video_id);
      auto trace_path = manifest.root / trace_rel;
      if (!fs::is_regular_file(trace_path)) {
        throw CorpusError("missing AU trace file " + trace_path.string() + " for video " + video_id);
      }
      au::AuTrace trace;
      try {
        trace = au::load_au_trace(trace_path.string());
      } catch (const std::exception& e) {
        throw CorpusError("invalid AU trace " + trace_path.string() + ": " + e.what());
      }
      for (const auto& w : trace.warnings) manifest.warnings.push_back(trace_path.string() + ": " + w);
      if (!trace.participant_id.empty() && trace.participant_id != participant.participant_id) {
        manifest.warnings.push_back(trace_path.string() + ": participant_id " + trace.participant_id +
                                    " differs from manifest " + participant.participant_id);
      }
      trace.participant_id = participant.participant_id;
      trace.video_id = video_id;

      auto entry = make_expression_entry(video_id, participant.participant_id, std::move(trace));
      entry.trace_path = trace_path;
      if (je.contains("frames_dir")) entry.frames_dir = manifest.root / je["frames_dir"].get<std::string>();
      if (je.contains("peak_image")) entry.peak_image = manifest.root / je["peak_image"].get<std::string>();

      if (entry.frames_dir) {
        entry.frame_images_ok = all_frame_images_present(entry);
        if (!entry.frame_images_ok) {
          manifest.warnings.push_back("video " + video_id + ": frame images missing under " +
                                      entry.frames_dir->string() + "; image variants disabled");
        }
      }
      if (entry.peak_image) {
        entry.peak_image_ok = fs::is_regular_file(*entry.peak_image);
        if (!entry.peak_image_ok) {
          manifest.warnings.push_back("video " + video_id + ": peak image missing " + entry.peak_image->string() +
                                      "; image variants disabled");
        }
      } else {
        entry.peak_image_ok = entry.frame_images_ok;
      }
      participant.expressions.push_back(std::make_shared<const ExpressionEntry>(std::move(entry)));
    }
    const auto n = participant.expressions.size();
    if (n > kMaxEntriesPerParticipant || (n < kMinEntriesPerParticipant && !partial)) {
      manifest.warnings.push_back("participant " + participant.participant_id + " has " + std::to_string(n) +
                                  " expression entries (expected 20-25)");
    }
    manifest.participants.push_back(std::move(participant));
  }
  return manifest;
}

const ParticipantEntry& assign_participant(const ExpressionManifest& manifest, std::uint64_t conversation_seed) {
  if (manifest.participants.empty()) throw CorpusError("expression manifest has no participants");
  return manifest.participants[seed::uniform_index(conversation_seed, manifest.participants.size())];
}

}  // namespace facetutor::corpus
