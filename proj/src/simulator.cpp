#include "facetutor/sim.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "facetutor/seed.hpp"

namespace facetutor::sim {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kReprompt =
    "Your previous reply could not be used ({{error}}). Respond with only a JSON object with the fields "
    "\"video_id\" (one id from the catalog) and \"text\".";

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << v;
  return out.str();
}

nlohmann::json pooled_json(const au::PooledAus& pooled) {
  nlohmann::json j = nlohmann::json::object();
  for (auto id : au::kAllAus) j[std::string(au::to_string(id))] = pooled[id];
  return j;
}

au::PooledAus pooled_from_json(const nlohmann::json& j) {
  au::PooledAus pooled;
  for (auto id : au::kAllAus) pooled[id] = j.value(std::string(au::to_string(id)), 0.0);
  return pooled;
}

nlohmann::json usage_json(const llm::Usage& u) {
  return {{"input_tokens", u.input_tokens}, {"output_tokens", u.output_tokens}};
}

llm::Usage usage_from_json(const nlohmann::json& j) {
  return {j.value("input_tokens", std::int64_t{0}), j.value("output_tokens", std::int64_t{0})};
}

void write_json_atomic(const fs::path& path, const nlohmann::json& doc) {
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

prompt::StudentTurn student_turn(const TurnRecord& t, const corpus::ParticipantEntry* participant) {
  prompt::StudentTurn s;
  s.video_id = t.student.video_id;
  s.description = t.student.description;
  s.text = t.student.text;
  s.frame_seed = t.frame_seed;
  if (participant) s.expression = participant->find(t.student.video_id);
  return s;
}

}  // namespace

bool StudentAction::silent() const { return text.find_first_not_of(" \t\r\n") == std::string::npos; }

StudentAction parse_student_action(std::string_view model_text, const corpus::ParticipantEntry& catalog) {
  auto open = model_text.find('{');
  auto close = model_text.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    throw StudentParseError("student reply is not a JSON object");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(model_text.substr(open, close - open + 1));
  } catch (const nlohmann::json::parse_error&) {
    throw StudentParseError("student reply is not valid JSON");
  }
  if (!doc.is_object() || !doc.contains("video_id") || !doc["video_id"].is_string()) {
    throw StudentParseError("student reply lacks a string video_id");
  }
  auto video_id = doc["video_id"].get<std::string>();
  auto entry = catalog.find(video_id);
  if (!entry) throw StudentParseError("video_id '" + video_id + "' is not in the catalog");

  StudentAction action;
  action.video_id = video_id;
  action.description = entry->description.text;
  action.pooled = entry->pooled;
  action.dominant_au = au::dominant_au(entry->pooled);
  if (doc.contains("text") && doc["text"].is_string()) action.text = doc["text"].get<std::string>();
  auto first = action.text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) {
    action.text.clear();
  } else {
    action.text = action.text.substr(first, action.text.find_last_not_of(" \t\r\n") - first + 1);
  }
  if (action.text.size() > kMaxStudentTextChars) {
    throw StudentParseError("student text exceeds " + std::to_string(kMaxStudentTextChars) + " characters");
  }
  return action;
}

bool is_single_sentence(std::string_view text) {
  auto is_terminal = [](char c) { return c == '.' || c == '!' || c == '?'; };
  int groups = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_terminal(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && (is_terminal(text[j]) || text[j] == '"' || text[j] == '\'' || text[j] == ')')) ++j;
    if (j == text.size() || text[j] == ' ' || text[j] == '\n' || text[j] == '\t') ++groups;
    i = j;
  }
  return groups <= 1;
}

std::string ConversationRecord::status_text() const {
  switch (status) {
    case ConversationStatus::Running: return "running";
    case ConversationStatus::Complete: return "complete";
    case ConversationStatus::Failed: return "failed-at-turn-" + std::to_string(failed_turn);
  }
  return "";
}

const TurnRecord& ConversationRecord::turn(int turn_index) const {
  for (const auto& t : turns) {
    if (t.turn_index == turn_index) return t;
  }
  throw std::out_of_range("conversation " + conversation_id + " has no turn " + std::to_string(turn_index));
}

nlohmann::json to_json(const ConversationRecord& r) {
  nlohmann::json j{{"conversation_id", r.conversation_id},
                   {"problem", corpus::to_json(r.problem)},
                   {"backbone", r.backbone},
                   {"participant_id", r.participant_id},
                   {"seeds", {{"conversation", r.conversation_seed}}},
                   {"status", r.status_text()},
                   {"turns", nlohmann::json::array()}};
  if (!r.error.empty()) j["error"] = r.error;
  for (const auto& t : r.turns) {
    nlohmann::json jt{{"turn_index", t.turn_index},
                      {"student",
                       {{"video_id", t.student.video_id},
                        {"expression_description", t.student.description},
                        {"pooled_aus", pooled_json(t.student.pooled)},
                        {"dominant_au", std::string(au::to_string(t.student.dominant_au))},
                        {"text", t.student.text}}},
                      {"frame_seed", t.frame_seed},
                      {"random_frame_index", t.random_frame_index},
                      {"peak_frame_index", t.peak_frame_index},
                      {"canonical_response", t.canonical_response},
                      {"student_usage", usage_json(t.student_usage)},
                      {"warnings", t.warnings}};
    for (const auto& [v, text] : t.responses) jt["responses"][std::string(prompt::to_string(v))] = text;
    for (const auto& [v, u] : t.usage) jt["usage"][std::string(prompt::to_string(v))] = usage_json(u);
    for (const auto& [v, fp] : t.context_fingerprints) {
      jt["context_fingerprints"][std::string(prompt::to_string(v))] = fp;
    }
    j["turns"].push_back(std::move(jt));
  }
  return j;
}

ConversationRecord record_from_json(const nlohmann::json& j) {
  ConversationRecord r;
  r.conversation_id = j.at("conversation_id").get<std::string>();
  r.problem = corpus::problem_from_json(j.at("problem"));
  r.backbone = j.at("backbone").get<std::string>();
  r.participant_id = j.value("participant_id", std::string());
  r.conversation_seed = j.at("seeds").value("conversation", std::uint64_t{0});
  r.error = j.value("error", std::string());
  auto status = j.value("status", std::string("running"));
  if (status == "complete") {
    r.status = ConversationStatus::Complete;
  } else if (status.rfind("failed-at-turn-", 0) == 0) {
    r.status = ConversationStatus::Failed;
    r.failed_turn = std::stoi(status.substr(15));
  }
  for (const auto& jt : j.at("turns")) {
    TurnRecord t;
    t.turn_index = jt.at("turn_index").get<int>();
    const auto& js = jt.at("student");
    t.student.video_id = js.at("video_id").get<std::string>();
    t.student.description = js.value("expression_description", std::string());
    t.student.pooled = pooled_from_json(js.value("pooled_aus", nlohmann::json::object()));
    t.student.dominant_au = au::parse_au_id(js.value("dominant_au", std::string("AU1"))).value_or(au::AuId::AU1);
    t.student.text = js.value("text", std::string());
    t.frame_seed = jt.value("frame_seed", std::uint64_t{0});
    t.random_frame_index = jt.value("random_frame_index", std::uint64_t{0});
    t.peak_frame_index = jt.value("peak_frame_index", std::uint64_t{0});
    t.canonical_response = jt.value("canonical_response", std::string());
    t.student_usage = usage_from_json(jt.value("student_usage", nlohmann::json::object()));
    t.warnings = jt.value("warnings", std::vector<std::string>{});
    const auto responses = jt.value("responses", nlohmann::json::object());
    for (auto& [k, v] : responses.items()) {
      if (auto variant = prompt::parse_variant(k)) t.responses[*variant] = v.get<std::string>();
    }
    const auto usage = jt.value("usage", nlohmann::json::object());
    for (auto& [k, v] : usage.items()) {
      if (auto variant = prompt::parse_variant(k)) t.usage[*variant] = usage_from_json(v);
    }
    const auto fingerprints = jt.value("context_fingerprints", nlohmann::json::object());
    for (auto& [k, v] : fingerprints.items()) {
      if (auto variant = prompt::parse_variant(k)) t.context_fingerprints[*variant] = v.get<std::string>();
    }
    r.turns.push_back(std::move(t));
  }
  return r;
}

prompt::TurnContext turn_context(const ConversationRecord& record, int turn_index,
                                 const corpus::ParticipantEntry* participant) {
  prompt::TurnContext ctx;
  ctx.problem = record.problem;
  for (const auto& t : record.turns) {
    if (t.turn_index < turn_index) {
      ctx.history.push_back({student_turn(t, participant), t.canonical_response});
    } else if (t.turn_index == turn_index) {
      ctx.current = student_turn(t, participant);
      return ctx;
    }
  }
  throw std::out_of_range("conversation " + record.conversation_id + " has no turn " + std::to_string(turn_index));
}

RecordStore::RecordStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path RecordStore::path_for(const std::string& conversation_id) const { return dir_ / (conversation_id + ".json"); }

void RecordStore::save(const ConversationRecord& record) {
  std::lock_guard lock(mutex_);
  write_json_atomic(path_for(record.conversation_id), to_json(record));
}

std::optional<ConversationRecord> RecordStore::load(const std::string& conversation_id) const {
  std::lock_guard lock(mutex_);
  std::ifstream in(path_for(conversation_id), std::ios::binary);
  if (!in) return std::nullopt;
  return record_from_json(nlohmann::json::parse(in));
}

std::vector<ConversationRecord> RecordStore::load_all() const { return load_run(dir_); }

std::vector<ConversationRecord> load_run(const fs::path& run_dir) {
  std::vector<ConversationRecord> out;
  if (!fs::is_directory(run_dir)) throw std::runtime_error("run directory not found: " + run_dir.string());
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    auto doc = nlohmann::json::parse(in);
    if (!doc.is_object() || !doc.contains("conversation_id") || !doc.contains("turns")) continue;
    out.push_back(record_from_json(doc));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.conversation_id < b.conversation_id; });
  return out;
}

std::uint64_t conversation_seed(std::uint64_t campaign_seed, const std::string& problem_id) {
  return seed::mix(campaign_seed, problem_id);
}

std::uint64_t frame_seed(std::uint64_t conversation_seed, int turn_index) {
  return seed::mix(seed::mix(conversation_seed, "frame"), static_cast<std::uint64_t>(turn_index));
}

std::vector<std::shared_ptr<const corpus::ExpressionEntry>> usable_catalog(const corpus::ParticipantEntry& participant) {
  std::vector<std::shared_ptr<const corpus::ExpressionEntry>> out;
  for (const auto& e : participant.expressions) {
    if (e->image_ready()) out.push_back(e);
  }
  return out;
}

ConversationRecord run_conversation(const corpus::Problem& problem, const corpus::ParticipantEntry& participant,
                                    llm::Client& student, llm::Client& tutor, std::uint64_t conv_seed,
                                    const SimulationOptions& options, RecordStore* store) {
  ConversationRecord record;
  record.conversation_id = problem.id;
  record.problem = problem;
  record.backbone = tutor.handle().name;
  record.participant_id = participant.participant_id;
  record.conversation_seed = conv_seed;

  auto fail = [&](int turn, const std::string& why) {
    record.status = ConversationStatus::Failed;
    record.failed_turn = turn;
    record.error = why;
    if (store) store->save(record);
    return record;
  };

  corpus::ParticipantEntry offered{participant.participant_id, usable_catalog(participant)};
  if (offered.expressions.empty()) {
    return fail(1, "participant " + participant.participant_id + " has no expression usable by all variants");
  }
  std::vector<prompt::CatalogItem> catalog;
  for (const auto& e : offered.expressions) catalog.push_back({e->video_id, e->description.text});

  prompt::TurnContext ctx;
  ctx.problem = problem;
  for (int turn = 1; turn <= kTurnsPerConversation; ++turn) {
    TurnRecord tr;
    tr.turn_index = turn;
    tr.frame_seed = frame_seed(conv_seed, turn);
    try {
      // 1. student picks an expression (one reprompt on a malformed reply)
      auto student_payload = prompt::build_student_payload(ctx, catalog, options.templates);
      auto reply = student.complete(student_payload);
      tr.student_usage = reply.usage;
      try {
        tr.student = parse_student_action(reply.text, offered);
      } catch (const StudentParseError& e) {
        auto retry = student_payload;
        retry.messages.push_back({prompt::Role::Instruction, prompt::render(kReprompt, {{"error", e.what()}}),
                                  std::nullopt, ""});
        auto second = student.complete(retry);
        tr.student_usage.input_tokens += second.usage.input_tokens;
        tr.student_usage.output_tokens += second.usage.output_tokens;
        tr.student = parse_student_action(second.text, offered);
      }
      auto entry = offered.find(tr.student.video_id);
      ctx.current = {tr.student.video_id, tr.student.description, tr.student.text, tr.frame_seed, entry};
      tr.peak_frame_index = entry->peak_index;
      tr.random_frame_index =
          entry->trace.frames[prompt::random_frame_position(tr.frame_seed, entry->trace.frames.size())].index;

      // 2. canonical response; 3. branches from the identical pre-response history
      std::map<TutorVariant, prompt::PromptPayload> payloads;
      for (auto v : prompt::kAllVariants) {
        payloads[v] = prompt::build_tutor_payload(v, ctx, options.tutor, options.templates);
        tr.context_fingerprints[v] = hex64(seed::fnv1a64(prompt::shared_text(payloads[v])));
      }
      const auto& reference = tr.context_fingerprints[TutorVariant::LLM_AUM];
      for (const auto& [v, fp] : tr.context_fingerprints) {
        if (fp != reference) throw std::logic_error("variant payloads do not share the canonical history");
      }

      auto canonical = tutor.complete(payloads[TutorVariant::LLM_AUM]);
      tr.canonical_response = canonical.text;
      tr.responses[TutorVariant::LLM_AUM] = canonical.text;
      tr.usage[TutorVariant::LLM_AUM] = canonical.usage;

      constexpr std::array<TutorVariant, 3> kBranches = {TutorVariant::LLM, TutorVariant::MLLM,
                                                         TutorVariant::MLLM_AUM};
      std::vector<std::future<llm::Completion>> pending;
      for (auto v : kBranches) {
        pending.push_back(std::async(options.parallel_branches ? std::launch::async : std::launch::deferred,
                                     [&tutor, &payloads, v] { return tutor.complete(payloads.at(v)); }));
      }
      std::optional<std::string> branch_error;
      for (std::size_t i = 0; i < kBranches.size(); ++i) {
        try {
          auto c = pending[i].get();
          tr.responses[kBranches[i]] = c.text;
          tr.usage[kBranches[i]] = c.usage;
        } catch (const std::exception& e) {
          if (!branch_error) branch_error = e.what();
        }
      }
      if (branch_error) throw std::runtime_error(*branch_error);
    } catch (const std::exception& e) {
      return fail(turn, e.what());
    }

    for (const auto& [v, text] : tr.responses) {
      if (!is_single_sentence(text)) {
        tr.warnings.push_back(std::string(prompt::to_string(v)) + " response is not a single sentence");
      }
    }
    ctx.history.push_back({ctx.current, tr.canonical_response});
    record.turns.push_back(std::move(tr));
    if (turn == kTurnsPerConversation) record.status = ConversationStatus::Complete;
    if (store) store->save(record);
  }
  return record;
}

CampaignResult run_campaign(const corpus::ProblemBank& bank, const corpus::ExpressionManifest& manifest,
                            llm::Client& student, llm::Client& tutor, const fs::path& run_dir,
                            const CampaignOptions& options) {
  if (!tutor.handle().supports_images) {
    throw llm::CapabilityError("tutor backbone '" + tutor.handle().name +
                               "' must accept images to run the MLLM variants");
  }
  RecordStore store(run_dir);
  const auto checkpoint_path = run_dir / "checkpoint.json";
  std::set<std::string> completed;
  if (std::ifstream in(checkpoint_path, std::ios::binary); in) {
    auto doc = nlohmann::json::parse(in);
    for (const auto& id : doc.value("completed", nlohmann::json::array())) completed.insert(id.get<std::string>());
  }

  std::vector<const corpus::Problem*> todo;
  for (const auto& p : bank.problems) {
    if (!completed.count(p.id)) todo.push_back(&p);
  }
  spdlog::info("campaign {}: {} problems, {} already complete, {} to run", tutor.handle().name,
               bank.problems.size(), bank.problems.size() - todo.size(), todo.size());

  std::mutex checkpoint_mutex;
  std::map<std::string, std::string> failures;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      auto i = next.fetch_add(1);
      if (i >= todo.size()) return;
      const auto& problem = *todo[i];
      const auto cseed = conversation_seed(options.seed, problem.id);
      ConversationRecord rec;
      try {
        const auto& participant = corpus::assign_participant(manifest, cseed);
        rec = run_conversation(problem, participant, student, tutor, cseed, options.simulation, &store);
      } catch (const std::exception& e) {
        rec.conversation_id = problem.id;
        rec.problem = problem;
        rec.backbone = tutor.handle().name;
        rec.conversation_seed = cseed;
        rec.status = ConversationStatus::Failed;
        rec.failed_turn = 1;
        rec.error = e.what();
        store.save(rec);
      }
      std::lock_guard lock(checkpoint_mutex);
      if (rec.status == ConversationStatus::Complete) {
        completed.insert(problem.id);
        write_json_atomic(checkpoint_path, {{"completed", completed}});
      } else {
        failures[problem.id] = rec.status_text() + ": " + rec.error;
        spdlog::warn("conversation {} {}: {}", problem.id, rec.status_text(), rec.error);
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.concurrency, todo.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  write_json_atomic(checkpoint_path, {{"completed", completed}});

  nlohmann::json retry = nlohmann::json::array();
  for (const auto& [id, why] : failures) retry.push_back({{"conversation_id", id}, {"reason", why}});
  write_json_atomic(run_dir / "retry_manifest.json", {{"failed", retry}});

  CampaignResult result;
  result.newly_run = todo.size();
  std::set<std::string> wanted;
  for (const auto& p : bank.problems) wanted.insert(p.id);
  std::size_t turns = 0;
  std::size_t silent = 0;
  for (auto& rec : store.load_all()) {
    if (!wanted.count(rec.conversation_id)) continue;
    if (rec.status != ConversationStatus::Complete) result.failed_ids.push_back(rec.conversation_id);
    if (rec.status == ConversationStatus::Complete) {
      for (const auto& t : rec.turns) {
        ++turns;
        silent += t.student.silent() ? 1 : 0;
      }
    }
    result.records.push_back(std::move(rec));
  }
  result.silence_rate = turns == 0 ? 0.0 : static_cast<double>(silent) / static_cast<double>(turns);
  write_json_atomic(run_dir / "campaign_summary.json",
                    {{"backbone", tutor.handle().name},
                     {"conversations", result.records.size()},
                     {"complete", result.records.size() - result.failed_ids.size()},
                     {"failed", result.failed_ids},
                     {"turns", turns},
                     {"silent_turns", silent},
                     {"silence_rate", result.silence_rate}});
  return result;
}

}  // namespace facetutor::sim
