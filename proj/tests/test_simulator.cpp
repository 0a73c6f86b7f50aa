#include <doctest.h>

#include <atomic>

#include "facetutor/corpus.hpp"
#include "facetutor/sim.hpp"
#include "facetutor/synthetic.hpp"
#include "support.hpp"

using namespace facetutor;
using namespace facetutor::sim;
using prompt::TutorVariant;
using support::TempDir;

namespace {

struct World {
  TempDir dir;
  corpus::ExpressionManifest manifest;
  corpus::ProblemBank bank;

  explicit World(std::size_t problems = 4) {
    synthetic::CorpusSpec spec;
    spec.participants = 2;
    spec.frames_per_video = 8;
    manifest = corpus::load_expression_manifest(synthetic::write_corpus(dir / "corpus", spec));
    auto gen = llm::make_client(llm::mock_backend(1), std::make_shared<llm::AuditLog>());
    bank = corpus::take_partial(corpus::generate_problem_bank(*gen, {1, {}, 1}), problems);
  }
};

std::shared_ptr<llm::Client> mock(std::uint64_t seed, llm::MockTransport::Responder r = nullptr,
                                  const std::string& name = "mock") {
  auto t = std::make_shared<llm::MockTransport>(seed, std::map<std::string, std::string>{}, std::move(r));
  return llm::make_client(llm::mock_backend(seed, name), std::make_shared<llm::AuditLog>(), t);
}

// Fails every tutor request whose payload matches `predicate`.
class FailingTransport : public llm::Transport {
 public:
  FailingTransport(std::uint64_t seed, std::function<bool(const llm::PromptPayload&)> predicate)
      : inner_(seed), predicate_(std::move(predicate)) {}
  llm::RawResponse send(const llm::BackendHandle& h, const llm::PromptPayload& p) override {
    if (predicate_(p)) throw llm::LlmError("injected failure");
    return inner_.send(h, p);
  }

 private:
  llm::MockTransport inner_;
  std::function<bool(const llm::PromptPayload&)> predicate_;
};

std::size_t tutor_turns_in(const llm::PromptPayload& p) {
  std::size_t n = 0;
  for (const auto& m : p.messages) n += m.role == prompt::Role::Tutor ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("each conversation has five turns with four responses") {
  World w;
  auto student = mock(2);
  auto tutor = mock(3);
  for (const auto& problem : w.bank.problems) {
    auto cseed = conversation_seed(5, problem.id);
    auto rec = run_conversation(problem, corpus::assign_participant(w.manifest, cseed), *student, *tutor, cseed);
    REQUIRE(rec.status == ConversationStatus::Complete);
    CHECK(rec.status_text() == "complete");
    REQUIRE(rec.turns.size() == 5);
    for (const auto& t : rec.turns) {
      CHECK(t.responses.size() == 4);
      CHECK(t.responses.at(TutorVariant::LLM_AUM) == t.canonical_response);
      const auto& fp = t.context_fingerprints.at(TutorVariant::LLM_AUM);
      for (const auto& [v, f] : t.context_fingerprints) CHECK(f == fp);
      const auto& llm_text = t.responses.at(TutorVariant::LLM);
      CHECK(llm_text.find(llm::kSawAuText) == std::string::npos);
      CHECK(llm_text.find(llm::kSawImage) == std::string::npos);
      CHECK(t.canonical_response.find(llm::kSawAuText) != std::string::npos);
      CHECK(t.canonical_response.find(llm::kSawImage) == std::string::npos);
      CHECK(t.responses.at(TutorVariant::MLLM).find(llm::kSawImage) != std::string::npos);
      CHECK(t.responses.at(TutorVariant::MLLM_AUM).find(llm::kSawImage) != std::string::npos);
      CHECK(t.responses.at(TutorVariant::MLLM_AUM).find(llm::kSawAuText) == std::string::npos);
      CHECK(t.usage.at(TutorVariant::MLLM_AUM).input_tokens > t.usage.at(TutorVariant::LLM).input_tokens);
      CHECK(t.warnings.empty());
    }
  }
  // 4 tutor calls and 1 student call per turn
  CHECK(tutor->calls() == w.bank.problems.size() * 20);
  CHECK(student->calls() == w.bank.problems.size() * 5);
}

TEST_CASE("turn contexts rebuild the canonical history") {
  World w(1);
  auto student = mock(2);
  auto tutor = mock(3);
  const auto& problem = w.bank.problems[0];
  const auto& participant = corpus::assign_participant(w.manifest, 9);
  auto rec = run_conversation(problem, participant, *student, *tutor, 9);
  REQUIRE(rec.status == ConversationStatus::Complete);
  auto ctx = turn_context(rec, 4, &participant);
  REQUIRE(ctx.history.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(ctx.history[static_cast<std::size_t>(i)].tutor_sentence == rec.turns[static_cast<std::size_t>(i)].canonical_response);
  }
  CHECK(ctx.current.video_id == rec.turn(4).student.video_id);
  REQUIRE(ctx.current.expression);
  // Rebuilding the payload reproduces the stored shared-text fingerprint.
  auto again = mock(3);
  auto p = prompt::build_tutor_payload(TutorVariant::LLM_AUM, ctx);
  CHECK(again->complete(p).text == rec.turn(4).canonical_response);
  CHECK_THROWS_AS(turn_context(rec, 6), std::out_of_range);
}

TEST_CASE("a failing turn keeps the completed turns") {
  World w(1);
  auto student = mock(2);
  auto transport = std::make_shared<FailingTransport>(3, [](const llm::PromptPayload& p) {
    return p.task == prompt::Task::Tutor && tutor_turns_in(p) == 2;
  });
  auto tutor = llm::make_client(llm::mock_backend(3), std::make_shared<llm::AuditLog>(), transport);
  RecordStore store(w.dir / "run");
  const auto& problem = w.bank.problems[0];
  auto rec = run_conversation(problem, w.manifest.participants[0], *student, *tutor, 1, {}, &store);
  CHECK(rec.status == ConversationStatus::Failed);
  CHECK(rec.failed_turn == 3);
  CHECK(rec.status_text() == "failed-at-turn-3");
  CHECK(rec.turns.size() == 2);
  auto stored = store.load(problem.id);
  REQUIRE(stored);
  CHECK(stored->turns.size() == 2);
  CHECK(stored->status == ConversationStatus::Failed);
}

TEST_CASE("campaigns resume from the checkpoint and match a clean run") {
  World w(4);
  const auto bad_question = w.bank.problems[1].question;
  auto failing = std::make_shared<FailingTransport>(3, [&](const llm::PromptPayload& p) {
    return p.task == prompt::Task::Tutor && p.all_text().find(bad_question) != std::string::npos;
  });
  CampaignOptions opts;
  opts.seed = 17;
  opts.concurrency = 2;

  auto student = mock(2);
  auto broken = llm::make_client(llm::mock_backend(3), std::make_shared<llm::AuditLog>(), failing);
  auto first = run_campaign(w.bank, w.manifest, *student, *broken, w.dir / "resume", opts);
  CHECK(first.newly_run == 4);
  REQUIRE(first.failed_ids.size() == 1);
  CHECK(first.failed_ids[0] == w.bank.problems[1].id);
  auto retry = nlohmann::json::parse(support::slurp(w.dir / "resume" / "retry_manifest.json"));
  CHECK(retry["failed"].size() == 1);

  auto tutor = mock(3);
  auto second = run_campaign(w.bank, w.manifest, *mock(2), *tutor, w.dir / "resume", opts);
  CHECK(second.newly_run == 1);
  CHECK(second.failed_ids.empty());
  CHECK(tutor->calls() == 20);

  auto third = run_campaign(w.bank, w.manifest, *mock(2), *mock(3), w.dir / "resume", opts);
  CHECK(third.newly_run == 0);

  auto clean = run_campaign(w.bank, w.manifest, *mock(2), *mock(3), w.dir / "clean", opts);
  REQUIRE(clean.records.size() == second.records.size());
  for (std::size_t i = 0; i < clean.records.size(); ++i) {
    CHECK(to_json(clean.records[i]) == to_json(second.records[i]));
  }
  auto reloaded = load_run(w.dir / "clean");
  REQUIRE(reloaded.size() == 4);
  CHECK(to_json(reloaded[0]) == to_json(clean.records[0]));
}

TEST_CASE("text-only tutors cannot run the campaign") {
  World w(1);
  auto h = llm::mock_backend(3);
  h.supports_images = false;
  auto tutor = llm::make_client(h, std::make_shared<llm::AuditLog>());
  CHECK_THROWS_AS(run_campaign(w.bank, w.manifest, *mock(2), *tutor, w.dir / "x", {}), llm::CapabilityError);
}

TEST_CASE("mock students are silent most of the time") {
  World w(40);
  CampaignOptions opts;
  opts.seed = 3;
  opts.concurrency = 4;
  auto result = run_campaign(w.bank, w.manifest, *mock(2), *mock(3), w.dir / "run", opts);
  CHECK(result.failed_ids.empty());
  CHECK(result.silence_rate > 0.65);
  CHECK(result.silence_rate < 0.92);
}

TEST_CASE("student replies are parsed against the catalog") {
  World w(1);
  const auto& p = w.manifest.participants[0];
  const auto id = p.expressions[0]->video_id;
  auto a = parse_student_action("Sure: {\"video_id\": \"" + id + "\", \"text\": \"  I think so.  \"} ok", p);
  CHECK(a.video_id == id);
  CHECK(a.text == "I think so.");
  CHECK(a.description == p.expressions[0]->description.text);
  CHECK_FALSE(a.silent());
  CHECK(parse_student_action("{\"video_id\": \"" + id + "\", \"text\": \"   \"}", p).silent());
  CHECK(parse_student_action("{\"video_id\": \"" + id + "\"}", p).silent());
  CHECK_THROWS_AS(parse_student_action("nothing here", p), StudentParseError);
  CHECK_THROWS_AS(parse_student_action("{\"video_id\": \"zzz\"}", p), StudentParseError);
  CHECK_THROWS_AS(parse_student_action("{\"text\": \"hi\"}", p), StudentParseError);
  CHECK_THROWS_AS(parse_student_action("{\"video_id\": \"" + id + "\", \"text\": \"" + std::string(300, 'x') + "\"}", p),
                  StudentParseError);
}

TEST_CASE("a malformed student reply gets one reprompt") {
  World w(1);
  const auto& participant = w.manifest.participants[0];
  const auto first_id = participant.expressions[0]->video_id;
  auto lenient = mock(2, [&](const llm::PromptPayload& p) -> std::optional<std::string> {
    if (p.task != prompt::Task::Student) return std::nullopt;
    if (p.messages.size() == 1) return "I refuse to answer in JSON";
    return nlohmann::json{{"video_id", first_id}, {"text", ""}}.dump();
  });
  auto rec = run_conversation(w.bank.problems[0], participant, *lenient, *mock(3), 4);
  CHECK(rec.status == ConversationStatus::Complete);
  CHECK(lenient->calls() == 10);
  CHECK(rec.turn(1).student.video_id == first_id);

  auto stubborn = mock(2, [](const llm::PromptPayload& p) -> std::optional<std::string> {
    if (p.task != prompt::Task::Student) return std::nullopt;
    return "still not JSON";
  });
  auto failed = run_conversation(w.bank.problems[0], participant, *stubborn, *mock(3), 4);
  CHECK(failed.status == ConversationStatus::Failed);
  CHECK(failed.failed_turn == 1);
  CHECK(stubborn->calls() == 2);
}

TEST_CASE("multi-sentence tutor replies are kept with a warning") {
  World w(1);
  auto chatty = mock(3, [](const llm::PromptPayload& p) -> std::optional<std::string> {
    if (p.task != prompt::Task::Tutor) return std::nullopt;
    return "First idea. Second idea.";
  });
  auto rec = run_conversation(w.bank.problems[0], w.manifest.participants[0], *mock(2), *chatty, 4);
  REQUIRE(rec.status == ConversationStatus::Complete);
  CHECK(rec.turn(1).warnings.size() == 4);
  CHECK(rec.turn(1).canonical_response == "First idea. Second idea.");
}

TEST_CASE("single sentence detection") {
  CHECK(is_single_sentence("Let us try again."));
  CHECK(is_single_sentence("What is 3.5 times 2?"));
  CHECK(is_single_sentence("No terminal punctuation"));
  CHECK(is_single_sentence("Really?!"));
  CHECK(is_single_sentence("He said \"stop.\""));
  CHECK_FALSE(is_single_sentence("One. Two."));
  CHECK_FALSE(is_single_sentence("Wait! Think again."));
}

TEST_CASE("records round-trip through JSON") {
  auto rec = support::make_record("mock", "physics-g10-t01-q1", 5, 0.5);
  rec.turns[0].warnings.push_back("w");
  rec.turns[1].usage[TutorVariant::MLLM] = {12, 3};
  auto back = record_from_json(to_json(rec));
  CHECK(to_json(back) == to_json(rec));
  CHECK(back.turn(2).usage.at(TutorVariant::MLLM) == llm::Usage{12, 3});
  CHECK(conversation_seed(1, "a") == conversation_seed(1, "a"));
  CHECK(conversation_seed(1, "a") != conversation_seed(1, "b"));
  CHECK(frame_seed(1, 1) != frame_seed(1, 2));
}
