#include <doctest.h>

#include <httplib.h>

#include <set>
#include <thread>

#include "facetutor/eval_service.hpp"
#include "facetutor/synthetic.hpp"
#include "support.hpp"

using namespace facetutor;
using namespace facetutor::eval;
using support::TempDir;

namespace {

struct Setup {
  TempDir dir;
  std::vector<sim::ConversationRecord> records;
  std::vector<judge::HumanEvalItem> assignment;

  Setup() {
    for (int i = 0; i < 3; ++i) {
      records.push_back(support::make_record("mock", "biology-g9-t0" + std::to_string(i + 1) + "-q1", 40 + i, 0.0));
    }
    records[1].turns[2].student.text = "Is it the mitochondria?";
    assignment = {{{"mock", records[0].conversation_id, 2}, au::AuId::AU4},
                  {{"mock", records[1].conversation_id, 3}, au::AuId::AU12},
                  {{"mock", records[2].conversation_id, 5}, au::AuId::AU1}};
  }

  EvalService service(ServiceOptions opts = {}) { return EvalService(assignment, records, dir / "ratings.ndjson", opts); }
};

}  // namespace

TEST_CASE("blind labels are a deterministic permutation per rater and item") {
  const judge::ItemKey k{"mock", "c1", 2};
  auto a = blind_labels(3, "r1", k);
  CHECK(a == blind_labels(3, "r1", k));
  std::set<prompt::TutorVariant> vs;
  for (const auto& [c, v] : a) vs.insert(v);
  CHECK(a.size() == 4);
  CHECK(vs.size() == 4);
  std::set<std::string> layouts;
  for (int r = 0; r < 40; ++r) {
    std::string s;
    for (const auto& [c, v] : blind_labels(3, "r" + std::to_string(r), k)) s += prompt::to_string(v);
    layouts.insert(s);
  }
  CHECK(layouts.size() > 10);
}

TEST_CASE("next item bundles four blinded responses and hides Q3 on silent turns") {
  Setup s;
  auto svc = s.service();
  auto r = svc.next_item("alice");
  REQUIRE(r.status == 200);
  const auto& b = r.body;
  CHECK(b["position"] == 1);
  CHECK(b["total"] == 3);
  CHECK(b["history"].size() == 1);
  CHECK(b["responses"].size() == 4);
  CHECK(b["questions"].size() == 2);
  CHECK(b["expression"]["description"] == s.records[0].turn(2).student.description);
  auto labels = blind_labels(0, "alice", s.assignment[0].item);
  for (const auto& resp : b["responses"]) {
    const char c = resp["label"].get<std::string>()[0];
    CHECK(resp["text"] == s.records[0].turn(2).responses.at(labels.at(c)));
  }
  CHECK_FALSE(b.contains("label_map"));
  CHECK(svc.next_item("bad id!").status == 404);
}

TEST_CASE("submissions are validated, stored and imported") {
  Setup s;
  auto svc = s.service();
  auto first = svc.next_item("alice").body;
  const auto token = first["item"].get<std::string>();

  CHECK(svc.submit("alice", {{"item", "nope"}, {"questions", nlohmann::json::object()}}).status == 404);
  CHECK(svc.submit("alice", {{"item", token}, {"questions", {{"Q1", {{"chain", "A>B>C>D"}}}}}}).status == 400);
  auto q3 = svc.submit("alice", {{"item", token},
                                 {"questions",
                                  {{"Q1", {{"chain", "A>B>C>D"}}},
                                   {"Q2", {{"chain", "A>B>C>D"}}},
                                   {"Q3", {{"chain", "A>B>C>D"}}}}}});
  CHECK(q3.status == 400);
  auto short_chain =
      svc.submit("alice", {{"item", token}, {"questions", {{"Q1", {{"chain", "A>B"}}}, {"Q2", {{"abstain", true}}}}}});
  CHECK(short_chain.status == 400);
  CHECK(short_chain.body["question"] == "Q1");

  auto ok = svc.submit("alice", {{"item", token},
                                 {"questions", {{"Q1", {{"chain", "D > B = A > C"}}}, {"Q2", {{"chain", "A=B=C=D"}}}}}});
  CHECK(ok.status == 200);
  auto dup = svc.submit("alice", {{"item", token},
                                  {"questions", {{"Q1", {{"chain", "D>B=A>C"}}}, {"Q2", {{"chain", "A=B=C=D"}}}}}});
  CHECK(dup.status == 409);

  auto second = svc.next_item("alice").body;
  CHECK(second["position"] == 2);
  CHECK(second["questions"].size() == 3);
  auto sp = svc.submit("alice", {{"item", second["item"]},
                                 {"questions",
                                  {{"Q1", {{"chain", "B>A=C>D"}}},
                                   {"Q2", {{"chain", "B>A=C>D"}}},
                                   {"Q3", {{"abstain", true}}}}}});
  CHECK(sp.status == 200);

  const auto catalog = judge::item_catalog(s.records);
  auto imported = judge::import_human_ratings(svc.ratings_path(), &catalog);
  CHECK(imported.size() == 15);
  std::size_t q3_abstained = 0;
  for (const auto& j : imported) {
    CHECK(j.evaluator == "alice");
    if (j.question == prompt::Question::Q3) {
      CHECK(j.abstained);
      ++q3_abstained;
    }
  }
  CHECK(q3_abstained == 3);

  auto listed = svc.ratings("alice").body["ratings"];
  REQUIRE(listed.size() == 2);
  CHECK(listed[0]["questions"]["Q1"]["chain"] == "D>B=A>C");
  CHECK(svc.progress().body["raters"]["alice"] == 2);

  // A fresh service picks up where the file left off.
  auto reloaded = s.service();
  CHECK(reloaded.next_item("alice").body["position"] == 3);
  CHECK(reloaded.next_item("bob").body["position"] == 1);
}

TEST_CASE("finished raters get a completion marker") {
  Setup s;
  auto svc = s.service();
  for (int i = 0; i < 3; ++i) {
    auto b = svc.next_item("r").body;
    nlohmann::json q{{"Q1", {{"abstain", true}}}, {"Q2", {{"abstain", true}}}};
    if (b["questions"].size() == 3) q["Q3"] = {{"abstain", true}};
    REQUIRE(svc.submit("r", {{"item", b["item"]}, {"questions", q}}).status == 200);
  }
  auto done = svc.next_item("r");
  CHECK(done.body["done"] == true);
  CHECK(done.body["rated"] == 3);
}

TEST_CASE("restricted rater lists and question metadata") {
  Setup s;
  ServiceOptions opts;
  opts.raters = {"r1", "r2"};
  auto svc = s.service(opts);
  CHECK(svc.next_item("r1").status == 200);
  CHECK(svc.next_item("r3").status == 404);
  auto qs = svc.questions().body["questions"];
  REQUIRE(qs.size() == 3);
  CHECK(qs[2]["speaking_only"] == true);
  CHECK(qs[0]["text"] == std::string(prompt::question_text(prompt::Question::Q1)));
  CHECK_FALSE(svc.instructions().body["text"].get<std::string>().empty());
  CHECK(svc.progress().body["raters"].size() == 2);
}

TEST_CASE("media is served from the expression manifest") {
  Setup s;
  synthetic::CorpusSpec spec;
  spec.participants = 1;
  spec.frames_per_video = 6;
  auto manifest = corpus::load_expression_manifest(synthetic::write_corpus(s.dir / "corpus", spec));
  const auto& p = manifest.participants[0];
  for (auto& r : s.records) {
    r.participant_id = p.participant_id;
    for (auto& t : r.turns) t.student.video_id = p.expressions[static_cast<std::size_t>(t.turn_index)]->video_id;
  }
  EvalService svc(s.assignment, s.records, s.dir / "ratings.ndjson", {}, &manifest);
  auto b = svc.next_item("alice").body;
  const auto image = b["expression"]["image"].get<std::string>();
  CHECK(image == "/api/media/" + b["item"].get<std::string>() + "/peak");
  auto m = svc.media(b["item"], "peak");
  REQUIRE(m.status == 200);
  REQUIRE(m.bytes);
  CHECK(m.bytes->substr(1, 3) == "PNG");
  CHECK(m.content_type == "image/png");
  CHECK(svc.media(b["item"], "999").status == 404);
  CHECK(svc.media("missing", "peak").status == 404);
}

TEST_CASE("HTTP binding enforces the service token") {
  Setup s;
  ServiceOptions opts;
  opts.auth_token = "tok";
  auto svc = s.service(opts);
  httplib::Server server;
  mount(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto denied = cli.Get("/api/rater/alice/next");
  REQUIRE(denied);
  CHECK(denied->status == 401);

  httplib::Headers auth{{"Authorization", "Bearer tok"}};
  auto next = cli.Get("/api/rater/alice/next", auth);
  REQUIRE(next);
  CHECK(next->status == 200);
  auto bundle = nlohmann::json::parse(next->body);
  nlohmann::json body{{"item", bundle["item"]},
                      {"questions", {{"Q1", {{"chain", "D>B=A>C"}}}, {"Q2", {{"abstain", true}}}}}};
  auto posted = cli.Post("/api/rater/alice/rating", auth, body.dump(), "application/json");
  REQUIRE(posted);
  CHECK(posted->status == 200);
  auto again = cli.Post("/api/rater/alice/rating", auth, body.dump(), "application/json");
  REQUIRE(again);
  CHECK(again->status == 409);
  auto junk = cli.Post("/api/rater/alice/rating", auth, "{oops", "application/json");
  REQUIRE(junk);
  CHECK(junk->status == 400);
  auto progress = cli.Get("/api/progress", auth);
  REQUIRE(progress);
  CHECK(nlohmann::json::parse(progress->body)["raters"]["alice"] == 1);

  server.stop();
  th.join();
  CHECK(svc.authorized("Bearer tok"));
  CHECK_FALSE(svc.authorized("Bearer nope"));
  CHECK_FALSE(svc.authorized(""));
}
