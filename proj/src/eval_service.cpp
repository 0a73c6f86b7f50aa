#include "facetutor/eval_service.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "facetutor/seed.hpp"

namespace facetutor::eval {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kInstructions =
    "You will see a short tutoring conversation between a tutor and a high-school student, the student's latest "
    "message and a picture of the student's facial expression with a written description of it.\n"
    "Four candidate tutor replies are shown under the labels A, B, C and D. The labels are shuffled for every item.\n"
    "For each question, arrange the four labels from best to worst and set the relation between neighbours to '>' "
    "(better) or '=' (equally good). A complete answer looks like D>B=A>C.\n"
    "If you cannot judge a question for this item, choose abstain for that question.\n"
    "The third question only appears when the student said something in the latest turn.\n";

Response error(int status, std::string message) { return {status, {{"error", std::move(message)}}, {}, "application/json"}; }

bool valid_rater_id(const std::string& id) {
  static const std::regex re("[A-Za-z0-9_.-]{1,64}");
  return std::regex_match(id, re);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  if (r.bytes) {
    res.set_content(*r.bytes, r.content_type);
  } else {
    res.set_content(r.body.dump(), "application/json");
  }
}

}  // namespace

std::map<char, prompt::TutorVariant> blind_labels(std::uint64_t label_seed, const std::string& rater_id,
                                                  const judge::ItemKey& item) {
  auto variants = prompt::kAllVariants;
  seed::SplitMix rng(seed::mix(seed::mix(label_seed, rater_id), judge::to_string(item)));
  for (std::size_t i = variants.size(); i > 1; --i) std::swap(variants[i - 1], variants[rng.below(i)]);
  std::map<char, prompt::TutorVariant> out;
  for (std::size_t i = 0; i < kBlindLabels.size(); ++i) out[kBlindLabels[i]] = variants[i];
  return out;
}

std::string_view default_instructions() { return kInstructions; }

EvalService::EvalService(std::vector<judge::HumanEvalItem> assignment, std::vector<sim::ConversationRecord> records,
                         fs::path ratings_path, ServiceOptions options, const corpus::ExpressionManifest* manifest)
    : records_(std::move(records)),
      ratings_path_(std::move(ratings_path)),
      options_(std::move(options)),
      manifest_(manifest) {
  if (options_.instructions.empty()) options_.instructions = std::string(kInstructions);
  std::map<std::pair<std::string, std::string>, const sim::ConversationRecord*> index;
  for (const auto& r : records_) index[{r.backbone, r.conversation_id}] = &r;
  for (const auto& a : assignment) {
    auto it = index.find({a.item.backbone, a.item.conversation_id});
    if (it == index.end()) throw std::runtime_error("assignment item not found in runs: " + judge::to_string(a.item));
    const auto& turn = it->second->turn(a.item.turn_index);
    ItemState s{a, it->second, !turn.student.silent()};
    by_token_[item_token(a.item)] = items_.size();
    items_.push_back(std::move(s));
  }
  if (fs::exists(ratings_path_)) {
    std::ifstream in(ratings_path_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto row = nlohmann::json::parse(line);
      judge::ItemKey key{row.at("backbone").get<std::string>(), row.at("conversation_id").get<std::string>(),
                         row.at("turn_index").get<int>()};
      submitted_[row.at("rater_id").get<std::string>()][item_token(key)] = row;
    }
  }
}

std::string EvalService::item_token(const judge::ItemKey& k) const {
  return k.backbone + "~" + k.conversation_id + "~" + std::to_string(k.turn_index);
}

bool EvalService::authorized(const std::string& header_value) const {
  if (!options_.auth_token) return true;
  return header_value == "Bearer " + *options_.auth_token;
}

std::optional<Response> EvalService::check_rater(const std::string& rater_id) const {
  if (!valid_rater_id(rater_id)) return error(404, "unknown rater id: " + rater_id);
  if (!options_.raters.empty() &&
      std::find(options_.raters.begin(), options_.raters.end(), rater_id) == options_.raters.end()) {
    return error(404, "unknown rater id: " + rater_id);
  }
  return std::nullopt;
}

const corpus::ExpressionEntry* EvalService::expression_for(const ItemState& s, int turn_index) const {
  if (!manifest_) return nullptr;
  const auto& turn = s.record->turn(turn_index);
  for (const auto& p : manifest_->participants) {
    if (p.participant_id != s.record->participant_id) continue;
    auto e = p.find(turn.student.video_id);
    return e ? e.get() : nullptr;
  }
  return nullptr;
}

nlohmann::json EvalService::item_bundle(const ItemState& s, const std::string& rater_id, std::size_t position) const {
  const auto token = item_token(s.item.item);
  const auto& rec = *s.record;
  const auto& turn = rec.turn(s.item.item.turn_index);
  nlohmann::json b{{"item", token},
                   {"position", position + 1},
                   {"total", items_.size()},
                   {"problem",
                    {{"subject", std::string(corpus::to_string(rec.problem.subject))},
                     {"grade", rec.problem.grade},
                     {"topic", rec.problem.topic},
                     {"question", rec.problem.question}}}};
  auto& history = b["history"] = nlohmann::json::array();
  for (const auto& t : rec.turns) {
    if (t.turn_index >= s.item.item.turn_index) break;
    history.push_back({{"turn", t.turn_index},
                       {"student_text", t.student.text},
                       {"silent", t.student.silent()},
                       {"expression", t.student.description},
                       {"tutor", t.canonical_response}});
  }
  b["student"] = {{"turn", turn.turn_index}, {"text", turn.student.text}, {"silent", turn.student.silent()}};
  nlohmann::json expression{{"description", turn.student.description}, {"image", nullptr}};
  if (const auto* e = expression_for(s, turn.turn_index)) {
    if (e->peak_image_ok) expression["image"] = "/api/media/" + token + "/peak";
    if (e->frame_images_ok) {
      auto& frames = expression["frames"] = nlohmann::json::array();
      for (const auto& f : e->trace.frames) frames.push_back("/api/media/" + token + "/" + std::to_string(f.index));
    }
  }
  b["expression"] = std::move(expression);
  auto& responses = b["responses"] = nlohmann::json::array();
  for (const auto& [label, variant] : blind_labels(options_.label_seed, rater_id, s.item.item)) {
    responses.push_back({{"label", std::string(1, label)}, {"text", turn.responses.at(variant)}});
  }
  auto& questions = b["questions"] = nlohmann::json::array();
  for (auto q : prompt::kAllQuestions) {
    if (q == prompt::Question::Q3 && !s.speaking) continue;
    questions.push_back({{"id", std::string(prompt::to_string(q))}, {"text", std::string(prompt::question_text(q))}});
  }
  return b;
}

Response EvalService::next_item(const std::string& rater_id) {
  if (auto err = check_rater(rater_id)) return *err;
  std::lock_guard lock(mutex_);
  const auto& done = submitted_[rater_id];
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!done.count(item_token(items_[i].item.item))) {
      auto b = item_bundle(items_[i], rater_id, i);
      b["rated"] = done.size();
      return {200, std::move(b), {}, "application/json"};
    }
  }
  return {200, {{"done", true}, {"rated", done.size()}, {"total", items_.size()}}, {}, "application/json"};
}

Response EvalService::submit(const std::string& rater_id, const nlohmann::json& body) {
  if (auto err = check_rater(rater_id)) return *err;
  if (!body.is_object() || !body.contains("item") || !body["item"].is_string()) {
    return error(400, "rating must name an item");
  }
  const auto token = body["item"].get<std::string>();
  auto it = by_token_.find(token);
  if (it == by_token_.end()) return error(404, "unknown item: " + token);
  const auto& s = items_[it->second];
  if (!body.contains("questions") || !body["questions"].is_object()) return error(400, "rating has no questions");
  const auto& answers = body["questions"];

  const auto labels = blind_labels(options_.label_seed, rater_id, s.item.item);
  nlohmann::json normalized = nlohmann::json::object();
  for (auto& [qname, answer] : answers.items()) {
    auto q = prompt::parse_question(qname);
    if (!q) return {400, {{"error", "unknown question " + qname}, {"question", qname}}, {}, "application/json"};
    if (*q == prompt::Question::Q3 && !s.speaking) {
      return {400, {{"error", "Q3 is not asked on a silent turn"}, {"question", qname}}, {}, "application/json"};
    }
  }
  for (auto q : prompt::kAllQuestions) {
    if (q == prompt::Question::Q3 && !s.speaking) continue;
    const std::string qname(prompt::to_string(q));
    if (!answers.contains(qname) || !answers[qname].is_object()) {
      return {400, {{"error", "incomplete rating: " + qname + " missing"}, {"question", qname}}, {}, "application/json"};
    }
    const auto& a = answers[qname];
    if (a.value("abstain", false)) {
      normalized[qname] = {{"abstain", true}};
      continue;
    }
    if (!a.contains("chain") || !a["chain"].is_string()) {
      return {400, {{"error", qname + " needs a chain or abstain"}, {"question", qname}}, {}, "application/json"};
    }
    try {
      auto ranking = judge::parse_ranking(a["chain"].get<std::string>(), labels);
      (void)ranking;
    } catch (const judge::JudgeError& e) {
      return {400, {{"error", e.what()}, {"question", qname}}, {}, "application/json"};
    }
    std::string chain;
    for (char c : a["chain"].get<std::string>()) {
      if (c != ' ') chain += c;
    }
    normalized[qname] = {{"chain", chain}};
  }

  nlohmann::json label_map = nlohmann::json::object();
  for (const auto& [label, variant] : labels) label_map[std::string(1, label)] = std::string(prompt::to_string(variant));
  nlohmann::json row{{"rater_id", rater_id},
                     {"backbone", s.item.item.backbone},
                     {"conversation_id", s.item.item.conversation_id},
                     {"turn_index", s.item.item.turn_index},
                     {"label_map", label_map},
                     {"questions", normalized}};

  std::lock_guard lock(mutex_);
  auto& done = submitted_[rater_id];
  if (done.count(token)) return error(409, "duplicate rating for item " + token);
  if (ratings_path_.has_parent_path()) fs::create_directories(ratings_path_.parent_path());
  std::ofstream out(ratings_path_, std::ios::app | std::ios::binary);
  if (!out) return error(500, "cannot write ratings file");
  out << row.dump() << '\n';
  out.flush();
  done[token] = row;
  return {200, {{"ok", true}, {"rated", done.size()}, {"total", items_.size()}}, {}, "application/json"};
}

Response EvalService::ratings(const std::string& rater_id) {
  if (auto err = check_rater(rater_id)) return *err;
  std::lock_guard lock(mutex_);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : items_) {
    auto token = item_token(s.item.item);
    auto& done = submitted_[rater_id];
    auto it = done.find(token);
    if (it != done.end()) list.push_back({{"item", token}, {"questions", it->second.at("questions")}});
  }
  return {200, {{"ratings", list}}, {}, "application/json"};
}

Response EvalService::progress() {
  std::lock_guard lock(mutex_);
  nlohmann::json raters = nlohmann::json::object();
  for (const auto& r : options_.raters) raters[r] = 0;
  for (const auto& [r, done] : submitted_) raters[r] = done.size();
  return {200, {{"total", items_.size()}, {"raters", raters}}, {}, "application/json"};
}

Response EvalService::instructions() const {
  return {200, {{"text", options_.instructions}}, {}, "application/json"};
}

Response EvalService::questions() const {
  nlohmann::json list = nlohmann::json::array();
  for (auto q : prompt::kAllQuestions) {
    list.push_back({{"id", std::string(prompt::to_string(q))},
                    {"text", std::string(prompt::question_text(q))},
                    {"speaking_only", q == prompt::Question::Q3}});
  }
  return {200, {{"questions", list}}, {}, "application/json"};
}

Response EvalService::media(const std::string& item_token, const std::string& frame) {
  auto it = by_token_.find(item_token);
  if (it == by_token_.end()) return error(404, "unknown item: " + item_token);
  const auto& s = items_[it->second];
  const auto* e = expression_for(s, s.item.item.turn_index);
  if (!e) return error(404, "no media for item " + item_token);
  fs::path path;
  if (frame == "peak") {
    if (!e->peak_image_ok) return error(404, "no peak image for item " + item_token);
    path = e->peak_image_path();
  } else {
    if (!e->frame_images_ok || frame.empty() || frame.find_first_not_of("0123456789") != std::string::npos) {
      return error(404, "no frame " + frame + " for item " + item_token);
    }
    path = e->frame_image(std::stoull(frame));
  }
  if (!fs::exists(path)) return error(404, "media file missing");
  return {200, {}, read_file(path), "image/png"};
}

void mount(httplib::Server& server, EvalService& service) {
  auto guarded = [&service](auto handler) {
    return [&service, handler](const httplib::Request& req, httplib::Response& res) {
      if (!service.authorized(req.get_header_value("Authorization"))) {
        reply(res, error(401, "missing or wrong service token"));
        return;
      }
      reply(res, handler(req));
    };
  };
  server.Get(R"(/api/rater/([^/]+)/next)",
             guarded([&service](const httplib::Request& req) { return service.next_item(req.matches[1]); }));
  server.Get(R"(/api/rater/([^/]+)/ratings)",
             guarded([&service](const httplib::Request& req) { return service.ratings(req.matches[1]); }));
  server.Post(R"(/api/rater/([^/]+)/rating)", guarded([&service](const httplib::Request& req) {
                nlohmann::json body;
                try {
                  body = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::parse_error&) {
                  return error(400, "rating body is not JSON");
                }
                return service.submit(req.matches[1], body);
              }));
  server.Get("/api/progress", guarded([&service](const httplib::Request&) { return service.progress(); }));
  server.Get("/api/instructions", guarded([&service](const httplib::Request&) { return service.instructions(); }));
  server.Get("/api/questions", guarded([&service](const httplib::Request&) { return service.questions(); }));
  server.Get(R"(/api/media/([^/]+)/([^/]+))", guarded([&service](const httplib::Request& req) {
               return service.media(req.matches[1], req.matches[2]);
             }));
}

StubServer::StubServer(StubOptions options)
    : options_(std::move(options)),
      server_(std::make_unique<httplib::Server>()),
      mock_(std::make_unique<llm::MockTransport>(options_.seed)) {
  failures_left_ = options_.fail_count;
  install();
}

StubServer::~StubServer() { stop(); }

void StubServer::install() {
  server_->Post(options_.prefix + "/complete", [this](const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    if (options_.required_key && req.get_header_value("Authorization") != "Bearer " + *options_.required_key) {
      res.status = 401;
      res.set_content(R"({"error":"unauthorized"})", "application/json");
      return;
    }
    if (failures_left_.fetch_sub(1) > 0) {
      res.status = options_.fail_status;
      res.set_content(R"({"error":"injected failure"})", "application/json");
      return;
    }
    nlohmann::json request;
    try {
      request = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      res.status = 400;
      res.set_content(R"({"error":"malformed request"})", "application/json");
      return;
    }
    auto payload = llm::payload_from_unified(request);
    llm::BackendHandle handle = llm::mock_backend(options_.seed);
    handle.model = request.value("model", handle.model);
    auto raw = mock_->send(handle, payload);
    nlohmann::json body{{"text", raw.text},
                        {"usage", {{"input_tokens", raw.usage.input_tokens}, {"output_tokens", raw.usage.output_tokens}}}};
    res.set_content(body.dump(), "application/json");
  });
}

int StubServer::start() {
  port_ = server_->bind_to_any_port("127.0.0.1");
  if (port_ <= 0) throw std::runtime_error("stub server could not bind a port");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

bool StubServer::listen(const std::string& host, int port) {
  port_ = port;
  return server_->listen(host, port);
}

void StubServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string StubServer::endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

}  // namespace facetutor::eval
