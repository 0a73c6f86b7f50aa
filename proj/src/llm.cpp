#include "facetutor/llm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "httplib.h"

#include "facetutor/seed.hpp"

namespace facetutor::llm {

namespace {

std::string_view to_string(BackendKind k) { return k == BackendKind::Mock ? "mock" : "http"; }

std::string_view to_string(WireFormat f) {
  switch (f) {
    case WireFormat::Unified: return "unified";
    case WireFormat::OpenAI: return "openai";
    case WireFormat::Anthropic: return "anthropic";
  }
  return "";
}

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::int64_t approx_tokens(std::size_t chars) { return static_cast<std::int64_t>((chars + 3) / 4); }

// Which payload role the prompted agent speaks as (rendered "assistant").
std::optional<prompt::Role> self_role(prompt::Task task) {
  if (task == prompt::Task::Tutor) return prompt::Role::Tutor;
  if (task == prompt::Task::Student) return prompt::Role::Student;
  return std::nullopt;
}

struct VendorMessage {
  std::string role;  // "user" | "assistant"
  std::vector<const prompt::Message*> parts;
};

// Maps payload messages onto alternating user/assistant turns, merging runs.
std::vector<VendorMessage> vendor_turns(const PromptPayload& payload) {
  std::vector<VendorMessage> out;
  auto self = self_role(payload.task);
  for (const auto& m : payload.messages) {
    std::string role = (self && m.role == *self) ? "assistant" : "user";
    if (out.empty() || out.back().role != role) out.push_back({role, {}});
    out.back().parts.push_back(&m);
  }
  return out;
}

struct Endpoint {
  std::string base;    // scheme://host[:port]
  std::string prefix;  // path prefix without trailing slash
};

Endpoint split_endpoint(const std::string& endpoint, const std::string& default_prefix) {
  auto scheme = endpoint.find("://");
  auto path_start = endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  Endpoint e;
  if (path_start == std::string::npos) {
    e.base = endpoint;
    e.prefix = default_prefix;
  } else {
    e.base = endpoint.substr(0, path_start);
    e.prefix = endpoint.substr(path_start);
    while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  }
  return e;
}

constexpr std::array<std::string_view, 8> kTutorStems = {
    "Let's slow down and look at what the problem is actually asking",
    "Good, now try writing down the first quantity you already know",
    "That's a reasonable start, so let's check it against the definition together",
    "It looks like this step feels tricky, so let's break it into a smaller piece",
    "Take a moment to picture what happens in the simplest possible case",
    "You're on the right track, so let's connect this idea to the next step",
    "Let's revisit the key formula and see which parts we can fill in",
    "Nice effort, now tell me which part feels least clear so far"};

constexpr std::array<std::string_view, 6> kStudentReplies = {
    "I'm lost on this part.", "Can you explain that again?", "I think I get it now.",
    "Wait, why does that work?", "Is that the right formula?", "Okay, that makes sense."};

const std::map<std::string, std::array<std::string_view, 10>>& topic_names() {
  static const std::map<std::string, std::array<std::string_view, 10>> names = {
      {"mathematics",
       {"linear equations", "quadratic functions", "systems of equations", "exponents", "polynomials",
        "right-triangle trigonometry", "probability", "sequences and series", "logarithms", "rational expressions"}},
      {"physics",
       {"kinematics", "Newton's laws", "work and energy", "momentum", "circular motion", "waves",
        "electric circuits", "thermodynamics", "optics", "gravitation"}},
      {"chemistry",
       {"atomic structure", "periodic trends", "chemical bonding", "stoichiometry", "gas laws", "solutions",
        "acids and bases", "reaction rates", "equilibrium", "redox reactions"}},
      {"biology",
       {"cell structure", "cellular respiration", "photosynthesis", "DNA replication", "protein synthesis",
        "Mendelian genetics", "evolution", "ecosystems", "the immune system", "homeostasis"}},
  };
  return names;
}

std::string generate_problem_json(const PromptPayload& payload, std::uint64_t h) {
  auto subject = payload.tags.count("subject") ? payload.tags.at("subject") : std::string("mathematics");
  auto grade = payload.tags.count("grade") ? payload.tags.at("grade") : std::string("9");
  const auto& names = topic_names().count(subject) ? topic_names().at(subject) : topic_names().at("mathematics");
  nlohmann::json topics = nlohmann::json::array();
  for (std::size_t t = 0; t < names.size(); ++t) {
    std::string topic(names[(t + h) % names.size()]);
    topics.push_back({{"topic", topic},
                      {"questions",
                       {"For grade " + grade + " " + subject + ": explain the central idea of " + topic +
                            " using a concrete example.",
                        "For grade " + grade + " " + subject + ": solve a typical exercise on " + topic +
                            " and justify each step."}}});
  }
  return nlohmann::json{{"topics", topics}}.dump();
}

class SlotGuard {
 public:
  explicit SlotGuard(ConcurrencyLimit& limit) : limit_(limit) { limit_.acquire(); }
  ~SlotGuard() { limit_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  ConcurrencyLimit& limit_;
};

}  // namespace

nlohmann::json to_json(const BackendHandle& h) {
  nlohmann::json j{{"name", h.name},
                   {"kind", std::string(to_string(h.kind))},
                   {"format", std::string(to_string(h.format))},
                   {"endpoint", h.endpoint},
                   {"model", h.model},
                   {"credential_env", h.credential_env},
                   {"supports_images", h.supports_images},
                   {"max_concurrent", h.max_concurrent},
                   {"retries", h.retries},
                   {"timeout_s", h.timeout_s},
                   {"backoff_ms", h.backoff_ms},
                   {"max_output_tokens", h.max_output_tokens},
                   {"mock_seed", h.mock_seed}};
  j["temperature"] = h.temperature ? nlohmann::json(*h.temperature) : nlohmann::json(nullptr);
  return j;
}

BackendHandle handle_from_json(const nlohmann::json& j) {
  BackendHandle h;
  h.name = j.at("name").get<std::string>();
  auto kind = j.value("kind", std::string("mock"));
  if (kind == "mock") {
    h.kind = BackendKind::Mock;
  } else if (kind == "http") {
    h.kind = BackendKind::Http;
  } else {
    throw LlmError("unknown backend kind '" + kind + "'");
  }
  auto format = j.value("format", std::string("unified"));
  if (format == "unified") {
    h.format = WireFormat::Unified;
  } else if (format == "openai") {
    h.format = WireFormat::OpenAI;
  } else if (format == "anthropic") {
    h.format = WireFormat::Anthropic;
  } else {
    throw LlmError("unknown wire format '" + format + "'");
  }
  h.endpoint = j.value("endpoint", std::string());
  h.model = j.value("model", h.name);
  if (h.model.empty()) h.model = h.name;
  h.credential_env = j.value("credential_env", h.kind == BackendKind::Http ? default_credential_env(h.name) : "");
  h.supports_images = j.value("supports_images", true);
  h.max_concurrent = j.value("max_concurrent", 4);
  h.retries = j.value("retries", 3);
  h.timeout_s = j.value("timeout_s", 60.0);
  h.backoff_ms = j.value("backoff_ms", 500);
  h.max_output_tokens = j.value("max_output_tokens", 1024);
  h.mock_seed = j.value("mock_seed", std::uint64_t{0});
  if (j.contains("temperature") && j["temperature"].is_number()) h.temperature = j["temperature"].get<double>();
  if (h.kind == BackendKind::Http && h.endpoint.empty()) throw LlmError("backend '" + h.name + "' has no endpoint");
  return h;
}

std::string default_credential_env(const std::string& name) {
  if (name.rfind("gpt", 0) == 0) return "OPENAI_API_KEY";
  if (name.rfind("claude", 0) == 0) return "ANTHROPIC_API_KEY";
  if (name.rfind("gemini", 0) == 0) return "GEMINI_API_KEY";
  std::string env = "FACETUTOR_";
  for (char c : name) env += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(c)) : '_';
  return env + "_API_KEY";
}

AuditLog::AuditLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app | std::ios::binary);
  if (!out_) throw LlmError("cannot open audit log " + path.string());
}

std::string AuditLog::append(nlohmann::json record) {
  std::lock_guard lock(mutex_);
  auto seq = records_.size() + 1;
  record["seq"] = seq;
  if (out_.is_open()) {
    out_ << record.dump() << '\n';
    out_.flush();
  }
  records_.push_back(std::move(record));
  return (path_.empty() ? std::string("memory") : path_.string()) + "#" + std::to_string(seq);
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::vector<nlohmann::json> AuditLog::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

void ConcurrencyLimit::acquire() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [this] { return slots_ > 0; });
  --slots_;
}

void ConcurrencyLimit::release() {
  {
    std::lock_guard lock(mutex_);
    ++slots_;
  }
  cv_.notify_one();
}

Client::Client(BackendHandle handle, std::shared_ptr<Transport> transport, std::shared_ptr<AuditLog> audit)
    : handle_(std::move(handle)),
      transport_(std::move(transport)),
      audit_(audit ? std::move(audit) : std::make_shared<AuditLog>()),
      limit_(handle_.max_concurrent) {}

std::size_t Client::calls() const {
  std::lock_guard lock(count_mutex_);
  return calls_;
}

Completion Client::complete(const PromptPayload& payload) {
  {
    std::lock_guard lock(count_mutex_);
    ++calls_;
  }
  nlohmann::json record{{"timestamp", utc_timestamp()},
                        {"handle", handle_.name},
                        {"model", handle_.model},
                        {"task", std::string(prompt::to_string(payload.task))},
                        {"payload_fingerprint", payload.fingerprint()},
                        {"payload", payload.to_json()},
                        {"decoding",
                         {{"temperature", handle_.temperature ? nlohmann::json(*handle_.temperature)
                                                              : nlohmann::json(nullptr)},
                          {"max_output_tokens", handle_.max_output_tokens}}}};

  if (payload.has_image() && !handle_.supports_images) {
    record["outcome"] = "rejected: image payload to text-only backend";
    record["attempts"] = 0;
    audit_->append(std::move(record));
    throw CapabilityError("backend '" + handle_.name + "' does not accept images");
  }

  SlotGuard slot(limit_);
  std::vector<std::string> errors;
  const int attempts_allowed = std::max(0, handle_.retries) + 1;
  for (int attempt = 0; attempt < attempts_allowed; ++attempt) {
    auto start = std::chrono::steady_clock::now();
    try {
      RawResponse raw = transport_->send(handle_, payload);
      double latency =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      record["outcome"] = "ok";
      record["attempts"] = attempt + 1;
      record["errors"] = errors;
      record["usage"] = {{"input_tokens", raw.usage.input_tokens}, {"output_tokens", raw.usage.output_tokens}};
      record["latency_ms"] = latency;
      record["response"] = raw.text;
      Completion c;
      c.text = std::move(raw.text);
      c.usage = raw.usage;
      c.latency_ms = latency;
      c.backend = handle_.name;
      c.transcript_ref = audit_->append(std::move(record));
      return c;
    } catch (const TransientError& e) {
      errors.emplace_back(e.what());
      if (attempt + 1 < attempts_allowed && handle_.backoff_ms > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long long>(handle_.backoff_ms) << attempt));
      }
    } catch (const LlmError& e) {
      errors.emplace_back(e.what());
      record["outcome"] = std::string("error: ") + e.what();
      record["attempts"] = attempt + 1;
      record["errors"] = errors;
      audit_->append(std::move(record));
      throw;
    }
  }
  record["outcome"] = "error: retries exhausted";
  record["attempts"] = attempts_allowed;
  record["errors"] = errors;
  audit_->append(std::move(record));
  throw RetriesExhausted("backend '" + handle_.name + "' failed after " + std::to_string(attempts_allowed) +
                         " attempts: " + (errors.empty() ? std::string() : errors.back()));
}

MockTransport::MockTransport(std::uint64_t seed, std::map<std::string, std::string> script, Responder responder)
    : seed_(seed), script_(std::move(script)), responder_(std::move(responder)) {}

RawResponse MockTransport::send(const BackendHandle&, const PromptPayload& payload) {
  std::string text;
  if (auto it = script_.find(payload.fingerprint()); it != script_.end()) {
    text = it->second;
  } else if (auto scripted = responder_ ? responder_(payload) : std::nullopt) {
    text = *scripted;
  } else {
    text = synthesize(payload);
  }
  return {text, estimate_usage(payload, text)};
}

std::string MockTransport::synthesize(const PromptPayload& payload) const {
  const std::uint64_t h = seed::mix(seed_, payload.fingerprint());
  switch (payload.task) {
    case prompt::Task::Student: {
      nlohmann::json out;
      const auto& options = payload.response_options;
      out["video_id"] = options.empty() ? std::string() : options[seed::uniform_index(h, options.size())];
      // Roughly one turn in five speaks.
      const auto speak = seed::uniform_index(seed::mix(h, 1), 5) == 0;
      out["text"] = speak ? std::string(kStudentReplies[seed::uniform_index(seed::mix(h, 2), kStudentReplies.size())])
                          : std::string();
      return out.dump();
    }
    case prompt::Task::Judge: {
      // On Q2 prefer the candidate that echoes more expression channels, which
      // makes the mock tutor's expression-aware variants look more empathetic.
      if (payload.tags.count("question") && payload.tags.at("question") == "Q2") {
        auto score = [&](std::string_view label) {
          int s = 0;
          for (const auto& m : payload.messages) {
            if (m.label != label) continue;
            if (m.text.find(kSawAuText) != std::string::npos) ++s;
            if (m.text.find(kSawImage) != std::string::npos) ++s;
          }
          return s;
        };
        int a = score("A");
        int b = score("B");
        if (a != b) return a > b ? "A" : "B";
      }
      return std::string(prompt::kVerdicts[seed::uniform_index(h, prompt::kVerdicts.size())]);
    }
    case prompt::Task::ProblemGeneration: return generate_problem_json(payload, h);
    case prompt::Task::Tutor:
    default: {
      std::string text(kTutorStems[seed::uniform_index(h, kTutorStems.size())]);
      const auto all = payload.all_text();
      if (all.find(prompt::kExpressionMarkerPrefix) != std::string::npos) {
        text += ' ';
        text += kSawAuText;
      }
      if (payload.has_image()) {
        text += ' ';
        text += kSawImage;
      }
      text += '.';
      return text;
    }
  }
}

Usage MockTransport::estimate_usage(const PromptPayload& payload, const std::string& reply) {
  std::size_t chars = payload.system_text.size();
  for (const auto& m : payload.messages) chars += m.text.size();
  Usage u;
  u.input_tokens = approx_tokens(chars) + static_cast<std::int64_t>(payload.image_count()) * kMockImageTokens;
  u.output_tokens = std::max<std::int64_t>(1, approx_tokens(reply.size()));
  return u;
}

std::string encode_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CapabilityError("cannot read image " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() > kMaxImageBytes) throw CapabilityError("image exceeds 1 MiB cap: " + path.string());
  static constexpr std::string_view kPngSignature = "\x89PNG\r\n\x1a\n";
  if (bytes.compare(0, kPngSignature.size(), kPngSignature) != 0) {
    throw CapabilityError("image is not a PNG: " + path.string());
  }
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

nlohmann::json HttpTransport::unified_request(const BackendHandle& handle, const PromptPayload& payload) {
  nlohmann::json req{{"model", handle.model},
                     {"system", payload.system_text},
                     {"max_output_tokens", handle.max_output_tokens},
                     {"task", std::string(prompt::to_string(payload.task))},
                     {"tags", payload.tags},
                     {"response_options", payload.response_options}};
  if (handle.temperature) req["temperature"] = *handle.temperature;
  auto& msgs = req["messages"] = nlohmann::json::array();
  for (const auto& m : payload.messages) {
    nlohmann::json jm{{"role", std::string(prompt::to_string(m.role))}, {"text", m.text}};
    if (!m.label.empty()) jm["label"] = m.label;
    if (m.image) {
      jm["image"] = {{"media_type", "image/png"},
                     {"frame_index", m.image->frame_index},
                     {"path", m.image->path.generic_string()},
                     {"data", encode_image(m.image->path)}};
    }
    msgs.push_back(std::move(jm));
  }
  return req;
}

PromptPayload payload_from_unified(const nlohmann::json& request) {
  PromptPayload p;
  auto task = request.value("task", std::string("tutor"));
  for (auto t : {prompt::Task::Tutor, prompt::Task::Student, prompt::Task::Judge, prompt::Task::ProblemGeneration}) {
    if (prompt::to_string(t) == task) p.task = t;
  }
  p.system_text = request.value("system", std::string());
  if (request.contains("tags")) p.tags = request["tags"].get<std::map<std::string, std::string>>();
  if (request.contains("response_options")) {
    p.response_options = request["response_options"].get<std::vector<std::string>>();
  }
  for (const auto& jm : request.value("messages", nlohmann::json::array())) {
    prompt::Message m;
    auto role = jm.value("role", std::string("instruction"));
    m.role = role == "tutor" ? prompt::Role::Tutor : role == "student" ? prompt::Role::Student
                                                                        : prompt::Role::Instruction;
    m.text = jm.value("text", std::string());
    m.label = jm.value("label", std::string());
    if (jm.contains("image")) {
      m.image = prompt::ImageRef{jm["image"].value("path", std::string()),
                                 jm["image"].value("frame_index", std::uint64_t{0})};
    }
    p.messages.push_back(std::move(m));
  }
  return p;
}

nlohmann::json HttpTransport::openai_request(const BackendHandle& handle, const PromptPayload& payload) {
  nlohmann::json req{{"model", handle.model}, {"max_completion_tokens", handle.max_output_tokens}};
  if (handle.temperature) req["temperature"] = *handle.temperature;
  auto& msgs = req["messages"] = nlohmann::json::array();
  if (!payload.system_text.empty()) msgs.push_back({{"role", "system"}, {"content", payload.system_text}});
  for (const auto& turn : vendor_turns(payload)) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto* m : turn.parts) {
      content.push_back({{"type", "text"}, {"text", m->text}});
      if (m->image) {
        content.push_back(
            {{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + encode_image(m->image->path)}}}});
      }
    }
    msgs.push_back({{"role", turn.role}, {"content", content}});
  }
  return req;
}

nlohmann::json HttpTransport::anthropic_request(const BackendHandle& handle, const PromptPayload& payload) {
  nlohmann::json req{{"model", handle.model}, {"max_tokens", handle.max_output_tokens}};
  if (handle.temperature) req["temperature"] = *handle.temperature;
  if (!payload.system_text.empty()) req["system"] = payload.system_text;
  auto& msgs = req["messages"] = nlohmann::json::array();
  auto turns = vendor_turns(payload);
  // The messages API requires the first turn to come from the user.
  if (!turns.empty() && turns.front().role == "assistant") {
    msgs.push_back({{"role", "user"}, {"content", "(conversation start)"}});
  }
  for (const auto& turn : turns) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto* m : turn.parts) {
      if (m->image) {
        content.push_back({{"type", "image"},
                           {"source",
                            {{"type", "base64"}, {"media_type", "image/png"}, {"data", encode_image(m->image->path)}}}});
      }
      content.push_back({{"type", "text"}, {"text", m->text}});
    }
    msgs.push_back({{"role", turn.role}, {"content", content}});
  }
  return req;
}

RawResponse HttpTransport::send(const BackendHandle& handle, const PromptPayload& payload) {
  nlohmann::json body;
  std::string default_prefix = "/v1";
  std::string suffix;
  httplib::Headers headers;
  const char* key = handle.credential_env.empty() ? nullptr : std::getenv(handle.credential_env.c_str());
  switch (handle.format) {
    case WireFormat::Unified:
      body = unified_request(handle, payload);
      suffix = "/complete";
      if (key) headers.emplace("Authorization", std::string("Bearer ") + key);
      break;
    case WireFormat::OpenAI:
      body = openai_request(handle, payload);
      suffix = "/chat/completions";
      if (key) headers.emplace("Authorization", std::string("Bearer ") + key);
      break;
    case WireFormat::Anthropic:
      body = anthropic_request(handle, payload);
      suffix = "/messages";
      if (key) headers.emplace("x-api-key", key);
      headers.emplace("anthropic-version", "2023-06-01");
      break;
  }

  auto ep = split_endpoint(handle.endpoint, default_prefix);
  httplib::Client cli(ep.base);
  auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(handle.timeout_s));
  cli.set_connection_timeout(std::chrono::seconds(10));
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  auto res = cli.Post(ep.prefix + suffix, headers, body.dump(), "application/json");
  if (!res) throw TransientError("HTTP request failed: " + httplib::to_string(res.error()));
  if (res->status == 401 || res->status == 403) {
    throw AuthError("authentication failed for backend '" + handle.name + "' (HTTP " + std::to_string(res->status) + ")");
  }
  if (res->status == 429 || res->status >= 500) {
    throw TransientError("HTTP " + std::to_string(res->status) + " from backend '" + handle.name + "'");
  }
  if (res->status != 200) {
    throw LlmError("HTTP " + std::to_string(res->status) + " from backend '" + handle.name + "': " + res->body);
  }

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::parse_error&) {
    throw TransientError("malformed response body from backend '" + handle.name + "'");
  }
  RawResponse out;
  try {
    switch (handle.format) {
      case WireFormat::Unified:
        out.text = doc.at("text").get<std::string>();
        out.usage.input_tokens = doc.at("usage").value("input_tokens", std::int64_t{0});
        out.usage.output_tokens = doc.at("usage").value("output_tokens", std::int64_t{0});
        break;
      case WireFormat::OpenAI: {
        const auto& content = doc.at("choices").at(0).at("message").at("content");
        out.text = content.is_string() ? content.get<std::string>() : std::string();
        if (doc.contains("usage")) {
          out.usage.input_tokens = doc["usage"].value("prompt_tokens", std::int64_t{0});
          out.usage.output_tokens = doc["usage"].value("completion_tokens", std::int64_t{0});
        }
        break;
      }
      case WireFormat::Anthropic:
        for (const auto& block : doc.at("content")) {
          if (block.value("type", std::string()) == "text") out.text += block.value("text", std::string());
        }
        if (doc.contains("usage")) {
          out.usage.input_tokens = doc["usage"].value("input_tokens", std::int64_t{0});
          out.usage.output_tokens = doc["usage"].value("output_tokens", std::int64_t{0});
        }
        break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw TransientError(std::string("unexpected response shape: ") + e.what());
  }
  out.usage.input_tokens = std::max<std::int64_t>(0, out.usage.input_tokens);
  out.usage.output_tokens = std::max<std::int64_t>(0, out.usage.output_tokens);
  return out;
}

BackendHandle mock_backend(std::uint64_t seed, std::string name) {
  BackendHandle h;
  h.name = std::move(name);
  h.model = h.name;
  h.kind = BackendKind::Mock;
  h.supports_images = true;
  h.backoff_ms = 0;
  h.mock_seed = seed;
  return h;
}

void check_credentials(const BackendHandle& handle) {
  if (handle.kind != BackendKind::Http || handle.credential_env.empty()) return;
  const char* v = std::getenv(handle.credential_env.c_str());
  if (!v || !*v) {
    throw AuthError("missing credentials for backend '" + handle.name + "': set " + handle.credential_env);
  }
}

std::shared_ptr<Client> make_client(const BackendHandle& handle, std::shared_ptr<AuditLog> audit,
                                    std::shared_ptr<Transport> transport_override) {
  std::shared_ptr<Transport> transport = std::move(transport_override);
  if (!transport) {
    if (handle.kind == BackendKind::Mock) {
      transport = std::make_shared<MockTransport>(handle.mock_seed);
    } else {
      check_credentials(handle);
      transport = std::make_shared<HttpTransport>();
    }
  }
  return std::make_shared<Client>(handle, std::move(transport), std::move(audit));
}

}  // namespace facetutor::llm
