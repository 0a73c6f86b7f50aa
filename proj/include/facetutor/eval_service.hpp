#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/corpus.hpp"
#include "facetutor/judge.hpp"
#include "facetutor/llm.hpp"
#include "facetutor/sim.hpp"

namespace httplib {
class Server;
}

namespace facetutor::eval {

struct Response {
  int status = 200;
  nlohmann::json body;
  // Set for binary media responses instead of a JSON body.
  std::optional<std::string> bytes;
  std::string content_type = "application/json";
};

inline constexpr std::array<char, 4> kBlindLabels = {'A', 'B', 'C', 'D'};
inline constexpr std::string_view kAuthTokenEnv = "FACETUTOR_EVAL_TOKEN";

struct ServiceOptions {
  std::uint64_t label_seed = 0;
  std::vector<std::string> raters;   // empty accepts any well-formed id
  std::optional<std::string> auth_token;
  std::string instructions;          // defaults to the built-in text
};

// Blind label -> variant for one rater and item; a pure function of the inputs.
std::map<char, prompt::TutorVariant> blind_labels(std::uint64_t label_seed, const std::string& rater_id,
                                                  const judge::ItemKey& item);

std::string_view default_instructions();

// Request logic of the rater API, independent of the HTTP binding.
class EvalService {
 public:
  EvalService(std::vector<judge::HumanEvalItem> assignment, std::vector<sim::ConversationRecord> records,
              std::filesystem::path ratings_path, ServiceOptions options = {},
              const corpus::ExpressionManifest* manifest = nullptr);

  // GET /api/rater/{id}/next
  Response next_item(const std::string& rater_id);
  // POST /api/rater/{id}/rating
  Response submit(const std::string& rater_id, const nlohmann::json& body);
  // GET /api/rater/{id}/ratings: submitted chains, as the rater saw them.
  Response ratings(const std::string& rater_id);
  // GET /api/progress
  Response progress();
  // GET /api/instructions, GET /api/questions
  Response instructions() const;
  Response questions() const;
  // GET /api/media/{item_token}/{frame}: "peak" or a frame index.
  Response media(const std::string& item_token, const std::string& frame);

  bool authorized(const std::string& header_value) const;
  const std::filesystem::path& ratings_path() const { return ratings_path_; }

 private:
  struct ItemState {
    judge::HumanEvalItem item;
    const sim::ConversationRecord* record = nullptr;
    bool speaking = false;
  };
  std::optional<Response> check_rater(const std::string& rater_id) const;
  nlohmann::json item_bundle(const ItemState& s, const std::string& rater_id, std::size_t position) const;
  const corpus::ExpressionEntry* expression_for(const ItemState& s, int turn_index) const;
  std::string item_token(const judge::ItemKey& k) const;

  std::vector<sim::ConversationRecord> records_;
  std::vector<ItemState> items_;
  std::map<std::string, std::size_t> by_token_;
  std::filesystem::path ratings_path_;
  ServiceOptions options_;
  const corpus::ExpressionManifest* manifest_;
  std::mutex mutex_;
  // rater -> item token -> stored row
  std::map<std::string, std::map<std::string, nlohmann::json>> submitted_;
};

// Binds the rater API routes to an httplib server.
void mount(httplib::Server& server, EvalService& service);

// Unified-protocol stub that answers with the deterministic mock. Failure
// injection answers the first `fail_count` requests with `fail_status`.
struct StubOptions {
  std::uint64_t seed = 0;
  std::string prefix = "/v1";
  std::optional<std::string> required_key;
  int fail_status = 0;
  int fail_count = 0;
};

class StubServer {
 public:
  explicit StubServer(StubOptions options);
  ~StubServer();
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  // Binds to 127.0.0.1 on an ephemeral port and serves on a background thread.
  int start();
  // Blocks serving on the given host and port; returns false if binding fails.
  bool listen(const std::string& host, int port);
  void stop();
  std::string endpoint() const;
  std::size_t requests() const { return requests_.load(); }

 private:
  void install();
  StubOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::unique_ptr<llm::MockTransport> mock_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> requests_{0};
  std::atomic<int> failures_left_{0};
};

}  // namespace facetutor::eval
