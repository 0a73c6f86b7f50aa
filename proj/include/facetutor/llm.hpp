#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "facetutor/prompt.hpp"

namespace facetutor::llm {

using prompt::PromptPayload;

enum class BackendKind : std::uint8_t { Mock, Http };

// Wire format spoken by an HTTP backend. `Unified` is the project's own
// protocol (also served by the stub server); the others are vendor adapters.
enum class WireFormat : std::uint8_t { Unified, OpenAI, Anthropic };

struct BackendHandle {
  std::string name;  // "gpt-5.1", "claude-ops-4.5", "gemini-2.5-pro", "mock", ...
  BackendKind kind = BackendKind::Mock;
  WireFormat format = WireFormat::Unified;
  std::string endpoint;  // scheme://host[:port]
  std::string model;     // vendor model id; defaults to name
  std::string credential_env;
  bool supports_images = true;
  int max_concurrent = 4;
  int retries = 3;
  double timeout_s = 60.0;
  int backoff_ms = 500;  // first retry delay, doubled per attempt
  std::optional<double> temperature;
  int max_output_tokens = 1024;
  std::uint64_t mock_seed = 0;
};

nlohmann::json to_json(const BackendHandle& h);
BackendHandle handle_from_json(const nlohmann::json& j);
// Conventional credential variable for a backend name (e.g. "gpt-5.1" -> OPENAI_API_KEY).
std::string default_credential_env(const std::string& name);

struct Usage {
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
  bool operator==(const Usage&) const = default;
};

struct Completion {
  std::string text;
  Usage usage;
  double latency_ms = 0.0;
  std::string backend;
  std::string transcript_ref;
};

class LlmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
// Network failures, timeouts, 429 and 5xx responses. Retried.
class TransientError : public LlmError {
 public:
  using LlmError::LlmError;
};
class AuthError : public LlmError {
 public:
  using LlmError::LlmError;
};
// Image sent to a text-only handle, oversized image, bad payload. Never sent.
class CapabilityError : public LlmError {
 public:
  using LlmError::LlmError;
};
class RetriesExhausted : public LlmError {
 public:
  using LlmError::LlmError;
};

struct RawResponse {
  std::string text;
  Usage usage;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual RawResponse send(const BackendHandle& handle, const PromptPayload& payload) = 0;
};

// Append-only NDJSON audit log shared by all clients. One record per
// complete() invocation, written before the result is returned.
class AuditLog {
 public:
  AuditLog() = default;  // in-memory only
  explicit AuditLog(const std::filesystem::path& path);

  // Returns the transcript reference of the appended record.
  std::string append(nlohmann::json record);
  std::size_t size() const;
  std::vector<nlohmann::json> records() const;

 private:
  mutable std::mutex mutex_;
  std::filesystem::path path_;
  std::ofstream out_;
  std::vector<nlohmann::json> records_;
};

// Counting semaphore bounding in-flight requests per handle.
class ConcurrencyLimit {
 public:
  explicit ConcurrencyLimit(int slots) : slots_(slots < 1 ? 1 : slots) {}
  void acquire();
  void release();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int slots_;
};

class Client {
 public:
  Client(BackendHandle handle, std::shared_ptr<Transport> transport, std::shared_ptr<AuditLog> audit);

  // Retries transient failures with exponential backoff. Throws CapabilityError
  // (before any transport call), AuthError or RetriesExhausted.
  Completion complete(const PromptPayload& payload);

  const BackendHandle& handle() const { return handle_; }
  std::size_t calls() const;
  AuditLog& audit() { return *audit_; }

 private:
  BackendHandle handle_;
  std::shared_ptr<Transport> transport_;
  std::shared_ptr<AuditLog> audit_;
  ConcurrencyLimit limit_;
  mutable std::mutex count_mutex_;
  std::size_t calls_ = 0;
};

inline constexpr std::size_t kMaxImageBytes = 1024 * 1024;
// Token cost the mock charges per attached image.
inline constexpr std::int64_t kMockImageTokens = 255;
inline constexpr std::string_view kSawAuText = "SAW_AU_TEXT";
inline constexpr std::string_view kSawImage = "SAW_IMAGE";

// Deterministic offline backend. complete() is a pure function of
// (seed, payload): a scripted table hit by payload fingerprint, then an
// optional responder hook, then a synthesized task-appropriate reply.
class MockTransport : public Transport {
 public:
  using Responder = std::function<std::optional<std::string>(const PromptPayload&)>;

  explicit MockTransport(std::uint64_t seed, std::map<std::string, std::string> script = {},
                         Responder responder = nullptr);
  RawResponse send(const BackendHandle& handle, const PromptPayload& payload) override;

  std::string synthesize(const PromptPayload& payload) const;
  static Usage estimate_usage(const PromptPayload& payload, const std::string& reply);

 private:
  std::uint64_t seed_;
  std::map<std::string, std::string> script_;
  Responder responder_;
};

// Speaks the unified protocol or a vendor format over HTTP(S).
class HttpTransport : public Transport {
 public:
  RawResponse send(const BackendHandle& handle, const PromptPayload& payload) override;

  static nlohmann::json unified_request(const BackendHandle& handle, const PromptPayload& payload);
  static nlohmann::json openai_request(const BackendHandle& handle, const PromptPayload& payload);
  static nlohmann::json anthropic_request(const BackendHandle& handle, const PromptPayload& payload);
};

// Decodes a unified-protocol request body back into a payload (stub server side).
PromptPayload payload_from_unified(const nlohmann::json& request);

// Base64 PNG, checked against kMaxImageBytes and the PNG signature.
std::string encode_image(const std::filesystem::path& path);

// Handle for the deterministic mock (name "mock" unless given).
BackendHandle mock_backend(std::uint64_t seed, std::string name = "mock");

std::shared_ptr<Client> make_client(const BackendHandle& handle, std::shared_ptr<AuditLog> audit,
                                    std::shared_ptr<Transport> transport_override = nullptr);

// Throws AuthError naming the variable when an HTTP handle's credential is unset.
void check_credentials(const BackendHandle& handle);

}  // namespace facetutor::llm
