#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "facetutor/au.hpp"
#include "facetutor/seed.hpp"
#include "facetutor/sim.hpp"

namespace support {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ft") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Complete record with distinct variant responses and the given speaking pattern.
inline facetutor::sim::ConversationRecord make_record(const std::string& backbone, const std::string& id,
                                                      std::uint64_t seed, double speak_rate = 0.3) {
  using namespace facetutor;
  sim::ConversationRecord r;
  r.conversation_id = id;
  r.backbone = backbone;
  r.problem = {id, corpus::Subject::Physics, 10, "motion", "What is speed?"};
  r.participant_id = "p001";
  r.conversation_seed = seed;
  r.status = sim::ConversationStatus::Complete;
  seed::SplitMix rng(seed);
  for (int t = 1; t <= sim::kTurnsPerConversation; ++t) {
    sim::TurnRecord turn;
    turn.turn_index = t;
    turn.student.video_id = "p001_v" + std::to_string(1 + rng.below(20));
    au::AuVector pooled;
    pooled[au::kAllAus[rng.below(8)]] = 1.0 + 2.0 * rng.unit();
    turn.student.pooled = pooled;
    turn.student.dominant_au = au::dominant_au(pooled);
    turn.student.description = au::describe_expression(pooled).text;
    if (rng.unit() < speak_rate) turn.student.text = "I am not sure how to start.";
    turn.canonical_response = "Think about distance over time " + std::to_string(t) + ".";
    for (auto v : prompt::kAllVariants) {
      turn.responses[v] = std::string(prompt::to_string(v)) + " reply for " + id + " turn " + std::to_string(t) + ".";
    }
    turn.responses[prompt::TutorVariant::LLM_AUM] = turn.canonical_response;
    r.turns.push_back(turn);
  }
  return r;
}

}  // namespace support
