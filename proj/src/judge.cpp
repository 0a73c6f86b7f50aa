#include "facetutor/judge.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "facetutor/seed.hpp"

namespace facetutor::judge {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kVerdictReprompt = "Answer with exactly one word: Equal, A, or B.";

std::optional<Outcome> verdict_outcome(std::string_view verdict, TrialOrder order) {
  if (verdict == "Equal") return Outcome::Equal;
  const bool first = verdict == "A";
  if (!first && verdict != "B") return std::nullopt;
  // Option A is the left variant on left-first trials and the right variant otherwise.
  const bool left_preferred = (order == TrialOrder::LeftFirst) == first;
  return left_preferred ? Outcome::Better : Outcome::Worse;
}

struct WorkItem {
  ItemKey key;
  Question question;
  TargetPair pair;
};

using ScoreKey = std::tuple<ItemKey, Question, TargetPair>;

}  // namespace

std::string_view to_string(TargetPair p) {
  switch (p) {
    case TargetPair::LLM_AUM_vs_LLM: return "LLM_AUM_vs_LLM";
    case TargetPair::MLLM_AUM_vs_MLLM: return "MLLM_AUM_vs_MLLM";
    case TargetPair::LLM_AUM_vs_MLLM_AUM: return "LLM_AUM_vs_MLLM_AUM";
  }
  return "";
}

std::string_view display_name(TargetPair p) {
  switch (p) {
    case TargetPair::LLM_AUM_vs_LLM: return "LLM+AUM vs. LLM";
    case TargetPair::MLLM_AUM_vs_MLLM: return "MLLM+AUM vs. MLLM";
    case TargetPair::LLM_AUM_vs_MLLM_AUM: return "LLM+AUM vs. MLLM+AUM";
  }
  return "";
}

std::optional<TargetPair> parse_pair(std::string_view s) {
  for (auto p : kAllPairs) {
    if (to_string(p) == s) return p;
  }
  return std::nullopt;
}

TutorVariant left(TargetPair p) {
  return p == TargetPair::MLLM_AUM_vs_MLLM ? TutorVariant::MLLM_AUM : TutorVariant::LLM_AUM;
}

TutorVariant right(TargetPair p) {
  switch (p) {
    case TargetPair::LLM_AUM_vs_LLM: return TutorVariant::LLM;
    case TargetPair::MLLM_AUM_vs_MLLM: return TutorVariant::MLLM;
    case TargetPair::LLM_AUM_vs_MLLM_AUM: return TutorVariant::MLLM_AUM;
  }
  return TutorVariant::LLM;
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Better: return "better";
    case Outcome::Equal: return "equal";
    case Outcome::Worse: return "worse";
  }
  return "";
}

std::optional<Outcome> parse_outcome(std::string_view s) {
  for (auto o : {Outcome::Better, Outcome::Equal, Outcome::Worse}) {
    if (to_string(o) == s) return o;
  }
  return std::nullopt;
}

int score_outcome(Outcome o) {
  switch (o) {
    case Outcome::Better: return 1;
    case Outcome::Equal: return 0;
    case Outcome::Worse: return -1;
  }
  return 0;
}

std::string_view to_string(TrialOrder o) { return o == TrialOrder::LeftFirst ? "left-first" : "right-first"; }

std::string to_string(const ItemKey& k) {
  return k.backbone + "/" + k.conversation_id + "#" + std::to_string(k.turn_index);
}

std::string_view to_string(EvaluatorKind k) { return k == EvaluatorKind::AI ? "ai" : "human"; }

nlohmann::json to_json(const PairwiseJudgment& j) {
  nlohmann::json out{{"backbone", j.item.backbone},
                     {"conversation_id", j.item.conversation_id},
                     {"turn_index", j.item.turn_index},
                     {"question", std::string(prompt::to_string(j.question))},
                     {"pair", std::string(to_string(j.pair))},
                     {"kind", std::string(to_string(j.kind))},
                     {"evaluator", j.evaluator}};
  out["outcome"] = j.outcome ? nlohmann::json(std::string(to_string(*j.outcome))) : nlohmann::json(nullptr);
  if (j.trial_order) out["trial_order"] = std::string(to_string(*j.trial_order));
  if (j.kind == EvaluatorKind::AI) out["verdict"] = j.verdict;
  if (j.abstained) out["abstained"] = true;
  if (j.failed) out["failed"] = true;
  return out;
}

PairwiseJudgment judgment_from_json(const nlohmann::json& j) {
  PairwiseJudgment out;
  try {
    out.item = {j.at("backbone").get<std::string>(), j.at("conversation_id").get<std::string>(),
                j.at("turn_index").get<int>()};
    auto q = prompt::parse_question(j.at("question").get<std::string>());
    auto p = parse_pair(j.at("pair").get<std::string>());
    if (!q || !p) throw JudgeError("unknown question or pair in judgment record");
    out.question = *q;
    out.pair = *p;
    out.kind = j.value("kind", std::string("ai")) == "human" ? EvaluatorKind::Human : EvaluatorKind::AI;
    out.evaluator = j.value("evaluator", std::string());
    if (j.contains("outcome") && j["outcome"].is_string()) {
      out.outcome = parse_outcome(j["outcome"].get<std::string>());
      if (!out.outcome) throw JudgeError("unknown outcome in judgment record");
    }
    if (j.contains("trial_order")) {
      out.trial_order =
          j["trial_order"].get<std::string>() == "left-first" ? TrialOrder::LeftFirst : TrialOrder::RightFirst;
    }
    out.verdict = j.value("verdict", std::string());
    out.abstained = j.value("abstained", false);
    out.failed = j.value("failed", false);
  } catch (const nlohmann::json::exception& e) {
    throw JudgeError(std::string("malformed judgment record: ") + e.what());
  }
  if (out.abstained && out.outcome) throw JudgeError("abstained judgment carries an outcome");
  return out;
}

std::vector<PairwiseJudgment> read_judgment_log(const fs::path& path) {
  std::vector<PairwiseJudgment> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(judgment_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

FourWayRanking parse_ranking(std::string_view chain, const std::map<char, TutorVariant>& labels) {
  FourWayRanking r;
  std::string compact;
  for (char c : chain) {
    if (c != ' ') compact += c;
  }
  if (compact.size() != 7) throw JudgeError("ranking chain must order 4 options: '" + std::string(chain) + "'");
  std::set<TutorVariant> seen;
  for (std::size_t i = 0; i < 4; ++i) {
    auto it = labels.find(compact[2 * i]);
    if (it == labels.end()) throw JudgeError("unknown option label '" + std::string(1, compact[2 * i]) + "'");
    if (!seen.insert(it->second).second) throw JudgeError("option repeated in chain '" + std::string(chain) + "'");
    r.order[i] = it->second;
    if (i < 3) {
      char rel = compact[2 * i + 1];
      if (rel != '>' && rel != '=') throw JudgeError("relation must be '>' or '=' in '" + std::string(chain) + "'");
      r.relations[i] = rel;
    }
  }
  return r;
}

std::string to_string(const FourWayRanking& r) {
  std::string out;
  for (std::size_t i = 0; i < 4; ++i) {
    out += prompt::to_string(r.order[i]);
    if (i < 3) out += r.relations[i];
  }
  return out;
}

std::map<TargetPair, Outcome> extract_pairs(const FourWayRanking& ranking) {
  std::map<TutorVariant, int> group;
  int g = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i > 0 && ranking.relations[i - 1] == '>') ++g;
    if (i > 0 && ranking.relations[i - 1] != '>' && ranking.relations[i - 1] != '=') {
      throw JudgeError("malformed ranking relation");
    }
    group[ranking.order[i]] = g;
  }
  if (group.size() != 4) throw JudgeError("ranking does not cover all four variants");
  std::map<TargetPair, Outcome> out;
  for (auto p : kAllPairs) {
    int l = group.at(left(p));
    int r = group.at(right(p));
    out[p] = l < r ? Outcome::Better : l == r ? Outcome::Equal : Outcome::Worse;
  }
  return out;
}

std::optional<std::string> parse_verdict(std::string_view text) {
  auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return std::nullopt;
  auto last = text.find_last_not_of(" \t\r\n");
  auto token = text.substr(first, last - first + 1);
  for (auto v : prompt::kVerdicts) {
    if (token == v) return std::string(v);
  }
  return std::nullopt;
}

AiItemResult ai_judge_item(llm::Client& judge, const prompt::TurnContext& ctx,
                           const std::map<TutorVariant, std::string>& responses, TargetPair pair, Question question,
                           const ItemKey& key, const prompt::Templates& templates) {
  const auto l = responses.find(left(pair));
  const auto r = responses.find(right(pair));
  if (l == responses.end() || r == responses.end()) {
    throw JudgeError("missing variant response for " + std::string(to_string(pair)) + " on " + to_string(key));
  }
  AiItemResult result;
  double total = 0.0;
  for (std::size_t t = 0; t < 2; ++t) {
    const auto order = t == 0 ? TrialOrder::LeftFirst : TrialOrder::RightFirst;
    const auto& first = order == TrialOrder::LeftFirst ? l->second : r->second;
    const auto& second = order == TrialOrder::LeftFirst ? r->second : l->second;
    auto payload = prompt::build_judge_payload(question, ctx, first, second, templates);
    auto reply = judge.complete(payload);
    auto verdict = parse_verdict(reply.text);
    if (!verdict) {
      payload.messages.push_back({prompt::Role::Instruction, std::string(kVerdictReprompt), std::nullopt, ""});
      reply = judge.complete(payload);
      verdict = parse_verdict(reply.text);
    }
    auto& trial = result.trials[t];
    trial.item = key;
    trial.question = question;
    trial.pair = pair;
    trial.kind = EvaluatorKind::AI;
    trial.evaluator = judge.handle().name;
    trial.trial_order = order;
    trial.verdict = verdict.value_or(reply.text);
    if (!verdict) {
      trial.failed = true;
      result.failed = true;
      continue;
    }
    trial.outcome = verdict_outcome(*verdict, order);
    total += score_outcome(*trial.outcome);
  }
  if (!result.failed) result.score = total / 2.0;
  return result;
}

ItemCatalog item_catalog(const std::vector<sim::ConversationRecord>& records) {
  ItemCatalog out;
  for (const auto& rec : records) {
    for (const auto& t : rec.turns) out[{rec.backbone, rec.conversation_id, t.turn_index}] = !t.student.silent();
  }
  return out;
}

AiCampaignResult ai_judge_campaign(const std::vector<sim::ConversationRecord>& records, llm::Client& judge,
                                   const fs::path& log_path, std::size_t concurrency,
                                   const prompt::Templates& templates) {
  AiCampaignResult result;
  auto existing = read_judgment_log(log_path);
  std::set<ScoreKey> done;
  for (const auto& j : existing) done.insert({j.item, j.question, j.pair});

  std::vector<const sim::ConversationRecord*> complete;
  for (const auto& rec : records) {
    if (rec.status == sim::ConversationStatus::Complete) complete.push_back(&rec);
  }
  std::sort(complete.begin(), complete.end(), [](const auto* a, const auto* b) {
    return std::tie(a->backbone, a->conversation_id) < std::tie(b->backbone, b->conversation_id);
  });

  std::vector<std::vector<WorkItem>> work(complete.size());
  for (std::size_t c = 0; c < complete.size(); ++c) {
    const auto& rec = *complete[c];
    for (const auto& t : rec.turns) {
      ItemKey key{rec.backbone, rec.conversation_id, t.turn_index};
      for (auto q : prompt::kAllQuestions) {
        if (q == Question::Q3 && t.student.silent()) continue;
        for (auto p : kAllPairs) {
          if (!done.count({key, q, p})) work[c].push_back({key, q, p});
        }
      }
    }
  }

  // Results are flushed in conversation order so the log is independent of worker count.
  std::vector<std::optional<std::vector<PairwiseJudgment>>> finished(complete.size());
  std::size_t failed = 0;
  std::size_t flushed = 0;
  std::mutex mutex;
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream out(log_path, std::ios::app | std::ios::binary);
  if (!out) throw JudgeError("cannot open judgment log " + log_path.string());

  const auto calls_before = judge.calls();
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      auto c = next.fetch_add(1);
      if (c >= complete.size()) return;
      std::vector<PairwiseJudgment> lines;
      std::size_t local_failed = 0;
      for (const auto& w : work[c]) {
        try {
          auto ctx = sim::turn_context(*complete[c], w.key.turn_index);
          auto item = ai_judge_item(judge, ctx, complete[c]->turn(w.key.turn_index).responses, w.pair, w.question,
                                    w.key, templates);
          if (item.failed) ++local_failed;
          for (const auto& trial : item.trials) {
            if (trial.outcome || trial.failed) lines.push_back(trial);
          }
        } catch (const std::exception& e) {
          // Backend failures are not logged, so a rerun retries the item.
          ++local_failed;
          spdlog::warn("judge failed on {} {} {}: {}", to_string(w.key), prompt::to_string(w.question),
                       to_string(w.pair), e.what());
        }
      }
      std::unique_lock lock(mutex);
      finished[c] = std::move(lines);
      failed += local_failed;
      while (flushed < finished.size() && finished[flushed]) {
        for (const auto& j : *finished[flushed]) out << to_json(j).dump() << '\n';
        out.flush();
        ++flushed;
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(concurrency, complete.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  out.close();

  result.new_calls = judge.calls() - calls_before;
  result.judgments = read_judgment_log(log_path);
  std::map<ScoreKey, std::pair<int, bool>> per_item;
  for (const auto& j : result.judgments) {
    if (j.kind != EvaluatorKind::AI) continue;
    auto& slot = per_item[{j.item, j.question, j.pair}];
    if (j.outcome) ++slot.first;
    if (j.failed) slot.second = true;
  }
  for (const auto& [key, v] : per_item) {
    if (v.second) {
      ++result.failed_items;
    } else if (v.first >= 2) {
      ++result.scored_items;
    }
  }
  result.failed_items = std::max(result.failed_items, failed);
  return result;
}

std::vector<PairwiseJudgment> parse_human_ratings(const std::vector<nlohmann::json>& rows, const ItemCatalog* known) {
  std::vector<PairwiseJudgment> out;
  std::set<std::tuple<ItemKey, std::string, Question>> seen;
  for (const auto& row : rows) {
    ItemKey key;
    std::string rater;
    std::map<char, TutorVariant> labels;
    try {
      rater = row.at("rater_id").get<std::string>();
      key = {row.at("backbone").get<std::string>(), row.at("conversation_id").get<std::string>(),
             row.at("turn_index").get<int>()};
      for (auto& [label, variant] : row.at("label_map").items()) {
        auto v = prompt::parse_variant(variant.get<std::string>());
        if (label.size() != 1 || !v) throw JudgeError("malformed label map entry '" + label + "'");
        labels[label[0]] = *v;
      }
    } catch (const nlohmann::json::exception& e) {
      throw JudgeError(std::string("malformed human rating row: ") + e.what());
    }
    if (labels.size() != 4) throw JudgeError("label map must name four options for " + to_string(key));
    std::optional<bool> speaking;
    if (known) {
      auto it = known->find(key);
      if (it == known->end()) throw JudgeError("unknown item " + to_string(key));
      speaking = it->second;
    }
    const auto answers = row.value("questions", nlohmann::json::object());
    for (auto& [qname, answer] : answers.items()) {
      auto q = prompt::parse_question(qname);
      if (!q) throw JudgeError("unknown question '" + qname + "'");
      if (!seen.insert({key, rater, *q}).second) {
        throw JudgeError("duplicate rating for " + to_string(key) + " rater " + rater + " " + qname);
      }
      if (*q == Question::Q3 && speaking && !*speaking) {
        throw JudgeError("Q3 rated on silent turn " + to_string(key));
      }
      const bool abstain = answer.value("abstain", false);
      std::map<TargetPair, Outcome> outcomes;
      if (!abstain) outcomes = extract_pairs(parse_ranking(answer.at("chain").get<std::string>(), labels));
      for (auto p : kAllPairs) {
        PairwiseJudgment j;
        j.item = key;
        j.question = *q;
        j.pair = p;
        j.kind = EvaluatorKind::Human;
        j.evaluator = rater;
        j.abstained = abstain;
        if (!abstain) j.outcome = outcomes.at(p);
        out.push_back(std::move(j));
      }
    }
  }
  return out;
}

std::vector<PairwiseJudgment> import_human_ratings(const fs::path& path, const ItemCatalog* known) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw JudgeError("human rating file not found: " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      throw JudgeError("malformed JSON on line " + std::to_string(line_no) + " of " + path.string());
    }
  }
  return parse_human_ratings(rows, known);
}

std::vector<ItemScore> aggregate_scores(const std::vector<PairwiseJudgment>& judgments) {
  struct Acc {
    std::vector<double> ai_left_first;
    std::vector<double> ai_right_first;
    std::vector<double> human;
  };
  std::map<ScoreKey, Acc> acc;
  for (const auto& j : judgments) {
    if (!j.outcome || j.abstained || j.failed) continue;
    auto& a = acc[{j.item, j.question, j.pair}];
    const double s = score_outcome(*j.outcome);
    if (j.kind == EvaluatorKind::Human) {
      a.human.push_back(s);
    } else if (j.trial_order == TrialOrder::RightFirst) {
      a.ai_right_first.push_back(s);
    } else {
      a.ai_left_first.push_back(s);
    }
  }
  std::vector<ItemScore> out;
  for (const auto& [key, a] : acc) {
    ItemScore s;
    std::tie(s.item, s.question, s.pair) = key;
    if (!a.ai_left_first.empty() && !a.ai_right_first.empty()) {
      double total = 0.0;
      for (double v : a.ai_left_first) total += v;
      for (double v : a.ai_right_first) total += v;
      s.ai_score = total / static_cast<double>(a.ai_left_first.size() + a.ai_right_first.size());
    }
    if (!a.human.empty()) {
      double mean = 0.0;
      for (double v : a.human) mean += v;
      mean /= static_cast<double>(a.human.size());
      double var = 0.0;
      for (double v : a.human) var += (v - mean) * (v - mean);
      s.human_score = mean;
      s.human_std = std::sqrt(var / static_cast<double>(a.human.size()));
      s.n_human_raters = a.human.size();
    }
    if (s.ai_score || s.human_score) out.push_back(s);
  }
  return out;
}

std::vector<HumanEvalItem> sample_human_eval_set(const std::vector<sim::ConversationRecord>& records,
                                                 std::size_t n_per_backbone, std::uint64_t seed) {
  std::map<std::string, std::vector<const sim::ConversationRecord*>> by_backbone;
  for (const auto& r : records) {
    if (r.status == sim::ConversationStatus::Complete) by_backbone[r.backbone].push_back(&r);
  }
  std::vector<HumanEvalItem> out;
  for (auto& [backbone, recs] : by_backbone) {
    if (recs.size() < n_per_backbone) {
      throw JudgeError("backbone " + backbone + " has " + std::to_string(recs.size()) +
                       " complete conversations, need " + std::to_string(n_per_backbone));
    }
    std::sort(recs.begin(), recs.end(),
              [](const auto* a, const auto* b) { return a->conversation_id < b->conversation_id; });
    seed::SplitMix rng(seed::mix(seed, backbone));
    for (std::size_t i = recs.size(); i > 1; --i) std::swap(recs[i - 1], recs[rng.below(i)]);
    std::vector<const sim::ConversationRecord*> pool(recs.begin(), recs.begin() + static_cast<long>(n_per_backbone));

    std::array<int, sim::kTurnsPerConversation> turn_order{1, 2, 3, 4, 5};
    for (std::size_t i = turn_order.size(); i > 1; --i) std::swap(turn_order[i - 1], turn_order[rng.below(i)]);
    std::array<std::size_t, sim::kTurnsPerConversation + 1> quota{};
    for (int t = 1; t <= sim::kTurnsPerConversation; ++t) quota[t] = n_per_backbone / sim::kTurnsPerConversation;
    for (std::size_t i = 0; i < n_per_backbone % sim::kTurnsPerConversation; ++i) ++quota[turn_order[i]];

    std::vector<bool> taken(pool.size(), false);
    for (int t = 1; t <= sim::kTurnsPerConversation; ++t) {
      std::map<au::AuId, int> counts;
      for (std::size_t k = 0; k < quota[t]; ++k) {
        std::optional<std::size_t> best;
        int best_count = 0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
          if (taken[i]) continue;
          int c = counts[pool[i]->turn(t).student.dominant_au];
          if (!best || c < best_count) {
            best = i;
            best_count = c;
          }
        }
        taken[*best] = true;
        auto au = pool[*best]->turn(t).student.dominant_au;
        ++counts[au];
        out.push_back({{backbone, pool[*best]->conversation_id, t}, au});
      }
    }
  }
  return out;
}

nlohmann::json assignment_to_json(const std::vector<HumanEvalItem>& items, std::uint64_t seed) {
  nlohmann::json j{{"seed", seed}, {"items", nlohmann::json::array()}};
  for (const auto& it : items) {
    j["items"].push_back({{"backbone", it.item.backbone},
                          {"conversation_id", it.item.conversation_id},
                          {"turn_index", it.item.turn_index},
                          {"dominant_au", std::string(au::to_string(it.dominant_au))}});
  }
  return j;
}

std::vector<HumanEvalItem> assignment_from_json(const nlohmann::json& j) {
  std::vector<HumanEvalItem> out;
  for (const auto& it : j.at("items")) {
    out.push_back({{it.at("backbone").get<std::string>(), it.at("conversation_id").get<std::string>(),
                    it.at("turn_index").get<int>()},
                   au::parse_au_id(it.value("dominant_au", std::string("AU1"))).value_or(au::AuId::AU1)});
  }
  return out;
}

}  // namespace facetutor::judge
