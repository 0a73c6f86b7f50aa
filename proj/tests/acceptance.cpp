// Acceptance checks: one PASS/FAIL line per criterion, each with its time budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "facetutor/au.hpp"
#include "facetutor/campaign.hpp"
#include "facetutor/judge.hpp"
#include "facetutor/stats.hpp"
#include "facetutor/synthetic.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace facetutor;
using support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome au_mapping() {
  au::AuVector one;
  one[au::AuId::AU12] = 1.7;
  au::AuVector three;
  three[au::AuId::AU4] = 1.5;
  three[au::AuId::AU5] = 2.0;
  three[au::AuId::AU12] = 3.0;
  const bool ex1 = au::describe_expression(one).text == "moderately smiles";
  const bool ex2 = au::describe_expression(three).text ==
                   "slightly knits eyebrows and moderately widens eyes and strongly smiles";

  static constexpr double kEdges[] = {0.8, 1.0, 1.5, 1.6, 2.0, 2.2, 2.8};
  seed::SplitMix rng(1001);
  int agree = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    au::AuVector v;
    for (auto id : au::kAllAus) {
      const auto r = rng.below(4);
      v[id] = r == 0 ? 0.0 : r == 1 ? kEdges[rng.below(7)] : 3.5 * rng.unit();
    }
    agree += au::describe_expression(v).text == oracle::describe(v.values()) ? 1 : 0;
  }
  return {ex1 && ex2 && agree == n,
          std::string("worked examples ") + (ex1 && ex2 ? "exact" : "MISMATCH") + ", " + std::to_string(agree) + "/" +
              std::to_string(n) + " random vectors match the table oracle"};
}

Outcome peak_frames() {
  seed::SplitMix rng(2002);
  int agree = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    au::AuTrace t;
    const auto frames = 5 + rng.below(196);
    const bool grid = i % 2 == 0;  // coarse grid values force frequent ties
    std::vector<oracle::Raw> raw;
    for (std::size_t f = 0; f < frames; ++f) {
      au::AuFrame fr;
      fr.index = 10 + f;
      for (auto id : au::kAllAus) fr.intensities[id] = grid ? 0.5 * static_cast<double>(rng.below(4)) : 5 * rng.unit();
      raw.push_back(fr.intensities.values());
      t.frames.push_back(fr);
    }
    const auto pos = oracle::peak_position(raw);
    agree += au::peak_frame_position(t) == pos && au::peak_frame(t) == t.frames[pos].index ? 1 : 0;
  }
  return {agree == n, std::to_string(agree) + "/" + std::to_string(n) + " traces agree with the sum-argmax oracle"};
}

Outcome permutation_exactness() {
  static constexpr double kValues[] = {-1.0, -0.5, 0.0, 0.5, 1.0};
  seed::SplitMix rng(3003);
  double worst = 0.0;
  int done = 0;
  while (done < 200) {
    std::vector<double> scores(1 + rng.below(16));
    std::size_t nz = 0;
    for (auto& s : scores) {
      s = kValues[rng.below(5)];
      nz += s != 0.0 ? 1 : 0;
    }
    if (nz > 12) continue;
    const auto r = stats::permutation_test(scores, 100000, 7000 + static_cast<std::uint64_t>(done));
    worst = std::max(worst, std::abs(r.p - oracle::exact_sign_flip_p(scores)));
    ++done;
  }
  const double exact3 = oracle::exact_sign_flip_p({1.0, 1.0, 1.0});
  const double floor = stats::permutation_test(std::vector<double>(40, 1.0), 100000, 1).p;
  const bool floor_ok = std::abs(floor - 1.0 / 100001.0) < 1e-15;
  return {worst <= 0.01 && exact3 == 0.25 && floor_ok,
          "max |p_mc - p_exact| = " + fmt("%.5f", worst) + " over 200 vectors; n=3 exact p = " + fmt("%.4f", exact3) +
              "; floor = " + fmt("%.3e", floor)};
}

Outcome spearman_mae() {
  seed::SplitMix rng(4004);
  double worst = 0.0;
  int undefined_agree = 0, defined = 0;
  bool mae_exact = true;
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 3 + rng.below(48);
    std::vector<double> x(n), y(n);
    const std::size_t levels = 2 + rng.below(5);
    for (std::size_t k = 0; k < n; ++k) {
      x[k] = static_cast<double>(rng.below(levels));
      y[k] = static_cast<double>(rng.below(levels)) * 0.5;
    }
    const auto c = stats::spearman(x, y);
    const double o = oracle::spearman_rho(x, y);
    if (std::isnan(o)) {
      undefined_agree += c.rho ? 0 : 1;
    } else if (c.rho) {
      ++defined;
      worst = std::max(worst, std::abs(*c.rho - o));
    } else {
      worst = 1.0;
    }
    mae_exact = mae_exact && stats::mae(x, y) == oracle::mean_abs_diff(x, y);
  }
  std::vector<double> a{3.1, -0.4, 2.2, 9.0, 0.0, 5.5, 1.25};
  std::vector<double> sorted(a);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> reversed(sorted.rbegin(), sorted.rend());
  const bool plus_one = stats::spearman(a, a).rho == 1.0;
  const bool minus_one = stats::spearman(sorted, reversed).rho == -1.0;
  return {worst < 1e-9 && plus_one && minus_one && mae_exact,
          "max |rho - oracle| = " + fmt("%.2e", worst) + " (" + std::to_string(defined) + " defined, " +
              std::to_string(undefined_agree) + " zero-variance agreed); identity " + (plus_one ? "+1" : "WRONG") +
              ", reversal " + (minus_one ? "-1" : "WRONG") + "; MAE " + (mae_exact ? "exact" : "MISMATCH")};
}

std::string candidate(const llm::PromptPayload& p, const std::string& label) {
  for (const auto& m : p.messages) {
    if (m.label == label) return m.text;
  }
  return {};
}

std::shared_ptr<llm::Client> scripted_judge(llm::MockTransport::Responder r) {
  auto t = std::make_shared<llm::MockTransport>(1, std::map<std::string, std::string>{}, std::move(r));
  return llm::make_client(llm::mock_backend(1, "judge"), std::make_shared<llm::AuditLog>(), t);
}

Outcome counterbalance() {
  std::vector<sim::ConversationRecord> records;
  for (int i = 0; i < 6; ++i) {
    auto r = support::make_record("mock", "physics-g10-t0" + std::to_string(i) + "-q1", 50 + i, 0.4);
    for (auto& t : r.turns) {
      for (auto v : prompt::kAllVariants) t.responses[v] = std::string(prompt::to_string(v)) + ": reply " + std::to_string(t.turn_index) + ".";
    }
    records.push_back(r);
  }
  // Ranks LLM_AUM > MLLM_AUM > MLLM > LLM, which puts every pair's left option first.
  auto rank = [](const std::string& text) {
    for (auto [name, r] : {std::pair{"\nLLM_AUM:", 4}, {"\nMLLM_AUM:", 3}, {"\nMLLM:", 2}, {"\nLLM:", 1}}) {
      if (text.find(name) != std::string::npos) return r;
    }
    return 0;
  };
  auto score_all = [&](llm::MockTransport::Responder r) {
    TempDir dir;
    auto client = scripted_judge(std::move(r));
    auto res = judge::ai_judge_campaign(records, *client, dir / "log.ndjson", 1);
    return judge::aggregate_scores(res.judgments);
  };
  auto position = score_all([](const llm::PromptPayload&) { return std::optional<std::string>("A"); });
  auto left = score_all([&](const llm::PromptPayload& p) {
    return std::optional<std::string>(rank(candidate(p, "A")) > rank(candidate(p, "B")) ? "A" : "B");
  });
  std::size_t zero = 0, plus = 0;
  for (const auto& s : position) zero += s.ai_score == 0.0 ? 1 : 0;
  for (const auto& s : left) plus += s.ai_score == 1.0 ? 1 : 0;

  const auto ctx = sim::turn_context(records[0], 3);
  int antisym = 0;
  const int judges = 100;
  for (int k = 0; k < judges; ++k) {
    auto responder = [k](const llm::PromptPayload& p) {
      const auto h = seed::mix(seed::mix(static_cast<std::uint64_t>(k), candidate(p, "A")), candidate(p, "B"));
      return std::optional<std::string>(prompt::kVerdicts[h % 3]);
    };
    bool all = true;
    for (auto pair : judge::kAllPairs) {
      std::map<prompt::TutorVariant, std::string> fwd{{judge::left(pair), "first option " + std::to_string(k)},
                                                      {judge::right(pair), "second option " + std::to_string(k)}};
      std::map<prompt::TutorVariant, std::string> rev{{judge::left(pair), fwd[judge::right(pair)]},
                                                      {judge::right(pair), fwd[judge::left(pair)]}};
      const judge::ItemKey key{"mock", records[0].conversation_id, 3};
      auto a = judge::ai_judge_item(*scripted_judge(responder), ctx, fwd, pair, prompt::Question::Q1, key);
      auto b = judge::ai_judge_item(*scripted_judge(responder), ctx, rev, pair, prompt::Question::Q1, key);
      all = all && a.score && b.score && *a.score == -*b.score;
    }
    antisym += all ? 1 : 0;
  }
  const bool ok = !position.empty() && zero == position.size() && !left.empty() && plus == left.size() &&
                  antisym == judges;
  return {ok, "position-only " + std::to_string(zero) + "/" + std::to_string(position.size()) + " items at 0; " +
                  "left-preferring " + std::to_string(plus) + "/" + std::to_string(left.size()) + " at +1; " +
                  std::to_string(antisym) + "/" + std::to_string(judges) + " random judges antisymmetric"};
}

Outcome extraction() {
  const std::map<char, prompt::TutorVariant> labels{{'A', prompt::TutorVariant::MLLM},
                                                    {'B', prompt::TutorVariant::LLM_AUM},
                                                    {'C', prompt::TutorVariant::LLM},
                                                    {'D', prompt::TutorVariant::MLLM_AUM}};
  auto label_of = [&](prompt::TutorVariant v) {
    for (const auto& [c, var] : labels) {
      if (var == v) return c;
    }
    return '?';
  };
  std::map<std::string, bool> by_order;
  for (const auto& c : oracle::all_chains()) {
    auto outcomes = judge::extract_pairs(judge::parse_ranking(c.text(), labels));
    bool ok = true;
    for (auto p : judge::kAllPairs) {
      ok = ok && judge::score_outcome(outcomes.at(p)) ==
                     oracle::compare(c, label_of(judge::left(p)), label_of(judge::right(p)));
    }
    auto [it, fresh] = by_order.emplace(oracle::weak_order(c), ok);
    if (!fresh) it->second = it->second && ok;
  }
  std::size_t agree = 0;
  for (const auto& [order, ok] : by_order) agree += ok ? 1 : 0;
  return {by_order.size() == 75 && agree == 75,
          std::to_string(agree) + "/" + std::to_string(by_order.size()) + " distinct chains agree with the oracle"};
}

campaign::CampaignConfig e2e_config(const TempDir& dir) {
  nlohmann::json j{{"bank", "bank.json"},
                   {"manifest", "corpus/manifest.json"},
                   {"output", "out"},
                   {"seed", 42},
                   {"concurrency", 4},
                   {"partial_bank", true},
                   {"permutations", 100000},
                   {"student", {{"name", "student-mock"}, {"kind", "mock"}, {"mock_seed", 5}}},
                   {"judge", {{"name", "judge-mock"}, {"kind", "mock"}, {"mock_seed", 6}}},
                   {"backbones", {{{"name", "mock-tutor"}, {"kind", "mock"}, {"mock_seed", 7}}}}};
  return campaign::config_from_json(j, dir.path());
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), root).generic_string();
    if (rel.rfind("audit/", 0) == 0) continue;
    out[rel] = support::slurp(e.path());
  }
  return out;
}

Outcome end_to_end() {
  TempDir dir("ft-accept");
  synthetic::CorpusSpec spec;
  spec.participants = 3;
  spec.frames_per_video = 12;
  synthetic::write_corpus(dir / "corpus", spec);
  auto gen = llm::make_client(llm::mock_backend(9), std::make_shared<llm::AuditLog>());
  corpus::save_problem_bank(corpus::take_partial(corpus::generate_problem_bank(*gen, {9, {}, 1}), 4),
                            dir / "bank.json");
  const auto c = e2e_config(dir);

  campaign::ReportOutputs report;
  auto run = [&] {
    campaign::simulate_backbone(c, "mock-tutor");
    campaign::judge_backbone(c, "mock-tutor");
    campaign::ReportInputs in;
    in.records = sim::load_run(campaign::run_dir(c, "mock-tutor"));
    in.judgments = judge::read_judgment_log(campaign::judgment_log(c, "mock-tutor"));
    in.permutations = c.permutations;
    in.seed = c.stats_seed;
    in.workers = 4;
    report = campaign::write_report(c.output / "report", in);
    return in.records;
  };
  auto records = run();
  fs::rename(c.output, dir / "first");
  run();

  std::size_t turns = 0, responses = 0, echo_ok = 0;
  for (const auto& r : records) {
    if (r.status != sim::ConversationStatus::Complete) continue;
    for (const auto& t : r.turns) {
      ++turns;
      responses += t.responses.size();
      auto has = [&](prompt::TutorVariant v, std::string_view tok) {
        return t.responses.at(v).find(tok) != std::string::npos;
      };
      using prompt::TutorVariant;
      const bool ok = !has(TutorVariant::LLM, llm::kSawAuText) && !has(TutorVariant::LLM, llm::kSawImage) &&
                      has(TutorVariant::LLM_AUM, llm::kSawAuText) && !has(TutorVariant::LLM_AUM, llm::kSawImage) &&
                      has(TutorVariant::MLLM, llm::kSawImage) && !has(TutorVariant::MLLM, llm::kSawAuText) &&
                      has(TutorVariant::MLLM_AUM, llm::kSawImage) && !has(TutorVariant::MLLM_AUM, llm::kSawAuText);
      echo_ok += ok ? 1 : 0;
    }
  }

  bool tables = true;
  for (auto q : prompt::kAllQuestions) {
    const auto text = support::slurp(c.output / "report" / ("table_" + std::string(prompt::to_string(q)) + ".txt"));
    tables = tables && text.find("Backbone") != std::string::npos && text.find("Comparison") != std::string::npos;
    for (auto p : judge::kAllPairs) tables = tables && text.find(judge::display_name(p)) != std::string::npos;
  }
  double q2_mu = 0.0;
  for (const auto& s : report.summaries) {
    if (s.kind == judge::EvaluatorKind::AI && s.question == prompt::Question::Q2 &&
        s.pair == judge::TargetPair::LLM_AUM_vs_LLM) {
      q2_mu = s.mu;
    }
  }

  const auto a = tree(dir / "first");
  const auto b = tree(c.output);
  std::size_t differing = 0;
  for (const auto& [path, bytes] : a) {
    auto it = b.find(path);
    differing += it == b.end() || it->second != bytes ? 1 : 0;
  }
  differing += b.size() > a.size() ? b.size() - a.size() : 0;

  const bool ok = records.size() == 4 && turns == 20 && responses == 80 && echo_ok == 20 && tables && differing == 0;
  return {ok, std::to_string(records.size()) + " conversations, " + std::to_string(turns) + " turns, " +
                  std::to_string(responses) + " responses; echo tokens correct on " + std::to_string(echo_ok) +
                  " turns; Q1-Q3 tables " + (tables ? "well-formed" : "MALFORMED") + "; Q2 LLM+AUM vs LLM AI mu = " +
                  fmt("%+.3f", q2_mu) + "; " + std::to_string(a.size()) + " output files, " +
                  std::to_string(differing) + " differ between runs"};
}

Outcome sampling() {
  std::vector<sim::ConversationRecord> records;
  for (int i = 0; i < 100; ++i) {
    records.push_back(support::make_record("mock", "biology-g12-t" + std::to_string(100 + i) + "-q1", 900 + i));
  }
  auto a = judge::sample_human_eval_set(records, 100, 77);
  auto b = judge::sample_human_eval_set(records, 100, 77);
  std::map<int, int> counts;
  for (const auto& it : a) ++counts[it.item.turn_index];
  bool exact = counts.size() == 5;
  for (const auto& [t, n] : counts) exact = exact && n == 20;
  const bool same = judge::assignment_to_json(a, 77) == judge::assignment_to_json(b, 77);
  std::string detail = "turn counts";
  for (const auto& [t, n] : counts) detail += " " + std::to_string(t) + ":" + std::to_string(n);
  return {exact && same && a.size() == 100, detail + (same ? "; deterministic" : "; NOT deterministic")};
}

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {"AU mapping fidelity", 1.0, au_mapping},
      {"Peak-frame oracle", 5.0, peak_frames},
      {"Permutation-test exactness", 120.0, permutation_exactness},
      {"Spearman/MAE oracles", 10.0, spearman_mae},
      {"Counterbalance property", 10.0, counterbalance},
      {"Extraction oracle", 1.0, extraction},
      {"End-to-end mock reproduction", 30.0, end_to_end},
      {"Sampling balance", 1.0, sampling},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.ok && secs < c.budget_s;
    failures += pass ? 0 : 1;
    std::printf("%s  %-30s %8.3fs (limit %gs)  %s\n", pass ? "PASS" : "FAIL", c.name.c_str(), secs, c.budget_s,
                o.detail.c_str());
    std::fflush(stdout);
  }

  const char* live = std::getenv("FACETUTOR_LIVE_CONFIG");
  if (!live || !*live) {
    std::printf("SKIP  %-30s %8s   (set FACETUTOR_LIVE_CONFIG to run)\n", "Live direction smoke test", "-");
  } else {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      auto cfg = campaign::load_config(live);
      const auto& backbone = cfg.backbones.front().name;
      campaign::simulate_backbone(cfg, backbone);
      campaign::judge_backbone(cfg, backbone);
      campaign::ReportInputs in;
      in.records = sim::load_run(campaign::run_dir(cfg, backbone));
      in.judgments = judge::read_judgment_log(campaign::judgment_log(cfg, backbone));
      in.permutations = cfg.permutations;
      in.seed = cfg.stats_seed;
      auto rep = campaign::write_report(cfg.output / "report", in);
      for (const auto& s : rep.summaries) {
        if (s.kind == judge::EvaluatorKind::AI && s.question == prompt::Question::Q2 &&
            s.pair == judge::TargetPair::LLM_AUM_vs_LLM) {
          o = {true, backbone + ": Q2 LLM+AUM vs LLM mu = " + fmt("%+.3f", s.mu) + ", p = " + stats::format_p(s.p)};
        }
      }
      if (!o.ok) o.detail = "report has no Q2 LLM+AUM vs LLM cell";
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += o.ok ? 0 : 1;
    std::printf("%s  %-30s %8.3fs  %s\n", o.ok ? "PASS" : "FAIL", "Live direction smoke test", secs, o.detail.c_str());
  }
  return failures == 0 ? 0 : 1;
}
