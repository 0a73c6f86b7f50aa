#include "facetutor/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "facetutor/seed.hpp"

namespace facetutor::stats {

namespace {

constexpr double kTieTolerance = 1e-12;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::size_t count_extreme(const std::vector<double>& x, double threshold, std::uint64_t seed, std::size_t begin,
                          std::size_t end) {
  const double n = static_cast<double>(x.size());
  std::size_t count = 0;
  for (std::size_t k = begin; k < end; ++k) {
    seed::SplitMix rng(seed::mix(seed, static_cast<std::uint64_t>(k)));
    std::uint64_t bits = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (i % 64 == 0) bits = rng.next();
      sum += ((bits >> (i % 64)) & 1U) ? -x[i] : x[i];
    }
    if (std::abs(sum / n) >= threshold) ++count;
  }
  return count;
}

Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  Correlation out;
  out.n = x.size();
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return out;
  const double rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  out.rho = rho;
  const double df = n - 2.0;
  if (std::abs(rho) >= 1.0) {
    out.p = 0.0;
  } else {
    const double t = rho * std::sqrt(df / (1.0 - rho * rho));
    boost::math::students_t dist(df);
    out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return out;
}

std::optional<double> cell_score(const judge::ItemScore& s, EvaluatorKind kind) {
  return kind == EvaluatorKind::AI ? s.ai_score : s.human_score;
}

}  // namespace

PermutationResult permutation_test(const std::vector<double>& scores, std::size_t n_perm, std::uint64_t seed,
                                   std::size_t workers) {
  if (n_perm < 1) throw StatsError("permutation_test needs n_perm >= 1");
  std::vector<double> x;
  for (double s : scores) {
    if (s != 0.0) x.push_back(s);
  }
  PermutationResult out;
  out.n_nonzero = x.size();
  if (x.empty()) return out;
  out.mu = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  const double threshold = std::abs(out.mu) - kTieTolerance;

  workers = std::clamp<std::size_t>(workers, 1, n_perm);
  std::size_t count = 0;
  if (workers == 1) {
    count = count_extreme(x, threshold, seed, 0, n_perm);
  } else {
    std::vector<std::size_t> partial(workers, 0);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n_perm + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = std::min(n_perm, w * chunk);
      const std::size_t e = std::min(n_perm, b + chunk);
      pool.emplace_back([&, w, b, e] { partial[w] = count_extreme(x, threshold, seed, b, e); });
    }
    for (auto& t : pool) t.join();
    count = std::accumulate(partial.begin(), partial.end(), std::size_t{0});
  }
  out.p = static_cast<double>(1 + count) / static_cast<double>(n_perm + 1);
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw StatsError("spearman: length mismatch");
  if (x.size() < 3) throw StatsError("spearman: need at least 3 pairs");
  return pearson(average_ranks(x), average_ranks(y));
}

double mae(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw StatsError("mae: length mismatch");
  if (x.empty()) throw StatsError("mae: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
  return total / static_cast<double>(x.size());
}

std::vector<StatsSummary> build_cell_summaries(const std::vector<judge::ItemScore>& scores, EvaluatorKind kind,
                                               std::size_t n_perm, std::uint64_t seed, std::size_t workers) {
  std::map<std::tuple<std::string, TargetPair, Question>, std::vector<double>> cells;
  for (const auto& s : scores) {
    if (auto v = cell_score(s, kind)) cells[{s.item.backbone, s.pair, s.question}].push_back(*v);
  }
  std::vector<StatsSummary> out;
  for (const auto& [key, values] : cells) {
    const auto& [backbone, pair, question] = key;
    auto cell_seed = seed::mix(seed::mix(seed::mix(seed, backbone), judge::to_string(pair)),
                               prompt::to_string(question));
    auto r = permutation_test(values, n_perm, cell_seed, workers);
    out.push_back({backbone, pair, question, kind, values.size(), r.n_nonzero, r.mu, r.p});
  }
  return out;
}

AgreementReport agreement_report(const std::vector<judge::ItemScore>& scores) {
  AgreementReport report;
  for (auto q : prompt::kAllQuestions) {
    std::vector<double> ai, human, gap, spread;
    for (const auto& s : scores) {
      if (s.question != q || !s.ai_score || !s.human_score) continue;
      ai.push_back(*s.ai_score);
      human.push_back(*s.human_score);
      gap.push_back(std::abs(*s.ai_score - *s.human_score));
      spread.push_back(s.human_std);
    }
    if (ai.size() < kMinAgreementItems) {
      report.notices.push_back(std::string(prompt::to_string(q)) + " omitted: " + std::to_string(ai.size()) +
                               " items with both AI and human scores");
      continue;
    }
    QuestionAgreement qa;
    qa.question = q;
    qa.n_items = ai.size();
    qa.agreement = spearman(ai, human);
    qa.mae = mae(ai, human);
    qa.disagreement = spearman(gap, spread);
    report.questions.push_back(qa);
  }
  return report;
}

TokenOverheadReport token_overhead_report(const std::vector<sim::ConversationRecord>& records) {
  std::map<prompt::TutorVariant, std::pair<std::size_t, double>> totals;
  for (const auto& rec : records) {
    for (const auto& t : rec.turns) {
      for (const auto& [variant, usage] : t.usage) {
        if (usage.input_tokens <= 0) continue;
        auto& slot = totals[variant];
        ++slot.first;
        slot.second += static_cast<double>(usage.input_tokens);
      }
    }
  }
  TokenOverheadReport out;
  std::optional<double> base;
  if (auto it = totals.find(prompt::TutorVariant::LLM_AUM); it != totals.end()) {
    base = it->second.second / static_cast<double>(it->second.first);
  }
  for (auto v : prompt::kAllVariants) {
    auto it = totals.find(v);
    if (it == totals.end()) continue;
    VariantTokens row{v, it->second.first, it->second.second / static_cast<double>(it->second.first), std::nullopt};
    if (base) row.ratio_vs_llm_aum = row.mean_input_tokens / *base;
    if (v == prompt::TutorVariant::MLLM_AUM) out.mllm_aum_over_llm_aum = row.ratio_vs_llm_aum;
    out.variants.push_back(row);
  }
  return out;
}

std::string format_p(double p) { return p >= 1e-3 ? fmt("%.4f", p) : fmt("%.2e", p); }

std::string summaries_csv(const std::vector<StatsSummary>& summaries) {
  std::ostringstream out;
  out << "question,backbone,comparison,evaluator,n_items,n,mu,p\n";
  for (auto q : prompt::kAllQuestions) {
    for (const auto& s : summaries) {
      if (s.question != q) continue;
      out << prompt::to_string(q) << ',' << s.backbone << ',' << judge::display_name(s.pair) << ','
          << (s.kind == EvaluatorKind::AI ? "AI" : "Human") << ',' << s.n_items << ',' << s.n_nonzero << ','
          << fmt("%.4f", s.mu) << ',' << format_p(s.p) << '\n';
    }
  }
  return out.str();
}

std::string summary_table(const std::vector<StatsSummary>& summaries, Question question) {
  struct Row {
    std::optional<StatsSummary> human, ai;
  };
  std::map<std::pair<std::string, TargetPair>, Row> rows;
  for (const auto& s : summaries) {
    if (s.question != question) continue;
    auto& row = rows[{s.backbone, s.pair}];
    (s.kind == EvaluatorKind::AI ? row.ai : row.human) = s;
  }
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Backbone", "Comparison", "Human n", "Human mu", "Human p", "AI n", "AI mu", "AI p"});
  for (const auto& [key, row] : rows) {
    std::vector<std::string> line{key.first, std::string(judge::display_name(key.second))};
    for (const auto* s : {&row.human, &row.ai}) {
      if (*s) {
        line.push_back(std::to_string((*s)->n_nonzero));
        line.push_back(fmt("%+.3f", (*s)->mu));
        line.push_back(format_p((*s)->p));
      } else {
        line.insert(line.end(), {"-", "-", "-"});
      }
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream out;
  out << prompt::to_string(question) << '\n';
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const auto& v = cells[r][c];
      if (c < 2) {
        out << v << std::string(width[c] - v.size(), ' ');
      } else {
        out << std::string(width[c] - v.size(), ' ') << v;
      }
      out << (c + 1 < cells[r].size() ? "  " : "\n");
    }
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  return out.str();
}

std::string agreement_text(const AgreementReport& report) {
  std::ostringstream out;
  out << "Question  n  rho  p  MAE  disagreement_rho  disagreement_p\n";
  auto rho = [](const Correlation& c) { return c.rho ? fmt("%.3f", *c.rho) : std::string("undefined"); };
  auto pv = [](const Correlation& c) { return c.p ? format_p(*c.p) : std::string("-"); };
  for (const auto& q : report.questions) {
    out << prompt::to_string(q.question) << "  " << q.n_items << "  " << rho(q.agreement) << "  " << pv(q.agreement)
        << "  " << fmt("%.3f", q.mae) << "  " << rho(q.disagreement) << "  " << pv(q.disagreement) << '\n';
  }
  for (const auto& n : report.notices) out << "note: " << n << '\n';
  return out.str();
}

std::string token_overhead_text(const TokenOverheadReport& report) {
  std::ostringstream out;
  out << "Variant  turns  mean_input_tokens  ratio_vs_LLM_AUM\n";
  for (const auto& v : report.variants) {
    out << prompt::to_string(v.variant) << "  " << v.turns << "  " << fmt("%.1f", v.mean_input_tokens) << "  "
        << (v.ratio_vs_llm_aum ? fmt("%.3f", *v.ratio_vs_llm_aum) : std::string("-")) << '\n';
  }
  if (report.mllm_aum_over_llm_aum) out << "MLLM_AUM / LLM_AUM = " << fmt("%.3f", *report.mllm_aum_over_llm_aum) << '\n';
  return out.str();
}

nlohmann::json to_json(const StatsSummary& s) {
  return {{"backbone", s.backbone},
          {"pair", std::string(judge::to_string(s.pair))},
          {"question", std::string(prompt::to_string(s.question))},
          {"evaluator", std::string(judge::to_string(s.kind))},
          {"n_items", s.n_items},
          {"n_nonzero", s.n_nonzero},
          {"mu", s.mu},
          {"p", s.p}};
}

namespace {
nlohmann::json corr_json(const Correlation& c) {
  return {{"n", c.n},
          {"rho", c.rho ? nlohmann::json(*c.rho) : nlohmann::json(nullptr)},
          {"p", c.p ? nlohmann::json(*c.p) : nlohmann::json(nullptr)}};
}
}  // namespace

nlohmann::json to_json(const AgreementReport& r) {
  nlohmann::json out{{"questions", nlohmann::json::array()}, {"notices", r.notices}};
  for (const auto& q : r.questions) {
    out["questions"].push_back({{"question", std::string(prompt::to_string(q.question))},
                                {"n_items", q.n_items},
                                {"spearman", corr_json(q.agreement)},
                                {"mae", q.mae},
                                {"disagreement", corr_json(q.disagreement)}});
  }
  return out;
}

nlohmann::json to_json(const TokenOverheadReport& r) {
  nlohmann::json out{{"variants", nlohmann::json::array()}};
  for (const auto& v : r.variants) {
    out["variants"].push_back(
        {{"variant", std::string(prompt::to_string(v.variant))},
         {"turns", v.turns},
         {"mean_input_tokens", v.mean_input_tokens},
         {"ratio_vs_llm_aum", v.ratio_vs_llm_aum ? nlohmann::json(*v.ratio_vs_llm_aum) : nlohmann::json(nullptr)}});
  }
  out["mllm_aum_over_llm_aum"] =
      r.mllm_aum_over_llm_aum ? nlohmann::json(*r.mllm_aum_over_llm_aum) : nlohmann::json(nullptr);
  return out;
}

}  // namespace facetutor::stats
