#include <doctest.h>

#include <cmath>
#include <numbers>

#include "facetutor/stats.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace facetutor;
using namespace facetutor::stats;

namespace {

std::vector<double> random_scores(seed::SplitMix& rng, std::size_t n) {
  static constexpr double kValues[] = {-1.0, -0.5, 0.0, 0.5, 1.0};
  std::vector<double> out(n);
  for (auto& v : out) v = kValues[rng.below(5)];
  return out;
}

// Two-sided Student-t tail by Simpson integration of the density.
double t_two_sided(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * std::numbers::pi);
  auto f = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int steps = 20000;
  const double h = std::abs(t) / steps;
  double s = f(0) + f(std::abs(t));
  for (int i = 1; i < steps; ++i) s += f(i * h) * (i % 2 ? 4 : 2);
  return 1.0 - 2.0 * s * h / 3.0;
}

judge::ItemScore item(const std::string& backbone, int i, prompt::Question q, judge::TargetPair p,
                      std::optional<double> ai, std::optional<double> human = std::nullopt, double std_dev = 0.0) {
  judge::ItemScore s;
  s.item = {backbone, "c" + std::to_string(i), 1 + i % 5};
  s.question = q;
  s.pair = p;
  s.ai_score = ai;
  s.human_score = human;
  s.human_std = std_dev;
  s.n_human_raters = human ? 5 : 0;
  return s;
}

}  // namespace

TEST_CASE("permutation test edge cases") {
  auto r = permutation_test({1.0}, 1000, 1);
  CHECK(r.n_nonzero == 1);
  CHECK(r.mu == 1.0);
  CHECK(r.p == 1.0);

  auto z = permutation_test({0.0, 0.0, 0.0}, 1000, 1);
  CHECK(z.n_nonzero == 0);
  CHECK(z.mu == 0.0);
  CHECK(z.p == 1.0);
  CHECK(permutation_test({}, 10, 1).p == 1.0);

  auto three = permutation_test({1.0, 1.0, 1.0}, 100000, 7);
  CHECK(three.p == doctest::Approx(0.25).epsilon(0.04));
  CHECK(oracle::exact_sign_flip_p({1.0, 1.0, 1.0}) == 0.25);

  auto floor = permutation_test(std::vector<double>(30, 1.0), 100000, 7);
  CHECK(floor.p == doctest::Approx(1.0 / 100001.0).epsilon(1e-12));
  CHECK(floor.p > 0.0);
  CHECK_THROWS_AS(permutation_test({1.0}, 0, 1), StatsError);
}

TEST_CASE("permutation p tracks exhaustive enumeration") {
  seed::SplitMix rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    auto scores = random_scores(rng, 1 + rng.below(16));
    std::vector<double> nz;
    for (double s : scores) {
      if (s != 0.0) nz.push_back(s);
    }
    if (nz.size() > 12) continue;
    auto r = permutation_test(scores, 40000, trial);
    CHECK(r.n_nonzero == nz.size());
    CHECK(std::abs(r.p - oracle::exact_sign_flip_p(scores)) <= 0.01);
  }
}

TEST_CASE("permutation test is sign symmetric and worker independent") {
  seed::SplitMix rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto scores = random_scores(rng, 20);
    std::vector<double> neg(scores.size());
    std::transform(scores.begin(), scores.end(), neg.begin(), [](double v) { return -v; });
    auto a = permutation_test(scores, 5000, 77);
    auto b = permutation_test(neg, 5000, 77);
    CHECK(a.n_nonzero == b.n_nonzero);
    CHECK(std::abs(a.mu) == doctest::Approx(std::abs(b.mu)));
    CHECK(a.p == b.p);
    for (std::size_t w : {2, 3, 7}) CHECK(permutation_test(scores, 5000, 77, w).p == a.p);
    CHECK(a.p > 0.0);
    CHECK(a.p <= 1.0);
  }
}

TEST_CASE("average ranks and Spearman match the oracle") {
  CHECK(average_ranks({10, 20, 20, 30}) == std::vector<double>{1, 2.5, 2.5, 4});
  auto tied = spearman({1, 2, 2, 3}, {1, 1, 2, 3});
  REQUIRE(tied.rho);
  CHECK(std::abs(*tied.rho - oracle::spearman_rho({1, 2, 2, 3}, {1, 1, 2, 3})) < 1e-9);

  seed::SplitMix rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(40);
    auto x = random_scores(rng, n);
    auto y = random_scores(rng, n);
    CHECK(average_ranks(x) == oracle::ranks(x));
    auto c = spearman(x, y);
    const double ox = oracle::pearson(oracle::ranks(x), oracle::ranks(x));
    if (std::isnan(ox) || std::isnan(oracle::pearson(oracle::ranks(y), oracle::ranks(y)))) {
      CHECK_FALSE(c.rho);
      continue;
    }
    REQUIRE(c.rho);
    const double rho = oracle::spearman_rho(x, y);
    CHECK(std::abs(*c.rho - rho) < 1e-9);
    REQUIRE(c.p);
    if (std::abs(rho) < 0.999) {
      const double t = rho * std::sqrt((n - 2.0) / (1.0 - rho * rho));
      CHECK(std::abs(*c.p - t_two_sided(t, n - 2.0)) < 1e-6);
    }
  }
}

TEST_CASE("Spearman extremes and monotone invariance") {
  std::vector<double> x{0.3, 1.5, -2.0, 4.0, 2.2, 0.9};
  auto same = spearman(x, x);
  CHECK(*same.rho == doctest::Approx(1.0));
  CHECK(*same.p == 0.0);
  std::vector<double> rev(x);
  std::sort(rev.begin(), rev.end());
  std::vector<double> sorted(rev);
  std::reverse(rev.begin(), rev.end());
  CHECK(*spearman(sorted, rev).rho == doctest::Approx(-1.0));

  seed::SplitMix rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(15), b(15);
    for (auto& v : a) v = rng.unit() * 4 - 2;
    for (auto& v : b) v = rng.unit();
    std::vector<double> ta(a.size());
    std::transform(a.begin(), a.end(), ta.begin(), [](double v) { return std::exp(v) * 3 + v; });
    CHECK(std::abs(*spearman(a, b).rho - *spearman(ta, b).rho) < 1e-12);
  }
  CHECK_FALSE(spearman({1, 1, 1}, {1, 2, 3}).rho);
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2}), StatsError);
  CHECK_THROWS_AS(spearman({1, 2, 3}, {1, 2}), StatsError);
}

TEST_CASE("MAE") {
  CHECK(mae({1, -1}, {0, 0}) == 1.0);
  CHECK(mae({0.5, 0.5}, {0.5, 0.5}) == 0.0);
  CHECK_THROWS_AS(mae({1}, {1, 2}), StatsError);
  CHECK_THROWS_AS(mae({}, {}), StatsError);
  seed::SplitMix rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_scores(rng, 12), y = random_scores(rng, 12), z = random_scores(rng, 12);
    CHECK(mae(x, y) == doctest::Approx(oracle::mean_abs_diff(x, y)));
    CHECK(mae(x, z) <= mae(x, y) + mae(y, z) + 1e-12);
  }
}

TEST_CASE("cell summaries") {
  using judge::TargetPair;
  using prompt::Question;
  std::vector<judge::ItemScore> scores;
  for (int i = 0; i < 12; ++i) {
    scores.push_back(item("b1", i, Question::Q2, TargetPair::LLM_AUM_vs_LLM, 1.0));
    scores.push_back(item("b1", i, Question::Q1, TargetPair::LLM_AUM_vs_LLM, 0.0));
    scores.push_back(item("b1", i, Question::Q1, TargetPair::MLLM_AUM_vs_MLLM, i % 3 == 0 ? 0.0 : -0.5, 1.0));
  }
  auto ai = build_cell_summaries(scores, EvaluatorKind::AI, 2000, 9);
  REQUIRE(ai.size() == 3);
  for (const auto& s : ai) {
    CHECK(s.n_items == 12);
    if (s.question == Question::Q2) {
      CHECK(s.mu == 1.0);
      CHECK(s.n_nonzero == 12);
      CHECK(s.p == doctest::Approx(1.0 / 2001.0));
    } else if (s.pair == TargetPair::LLM_AUM_vs_LLM) {
      CHECK(s.n_nonzero == 0);
      CHECK(s.p == 1.0);
    } else {
      CHECK(s.n_nonzero == 8);
      CHECK(s.mu == -0.5);
    }
  }
  auto human = build_cell_summaries(scores, EvaluatorKind::Human, 2000, 9);
  REQUIRE(human.size() == 1);
  CHECK(human[0].pair == TargetPair::MLLM_AUM_vs_MLLM);
  CHECK(human[0].mu == 1.0);
  CHECK(build_cell_summaries({}, EvaluatorKind::AI).empty());

  auto again = build_cell_summaries(scores, EvaluatorKind::AI, 2000, 9, 4);
  for (std::size_t i = 0; i < ai.size(); ++i) CHECK(again[i].p == ai[i].p);

  auto csv = summaries_csv(ai);
  CHECK(csv.rfind("question,backbone,comparison,evaluator,n_items,n,mu,p\n", 0) == 0);
  auto table = summary_table(ai, Question::Q2);
  CHECK(table.find("LLM+AUM vs. LLM") != std::string::npos);
  CHECK(table.find("5.00e-04") != std::string::npos);
  CHECK(format_p(0.25) == "0.2500");
  CHECK(format_p(1.0 / 100001.0) == "1.00e-05");
}

TEST_CASE("agreement report") {
  using judge::TargetPair;
  using prompt::Question;
  SUBCASE("identical scores agree perfectly") {
    std::vector<judge::ItemScore> s;
    const double v[] = {-1, -0.5, 0, 0.5, 1, 0.5};
    for (int i = 0; i < 6; ++i) s.push_back(item("b", i, Question::Q1, TargetPair::LLM_AUM_vs_LLM, v[i], v[i], i * 0.1));
    auto r = agreement_report(s);
    REQUIRE(r.questions.size() == 1);
    CHECK(r.questions[0].n_items == 6);
    CHECK(r.questions[0].mae == 0.0);
    CHECK(*r.questions[0].agreement.rho == doctest::Approx(1.0));
    CHECK(r.notices.size() == 2);
  }
  SUBCASE("disagreement grows with rater spread") {
    std::vector<judge::ItemScore> s;
    for (int i = 0; i < 10; ++i) {
      const double gap = 0.1 * i;
      s.push_back(item("b", i, Question::Q2, TargetPair::LLM_AUM_vs_LLM, gap - 0.5, -0.5, 0.05 * i + 0.01));
    }
    auto r = agreement_report(s);
    REQUIRE(r.questions.size() == 1);
    CHECK(*r.questions[0].disagreement.rho > 0.9);
  }
  SUBCASE("two joint items are not enough") {
    std::vector<judge::ItemScore> s{item("b", 0, Question::Q3, TargetPair::LLM_AUM_vs_LLM, 1.0, 1.0),
                                    item("b", 1, Question::Q3, TargetPair::LLM_AUM_vs_LLM, 0.0, 1.0),
                                    item("b", 2, Question::Q3, TargetPair::LLM_AUM_vs_LLM, 0.0)};
    auto r = agreement_report(s);
    CHECK(r.questions.empty());
    CHECK(r.notices.size() == 3);
    CHECK(agreement_text(r).find("Q3") != std::string::npos);
  }
}

TEST_CASE("token overhead") {
  std::vector<sim::ConversationRecord> records{support::make_record("b", "c1", 1), support::make_record("b", "c2", 2)};
  for (auto& r : records) {
    for (auto& t : r.turns) {
      t.usage[prompt::TutorVariant::LLM] = {90, 5};
      t.usage[prompt::TutorVariant::LLM_AUM] = {100, 5};
      t.usage[prompt::TutorVariant::MLLM_AUM] = {200, 5};
    }
  }
  auto rep = token_overhead_report(records);
  REQUIRE(rep.mllm_aum_over_llm_aum);
  CHECK(*rep.mllm_aum_over_llm_aum == doctest::Approx(2.0));
  bool saw_mllm = false;
  for (const auto& v : rep.variants) {
    saw_mllm = saw_mllm || v.variant == prompt::TutorVariant::MLLM;
    if (v.variant == prompt::TutorVariant::LLM) {
      CHECK(v.turns == 10);
      CHECK(v.mean_input_tokens == doctest::Approx(90.0));
      CHECK(*v.ratio_vs_llm_aum == doctest::Approx(0.9));
    }
  }
  CHECK_FALSE(saw_mllm);
  CHECK(token_overhead_text(rep).find("2.00") != std::string::npos);
}
