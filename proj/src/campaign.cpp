#include "facetutor/campaign.hpp"

#include <fstream>

#include <spdlog/spdlog.h>

#include "facetutor/corpus.hpp"

namespace facetutor::campaign {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path.lexically_normal() : (base / path).lexically_normal();
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
}

}  // namespace

CampaignConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  CampaignConfig c;
  try {
    const auto base = fs::absolute(base_dir);
    c.bank = resolve(base, j.at("bank").get<std::string>());
    c.manifest = resolve(base, j.at("manifest").get<std::string>());
    c.output = resolve(base, j.at("output").get<std::string>());
    if (j.contains("templates") && j["templates"].is_string()) {
      c.templates = resolve(base, j["templates"].get<std::string>());
    }
    for (const auto& b : j.at("backbones")) c.backbones.push_back(llm::handle_from_json(b));
    c.student = llm::handle_from_json(j.at("student"));
    c.judge = llm::handle_from_json(j.at("judge"));
    if (j.contains("generator")) c.generator = llm::handle_from_json(j["generator"]);
    c.seed = j.value("seed", c.seed);
    c.judge_seed = j.value("judge_seed", c.judge_seed);
    c.stats_seed = j.value("stats_seed", c.stats_seed);
    c.permutations = j.value("permutations", c.permutations);
    c.concurrency = j.value("concurrency", c.concurrency);
    c.history_au = j.value("history_au", c.history_au);
    c.history_images = j.value("history_images", c.history_images);
    c.partial_bank = j.value("partial_bank", c.partial_bank);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed campaign config: ") + e.what());
  }
  if (c.backbones.empty()) throw ConfigError("campaign config lists no backbones");
  std::set<std::string> names;
  for (const auto& b : c.backbones) {
    if (!names.insert(b.name).second) throw ConfigError("duplicate backbone name " + b.name);
  }
  if (c.concurrency < 1) throw ConfigError("concurrency must be at least 1");
  if (c.permutations < 1) throw ConfigError("permutations must be at least 1");
  return c;
}

CampaignConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

nlohmann::json to_json(const CampaignConfig& c) {
  nlohmann::json j{{"bank", c.bank.string()},
                   {"manifest", c.manifest.string()},
                   {"output", c.output.string()},
                   {"backbones", nlohmann::json::array()},
                   {"student", llm::to_json(c.student)},
                   {"judge", llm::to_json(c.judge)},
                   {"seed", c.seed},
                   {"judge_seed", c.judge_seed},
                   {"stats_seed", c.stats_seed},
                   {"permutations", c.permutations},
                   {"concurrency", c.concurrency},
                   {"history_au", c.history_au},
                   {"history_images", c.history_images},
                   {"partial_bank", c.partial_bank}};
  if (c.templates) j["templates"] = c.templates->string();
  if (c.generator) j["generator"] = llm::to_json(*c.generator);
  for (const auto& b : c.backbones) j["backbones"].push_back(llm::to_json(b));
  return j;
}

void validate_for_simulation(const CampaignConfig& c) {
  require_file(c.bank, "problem bank");
  require_file(c.manifest, "expression manifest");
  if (c.templates && !fs::is_directory(*c.templates)) {
    throw ConfigError("template directory not found: " + c.templates->string());
  }
  llm::check_credentials(c.student);
  for (const auto& b : c.backbones) llm::check_credentials(b);
}

const llm::BackendHandle& find_backbone(const CampaignConfig& c, const std::string& name) {
  for (const auto& b : c.backbones) {
    if (b.name == name) return b;
  }
  throw ConfigError("backbone " + name + " is not in the campaign config");
}

prompt::Templates load_templates(const CampaignConfig& c) {
  return c.templates ? prompt::Templates::load(*c.templates) : prompt::Templates::defaults();
}

sim::SimulationOptions simulation_options(const CampaignConfig& c) {
  sim::SimulationOptions o;
  o.tutor.history_au = c.history_au;
  o.tutor.history_images = c.history_images;
  o.templates = load_templates(c);
  return o;
}

fs::path run_dir(const CampaignConfig& c, const std::string& backbone) { return c.output / "runs" / backbone; }

fs::path judgment_log(const CampaignConfig& c, const std::string& backbone) {
  return c.output / "judgments" / (backbone + ".ndjson");
}

fs::path audit_path(const CampaignConfig& c, const std::string& command) {
  return c.output / "audit" / (command + ".ndjson");
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

sim::CampaignResult simulate_backbone(const CampaignConfig& c, const std::string& backbone) {
  const auto& handle = find_backbone(c, backbone);
  validate_for_simulation(c);
  auto bank = corpus::load_problem_bank(c.bank);
  if (bank.partial && !c.partial_bank) {
    throw ConfigError("bank " + c.bank.string() + " is partial; set partial_bank in the config to run it");
  }
  auto manifest = corpus::load_expression_manifest(c.manifest);
  for (const auto& w : manifest.warnings) spdlog::warn("{}", w);

  auto dir = run_dir(c, backbone);
  fs::create_directories(dir);
  write_text_atomic(dir / "config.json", to_json(c).dump(2) + "\n");

  auto audit = std::make_shared<llm::AuditLog>(audit_path(c, "simulate-" + backbone));
  auto student = llm::make_client(c.student, audit);
  auto tutor = llm::make_client(handle, audit);
  sim::CampaignOptions options;
  options.seed = c.seed;
  options.concurrency = c.concurrency;
  options.simulation = simulation_options(c);
  return sim::run_campaign(bank, manifest, *student, *tutor, dir, options);
}

judge::AiCampaignResult judge_backbone(const CampaignConfig& c, const std::string& backbone) {
  llm::check_credentials(c.judge);
  auto records = sim::load_run(run_dir(c, backbone));
  if (records.empty()) throw ConfigError("no conversation records under " + run_dir(c, backbone).string());
  auto audit = std::make_shared<llm::AuditLog>(audit_path(c, "judge-" + backbone));
  auto client = llm::make_client(c.judge, audit);
  return judge::ai_judge_campaign(records, *client, judgment_log(c, backbone), c.concurrency, load_templates(c));
}

ReportOutputs write_report(const fs::path& dir, const ReportInputs& inputs) {
  ReportOutputs out;
  auto scores = judge::aggregate_scores(inputs.judgments);
  for (auto kind : {judge::EvaluatorKind::Human, judge::EvaluatorKind::AI}) {
    auto cells = stats::build_cell_summaries(scores, kind, inputs.permutations, inputs.seed, inputs.workers);
    out.summaries.insert(out.summaries.end(), cells.begin(), cells.end());
  }
  out.agreement = stats::agreement_report(scores);
  out.tokens = stats::token_overhead_report(inputs.records);

  fs::create_directories(dir);
  write_text_atomic(dir / "summary.csv", stats::summaries_csv(out.summaries));
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : out.summaries) summary.push_back(stats::to_json(s));
  write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");
  for (auto q : prompt::kAllQuestions) {
    write_text_atomic(dir / ("table_" + std::string(prompt::to_string(q)) + ".txt"),
                      stats::summary_table(out.summaries, q));
  }
  write_text_atomic(dir / "agreement.txt", stats::agreement_text(out.agreement));
  write_text_atomic(dir / "agreement.json", stats::to_json(out.agreement).dump(2) + "\n");
  write_text_atomic(dir / "token_overhead.txt", stats::token_overhead_text(out.tokens));
  write_text_atomic(dir / "token_overhead.json", stats::to_json(out.tokens).dump(2) + "\n");
  return out;
}

}  // namespace facetutor::campaign
