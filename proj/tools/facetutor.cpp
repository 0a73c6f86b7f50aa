#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "facetutor/campaign.hpp"
#include "facetutor/corpus.hpp"
#include "facetutor/eval_service.hpp"
#include "facetutor/synthetic.hpp"

namespace fs = std::filesystem;
using namespace facetutor;

namespace {

std::vector<std::string> selected_backbones(const campaign::CampaignConfig& cfg, const std::string& only) {
  if (!only.empty()) return {campaign::find_backbone(cfg, only).name};
  std::vector<std::string> out;
  for (const auto& b : cfg.backbones) out.push_back(b.name);
  return out;
}

std::vector<sim::ConversationRecord> load_runs(const std::vector<fs::path>& dirs) {
  std::vector<sim::ConversationRecord> out;
  for (const auto& d : dirs) {
    auto recs = sim::load_run(d);
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("file not found: " + p.string());
  return nlohmann::json::parse(in);
}

int cmd_synth_corpus(const fs::path& out, synthetic::CorpusSpec spec) {
  auto manifest = synthetic::write_corpus(out, spec);
  std::cout << "wrote " << manifest.string() << "\n";
  return 0;
}

int cmd_gen_problems(const campaign::CampaignConfig& cfg, std::size_t partial, const std::string& out_override,
                     std::uint64_t seed) {
  const auto& handle = cfg.generator ? *cfg.generator : cfg.student;
  llm::check_credentials(handle);
  fs::path out = out_override.empty() ? cfg.bank : fs::path(out_override);
  auto audit = std::make_shared<llm::AuditLog>(campaign::audit_path(cfg, "gen-problems"));
  auto client = llm::make_client(handle, audit);
  corpus::GenerationOptions opts;
  opts.seed = seed;
  opts.transcript_path = fs::path(out.string() + ".transcript.ndjson");
  opts.concurrency = cfg.concurrency;
  auto bank = corpus::generate_problem_bank(*client, opts);
  if (partial > 0) bank = corpus::take_partial(bank, partial);
  corpus::save_problem_bank(bank, out);
  std::cout << "wrote " << bank.problems.size() << " problems to " << out.string() << "\n";
  return 0;
}

int cmd_simulate(const campaign::CampaignConfig& cfg, const std::string& only) {
  int rc = 0;
  for (const auto& name : selected_backbones(cfg, only)) {
    auto r = campaign::simulate_backbone(cfg, name);
    std::size_t complete = r.records.size() - r.failed_ids.size();
    std::cout << name << ": " << complete << " complete, " << r.failed_ids.size() << " failed, " << r.newly_run
              << " run now, silence rate " << r.silence_rate << "\n";
    if (!r.failed_ids.empty()) rc = 2;
  }
  return rc;
}

int cmd_judge_ai(const campaign::CampaignConfig& cfg, const std::string& only) {
  int rc = 0;
  for (const auto& name : selected_backbones(cfg, only)) {
    auto r = campaign::judge_backbone(cfg, name);
    std::cout << name << ": " << r.scored_items << " items scored, " << r.failed_items << " failed, " << r.new_calls
              << " judge calls\n";
    if (r.failed_items > 0) rc = 2;
  }
  return rc;
}

int cmd_sample_human(const std::vector<fs::path>& runs, std::size_t n, std::uint64_t seed, const fs::path& out) {
  auto items = judge::sample_human_eval_set(load_runs(runs), n, seed);
  campaign::write_text_atomic(out, judge::assignment_to_json(items, seed).dump(2) + "\n");
  std::cout << "wrote " << items.size() << " items to " << out.string() << "\n";
  return 0;
}

int cmd_stats(const std::vector<fs::path>& runs, const std::vector<fs::path>& judgments,
              const std::vector<fs::path>& human, const fs::path& out, std::size_t permutations, std::uint64_t seed,
              std::size_t workers) {
  campaign::ReportInputs in;
  in.records = load_runs(runs);
  in.permutations = permutations;
  in.seed = seed;
  in.workers = workers;
  for (const auto& j : judgments) {
    auto log = judge::read_judgment_log(j);
    in.judgments.insert(in.judgments.end(), log.begin(), log.end());
  }
  auto catalog = judge::item_catalog(in.records);
  for (const auto& h : human) {
    auto rows = judge::import_human_ratings(h, &catalog);
    in.judgments.insert(in.judgments.end(), rows.begin(), rows.end());
  }
  auto report = campaign::write_report(out, in);
  for (auto q : prompt::kAllQuestions) std::cout << stats::summary_table(report.summaries, q) << "\n";
  std::cout << stats::agreement_text(report.agreement) << "\n" << stats::token_overhead_text(report.tokens);
  return 0;
}

int cmd_serve_eval(const std::vector<fs::path>& runs, const fs::path& assignment_path, const fs::path& ratings,
                   const std::string& manifest_path, const std::string& host, int port,
                   const std::vector<std::string>& raters, std::uint64_t label_seed) {
  auto assignment = judge::assignment_from_json(read_json(assignment_path));
  std::optional<corpus::ExpressionManifest> manifest;
  if (!manifest_path.empty()) manifest = corpus::load_expression_manifest(manifest_path);
  eval::ServiceOptions opts;
  opts.label_seed = label_seed;
  opts.raters = raters;
  if (const char* token = std::getenv(std::string(eval::kAuthTokenEnv).c_str()); token && *token) {
    opts.auth_token = token;
  }
  eval::EvalService service(assignment, load_runs(runs), ratings, opts, manifest ? &*manifest : nullptr);
  httplib::Server server;
  eval::mount(server, service);
  spdlog::info("serving {} items on http://{}:{}", assignment.size(), host, port);
  if (!server.listen(host, port)) {
    spdlog::error("port busy or unavailable: {}:{}", host, port);
    return 1;
  }
  return 0;
}

int cmd_stub_server(const std::string& host, int port, std::uint64_t seed) {
  eval::StubOptions opts;
  opts.seed = seed;
  eval::StubServer stub(opts);
  spdlog::info("mock backend on http://{}:{}/v1/complete", host, port);
  if (!stub.listen(host, port)) {
    spdlog::error("port busy or unavailable: {}:{}", host, port);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial-expression-aware tutoring harness"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  std::string config_path;
  std::string backbone;

  auto* synth = app.add_subcommand("synth-corpus", "Write a synthetic expression corpus");
  fs::path synth_out;
  synthetic::CorpusSpec spec;
  bool no_images = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--participants", spec.participants);
  synth->add_option("--videos", spec.videos_per_participant, "Videos per participant");
  synth->add_option("--frames", spec.frames_per_video, "Frames per video");
  synth->add_option("--seed", spec.seed);
  synth->add_flag("--no-images", no_images, "Skip frame images");
  synth->add_flag("--partial", spec.partial, "Mark the manifest partial");

  auto* gen = app.add_subcommand("gen-problems", "Generate the problem bank");
  std::size_t partial = 0;
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", config_path)->required();
  gen->add_option("--partial", partial, "Keep only N problems and flag the bank partial");
  gen->add_option("--out", gen_out, "Bank path (defaults to the config's bank)");
  gen->add_option("--seed", gen_seed);

  auto* simulate = app.add_subcommand("simulate", "Run tutoring conversations");
  simulate->add_option("--config", config_path)->required();
  simulate->add_option("--backbone", backbone, "Only this backbone");

  auto* judge_ai = app.add_subcommand("judge-ai", "AI pairwise judging of every turn");
  judge_ai->add_option("--config", config_path)->required();
  judge_ai->add_option("--backbone", backbone, "Only this backbone");

  std::vector<fs::path> runs;
  auto* sample = app.add_subcommand("sample-human", "Select the human evaluation items");
  std::size_t n_items = 100;
  std::uint64_t sample_seed = 0;
  fs::path assignment_out;
  sample->add_option("--config", config_path);
  sample->add_option("--run", runs, "Run directory (repeatable)");
  sample->add_option("--n", n_items, "Conversations per backbone");
  sample->add_option("--seed", sample_seed);
  sample->add_option("--out", assignment_out)->required();

  auto* serve = app.add_subcommand("serve-eval", "Serve the rater API");
  fs::path assignment_in, ratings_out;
  std::string manifest_path, host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> raters;
  std::uint64_t label_seed = 0;
  serve->add_option("--config", config_path);
  serve->add_option("--run", runs, "Run directory (repeatable)");
  serve->add_option("--assignment", assignment_in)->required();
  serve->add_option("--ratings", ratings_out, "Human rating file to append to")->required();
  serve->add_option("--manifest", manifest_path, "Expression manifest for media");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--raters", raters, "Allowed rater ids")->delimiter(',');
  serve->add_option("--label-seed", label_seed);

  auto* stats_cmd = app.add_subcommand("stats", "Permutation tests, agreement and token report");
  std::vector<fs::path> judgment_logs, human_files;
  fs::path report_out;
  std::size_t permutations = stats::kDefaultPermutations;
  std::uint64_t stats_seed = stats::kDefaultSeed;
  std::size_t workers = 1;
  stats_cmd->add_option("--config", config_path);
  stats_cmd->add_option("--run", runs, "Run directory (repeatable)");
  stats_cmd->add_option("--judgments", judgment_logs, "AI judgment log (repeatable)");
  stats_cmd->add_option("--human", human_files, "Human rating file (repeatable)");
  stats_cmd->add_option("--out", report_out, "Report directory");
  stats_cmd->add_option("--permutations", permutations);
  stats_cmd->add_option("--seed", stats_seed);
  stats_cmd->add_option("--workers", workers);

  auto* stub = app.add_subcommand("stub-server", "Serve the mock backend over the unified protocol");
  int stub_port = 8091;
  std::uint64_t stub_seed = 0;
  stub->add_option("--host", host);
  stub->add_option("--port", stub_port);
  stub->add_option("--seed", stub_seed);

  auto* templates = app.add_subcommand("templates", "Write the default prompt templates");
  fs::path templates_out;
  templates->add_option("--out", templates_out)->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    std::optional<campaign::CampaignConfig> cfg;
    if (!config_path.empty()) cfg = campaign::load_config(config_path);
    auto config_runs = [&] {
      if (runs.empty() && cfg) {
        for (const auto& b : cfg->backbones) runs.push_back(campaign::run_dir(*cfg, b.name));
      }
      if (runs.empty()) throw std::runtime_error("no run directories: pass --run or --config");
    };

    if (*synth) {
      spec.write_images = !no_images;
      return cmd_synth_corpus(synth_out, spec);
    }
    if (*gen) return cmd_gen_problems(*cfg, partial, gen_out, gen_seed);
    if (*simulate) return cmd_simulate(*cfg, backbone);
    if (*judge_ai) return cmd_judge_ai(*cfg, backbone);
    if (*sample) {
      config_runs();
      return cmd_sample_human(runs, n_items, sample_seed, assignment_out);
    }
    if (*serve) {
      config_runs();
      if (manifest_path.empty() && cfg) manifest_path = cfg->manifest.string();
      return cmd_serve_eval(runs, assignment_in, ratings_out, manifest_path, host, port, raters, label_seed);
    }
    if (*stats_cmd) {
      config_runs();
      if (cfg) {
        if (judgment_logs.empty()) {
          for (const auto& b : cfg->backbones) {
            auto p = campaign::judgment_log(*cfg, b.name);
            if (fs::exists(p)) judgment_logs.push_back(p);
          }
        }
        if (report_out.empty()) report_out = cfg->output / "report";
        if (!stats_cmd->count("--permutations")) permutations = cfg->permutations;
        if (!stats_cmd->count("--seed")) stats_seed = cfg->stats_seed;
      }
      if (report_out.empty()) throw std::runtime_error("no report directory: pass --out or --config");
      return cmd_stats(runs, judgment_logs, human_files, report_out, permutations, stats_seed, workers);
    }
    if (*stub) return cmd_stub_server(host, stub_port, stub_seed);
    if (*templates) {
      prompt::Templates::defaults().save(templates_out);
      std::cout << "wrote templates to " << templates_out.string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
