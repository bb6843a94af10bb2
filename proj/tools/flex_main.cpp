// Command-line entry point: evaluate, categorize, reaggregate, agreement,
// rerank.

#include <cstdio>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "flex/analysis.hpp"
#include "flex/persistence.hpp"
#include "flex/pipeline.hpp"

namespace {

using namespace flex;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitDataset = 1;
constexpr int kExitConfig = 2;
constexpr int kExitInterrupted = 3;

struct RunOptions {
  RunConfig cfg;
  std::string mode = "set";
  std::string model_type;
  std::string cache;
  std::string script_dir;
  double request_timeout_s = 120.0;
  double exec_timeout_s = 30.0;
  std::size_t stop_after = 0;
};

void add_run_options(CLI::App& cmd, RunOptions& o) {
  cmd.add_option("--dataset", o.cfg.dataset_path, "Benchmark JSON file")->required();
  cmd.add_option("--predictions", o.cfg.predictions_path, "Predictions file")->required();
  cmd.add_option("--db-root", o.cfg.db_root, "Directory holding <db_id>/<db_id>.sqlite")
      ->required();
  cmd.add_option("--judge", o.cfg.judge,
                 "Judge backend: ex-echo, always-correct, always-incorrect, scripted, openai")
      ->capture_default_str();
  cmd.add_option("--model", o.cfg.params.model_name, "Judge model name")->capture_default_str();
  cmd.add_option("--templates", o.cfg.template_dir, "Prompt template directory")
      ->capture_default_str();
  cmd.add_option("--cache", o.cache, "Response cache directory");
  cmd.add_option("--out", o.cfg.output_dir, "Output directory")->capture_default_str();
  cmd.add_option("--run-name", o.cfg.run_name, "Run name")->capture_default_str();
  cmd.add_option("--mode", o.mode, "Result comparison: set, bag or ordered")
      ->capture_default_str();
  cmd.add_option("--concurrency", o.cfg.concurrency, "Parallel instances")
      ->capture_default_str();
  cmd.add_option("--model-type", o.model_type,
                 "proprietary, open_plm, open_sft or unknown");
  cmd.add_option("--script-dir", o.script_dir, "Responses for the scripted judge");
  cmd.add_option("--temperature", o.cfg.params.temperature, "Sampling temperature")
      ->capture_default_str();
  cmd.add_option("--max-tokens", o.cfg.params.max_tokens, "Response token limit")
      ->capture_default_str();
  cmd.add_option("--timeout", o.request_timeout_s, "Judge request timeout in seconds")
      ->capture_default_str();
  cmd.add_option("--exec-timeout", o.exec_timeout_s, "Per-query timeout in seconds")
      ->capture_default_str();
  cmd.add_option("--stop-after", o.stop_after, "Stop after N new judgments (0 = never)");
}

RunConfig finish(RunOptions& o) {
  RunConfig cfg = o.cfg;
  cfg.mode = parse_comparison_mode(o.mode);
  if (!o.model_type.empty()) cfg.model_type = parse_model_type(o.model_type);
  if (!o.cache.empty()) cfg.cache_dir = o.cache;
  if (!o.script_dir.empty()) cfg.backend_options.script_dir = o.script_dir;
  if (o.request_timeout_s <= 0 || o.exec_timeout_s <= 0) {
    throw ConfigError("timeouts must be positive");
  }
  cfg.params.request_timeout =
      std::chrono::milliseconds(static_cast<std::int64_t>(o.request_timeout_s * 1000));
  cfg.exec_timeout =
      std::chrono::milliseconds(static_cast<std::int64_t>(o.exec_timeout_s * 1000));
  if (o.stop_after > 0) cfg.stop_after = o.stop_after;
  return cfg;
}

void print_run(const RunResult& r) {
  const auto& s = r.summary;
  fmt::print("{}: n={} FLEX={:.2f} EX={:.2f} delta={:+.2f} TP={} FP={} FN={} TN={} "
             "exec_errors={} fallbacks={}\n",
             s.run_name, s.n, round2(s.flex), round2(s.ex), round2(s.delta), s.counts.tp,
             s.counts.fp, s.counts.fn, s.counts.tn, s.counts.exec_errors, s.counts.fallbacks);
  fmt::print("resumed={} judged={} backend_calls={} cache_hits={}\n", r.resumed, r.judged,
             r.backend_calls, r.cache_hits);
  fmt::print("outputs in {}\n", r.run_dir.string());
}

int cmd_reaggregate(const fs::path& run_dir, bool write) {
  const RunSummary summary = reaggregate(run_dir);
  const std::string text = summary_file_text(summary);
  std::cout << text;
  const fs::path existing = run_dir / "summary.json";
  if (write) {
    write_text_atomic(existing, text);
    write_text_atomic(run_dir / "report.md", report_markdown(summary));
    return kExitOk;
  }
  if (fs::is_regular_file(existing) && read_text(existing) != text) {
    std::cerr << "recomputed summary differs from " << existing.string() << "\n";
    return kExitDataset;
  }
  return kExitOk;
}

int cmd_agreement(const fs::path& judgments_path, const fs::path& labels_path,
                  const std::string& out) {
  const JudgmentsFile file = load_judgments(judgments_path);
  if (!fs::is_regular_file(judgments_path)) {
    throw DatasetError("judgments not found: " + judgments_path.string());
  }
  std::map<std::int64_t, bool> judged;
  for (const auto& r : file.records) judged[r.instance_id] = r.verdict_bool();

  const auto labels = load_human_labels(labels_path);
  std::map<std::int64_t, bool> human;
  std::map<std::int64_t, Branch> subset;
  for (const auto& l : labels) {
    human[l.instance_id] = l.correct;
    subset[l.instance_id] = l.subset;
  }
  AgreementReport report = agreement_report(judged, human, subset);
  if (const auto matrix = rater_matrix(labels); !matrix.empty()) {
    report.fleiss = 100.0 * fleiss_kappa(matrix);
  }

  std::string md = "| Kappa | Acc | EQ | NEQ |\n| --- | --- | --- | --- |\n";
  md += fmt::format("| {:.2f} | {:.2f} | {:.2f} | {:.2f} |\n", round2(report.kappa),
                    round2(report.acc), round2(report.eq_acc), round2(report.neq_acc));
  if (report.fleiss) md += fmt::format("\nFleiss kappa across raters: {:.2f}\n", round2(*report.fleiss));
  std::cout << md;

  if (!out.empty()) {
    nlohmann::json doc = {{"kappa", round2(report.kappa)},
                          {"acc", round2(report.acc)},
                          {"eq_acc", round2(report.eq_acc)},
                          {"neq_acc", round2(report.neq_acc)},
                          {"n", report.n},
                          {"eq_n", report.eq_n},
                          {"neq_n", report.neq_n},
                          {"table",
                           {{"a", report.table.a},
                            {"b", report.table.b},
                            {"c", report.table.c},
                            {"d", report.table.d}}},
                          {"fleiss", report.fleiss ? nlohmann::json(round2(*report.fleiss))
                                                   : nlohmann::json()}};
    write_text_atomic(out, doc.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_rerank(const std::vector<fs::path>& inputs, const std::string& md_out,
               const std::string& json_out) {
  std::vector<RunScore> runs;
  for (const auto& path : inputs) {
    auto scores = load_run_scores(path);
    runs.insert(runs.end(), scores.begin(), scores.end());
  }
  if (runs.empty()) throw DatasetError("no runs to rank");
  std::vector<LeaderboardRow> rows;
  try {
    rows = rerank(runs);
  } catch (const ContractViolation& e) {
    throw DatasetError(e.what());
  }
  const std::string md = leaderboard_markdown(rows);
  std::cout << md;
  if (!md_out.empty()) write_text_atomic(md_out, md);
  if (!json_out.empty()) write_text_atomic(json_out, leaderboard_to_json(rows).dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("flex"));

  CLI::App app{"Text-to-SQL evaluation with an LLM judge"};
  app.require_subcommand(1);

  RunOptions eval_opts;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Execute, judge and categorize a run");
  add_run_options(*evaluate_cmd, eval_opts);

  RunOptions cat_opts;
  auto* categorize_cmd =
      app.add_subcommand("categorize", "Re-run error categorization on an existing run");
  add_run_options(*categorize_cmd, cat_opts);

  fs::path reagg_dir;
  bool reagg_write = false;
  auto* reaggregate_cmd =
      app.add_subcommand("reaggregate", "Recompute summary.json from judgments.jsonl");
  reaggregate_cmd->add_option("run_dir", reagg_dir, "Run directory")->required();
  reaggregate_cmd->add_flag("--write", reagg_write, "Overwrite summary.json and report.md");

  fs::path agree_judgments;
  fs::path agree_labels;
  std::string agree_out;
  auto* agreement_cmd = app.add_subcommand("agreement", "Judge versus human agreement");
  agreement_cmd->add_option("--judgments", agree_judgments, "judgments.jsonl")->required();
  agreement_cmd->add_option("--labels", agree_labels, "Human labels JSON")->required();
  agreement_cmd->add_option("--out", agree_out, "Write the report as JSON");

  std::vector<fs::path> rerank_inputs;
  std::string rerank_md;
  std::string rerank_json;
  auto* rerank_cmd = app.add_subcommand("rerank", "Leaderboard re-ranked by FLEX");
  rerank_cmd->add_option("inputs", rerank_inputs, "CSV (name,flex,ex) or summary.json files")
      ->required();
  rerank_cmd->add_option("--markdown-out", rerank_md, "Write the markdown table");
  rerank_cmd->add_option("--json-out", rerank_json, "Write the table as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*evaluate_cmd) {
      print_run(evaluate(finish(eval_opts)));
    } else if (*categorize_cmd) {
      print_run(recategorize(finish(cat_opts)));
    } else if (*reaggregate_cmd) {
      return cmd_reaggregate(reagg_dir, reagg_write);
    } else if (*agreement_cmd) {
      return cmd_agreement(agree_judgments, agree_labels, agree_out);
    } else if (*rerank_cmd) {
      return cmd_rerank(rerank_inputs, rerank_md, rerank_json);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kExitConfig;
  } catch (const DatasetError& e) {
    spdlog::error("dataset error: {}", e.what());
    return kExitDataset;
  } catch (const Interrupted& e) {
    spdlog::warn("{}", e.what());
    return kExitInterrupted;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitDataset;
  }
}
