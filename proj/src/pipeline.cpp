#include "flex/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "flex/persistence.hpp"

namespace flex {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kJudgments = "judgments.jsonl";
constexpr const char* kSummary = "summary.json";
constexpr const char* kReport = "report.md";
constexpr const char* kMeta = "run_meta.json";

std::string now_utc() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr)));
}

std::string json_line(const JudgmentRecord& record) {
  return record_to_json(record).dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
}

/// Loaded inputs shared by evaluate and recategorize.
struct Inputs {
  PromptTemplates templates;
  std::unique_ptr<JudgeBackend> owned_backend;
  JudgeBackend* backend = nullptr;
  std::vector<EvalInstance> instances;
  std::map<std::int64_t, Prediction> predictions;
  std::map<std::int64_t, std::size_t> position;
};

Inputs load_inputs(const RunConfig& cfg, JudgeBackend* backend) {
  validate(cfg);
  cfg.render.validate();
  Inputs in;
  in.templates = PromptTemplates::load(cfg.template_dir);
  if (backend != nullptr) {
    in.backend = backend;
  } else {
    in.owned_backend = make_backend(cfg.judge, cfg.backend_options);
    in.backend = in.owned_backend.get();
  }
  in.instances = load_dataset(cfg.dataset_path);
  if (in.instances.empty()) throw DatasetError("dataset is empty");
  in.predictions = align_predictions(in.instances, load_predictions(cfg.predictions_path));
  for (std::size_t i = 0; i < in.instances.size(); ++i) {
    in.position[in.instances[i].instance_id] = i;
  }
  return in;
}

/// Records from the judgments file in dataset order, checked against the
/// dataset.
std::vector<JudgmentRecord> ordered_records(std::vector<JudgmentRecord> records,
                                            const Inputs& in) {
  std::set<std::int64_t> seen;
  for (const auto& r : records) {
    if (!in.position.contains(r.instance_id)) {
      throw DatasetError(fmt::format("judgment for unknown question {}", r.instance_id));
    }
    if (!seen.insert(r.instance_id).second) {
      throw DatasetError(fmt::format("question {} judged twice", r.instance_id));
    }
  }
  std::sort(records.begin(), records.end(), [&](const auto& l, const auto& r) {
    return in.position.at(l.instance_id) < in.position.at(r.instance_id);
  });
  return records;
}

json meta_json(const RunConfig& cfg, const Inputs& in, const Judge& judge,
               const std::string& started_at, const RunResult& result) {
  const auto& p = cfg.params;
  return {
      {"run_name", cfg.run_name},
      {"model_type", cfg.model_type ? json(std::string(to_string(*cfg.model_type))) : json()},
      {"include_em", true},
      {"judge", in.backend->name()},
      {"template_dir", cfg.template_dir.string()},
      {"template_hash", in.templates.hash},
      {"params",
       {{"model", p.model_name},
        {"temperature", p.temperature},
        {"max_tokens", p.max_tokens},
        {"request_timeout_ms", p.request_timeout.count()},
        {"max_transport_retries", p.max_transport_retries},
        {"backoff_base_ms", p.backoff_base.count()}}},
      {"temperature_overridden", p.temperature_overridden()},
      {"mode", std::string(to_string(cfg.mode))},
      {"concurrency", cfg.concurrency},
      {"dataset", cfg.dataset_path.string()},
      {"predictions", cfg.predictions_path.string()},
      {"db_root", cfg.db_root.string()},
      {"started_at", started_at},
      {"finished_at", now_utc()},
      {"resumed_records", result.resumed},
      {"judged_records", result.judged},
      {"backend_calls", judge.stats().backend_calls.load()},
      {"cache_hits", judge.stats().cache_hits.load()},
      {"reasks", judge.stats().reasks.load()},
      {"fallbacks", judge.stats().fallbacks.load()},
  };
}

void write_reports(const fs::path& run_dir, const RunSummary& summary) {
  write_text_atomic(run_dir / kSummary, summary_file_text(summary));
  write_text_atomic(run_dir / kReport, report_markdown(summary));
}

/// Runs `task` for indices [0, count) on up to `threads` workers. The first
/// exception stops the remaining work and is rethrown.
template <typename Task>
void parallel_for(std::size_t count, std::size_t threads, std::atomic<bool>& stop, Task task) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) break;
      try {
        task(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        stop = true;
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, count));
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

void validate(const RunConfig& cfg) {
  const auto require_file = [](const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw ConfigError(fmt::format("{} not found: {}", what, p.string()));
  };
  require_file(cfg.dataset_path, "dataset");
  require_file(cfg.predictions_path, "predictions");
  if (!fs::is_directory(cfg.db_root)) {
    throw ConfigError("database root not found: " + cfg.db_root.string());
  }
  if (!fs::is_directory(cfg.template_dir)) {
    throw ConfigError("template directory not found: " + cfg.template_dir.string());
  }
  if (cfg.run_name.empty() || cfg.run_name.find('/') != std::string::npos ||
      cfg.run_name == "." || cfg.run_name == "..") {
    throw ConfigError("invalid run name: '" + cfg.run_name + "'");
  }
  if (cfg.concurrency == 0) throw ConfigError("concurrency must be at least 1");
  if (cfg.exec_timeout.count() <= 0) throw ConfigError("execution timeout must be positive");
  if (cfg.params.max_tokens <= 0) throw ConfigError("max tokens must be positive");
  if (cfg.params.max_transport_retries < 0) throw ConfigError("retries must not be negative");
}

std::string summary_file_text(const RunSummary& summary) {
  return summary_to_json(summary).dump(2) + "\n";
}

RunResult evaluate(const RunConfig& cfg, JudgeBackend* backend, const Sleeper& sleeper) {
  const std::string started_at = now_utc();
  Inputs in = load_inputs(cfg, backend);

  RunResult result;
  result.run_dir = cfg.run_dir();
  fs::create_directories(result.run_dir);
  const fs::path jsonl = result.run_dir / kJudgments;

  JudgmentsFile existing = load_judgments(jsonl);
  if (existing.truncated_tail) {
    spdlog::warn("{}: dropping a partial last line", jsonl.string());
    fs::resize_file(jsonl, existing.intact_bytes);
  }
  const auto done = ordered_records(std::move(existing.records), in);
  result.resumed = done.size();

  std::set<std::int64_t> done_ids;
  for (const auto& r : done) done_ids.insert(r.instance_id);
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < in.instances.size(); ++i) {
    if (!done_ids.contains(in.instances[i].instance_id)) pending.push_back(i);
  }

  std::optional<ResponseCache> cache;
  if (cfg.cache_dir) cache.emplace(*cfg.cache_dir);
  Judge judge(*in.backend, in.templates, cfg.params, cache ? &*cache : nullptr, cfg.mode,
              cfg.render, sleeper);
  SchemaCache schemas(cfg.db_root);
  const ExecConfig exec{cfg.exec_timeout, std::nullopt, cfg.mode};

  std::ofstream out(jsonl, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + jsonl.string());

  // Completed records wait here until every earlier pending record is
  // written, so the file always holds a prefix of the pending order.
  std::mutex writer_mutex;
  std::map<std::size_t, JudgmentRecord> ready;
  std::size_t next_write = 0;
  std::atomic<bool> stop{false};
  bool interrupted = false;

  const auto process = [&](std::size_t slot) {
    const EvalInstance& inst = in.instances[pending[slot]];
    const Prediction& pred = in.predictions.at(inst.instance_id);
    const fs::path db = database_path(cfg.db_root, inst.db_id);
    const auto schema = schemas.get(inst.db_id);
    const ExecutionOutcome gt = execute_query(db, inst.gt_sql, exec);
    const ExecutionOutcome gen = execute_query(db, pred.gen_sql, exec);

    JudgmentRecord record = judge.judge_instance(inst, pred, *schema, gt, gen);
    record.em_match = normalize_sql(inst.gt_sql) == normalize_sql(pred.gen_sql);
    categorize_record(judge, record, inst, pred, *schema);
    if (!consistent(record)) {
      throw ContractViolation(fmt::format("inconsistent judgment for question {}", inst.instance_id));
    }

    std::lock_guard lock(writer_mutex);
    if (interrupted) return;
    ready.emplace(slot, std::move(record));
    for (auto it = ready.find(next_write); it != ready.end(); it = ready.find(next_write)) {
      out << json_line(it->second);
      out.flush();
      if (!out) throw std::runtime_error("cannot append to " + jsonl.string());
      ready.erase(it);
      ++next_write;
      if (cfg.stop_after && next_write >= *cfg.stop_after) {
        interrupted = true;
        stop = true;
        return;
      }
    }
  };

  parallel_for(pending.size(), cfg.concurrency, stop, process);
  out.close();
  result.judged = next_write;
  result.cache_hits = judge.stats().cache_hits.load();
  result.backend_calls = judge.stats().backend_calls.load();
  if (interrupted) {
    throw Interrupted(fmt::format("stopped after {} new judgments", next_write));
  }

  auto records = ordered_records(load_judgments(jsonl).records, in);
  if (records.size() != in.instances.size()) {
    throw DatasetError(fmt::format("{} judgments for {} questions", records.size(),
                                   in.instances.size()));
  }
  result.summary = summarize(cfg.run_name, cfg.model_type, records, true);
  write_reports(result.run_dir, result.summary);
  write_text_atomic(result.run_dir / kMeta,
                    meta_json(cfg, in, judge, started_at, result).dump(2) + "\n");
  return result;
}

RunResult recategorize(const RunConfig& cfg, JudgeBackend* backend, const Sleeper& sleeper) {
  const std::string started_at = now_utc();
  Inputs in = load_inputs(cfg, backend);
  RunResult result;
  result.run_dir = cfg.run_dir();
  const fs::path jsonl = result.run_dir / kJudgments;
  if (!fs::is_regular_file(jsonl)) throw ConfigError("no judgments at " + jsonl.string());

  auto records = ordered_records(load_judgments(jsonl).records, in);
  std::optional<ResponseCache> cache;
  if (cfg.cache_dir) cache.emplace(*cfg.cache_dir);
  Judge judge(*in.backend, in.templates, cfg.params, cache ? &*cache : nullptr, cfg.mode,
              cfg.render, sleeper);
  SchemaCache schemas(cfg.db_root);

  std::atomic<bool> stop{false};
  parallel_for(records.size(), cfg.concurrency, stop, [&](std::size_t i) {
    JudgmentRecord& record = records[i];
    const EvalInstance& inst = in.instances[in.position.at(record.instance_id)];
    const auto schema = schemas.get(inst.db_id);
    categorize_record(judge, record, inst, in.predictions.at(record.instance_id), *schema);
  });

  std::string text;
  for (const auto& r : records) text += json_line(r);
  write_text_atomic(jsonl, text);

  result.judged = records.size();
  result.cache_hits = judge.stats().cache_hits.load();
  result.backend_calls = judge.stats().backend_calls.load();
  result.summary = summarize(cfg.run_name, cfg.model_type, records, true);
  write_reports(result.run_dir, result.summary);
  write_text_atomic(result.run_dir / kMeta,
                    meta_json(cfg, in, judge, started_at, result).dump(2) + "\n");
  return result;
}

RunSummary reaggregate(const fs::path& run_dir) {
  const fs::path jsonl = run_dir / kJudgments;
  if (!fs::is_regular_file(jsonl)) throw ConfigError("no judgments at " + jsonl.string());
  std::string run_name = run_dir.filename().string();
  std::optional<ModelType> model_type;
  bool include_em = true;
  if (fs::is_regular_file(run_dir / kMeta)) {
    const json meta = json::parse(read_text(run_dir / kMeta), nullptr, false);
    if (meta.is_discarded()) throw DatasetError("malformed " + (run_dir / kMeta).string());
    run_name = meta.value("run_name", run_name);
    if (meta.contains("model_type") && meta["model_type"].is_string()) {
      model_type = parse_model_type(meta["model_type"].get<std::string>());
    }
    include_em = meta.value("include_em", true);
  }
  const JudgmentsFile file = load_judgments(jsonl);
  if (file.truncated_tail) throw DatasetError(jsonl.string() + " ends with a partial line");
  return summarize(run_name, model_type, file.records, include_em);
}

}  // namespace flex
