#include "flex/judge.hpp"

#include <cctype>
#include <chrono>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "flex/digest.hpp"

namespace flex {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string verdict_block(bool correct) {
  return std::string("```json\n{\"correct\": ") + (correct ? "true" : "false") + "}\n```";
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

/// Boolean "correct" of a fenced block, if the block is JSON carrying one.
std::optional<bool> block_verdict(const FencedBlock& block) {
  if (!block.language.empty() && block.language != "json") return std::nullopt;
  const json doc = json::parse(block.body, nullptr, /*allow_exceptions=*/false);
  if (!doc.is_object()) return std::nullopt;
  const auto it = doc.find("correct");
  if (it == doc.end() || !it->is_boolean()) return std::nullopt;
  return it->get<bool>();
}

std::optional<std::size_t> verdict_block_index(const std::vector<FencedBlock>& blocks) {
  for (std::size_t i = blocks.size(); i-- > 0;) {
    if (block_verdict(blocks[i])) return i;
  }
  return std::nullopt;
}

std::string sanitize_component(std::string_view s) {
  std::string out;
  for (const char ch : s) {
    const bool keep = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                      (ch >= '0' && ch <= '9') || ch == '-' || ch == '_' || ch == '.';
    out.push_back(keep ? ch : '_');
  }
  if (out.empty() || out == "." || out == "..") out = "_";
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double jitter_factor(double jitter) {
  if (jitter <= 0.0) return 1.0;
  thread_local std::mt19937_64 rng{std::random_device{}()};
  std::uniform_real_distribution<double> dist(1.0, 1.0 + jitter);
  return dist(rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Mock backends
// ---------------------------------------------------------------------------

std::string ExEchoBackend::chat(const ChatMessages&, const JudgeParams&,
                                const RequestContext& ctx) {
  if (ctx.purpose != RequestPurpose::kJudge) return "```json\n[]\n```";
  return std::string(ctx.ex_equal ? "The execution results match."
                                  : "The execution results differ.") +
         "\n\n" + verdict_block(ctx.ex_equal);
}

std::string ConstantBackend::chat(const ChatMessages&, const JudgeParams&,
                                  const RequestContext& ctx) {
  if (ctx.purpose != RequestPurpose::kJudge) return "```json\n[]\n```";
  return verdict_block(correct_);
}

ScriptedBackend::ScriptedBackend(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw ConfigError("script directory not found: " + dir.string());
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    static const std::regex pattern(R"((-?\d+)(\.categorize)?\.txt)");
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) continue;
    const std::int64_t id = std::stoll(m[1].str());
    auto& target = m[2].matched ? categorize_ : judge_;
    target[id] = read_file(entry.path());
  }
}

ScriptedBackend::ScriptedBackend(std::map<std::int64_t, std::string> judge,
                                 std::map<std::int64_t, std::string> categorize)
    : judge_(std::move(judge)), categorize_(std::move(categorize)) {}

std::string ScriptedBackend::chat(const ChatMessages&, const JudgeParams&,
                                  const RequestContext& ctx) {
  const auto& source = ctx.purpose == RequestPurpose::kJudge ? judge_ : categorize_;
  const auto it = source.find(ctx.instance_id);
  if (it == source.end()) {
    throw RejectedError("no scripted response for instance " + std::to_string(ctx.instance_id));
  }
  return it->second;
}

std::unique_ptr<JudgeBackend> make_backend(std::string_view id, const BackendOptions& options) {
  if (id == "ex-echo") return std::make_unique<ExEchoBackend>();
  if (id == "always-correct") return std::make_unique<ConstantBackend>(true);
  if (id == "always-incorrect") return std::make_unique<ConstantBackend>(false);
  if (id == "scripted") {
    if (!options.script_dir) throw ConfigError("the scripted judge needs --script-dir");
    return std::make_unique<ScriptedBackend>(*options.script_dir);
  }
  if (id == "openai") return OpenAiBackend::from_environment();
  throw ConfigError("unknown judge backend: " + std::string(id));
}

std::string complete(JudgeBackend& backend, const ChatMessages& messages,
                     const JudgeParams& params, const RequestContext& ctx,
                     const Sleeper& sleeper) {
  auto delay = std::chrono::duration<double, std::milli>(params.backoff_base);
  for (int attempt = 0;; ++attempt) {
    try {
      return backend.chat(messages, params, ctx);
    } catch (const TransportError& e) {
      if (attempt >= params.max_transport_retries) throw;
      const auto wait = std::chrono::milliseconds(
          static_cast<std::int64_t>(delay.count() * jitter_factor(params.backoff_jitter)));
      spdlog::warn("instance {}: transport error ({}), retrying in {} ms", ctx.instance_id,
                   e.what(), wait.count());
      if (sleeper) {
        sleeper(wait);
      } else {
        std::this_thread::sleep_for(wait);
      }
      delay *= params.backoff_factor;
    }
  }
}

// ---------------------------------------------------------------------------
// Verdict parsing
// ---------------------------------------------------------------------------

std::vector<FencedBlock> find_fenced_blocks(std::string_view text) {
  std::vector<FencedBlock> blocks;
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = text.find("```", pos);
    if (open == std::string_view::npos) break;
    const std::size_t line_end = text.find('\n', open + 3);
    if (line_end == std::string_view::npos) break;
    const std::size_t close = text.find("```", line_end + 1);
    if (close == std::string_view::npos) break;
    FencedBlock block;
    block.language = trim(text.substr(open + 3, line_end - open - 3));
    for (auto& ch : block.language) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    block.body = std::string(text.substr(line_end + 1, close - line_end - 1));
    block.begin = open;
    block.end = close + 3;
    blocks.push_back(std::move(block));
    pos = close + 3;
  }
  return blocks;
}

bool parse_verdict(std::string_view response) {
  const auto blocks = find_fenced_blocks(response);
  if (const auto idx = verdict_block_index(blocks)) return *block_verdict(blocks[*idx]);

  static const std::regex literal(R"re("correct"\s*:\s*(true|false))re");
  const std::string text(response);
  std::optional<bool> last;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), literal);
       it != std::sregex_iterator(); ++it) {
    last = (*it)[1].str() == "true";
  }
  if (last) return *last;
  throw UnparseableVerdict("no verdict found in judge response");
}

std::string extract_rationale(std::string_view response) {
  const auto blocks = find_fenced_blocks(response);
  const auto idx = verdict_block_index(blocks);
  if (!idx) return trim(response);
  std::string out(response.substr(0, blocks[*idx].begin));
  out += response.substr(blocks[*idx].end);
  return trim(out);
}

// ---------------------------------------------------------------------------
// Response cache
// ---------------------------------------------------------------------------

std::string prompt_digest(const ChatMessages& messages) {
  std::string material = messages.system;
  material.push_back('\0');
  material += messages.user;
  return sha256_hex(material);
}

fs::path ResponseCache::entry_path(const std::string& model, const std::string& template_hash,
                                   std::int64_t instance_id, std::string_view kind) const {
  std::string file = std::to_string(instance_id);
  if (kind != "judge") file += "." + sanitize_component(kind);
  file += ".json";
  return dir_ / sanitize_component(model) / sanitize_component(template_hash) / file;
}

std::optional<std::string> ResponseCache::lookup(const std::string& model,
                                                 const std::string& template_hash,
                                                 std::int64_t instance_id, std::string_view kind,
                                                 const std::string& digest) const {
  const fs::path path = entry_path(model, template_hash, instance_id, kind);
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) return std::nullopt;
  const json doc = json::parse(read_file(path), nullptr, false);
  if (!doc.is_object() || doc.value("request_digest", "") != digest) return std::nullopt;
  const auto it = doc.find("response");
  if (it == doc.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

void ResponseCache::store(const std::string& model, const std::string& template_hash,
                          std::int64_t instance_id, std::string_view kind,
                          const std::string& digest, const std::string& response) {
  const fs::path path = entry_path(model, template_hash, instance_id, kind);
  const json doc = {{"instance_id", instance_id},  {"model", model},
                    {"template_hash", template_hash}, {"kind", std::string(kind)},
                    {"request_digest", digest},     {"response", response},
                    {"stored_at", utc_timestamp()}};
  std::lock_guard lock(write_mutex_);
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write cache entry " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Judgment
// ---------------------------------------------------------------------------

Judge::Judge(JudgeBackend& backend, const PromptTemplates& templates, JudgeParams params,
             ResponseCache* cache, ComparisonMode mode, RenderConfig render_cfg, Sleeper sleeper)
    : backend_(backend),
      templates_(templates),
      params_(std::move(params)),
      cache_(cache),
      mode_(mode),
      render_cfg_(std::move(render_cfg)),
      sleeper_(std::move(sleeper)) {}

std::string Judge::cached_complete(const ChatMessages& messages, const RequestContext& ctx,
                                   std::string_view kind,
                                   const std::function<bool(const std::string&)>& accept) {
  const std::string digest = prompt_digest(messages);
  if (cache_ != nullptr) {
    if (auto hit = cache_->lookup(params_.model_name, templates_.hash, ctx.instance_id, kind,
                                  digest)) {
      ++stats_.cache_hits;
      return *hit;
    }
  }
  ++stats_.backend_calls;
  std::string response = complete(backend_, messages, params_, ctx, sleeper_);
  if (cache_ != nullptr && (!accept || accept(response))) {
    cache_->store(params_.model_name, templates_.hash, ctx.instance_id, kind, digest, response);
  }
  return response;
}

JudgmentRecord Judge::judge_instance(const EvalInstance& instance, const Prediction& pred,
                                     const SchemaDoc& schema, const ExecutionOutcome& gt_out,
                                     const ExecutionOutcome& gen_out) {
  if (!gt_out.ok()) {
    throw DatasetError("ground truth of instance " + std::to_string(instance.instance_id) +
                       " failed: " + gt_out.error().message);
  }
  JudgmentRecord record;
  record.instance_id = instance.instance_id;
  record.difficulty = instance.difficulty;
  record.judge_name = backend_.name();

  if (!gen_out.ok()) {
    record.ex_equal = false;
    record.verdict = Verdict::kExecError;
    record.confusion = ConfusionCell::kTN;
    record.categories = {ErrorCategory::kExecError};
    record.rationale = render_markdown(gen_out, render_cfg_);
    return record;
  }

  record.ex_equal = results_equal(gt_out.table(), gen_out.table(), mode_);
  record.bag_equal = results_equal(gt_out.table(), gen_out.table(), ComparisonMode::kBag);

  const ContextBundle bundle =
      assemble_context(instance, pred, schema, gt_out, gen_out, record.ex_equal, render_cfg_);
  const ChatMessages messages = build_prompt(bundle, templates_);
  const RequestContext ctx{instance.instance_id, record.ex_equal, RequestPurpose::kJudge};

  const auto parses = [](const std::string& r) {
    try {
      parse_verdict(r);
      return true;
    } catch (const UnparseableVerdict&) {
      return false;
    }
  };

  std::optional<bool> verdict;
  std::string failure;
  try {
    const std::string first = cached_complete(messages, ctx, "judge", parses);
    record.raw_response = first;
    if (parses(first)) {
      verdict = parse_verdict(first);
      record.rationale = extract_rationale(first);
    } else {
      ++stats_.reasks;
      ChatMessages reask = messages;
      reask.user += "\n\n";
      reask.user += kReaskInstruction;
      const std::string second = cached_complete(reask, ctx, "judge-reask", parses);
      record.raw_response += "\n\n";
      record.raw_response += second;
      if (parses(second)) {
        verdict = parse_verdict(second);
        record.rationale = trim(first);
        if (record.rationale.empty()) record.rationale = extract_rationale(second);
      } else {
        failure = "no verdict after re-ask";
      }
    }
  } catch (const JudgeError& e) {
    failure = e.what();
  }

  if (verdict) {
    record.verdict = *verdict ? Verdict::kCorrect : Verdict::kIncorrect;
    record.confusion = classify_confusion(record.ex_equal, *verdict);
  } else {
    ++stats_.fallbacks;
    spdlog::warn("instance {}: judge failed ({}), falling back to EX", instance.instance_id,
                 failure);
    record.verdict = Verdict::kJudgeFailedFallback;
    record.confusion = classify_confusion(record.ex_equal, record.ex_equal);
    record.rationale = "judge failed: " + failure;
  }
  return record;
}

}  // namespace flex
