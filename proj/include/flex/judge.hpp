#pragma once

// LLM judge backends, verdict parsing and per-instance judgment.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flex/context.hpp"
#include "flex/execution.hpp"
#include "flex/model.hpp"
#include "flex/rendering.hpp"

namespace flex {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Network failure, timeout, HTTP 5xx or 429. Retried.
class TransportError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

/// HTTP 4xx other than 429. Not retried.
class RejectedError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

/// The provider reported that the token budget was exceeded. Not retried.
class BudgetError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

class UnparseableVerdict : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

struct JudgeParams {
  double temperature = 0.0;
  int max_tokens = 2048;
  std::string model_name = "gpt-4o";
  std::chrono::milliseconds request_timeout{120'000};
  int max_transport_retries = 3;
  std::chrono::milliseconds backoff_base{1'000};
  double backoff_factor = 2.0;
  /// Each delay is stretched by a uniform factor in [1, 1 + jitter).
  double backoff_jitter = 0.25;

  bool temperature_overridden() const { return temperature != 0.0; }
};

enum class RequestPurpose { kJudge, kCategorizeIncorrect, kCategorizeCorrect };

/// Per-request metadata. `ex_equal` is a test-only side channel read by the
/// ex-echo mock; real backends ignore it.
struct RequestContext {
  std::int64_t instance_id = 0;
  bool ex_equal = false;
  RequestPurpose purpose = RequestPurpose::kJudge;
};

/// One chat-completion attempt. Implementations must be safe to call from
/// several threads at once.
class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  virtual std::string name() const = 0;
  /// Throws TransportError, RejectedError or BudgetError.
  virtual std::string chat(const ChatMessages& messages, const JudgeParams& params,
                           const RequestContext& ctx) = 0;
};

/// Answers correct exactly when the execution results matched.
class ExEchoBackend final : public JudgeBackend {
 public:
  std::string name() const override { return "ex-echo"; }
  std::string chat(const ChatMessages&, const JudgeParams&, const RequestContext& ctx) override;
};

class ConstantBackend final : public JudgeBackend {
 public:
  explicit ConstantBackend(bool correct) : correct_(correct) {}
  std::string name() const override { return correct_ ? "always-correct" : "always-incorrect"; }
  std::string chat(const ChatMessages&, const JudgeParams&, const RequestContext& ctx) override;

 private:
  bool correct_;
};

/// Canned responses read from a directory: <instance_id>.txt answers the
/// judgment request, <instance_id>.categorize.txt the categorization request.
/// A missing file is reported as RejectedError.
class ScriptedBackend final : public JudgeBackend {
 public:
  explicit ScriptedBackend(const std::filesystem::path& dir);
  ScriptedBackend(std::map<std::int64_t, std::string> judge,
                  std::map<std::int64_t, std::string> categorize = {});
  std::string name() const override { return "scripted"; }
  std::string chat(const ChatMessages&, const JudgeParams&, const RequestContext& ctx) override;

 private:
  std::map<std::int64_t, std::string> judge_;
  std::map<std::int64_t, std::string> categorize_;
};

/// OpenAI-compatible chat completions: POST <base>/v1/chat/completions with a
/// bearer token.
class OpenAiBackend final : public JudgeBackend {
 public:
  OpenAiBackend(std::string base_url, std::string api_key);
  /// Reads FLEX_API_BASE (default https://api.openai.com) and FLEX_API_KEY.
  /// Throws ConfigError when the key is unset.
  static std::unique_ptr<OpenAiBackend> from_environment();

  std::string name() const override { return "openai"; }
  std::string chat(const ChatMessages& messages, const JudgeParams& params,
                   const RequestContext& ctx) override;

  /// Request body sent for `messages`; exposed for tests.
  static std::string request_body(const ChatMessages& messages, const JudgeParams& params);

 private:
  std::string scheme_host_port_;
  std::string path_;
  std::string api_key_;
};

struct BackendOptions {
  std::optional<std::filesystem::path> script_dir;
};

/// ex-echo | always-correct | always-incorrect | scripted | openai
std::unique_ptr<JudgeBackend> make_backend(std::string_view id, const BackendOptions& options);

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Calls the backend, retrying transport failures with exponential backoff
/// (base, factor, jitter from params) up to max_transport_retries extra
/// attempts. Rejections and budget errors propagate immediately.
std::string complete(JudgeBackend& backend, const ChatMessages& messages,
                     const JudgeParams& params, const RequestContext& ctx,
                     const Sleeper& sleeper = {});

// ---------------------------------------------------------------------------
// Verdict parsing
// ---------------------------------------------------------------------------

struct FencedBlock {
  std::string language;
  std::string body;
  std::size_t begin = 0;  // offset of the opening fence
  std::size_t end = 0;    // offset just past the closing fence
};

std::vector<FencedBlock> find_fenced_blocks(std::string_view text);

/// Last fenced JSON block with a boolean "correct" wins; otherwise the last
/// literal "correct": true|false anywhere. Throws UnparseableVerdict.
bool parse_verdict(std::string_view response);

/// Response text with the verdict-carrying fenced block removed.
std::string extract_rationale(std::string_view response);

// ---------------------------------------------------------------------------
// Response cache
// ---------------------------------------------------------------------------

/// One JSON file per request under <dir>/<model>/<template_hash>/. An entry
/// only hits when its stored prompt digest matches. Concurrent readers are
/// fine; writes are serialized and atomic (write then rename).
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<std::string> lookup(const std::string& model, const std::string& template_hash,
                                    std::int64_t instance_id, std::string_view kind,
                                    const std::string& prompt_digest) const;
  void store(const std::string& model, const std::string& template_hash,
             std::int64_t instance_id, std::string_view kind, const std::string& prompt_digest,
             const std::string& response);

  std::filesystem::path entry_path(const std::string& model, const std::string& template_hash,
                                   std::int64_t instance_id, std::string_view kind) const;

 private:
  std::filesystem::path dir_;
  std::mutex write_mutex_;
};

/// Digest of a message pair, used as the cache validity key.
std::string prompt_digest(const ChatMessages& messages);

// ---------------------------------------------------------------------------
// Judgment
// ---------------------------------------------------------------------------

struct JudgeStats {
  std::atomic<std::size_t> backend_calls{0};
  std::atomic<std::size_t> cache_hits{0};
  std::atomic<std::size_t> reasks{0};
  std::atomic<std::size_t> fallbacks{0};
};

inline constexpr std::string_view kReaskInstruction =
    R"(Respond with a fenced json block containing only {"correct": true|false}.)";

/// Everything a judgment needs besides the instance itself.
class Judge {
 public:
  Judge(JudgeBackend& backend, const PromptTemplates& templates, JudgeParams params,
        ResponseCache* cache = nullptr, ComparisonMode mode = ComparisonMode::kSet,
        RenderConfig render_cfg = {}, Sleeper sleeper = {});

  /// Short-circuits generation failures to exec_error without calling the
  /// backend. Otherwise prompts the backend, re-asks once on an unparseable
  /// answer and falls back to the EX verdict when the judge cannot deliver.
  /// Throws DatasetError when the ground truth failed.
  JudgmentRecord judge_instance(const EvalInstance& instance, const Prediction& pred,
                                const SchemaDoc& schema, const ExecutionOutcome& gt_out,
                                const ExecutionOutcome& gen_out);

  /// Backend call with retries and the on-disk cache. Only responses that
  /// `accept` approves are stored.
  std::string cached_complete(const ChatMessages& messages, const RequestContext& ctx,
                              std::string_view kind,
                              const std::function<bool(const std::string&)>& accept = {});

  JudgeBackend& backend() { return backend_; }
  const PromptTemplates& templates() const { return templates_; }
  const JudgeParams& params() const { return params_; }
  const JudgeStats& stats() const { return stats_; }

 private:
  JudgeBackend& backend_;
  const PromptTemplates& templates_;
  JudgeParams params_;
  ResponseCache* cache_;
  ComparisonMode mode_;
  RenderConfig render_cfg_;
  Sleeper sleeper_;
  JudgeStats stats_;
};

}  // namespace flex
