#include <cstdlib>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "flex/judge.hpp"

namespace flex {
using nlohmann::json;

namespace {

/// Splits "https://host:port/prefix" into the origin and the request path,
/// without doubling a trailing /v1.
std::pair<std::string, std::string> split_base(std::string base) {
  while (!base.empty() && base.back() == '/') base.pop_back();
  const auto scheme = base.find("://");
  if (scheme == std::string::npos) throw ConfigError("API base must include a scheme: " + base);
  const auto slash = base.find('/', scheme + 3);
  std::string origin = slash == std::string::npos ? base : base.substr(0, slash);
  std::string prefix = slash == std::string::npos ? "" : base.substr(slash);
  if (prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0) {
    prefix.resize(prefix.size() - 3);
  }
  return {origin, prefix + "/v1/chat/completions"};
}

}  // namespace

OpenAiBackend::OpenAiBackend(std::string base_url, std::string api_key)
    : api_key_(std::move(api_key)) {
  auto [origin, path] = split_base(std::move(base_url));
  scheme_host_port_ = std::move(origin);
  path_ = std::move(path);
}

std::unique_ptr<OpenAiBackend> OpenAiBackend::from_environment() {
  const char* key = std::getenv("FLEX_API_KEY");
  if (key == nullptr || *key == '\0') throw ConfigError("FLEX_API_KEY is not set");
  const char* base = std::getenv("FLEX_API_BASE");
  return std::make_unique<OpenAiBackend>(
      base != nullptr && *base != '\0' ? base : "https://api.openai.com", key);
}

std::string OpenAiBackend::request_body(const ChatMessages& messages, const JudgeParams& params) {
  const json body = {
      {"model", params.model_name},
      {"temperature", params.temperature},
      {"max_tokens", params.max_tokens},
      {"messages",
       json::array({{{"role", "system"}, {"content", messages.system}},
                    {{"role", "user"}, {"content", messages.user}}})},
  };
  return body.dump();
}

std::string OpenAiBackend::chat(const ChatMessages& messages, const JudgeParams& params,
                                const RequestContext&) {
  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::duration_cast<std::chrono::seconds>(params.request_timeout);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  client.set_bearer_token_auth(api_key_);

  const auto res = client.Post(path_, request_body(messages, params), "application/json");
  if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));

  const int status = res->status;
  if (status == 429 || status >= 500) {
    throw TransportError("HTTP " + std::to_string(status));
  }
  if (status == 413 || res->body.find("context_length_exceeded") != std::string::npos) {
    throw BudgetError("token budget exceeded (HTTP " + std::to_string(status) + ")");
  }
  if (status != 200) {
    throw RejectedError("HTTP " + std::to_string(status) + ": " + res->body.substr(0, 500));
  }

  const json doc = json::parse(res->body, nullptr, false);
  if (doc.is_discarded()) throw TransportError("malformed response body");
  try {
    const auto& content = doc.at("choices").at(0).at("message").at("content");
    if (content.is_null()) return {};
    return content.get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("unexpected response shape: ") + e.what());
  }
}

}  // namespace flex
