#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "flex/judge.hpp"
#include "support.hpp"

namespace flex {
namespace {

using testing::TempDir;
using std::chrono::milliseconds;

TEST(ParseVerdict, FencedJsonBlock) {
  EXPECT_TRUE(parse_verdict("Looks fine.\n```json\n{\"correct\": true}\n```"));
  EXPECT_FALSE(parse_verdict("```JSON\n{ \"correct\" : false }\n```\ntrailing words"));
  EXPECT_TRUE(parse_verdict("```\n{\"correct\": true}\n```"));
}

TEST(ParseVerdict, LastQualifyingBlockWins) {
  const std::string text =
      "```json\n{\"correct\": true}\n```\nOn reflection no.\n```json\n{\"correct\": false}\n```";
  EXPECT_FALSE(parse_verdict(text));
  const std::string with_noise =
      "```json\n{\"correct\": false}\n```\n```sql\nSELECT 1\n```\n```json\n{\"other\": 1}\n```";
  EXPECT_FALSE(parse_verdict(with_noise));
}

TEST(ParseVerdict, LiteralFallbackAndFailure) {
  EXPECT_TRUE(parse_verdict("My answer: {\"correct\":true}"));
  EXPECT_FALSE(parse_verdict("\"correct\": true at first, then \"correct\" : false"));
  EXPECT_THROW(parse_verdict("I cannot decide."), UnparseableVerdict);
  EXPECT_THROW(parse_verdict("```json\n{\"correct\": \"yes\"}\n```"), UnparseableVerdict);
  EXPECT_THROW(parse_verdict(""), UnparseableVerdict);
}

TEST(ParseVerdict, RationaleDropsTheVerdictBlock) {
  EXPECT_EQ(extract_rationale("  Reasoning here.\n```json\n{\"correct\": true}\n```\n"),
            "Reasoning here.");
  EXPECT_EQ(extract_rationale("no block at all "), "no block at all");
  const auto blocks = find_fenced_blocks("a\n```sql\nSELECT 1\n```\nb");
  ASSERT_EQ(blocks.size(), 1u);
  EXPECT_EQ(blocks[0].language, "sql");
  EXPECT_EQ(blocks[0].body, "SELECT 1\n");
  EXPECT_EQ(blocks[0].begin, 2u);
}

/// Fails with the given exception for the first `failures` calls.
template <typename Error>
class Flaky final : public JudgeBackend {
 public:
  explicit Flaky(int failures) : failures_(failures) {}
  std::string name() const override { return "flaky"; }
  std::string chat(const ChatMessages&, const JudgeParams&, const RequestContext&) override {
    if (calls++ < failures_) throw Error("boom");
    return "```json\n{\"correct\": true}\n```";
  }
  std::atomic<int> calls{0};

 private:
  int failures_;
};

struct SleepLog {
  std::vector<milliseconds> waits;
  Sleeper sleeper() {
    return [this](milliseconds d) { waits.push_back(d); };
  }
};

TEST(Retry, TransportErrorsBackOffExponentially) {
  Flaky<TransportError> backend(3);
  SleepLog log;
  const JudgeParams params;
  EXPECT_EQ(complete(backend, {}, params, {}, log.sleeper()), "```json\n{\"correct\": true}\n```");
  EXPECT_EQ(backend.calls, 4);
  ASSERT_EQ(log.waits.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    const double base = 1000.0 * (1 << k);
    EXPECT_GE(log.waits[k].count(), base);
    EXPECT_LT(log.waits[k].count(), base * 1.25);
  }
}

TEST(Retry, GivesUpAfterTheRetryBudget) {
  Flaky<TransportError> backend(10);
  SleepLog log;
  JudgeParams params;
  params.max_transport_retries = 2;
  EXPECT_THROW(complete(backend, {}, params, {}, log.sleeper()), TransportError);
  EXPECT_EQ(backend.calls, 3);
  EXPECT_EQ(log.waits.size(), 2u);
}

TEST(Retry, RejectionsAndBudgetErrorsAreNotRetried) {
  SleepLog log;
  Flaky<RejectedError> rejected(1);
  EXPECT_THROW(complete(rejected, {}, {}, {}, log.sleeper()), RejectedError);
  EXPECT_EQ(rejected.calls, 1);
  Flaky<BudgetError> budget(1);
  EXPECT_THROW(complete(budget, {}, {}, {}, log.sleeper()), BudgetError);
  EXPECT_EQ(budget.calls, 1);
  EXPECT_TRUE(log.waits.empty());
}

TEST(Backends, MocksAndFactory) {
  ExEchoBackend echo;
  EXPECT_TRUE(parse_verdict(echo.chat({}, {}, {1, true, RequestPurpose::kJudge})));
  EXPECT_FALSE(parse_verdict(echo.chat({}, {}, {1, false, RequestPurpose::kJudge})));
  ConstantBackend yes(true);
  EXPECT_TRUE(parse_verdict(yes.chat({}, {}, {1, false, RequestPurpose::kJudge})));
  EXPECT_EQ(yes.name(), "always-correct");

  EXPECT_EQ(make_backend("ex-echo", {})->name(), "ex-echo");
  EXPECT_EQ(make_backend("always-incorrect", {})->name(), "always-incorrect");
  EXPECT_THROW(make_backend("scripted", {}), ConfigError);
  EXPECT_THROW(make_backend("gpt-5000", {}), ConfigError);
}

TEST(Backends, ScriptedFromDirectory) {
  TempDir dir;
  testing::spit(dir / "5.txt", "judge five");
  testing::spit(dir / "5.categorize.txt", "categorize five");
  testing::spit(dir / "notes.md", "ignored");
  ScriptedBackend scripted(dir.path());
  EXPECT_EQ(scripted.chat({}, {}, {5, false, RequestPurpose::kJudge}), "judge five");
  EXPECT_EQ(scripted.chat({}, {}, {5, false, RequestPurpose::kCategorizeIncorrect}),
            "categorize five");
  EXPECT_THROW(scripted.chat({}, {}, {6, false, RequestPurpose::kJudge}), RejectedError);
}

TEST(Cache, HitsOnlyForTheSameDigest) {
  TempDir dir;
  ResponseCache cache(dir.path());
  cache.store("gpt-4o", "abc", 3, "judge", "d1", "resp");
  EXPECT_EQ(cache.lookup("gpt-4o", "abc", 3, "judge", "d1"), "resp");
  EXPECT_FALSE(cache.lookup("gpt-4o", "abc", 3, "judge", "d2"));
  EXPECT_FALSE(cache.lookup("gpt-4o", "other", 3, "judge", "d1"));
  EXPECT_FALSE(cache.lookup("gpt-4o", "abc", 3, "categorize", "d1"));
  EXPECT_EQ(cache.entry_path("gpt-4o", "abc", 3, "judge"), dir / "gpt-4o/abc/3.json");
  EXPECT_EQ(cache.entry_path("gpt-4o", "abc", 3, "categorize"),
            dir / "gpt-4o/abc/3.categorize.json");

  const auto doc = nlohmann::json::parse(testing::slurp(dir / "gpt-4o/abc/3.json"));
  EXPECT_EQ(doc["request_digest"], "d1");
  EXPECT_EQ(doc["kind"], "judge");
  EXPECT_TRUE(doc.contains("stored_at"));
}

TEST(Cache, DigestSeparatesSystemFromUser) {
  EXPECT_NE(prompt_digest({"ab", "c"}), prompt_digest({"a", "bc"}));
  EXPECT_EQ(prompt_digest({"a", "b"}), prompt_digest({"a", "b"}));
  EXPECT_EQ(prompt_digest({"", ""}).size(), 64u);
}

/// Scripted judge answers plus a call log.
class Recording final : public JudgeBackend {
 public:
  explicit Recording(std::vector<std::string> answers) : answers_(std::move(answers)) {}
  std::string name() const override { return "recording"; }
  std::string chat(const ChatMessages& m, const JudgeParams&, const RequestContext&) override {
    std::lock_guard lock(mutex_);
    seen.push_back(m);
    if (seen.size() > answers_.size()) throw RejectedError("no more answers");
    return answers_[seen.size() - 1];
  }
  std::vector<ChatMessages> seen;

 private:
  std::vector<std::string> answers_;
  std::mutex mutex_;
};

class JudgeFlow : public ::testing::Test {
 protected:
  void SetUp() override {
    db_ = testing::install_fixture_db(dir_.path(), "student");
    schema_ = extract_schema(db_);
    instance_ = {1, "student", "Who has the highest score?", "",
                 "SELECT fname, lname FROM student ORDER BY score DESC LIMIT 1",
                 Difficulty::kSimple};
  }

  JudgmentRecord judge(JudgeBackend& backend, const std::string& gen_sql,
                       ResponseCache* cache = nullptr) {
    Judge j(backend, templates_, {}, cache, ComparisonMode::kSet, {}, [](milliseconds) {});
    const auto r = judge_with(j, gen_sql);
    last_stats_ = {j.stats().backend_calls, j.stats().cache_hits, j.stats().reasks,
                   j.stats().fallbacks};
    return r;
  }

  JudgmentRecord judge_with(Judge& j, const std::string& gen_sql) {
    const Prediction pred{instance_.instance_id, gen_sql};
    return j.judge_instance(instance_, pred, schema_, execute_query(db_, instance_.gt_sql, {}),
                            execute_query(db_, gen_sql, {}));
  }

  static constexpr const char* kMatch =
      "SELECT fname, lname FROM student WHERE age < 19 ORDER BY score DESC LIMIT 1";
  static constexpr const char* kMismatch =
      "SELECT lname, fname FROM student ORDER BY score DESC LIMIT 1";

  TempDir dir_;
  std::filesystem::path db_;
  SchemaDoc schema_;
  EvalInstance instance_;
  PromptTemplates templates_ = PromptTemplates::load(PromptTemplates::default_dir());
  std::array<std::size_t, 4> last_stats_{};
};

TEST_F(JudgeFlow, FalsePositiveFromAnEqMatch) {
  Recording backend({"The age filter is extra.\n```json\n{\"correct\": false}\n```"});
  const auto r = judge(backend, kMatch);
  EXPECT_TRUE(r.ex_equal);
  EXPECT_TRUE(r.bag_equal);
  EXPECT_EQ(r.verdict, Verdict::kIncorrect);
  EXPECT_EQ(r.confusion, ConfusionCell::kFP);
  EXPECT_EQ(r.rationale, "The age filter is extra.");
  EXPECT_EQ(r.judge_name, "recording");
  EXPECT_TRUE(consistent(r));
  ASSERT_EQ(backend.seen.size(), 1u);
  EXPECT_EQ(backend.seen[0].user.find("Result"), std::string::npos);
}

TEST_F(JudgeFlow, FalseNegativeFromANeqMismatch) {
  Recording backend({"Column order differs only.\n```json\n{\"correct\": true}\n```"});
  const auto r = judge(backend, kMismatch);
  EXPECT_FALSE(r.ex_equal);
  EXPECT_EQ(r.confusion, ConfusionCell::kFN);
  ASSERT_EQ(backend.seen.size(), 1u);
  EXPECT_NE(backend.seen[0].user.find("### Prediction Result"), std::string::npos);
}

TEST_F(JudgeFlow, ExecErrorShortCircuits) {
  Recording backend({});
  const auto r = judge(backend, "SELEC 1");
  EXPECT_EQ(r.verdict, Verdict::kExecError);
  EXPECT_EQ(r.confusion, ConfusionCell::kTN);
  EXPECT_EQ(r.categories, std::set<ErrorCategory>{ErrorCategory::kExecError});
  EXPECT_TRUE(backend.seen.empty());
  EXPECT_TRUE(consistent(r));
}

TEST_F(JudgeFlow, GroundTruthFailureIsADatasetError) {
  Recording backend({});
  Judge j(backend, templates_, {});
  EXPECT_THROW(j.judge_instance(instance_, {1, kMatch}, schema_, execute_query(db_, "SELEC", {}),
                                execute_query(db_, kMatch, {})),
               DatasetError);
}

TEST_F(JudgeFlow, ReaskRecoversAVerdict) {
  Recording backend({"It looks right to me.", "```json\n{\"correct\": true}\n```"});
  const auto r = judge(backend, kMatch);
  EXPECT_EQ(r.verdict, Verdict::kCorrect);
  EXPECT_EQ(r.confusion, ConfusionCell::kTP);
  EXPECT_EQ(r.rationale, "It looks right to me.");
  ASSERT_EQ(backend.seen.size(), 2u);
  EXPECT_EQ(backend.seen[1].user,
            backend.seen[0].user + "\n\n" + std::string(kReaskInstruction));
  EXPECT_EQ(last_stats_[2], 1u);
  EXPECT_EQ(last_stats_[3], 0u);
}

TEST_F(JudgeFlow, FallbackFollowsEx) {
  Recording twice({"unsure", "still unsure"});
  const auto r = judge(twice, kMatch);
  EXPECT_EQ(r.verdict, Verdict::kJudgeFailedFallback);
  EXPECT_TRUE(r.verdict_bool());
  EXPECT_EQ(r.confusion, ConfusionCell::kTP);
  EXPECT_EQ(r.raw_response, "unsure\n\nstill unsure");
  EXPECT_TRUE(r.rationale.starts_with("judge failed: "));
  EXPECT_EQ(last_stats_[3], 1u);

  Flaky<BudgetError> budget(5);
  const auto b = judge(budget, kMismatch);
  EXPECT_EQ(b.verdict, Verdict::kJudgeFailedFallback);
  EXPECT_FALSE(b.verdict_bool());
  EXPECT_EQ(b.confusion, ConfusionCell::kTN);
  EXPECT_TRUE(consistent(b));
}

TEST_F(JudgeFlow, CacheAvoidsRepeatCallsAndSkipsUnparseable) {
  TempDir cache_dir;
  ResponseCache cache(cache_dir.path());
  Recording first({"```json\n{\"correct\": false}\n```"});
  const auto a = judge(first, kMatch, &cache);
  EXPECT_EQ(last_stats_[0], 1u);

  Recording second({});
  const auto b = judge(second, kMatch, &cache);
  EXPECT_TRUE(second.seen.empty());
  EXPECT_EQ(last_stats_[1], 1u);
  EXPECT_EQ(a.verdict, b.verdict);
  EXPECT_EQ(a.raw_response, b.raw_response);

  Recording garbled({"???", "```json\n{\"correct\": true}\n```"});
  judge(garbled, kMismatch, &cache);
  const auto judge_entry =
      cache.entry_path("gpt-4o", templates_.hash, instance_.instance_id, "judge");
  const auto doc = nlohmann::json::parse(testing::slurp(judge_entry));
  EXPECT_EQ(doc["response"], "```json\n{\"correct\": false}\n```");
  EXPECT_TRUE(std::filesystem::exists(
      cache.entry_path("gpt-4o", templates_.hash, instance_.instance_id, "judge-reask")));
}

/// Local stand-in for an OpenAI-compatible endpoint.
class FakeProvider : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      paths_.push_back(req.path);
      auth_ = req.get_header_value("Authorization");
      body_ = req.body;
      const int status = statuses_.empty() ? 200 : statuses_.front();
      if (!statuses_.empty()) statuses_.erase(statuses_.begin());
      res.status = status;
      if (status == 200) {
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"fine\n```json\n{\"correct\": true}\n```"}}]})",
                        "application/json");
      } else if (status == 400 && budget_) {
        res.set_content(R"({"error":{"code":"context_length_exceeded"}})", "application/json");
      } else {
        res.set_content(R"({"error":{"message":"nope"}})", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  std::string base(const std::string& suffix = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + suffix;
  }
  JudgeParams params() const {
    JudgeParams p;
    p.request_timeout = milliseconds(5000);
    return p;
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  std::vector<int> statuses_;
  bool budget_ = false;
  std::vector<std::string> paths_;
  std::string auth_;
  std::string body_;
};

TEST_F(FakeProvider, PostsChatCompletions) {
  OpenAiBackend backend(base("/v1/"), "sk-test");
  const std::string out = backend.chat({"sys", "usr"}, params(), {});
  EXPECT_TRUE(parse_verdict(out));
  ASSERT_EQ(paths_.size(), 1u);
  EXPECT_EQ(paths_[0], "/v1/chat/completions");
  EXPECT_EQ(auth_, "Bearer sk-test");
  const auto body = nlohmann::json::parse(body_);
  EXPECT_EQ(body["model"], "gpt-4o");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 2048);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"][1]["content"], "usr");
}

TEST_F(FakeProvider, ServerErrorsAreRetried) {
  statuses_ = {500, 429};
  OpenAiBackend backend(base(), "k");
  SleepLog log;
  EXPECT_NO_THROW(complete(backend, {"s", "u"}, params(), {}, log.sleeper()));
  EXPECT_EQ(paths_.size(), 3u);
  EXPECT_EQ(log.waits.size(), 2u);
}

TEST_F(FakeProvider, ClientErrorsAreFinal) {
  statuses_ = {400};
  OpenAiBackend backend(base(), "k");
  SleepLog log;
  EXPECT_THROW(complete(backend, {"s", "u"}, params(), {}, log.sleeper()), RejectedError);
  statuses_ = {400};
  budget_ = true;
  EXPECT_THROW(complete(backend, {"s", "u"}, params(), {}, log.sleeper()), BudgetError);
  statuses_ = {413};
  EXPECT_THROW(complete(backend, {"s", "u"}, params(), {}, log.sleeper()), BudgetError);
  EXPECT_TRUE(log.waits.empty());
}

TEST(OpenAi, UnreachableHostIsATransportError) {
  OpenAiBackend backend("http://127.0.0.1:1", "k");
  JudgeParams p;
  p.request_timeout = milliseconds(1000);
  EXPECT_THROW(backend.chat({"s", "u"}, p, {}), TransportError);
}

TEST(OpenAi, EnvironmentNeedsAKey) {
  ::unsetenv("FLEX_API_KEY");
  EXPECT_THROW(OpenAiBackend::from_environment(), ConfigError);
  ::setenv("FLEX_API_KEY", "k", 1);
  EXPECT_NO_THROW(OpenAiBackend::from_environment());
  ::unsetenv("FLEX_API_KEY");
  EXPECT_THROW(OpenAiBackend("no-scheme", "k"), ConfigError);
}

}  // namespace
}  // namespace flex
