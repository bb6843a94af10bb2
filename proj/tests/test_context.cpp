#include <gtest/gtest.h>

#include <thread>

#include "flex/context.hpp"
#include "flex/execution.hpp"
#include "support.hpp"

namespace flex {
namespace {

using testing::TempDir;
namespace fs = std::filesystem;

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

TEST(Schema, StudentTablesAndColumns) {
  TempDir dir;
  const auto db = testing::install_fixture_db(dir.path(), "student");
  const SchemaDoc doc = extract_schema(db);
  ASSERT_EQ(doc.tables.size(), 1u);
  EXPECT_EQ(doc.tables[0].name, "student");
  EXPECT_EQ(doc.tables[0].columns,
            (std::vector<std::string>{"id", "fname", "lname", "age", "score"}));
  EXPECT_TRUE(doc.column_descriptions.empty());
  EXPECT_EQ(doc.to_prompt_text(), doc.tables[0].create_sql);
}

TEST(Schema, TablesInNameOrder) {
  TempDir dir;
  const auto db = testing::install_fixture_db(dir.path(), "california_schools");
  const SchemaDoc doc = extract_schema(db);
  std::vector<std::string> names;
  for (const auto& t : doc.tables) names.push_back(t.name);
  EXPECT_EQ(names, (std::vector<std::string>{"frpm", "satscores", "schools"}));
  EXPECT_EQ(doc.create_statements().size(), 3u);
}

TEST(Schema, DescriptionsJoinLenientlyAndDropUnknownColumns) {
  TempDir dir;
  const auto db = testing::install_fixture_db(dir.path(), "california_schools");
  const SchemaDoc doc = extract_schema(db, db.parent_path() / "database_description");

  ASSERT_EQ(doc.column_descriptions.size(), 3u);
  EXPECT_EQ(doc.column_descriptions[0].table, "satscores");
  EXPECT_EQ(doc.column_descriptions[0].column, "cds");
  EXPECT_EQ(doc.column_descriptions[0].description, "California Department Schools code");
  EXPECT_EQ(doc.column_descriptions[2].column, "NumGE1500");
  EXPECT_EQ(doc.column_descriptions[2].description,
            "Number of test takers whose total SAT scores are greater or equal to 1500, the "
            "\"excellence\" threshold");

  const std::string text = doc.to_prompt_text();
  EXPECT_NE(text.find("-- NumTstTakr: Number of test takers in this school"), std::string::npos);
  EXPECT_EQ(text.find("MissingColumn"), std::string::npos);
  EXPECT_EQ(count_of(text, "CREATE TABLE"), 3u);
}

TEST(Schema, TableStemMatchIsCaseInsensitive) {
  TempDir dir;
  const auto db = testing::install_fixture_db(dir.path(), "student");
  const auto desc = dir / "desc";
  testing::spit(desc / "STUDENT.csv",
                "original_column_name,column_description\nage,Age in years\r\nnope,x\n");
  testing::spit(desc / "ghost.csv", "original_column_name,column_description\na,b\n");
  const SchemaDoc doc = extract_schema(db, desc);
  ASSERT_EQ(doc.column_descriptions.size(), 1u);
  EXPECT_EQ(doc.column_descriptions[0].column, "age");
  EXPECT_EQ(doc.column_descriptions[0].description, "Age in years");
}

TEST(Schema, MissingDatabaseIsADatasetError) {
  TempDir dir;
  EXPECT_THROW(extract_schema(dir / "absent.sqlite"), DatasetError);
}

TEST(Schema, CacheReturnsOneSharedDocument) {
  TempDir dir;
  testing::install_fixture_dbs(dir.path());
  SchemaCache cache(dir.path());
  std::vector<std::shared_ptr<const SchemaDoc>> seen(8);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    threads.emplace_back([&, i] { seen[i] = cache.get("california_schools"); });
  }
  for (auto& t : threads) t.join();
  for (const auto& doc : seen) EXPECT_EQ(doc.get(), seen[0].get());
  EXPECT_EQ(seen[0]->column_descriptions.size(), 3u);
  EXPECT_NE(cache.get("student").get(), seen[0].get());
  EXPECT_THROW(cache.get("no_such_db"), DatasetError);
}

TEST(Criteria, ParseAndRender) {
  std::string text;
  for (const auto& title : required_titles(CriteriaVariant::kTNeq)) {
    text += "### " + title + "\n  body of " + title + "\n\n";
  }
  const auto c = CriteriaText::parse(CriteriaVariant::kTNeq, text);
  ASSERT_EQ(c.sections.size(), 4u);
  EXPECT_EQ(c.sections[1].body, "body of Representation of Values");
  EXPECT_EQ(c.render(),
            "1. **Acceptable Output Structure Variations**: body of Acceptable Output Structure "
            "Variations\n"
            "2. **Representation of Values**: body of Representation of Values\n"
            "3. **Multiple Answers Available**: body of Multiple Answers Available\n"
            "4. **Incorrect Ground Truth**: body of Incorrect Ground Truth");
}

TEST(Criteria, WrongTitlesOrEmptyBodiesAreRejected) {
  const auto& eq = required_titles(CriteriaVariant::kTEq);
  std::string good;
  for (const auto& t : eq) good += "### " + t + "\ntext\n";
  EXPECT_NO_THROW(CriteriaText::parse(CriteriaVariant::kTEq, good));
  EXPECT_THROW(CriteriaText::parse(CriteriaVariant::kTNeq, good), ConfigError);

  std::string missing;
  for (std::size_t i = 1; i < eq.size(); ++i) missing += "### " + eq[i] + "\ntext\n";
  EXPECT_THROW(CriteriaText::parse(CriteriaVariant::kTEq, missing), ConfigError);

  std::string reordered = "### " + eq[1] + "\nx\n### " + eq[0] + "\nx\n";
  for (std::size_t i = 2; i < eq.size(); ++i) reordered += "### " + eq[i] + "\nx\n";
  EXPECT_THROW(CriteriaText::parse(CriteriaVariant::kTEq, reordered), ConfigError);

  std::string empty_body;
  for (const auto& t : eq) empty_body += "### " + t + "\n" + (t == eq[2] ? "\n" : "x\n");
  EXPECT_THROW(CriteriaText::parse(CriteriaVariant::kTEq, empty_body), ConfigError);
}

TEST(Templates, ShippedSetLoads) {
  const auto t = PromptTemplates::load(PromptTemplates::default_dir());
  EXPECT_EQ(t.hash.size(), 64u);
  EXPECT_EQ(t.short_hash(), t.hash.substr(0, 16));
  EXPECT_EQ(t.criteria_eq.sections.size(), 5u);
  EXPECT_EQ(t.criteria_neq.sections.size(), 4u);
}

TEST(Templates, HashFollowsContent) {
  TempDir dir;
  const auto copy = dir / "v1";
  fs::copy(PromptTemplates::default_dir(), copy, fs::copy_options::recursive);
  const auto original = PromptTemplates::load(PromptTemplates::default_dir());
  EXPECT_EQ(PromptTemplates::load(copy).hash, original.hash);

  testing::spit(copy / "user.txt", testing::slurp(copy / "user.txt") + " ");
  EXPECT_NE(PromptTemplates::load(copy).hash, original.hash);

  fs::remove(copy / "categorize_fn.txt");
  EXPECT_THROW(PromptTemplates::load(copy), ConfigError);
}

TEST(FillTemplate, PlaceholdersAndBlocks) {
  EXPECT_EQ(fill_template("a {x} b", {{"x", "1"}}), "a 1 b");
  EXPECT_EQ(fill_template("{?k}K={k};{/k}end", {{"k", "v"}}), "K=v;end");
  EXPECT_EQ(fill_template("{?k}K={k};{/k}end", {{"k", ""}}), "end");
  EXPECT_EQ(fill_template("{?k}K={k};{/k}end", {}), "end");
  EXPECT_EQ(fill_template(R"({"correct": true} {y})", {}), R"({"correct": true} {y})");
  EXPECT_EQ(fill_template("{x}", {{"x", "{y}"}, {"y", "no"}}), "{y}");
  EXPECT_EQ(fill_template("open { brace", {}), "open { brace");
  EXPECT_THROW(fill_template("{?k} never closed", {{"k", "v"}}), ConfigError);
}

class Prompts : public ::testing::Test {
 protected:
  void SetUp() override {
    db_ = testing::install_fixture_db(dir_.path(), "student");
    schema_ = extract_schema(db_);
    instance_.instance_id = 7;
    instance_.db_id = "student";
    instance_.question = "Who has the highest score?";
    instance_.gt_sql = "SELECT fname, lname FROM student ORDER BY score DESC LIMIT 1";
    pred_.instance_id = 7;
  }

  ContextBundle bundle(const std::string& gen_sql) {
    pred_.gen_sql = gen_sql;
    const auto gt = execute_query(db_, instance_.gt_sql, {});
    const auto gen = execute_query(db_, gen_sql, {});
    const bool eq = results_equal(gt.table(), gen.table(), ComparisonMode::kSet);
    return assemble_context(instance_, pred_, schema_, gt, gen, eq);
  }

  TempDir dir_;
  fs::path db_;
  SchemaDoc schema_;
  EvalInstance instance_;
  Prediction pred_;
  PromptTemplates templates_ = PromptTemplates::load(PromptTemplates::default_dir());
};

TEST_F(Prompts, EqBranchOmitsResultsAndUsesEqCriteria) {
  const auto b = bundle("SELECT fname, lname FROM student WHERE age < 19 ORDER BY score DESC LIMIT 1");
  EXPECT_EQ(b.branch, Branch::kEq);
  EXPECT_TRUE(b.valid());
  const auto m = build_prompt(b, templates_);
  EXPECT_EQ(m.user.find("Result"), std::string::npos);
  EXPECT_EQ(m.user.find("External Knowledge"), std::string::npos);
  for (const auto& t : required_titles(CriteriaVariant::kTEq)) {
    EXPECT_NE(m.system.find("**" + t + "**"), std::string::npos) << t;
  }
  for (const auto& t : required_titles(CriteriaVariant::kTNeq)) {
    EXPECT_EQ(m.system.find(t), std::string::npos) << t;
  }
  EXPECT_EQ(m.system.find("{criteria}"), std::string::npos);
  EXPECT_NE(m.system.find(R"({"correct": true})"), std::string::npos);
  EXPECT_NE(m.user.find("CREATE TABLE"), std::string::npos);
  EXPECT_NE(m.user.find(b.gen_sql), std::string::npos);
}

TEST_F(Prompts, NeqBranchRendersBothResults) {
  instance_.knowledge = "score is out of 100";
  const auto b = bundle("SELECT lname, fname FROM student ORDER BY score DESC LIMIT 1");
  EXPECT_EQ(b.branch, Branch::kNeq);
  ASSERT_TRUE(b.gt_result_rendered && b.gen_result_rendered);
  const auto m = build_prompt(b, templates_);
  EXPECT_NE(m.user.find("### Ground Truth Result\n" + *b.gt_result_rendered), std::string::npos);
  EXPECT_NE(m.user.find("### Prediction Result\n" + *b.gen_result_rendered), std::string::npos);
  EXPECT_NE(m.user.find("### External Knowledge\nscore is out of 100"), std::string::npos);
  EXPECT_NE(m.user.find("| lname | fname |"), std::string::npos);
  for (const auto& t : required_titles(CriteriaVariant::kTNeq)) {
    EXPECT_NE(m.system.find("**" + t + "**"), std::string::npos) << t;
  }
}

TEST_F(Prompts, ErrorsAndInvalidBundlesAreContractViolations) {
  const auto gt = execute_query(db_, instance_.gt_sql, {});
  const auto bad = execute_query(db_, "SELEC 1", {});
  EXPECT_THROW(assemble_context(instance_, pred_, schema_, gt, bad, false), ContractViolation);
  EXPECT_THROW(assemble_context(instance_, pred_, schema_, bad, gt, false), ContractViolation);

  auto b = bundle("SELECT 1");
  b.gen_result_rendered.reset();
  EXPECT_FALSE(b.valid());
  EXPECT_THROW(build_prompt(b, templates_), ContractViolation);
}

TEST_F(Prompts, CategorizationPromptPicksTheSystemText) {
  CategorizationInput in{false, "Q?", "", "CREATE TABLE t(x)", "SELECT 1", "SELECT 2",
                         "The filter is wrong."};
  const auto fp = build_categorization_prompt(in, templates_);
  EXPECT_EQ(fp.system, templates_.categorize_fp);
  EXPECT_NE(fp.user.find("### Previous Judgment\nThe filter is wrong."), std::string::npos);
  in.false_negative = true;
  EXPECT_EQ(build_categorization_prompt(in, templates_).system, templates_.categorize_fn);
}

}  // namespace
}  // namespace flex
