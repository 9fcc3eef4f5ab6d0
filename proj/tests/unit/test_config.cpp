#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "stae/config.hpp"
#include "stae/error.hpp"
#include "stae/io.hpp"

using namespace stae;

TEST(ConfigMapTest, ParsesTypedScalars) {
  const ConfigMap m = ConfigMap::parse(
      "# comment\n"
      "d_f = 24\n"
      "dropout = 0.1   # trailing\n"
      "\n"
      "flag = true\n"
      "variant = \"no_Ea+no_Ep\"\n"
      "name = a # b\n"
      "quoted = \"x # y\"\n"
      "decay_milestones = [20, 30]\n");
  EXPECT_EQ(m.get_size("d_f", 0), 24u);
  EXPECT_DOUBLE_EQ(m.get_double("dropout", 0.0), 0.1);
  EXPECT_TRUE(m.get_bool("flag", false));
  EXPECT_EQ(m.get_string("variant", ""), "no_Ea+no_Ep");
  EXPECT_EQ(m.get_string("name", ""), "a");
  EXPECT_EQ(m.get_string("quoted", ""), "x # y");
  EXPECT_EQ(m.get_list("decay_milestones", {}), (std::vector<double>{20, 30}));
  EXPECT_EQ(m.get_list("missing", {1.0}), (std::vector<double>{1.0}));
  EXPECT_EQ(m.get_int("missing", -4), -4);
}

TEST(ConfigMapTest, TypeErrorsNameTheKey) {
  const ConfigMap m = ConfigMap::parse("a = 1.5\nb = maybe\nc = -3\nd = [1, x]\ne = [1, 2\n");
  try {
    m.get_int("a", 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
  }
  EXPECT_THROW(m.get_bool("b", false), ConfigError);
  EXPECT_THROW(m.get_size("c", 0), ConfigError);
  EXPECT_THROW(m.get_u64("c", 0), ConfigError);
  EXPECT_THROW(m.get_list("d", {}), ConfigError);
  EXPECT_THROW(m.get_list("e", {}), ConfigError);
  EXPECT_THROW(m.raw("zzz"), ConfigError);
}

TEST(ConfigMapTest, SyntaxErrorsCarryLineNumbers) {
  try {
    ConfigMap::parse("a = 1\nnot an entry\n", "c.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("c.toml:2"), std::string::npos);
  }
  EXPECT_THROW(ConfigMap::parse("[section]\n"), ConfigError);
  EXPECT_THROW(ConfigMap::parse("bad key = 1\n"), ConfigError);
  EXPECT_THROW(ConfigMap::parse("a = 1\na = 2\n"), ConfigError);
}

TEST(ConfigMapTest, MergeOverridesAndTextRoundTrip) {
  ConfigMap base = ConfigMap::parse("a = 1\nb = 2\n");
  base.merge(ConfigMap::parse("b = 3\nc = 4\n"));
  EXPECT_EQ(base.get_int("b", 0), 3);
  EXPECT_EQ(base.get_int("c", 0), 4);
  const ConfigMap again = ConfigMap::parse(base.to_text());
  EXPECT_EQ(again.entries(), base.entries());
  base.erase("a");
  EXPECT_FALSE(base.contains("a"));
}

TEST(ConfigMapTest, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "stae_config_test.conf";
  write_file_atomic(path, "lr = 0.003\n");
  EXPECT_DOUBLE_EQ(ConfigMap::load(path).get_double("lr", 0.0), 0.003);
  std::filesystem::remove(path);
  EXPECT_THROW(ConfigMap::load(path), IoError);
}

TEST(FormatDouble, ShortestRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 123456789.0}) {
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
}

TEST(Csv, RowWidthIsChecked) {
  CsvWriter w({"a", "b"});
  w.row({"1", "2"});
  EXPECT_EQ(w.text(), "a,b\n1,2\n");
  EXPECT_THROW(w.row({"1"}), ContractError);
}

TEST(ErrorKinds, ExitCodes) {
  EXPECT_EQ(exit_code(ErrorKind::Config), 2);
  EXPECT_EQ(exit_code(ErrorKind::Io), 2);
  EXPECT_EQ(exit_code(ErrorKind::Magic), 3);
  EXPECT_EQ(exit_code(ErrorKind::Truncated), 3);
  EXPECT_EQ(exit_code(ErrorKind::Numeric), 4);
  EXPECT_STREQ(to_string(ErrorKind::Truncated), "TruncationError");
}
