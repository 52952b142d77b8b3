#include "excavate/kv_config.h"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

namespace excavate {
namespace {

TEST(KeyValueConfig, ParsesCommentsAndWhitespace) {
  const auto cfg = KeyValueConfig::Parse(
      "# header\n"
      "  dt = 0.1   # seconds\n"
      "\n"
      "limit.boom=-0.4 1.1\n"
      "name = reach\r\n");
  EXPECT_DOUBLE_EQ(cfg.GetDouble("dt"), 0.1);
  EXPECT_EQ(cfg.GetDoubles("limit.boom"), (std::vector<double>{-0.4, 1.1}));
  EXPECT_EQ(cfg.GetString("name"), "reach");
  EXPECT_FALSE(cfg.Has("header"));
}

TEST(KeyValueConfig, Fallbacks) {
  const auto cfg = KeyValueConfig::Parse("a = 3\n");
  EXPECT_EQ(cfg.GetInt("a"), 3);
  EXPECT_EQ(cfg.GetInt("b", 7), 7);
  EXPECT_EQ(cfg.GetDouble("b", 2.5), 2.5);
  EXPECT_EQ(cfg.GetString("b", "x"), "x");
}

TEST(KeyValueConfig, Errors) {
  EXPECT_THROW(KeyValueConfig::Parse("no equals sign\n"), ConfigError);
  EXPECT_THROW(KeyValueConfig::Parse(" = 4\n"), ConfigError);
  const auto cfg = KeyValueConfig::Parse("x = abc\ny = 1.5\n");
  EXPECT_THROW(cfg.GetDouble("x"), ConfigError);
  EXPECT_THROW(cfg.GetInt("y"), ConfigError);
  EXPECT_THROW(cfg.GetString("missing"), ConfigError);
  EXPECT_THROW(KeyValueConfig::Load("/nonexistent/excavate.cfg"), std::exception);
}

TEST(KeyValueConfig, DoublesRoundTripBitExact) {
  const std::vector<double> values{0.1, -2.8227e-6, 1.0 / 3.0, 1e-310,
                                   std::numeric_limits<double>::max(), -0.0};
  KeyValueConfig cfg;
  cfg.Set("v", values);
  cfg.Set("s", 5.8151e-6);
  const auto back = KeyValueConfig::Parse(cfg.ToString());
  const auto got = back.GetDoubles("v");
  ASSERT_EQ(got.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    EXPECT_EQ(std::memcmp(&got[i], &values[i], sizeof(double)), 0) << i;
  }
  EXPECT_EQ(back.GetDouble("s"), 5.8151e-6);
}

TEST(KeyValueConfig, SaveLoad) {
  const auto path = std::filesystem::temp_directory_path() / "excavate_kv_test.cfg";
  KeyValueConfig cfg;
  cfg.Set("task", "dig_dump");
  cfg.Set("steps", 30000.0);
  cfg.Save(path);
  const auto back = KeyValueConfig::Load(path);
  EXPECT_EQ(back.entries(), cfg.entries());
  EXPECT_EQ(back.GetInt("steps"), 30000);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace excavate
