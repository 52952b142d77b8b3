#include "excavate/dataset.h"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "test_util.h"

namespace excavate::dataset {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("excavate_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

bool BitEqual(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void ExpectBitEqual(const Episode& a, const Episode& b) {
  ASSERT_EQ(a.task, b.task);
  ASSERT_EQ(a.action_space, b.action_space);
  ASSERT_EQ(a.dt, b.dt);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    const auto& x = a.steps[t];
    const auto& y = b.steps[t];
    EXPECT_EQ(std::memcmp(&x.time, &y.time, sizeof(float)), 0);
    EXPECT_EQ(std::memcmp(x.joints.data(), y.joints.data(), sizeof(Float4)), 0);
    EXPECT_EQ(std::memcmp(x.action.data(), y.action.data(), sizeof(Float4)), 0);
    EXPECT_TRUE(BitEqual(x.camera.data, y.camera.data));
    ASSERT_EQ(x.elev_dig.has_value(), y.elev_dig.has_value());
    if (x.elev_dig) {
      EXPECT_TRUE(BitEqual(x.elev_dig->data, y.elev_dig->data));
      EXPECT_TRUE(BitEqual(x.elev_dump->data, y.elev_dump->data));
    }
  }
}

TEST(Episode, ReachHasNoElevationFiles) {
  TempDir dir("ds_reach");
  const auto ep = testing::RandomEpisode(Task::kReach, 2, 6, 8, 1);
  WriteEpisode(ep, dir.path() / "ep");
  const auto manifest = KeyValueConfig::Load(dir.path() / "ep" / "manifest.txt");
  EXPECT_EQ(manifest.GetInt("num_steps"), 2);
  EXPECT_EQ(manifest.GetInt("format_version"), 1);
  EXPECT_FALSE(fs::exists(dir.path() / "ep" / "elev_dig.f32"));
  EXPECT_FALSE(fs::exists(dir.path() / "ep" / "elev_dump.f32"));
}

TEST(Episode, RoundTripIsBitExact) {
  TempDir dir("ds_rt");
  auto ep = testing::RandomEpisode(Task::kDigDump, 9, 6, 8, 2, true);
  // Awkward floats survive too.
  ep.steps[3].joints[1] = -0.0f;
  ep.steps[4].action[2] = 1e-40f;  // subnormal
  WriteEpisode(ep, dir.path() / "ep");
  const auto back = ReadEpisode(dir.path() / "ep");
  ExpectBitEqual(ep, back);
  EXPECT_EQ(back.dt, 0.1);
}

TEST(Episode, DigElevationShapes) {
  TempDir dir("ds_dig");
  const auto ep = testing::RandomEpisode(Task::kDigDump, 361, 60, 80, 3, true);
  WriteEpisode(ep, dir.path() / "ep");
  const auto bytes = fs::file_size(dir.path() / "ep" / "elev_dig.f32");
  EXPECT_EQ(bytes, 361u * 60 * 80 * 3 * sizeof(float));
  EXPECT_EQ(fs::file_size(dir.path() / "ep" / "elev_dump.f32"), bytes);
  const auto manifest = KeyValueConfig::Load(dir.path() / "ep" / "manifest.txt");
  const auto shape = manifest.GetInts("field.elev_dig.shape");
  EXPECT_EQ(shape, (std::vector<long>{361, 60, 80, 3}));
}

TEST(Episode, DistinctReadErrors) {
  TempDir dir("ds_err");
  const auto ep = testing::RandomEpisode(Task::kReach, 5, 4, 4, 4);
  const auto path = dir.path() / "ep";
  WriteEpisode(ep, path);

  fs::resize_file(path / "actions.f32", fs::file_size(path / "actions.f32") - 4);
  EXPECT_THROW(ReadEpisode(path), ShapeMismatchError);

  WriteEpisode(ep, path);
  fs::remove(path / "camera.f32");
  EXPECT_THROW(ReadEpisode(path), MissingFileError);

  WriteEpisode(ep, path);
  auto manifest = KeyValueConfig::Load(path / "manifest.txt");
  manifest.Set("format_version", "7");
  manifest.Save(path / "manifest.txt");
  EXPECT_THROW(ReadEpisode(path), UnsupportedVersionError);

  EXPECT_THROW(ReadEpisode(dir.path() / "nope"), MissingFileError);
}

TEST(Episode, ValidateRejectsInconsistentShapes) {
  auto ep = testing::RandomEpisode(Task::kReach, 3, 4, 4, 5);
  EXPECT_NO_THROW(ep.Validate());
  ep.steps[1].camera = ObservationImage(4, 5);
  EXPECT_THROW(ep.Validate(), std::invalid_argument);
  ep = testing::RandomEpisode(Task::kReach, 3, 4, 4, 5, true);
  EXPECT_THROW(ep.Validate(), std::invalid_argument);  // reach must not carry elevation
  ep = testing::RandomEpisode(Task::kReach, 1, 4, 4, 5);
  EXPECT_THROW(ep.Validate(), std::invalid_argument);
}

TEST(Dataset, DirectoryRoundTripAndCsv) {
  TempDir dir("ds_dir");
  std::vector<Episode> eps;
  for (int i = 0; i < 3; ++i) eps.push_back(testing::RandomEpisode(Task::kReach, 4 + i, 4, 6, 10 + i));
  WriteDataset(eps, dir.path());
  const auto back = ReadDataset(dir.path());
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) ExpectBitEqual(eps[i], back[i]);

  ExportEpisodeCsv(eps[0], dir.path() / "ep.csv");
  std::ifstream in(dir.path() / "ep.csv");
  std::string line;
  int lines = 0;
  std::getline(in, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8);
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 4);
}

TEST(Split, HoldsOutOne) {
  std::vector<Episode> eps;
  for (int i = 0; i < 8; ++i) eps.push_back(testing::RandomEpisode(Task::kReach, 2, 2, 2, i));
  const auto s = SplitTrainTest(eps, 5);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(SplitTrainTest(8, 5).test, s.test_index);
  EXPECT_EQ(SplitTrainTest(8, 5).test, SplitTrainTest(8, 5).test);
  EXPECT_THROW(SplitTrainTest(1, 5), std::invalid_argument);
}

TEST(Split, UniformOverSeeds) {
  std::vector<int> counts(8, 0);
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed) ++counts[SplitTrainTest(8, seed).test];
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / 8.0, 0.02);
}

TEST(Batch, BoundaryAndOracle) {
  const auto ep = testing::RandomEpisode(Task::kReach, 40, 2, 2, 6);
  Batch b;
  AppendSample(ep, 0, ep.size() - 1, 30, b);
  int valid = 0;
  for (int j = 0; j < 30; ++j) valid += b.valid(0, j);
  EXPECT_EQ(valid, 1);
  for (int j = 1; j < 30; ++j) {
    for (int d = 0; d < 4; ++d) EXPECT_EQ(b.action(0, j, d), 0.0f);
  }

  std::mt19937_64 rng(7);
  const std::vector<Episode> train{ep};
  const auto k1 = SampleBatch(train, 1, 64, rng);
  for (auto m : k1.mask) EXPECT_EQ(m, 1);

  const auto batch = SampleBatch(train, 30, 64, rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto [e, t] = batch.origins[i];
    EXPECT_EQ(batch.observations[i].joints, ep.steps[t].joints);
    for (int j = 0; j < 30; ++j) {
      if (!batch.valid(i, j)) continue;
      for (int d = 0; d < 4; ++d) EXPECT_EQ(batch.action(i, j, d), ep.steps[t + j].action[d]);
    }
  }
}

TEST(Batch, MaskIsContiguousPrefix) {
  std::vector<Episode> train;
  for (int i = 0; i < 4; ++i) train.push_back(testing::RandomEpisode(Task::kReach, 5 + 9 * i, 2, 2, 20 + i));
  std::mt19937_64 rng(8);
  const int k = 30;
  int checked = 0;
  while (checked < 10000) {
    const auto b = SampleBatch(train, k, 100, rng);
    for (std::size_t i = 0; i < b.size(); ++i, ++checked) {
      const auto [e, t] = b.origins[i];
      const std::size_t expected = std::min<std::size_t>(k, train[e].size() - t);
      bool seen_zero = false;
      std::size_t ones = 0;
      for (int j = 0; j < k; ++j) {
        if (b.valid(i, j)) {
          ASSERT_FALSE(seen_zero);
          ++ones;
        } else {
          seen_zero = true;
        }
      }
      ASSERT_EQ(ones, expected);
    }
  }
}

}  // namespace
}  // namespace excavate::dataset
