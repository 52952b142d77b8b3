#include "excavate/dataset.h"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "excavate/kv_config.h"

namespace excavate {
namespace fs = std::filesystem;

const char* TaskName(Task task) {
  switch (task) {
    case Task::kReach:
      return "reach";
    case Task::kDigDump:
      return "dig_dump";
    case Task::kDigDumpReturn:
      return "dig_dump_return";
  }
  return "unknown";
}

Task TaskFromName(const std::string& name) {
  for (Task t : {Task::kReach, Task::kDigDump, Task::kDigDumpReturn}) {
    if (name == TaskName(t)) return t;
  }
  throw std::invalid_argument("unknown task: " + name);
}

const char* ActionSpaceName(ActionSpace space) {
  return space == ActionSpace::kValve ? "valve" : "joint_position";
}

ActionSpace ActionSpaceFromName(const std::string& name) {
  if (name == "valve") return ActionSpace::kValve;
  if (name == "joint_position") return ActionSpace::kJointPosition;
  throw std::invalid_argument("unknown action space: " + name);
}

bool TaskInvolvesDigging(Task task) { return task != Task::kReach; }

ActionSpace DefaultActionSpace(Task task) {
  return task == Task::kDigDumpReturn ? ActionSpace::kJointPosition : ActionSpace::kValve;
}

void Episode::Validate() const {
  if (steps.size() < 2) throw std::invalid_argument("episode needs at least 2 steps");
  if (!(dt > 0.0)) throw std::invalid_argument("episode dt must be > 0");
  const bool digging = TaskInvolvesDigging(task);
  const auto& first = steps.front();
  for (const auto& s : steps) {
    if (s.camera.height != first.camera.height || s.camera.width != first.camera.width ||
        s.camera.size() != static_cast<std::size_t>(s.camera.height) * s.camera.width * 3) {
      throw std::invalid_argument("inconsistent camera image shapes");
    }
    if (s.elev_dig.has_value() != digging || s.elev_dump.has_value() != digging) {
      throw std::invalid_argument(std::string("elevation images must be present iff the task "
                                              "involves digging (task ") +
                                  TaskName(task) + ")");
    }
    if (digging) {
      for (const auto* img : {&*s.elev_dig, &*s.elev_dump}) {
        if (img->height != first.elev_dig->height || img->width != first.elev_dig->width ||
            img->size() != static_cast<std::size_t>(img->height) * img->width * 3) {
          throw std::invalid_argument("inconsistent elevation image shapes");
        }
      }
    }
  }
}

namespace dataset {
namespace {

std::string ShapeString(std::initializer_list<std::size_t> dims) {
  std::string out;
  for (auto d : dims) {
    if (!out.empty()) out += ' ';
    out += std::to_string(d);
  }
  return out;
}

struct FieldSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

std::size_t Count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<float> PackImages(const Episode& ep,
                              const std::optional<ObservationImage> Step::*member) {
  std::vector<float> out;
  for (const auto& s : ep.steps) {
    const auto& img = s.*member;
    out.insert(out.end(), img->data.begin(), img->data.end());
  }
  return out;
}

}  // namespace

void WriteEpisode(const Episode& ep, const fs::path& dir) {
  ep.Validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create episode directory " + dir.string());

  const std::size_t n = ep.steps.size();
  const auto h = static_cast<std::size_t>(ep.steps[0].camera.height);
  const auto w = static_cast<std::size_t>(ep.steps[0].camera.width);
  const bool digging = TaskInvolvesDigging(ep.task);

  KeyValueConfig manifest;
  manifest.Set("format_version", std::to_string(kFormatVersion));
  manifest.Set("task", TaskName(ep.task));
  manifest.Set("action_space", ActionSpaceName(ep.action_space));
  manifest.Set("num_steps", std::to_string(n));
  manifest.Set("dt", ep.dt);
  manifest.Set("image_shape", ShapeString({h, w, 3}));

  std::vector<float> time(n), joints(n * 4), actions(n * 4), camera;
  camera.reserve(n * h * w * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ep.steps[i];
    time[i] = s.time;
    std::copy(s.joints.begin(), s.joints.end(), joints.begin() + i * 4);
    std::copy(s.action.begin(), s.action.end(), actions.begin() + i * 4);
    camera.insert(camera.end(), s.camera.data.begin(), s.camera.data.end());
  }

  std::string fields = "time joints actions camera";
  auto write_field = [&](const std::string& name, const std::vector<float>& values,
                         const std::string& shape) {
    const std::string file = name + ".f32";
    manifest.Set("field." + name + ".shape", shape);
    manifest.Set("field." + name + ".dtype", "float32_le");
    manifest.Set("field." + name + ".file", file);
    WriteFloat32File(dir / file, values);
  };
  write_field("time", time, ShapeString({n}));
  write_field("joints", joints, ShapeString({n, 4}));
  write_field("actions", actions, ShapeString({n, 4}));
  write_field("camera", camera, ShapeString({n, h, w, 3}));
  if (digging) {
    const auto eh = static_cast<std::size_t>(ep.steps[0].elev_dig->height);
    const auto ew = static_cast<std::size_t>(ep.steps[0].elev_dig->width);
    manifest.Set("elevation_shape", ShapeString({eh, ew, 3}));
    write_field("elev_dig", PackImages(ep, &Step::elev_dig), ShapeString({n, eh, ew, 3}));
    write_field("elev_dump", PackImages(ep, &Step::elev_dump), ShapeString({n, eh, ew, 3}));
    fields += " elev_dig elev_dump";
  }
  manifest.Set("fields", fields);
  manifest.Save(dir / "manifest.txt");
}

Episode ReadEpisode(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.txt";
  if (!fs::exists(manifest_path)) {
    throw MissingFileError("missing episode manifest: " + manifest_path.string());
  }
  const auto manifest = KeyValueConfig::Load(manifest_path);
  const long version = manifest.GetInt("format_version", -1);
  if (version != kFormatVersion) {
    throw UnsupportedVersionError("unsupported episode format_version " +
                                  std::to_string(version) + " in " + manifest_path.string());
  }

  Episode ep;
  ep.task = TaskFromName(manifest.GetString("task"));
  ep.action_space = ActionSpaceFromName(manifest.GetString("action_space"));
  ep.dt = manifest.GetDouble("dt");
  const auto n = static_cast<std::size_t>(manifest.GetInt("num_steps"));
  const auto image_shape = manifest.GetInts("image_shape");
  if (image_shape.size() != 3 || image_shape[2] != 3) {
    throw ShapeMismatchError("bad image_shape in " + manifest_path.string());
  }
  const bool digging = TaskInvolvesDigging(ep.task);

  auto read_field = [&](const std::string& name,
                        std::vector<std::size_t> expected) -> std::vector<float> {
    const std::string key = "field." + name;
    if (!manifest.Has(key + ".file")) {
      throw ShapeMismatchError("manifest lacks field " + name + " in " + dir.string());
    }
    const auto shape = manifest.GetInts(key + ".shape");
    if (shape.size() != expected.size() ||
        !std::equal(shape.begin(), shape.end(), expected.begin(),
                    [](long a, std::size_t b) { return a >= 0 && static_cast<std::size_t>(a) == b; })) {
      throw ShapeMismatchError("field " + name + " shape disagrees with num_steps/image_shape");
    }
    if (manifest.GetString(key + ".dtype") != "float32_le") {
      throw ShapeMismatchError("field " + name + ": unsupported dtype");
    }
    return ReadFloat32File(dir / manifest.GetString(key + ".file"), Count(expected));
  };

  const auto h = static_cast<std::size_t>(image_shape[0]);
  const auto w = static_cast<std::size_t>(image_shape[1]);
  const auto time = read_field("time", {n});
  const auto joints = read_field("joints", {n, 4});
  const auto actions = read_field("actions", {n, 4});
  const auto camera = read_field("camera", {n, h, w, 3});
  std::vector<float> dig, dump;
  std::size_t eh = 0, ew = 0;
  if (digging) {
    const auto es = manifest.GetInts("elevation_shape");
    if (es.size() != 3 || es[2] != 3) throw ShapeMismatchError("bad elevation_shape");
    eh = static_cast<std::size_t>(es[0]);
    ew = static_cast<std::size_t>(es[1]);
    dig = read_field("elev_dig", {n, eh, ew, 3});
    dump = read_field("elev_dump", {n, eh, ew, 3});
  }

  const std::size_t cam_n = h * w * 3;
  const std::size_t elev_n = eh * ew * 3;
  ep.steps.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ep.steps[i];
    s.time = time[i];
    std::copy_n(joints.begin() + i * 4, 4, s.joints.begin());
    std::copy_n(actions.begin() + i * 4, 4, s.action.begin());
    s.camera = ObservationImage(static_cast<int>(h), static_cast<int>(w), "camera");
    std::copy_n(camera.begin() + i * cam_n, cam_n, s.camera.data.begin());
    if (digging) {
      s.elev_dig = ObservationImage(static_cast<int>(eh), static_cast<int>(ew), "elev_dig");
      std::copy_n(dig.begin() + i * elev_n, elev_n, s.elev_dig->data.begin());
      s.elev_dump = ObservationImage(static_cast<int>(eh), static_cast<int>(ew), "elev_dump");
      std::copy_n(dump.begin() + i * elev_n, elev_n, s.elev_dump->data.begin());
    }
  }
  ep.Validate();
  return ep;
}

void WriteDataset(const std::vector<Episode>& episodes, const fs::path& dir) {
  fs::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    std::snprintf(name, sizeof(name), "episode_%03zu", i);
    WriteEpisode(episodes[i], dir / name);
  }
}

std::vector<fs::path> ListEpisodeDirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError("dataset directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.txt")) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Episode> ReadDataset(const fs::path& dir) {
  std::vector<Episode> out;
  for (const auto& p : ListEpisodeDirs(dir)) out.push_back(ReadEpisode(p));
  return out;
}

void ExportEpisodeCsv(const Episode& ep, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "t,q_swing,q_boom,q_stick,q_bucket,a_swing,a_boom,a_stick,a_bucket\n";
  char buf[64];
  for (const auto& s : ep.steps) {
    std::snprintf(buf, sizeof(buf), "%.9g", s.time);
    out << buf;
    for (float v : s.joints) {
      std::snprintf(buf, sizeof(buf), ",%.9g", v);
      out << buf;
    }
    for (float v : s.action) {
      std::snprintf(buf, sizeof(buf), ",%.9g", v);
      out << buf;
    }
    out << '\n';
  }
}

SplitIndices SplitTrainTest(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("train/test split needs at least 2 episodes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  SplitIndices out;
  out.test = pick(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (i != out.test) out.train.push_back(i);
  }
  return out;
}

Split SplitTrainTest(std::vector<Episode> episodes, std::uint64_t seed) {
  const auto idx = SplitTrainTest(episodes.size(), seed);
  Split out;
  out.test_index = idx.test;
  out.test = std::move(episodes[idx.test]);
  for (auto i : idx.train) out.train.push_back(std::move(episodes[i]));
  return out;
}

Observation ObservationAt(const Episode& ep, std::size_t t) {
  const auto& s = ep.steps.at(t);
  return {s.joints, s.camera, s.elev_dig, s.elev_dump};
}

void AppendSample(const Episode& ep, std::size_t episode_index, std::size_t t, int k,
                  Batch& batch) {
  if (k < 1) throw std::invalid_argument("chunk size must be >= 1");
  if (batch.chunk_size == 0) batch.chunk_size = k;
  if (batch.chunk_size != k) throw std::invalid_argument("chunk size mismatch within batch");
  if (t >= ep.steps.size()) throw std::out_of_range("sample start past episode end");
  batch.observations.push_back(ObservationAt(ep, t));
  batch.origins.emplace_back(episode_index, t);
  for (int j = 0; j < k; ++j) {
    const std::size_t idx = t + static_cast<std::size_t>(j);
    const bool inside = idx < ep.steps.size();
    for (int d = 0; d < 4; ++d) batch.actions.push_back(inside ? ep.steps[idx].action[d] : 0.0f);
    batch.mask.push_back(inside ? 1 : 0);
  }
}

Batch SampleBatch(std::span<const Episode> train, int k, int batch_size, std::mt19937_64& rng) {
  if (train.empty()) throw std::invalid_argument("empty training set");
  if (k < 1 || batch_size < 1) throw std::invalid_argument("k and batch_size must be >= 1");
  Batch batch;
  batch.chunk_size = k;
  std::uniform_int_distribution<std::size_t> pick_episode(0, train.size() - 1);
  for (int b = 0; b < batch_size; ++b) {
    const std::size_t e = pick_episode(rng);
    std::uniform_int_distribution<std::size_t> pick_t(0, train[e].steps.size() - 1);
    AppendSample(train[e], e, pick_t(rng), k, batch);
  }
  return batch;
}

}  // namespace dataset
}  // namespace excavate
