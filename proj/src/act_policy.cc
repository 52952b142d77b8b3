#include "excavate/act_policy.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "excavate/binary_io.h"

namespace excavate::policy {
namespace {

using Init = ParamTensor::Init;

void RequirePositive(int v, const char* name) {
  if (v < 1) throw std::invalid_argument(std::string(name) + " must be >= 1");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ArchConfig::Validate() const {
  RequirePositive(latent_dim, "latent_dim");
  RequirePositive(model_dim, "model_dim");
  RequirePositive(heads, "heads");
  RequirePositive(encoder_layers, "encoder_layers");
  RequirePositive(decoder_layers, "decoder_layers");
  RequirePositive(patch_size, "patch_size");
  RequirePositive(chunk_size, "chunk_size");
  RequirePositive(image_height, "image_height");
  RequirePositive(image_width, "image_width");
  if (feedforward_dim < 0) throw std::invalid_argument("feedforward_dim must be >= 0");
  if (action_dim != 4) throw std::invalid_argument("action_dim must be 4");
  if (model_dim % heads != 0) throw std::invalid_argument("model_dim must be divisible by heads");
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw std::invalid_argument("patch_size must divide the image height and width");
  }
}

KeyValueConfig ArchConfig::ToConfig() const {
  KeyValueConfig c;
  c.Set("latent_dim", std::to_string(latent_dim));
  c.Set("model_dim", std::to_string(model_dim));
  c.Set("heads", std::to_string(heads));
  c.Set("encoder_layers", std::to_string(encoder_layers));
  c.Set("decoder_layers", std::to_string(decoder_layers));
  c.Set("patch_size", std::to_string(patch_size));
  c.Set("chunk_size", std::to_string(chunk_size));
  c.Set("action_dim", std::to_string(action_dim));
  c.Set("feedforward_dim", std::to_string(feedforward_dim));
  c.Set("image_height", std::to_string(image_height));
  c.Set("image_width", std::to_string(image_width));
  c.Set("use_elevation", use_elevation ? "1" : "0");
  c.Set("state_queries", state_queries ? "1" : "0");
  return c;
}

ArchConfig ArchConfig::FromConfig(const KeyValueConfig& c) {
  ArchConfig a;
  a.latent_dim = static_cast<int>(c.GetInt("latent_dim", a.latent_dim));
  a.model_dim = static_cast<int>(c.GetInt("model_dim", a.model_dim));
  a.heads = static_cast<int>(c.GetInt("heads", a.heads));
  a.encoder_layers = static_cast<int>(c.GetInt("encoder_layers", a.encoder_layers));
  a.decoder_layers = static_cast<int>(c.GetInt("decoder_layers", a.decoder_layers));
  a.patch_size = static_cast<int>(c.GetInt("patch_size", a.patch_size));
  a.chunk_size = static_cast<int>(c.GetInt("chunk_size", a.chunk_size));
  a.action_dim = static_cast<int>(c.GetInt("action_dim", a.action_dim));
  a.feedforward_dim = static_cast<int>(c.GetInt("feedforward_dim", a.feedforward_dim));
  a.image_height = static_cast<int>(c.GetInt("image_height", a.image_height));
  a.image_width = static_cast<int>(c.GetInt("image_width", a.image_width));
  a.use_elevation = c.GetInt("use_elevation", a.use_elevation ? 1 : 0) != 0;
  a.state_queries = c.GetInt("state_queries", a.state_queries ? 1 : 0) != 0;
  a.Validate();
  return a;
}

void TrainConfig::Validate() const {
  if (!(kl_weight >= 0.0)) throw std::invalid_argument("kl_weight must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (plateau_window < 0 || plateau_patience < 1) {
    throw std::invalid_argument("invalid plateau settings");
  }
}

KeyValueConfig TrainConfig::ToConfig() const {
  KeyValueConfig c;
  c.Set("kl_weight", kl_weight);
  c.Set("steps", std::to_string(steps));
  c.Set("learning_rate", learning_rate);
  c.Set("batch_size", std::to_string(batch_size));
  c.Set("seed", std::to_string(seed));
  c.Set("adam_beta1", adam_beta1);
  c.Set("adam_beta2", adam_beta2);
  c.Set("adam_eps", adam_eps);
  c.Set("plateau_window", std::to_string(plateau_window));
  c.Set("plateau_patience", std::to_string(plateau_patience));
  c.Set("plateau_rel_tol", plateau_rel_tol);
  return c;
}

TrainConfig TrainConfig::FromConfig(const KeyValueConfig& c) {
  TrainConfig t;
  t.kl_weight = c.GetDouble("kl_weight", t.kl_weight);
  t.steps = static_cast<int>(c.GetInt("steps", t.steps));
  t.learning_rate = c.GetDouble("learning_rate", t.learning_rate);
  t.batch_size = static_cast<int>(c.GetInt("batch_size", t.batch_size));
  t.seed = static_cast<std::uint64_t>(c.GetInt("seed", static_cast<long>(t.seed)));
  t.adam_beta1 = c.GetDouble("adam_beta1", t.adam_beta1);
  t.adam_beta2 = c.GetDouble("adam_beta2", t.adam_beta2);
  t.adam_eps = c.GetDouble("adam_eps", t.adam_eps);
  t.plateau_window = static_cast<int>(c.GetInt("plateau_window", t.plateau_window));
  t.plateau_patience = static_cast<int>(c.GetInt("plateau_patience", t.plateau_patience));
  t.plateau_rel_tol = c.GetDouble("plateau_rel_tol", t.plateau_rel_tol);
  t.Validate();
  return t;
}

// ---------------------------------------------------------------------------
// Parameters

ParamLayout::ParamLayout(const ArchConfig& arch) {
  arch.Validate();
  const int d = arch.model_dim;
  const int f = arch.ffn_dim();
  const int k = arch.chunk_size;
  const int L = arch.latent_dim;
  const int A = arch.action_dim;

  auto attention = [&](const std::string& p) {
    for (const char* w : {"q", "k", "v", "o"}) {
      Add(p + ".w" + w, d, d, Init::kFanIn);
      Add(p + ".b" + w, 1, d, Init::kZero);
    }
  };
  auto layer_norm = [&](const std::string& p) {
    Add(p + ".gain", 1, d, Init::kOne);
    Add(p + ".bias", 1, d, Init::kZero);
  };
  auto ffn = [&](const std::string& p) {
    Add(p + ".w1", d, f, Init::kFanIn);
    Add(p + ".b1", 1, f, Init::kZero);
    Add(p + ".w2", f, d, Init::kFanIn);
    Add(p + ".b2", 1, d, Init::kZero);
  };

  Add("enc.cls", 1, d, Init::kEmbedding);
  Add("enc.joint.w", 4, d, Init::kFanIn);
  Add("enc.joint.b", 1, d, Init::kZero);
  Add("enc.action.w", A, d, Init::kFanIn);
  Add("enc.action.b", 1, d, Init::kZero);
  Add("enc.pos", k + 2, d, Init::kEmbedding);
  for (int i = 0; i < arch.encoder_layers; ++i) {
    const std::string p = "enc.layer" + std::to_string(i);
    layer_norm(p + ".ln1");
    attention(p + ".attn");
    layer_norm(p + ".ln2");
    ffn(p + ".ffn");
  }
  layer_norm("enc.ln_out");
  Add("enc.latent.w", d, 2 * L, Init::kFanIn);
  Add("enc.latent.b", 1, 2 * L, Init::kZero);

  Add("dec.latent.w", L, d, Init::kFanIn);
  Add("dec.latent.b", 1, d, Init::kZero);
  Add("dec.joint.w", 4, d, Init::kFanIn);
  Add("dec.joint.b", 1, d, Init::kZero);
  Add("dec.patch.w", arch.patch_dim(), d, Init::kFanIn);
  Add("dec.patch.b", 1, d, Init::kZero);
  Add("dec.mem_pos", arch.memory_tokens(), d, Init::kEmbedding);
  layer_norm("dec.mem_ln");
  Add("dec.query", k, d, Init::kEmbedding);
  for (int i = 0; i < arch.decoder_layers; ++i) {
    const std::string p = "dec.layer" + std::to_string(i);
    layer_norm(p + ".ln1");
    attention(p + ".self");
    layer_norm(p + ".ln2");
    attention(p + ".cross");
    layer_norm(p + ".ln3");
    ffn(p + ".ffn");
  }
  layer_norm("dec.ln_out");
  Add("dec.action.w", d, A, Init::kFanIn);
  Add("dec.action.b", 1, A, Init::kZero);
}

void ParamLayout::Add(std::string name, int rows, int cols, Init init) {
  tensors_.push_back({std::move(name), rows, cols, total_, init});
  total_ += tensors_.back().size();
}

const ParamTensor& ParamLayout::Find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no parameter tensor named " + name);
}

PolicyParams<double> InitParams(const ArchConfig& arch, std::uint64_t seed) {
  const ParamLayout layout(arch);
  PolicyParams<double> p{arch, std::vector<double>(layout.total(), 0.0)};
  std::mt19937_64 rng(seed);
  for (const auto& t : layout.tensors()) {
    double bound = 0.0;
    switch (t.init) {
      case Init::kZero:
        continue;
      case Init::kOne:
        std::fill_n(p.flat.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1.0);
        continue;
      case Init::kFanIn:
        bound = 1.0 / std::sqrt(static_cast<double>(t.rows));
        break;
      case Init::kEmbedding:
        bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
        break;
    }
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < t.size(); ++i) p.flat[t.offset + i] = u(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Normalization

Normalizer Normalizer::FromEpisodes(std::span<const Episode> episodes) {
  Normalizer n;
  std::array<double, 4> js{}, jss{}, as{}, ass{};
  double count = 0.0;
  for (const auto& ep : episodes) {
    for (const auto& s : ep.steps) {
      for (int d = 0; d < 4; ++d) {
        js[d] += s.joints[d];
        jss[d] += static_cast<double>(s.joints[d]) * s.joints[d];
        as[d] += s.action[d];
        ass[d] += static_cast<double>(s.action[d]) * s.action[d];
      }
      count += 1.0;
    }
  }
  if (count == 0.0) return n;
  auto finish = [count](double sum, double sq, double& mean, double& stddev) {
    mean = sum / count;
    const double var = std::max(0.0, sq / count - mean * mean);
    stddev = std::sqrt(var);
    if (stddev < 1e-6) stddev = 1.0;
  };
  for (int d = 0; d < 4; ++d) {
    finish(js[d], jss[d], n.joint_mean[d], n.joint_std[d]);
    finish(as[d], ass[d], n.action_mean[d], n.action_std[d]);
  }
  return n;
}

void Normalizer::ToConfig(KeyValueConfig& c) const {
  auto vec = [](const std::array<double, 4>& a) { return std::vector<double>(a.begin(), a.end()); };
  c.Set("norm.joint_mean", vec(joint_mean));
  c.Set("norm.joint_std", vec(joint_std));
  c.Set("norm.action_mean", vec(action_mean));
  c.Set("norm.action_std", vec(action_std));
}

Normalizer Normalizer::FromConfig(const KeyValueConfig& c) {
  Normalizer n;
  auto load = [&c](const std::string& key, std::array<double, 4>& out) {
    if (!c.Has(key)) return;
    const auto v = c.GetDoubles(key);
    if (v.size() != 4) throw ConfigError(key + ": expected 4 values");
    std::copy(v.begin(), v.end(), out.begin());
  };
  load("norm.joint_mean", n.joint_mean);
  load("norm.joint_std", n.joint_std);
  load("norm.action_mean", n.action_mean);
  load("norm.action_std", n.action_std);
  return n;
}

// ---------------------------------------------------------------------------
// Network

namespace {

template <typename T>
class Network {
 public:
  using Mat = ad::Matrix<T>;

  Network(const Policy<T>& policy, bool trainable)
      : policy_(policy), arch_(policy.params.arch), layout_(arch_) {
    if (policy.params.flat.size() != layout_.total()) {
      throw std::invalid_argument("parameter vector length " +
                                  std::to_string(policy.params.flat.size()) +
                                  " does not match architecture (" +
                                  std::to_string(layout_.total()) + ")");
    }
    const auto& tensors = layout_.tensors();
    vars_.reserve(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      Mat m = Eigen::Map<const Mat>(policy.params.flat.data() + t.offset, t.rows, t.cols);
      vars_.push_back(trainable ? tape_.Parameter(std::move(m)) : tape_.Constant(std::move(m)));
      index_.emplace(t.name, i);
    }
  }

  ad::Tape<T>& tape() { return tape_; }
  const ArchConfig& arch() const { return arch_; }

  ad::Var P(const std::string& name) const { return vars_[index_.at(name)]; }

  ad::Var JointInput(const std::vector<const Float4*>& joints) {
    Mat m(static_cast<Eigen::Index>(joints.size()), 4);
    const auto& n = policy_.normalizer;
    for (std::size_t b = 0; b < joints.size(); ++b) {
      for (int d = 0; d < 4; ++d) {
        m(static_cast<Eigen::Index>(b), d) =
            static_cast<T>(((*joints[b])[d] - n.joint_mean[d]) / n.joint_std[d]);
      }
    }
    return tape_.Constant(std::move(m));
  }

  ad::Var PatchInput(const std::vector<const dataset::Observation*>& obs) {
    const int per = arch_.patches_per_image();
    const int n_img = arch_.num_images();
    const int ps = arch_.patch_size;
    const int pcols = arch_.image_width / ps;
    Mat m(static_cast<Eigen::Index>(obs.size()) * n_img * per, arch_.patch_dim());
    Eigen::Index row = 0;
    for (const auto* o : obs) {
      CheckObservation(*o);
      const ObservationImage* images[3] = {&o->camera, nullptr, nullptr};
      if (arch_.use_elevation) {
        images[1] = &*o->elev_dig;
        images[2] = &*o->elev_dump;
      }
      for (int i = 0; i < n_img; ++i) {
        const auto& img = *images[i];
        for (int p = 0; p < per; ++p, ++row) {
          const int r0 = (p / pcols) * ps;
          const int c0 = (p % pcols) * ps;
          Eigen::Index col = 0;
          for (int dr = 0; dr < ps; ++dr) {
            const float* src = &img.data[(static_cast<std::size_t>(r0 + dr) * img.width + c0) * 3];
            for (int e = 0; e < ps * 3; ++e) m(row, col++) = static_cast<T>(src[e]);
          }
        }
      }
    }
    return tape_.Constant(std::move(m));
  }

  // Returns (mu, clamped logvar), each [B, latent].
  std::pair<ad::Var, ad::Var> Encoder(ad::Var joints_n, ad::Var actions_n,
                                      const std::vector<std::uint8_t>& chunk_mask, int batch) {
    const int k = arch_.chunk_size;
    const int L = arch_.latent_dim;
    const int tokens = k + 2;
    auto jt = tape_.Linear(joints_n, P("enc.joint.w"), P("enc.joint.b"));
    auto at = tape_.Linear(actions_n, P("enc.action.w"), P("enc.action.b"));
    auto cls = tape_.Tile(P("enc.cls"), batch);
    auto x = tape_.StackTokens({cls, jt, at}, batch);
    x = tape_.Add(x, P("enc.pos"));
    std::vector<std::uint8_t> key_valid(static_cast<std::size_t>(batch) * tokens, 1);
    for (int b = 0; b < batch; ++b) {
      for (int j = 0; j < k; ++j) {
        key_valid[static_cast<std::size_t>(b) * tokens + 2 + j] =
            chunk_mask[static_cast<std::size_t>(b) * k + j];
      }
    }
    for (int i = 0; i < arch_.encoder_layers; ++i) {
      const std::string p = "enc.layer" + std::to_string(i);
      auto h = Norm(x, p + ".ln1");
      x = tape_.Add(x, MultiHead(h, h, p + ".attn", batch, key_valid));
      x = tape_.Add(x, FeedForward(Norm(x, p + ".ln2"), p + ".ffn"));
    }
    std::vector<Eigen::Index> cls_rows(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) cls_rows[static_cast<std::size_t>(b)] = b * tokens;
    auto c = Norm(tape_.SelectRows(x, std::move(cls_rows)), "enc.ln_out");
    auto stats = tape_.Linear(c, P("enc.latent.w"), P("enc.latent.b"));
    auto mu = tape_.SliceCols(stats, 0, L);
    auto logvar = tape_.Clamp(tape_.SliceCols(stats, L, L), T(kLogvarMin), T(kLogvarMax));
    return {mu, logvar};
  }

  // Returns [B * k, 4] normalized actions.
  ad::Var Decoder(ad::Var z, ad::Var joints_n, ad::Var patches, int batch) {
    auto lt = tape_.Linear(z, P("dec.latent.w"), P("dec.latent.b"));
    auto jt = tape_.Linear(joints_n, P("dec.joint.w"), P("dec.joint.b"));
    auto pt = tape_.Linear(patches, P("dec.patch.w"), P("dec.patch.b"));
    auto mem = tape_.StackTokens({lt, jt, pt}, batch);
    mem = Norm(tape_.Add(mem, P("dec.mem_pos")), "dec.mem_ln");
    auto x = tape_.Tile(P("dec.query"), batch);
    if (arch_.state_queries) {
      std::vector<Eigen::Index> rows;
      rows.reserve(static_cast<std::size_t>(batch) * arch_.chunk_size);
      for (int b = 0; b < batch; ++b) rows.insert(rows.end(), arch_.chunk_size, b);
      x = tape_.Add(x, tape_.SelectRows(jt, std::move(rows)));
    }
    for (int i = 0; i < arch_.decoder_layers; ++i) {
      const std::string p = "dec.layer" + std::to_string(i);
      auto h = Norm(x, p + ".ln1");
      x = tape_.Add(x, MultiHead(h, h, p + ".self", batch, {}));
      x = tape_.Add(x, MultiHead(Norm(x, p + ".ln2"), mem, p + ".cross", batch, {}));
      x = tape_.Add(x, FeedForward(Norm(x, p + ".ln3"), p + ".ffn"));
    }
    return tape_.Linear(Norm(x, "dec.ln_out"), P("dec.action.w"), P("dec.action.b"));
  }

  std::vector<double> FlatGrad() const {
    std::vector<double> g(layout_.total(), 0.0);
    const auto& tensors = layout_.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (!tape_.has_grad(vars_[i])) continue;
      const Mat& m = tape_.grad(vars_[i]);
      for (Eigen::Index e = 0; e < m.size(); ++e) g[tensors[i].offset + e] = m.data()[e];
    }
    return g;
  }

  void CheckObservation(const dataset::Observation& o) const {
    auto check = [this](const ObservationImage& img, const char* what) {
      if (img.height != arch_.image_height || img.width != arch_.image_width ||
          img.size() != static_cast<std::size_t>(img.height) * img.width * 3) {
        throw std::invalid_argument(std::string(what) + " image shape does not match architecture");
      }
    };
    check(o.camera, "camera");
    const bool has_elev = o.elev_dig.has_value() || o.elev_dump.has_value();
    if (arch_.use_elevation) {
      if (!o.elev_dig || !o.elev_dump) {
        throw std::invalid_argument("policy expects dig and dump elevation images");
      }
      check(*o.elev_dig, "elev_dig");
      check(*o.elev_dump, "elev_dump");
    } else if (has_elev) {
      throw std::invalid_argument("policy is not configured for elevation images");
    }
  }

 private:
  ad::Var Norm(ad::Var x, const std::string& p) {
    return tape_.LayerNorm(x, P(p + ".gain"), P(p + ".bias"));
  }

  ad::Var MultiHead(ad::Var query_src, ad::Var kv_src, const std::string& p, int batch,
                    std::vector<std::uint8_t> key_valid) {
    auto q = tape_.Linear(query_src, P(p + ".wq"), P(p + ".bq"));
    auto k = tape_.Linear(kv_src, P(p + ".wk"), P(p + ".bk"));
    auto v = tape_.Linear(kv_src, P(p + ".wv"), P(p + ".bv"));
    auto o = tape_.Attention(q, k, v, batch, arch_.heads, std::move(key_valid));
    return tape_.Linear(o, P(p + ".wo"), P(p + ".bo"));
  }

  ad::Var FeedForward(ad::Var x, const std::string& p) {
    auto h = tape_.Gelu(tape_.Linear(x, P(p + ".w1"), P(p + ".b1")));
    return tape_.Linear(h, P(p + ".w2"), P(p + ".b2"));
  }

  const Policy<T>& policy_;
  ArchConfig arch_;
  ParamLayout layout_;
  ad::Tape<T> tape_;
  std::vector<ad::Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
ad::Matrix<T> NormalizedActions(const Normalizer& n, const float* actions, Eigen::Index rows) {
  ad::Matrix<T> m(rows, 4);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int d = 0; d < 4; ++d) {
      m(r, d) = static_cast<T>((actions[r * 4 + d] - n.action_mean[d]) / n.action_std[d]);
    }
  }
  return m;
}

template <typename T>
ActionChunk Denormalize(const Normalizer& n, const ad::Matrix<T>& out) {
  ActionChunk chunk(static_cast<std::size_t>(out.rows()));
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (int d = 0; d < 4; ++d) {
      chunk[static_cast<std::size_t>(r)][d] =
          static_cast<double>(out(r, d)) * n.action_std[d] + n.action_mean[d];
    }
  }
  return chunk;
}

}  // namespace

template <typename T>
LatentSample Encode(const Policy<T>& policy, const Float4& joints, const ActionChunk& chunk,
                    const std::vector<std::uint8_t>& mask) {
  Network<T> net(policy, false);
  const int k = net.arch().chunk_size;
  if (static_cast<int>(chunk.size()) != k || static_cast<int>(mask.size()) != k) {
    throw std::invalid_argument("encode: chunk and mask must have chunk_size rows");
  }
  bool any = false;
  for (auto m : mask) any = any || m;
  if (!any) throw std::invalid_argument("encode: every chunk row is masked");
  std::vector<float> raw(static_cast<std::size_t>(k) * 4);
  for (int j = 0; j < k; ++j) {
    for (int d = 0; d < 4; ++d) raw[static_cast<std::size_t>(j) * 4 + d] = static_cast<float>(chunk[j][d]);
  }
  auto& tape = net.tape();
  auto jn = net.JointInput({&joints});
  auto an = tape.Constant(NormalizedActions<T>(policy.normalizer, raw.data(), k));
  const auto [mu, logvar] = net.Encoder(jn, an, mask, 1);
  LatentSample s;
  const auto& mv = tape.value(mu);
  const auto& lv = tape.value(logvar);
  s.mu.assign(mv.data(), mv.data() + mv.size());
  s.logvar.assign(lv.data(), lv.data() + lv.size());
  s.z = s.mu;
  return s;
}

std::vector<double> Reparameterize(const LatentSample& sample, std::mt19937_64& rng) {
  if (sample.mu.size() != sample.logvar.size()) {
    throw std::invalid_argument("mu/logvar size mismatch");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(sample.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double lv = std::clamp(sample.logvar[i], kLogvarMin, kLogvarMax);
    z[i] = sample.mu[i] + std::exp(0.5 * lv) * normal(rng);
  }
  return z;
}

template <typename T>
ActionChunk PredictChunk(const Policy<T>& policy, const dataset::Observation& obs,
                         const std::vector<double>& z) {
  Network<T> net(policy, false);
  if (static_cast<int>(z.size()) != net.arch().latent_dim) {
    throw std::invalid_argument("latent vector has wrong dimension");
  }
  auto& tape = net.tape();
  ad::Matrix<T> zm(1, static_cast<Eigen::Index>(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i) zm(0, static_cast<Eigen::Index>(i)) = static_cast<T>(z[i]);
  auto patches = net.PatchInput({&obs});
  auto jn = net.JointInput({&obs.joints});
  auto out = net.Decoder(tape.Constant(std::move(zm)), jn, patches, 1);
  return Denormalize(policy.normalizer, tape.value(out));
}

template <typename T>
ActionChunk Infer(const Policy<T>& policy, const dataset::Observation& obs) {
  return PredictChunk(policy, obs, std::vector<double>(static_cast<std::size_t>(policy.params.arch.latent_dim), 0.0));
}

template <typename T>
LossResult LossAndGrads(const Policy<T>& policy, const dataset::Batch& batch, double beta,
                        const std::vector<double>& eps, bool want_grad) {
  Network<T> net(policy, want_grad);
  const auto& arch = net.arch();
  const int B = static_cast<int>(batch.size());
  const int k = arch.chunk_size;
  const int L = arch.latent_dim;
  if (B < 1) throw std::invalid_argument("empty batch");
  if (batch.chunk_size != k) throw std::invalid_argument("batch chunk size does not match architecture");
  if (batch.actions.size() != static_cast<std::size_t>(B) * k * 4 ||
      batch.mask.size() != static_cast<std::size_t>(B) * k) {
    throw std::invalid_argument("batch arrays have inconsistent sizes");
  }
  if (eps.size() != static_cast<std::size_t>(B) * L) throw std::invalid_argument("eps has wrong size");
  bool any = false;
  for (auto m : batch.mask) any = any || m;
  if (!any) throw std::invalid_argument("every chunk row in the batch is masked");

  auto& tape = net.tape();
  std::vector<const Float4*> joints;
  std::vector<const dataset::Observation*> obs;
  for (const auto& o : batch.observations) {
    joints.push_back(&o.joints);
    obs.push_back(&o);
  }
  auto jn = net.JointInput(joints);
  auto patches = net.PatchInput(obs);
  ad::Matrix<T> target = NormalizedActions<T>(policy.normalizer, batch.actions.data(), B * k);
  auto an = tape.Constant(target);

  const auto [mu, logvar] = net.Encoder(jn, an, batch.mask, B);
  ad::Matrix<T> noise(B, L);
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = static_cast<T>(eps[static_cast<std::size_t>(i)]);
  auto z = tape.Reparameterize(mu, logvar, std::move(noise));
  auto pred = net.Decoder(z, jn, patches, B);
  auto recon = tape.MaskedL1(pred, std::move(target), batch.mask);
  auto kl = tape.KlDivergence(mu, logvar);
  auto loss = tape.WeightedSum(recon, T(1), kl, static_cast<T>(beta));

  LossResult r;
  r.loss = static_cast<double>(tape.value(loss)(0, 0));
  r.recon = static_cast<double>(tape.value(recon)(0, 0));
  r.kl = static_cast<double>(tape.value(kl)(0, 0));
  if (want_grad) {
    tape.Backward(loss);
    r.grad = net.FlatGrad();
  }
  return r;
}

template <typename T>
LossResult LossAndGrads(const Policy<T>& policy, const dataset::Batch& batch, double beta,
                        std::mt19937_64& rng, bool want_grad) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eps(batch.size() * static_cast<std::size_t>(policy.params.arch.latent_dim));
  for (double& e : eps) e = normal(rng);
  return LossAndGrads(policy, batch, beta, eps, want_grad);
}

// ---------------------------------------------------------------------------
// Training

DivergenceError::DivergenceError(int step)
    : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(step)),
      step_(step) {}

TrainResult TrainFrom(Policy<float> initial, const BatchSource& source, const TrainConfig& tcfg,
                      const ProgressFn& progress) {
  tcfg.Validate();
  TrainResult result{std::move(initial), {}, false};
  auto& flat = result.policy.params.flat;
  std::vector<double> m(flat.size(), 0.0);
  std::vector<double> v(flat.size(), 0.0);
  std::mt19937_64 rng(tcfg.seed ^ 0x9E3779B97F4A7C15ULL);
  double b1t = 1.0;
  double b2t = 1.0;

  double window_sum = 0.0;
  int window_count = 0;
  double best_window = std::numeric_limits<double>::infinity();
  int stale_windows = 0;

  result.curve.reserve(static_cast<std::size_t>(tcfg.steps));
  for (int step = 0; step < tcfg.steps; ++step) {
    const dataset::Batch batch = source(rng);
    const LossResult lr = LossAndGrads(result.policy, batch, tcfg.kl_weight, rng, true);
    if (!std::isfinite(lr.loss)) throw DivergenceError(step);

    b1t *= tcfg.adam_beta1;
    b2t *= tcfg.adam_beta2;
    const double step_size = tcfg.learning_rate / (1.0 - b1t);
    const double v_corr = 1.0 / (1.0 - b2t);
    for (std::size_t i = 0; i < flat.size(); ++i) {
      const double g = lr.grad[i];
      m[i] = tcfg.adam_beta1 * m[i] + (1.0 - tcfg.adam_beta1) * g;
      v[i] = tcfg.adam_beta2 * v[i] + (1.0 - tcfg.adam_beta2) * g * g;
      flat[i] = static_cast<float>(flat[i] - step_size * m[i] / (std::sqrt(v[i] * v_corr) + tcfg.adam_eps));
    }

    const LossRecord rec{step, lr.loss, lr.recon, lr.kl};
    result.curve.push_back(rec);
    if (progress) progress(rec);

    if (tcfg.plateau_window > 0) {
      window_sum += lr.loss;
      if (++window_count == tcfg.plateau_window) {
        const double mean = window_sum / window_count;
        window_sum = 0.0;
        window_count = 0;
        if (mean < best_window * (1.0 - tcfg.plateau_rel_tol)) {
          best_window = mean;
          stale_windows = 0;
        } else if (++stale_windows >= tcfg.plateau_patience) {
          result.stopped_early = true;
          break;
        }
      }
    }
  }
  return result;
}

TrainResult Train(std::span<const Episode> train_set, const ArchConfig& arch,
                  const TrainConfig& tcfg, const ProgressFn& progress) {
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  tcfg.Validate();
  Policy<float> init{InitParams(arch, tcfg.seed).Cast<float>(), Normalizer::FromEpisodes(train_set)};
  const int k = arch.chunk_size;
  const int bs = tcfg.batch_size;
  return TrainFrom(
      std::move(init),
      [train_set, k, bs](std::mt19937_64& rng) { return dataset::SampleBatch(train_set, k, bs, rng); },
      tcfg, progress);
}

// ---------------------------------------------------------------------------
// Checkpoints

void SaveCheckpoint(const Policy<float>& policy, const TrainConfig& tcfg, int step,
                    const std::filesystem::path& dir, const KeyValueConfig& meta) {
  std::filesystem::create_directories(dir);
  KeyValueConfig manifest;
  manifest.Set("format_version", "1");
  const KeyValueConfig arch_cfg = policy.params.arch.ToConfig();
  const KeyValueConfig train_cfg = tcfg.ToConfig();
  for (const auto& [k, v] : arch_cfg.entries()) manifest.Set("arch." + k, v);
  for (const auto& [k, v] : train_cfg.entries()) manifest.Set("train." + k, v);
  policy.normalizer.ToConfig(manifest);
  for (const auto& [k, v] : meta.entries()) manifest.Set("meta." + k, v);
  manifest.Set("step", std::to_string(step));
  manifest.Set("param_count", std::to_string(policy.params.flat.size()));
  manifest.Set("params_file", "params.f32");
  WriteFloat32File(dir / "params.f32", policy.params.flat);
  manifest.Save(dir / "manifest.txt");
}

Checkpoint LoadCheckpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  if (!std::filesystem::exists(path)) throw MissingFileError("missing checkpoint manifest: " + path.string());
  const auto manifest = KeyValueConfig::Load(path);
  if (manifest.GetInt("format_version") != 1) throw std::runtime_error("unsupported checkpoint version");
  KeyValueConfig arch_cfg, train_cfg;
  for (const auto& [k, v] : manifest.entries()) {
    if (k.rfind("arch.", 0) == 0) arch_cfg.Set(k.substr(5), v);
    if (k.rfind("train.", 0) == 0) train_cfg.Set(k.substr(6), v);
  }
  Checkpoint ck;
  for (const auto& [k, v] : manifest.entries()) {
    if (k.rfind("meta.", 0) == 0) ck.meta.Set(k.substr(5), v);
  }
  ck.policy.params.arch = ArchConfig::FromConfig(arch_cfg);
  ck.train = TrainConfig::FromConfig(train_cfg);
  ck.policy.normalizer = Normalizer::FromConfig(manifest);
  ck.step = static_cast<int>(manifest.GetInt("step", 0));
  const ParamLayout layout(ck.policy.params.arch);
  const auto count = static_cast<std::size_t>(manifest.GetInt("param_count"));
  if (count != layout.total()) throw ShapeMismatchError("checkpoint param_count does not match arch");
  ck.policy.params.flat = ReadFloat32File(dir / manifest.GetString("params_file", "params.f32"), count);
  return ck;
}

void WriteLossCurveCsv(const std::vector<LossRecord>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss,recon,kl\n";
  char buf[128];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", r.step, r.loss, r.recon, r.kl);
    out << buf;
  }
}

template LatentSample Encode(const Policy<float>&, const Float4&, const ActionChunk&,
                             const std::vector<std::uint8_t>&);
template LatentSample Encode(const Policy<double>&, const Float4&, const ActionChunk&,
                             const std::vector<std::uint8_t>&);
template ActionChunk PredictChunk(const Policy<float>&, const dataset::Observation&,
                                  const std::vector<double>&);
template ActionChunk PredictChunk(const Policy<double>&, const dataset::Observation&,
                                  const std::vector<double>&);
template ActionChunk Infer(const Policy<float>&, const dataset::Observation&);
template ActionChunk Infer(const Policy<double>&, const dataset::Observation&);
template LossResult LossAndGrads(const Policy<float>&, const dataset::Batch&, double,
                                 const std::vector<double>&, bool);
template LossResult LossAndGrads(const Policy<double>&, const dataset::Batch&, double,
                                 const std::vector<double>&, bool);
template LossResult LossAndGrads(const Policy<float>&, const dataset::Batch&, double,
                                 std::mt19937_64&, bool);
template LossResult LossAndGrads(const Policy<double>&, const dataset::Batch&, double,
                                 std::mt19937_64&, bool);

}  // namespace excavate::policy
