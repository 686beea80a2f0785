#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmsynth/autodiff.hpp"
#include "mmsynth/datamodel.hpp"
#include "mmsynth/rng.hpp"

namespace mmsynth {

// Unified synthesis backbone: one common encoder over all six input channels,
// one encoder stream per covered modality, per-level gated fusion over the
// active source streams, one decoder stream per covered modality, and one
// patch discriminator per covered modality. Every generator conv block is
// followed by dataset-conditioned feature modulation (when enabled).

struct NetConfig {
  int levels = 3;
  int base_channels = 16;
  int d_id = 64;        // sinusoidal code width == embedding width, even
  int emb_hidden = 64;
  int pfm_hidden = 32;
  bool pfm_enabled = true;
  double lrelu_alpha = 0.2;

  int channels_at(int level) const { return base_channels << level; }

  void validate() const {
    if (levels < 2) throw ConfigError("network.levels must be >= 2");
    if (base_channels < 1) throw ConfigError("network.base_channels must be >= 1");
    if (d_id < 2 || d_id % 2 != 0) throw ConfigError("network.d_id must be even and >= 2");
    if (emb_hidden < 1 || pfm_hidden < 1) throw ConfigError("network MLP widths must be >= 1");
  }

  json to_json() const {
    return json{{"levels", levels},         {"base_channels", base_channels}, {"d_id", d_id},
                {"emb_hidden", emb_hidden}, {"pfm_hidden", pfm_hidden},       {"pfm_enabled", pfm_enabled},
                {"lrelu_alpha", lrelu_alpha}};
  }

  static NetConfig from_json(const json& j) {
    NetConfig c;
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.d_id = j.value("d_id", c.d_id);
    c.emb_hidden = j.value("emb_hidden", c.emb_hidden);
    c.pfm_hidden = j.value("pfm_hidden", c.pfm_hidden);
    c.pfm_enabled = j.value("pfm_enabled", c.pfm_enabled);
    c.lrelu_alpha = j.value("lrelu_alpha", c.lrelu_alpha);
    c.validate();
    return c;
  }
};

struct DiscConfig {
  int base_channels = 16;
  int stages = 3;  // stride-2 stages; 32x32 -> 4x4 realism map
  double lrelu_alpha = 0.2;

  json to_json() const {
    return json{{"base_channels", base_channels}, {"stages", stages}, {"lrelu_alpha", lrelu_alpha}};
  }
  static DiscConfig from_json(const json& j) {
    DiscConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.stages = j.value("stages", c.stages);
    c.lrelu_alpha = j.value("lrelu_alpha", c.lrelu_alpha);
    return c;
  }
};

// Interleaved sin/cos code of an integer identifier over a geometric
// frequency ladder; a single scalar sine would alias identifiers.
template <typename T>
Tensor<T> sinusoidal_code(int n, int d_id) {
  Tensor<T> code({d_id});
  for (int j = 0; j < d_id / 2; ++j) {
    double omega = std::pow(10000.0, -2.0 * j / d_id);
    code[2 * j] = static_cast<T>(std::sin(n * omega));
    code[2 * j + 1] = static_cast<T>(std::cos(n * omega));
  }
  return code;
}

// Standalone modulation block mirroring the in-graph path: a one-hidden-layer
// MLP maps the dataset embedding to 2C values, split into per-channel scale
// and shift, applied as x * (scale + 1) + shift.
template <typename T>
struct PfmBlock {
  Tensor<T> w1, b1, w2, b2;  // w1 [hidden,d], w2 [2C,hidden]

  std::pair<Tensor<T>, Tensor<T>> scale_shift(const Tensor<T>& emb) const {
    int hidden = w1.dim(0), d = w1.dim(1), out = w2.dim(0);
    Tensor<T> h({hidden});
    for (int i = 0; i < hidden; ++i) {
      T acc = b1[i];
      for (int j = 0; j < d; ++j) acc += w1[static_cast<int64_t>(i) * d + j] * emb[j];
      h[i] = std::tanh(acc);
    }
    Tensor<T> gb({out});
    for (int i = 0; i < out; ++i) {
      T acc = b2[i];
      for (int j = 0; j < hidden; ++j) acc += w2[static_cast<int64_t>(i) * hidden + j] * h[j];
      gb[i] = acc;
    }
    int c = out / 2;
    Tensor<T> gamma({c}), beta({c});
    for (int i = 0; i < c; ++i) {
      gamma[i] = gb[i];
      beta[i] = gb[c + i];
    }
    return {gamma, beta};
  }
};

template <typename T>
Tensor<T> pfm_modulate(const Tensor<T>& feature, const Tensor<T>& emb, const PfmBlock<T>& block) {
  if (block.w2.dim(0) != 2 * feature.dim(0))
    throw ShapeError("pfm_modulate: block emits " + std::to_string(block.w2.dim(0)) + " values for " +
                     std::to_string(feature.dim(0)) + " channels");
  auto [gamma, beta] = block.scale_shift(emb);
  Tensor<T> out(feature.shape());
  int c = feature.dim(0), hw = feature.dim(1) * feature.dim(2);
  for (int ci = 0; ci < c; ++ci) {
    const T* src = feature.data() + static_cast<int64_t>(ci) * hw;
    T* dst = out.data() + static_cast<int64_t>(ci) * hw;
    for (int i = 0; i < hw; ++i) dst[i] = src[i] * (gamma[ci] + T(1)) + beta[ci];
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> he_init(std::vector<int> shape, int fan_in, uint64_t seed, const std::string& path) {
  Rng rng = Rng::stream(seed, "init", fnv1a64(path));
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

template <typename T>
Tensor<T> xavier_init(std::vector<int> shape, int fan_in, uint64_t seed, const std::string& path) {
  Rng rng = Rng::stream(seed, "init", fnv1a64(path));
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(1.0 / fan_in)));
}

}  // namespace detail

enum class Act { LRelu, Sigmoid, None };

template <typename T>
class Generator {
 public:
  struct BlockIds {
    int w = -1, b = -1;
    int pw1 = -1, pb1 = -1, pw2 = -1, pb2 = -1;
    int cout = 0, k = 3;
  };

  Generator() = default;

  Generator(NetConfig cfg, ModalityMask coverage, int n_datasets, uint64_t init_seed)
      : cfg_(cfg), coverage_(coverage), n_datasets_(n_datasets), init_seed_(init_seed) {
    cfg_.validate();
    if (!coverage_.any()) throw ConfigError("generator: empty union coverage");
    if (n_datasets_ < 1) throw ConfigError("generator: need at least one dataset");

    if (cfg_.pfm_enabled) {
      emb_w1_ = add_linear("pfm.embed.l1", cfg_.emb_hidden, cfg_.d_id, /*zero=*/false);
      emb_w2_ = add_linear("pfm.embed.l2", cfg_.d_id, cfg_.emb_hidden, /*zero=*/false);
    }

    common_.resize(static_cast<size_t>(cfg_.levels));
    for (int l = 0; l < cfg_.levels; ++l) {
      int cin = l == 0 ? kNumModalities : cfg_.channels_at(l - 1);
      common_[static_cast<size_t>(l)] = add_block("gen.common.b" + std::to_string(l), cin, cfg_.channels_at(l), 3);
    }
    for (int m : coverage_.indices()) {
      auto& stream = enc_[static_cast<size_t>(m)];
      stream.resize(static_cast<size_t>(cfg_.levels));
      const std::string& name = modality_names()[static_cast<size_t>(m)];
      for (int l = 0; l < cfg_.levels; ++l) {
        int cin = l == 0 ? 1 : cfg_.channels_at(l - 1);
        stream[static_cast<size_t>(l)] = add_block("gen.enc." + name + ".b" + std::to_string(l), cin,
                                                   cfg_.channels_at(l), 3);
      }
    }
    fuse_proj_.resize(static_cast<size_t>(cfg_.levels));
    fuse_gates_.resize(static_cast<size_t>(cfg_.levels));
    for (int l = 0; l < cfg_.levels; ++l) {
      int c = cfg_.channels_at(l);
      fuse_proj_[static_cast<size_t>(l)] = add_block("gen.fuse.l" + std::to_string(l), 2 * c, c, 1);
      fuse_gates_[static_cast<size_t>(l)] =
          params_.add("gen.fuse.l" + std::to_string(l) + ".gates", Tensor<T>::zeros({kNumModalities}));
    }
    for (int m : coverage_.indices()) {
      const std::string& name = modality_names()[static_cast<size_t>(m)];
      auto& dec = dec_[static_cast<size_t>(m)];
      for (int l = cfg_.levels - 2; l >= 0; --l) {
        int cin = cfg_.channels_at(l + 1) + cfg_.channels_at(l);
        dec.push_back(add_block("gen.dec." + name + ".b" + std::to_string(l), cin, cfg_.channels_at(l), 3));
      }
      dec_out_[static_cast<size_t>(m)] = add_block("gen.dec." + name + ".out", cfg_.base_channels, 1, 3);
    }
  }

  const NetConfig& config() const { return cfg_; }
  const ModalityMask& coverage() const { return coverage_; }
  int n_datasets() const { return n_datasets_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Sinusoidal code of the identifier pushed through the embedding MLP.
  Tensor<T> dataset_embedding(int dataset_id) {
    if (!cfg_.pfm_enabled) throw ConfigError("dataset embedding requested but feature modulation is disabled");
    check_dataset(dataset_id);
    Tape<T> tape;
    Node<T>* emb = embed_node(tape, dataset_id, nullptr);
    return emb->v();
  }

  // Builds the synthesis graph for one sample. Channels of X whose source bit
  // is clear must be all-zero. Returns one output node per modality in
  // (targets & coverage); other entries are null.
  std::array<Node<T>*, kNumModalities> forward(Tape<T>& tape, const Tensor<T>& X, const ModalityMask& sources,
                                               int dataset_id, const ModalityMask& targets,
                                               GradBuffer<T>* grads = nullptr) {
    check_dataset(dataset_id);
    if (!sources.any()) throw TaskError("forward: all-zero source mask");
    if (!sources.dominated_by(coverage_))
      throw TaskError("forward: sources " + sources.to_string() + " outside coverage " + coverage_.to_string());
    if (X.rank() != 3 || X.dim(0) != kNumModalities) throw ShapeError("forward: X must be [6,H,W]");
    int h = X.dim(1), w = X.dim(2);
    int down = 1 << (cfg_.levels - 1);
    if (h % down != 0 || w % down != 0)
      throw ShapeError("forward: spatial dims must be divisible by " + std::to_string(down));
    for (int c = 0; c < kNumModalities; ++c) {
      if (!sources[c] && !channel_all_zero_t(X, c))
        throw ValidationError("forward: non-source channel " + std::to_string(c) + " is not all-zero");
    }

    Node<T>* emb = cfg_.pfm_enabled ? embed_node(tape, dataset_id, grads) : nullptr;

    // common stream over the full 6-channel input
    Tensor<T> xin(X);
    Node<T>* xc = tape.input(std::move(xin));
    std::vector<Node<T>*> common_feats;
    for (int l = 0; l < cfg_.levels; ++l) {
      xc = apply_block(tape, xc, common_[static_cast<size_t>(l)], l == 0 ? 1 : 2, Act::LRelu, emb, grads);
      common_feats.push_back(xc);
    }

    // modality-specific streams for active sources only
    std::vector<std::pair<int, std::vector<Node<T>*>>> stream_feats;
    for (int m : sources.indices()) {
      Tensor<T> ch({1, h, w});
      std::copy(X.data() + static_cast<int64_t>(m) * h * w, X.data() + static_cast<int64_t>(m + 1) * h * w,
                ch.data());
      Node<T>* xs = tape.input(std::move(ch));
      std::vector<Node<T>*> feats;
      for (int l = 0; l < cfg_.levels; ++l) {
        xs = apply_block(tape, xs, enc_.at(static_cast<size_t>(m))[static_cast<size_t>(l)], l == 0 ? 1 : 2,
                         Act::LRelu, emb, grads);
        feats.push_back(xs);
      }
      stream_feats.emplace_back(m, std::move(feats));
    }

    // per-level fusion over available streams
    std::vector<Node<T>*> fused(static_cast<size_t>(cfg_.levels));
    for (int l = 0; l < cfg_.levels; ++l) {
      std::vector<std::pair<int, Node<T>*>> level_streams;
      for (auto& [m, feats] : stream_feats) level_streams.emplace_back(m, feats[static_cast<size_t>(l)]);
      fused[static_cast<size_t>(l)] = fuse_level(tape, l, common_feats[static_cast<size_t>(l)], level_streams,
                                                 emb, grads);
    }

    std::array<Node<T>*, kNumModalities> out{};
    for (int m = 0; m < kNumModalities; ++m) {
      if (!targets[m] || !coverage_[m]) continue;
      Node<T>* x = fused[static_cast<size_t>(cfg_.levels - 1)];
      const auto& dec = dec_.at(static_cast<size_t>(m));
      for (int i = 0; i < cfg_.levels - 1; ++i) {
        int l = cfg_.levels - 2 - i;
        x = upsample2x(tape, x);
        x = concat_channels(tape, {x, fused[static_cast<size_t>(l)]});
        x = apply_block(tape, x, dec[static_cast<size_t>(i)], 1, Act::LRelu, emb, grads);
      }
      out[static_cast<size_t>(m)] =
          apply_block(tape, x, dec_out_.at(static_cast<size_t>(m)), 1, Act::Sigmoid, emb, grads);
    }
    return out;
  }

  // Full-contract forward: all six channels, zeros where the registry has no
  // coverage. Inference only.
  Tensor<T> forward_all(const Tensor<T>& X, const ModalityMask& sources, int dataset_id) {
    Tape<T> tape;
    auto nodes = forward(tape, X, sources, dataset_id, coverage_, nullptr);
    Tensor<T> out({kNumModalities, X.dim(1), X.dim(2)});
    for (int m = 0; m < kNumModalities; ++m) {
      if (!nodes[static_cast<size_t>(m)]) continue;
      const auto& v = nodes[static_cast<size_t>(m)]->v();
      std::copy(v.data(), v.data() + v.numel(), out.data() + static_cast<int64_t>(m) * v.numel());
    }
    return out;
  }

  // Gated fusion of one resolution level: shared 1x1 projection of
  // [common ++ stream], then a masked-softmax weighted sum over the supplied
  // streams, iterated in modality order so the result is permutation
  // invariant.
  Node<T>* fuse_level(Tape<T>& tape, int level, Node<T>* common_feat,
                      std::vector<std::pair<int, Node<T>*>> streams, Node<T>* emb, GradBuffer<T>* grads) {
    if (streams.empty()) throw TaskError("fuse_level: no streams supplied");
    std::sort(streams.begin(), streams.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<Node<T>*> projected;
    std::vector<int> indices;
    for (auto& [m, feat] : streams) {
      Node<T>* cat = concat_channels(tape, {common_feat, feat});
      projected.push_back(
          apply_block(tape, cat, fuse_proj_[static_cast<size_t>(level)], 1, Act::LRelu, emb, grads));
      indices.push_back(m);
    }
    Node<T>* gates = param_leaf(tape, params_, fuse_gates_[static_cast<size_t>(level)], grads);
    Node<T>* sel = gather_vec(tape, gates, indices);
    Node<T>* wts = softmax_vec(tape, sel);
    return weighted_sum_maps(tape, projected, wts);
  }

  Node<T>* embed_node(Tape<T>& tape, int dataset_id, GradBuffer<T>* grads) {
    Node<T>* code = tape.input(sinusoidal_code<T>(dataset_id, cfg_.d_id));
    Node<T>* h = linear(tape, code, param_leaf(tape, params_, emb_w1_.w, grads),
                        param_leaf(tape, params_, emb_w1_.b, grads));
    h = tanh_op(tape, h);
    return linear(tape, h, param_leaf(tape, params_, emb_w2_.w, grads),
                  param_leaf(tape, params_, emb_w2_.b, grads));
  }

 private:
  struct LinearIds {
    int w = -1, b = -1;
  };

  void check_dataset(int dataset_id) const {
    if (dataset_id < 0 || dataset_id >= n_datasets_)
      throw ConditioningError("dataset identifier " + std::to_string(dataset_id) + " outside registry range [0," +
                              std::to_string(n_datasets_) + ")");
  }

  static bool channel_all_zero_t(const Tensor<T>& x, int c) {
    int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const T* p = x.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i)
      if (p[i] != T(0)) return false;
    return true;
  }

  LinearIds add_linear(const std::string& path, int out, int in, bool zero) {
    LinearIds ids;
    ids.w = params_.add(path + ".w", zero ? Tensor<T>::zeros({out, in})
                                          : detail::xavier_init<T>({out, in}, in, init_seed_, path + ".w"));
    ids.b = params_.add(path + ".b", Tensor<T>::zeros({out}));
    return ids;
  }

  BlockIds add_block(const std::string& path, int cin, int cout, int k) {
    BlockIds ids;
    ids.cout = cout;
    ids.k = k;
    ids.w = params_.add(path + ".w", detail::he_init<T>({cout, cin, k, k}, cin * k * k, init_seed_, path + ".w"));
    ids.b = params_.add(path + ".b", Tensor<T>::zeros({cout}));
    if (cfg_.pfm_enabled) {
      // hidden layer random, final layer zero => modulation is the identity
      // at initialization
      ids.pw1 = params_.add("pfm." + path + ".l1.w",
                            detail::xavier_init<T>({cfg_.pfm_hidden, cfg_.d_id}, cfg_.d_id, init_seed_,
                                                   "pfm." + path + ".l1.w"));
      ids.pb1 = params_.add("pfm." + path + ".l1.b", Tensor<T>::zeros({cfg_.pfm_hidden}));
      ids.pw2 = params_.add("pfm." + path + ".l2.w", Tensor<T>::zeros({2 * cout, cfg_.pfm_hidden}));
      ids.pb2 = params_.add("pfm." + path + ".l2.b", Tensor<T>::zeros({2 * cout}));
    }
    return ids;
  }

  Node<T>* apply_block(Tape<T>& tape, Node<T>* x, const BlockIds& ids, int stride, Act act, Node<T>* emb,
                       GradBuffer<T>* grads) {
    Node<T>* y = conv2d(tape, x, param_leaf(tape, params_, ids.w, grads), param_leaf(tape, params_, ids.b, grads),
                        stride, ids.k == 1 ? 0 : 1);
    if (cfg_.pfm_enabled && emb) {
      Node<T>* hidden = linear(tape, emb, param_leaf(tape, params_, ids.pw1, grads),
                               param_leaf(tape, params_, ids.pb1, grads));
      hidden = tanh_op(tape, hidden);
      Node<T>* gb = linear(tape, hidden, param_leaf(tape, params_, ids.pw2, grads),
                           param_leaf(tape, params_, ids.pb2, grads));
      Node<T>* gamma = slice_vec(tape, gb, 0, ids.cout);
      Node<T>* beta = slice_vec(tape, gb, ids.cout, ids.cout);
      y = film_modulate(tape, y, gamma, beta);
    }
    switch (act) {
      case Act::LRelu:
        return leaky_relu(tape, y, static_cast<T>(cfg_.lrelu_alpha));
      case Act::Sigmoid:
        return sigmoid(tape, y);
      case Act::None:
        return y;
    }
    return y;
  }

  NetConfig cfg_;
  ModalityMask coverage_;
  int n_datasets_ = 0;
  uint64_t init_seed_ = 0;
  ParamStore<T> params_;

  std::vector<BlockIds> common_;
  std::array<std::vector<BlockIds>, kNumModalities> enc_;
  std::vector<BlockIds> fuse_proj_;
  std::vector<int> fuse_gates_;
  std::array<std::vector<BlockIds>, kNumModalities> dec_;
  std::array<BlockIds, kNumModalities> dec_out_;
  LinearIds emb_w1_, emb_w2_;
};

template <typename T>
class DiscriminatorBank {
 public:
  DiscriminatorBank() = default;

  DiscriminatorBank(DiscConfig cfg, ModalityMask coverage, uint64_t init_seed)
      : cfg_(cfg), coverage_(coverage), init_seed_(init_seed) {
    for (int m : coverage_.indices()) {
      const std::string& name = modality_names()[static_cast<size_t>(m)];
      auto& convs = convs_[static_cast<size_t>(m)];
      int cin = 1;
      for (int s = 0; s < cfg_.stages; ++s) {
        int cout = cfg_.base_channels << s;
        convs.push_back(add_conv("disc." + name + ".b" + std::to_string(s), cin, cout));
        cin = cout;
      }
      convs.push_back(add_conv("disc." + name + ".out", cin, 1));
    }
  }

  const DiscConfig& config() const { return cfg_; }
  const ModalityMask& coverage() const { return coverage_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Spatial realism map; pass grads=nullptr to keep the critic frozen while
  // still propagating gradient to the image.
  Node<T>* forward(Tape<T>& tape, int modality, Node<T>* image, GradBuffer<T>* grads = nullptr) {
    if (modality < 0 || modality >= kNumModalities || !coverage_[modality])
      throw ConfigError("discriminator requested for modality outside coverage");
    const auto& convs = convs_.at(static_cast<size_t>(modality));
    Node<T>* x = image;
    for (size_t s = 0; s + 1 < convs.size(); ++s) {
      x = conv2d(tape, x, param_leaf(tape, params_, convs[s].first, grads),
                 param_leaf(tape, params_, convs[s].second, grads), 2, 1);
      x = leaky_relu(tape, x, static_cast<T>(cfg_.lrelu_alpha));
    }
    return conv2d(tape, x, param_leaf(tape, params_, convs.back().first, grads),
                  param_leaf(tape, params_, convs.back().second, grads), 1, 1);
  }

  Tensor<T> discriminate(int modality, const Tensor<T>& image) {
    Tape<T> tape;
    Tensor<T> copy(image);
    Node<T>* out = forward(tape, modality, tape.input(std::move(copy)), nullptr);
    return out->v();
  }

 private:
  std::pair<int, int> add_conv(const std::string& path, int cin, int cout) {
    int w = params_.add(path + ".w", detail::he_init<T>({cout, cin, 3, 3}, cin * 9, init_seed_, path + ".w"));
    int b = params_.add(path + ".b", Tensor<T>::zeros({cout}));
    return {w, b};
  }

  DiscConfig cfg_;
  ModalityMask coverage_;
  uint64_t init_seed_ = 0;
  ParamStore<T> params_;
  std::array<std::vector<std::pair<int, int>>, kNumModalities> convs_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: JSON header (configs, registry, id map, hashes,
// epoch) followed by raw float32 blobs keyed by canonical parameter path.
// ---------------------------------------------------------------------------

template <typename T>
struct ModelBundle {
  NetConfig net;
  DiscConfig disc;
  DatasetRegistry registry;
  std::string corpus_manifest_hash;
  double train_frac = 0.75;
  uint64_t split_seed = 0;
  int epoch = 0;
  Generator<T> gen;
  DiscriminatorBank<T> bank;
};

namespace detail {

inline constexpr char kCkptMagic[9] = "MMSYNCP1";

template <typename T>
void collect_store(json& tensors, std::vector<const Tensor<T>*>& blobs, const ParamStore<T>& store,
                   const std::string& kind) {
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(static_cast<int>(i));
    json entry{{"name", p.path}, {"kind", kind}, {"shape", p.value.shape()}, {"adam_t", p.adam.t}};
    tensors.push_back(entry);
    blobs.push_back(&p.value);
    blobs.push_back(p.adam.m.empty() ? nullptr : &p.adam.m);
    blobs.push_back(p.adam.v.empty() ? nullptr : &p.adam.v);
  }
}

template <typename T>
void write_blob(std::ofstream& out, const Tensor<T>* t, int64_t numel) {
  std::vector<float> buf(static_cast<size_t>(numel), 0.0f);
  if (t) {
    for (int64_t i = 0; i < numel; ++i) buf[static_cast<size_t>(i)] = static_cast<float>((*t)[i]);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

template <typename T>
void read_blob(std::ifstream& in, Tensor<T>& t, int64_t numel) {
  std::vector<float> buf(static_cast<size_t>(numel));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw IoError("checkpoint truncated");
  for (int64_t i = 0; i < numel; ++i) t[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelBundle<T>& model) {
  json header;
  header["version"] = std::string(kVersionTag);
  header["net_config"] = model.net.to_json();
  header["disc_config"] = model.disc.to_json();
  header["registry"] = registry_to_json(model.registry);
  header["registry_hash"] = registry_hash(model.registry);
  header["corpus_manifest_hash"] = model.corpus_manifest_hash;
  header["train_frac"] = model.train_frac;
  header["split_seed"] = model.split_seed;
  header["epoch"] = model.epoch;
  header["tensors"] = json::array();
  std::vector<const Tensor<T>*> blobs;
  detail::collect_store(header["tensors"], blobs, model.gen.params(), "gen");
  detail::collect_store(header["tensors"], blobs, model.bank.params(), "disc");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  std::string hdr = header.dump();
  uint64_t len = hdr.size();
  out.write(detail::kCkptMagic, 8);
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  size_t bi = 0;
  for (const auto& entry : header["tensors"]) {
    int64_t numel = 1;
    for (int d : entry["shape"].get<std::vector<int>>()) numel *= d;
    bool has_adam = entry["adam_t"].get<int64_t>() > 0;
    detail::write_blob(out, blobs[bi], numel);
    detail::write_blob(out, has_adam ? blobs[bi + 1] : nullptr, has_adam ? numel : 0);
    detail::write_blob(out, has_adam ? blobs[bi + 2] : nullptr, has_adam ? numel : 0);
    bi += 3;
  }
  if (!out) throw IoError("short checkpoint write: " + path.string());
}

template <typename T>
ModelBundle<T> load_checkpoint(const std::filesystem::path& path, uint64_t init_seed = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(detail::kCkptMagic, 8))
    throw IoError("not a checkpoint file: " + path.string());
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hdr(len, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint header truncated");
  json header = json::parse(hdr);

  ModelBundle<T> model;
  model.net = NetConfig::from_json(header.at("net_config"));
  model.disc = DiscConfig::from_json(header.at("disc_config"));
  model.registry = registry_from_json(header.at("registry"));
  model.corpus_manifest_hash = header.value("corpus_manifest_hash", "");
  model.train_frac = header.value("train_frac", 0.75);
  model.split_seed = header.value("split_seed", 0ull);
  model.epoch = header.value("epoch", 0);
  ModalityMask cov = union_coverage(model.registry);
  model.gen = Generator<T>(model.net, cov, static_cast<int>(model.registry.size()), init_seed);
  model.bank = DiscriminatorBank<T>(model.disc, cov, init_seed);

  for (const auto& entry : header.at("tensors")) {
    auto name = entry.at("name").get<std::string>();
    auto kind = entry.at("kind").get<std::string>();
    int64_t adam_t = entry.at("adam_t").get<int64_t>();
    auto shape = entry.at("shape").get<std::vector<int>>();
    int64_t numel = 1;
    for (int d : shape) numel *= d;
    ParamStore<T>& store = kind == "gen" ? model.gen.params() : model.bank.params();
    int id = store.find(name);
    if (id < 0) throw IoError("checkpoint parameter '" + name + "' has no slot in the rebuilt model");
    auto& p = store.at(id);
    if (p.value.shape() != shape)
      throw IoError("checkpoint parameter '" + name + "' shape mismatch: " + p.value.shape_str());
    detail::read_blob(in, p.value, numel);
    if (adam_t > 0) {
      p.adam.m = Tensor<T>::zeros(shape);
      p.adam.v = Tensor<T>::zeros(shape);
      p.adam.t = adam_t;
      detail::read_blob(in, p.adam.m, numel);
      detail::read_blob(in, p.adam.v, numel);
    }
  }
  return model;
}

}  // namespace mmsynth
