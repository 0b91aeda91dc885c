#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroenc/dataset.hpp"
#include "neuroenc/matrix_io.hpp"
#include "neuroenc/nn.hpp"
#include "neuroenc/rng.hpp"

namespace neuroenc {

struct ConvStageSpec {
  int channels = 0;
  int kernel = 3;
  int stride = 1;
  bool pool = true;
};

struct BackboneConfig {
  int image_size = 64;
  int in_channels = 3;
  std::vector<ConvStageSpec> conv_stages;
  std::vector<int> fc_dims;            // last entry = number of classes
  std::vector<std::string> tap_names;  // one per conv stage, then per fc stage
  std::uint64_t seed = 0;

  int num_classes() const { return fc_dims.back(); }

  /// Desk-scale default: 5 conv + 3 fc stages, shape-parallel to an 8-tap
  /// AlexNet-style layout.
  static BackboneConfig desk_default(int num_classes, int image_size = 64,
                                     std::uint64_t seed = 0) {
    BackboneConfig c;
    c.image_size = image_size;
    c.conv_stages = {{8, 3, 1, true},
                     {16, 3, 1, true},
                     {32, 3, 1, true},
                     {32, 3, 1, true},
                     {16, 3, 1, true}};
    c.fc_dims = {256, 256, num_classes};
    c.seed = seed;
    c.tap_names = default_tap_names(5, 3);
    return c;
  }

  static std::vector<std::string> default_tap_names(std::size_t n_conv,
                                                    std::size_t n_fc) {
    std::vector<std::string> names;
    for (std::size_t i = 1; i <= n_conv; ++i) names.push_back("conv" + std::to_string(i));
    for (std::size_t i = 1; i <= n_fc; ++i) names.push_back("fc" + std::to_string(i));
    return names;
  }

  void validate() const {
    require(conv_stages.size() >= 2, "backbone: need at least 2 conv stages");
    require(fc_dims.size() >= 2, "backbone: need at least 2 fc stages");
    require(tap_names.size() == conv_stages.size() + fc_dims.size(),
            "backbone: tap name count must match stage count");
    std::set<std::string> uniq(tap_names.begin(), tap_names.end());
    require(uniq.size() == tap_names.size(), "backbone: tap names must be unique");
    require(image_size >= 4 && in_channels >= 1, "backbone: bad input dims");
    for (const auto& s : conv_stages) {
      require(s.channels >= 1, "backbone: conv stage needs channels >= 1");
      require(s.kernel >= 1 && s.kernel % 2 == 1,
              "backbone: conv kernel must be odd");
      require(s.stride >= 1, "backbone: conv stride must be >= 1");
    }
    for (int d : fc_dims) require(d >= 1, "backbone: fc width must be >= 1");
  }

  json to_json() const {
    json j;
    j["image_size"] = image_size;
    j["in_channels"] = in_channels;
    j["conv_stages"] = json::array();
    for (const auto& s : conv_stages)
      j["conv_stages"].push_back({{"channels", s.channels},
                                  {"kernel", s.kernel},
                                  {"stride", s.stride},
                                  {"pool", s.pool}});
    j["fc_dims"] = fc_dims;
    j["tap_names"] = tap_names;
    j["seed"] = seed;
    return j;
  }

  static BackboneConfig from_json(const json& j) {
    BackboneConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    for (const auto& s : j.at("conv_stages"))
      c.conv_stages.push_back({s.at("channels").get<int>(), s.at("kernel").get<int>(),
                               s.at("stride").get<int>(), s.at("pool").get<bool>()});
    c.fc_dims = j.at("fc_dims").get<std::vector<int>>();
    c.tap_names = j.at("tap_names").get<std::vector<std::string>>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct TapInfo {
  std::string name;
  Index dim = 0;       // flattened dimension
  Index channels = 0;  // >0 for spatial (conv) taps
  Index height = 0;
  Index width = 0;

  bool spatial() const { return channels > 0; }
};

enum class ProvenanceKind { random, pretrained, cl_tuned, reg_tuned, pooled };

inline std::string to_string(ProvenanceKind k) {
  switch (k) {
    case ProvenanceKind::random: return "random";
    case ProvenanceKind::pretrained: return "pretrained";
    case ProvenanceKind::cl_tuned: return "cl_tuned";
    case ProvenanceKind::reg_tuned: return "reg_tuned";
    case ProvenanceKind::pooled: return "pooled";
  }
  return "random";
}

inline ProvenanceKind provenance_from_string(const std::string& s) {
  if (s == "random") return ProvenanceKind::random;
  if (s == "pretrained") return ProvenanceKind::pretrained;
  if (s == "cl_tuned") return ProvenanceKind::cl_tuned;
  if (s == "reg_tuned") return ProvenanceKind::reg_tuned;
  if (s == "pooled") return ProvenanceKind::pooled;
  throw InvalidInput("unknown provenance kind: " + s);
}

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::random;
  std::string subject_id;   // tuned models only
  std::string roi_name;     // tuned models only
  std::string encode_tap;   // layer selected for subsequent encoding
  std::string config_hash;
  std::uint64_t seed = 0;

  json to_json() const {
    return {{"kind", to_string(kind)},   {"subject", subject_id},
            {"roi", roi_name},           {"tap", encode_tap},
            {"config_hash", config_hash}, {"seed", seed}};
  }
  static Provenance from_json(const json& j) {
    Provenance p;
    p.kind = provenance_from_string(j.at("kind").get<std::string>());
    p.subject_id = j.at("subject").get<std::string>();
    p.roi_name = j.at("roi").get<std::string>();
    p.encode_tap = j.at("tap").get<std::string>();
    p.config_hash = j.at("config_hash").get<std::string>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
  }
};

/// Small convolutional network with named tap layers. Conv taps are the
/// stage outputs (post-activation, post-pool); hidden fc taps are
/// post-activation; the final fc tap is the raw class logits.
template <typename T>
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed_tag(cfg_.seed, "backbone-init"));
    Index h = cfg_.image_size, w = cfg_.image_size, ch = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.conv_stages.size(); ++i) {
      const auto& s = cfg_.conv_stages[i];
      ConvStage st;
      st.conv = nn::Conv2d<T>(ch, s.channels, s.kernel, s.stride, h, w, rng);
      h = st.conv.out_h();
      w = st.conv.out_w();
      ch = s.channels;
      st.has_pool = s.pool;
      if (s.pool) {
        st.pool = nn::MaxPool2d<T>(ch, h, w);
        h = st.pool.out_h();
        w = st.pool.out_w();
      }
      conv_.push_back(std::move(st));
      taps_.push_back({cfg_.tap_names[i], ch * h * w, ch, h, w});
    }
    Index dim = ch * h * w;
    for (std::size_t j = 0; j < cfg_.fc_dims.size(); ++j) {
      FcStage st;
      st.fc = nn::Linear<T>(dim, cfg_.fc_dims[j], rng);
      st.has_relu = (j + 1 < cfg_.fc_dims.size());
      dim = cfg_.fc_dims[j];
      fc_.push_back(std::move(st));
      taps_.push_back({cfg_.tap_names[cfg_.conv_stages.size() + j], dim, 0, 0, 0});
    }
    provenance_.kind = ProvenanceKind::random;
    provenance_.seed = cfg_.seed;
  }

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<TapInfo>& taps() const { return taps_; }
  Index num_taps() const { return static_cast<Index>(taps_.size()); }
  Index output_dim() const { return cfg_.fc_dims.back(); }

  Provenance& provenance() { return provenance_; }
  const Provenance& provenance() const { return provenance_; }

  int tap_index(const std::string& name) const {
    for (std::size_t i = 0; i < taps_.size(); ++i)
      if (taps_[i].name == name) return static_cast<int>(i);
    throw InvalidInput("unknown tap: " + name);
  }
  const TapInfo& tap(const std::string& name) const {
    return taps_[static_cast<std::size_t>(tap_index(name))];
  }
  const std::string& penultimate_tap() const {
    return taps_[taps_.size() - 2].name;
  }
  const std::string& last_conv_tap() const {
    return taps_[conv_.size() - 1].name;
  }

  /// Inference forward up to and including tap `upto` (-1 = full network).
  /// Does not populate backward caches.
  Mat<T> forward(const Mat<T>& x, int upto = -1) {
    const int last = upto < 0 ? static_cast<int>(taps_.size()) - 1 : upto;
    Mat<T> a = x;
    int t = 0;
    for (auto& st : conv_) {
      a = st.conv.forward(a, /*cache=*/false);
      a = st.relu.apply(a);
      if (st.has_pool) a = st.pool.forward(a, /*cache=*/false);
      if (t == last) return a;
      ++t;
    }
    for (auto& st : fc_) {
      a = st.fc.apply(a);
      if (st.has_relu) a = st.relu.apply(a);
      if (t == last) return a;
      ++t;
    }
    return a;
  }

  /// Resume the forward pass from a tap activation through the remaining
  /// stages (taps after_tap+1 .. upto).
  Mat<T> forward_from(int after_tap, const Mat<T>& tap_activation, int upto = -1) {
    const int last = upto < 0 ? static_cast<int>(taps_.size()) - 1 : upto;
    const int n_conv = static_cast<int>(conv_.size());
    Mat<T> a = tap_activation;
    for (int t = after_tap + 1; t <= last; ++t) {
      if (t < n_conv) {
        auto& st = conv_[static_cast<std::size_t>(t)];
        a = st.conv.forward(a, /*cache=*/false);
        a = st.relu.apply(a);
        if (st.has_pool) a = st.pool.forward(a, /*cache=*/false);
      } else {
        auto& st = fc_[static_cast<std::size_t>(t - n_conv)];
        a = st.fc.apply(a);
        if (st.has_relu) a = st.relu.apply(a);
      }
    }
    return a;
  }

  /// Training-mode forward: caches every intermediate and records tap
  /// activations for backward() / backward_from_tap().
  Mat<T> forward_cached(const Mat<T>& x) {
    tap_act_.assign(taps_.size(), Mat<T>());
    Mat<T> a = x;
    int t = 0;
    for (auto& st : conv_) {
      a = st.conv.forward(a, /*cache=*/true);
      a = st.relu.forward(a);
      if (st.has_pool) a = st.pool.forward(a, /*cache=*/true);
      tap_act_[static_cast<std::size_t>(t++)] = a;
    }
    for (auto& st : fc_) {
      a = st.fc.forward(a);
      if (st.has_relu) a = st.relu.forward(a);
      tap_act_[static_cast<std::size_t>(t++)] = a;
    }
    return a;
  }

  const Mat<T>& tap_activation(int tap_idx) const {
    return tap_act_.at(static_cast<std::size_t>(tap_idx));
  }

  /// Backprop from the output gradient; accumulates parameter gradients.
  /// If stop_tap >= 0, returns the activation gradient at that tap and does
  /// not descend further; otherwise propagates to the input (discarded).
  Mat<T> backward(const Mat<T>& dout, int stop_tap = -1) {
    return backward_from_tap(static_cast<int>(taps_.size()) - 1, dout, stop_tap);
  }

  /// Backprop a gradient seeded at tap `from` down to tap `stop` (exclusive);
  /// returns the activation gradient at `stop`, or an empty matrix when
  /// propagating to the input.
  Mat<T> backward_from_tap(int from, const Mat<T>& dtap, int stop_tap = -1) {
    Mat<T> g = dtap;
    for (int t = from; t > stop_tap; --t) {
      const bool need_dx = !(t == 0 && stop_tap < 0);
      g = stage_backward(t, g, need_dx);
    }
    return g;
  }

  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& st : conv_)
      for (auto p : st.conv.params()) out.push_back(p);
    for (auto& st : fc_)
      for (auto p : st.fc.params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto p : params()) p.grad->setZero();
  }

  /// Named parameter list in checkpoint order.
  std::vector<std::pair<std::string, Mat<T>*>> named_params() {
    std::vector<std::pair<std::string, Mat<T>*>> out;
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      out.push_back({cfg_.tap_names[i] + ".weight", &conv_[i].conv.weight});
      out.push_back({cfg_.tap_names[i] + ".bias", &conv_[i].conv.bias});
    }
    for (std::size_t j = 0; j < fc_.size(); ++j) {
      const auto& nm = cfg_.tap_names[conv_.size() + j];
      out.push_back({nm + ".weight", &fc_[j].fc.weight});
      out.push_back({nm + ".bias", &fc_[j].fc.bias});
    }
    return out;
  }

 private:
  struct ConvStage {
    nn::Conv2d<T> conv;
    nn::ReLU<T> relu;
    bool has_pool = false;
    nn::MaxPool2d<T> pool;
  };
  struct FcStage {
    nn::Linear<T> fc;
    bool has_relu = false;
    nn::ReLU<T> relu;
  };

  // Backward through the stage that produces tap t, returning the gradient at
  // tap t-1 (or at the input for t == 0 when need_dx).
  Mat<T> stage_backward(int t, const Mat<T>& g, bool need_dx) {
    const int n_conv = static_cast<int>(conv_.size());
    if (t < n_conv) {
      auto& st = conv_[static_cast<std::size_t>(t)];
      Mat<T> h = st.has_pool ? st.pool.backward(g) : g;
      h = st.relu.backward(h);
      return st.conv.backward(h, need_dx);
    }
    auto& st = fc_[static_cast<std::size_t>(t - n_conv)];
    Mat<T> h = st.has_relu ? st.relu.backward(g) : g;
    return st.fc.backward(h, /*need_dx=*/true);
  }

  BackboneConfig cfg_;
  std::vector<ConvStage> conv_;
  std::vector<FcStage> fc_;
  std::vector<TapInfo> taps_;
  std::vector<Mat<T>> tap_act_;
  Provenance provenance_;
};

using BackboneF = Backbone<float>;
using BackboneD = Backbone<double>;

inline BackboneF build_backbone(const BackboneConfig& cfg) {
  return BackboneF(cfg);
}

/// Per-channel normalization applied right before the backbone input.
template <typename T>
Mat<T> normalize_images(const MatF& images, int height, int width,
                        const std::array<float, 3>& mean,
                        const std::array<float, 3>& stddev) {
  const Index plane = static_cast<Index>(height) * width;
  require(images.cols() == 3 * plane, "normalize_images: dimension mismatch");
  Mat<T> out(images.rows(), images.cols());
  for (int c = 0; c < 3; ++c) {
    const T m = static_cast<T>(mean[static_cast<std::size_t>(c)]);
    const T s = static_cast<T>(stddev[static_cast<std::size_t>(c)]);
    out.middleCols(c * plane, plane) =
        (images.middleCols(c * plane, plane).template cast<T>().array() - m) / s;
  }
  return out;
}

template <typename T>
Mat<T> normalize_images(const StimulusSet& stim, const Mat<T>&) = delete;

inline MatF normalized_input(const StimulusSet& stim) {
  return normalize_images<float>(stim.images, stim.height, stim.width,
                                 stim.norm_mean, stim.norm_std);
}

/// Deterministic feature extraction at a named tap; rows follow image order.
inline MatF extract_features(Backbone<float>& model, const StimulusSet& stim,
                             const std::string& tap, Index chunk = 256) {
  const int t = model.tap_index(tap);
  const Index n = stim.size();
  const Index dim = model.taps()[static_cast<std::size_t>(t)].dim;
  MatF out(n, dim);
  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    MatF block = stim.images.middleRows(start, len);
    MatF x = normalize_images<float>(block, stim.height, stim.width,
                                     stim.norm_mean, stim.norm_std);
    out.middleRows(start, len) = model.forward(x, t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header (config + provenance + blob names) followed by
// NEB1 parameter blobs.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_checkpoint_header(std::ostream& os, const json& header) {
  const std::string text = header.dump();
  os.write("NEC1", 4);
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline json read_checkpoint_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NEC1", 4) != 0)
    throw IoError("checkpoint: bad magic");
  std::uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 4);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw IoError("checkpoint: truncated header");
  return json::parse(text);
}

}  // namespace detail

inline void save_backbone(const std::filesystem::path& path, BackboneF& model) {
  auto named = model.named_params();
  json header;
  header["format"] = "neuroenc-backbone";
  header["version"] = 1;
  header["config"] = model.config().to_json();
  header["provenance"] = model.provenance().to_json();
  header["blobs"] = json::array();
  for (const auto& [name, _] : named) header["blobs"].push_back(name);
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  detail::write_checkpoint_header(os, header);
  for (const auto& [_, mat] : named) neb::write(os, *mat);
}

inline BackboneF load_backbone(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint not found: " + path.string());
  json header = detail::read_checkpoint_header(is);
  require(header.at("format") == "neuroenc-backbone",
          "checkpoint: not a backbone file");
  BackboneF model(BackboneConfig::from_json(header.at("config")));
  model.provenance() = Provenance::from_json(header.at("provenance"));
  auto named = model.named_params();
  const auto& blob_names = header.at("blobs");
  require(blob_names.size() == named.size(), "checkpoint: blob count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    require(blob_names[i].get<std::string>() == named[i].first,
            "checkpoint: blob order mismatch");
    MatF m = neb::read(is);
    require(m.rows() == named[i].second->rows() && m.cols() == named[i].second->cols(),
            "checkpoint: blob shape mismatch for " + named[i].first);
    *named[i].second = m;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Toy classification pretraining (ImageNet stand-in).
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 8;
  double lr = 1e-3;
  int batch = 64;
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;
  double val_accuracy = 0.0;
  double initial_val_loss = 0.0;
};

inline double classification_accuracy(BackboneF& model, const StimulusSet& stim,
                                      const std::vector<int>& labels) {
  Index correct = 0;
  const Index n = stim.size();
  for (Index start = 0; start < n; start += 256) {
    const Index len = std::min<Index>(256, n - start);
    MatF block = stim.images.middleRows(start, len);
    MatF x = normalize_images<float>(block, stim.height, stim.width,
                                     stim.norm_mean, stim.norm_std);
    MatF logits = model.forward(x);
    for (Index i = 0; i < len; ++i) {
      Index pred;
      logits.row(i).maxCoeff(&pred);
      if (pred == labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Cross-entropy training of the classification head + features on a labeled
/// toy set. A held-out slice tracks generalization.
inline PretrainLog pretrain_backbone(BackboneF& model, const StimulusSet& labeled,
                                     const PretrainConfig& cfg) {
  require(labeled.labeled(), "pretrain: stimulus set has no labels");
  require(labeled.num_classes >= 2, "pretrain: need at least 2 classes");
  require(labeled.num_classes <= model.output_dim(),
          "pretrain: class count exceeds classifier width");
  require(cfg.epochs >= 0 && cfg.batch >= 1, "pretrain: bad schedule");

  const int n = static_cast<int>(labeled.size());
  Rng rng(seed_tag(cfg.seed, "pretrain"));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  const int n_val = static_cast<int>(std::lround(cfg.val_fraction * n));
  std::vector<int> val_idx(order.begin(), order.begin() + n_val);
  std::vector<int> train_idx(order.begin() + n_val, order.end());
  require(!train_idx.empty(), "pretrain: empty training slice");

  StimulusSet val = n_val > 0 ? labeled.subset(val_idx) : StimulusSet{};
  std::vector<int> val_labels;
  for (int i : val_idx) val_labels.push_back(labeled.labels[static_cast<std::size_t>(i)]);

  auto val_ce = [&]() -> double {
    if (n_val == 0) return 0.0;
    MatF x = normalized_input(val);
    MatF logits = model.forward(x);
    return nn::softmax_cross_entropy<float>(logits, val_labels, nullptr);
  };

  PretrainLog log;
  log.initial_val_loss = val_ce();

  nn::Adam<float> opt(model.params(), {cfg.lr, 0.9, 0.999, 1e-8});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(seed_combine(seed_tag(cfg.seed, "pretrain-epoch"),
                          static_cast<std::uint64_t>(epoch)));
    erng.shuffle(train_idx);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t len =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), train_idx.size() - start);
      std::vector<int> bidx(train_idx.begin() + static_cast<long>(start),
                            train_idx.begin() + static_cast<long>(start + len));
      StimulusSet bs = labeled.subset(bidx);
      std::vector<int> blabels;
      for (int i : bidx) blabels.push_back(labeled.labels[static_cast<std::size_t>(i)]);
      MatF x = normalized_input(bs);
      MatF logits = model.forward_cached(x);
      MatF dlogits;
      const float loss = nn::softmax_cross_entropy<float>(logits, blabels, &dlogits);
      if (!std::isfinite(loss))
        throw NumericalFailure("pretrain: non-finite loss at epoch " +
                               std::to_string(epoch) + " batch " +
                               std::to_string(batches));
      opt.zero_grad();
      model.backward(dlogits);
      opt.step();
      total += loss;
      ++batches;
    }
    log.train_loss.push_back(total / std::max(batches, 1));
    log.val_loss.push_back(val_ce());
  }
  if (n_val > 0) log.val_accuracy = classification_accuracy(model, val, val_labels);
  model.provenance().kind = ProvenanceKind::pretrained;
  model.provenance().seed = cfg.seed;
  return log;
}

}  // namespace neuroenc
