#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "neuroenc/backbone.hpp"
#include "neuroenc/dataset.hpp"
#include "neuroenc/nn.hpp"
#include "neuroenc/rng.hpp"

namespace neuroenc {

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Seeded permutation of the training indices chunked into full batches of
/// exactly K; the remainder is dropped so every loss term is a K-way
/// contrast.
inline std::vector<std::vector<int>> sample_batches(int n_train, int batch_size,
                                                    std::uint64_t seed,
                                                    int epoch) {
  require(batch_size >= 1, "sample_batches: batch size must be >= 1");
  require(batch_size <= n_train,
          "sample_batches: batch size exceeds training set");
  Rng rng(seed_combine(seed_tag(seed, "batches"),
                       static_cast<std::uint64_t>(epoch)));
  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  const int n_batches = n_train / batch_size;
  std::vector<std::vector<int>> batches;
  for (int b = 0; b < n_batches; ++b)
    batches.emplace_back(order.begin() + static_cast<long>(b) * batch_size,
                         order.begin() + static_cast<long>(b + 1) * batch_size);
  return batches;
}

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

/// SimCLR-style loss over paired embeddings with the positive excluded from
/// the denominator:
///   (1/K) sum_i -log( exp(sim_ii/tau) / sum_{j != i} exp(sim_ij/tau) ).
/// With the positive excluded the value can be negative; identical rows give
/// exactly log(K-1). Row-wise max subtraction stabilizes the exponentials.
template <typename T>
T contrastive_loss(const Mat<T>& z_x, const Mat<T>& z_y, T tau,
                   Mat<T>* dz_x = nullptr, Mat<T>* dz_y = nullptr) {
  const Index k = z_x.rows();
  require(k >= 2, "contrastive_loss: batch must have K >= 2");
  require(z_y.rows() == k && z_y.cols() == z_x.cols(),
          "contrastive_loss: embedding shape mismatch");
  require(tau > T(0), "contrastive_loss: temperature must be positive");

  Vec<T> nx = z_x.rowwise().norm(), ny = z_y.rowwise().norm();
  require(nx.minCoeff() > T(0) && ny.minCoeff() > T(0),
          "contrastive_loss: zero-norm embedding row");
  Mat<T> xh = z_x.array().colwise() / nx.array();
  Mat<T> yh = z_y.array().colwise() / ny.array();
  Mat<T> logits = (xh * yh.transpose()) / tau;  // K x K

  T loss = T(0);
  Mat<T> dlogits;
  if (dz_x || dz_y) dlogits = Mat<T>::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (Index j = 0; j < k; ++j)
      if (j != i) m = std::max(m, logits(i, j));
    T denom = T(0);
    for (Index j = 0; j < k; ++j)
      if (j != i) denom += std::exp(logits(i, j) - m);
    const T lse = m + std::log(denom);
    loss += (-logits(i, i) + lse) / static_cast<T>(k);
    if (dz_x || dz_y) {
      for (Index j = 0; j < k; ++j)
        if (j != i)
          dlogits(i, j) = std::exp(logits(i, j) - lse) / static_cast<T>(k);
      dlogits(i, i) = -T(1) / static_cast<T>(k);
    }
  }

  if (dz_x || dz_y) {
    dlogits /= tau;
    Mat<T> dxh = dlogits * yh;
    Mat<T> dyh = dlogits.transpose() * xh;
    if (dz_x) {
      dz_x->resize(k, z_x.cols());
      for (Index i = 0; i < k; ++i)
        dz_x->row(i) =
            (dxh.row(i) - dxh.row(i).dot(xh.row(i)) * xh.row(i)) / nx(i);
    }
    if (dz_y) {
      dz_y->resize(k, z_y.cols());
      for (Index j = 0; j < k; ++j)
        dz_y->row(j) =
            (dyh.row(j) - dyh.row(j).dot(yh.row(j)) * yh.row(j)) / ny(j);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Projection heads
// ---------------------------------------------------------------------------

/// Default subject-specific head sizes, clamped to 1 for tiny ROIs.
inline Index default_dh(Index voxels) {
  return std::max<Index>(1, static_cast<Index>(0.8 * static_cast<double>(voxels)));
}
inline Index default_dz(Index voxels) {
  return std::max<Index>(1, static_cast<Index>(0.2 * static_cast<double>(voxels)));
}

/// W_x on the backbone output, per-subject W_y on responses, and the shared
/// three-layer MLP g with batch normalization + ReLU after the first two
/// layers.
template <typename T>
struct ProjectionHeads {
  nn::Linear<T> w_x;                // d_L -> d_h, no bias
  std::vector<nn::Linear<T>> w_y;   // v_s -> d_h per subject, no bias
  std::vector<std::string> subject_ids;
  nn::Linear<T> g1, g2, g3;
  nn::BatchNorm1d<T> bn1, bn2;
  nn::ReLU<T> relu1, relu2;
  T tau = static_cast<T>(0.3);
  Index d_h = 0, d_z = 0;

  static ProjectionHeads make(Index d_backbone, const std::vector<Index>& voxel_dims,
                              const std::vector<std::string>& subjects,
                              Index d_h, Index d_z, T tau, std::uint64_t seed) {
    require(tau > T(0), "ProjectionHeads: temperature must be positive");
    require(d_h >= 1 && d_z >= 1, "ProjectionHeads: head dims must be >= 1");
    ProjectionHeads h;
    Rng rng(seed_tag(seed, "heads-init"));
    h.w_x = nn::Linear<T>(d_backbone, d_h, rng, /*with_bias=*/false);
    for (std::size_t s = 0; s < voxel_dims.size(); ++s) {
      Rng srng = rng.fork(static_cast<std::uint64_t>(s));
      h.w_y.emplace_back(voxel_dims[s], d_h, srng, /*with_bias=*/false);
    }
    h.subject_ids = subjects;
    h.g1 = nn::Linear<T>(d_h, d_h, rng);
    h.g2 = nn::Linear<T>(d_h, d_h, rng);
    h.g3 = nn::Linear<T>(d_h, d_z, rng);
    h.bn1 = nn::BatchNorm1d<T>(d_h);
    h.bn2 = nn::BatchNorm1d<T>(d_h);
    h.tau = tau;
    h.d_h = d_h;
    h.d_z = d_z;
    return h;
  }

  void set_training(bool on) {
    bn1.set_training(on);
    bn2.set_training(on);
  }

  int subject_index(const std::string& id) const {
    for (std::size_t s = 0; s < subject_ids.size(); ++s)
      if (subject_ids[s] == id) return static_cast<int>(s);
    throw InvalidInput("ProjectionHeads: unknown subject " + id);
  }

  /// Training-mode joint pass: g runs once on the stacked image/response
  /// block so its batch statistics are shared across both branches.
  Mat<T> forward_train(const Mat<T>& backbone_out, const Mat<T>& responses,
                       int subject, Mat<T>* z_x, Mat<T>* z_y) {
    const Index k = backbone_out.rows();
    Mat<T> hx = w_x.forward(backbone_out);
    Mat<T> hy = w_y[static_cast<std::size_t>(subject)].forward(responses);
    Mat<T> h(2 * k, d_h);
    h.topRows(k) = hx;
    h.bottomRows(k) = hy;
    Mat<T> z = g3.forward(relu2.forward(bn2.forward(
        g2.forward(relu1.forward(bn1.forward(g1.forward(h)))))));
    *z_x = z.topRows(k);
    *z_y = z.bottomRows(k);
    return z;
  }

  /// Backward companion of forward_train; returns d(loss)/d(backbone_out).
  Mat<T> backward_train(const Mat<T>& dz_x, const Mat<T>& dz_y, int subject) {
    const Index k = dz_x.rows();
    Mat<T> dz(2 * k, d_z);
    dz.topRows(k) = dz_x;
    dz.bottomRows(k) = dz_y;
    Mat<T> dh = g1.backward(
        bn1.backward(relu1.backward(g2.backward(bn2.backward(relu2.backward(
            g3.backward(dz)))))));
    w_y[static_cast<std::size_t>(subject)].backward(dh.bottomRows(k),
                                                    /*need_dx=*/false);
    return w_x.backward(dh.topRows(k));
  }

  /// Evaluation-mode embeddings (batch norm uses running statistics).
  Mat<T> embed(const Mat<T>& h_in) const {
    Mat<T> a = g1.apply(h_in);
    a = bn1.infer(a);
    a = a.cwiseMax(T(0));
    a = g2.apply(a);
    a = bn2.infer(a);
    a = a.cwiseMax(T(0));
    return g3.apply(a);
  }
  Mat<T> embed_images(const Mat<T>& backbone_out) const {
    return embed(backbone_out * w_x.weight.transpose());
  }
  Mat<T> embed_responses(const Mat<T>& responses, int subject) const {
    return embed(responses * w_y[static_cast<std::size_t>(subject)].weight.transpose());
  }

  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    for (auto p : w_x.params()) out.push_back(p);
    for (auto& wy : w_y)
      for (auto p : wy.params()) out.push_back(p);
    for (auto* lin : {&g1, &g2, &g3})
      for (auto p : lin->params()) out.push_back(p);
    for (auto* bn : {&bn1, &bn2})
      for (auto p : bn->params()) out.push_back(p);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Training configuration and log
// ---------------------------------------------------------------------------

struct CLConfig {
  int batch_size = 64;  // K
  int epochs = 10;
  double lr = 2.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double tau = 0.3;
  std::uint64_t seed = 0;
  bool pooled = false;
  std::string dh_mode = "avg";  // pooled head sizing: "avg" or "constant"
  int dh_constant = 0;
  bool log_validation = false;

  void validate() const {
    require(batch_size >= 2, "CLConfig: batch size must be >= 2");
    require(epochs >= 0, "CLConfig: epochs must be >= 0");
    require(lr > 0 && tau > 0, "CLConfig: lr and tau must be positive");
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_loss;  // empty unless a holdout is configured
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  int batches_per_epoch = 0;
};

// ---------------------------------------------------------------------------
// Contrastive fine-tuning (subject-specific and pooled share this core)
// ---------------------------------------------------------------------------

namespace detail {

inline MatF gather_images(const StimulusSet& stim, const std::vector<int>& idx) {
  MatF block(static_cast<Index>(idx.size()), stim.images.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    block.row(static_cast<Index>(i)) = stim.images.row(idx[i]);
  return normalize_images<float>(block, stim.height, stim.width, stim.norm_mean,
                                 stim.norm_std);
}

inline MatF gather_rows(const MatF& m, const std::vector<int>& idx) {
  MatF out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.row(static_cast<Index>(i)) = m.row(idx[i]);
  return out;
}

inline std::pair<ProjectionHeads<float>, TrainLog> contrastive_train(
    BackboneF& model, const std::vector<const SubjectDataset*>& subjects,
    const std::string& roi_name, const CLConfig& cfg, Index d_h, Index d_z) {
  cfg.validate();
  require(!subjects.empty(), "contrastive_train: no subjects");
  std::vector<Index> voxel_dims;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> train_sets;
  for (const auto* ds : subjects) {
    const auto& roi = ds->roi(roi_name);  // throws when missing
    voxel_dims.push_back(roi.voxels());
    ids.push_back(ds->subject_id);
    train_sets.push_back(ds->train_indices());
    require(!train_sets.back().empty(),
            "contrastive_train: empty training set for " + ds->subject_id);
  }

  auto heads = ProjectionHeads<float>::make(
      model.output_dim(), voxel_dims, ids, d_h, d_z,
      static_cast<float>(cfg.tau), cfg.seed);
  heads.set_training(true);

  std::vector<nn::ParamRef<float>> params = model.params();
  for (auto p : heads.params()) params.push_back(p);
  nn::Adam<float> opt(params, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});

  TrainLog log;
  log.seed = cfg.seed;
  const auto t_start = std::chrono::steady_clock::now();

  auto holdout_loss = [&]() -> double {
    heads.set_training(false);
    double total = 0.0;
    int count = 0;
    for (std::size_t s = 0; s < subjects.size(); ++s) {
      const auto& ds = *subjects[s];
      auto test = ds.test_indices();
      if (static_cast<int>(test.size()) < cfg.batch_size) continue;
      for (std::size_t start = 0;
           start + static_cast<std::size_t>(cfg.batch_size) <= test.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<int> idx(test.begin() + static_cast<long>(start),
                             test.begin() + static_cast<long>(start) + cfg.batch_size);
        MatF x = gather_images(ds.stimuli, idx);
        MatF a = model.forward(x);
        MatF zx = heads.embed_images(a);
        MatF zy = heads.embed_responses(
            gather_rows(ds.roi(roi_name).responses, idx), static_cast<int>(s));
        total += contrastive_loss<float>(zx, zy, heads.tau);
        ++count;
      }
    }
    heads.set_training(true);
    return count > 0 ? total / count : 0.0;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(subjects.size());
    for (std::size_t s = 0; s < order.size(); ++s) order[s] = s;
    Rng order_rng(seed_combine(seed_tag(cfg.seed, "subject-order"),
                               static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double total = 0.0;
    int batches = 0;
    for (std::size_t s : order) {
      const auto& ds = *subjects[s];
      const auto& roi = ds.roi(roi_name);
      const auto& train = train_sets[s];
      auto batch_plan = sample_batches(
          static_cast<int>(train.size()), cfg.batch_size,
          seed_combine(cfg.seed, static_cast<std::uint64_t>(s)), epoch);
      for (const auto& rel : batch_plan) {
        std::vector<int> idx;
        idx.reserve(rel.size());
        for (int r : rel) idx.push_back(train[static_cast<std::size_t>(r)]);
        MatF x = gather_images(ds.stimuli, idx);
        MatF y = gather_rows(roi.responses, idx);
        MatF a = model.forward_cached(x);
        MatF zx, zy;
        heads.forward_train(a, y, static_cast<int>(s), &zx, &zy);
        MatF dzx, dzy;
        const float loss =
            contrastive_loss<float>(zx, zy, heads.tau, &dzx, &dzy);
        if (!std::isfinite(loss))
          throw NumericalFailure("contrastive_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(batches));
        opt.zero_grad();
        MatF da = heads.backward_train(dzx, dzy, static_cast<int>(s));
        model.backward(da);
        opt.step();
        total += loss;
        ++batches;
      }
    }
    log.epoch_loss.push_back(batches > 0 ? total / batches : 0.0);
    log.batches_per_epoch = batches;
    if (cfg.log_validation) log.val_loss.push_back(holdout_loss());
  }
  heads.set_training(false);
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return {std::move(heads), std::move(log)};
}

}  // namespace detail

/// Subject-specific contrastive fine-tuning; mutates `model` in place and
/// returns the trained heads and loss log.
inline std::pair<ProjectionHeads<float>, TrainLog> cl_finetune(
    BackboneF& model, const SubjectDataset& dataset, const std::string& roi_name,
    const CLConfig& cfg, const std::string& encode_tap = "") {
  const auto& roi = dataset.roi(roi_name);
  auto out = detail::contrastive_train(model, {&dataset}, roi_name, cfg,
                                       default_dh(roi.voxels()),
                                       default_dz(roi.voxels()));
  model.provenance().kind = ProvenanceKind::cl_tuned;
  model.provenance().subject_id = dataset.subject_id;
  model.provenance().roi_name = roi_name;
  model.provenance().seed = cfg.seed;
  if (!encode_tap.empty()) model.provenance().encode_tap = encode_tap;
  return out;
}

/// Pooled fine-tuning: shared backbone, W_x and g; per-subject W_y. Batches
/// never mix subjects; each epoch passes over every subject's training set.
inline std::pair<ProjectionHeads<float>, TrainLog> pooled_finetune(
    BackboneF& model, const std::vector<const SubjectDataset*>& subjects,
    const std::string& roi_name, const CLConfig& cfg,
    const std::string& encode_tap = "") {
  require(!subjects.empty(), "pooled_finetune: no subjects");
  Index d_h = 0;
  if (cfg.dh_mode == "constant") {
    require(cfg.dh_constant >= 1, "pooled_finetune: dh_constant must be >= 1");
    d_h = cfg.dh_constant;
  } else if (cfg.dh_mode == "avg") {
    double sum = 0;
    for (const auto* ds : subjects)
      sum += static_cast<double>(ds->roi(roi_name).voxels());
    d_h = std::max<Index>(
        1, static_cast<Index>(std::lround(sum / static_cast<double>(subjects.size()))));
  } else {
    throw InvalidInput("pooled_finetune: unknown dh_mode " + cfg.dh_mode);
  }
  const Index d_z = std::max<Index>(1, d_h / 4);
  auto out = detail::contrastive_train(model, subjects, roi_name, cfg, d_h, d_z);
  model.provenance().kind = ProvenanceKind::pooled;
  model.provenance().subject_id = "pooled";
  model.provenance().roi_name = roi_name;
  model.provenance().seed = cfg.seed;
  if (!encode_tap.empty()) model.provenance().encode_tap = encode_tap;
  return out;
}

/// Head sizing override used by tests that reduce pooled training to the
/// subject-specific base case.
inline std::pair<ProjectionHeads<float>, TrainLog> contrastive_train_with_dims(
    BackboneF& model, const std::vector<const SubjectDataset*>& subjects,
    const std::string& roi_name, const CLConfig& cfg, Index d_h, Index d_z) {
  return detail::contrastive_train(model, subjects, roi_name, cfg, d_h, d_z);
}

// ---------------------------------------------------------------------------
// Regression-tuned baseline
// ---------------------------------------------------------------------------

struct RegressionConfig {
  int batch_size = 64;
  int epochs = 25;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;  // train only the output affine map
};

/// Mean-squared-error fine-tuning through a trainable affine map from the
/// final tap to the voxels. The map itself is discarded afterwards; encoding
/// always goes back through the tap -> PCA -> ridge pipeline.
inline TrainLog regression_finetune(BackboneF& model, const SubjectDataset& dataset,
                                    const std::string& roi_name,
                                    const RegressionConfig& cfg,
                                    const std::string& encode_tap = "") {
  require(cfg.epochs >= 0 && cfg.batch_size >= 1, "regression_finetune: bad schedule");
  const auto& roi = dataset.roi(roi_name);
  const auto train = dataset.train_indices();
  require(!train.empty(), "regression_finetune: empty training set");
  require(cfg.batch_size <= static_cast<int>(train.size()),
          "regression_finetune: batch size exceeds training set");

  Rng rng(seed_tag(cfg.seed, "regression-head"));
  nn::Linear<float> out_map(model.output_dim(), roi.voxels(), rng);

  std::vector<nn::ParamRef<float>> params;
  if (!cfg.freeze_backbone) params = model.params();
  for (auto p : out_map.params()) params.push_back(p);
  nn::Adam<float> opt(params, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});

  TrainLog log;
  log.seed = cfg.seed;
  const auto t_start = std::chrono::steady_clock::now();
  const float vdim = static_cast<float>(roi.voxels());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batch_plan = sample_batches(static_cast<int>(train.size()),
                                     cfg.batch_size, cfg.seed, epoch);
    double total = 0.0;
    int batches = 0;
    for (const auto& rel : batch_plan) {
      std::vector<int> idx;
      idx.reserve(rel.size());
      for (int r : rel) idx.push_back(train[static_cast<std::size_t>(r)]);
      MatF x = detail::gather_images(dataset.stimuli, idx);
      MatF y = detail::gather_rows(roi.responses, idx);
      MatF a = cfg.freeze_backbone ? model.forward(x) : model.forward_cached(x);
      MatF pred = out_map.forward(a);
      MatF resid = pred - y;
      const float loss = resid.squaredNorm() /
                         (static_cast<float>(resid.rows()) * vdim);
      if (!std::isfinite(loss))
        throw NumericalFailure("regression_finetune: non-finite loss at epoch " +
                               std::to_string(epoch));
      opt.zero_grad();
      MatF dpred = 2.0f * resid / (static_cast<float>(resid.rows()) * vdim);
      MatF da = out_map.backward(dpred, /*need_dx=*/!cfg.freeze_backbone);
      if (!cfg.freeze_backbone) model.backward(da);
      opt.step();
      total += loss;
      ++batches;
    }
    log.epoch_loss.push_back(batches > 0 ? total / batches : 0.0);
    log.batches_per_epoch = batches;
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  model.provenance().kind = ProvenanceKind::reg_tuned;
  model.provenance().subject_id = dataset.subject_id;
  model.provenance().roi_name = roi_name;
  model.provenance().seed = cfg.seed;
  if (!encode_tap.empty()) model.provenance().encode_tap = encode_tap;
  return log;
}

// ---------------------------------------------------------------------------
// Heads checkpoint
// ---------------------------------------------------------------------------

inline void save_heads(const std::filesystem::path& path,
                       ProjectionHeads<float>& heads) {
  json header;
  header["format"] = "neuroenc-heads";
  header["version"] = 1;
  header["tau"] = heads.tau;
  header["d_h"] = heads.d_h;
  header["d_z"] = heads.d_z;
  header["subjects"] = heads.subject_ids;
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write heads checkpoint: " + path.string());
  detail::write_checkpoint_header(os, header);
  neb::write(os, heads.w_x.weight);
  for (auto& wy : heads.w_y) neb::write(os, wy.weight);
  for (auto* lin : {&heads.g1, &heads.g2, &heads.g3}) {
    neb::write(os, lin->weight);
    neb::write(os, lin->bias);
  }
  for (auto* bn : {&heads.bn1, &heads.bn2}) {
    neb::write(os, bn->gamma);
    neb::write(os, bn->beta);
    MatF rm = bn->running_mean.transpose();
    MatF rv = bn->running_var.transpose();
    neb::write(os, rm);
    neb::write(os, rv);
  }
}

inline ProjectionHeads<float> load_heads(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("heads checkpoint not found: " + path.string());
  json header = detail::read_checkpoint_header(is);
  require(header.at("format") == "neuroenc-heads",
          "checkpoint: not a heads file");
  ProjectionHeads<float> h;
  h.tau = header.at("tau").get<float>();
  h.d_h = header.at("d_h").get<Index>();
  h.d_z = header.at("d_z").get<Index>();
  h.subject_ids = header.at("subjects").get<std::vector<std::string>>();

  Rng dummy(0);
  MatF wx = neb::read(is);
  h.w_x = nn::Linear<float>(wx.cols(), wx.rows(), dummy, /*with_bias=*/false);
  h.w_x.weight = wx;
  for (std::size_t s = 0; s < h.subject_ids.size(); ++s) {
    MatF wy = neb::read(is);
    nn::Linear<float> lin(wy.cols(), wy.rows(), dummy, /*with_bias=*/false);
    lin.weight = wy;
    h.w_y.push_back(std::move(lin));
  }
  for (auto* lin : {&h.g1, &h.g2, &h.g3}) {
    MatF w = neb::read(is);
    MatF b = neb::read(is);
    *lin = nn::Linear<float>(w.cols(), w.rows(), dummy);
    lin->weight = w;
    lin->bias = b;
  }
  for (auto* bn : {&h.bn1, &h.bn2}) {
    *bn = nn::BatchNorm1d<float>(h.d_h);
    bn->gamma = neb::read(is);
    bn->beta = neb::read(is);
    MatF rm = neb::read(is);
    MatF rv = neb::read(is);
    bn->running_mean = rm.transpose();
    bn->running_var = rv.transpose();
    bn->set_training(false);
  }
  return h;
}

}  // namespace neuroenc
