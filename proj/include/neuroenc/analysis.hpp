#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "neuroenc/backbone.hpp"
#include "neuroenc/special.hpp"
#include "neuroenc/tuning.hpp"

namespace neuroenc {

// ---------------------------------------------------------------------------
// Linear probes (frozen-feature multinomial logistic regression)
// ---------------------------------------------------------------------------

struct ProbeModel {
  std::string tap;      // penultimate backbone tap
  MatD weights;         // C x d
  VecD bias;            // C
  int num_classes = 0;

  MatD decision_values(const MatD& features) const {
    return (features * weights.transpose()).rowwise() + bias.transpose();
  }
};

namespace detail {

struct LogisticObjective {
  const MatD& x;  // n x d
  const std::vector<int>& labels;
  double l2;

  double value_and_grad(const MatD& w, const VecD& b, MatD* dw, VecD* db) const {
    const Index n = x.rows();
    MatD logits = (x * w.transpose()).rowwise() + b.transpose();
    MatD p(logits.rows(), logits.cols());
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double m = logits.row(i).maxCoeff();
      Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
      const double z = e.sum();
      p.row(i) = (e / z).matrix();
      loss -= logits(i, labels[static_cast<std::size_t>(i)]) - m - std::log(z);
    }
    loss /= static_cast<double>(n);
    loss += 0.5 * l2 * w.squaredNorm();
    if (dw) {
      MatD resid = p;
      for (Index i = 0; i < n; ++i)
        resid(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
      *dw = resid.transpose() * x / static_cast<double>(n) + l2 * w;
      *db = resid.colwise().sum() / static_cast<double>(n);
    }
    return loss;
  }
};

/// Full-batch gradient descent with Armijo backtracking on the convex
/// objective; converges to the optimum the reference solvers find.
inline void fit_logistic(const MatD& x, const std::vector<int>& labels, int classes,
                         double l2, MatD& w, VecD& b, int max_iter = 600,
                         double grad_tol = 1e-7) {
  w = MatD::Zero(classes, x.cols());
  b = VecD::Zero(classes);
  LogisticObjective obj{x, labels, l2};
  MatD dw;
  VecD db;
  double f = obj.value_and_grad(w, b, &dw, &db);
  double step = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    const double gnorm2 = dw.squaredNorm() + db.squaredNorm();
    if (std::sqrt(gnorm2) < grad_tol) break;
    step *= 2.0;  // allow recovery after conservative iterations
    double f_new = 0.0;
    MatD w_new;
    VecD b_new;
    for (int ls = 0; ls < 60; ++ls) {
      w_new = w - step * dw;
      b_new = b - step * db;
      f_new = obj.value_and_grad(w_new, b_new, nullptr, nullptr);
      if (f_new <= f - 1e-4 * step * gnorm2) break;
      step *= 0.5;
    }
    w = std::move(w_new);
    b = std::move(b_new);
    f = f_new;
    obj.value_and_grad(w, b, &dw, &db);
  }
}

}  // namespace detail

inline MatD probe_features(BackboneF& model, const StimulusSet& stim,
                           const std::string& tap) {
  return extract_features(model, stim, tap).cast<double>();
}

struct ProbeResult {
  ProbeModel probe;
  double accuracy = 0.0;  // on the test split
};

/// Fits a multinomial logistic probe on penultimate-tap features of the
/// training images; the backbone stays frozen throughout.
inline ProbeResult linear_probe(BackboneF& model, const StimulusSet& labeled,
                                const std::vector<int>& train_idx,
                                const std::vector<int>& test_idx,
                                double l2 = 1e-4) {
  require(labeled.labeled(), "linear_probe: unlabeled stimulus set");
  require(!train_idx.empty() && !test_idx.empty(),
          "linear_probe: empty split");
  std::vector<int> train_labels;
  for (int i : train_idx) train_labels.push_back(labeled.labels[static_cast<std::size_t>(i)]);
  const int distinct = static_cast<int>(
      std::set<int>(train_labels.begin(), train_labels.end()).size());
  require(distinct >= 2, "linear_probe: single-class training set");

  ProbeResult out;
  out.probe.tap = model.penultimate_tap();
  out.probe.num_classes = labeled.num_classes;

  StimulusSet train_stim = labeled.subset(train_idx);
  MatD train_x = probe_features(model, train_stim, out.probe.tap);
  detail::fit_logistic(train_x, train_labels, labeled.num_classes, l2,
                       out.probe.weights, out.probe.bias);

  StimulusSet test_stim = labeled.subset(test_idx);
  MatD test_x = probe_features(model, test_stim, out.probe.tap);
  MatD scores = out.probe.decision_values(test_x);
  Index correct = 0;
  for (Index i = 0; i < scores.rows(); ++i) {
    Index pred;
    scores.row(i).maxCoeff(&pred);
    if (pred == labeled.labels[static_cast<std::size_t>(test_idx[static_cast<std::size_t>(i)])])
      ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(scores.rows());
  return out;
}

/// Class probability table of a probe over a stimulus set; rows sum to 1.
inline MatD probe_probabilities(BackboneF& model, const ProbeModel& probe,
                                const StimulusSet& stim) {
  MatD x = probe_features(model, stim, probe.tap);
  MatD logits = probe.decision_values(x);
  MatD p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Model landscapes
// ---------------------------------------------------------------------------

inline constexpr double kBhattacharyyaFloor = 1e-12;

/// D_{m,m'} = mean_i -log max(B(p_i^m, p_i^m'), floor) with
/// B(p, q) = sum_k sqrt(p_k q_k). Symmetric with an exactly zero diagonal.
inline MatD bhattacharyya_dissimilarity(const std::vector<MatD>& tables) {
  const Index m = static_cast<Index>(tables.size());
  require(m >= 1, "bhattacharyya: no tables");
  const Index n = tables[0].rows(), classes = tables[0].cols();
  for (const auto& t : tables) {
    require(t.rows() == n && t.cols() == classes,
            "bhattacharyya: table shape mismatch");
    require((t.array() >= -1e-9).all(), "bhattacharyya: negative probability");
    for (Index i = 0; i < n; ++i)
      require(std::abs(t.row(i).sum() - 1.0) <= 1e-6,
              "bhattacharyya: row not normalized");
  }
  MatD d = MatD::Zero(m, m);
  for (Index a = 0; a < m; ++a) {
    for (Index b = a + 1; b < m; ++b) {
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double coeff =
            (tables[static_cast<std::size_t>(a)].row(i).array().max(0.0) *
             tables[static_cast<std::size_t>(b)].row(i).array().max(0.0))
                .sqrt()
                .sum();
        acc += -std::log(std::clamp(coeff, kBhattacharyyaFloor, 1.0));
      }
      d(a, b) = d(b, a) = acc / static_cast<double>(n);
    }
  }
  return d;
}

/// Classical MDS: eigendecompose -1/2 H D H and scale eigenvectors by
/// sqrt(|eigenvalue|), taking the eigenpairs of largest magnitude. The sign
/// of each axis is fixed by making its largest-magnitude coordinate positive.
inline MatD mds_embed(const MatD& d, Index dims = 2) {
  const Index m = d.rows();
  require(d.cols() == m, "mds_embed: dissimilarity matrix must be square");
  require(dims >= 1, "mds_embed: dims must be >= 1");
  for (Index i = 0; i < m; ++i) {
    require(d(i, i) == 0.0, "mds_embed: nonzero diagonal");
    for (Index j = 0; j < m; ++j)
      require(std::abs(d(i, j) - d(j, i)) <= 1e-12 * (1.0 + std::abs(d(i, j))),
              "mds_embed: asymmetric input");
  }
  MatD h = MatD::Identity(m, m) - MatD::Constant(m, m, 1.0 / static_cast<double>(m));
  MatD b = -0.5 * h * d * h;
  b = 0.5 * (b + b.transpose());  // enforce symmetry against rounding
  Eigen::SelfAdjointEigenSolver<MatD> es(b);
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) {
    return std::abs(es.eigenvalues()(i)) > std::abs(es.eigenvalues()(j));
  });
  const Index keep = std::min(dims, m);
  MatD coords = MatD::Zero(m, dims);
  for (Index p = 0; p < keep; ++p) {
    const Index e = order[static_cast<std::size_t>(p)];
    coords.col(p) =
        es.eigenvectors().col(e) * std::sqrt(std::abs(es.eigenvalues()(e)));
    Index arg = 0;
    coords.col(p).cwiseAbs().maxCoeff(&arg);
    if (coords(arg, p) < 0) coords.col(p) *= -1.0;
  }
  return coords;
}

/// Mean silhouette over points with integer group labels (Euclidean).
inline double silhouette_score(const MatD& coords, const std::vector<int>& labels) {
  const Index n = coords.rows();
  require(static_cast<Index>(labels.size()) == n, "silhouette: label mismatch");
  auto dist = [&](Index i, Index j) {
    return (coords.row(i) - coords.row(j)).norm();
  };
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double a = 0.0;
    int a_count = 0;
    std::map<int, std::pair<double, int>> other;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        a += dist(i, j);
        ++a_count;
      } else {
        auto& o = other[labels[static_cast<std::size_t>(j)]];
        o.first += dist(i, j);
        ++o.second;
      }
    }
    require(a_count > 0 && !other.empty(),
            "silhouette: each group needs >= 2 members and >= 2 groups");
    a /= a_count;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [_, o] : other) b = std::min(b, o.first / o.second);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Mutual-information lower bounds
// ---------------------------------------------------------------------------

struct MIEstimate {
  double value_bits = 0.0;
  int k = 0;
  double ceiling_bits = 0.0;  // log2(K)
  int batches = 0;
  std::vector<double> per_batch_bits;
};

/// Noise-contrastive MI lower bound, evaluated on held-out data with the
/// heads in evaluation mode. Unlike the training loss the denominator
/// includes the positive term, so every batch value is capped at log2(K).
inline MIEstimate mi_lower_bound(BackboneF& model, const ProjectionHeads<float>& heads,
                                 const SubjectDataset& dataset,
                                 const std::string& roi_name, int k, int batches,
                                 std::uint64_t seed) {
  require(k >= 2, "mi_lower_bound: K must be >= 2");
  require(batches >= 1, "mi_lower_bound: need at least 1 batch");
  const auto& roi = dataset.roi(roi_name);
  auto test = dataset.test_indices();
  require(static_cast<int>(test.size()) >= k,
          "mi_lower_bound: holdout smaller than K");
  const int subject = heads.subject_index(dataset.subject_id);

  Rng rng(seed_tag(seed, "mi-batches"));
  MIEstimate est;
  est.k = k;
  est.batches = batches;
  est.ceiling_bits = std::log2(static_cast<double>(k));

  for (int bi = 0; bi < batches; ++bi) {
    std::vector<int> pick =
        rng.sample_without_replacement(static_cast<int>(test.size()), k);
    std::vector<int> idx;
    for (int p : pick) idx.push_back(test[static_cast<std::size_t>(p)]);
    MatF x = detail::gather_images(dataset.stimuli, idx);
    MatF a = model.forward(x);
    MatD zx = heads.embed_images(a).cast<double>();
    MatD zy = heads.embed_responses(detail::gather_rows(roi.responses, idx),
                                    subject)
                  .cast<double>();
    VecD nx = zx.rowwise().norm(), ny = zy.rowwise().norm();
    require(nx.minCoeff() > 0 && ny.minCoeff() > 0,
            "mi_lower_bound: zero-norm embedding");
    MatD xh = zx.array().colwise() / nx.array();
    MatD yh = zy.array().colwise() / ny.array();
    MatD omega = (xh * yh.transpose()) / static_cast<double>(heads.tau);
    double nats = 0.0;
    for (Index i = 0; i < k; ++i) {
      const double m = omega.row(i).maxCoeff();
      const double lse =
          m + std::log((omega.row(i).array() - m).exp().sum());
      nats += omega(i, i) - (lse - std::log(static_cast<double>(k)));
    }
    nats /= static_cast<double>(k);
    est.per_batch_bits.push_back(nats / std::log(2.0));
  }
  est.value_bits =
      std::accumulate(est.per_batch_bits.begin(), est.per_batch_bits.end(), 0.0) /
      static_cast<double>(batches);
  return est;
}

/// Fano lower bound on mutual information from classification accuracy under
/// a uniform class prior, clamped at zero.
inline double fano_lower_bound(double accuracy, int num_classes) {
  require(num_classes >= 2, "fano_lower_bound: need C >= 2");
  require(accuracy >= 0.0 && accuracy <= 1.0,
          "fano_lower_bound: accuracy outside [0,1]");
  const double pe = 1.0 - accuracy;
  const double bound = std::log2(static_cast<double>(num_classes)) -
                       binary_entropy_bits(pe) -
                       pe * std::log2(static_cast<double>(num_classes - 1));
  return std::max(0.0, bound);
}

// ---------------------------------------------------------------------------
// Grad-CAM salience
// ---------------------------------------------------------------------------

struct SalienceMap {
  MatD grid;     // conv-tap spatial grid, nonnegative, max-normalized
  MatD overlay;  // bilinear upsample to image size
  double probability = 0.0;  // probe probability of the requested class
};

inline MatD bilinear_upsample(const MatD& grid, Index out_h, Index out_w) {
  const Index h = grid.rows(), w = grid.cols();
  MatD out(out_h, out_w);
  for (Index y = 0; y < out_h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * h / out_h - 0.5;
    const Index y0 = std::clamp<Index>(static_cast<Index>(std::floor(fy)), 0, h - 1);
    const Index y1 = std::min(y0 + 1, h - 1);
    const double ty = std::clamp(fy - y0, 0.0, 1.0);
    for (Index x = 0; x < out_w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * w / out_w - 0.5;
      const Index x0 = std::clamp<Index>(static_cast<Index>(std::floor(fx)), 0, w - 1);
      const Index x1 = std::min(x0 + 1, w - 1);
      const double tx = std::clamp(fx - x0, 0.0, 1.0);
      out(y, x) = (1 - ty) * ((1 - tx) * grid(y0, x0) + tx * grid(y0, x1)) +
                  ty * ((1 - tx) * grid(y1, x0) + tx * grid(y1, x1));
    }
  }
  return out;
}

/// Grad-CAM at a spatial tap: channel weights are the spatial means of the
/// class-logit gradient, the map is the rectified weighted activation sum,
/// max-normalized unless all-zero.
inline SalienceMap grad_cam(BackboneF& model, const ProbeModel& probe,
                            const StimulusSet& stim, Index image_index,
                            int class_index, const std::string& conv_tap) {
  const auto& tap_info = model.tap(conv_tap);
  require(tap_info.spatial(), "grad_cam: tap has no spatial extent");
  require(class_index >= 0 && class_index < probe.num_classes,
          "grad_cam: class index out of range");
  const int conv_idx = model.tap_index(conv_tap);
  const int pen_idx = model.tap_index(probe.tap);
  require(conv_idx < pen_idx, "grad_cam: tap must precede the probe tap");

  std::vector<int> one{static_cast<int>(image_index)};
  StimulusSet single = stim.subset(one);
  MatF x = normalized_input(single);
  model.forward_cached(x);
  MatD feat = model.tap_activation(pen_idx).cast<double>();
  MatD logits = probe.decision_values(feat);
  const double m = logits.row(0).maxCoeff();
  Eigen::ArrayXd e = (logits.row(0).array() - m).exp();

  SalienceMap sm;
  sm.probability = e(class_index) / e.sum();

  MatF dfeat = probe.weights.row(class_index).cast<float>();
  model.zero_grad();
  MatF g = model.backward_from_tap(pen_idx, dfeat, conv_idx);
  model.zero_grad();

  const Index ch = tap_info.channels, h = tap_info.height, w = tap_info.width;
  const MatF& act = model.tap_activation(conv_idx);
  sm.grid = MatD::Zero(h, w);
  for (Index c = 0; c < ch; ++c) {
    double weight = 0.0;
    for (Index p = 0; p < h * w; ++p) weight += g(0, c * h * w + p);
    weight /= static_cast<double>(h * w);
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx)
        sm.grid(y, xx) += weight * act(0, c * h * w + y * w + xx);
  }
  sm.grid = sm.grid.cwiseMax(0.0);
  const double peak = sm.grid.maxCoeff();
  if (peak > 0.0) sm.grid /= peak;
  sm.overlay = bilinear_upsample(sm.grid, stim.height, stim.width);
  return sm;
}

/// Fraction of salience mass on one half of the grid; 0.5 when the map is
/// all-zero.
inline double half_mass_fraction(const MatD& grid, Hemisphere side) {
  const Index w = grid.cols();
  const double total = grid.sum();
  if (total <= 0.0) return 0.5;
  const double left = grid.leftCols(w / 2).sum();
  return side == Hemisphere::right ? (total - left) / total : left / total;
}

}  // namespace neuroenc
