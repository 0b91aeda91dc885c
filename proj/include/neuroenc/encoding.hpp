#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "neuroenc/backbone.hpp"
#include "neuroenc/common.hpp"
#include "neuroenc/dataset.hpp"
#include "neuroenc/rng.hpp"

namespace neuroenc {

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PCABasis {
  VecD mean;            // feature mean, length D
  MatD components;      // D x d, orthonormal columns, descending variance
  VecD explained_variance;  // eigenvalues of the sample covariance, length d

  Index input_dim() const { return components.rows(); }
  Index dim() const { return components.cols(); }

  MatD project(const MatD& features) const {
    return (features.rowwise() - mean.transpose()) * components;
  }
};

/// Thin-SVD PCA of the centered features. Equivalent Gram-matrix route is
/// used when D > n. Retains d_eff = min(d, rank) components; the sign of each
/// component is fixed by making its largest-magnitude entry positive.
inline PCABasis fit_pca(const MatD& features, Index d) {
  const Index n = features.rows(), dim = features.cols();
  require(n >= 2, "fit_pca: need at least 2 samples");
  require(d >= 1, "fit_pca: d must be >= 1");
  require(all_finite(features), "fit_pca: non-finite input");

  PCABasis basis;
  basis.mean = features.colwise().mean();
  MatD centered = features.rowwise() - basis.mean.transpose();

  VecD eigvals;
  MatD comps;
  if (dim <= n) {
    MatD cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<MatD> es(cov);
    // ascending order from Eigen; flip to descending
    eigvals = es.eigenvalues().reverse();
    comps = es.eigenvectors().rowwise().reverse();
  } else {
    MatD gram = centered * centered.transpose() / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<MatD> es(gram);
    eigvals = es.eigenvalues().reverse();
    MatD u = es.eigenvectors().rowwise().reverse();
    comps.resize(dim, eigvals.size());
    for (Index j = 0; j < eigvals.size(); ++j) {
      if (eigvals(j) > 0) {
        comps.col(j) = centered.transpose() * u.col(j) /
                       std::sqrt(eigvals(j) * static_cast<double>(n - 1));
      } else {
        comps.col(j).setZero();
      }
    }
  }

  const double tol = std::max(eigvals.size() > 0 ? eigvals(0) : 0.0, 0.0) *
                         static_cast<double>(std::max(n, dim)) * 1e-12 +
                     1e-300;
  Index rank = 0;
  while (rank < eigvals.size() && eigvals(rank) > tol) ++rank;
  const Index d_eff = std::min(d, rank);
  require(d_eff >= 1, "fit_pca: input has rank 0");

  basis.components = comps.leftCols(d_eff);
  basis.explained_variance = eigvals.head(d_eff);
  for (Index j = 0; j < d_eff; ++j) {
    Index arg = 0;
    basis.components.col(j).cwiseAbs().maxCoeff(&arg);
    if (basis.components(arg, j) < 0) basis.components.col(j) *= -1.0;
  }
  return basis;
}

// ---------------------------------------------------------------------------
// Ridge
// ---------------------------------------------------------------------------

struct RidgeModel {
  MatD weights;  // v x d
  VecD bias;     // v
  double alpha = 0.0;
};

/// Multi-output ridge with unpenalized bias, solved in closed form on the
/// centered system (A_c^T A_c + alpha I) B^T = A_c^T Y_c.
inline RidgeModel fit_ridge(const MatD& features, const MatD& responses,
                            double alpha) {
  const Index n = features.rows(), d = features.cols();
  require(alpha >= 0.0, "fit_ridge: alpha must be >= 0");
  require(n >= 2, "fit_ridge: need at least 2 samples");
  require(responses.rows() == n, "fit_ridge: row count mismatch");
  require(all_finite(features) && all_finite(responses),
          "fit_ridge: non-finite input");

  VecD fmean = features.colwise().mean();
  VecD rmean = responses.colwise().mean();
  MatD fc = features.rowwise() - fmean.transpose();
  MatD rc = responses.rowwise() - rmean.transpose();

  MatD gram = fc.transpose() * fc;
  if (alpha == 0.0) {
    Eigen::SelfAdjointEigenSolver<MatD> es(gram);
    const double maxev = es.eigenvalues().maxCoeff();
    require(es.eigenvalues().minCoeff() >
                std::max(maxev, 1.0) * static_cast<double>(d) * 1e-12,
            "fit_ridge: singular system with alpha = 0 (rank-deficient features)");
  }
  gram.diagonal().array() += alpha;
  Eigen::LDLT<MatD> solver(gram);
  MatD bt = solver.solve(fc.transpose() * rc);  // d x v
  RidgeModel model;
  model.weights = bt.transpose();
  model.bias = rmean - model.weights * fmean;
  model.alpha = alpha;
  require(all_finite(model.weights) && all_finite(model.bias),
          "fit_ridge: non-finite solution");
  return model;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct CorrelationScore {
  VecD rho;        // per voxel
  double rho_bar;  // mean over voxels
};

/// Per-voxel Pearson correlation; zero-variance columns on either side score
/// 0 by convention.
inline CorrelationScore score_correlation(const MatD& pred, const MatD& truth) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(),
          "score_correlation: shape mismatch");
  require(pred.rows() >= 2, "score_correlation: need at least 2 samples");
  const Index n = pred.rows(), v = pred.cols();
  CorrelationScore s;
  s.rho.resize(v);
  for (Index k = 0; k < v; ++k) {
    const double pm = pred.col(k).mean(), tm = truth.col(k).mean();
    VecD pc = pred.col(k).array() - pm;
    VecD tc = truth.col(k).array() - tm;
    const double pv = pc.squaredNorm(), tv = tc.squaredNorm();
    s.rho(k) = (pv <= 0.0 || tv <= 0.0)
                   ? 0.0
                   : pc.dot(tc) / std::sqrt(pv * tv);
  }
  s.rho_bar = v > 0 ? s.rho.mean() : 0.0;
  (void)n;
  return s;
}

/// Percentage of voxels where a strictly beats b.
inline double percent_improved(const VecD& rho_a, const VecD& rho_b) {
  require(rho_a.size() == rho_b.size(), "percent_improved: length mismatch");
  require(rho_a.size() > 0, "percent_improved: empty input");
  Index wins = 0;
  for (Index k = 0; k < rho_a.size(); ++k)
    if (rho_a(k) > rho_b(k)) ++wins;
  return 100.0 * static_cast<double>(wins) / static_cast<double>(rho_a.size());
}

// ---------------------------------------------------------------------------
// Encoding pipeline: backbone tap -> PCA -> ridge
// ---------------------------------------------------------------------------

struct EncodingPipeline {
  std::string subject_id;
  std::string roi_name;
  std::string tap;
  PCABasis pca;
  RidgeModel ridge;

  void check_dims() const {
    require(pca.dim() == ridge.weights.cols(),
            "EncodingPipeline: PCA dim does not match ridge weights");
  }
};

inline MatD predict(const EncodingPipeline& pipeline, Backbone<float>& model,
                    const StimulusSet& stimuli) {
  pipeline.check_dims();
  MatF feats = extract_features(model, stimuli, pipeline.tap);
  require(feats.cols() == pipeline.pca.input_dim(),
          "predict: feature dimension mismatch");
  MatD reduced = pipeline.pca.project(feats.cast<double>());
  return (reduced * pipeline.ridge.weights.transpose()).rowwise() +
         pipeline.ridge.bias.transpose();
}

/// Fit the three-stage model on the training split of `dataset` for one ROI.
inline EncodingPipeline fit_encoding_pipeline(Backbone<float>& model,
                                              const SubjectDataset& dataset,
                                              const std::string& roi_name,
                                              const std::string& tap, Index d,
                                              double alpha) {
  const auto& roi = dataset.roi(roi_name);
  const auto train = dataset.train_indices();
  require(!train.empty(), "fit_encoding_pipeline: empty training split");
  StimulusSet train_stim = dataset.stimuli.subset(train);
  MatF feats = extract_features(model, train_stim, tap);
  MatD featsd = feats.cast<double>();
  EncodingPipeline p;
  p.subject_id = dataset.subject_id;
  p.roi_name = roi_name;
  p.tap = tap;
  p.pca = fit_pca(featsd, d);
  MatD reduced = p.pca.project(featsd);
  MatD resp(train.size(), roi.voxels());
  for (std::size_t i = 0; i < train.size(); ++i)
    resp.row(static_cast<Index>(i)) = roi.responses.row(train[i]).cast<double>();
  p.ridge = fit_ridge(reduced, resp, alpha);
  return p;
}

/// Held-out evaluation of a fitted pipeline.
inline CorrelationScore evaluate_pipeline(const EncodingPipeline& pipeline,
                                          Backbone<float>& model,
                                          const SubjectDataset& dataset) {
  const auto test = dataset.test_indices();
  require(test.size() >= 2, "evaluate_pipeline: need at least 2 test images");
  StimulusSet test_stim = dataset.stimuli.subset(test);
  MatD pred = predict(pipeline, model, test_stim);
  const auto& roi = dataset.roi(pipeline.roi_name);
  MatD truth(test.size(), roi.voxels());
  for (std::size_t i = 0; i < test.size(); ++i)
    truth.row(static_cast<Index>(i)) = roi.responses.row(test[i]).cast<double>();
  return score_correlation(pred, truth);
}

// ---------------------------------------------------------------------------
// Joint layer/penalty cross-validation
// ---------------------------------------------------------------------------

struct CVResult {
  std::vector<std::string> layers;
  std::vector<double> alphas;
  MatD scores;  // layers x alphas, mean held-fold rho_bar
  std::string selected_layer;
  double selected_alpha = 0.0;
  int folds = 0;
};

/// The paper-default penalty grid 10^-1 ... 10^7.
inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int e = -1; e <= 7; ++e) g.push_back(std::pow(10.0, e));
  return g;
}

/// Joint selection of tap layer and ridge penalty by k-fold CV on the
/// training split. PCA is refit inside each fold on that fold's training
/// portion only. Ties break toward the earlier layer, then the smaller alpha.
inline CVResult select_hyperparams(Backbone<float>& model,
                                   const SubjectDataset& dataset,
                                   const std::string& roi_name,
                                   const std::vector<std::string>& layers,
                                   const std::vector<double>& alphas, Index d,
                                   int folds, std::uint64_t seed) {
  require(!layers.empty() && !alphas.empty(), "select_hyperparams: empty grid");
  require(folds >= 2, "select_hyperparams: need at least 2 folds");
  const auto& roi = dataset.roi(roi_name);
  auto train = dataset.train_indices();
  require(static_cast<int>(train.size()) >= folds,
          "select_hyperparams: training set smaller than fold count");

  Rng rng(seed_tag(seed, "cv-folds"));
  rng.shuffle(train);
  std::vector<int> fold_of(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    fold_of[i] = static_cast<int>(i % static_cast<std::size_t>(folds));

  CVResult result;
  result.layers = layers;
  result.alphas = alphas;
  result.folds = folds;
  result.scores = MatD::Zero(static_cast<Index>(layers.size()),
                             static_cast<Index>(alphas.size()));

  StimulusSet train_stim = dataset.stimuli.subset(train);
  MatD resp(train.size(), roi.voxels());
  for (std::size_t i = 0; i < train.size(); ++i)
    resp.row(static_cast<Index>(i)) = roi.responses.row(train[i]).cast<double>();

  for (std::size_t li = 0; li < layers.size(); ++li) {
    MatF feats = extract_features(model, train_stim, layers[li]);
    MatD featsd = feats.cast<double>();
    for (int f = 0; f < folds; ++f) {
      std::vector<Index> fit_rows, val_rows;
      for (std::size_t i = 0; i < train.size(); ++i)
        (fold_of[i] == f ? val_rows : fit_rows).push_back(static_cast<Index>(i));
      MatD fit_x(fit_rows.size(), featsd.cols()), val_x(val_rows.size(), featsd.cols());
      MatD fit_y(fit_rows.size(), resp.cols()), val_y(val_rows.size(), resp.cols());
      for (std::size_t i = 0; i < fit_rows.size(); ++i) {
        fit_x.row(static_cast<Index>(i)) = featsd.row(fit_rows[i]);
        fit_y.row(static_cast<Index>(i)) = resp.row(fit_rows[i]);
      }
      for (std::size_t i = 0; i < val_rows.size(); ++i) {
        val_x.row(static_cast<Index>(i)) = featsd.row(val_rows[i]);
        val_y.row(static_cast<Index>(i)) = resp.row(val_rows[i]);
      }
      PCABasis pca = fit_pca(fit_x, d);
      MatD fit_r = pca.project(fit_x);
      MatD val_r = pca.project(val_x);
      for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        RidgeModel ridge = fit_ridge(fit_r, fit_y, alphas[ai]);
        MatD pred = (val_r * ridge.weights.transpose()).rowwise() +
                    ridge.bias.transpose();
        result.scores(static_cast<Index>(li), static_cast<Index>(ai)) +=
            score_correlation(pred, val_y).rho_bar / folds;
      }
    }
  }

  Index best_l = 0, best_a = 0;
  for (Index li = 0; li < result.scores.rows(); ++li)
    for (Index ai = 0; ai < result.scores.cols(); ++ai)
      if (result.scores(li, ai) > result.scores(best_l, best_a)) {
        best_l = li;
        best_a = ai;
      }
  result.selected_layer = layers[static_cast<std::size_t>(best_l)];
  result.selected_alpha = alphas[static_cast<std::size_t>(best_a)];
  return result;
}

}  // namespace neuroenc
