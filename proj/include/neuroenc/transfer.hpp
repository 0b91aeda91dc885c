#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "neuroenc/encoding.hpp"
#include "neuroenc/special.hpp"

namespace neuroenc {

// ---------------------------------------------------------------------------
// Paired t statistics
// ---------------------------------------------------------------------------

enum class TTail { one, two };

struct StatReport {
  double t = 0.0;
  double p_raw = 1.0;
  double p_corrected = 1.0;
  double cohen_d = 0.0;
  int n = 0;
  int tests_corrected = 1;
  bool degenerate = false;  // nonzero differences with zero variance

  json to_json() const {
    return {{"t", t},
            {"p_raw", p_raw},
            {"p_corrected", p_corrected},
            {"cohen_d", cohen_d},
            {"n", n},
            {"tests_corrected", tests_corrected},
            {"degenerate", degenerate}};
  }
};

/// Classic paired t-test on a - b with Bonferroni multiply-and-clamp. The
/// one-tailed p is P(T > t). All-zero differences give t = 0 and one-tailed
/// p = 0.5; nonzero differences with zero variance are flagged degenerate
/// with p = 0.
inline StatReport paired_ttest(const std::vector<double>& a,
                               const std::vector<double>& b, TTail tail,
                               int tests = 1) {
  require(a.size() == b.size(), "paired_ttest: length mismatch");
  require(a.size() >= 2, "paired_ttest: need n >= 2");
  require(tests >= 1, "paired_ttest: tests must be >= 1");
  const int n = static_cast<int>(a.size());

  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1));

  StatReport r;
  r.n = n;
  r.tests_corrected = tests;
  if (sd == 0.0) {
    if (mean == 0.0) {
      r.t = 0.0;
      r.cohen_d = 0.0;
      r.p_raw = tail == TTail::one ? 0.5 : 1.0;
    } else {
      r.degenerate = true;
      r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
      r.cohen_d = r.t;
      r.p_raw = 0.0;
    }
  } else {
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.cohen_d = mean / sd;
    const double p_one = student_t_sf(r.t, n - 1);
    r.p_raw = tail == TTail::one ? p_one : 2.0 * std::min(p_one, 1.0 - p_one);
  }
  r.p_corrected = std::min(1.0, r.p_raw * tests);
  return r;
}

// ---------------------------------------------------------------------------
// Noise ceilings
// ---------------------------------------------------------------------------

struct NoiseCeiling {
  VecD ceiling;    // explainable variance fraction per voxel
  VecD rho_bound;  // attainable correlation upper bound, sqrt(ceiling)
};

/// Planted per-voxel ceiling for synthetic subjects; errors when the dataset
/// carries no record.
inline NoiseCeiling estimate_noise_ceiling(const SubjectDataset& dataset,
                                           const std::string& roi_name) {
  const auto& roi = dataset.roi(roi_name);
  require(roi.noise_ceiling.size() == roi.voxels(),
          "estimate_noise_ceiling: dataset has no planted ceiling for " +
              roi_name);
  NoiseCeiling nc;
  nc.ceiling = roi.noise_ceiling.cast<double>();
  nc.rho_bound = nc.ceiling.array().sqrt();
  return nc;
}

// ---------------------------------------------------------------------------
// Cross-subject transfer
// ---------------------------------------------------------------------------

struct TransferResult {
  std::string source_subject;
  std::string target_subject;
  std::string roi;
  double rho_bar_tuned = 0.0;
  double rho_bar_control = 0.0;
  double pct_improved = 0.0;
};

/// Re-fits PCA + ridge on the target subject's training data with the
/// source-tuned backbone (tap from the tuned model's provenance) and compares
/// held-out per-voxel correlations against the frozen control backbone.
inline TransferResult cross_subject_encode(BackboneF& tuned, BackboneF& control,
                                           const SubjectDataset& target,
                                           const std::string& roi_name, Index d,
                                           double alpha) {
  require(target.has_roi(roi_name), "cross_subject_encode: missing ROI");
  const std::string tap = tuned.provenance().encode_tap;
  require(!tap.empty(), "cross_subject_encode: tuned model has no encode tap");

  auto tuned_pipe = fit_encoding_pipeline(tuned, target, roi_name, tap, d, alpha);
  auto ctrl_pipe = fit_encoding_pipeline(control, target, roi_name, tap, d, alpha);
  auto tuned_score = evaluate_pipeline(tuned_pipe, tuned, target);
  auto ctrl_score = evaluate_pipeline(ctrl_pipe, control, target);

  TransferResult r;
  r.source_subject = tuned.provenance().subject_id;
  r.target_subject = target.subject_id;
  r.roi = roi_name;
  r.rho_bar_tuned = tuned_score.rho_bar;
  r.rho_bar_control = ctrl_score.rho_bar;
  r.pct_improved = percent_improved(tuned_score.rho, ctrl_score.rho);
  return r;
}

// ---------------------------------------------------------------------------
// External-dataset validation
// ---------------------------------------------------------------------------

struct ExternalValidation {
  std::string subject;  // external subject
  std::string roi;
  double rho_ctrl = 0.0;
  double rho_cl = 0.0;
  double rho_reg = 0.0;
  double pct_cl_vs_ctrl = 0.0;
  double pct_cl_vs_reg = 0.0;
  double selected_alpha = 0.0;
};

namespace detail {

/// Restrict an ROI to its top-k voxels by noise ceiling, ties broken by
/// voxel index.
inline std::vector<Index> top_k_by_ceiling(const ROIResponse& roi, Index top_k) {
  require(roi.noise_ceiling.size() == roi.voxels(),
          "external_validate: missing noise ceilings for " + roi.roi_name);
  require(top_k >= 1 && top_k <= roi.voxels(),
          "external_validate: top_k out of range");
  std::vector<Index> order(static_cast<std::size_t>(roi.voxels()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) {
    return roi.noise_ceiling(i) > roi.noise_ceiling(j);
  });
  order.resize(static_cast<std::size_t>(top_k));
  std::sort(order.begin(), order.end());
  return order;
}

inline SubjectDataset restrict_roi_voxels(const SubjectDataset& ds,
                                          const std::string& roi_name,
                                          const std::vector<Index>& keep) {
  SubjectDataset out = ds;
  for (auto& roi : out.rois) {
    if (roi.roi_name != roi_name) continue;
    MatF sub(roi.responses.rows(), static_cast<Index>(keep.size()));
    VecF nc(static_cast<Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
      sub.col(static_cast<Index>(k)) = roi.responses.col(keep[k]);
      nc(static_cast<Index>(k)) = roi.noise_ceiling(keep[k]);
    }
    roi.responses = std::move(sub);
    roi.noise_ceiling = std::move(nc);
  }
  return out;
}

/// 5-fold CV over the training split for the ridge penalty only, at a fixed
/// tap, using control-model features.
inline double select_alpha_cv(BackboneF& control, const SubjectDataset& ds,
                              const std::string& roi_name, const std::string& tap,
                              Index d, const std::vector<double>& alphas,
                              int folds, std::uint64_t seed) {
  CVResult cv = select_hyperparams(control, ds, roi_name, {tap}, alphas, d,
                                   folds, seed);
  return cv.selected_alpha;
}

}  // namespace detail

/// External-cohort protocol: keep the top-k ceiling voxels per ROI, re-select
/// the ridge penalty by 5-fold CV with the control backbone, then fit
/// control/CL/regression pipelines with that penalty at the provenance tap.
inline std::vector<ExternalValidation> external_validate(
    BackboneF& cl_model, BackboneF& reg_model, BackboneF& control,
    const std::vector<const SubjectDataset*>& external,
    const std::vector<std::string>& rois, Index top_k, Index d,
    const std::vector<double>& alpha_grid, int folds, std::uint64_t seed) {
  require(!external.empty(), "external_validate: no external subjects");
  const std::string tap = cl_model.provenance().encode_tap;
  require(!tap.empty(), "external_validate: CL model has no encode tap");

  std::vector<ExternalValidation> results;
  for (const auto* ds_ptr : external) {
    for (const auto& roi_name : rois) {
      const auto& roi = ds_ptr->roi(roi_name);
      auto keep = detail::top_k_by_ceiling(roi, top_k);
      SubjectDataset ds = detail::restrict_roi_voxels(*ds_ptr, roi_name, keep);

      const double alpha = detail::select_alpha_cv(
          control, ds, roi_name, tap, d, alpha_grid, folds,
          seed_combine(seed, seed_tag(0, ds.subject_id + roi_name)));

      auto ctrl_pipe = fit_encoding_pipeline(control, ds, roi_name, tap, d, alpha);
      auto cl_pipe = fit_encoding_pipeline(cl_model, ds, roi_name, tap, d, alpha);
      auto reg_pipe = fit_encoding_pipeline(reg_model, ds, roi_name, tap, d, alpha);
      auto ctrl_score = evaluate_pipeline(ctrl_pipe, control, ds);
      auto cl_score = evaluate_pipeline(cl_pipe, cl_model, ds);
      auto reg_score = evaluate_pipeline(reg_pipe, reg_model, ds);

      ExternalValidation ev;
      ev.subject = ds.subject_id;
      ev.roi = roi_name;
      ev.rho_ctrl = ctrl_score.rho_bar;
      ev.rho_cl = cl_score.rho_bar;
      ev.rho_reg = reg_score.rho_bar;
      ev.pct_cl_vs_ctrl = percent_improved(cl_score.rho, ctrl_score.rho);
      ev.pct_cl_vs_reg = percent_improved(cl_score.rho, reg_score.rho);
      ev.selected_alpha = alpha;
      results.push_back(ev);
    }
  }
  return results;
}

}  // namespace neuroenc
