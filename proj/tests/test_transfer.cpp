#include <catch2/catch_amalgamated.hpp>

#include "neuroenc/synthetic.hpp"
#include "neuroenc/transfer.hpp"
#include "neuroenc/tuning.hpp"

using namespace neuroenc;

TEST_CASE("paired t-test on identical samples is the exact null") {
  std::vector<double> a = {1.0, 2.0, 3.0, 4.0};
  StatReport r = paired_ttest(a, a, TTail::one);
  REQUIRE(r.t == 0.0);
  REQUIRE(r.p_raw == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(r.cohen_d == 0.0);
  REQUIRE(!r.degenerate);
}

TEST_CASE("paired t-test reproduces the hand-computed example") {
  std::vector<double> a = {1.0, 2.0, 3.0};
  std::vector<double> b = {0.5, 1.8, 2.4};
  StatReport r = paired_ttest(a, b, TTail::one, 1);
  REQUIRE(r.t == Catch::Approx(3.605).margin(1e-3));
  REQUIRE(r.p_raw == Catch::Approx(0.0345).margin(1e-3));
  REQUIRE(r.cohen_d == Catch::Approx(2.081).margin(1e-3));
  REQUIRE(r.n == 3);

  StatReport r2 = paired_ttest(a, b, TTail::one, 2);
  REQUIRE(r2.p_corrected == Catch::Approx(2 * r.p_raw).margin(1e-12));
  StatReport r3 = paired_ttest(a, b, TTail::one, 1000);
  REQUIRE(r3.p_corrected == 1.0);
}

TEST_CASE("t-test invariants over random instances") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(6));
    std::vector<double> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.normal());
      b.push_back(rng.normal());
    }
    StatReport one = paired_ttest(a, b, TTail::one, 1);
    StatReport two = paired_ttest(a, b, TTail::two, 1);
    // Two-tailed p = 2 min(p1, 1 - p1).
    REQUIRE(two.p_raw ==
            Catch::Approx(2.0 * std::min(one.p_raw, 1.0 - one.p_raw)).margin(1e-12));
    // Bonferroni monotone nondecreasing in `tests`.
    double prev = 0.0;
    for (int tests : {1, 2, 5, 50}) {
      StatReport r = paired_ttest(a, b, TTail::one, tests);
      REQUIRE(r.p_corrected >= prev - 1e-15);
      REQUIRE(r.p_corrected <= 1.0);
      prev = r.p_corrected;
    }
    // Cohen's d sign equals the sign of the mean difference.
    double mean_diff = 0;
    for (int i = 0; i < n; ++i) mean_diff += a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    if (std::abs(mean_diff) > 1e-12)
      REQUIRE((one.cohen_d > 0) == (mean_diff > 0));
  }
}

TEST_CASE("degenerate zero-variance nonzero differences are flagged") {
  std::vector<double> a = {1.0, 2.0, 3.0};
  std::vector<double> b = {0.5, 1.5, 2.5};
  StatReport r = paired_ttest(a, b, TTail::one);
  REQUIRE(r.degenerate);
  REQUIRE(r.p_raw == 0.0);
  REQUIRE(std::isinf(r.t));
}

TEST_CASE("t-test input validation") {
  std::vector<double> a = {1.0};
  REQUIRE_THROWS_AS(paired_ttest(a, a, TTail::one), InvalidInput);
  std::vector<double> b = {1.0, 2.0};
  REQUIRE_THROWS_AS(paired_ttest(a, b, TTail::one), InvalidInput);
}

TEST_CASE("noise ceiling accessor returns planted values and bounds") {
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 30;
  spec.image_size = 32;
  spec.rois = {{"r0", 4, "conv1", 1.0, Hemisphere::none}};
  spec.images.num_classes = 4;
  auto ds = generate_synthetic_subject(spec);
  auto nc = estimate_noise_ceiling(ds, "r0");
  for (Index k = 0; k < 4; ++k) {
    REQUIRE(nc.ceiling(k) == Catch::Approx(0.5).margin(1e-7));
    REQUIRE(nc.rho_bound(k) == Catch::Approx(std::sqrt(0.5)).margin(1e-7));
  }

  ds.rois[0].noise_ceiling.resize(0);
  REQUIRE_THROWS_AS(estimate_noise_ceiling(ds, "r0"), InvalidInput);
}

TEST_CASE("planted-model test correlation respects the ceiling bound") {
  // Oracle regression on the teacher's own features cannot beat the
  // noise-imposed bound by more than sampling error.
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 400;
  spec.image_size = 32;
  spec.rois = {{"r0", 8, "conv2", 1.0, Hemisphere::none}};
  spec.images.num_classes = 4;
  spec.teacher_seed = 42;
  auto ds = generate_synthetic_subject(spec);
  ds = split_dataset(ds, 0.25, 5);

  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = 42;
  BackboneF teacher(tc);
  auto pipe = fit_encoding_pipeline(teacher, ds, "r0", "conv2", 64, 1.0);
  auto score = evaluate_pipeline(pipe, teacher, ds);
  auto nc = estimate_noise_ceiling(ds, "r0");
  for (Index k = 0; k < score.rho.size(); ++k)
    REQUIRE(score.rho(k) <= nc.rho_bound(k) + 0.05);
}

namespace {

SubjectDataset transfer_subject(std::uint64_t seed, const std::string& id) {
  SyntheticSpec spec;
  spec.subject_id = id;
  spec.n_images = 150;
  spec.image_size = 32;
  spec.rois = {{"roi", 8, "conv2", 0.6, Hemisphere::none}};
  spec.images.num_classes = 4;
  spec.teacher_seed = 42;  // shared teacher
  spec.subject_seed = seed;
  auto ds = generate_synthetic_subject(spec);
  return split_dataset(ds, 0.2, seed);
}

}  // namespace

TEST_CASE("identity transfer reproduces the subject-specific evaluation") {
  auto ds = transfer_subject(3, "sA");
  BackboneConfig bc = BackboneConfig::desk_default(4, 32, 5);
  BackboneF control(bc);
  BackboneF tuned(bc);
  CLConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.lr = 5e-4;
  cl_finetune(tuned, ds, "roi", cfg, "conv2");

  TransferResult r = cross_subject_encode(tuned, control, ds, "roi", 24, 10.0);
  // Subject-specific evaluation through the same pipeline calls.
  auto tuned_pipe = fit_encoding_pipeline(tuned, ds, "roi", "conv2", 24, 10.0);
  auto ctrl_pipe = fit_encoding_pipeline(control, ds, "roi", "conv2", 24, 10.0);
  auto ts = evaluate_pipeline(tuned_pipe, tuned, ds);
  auto cs = evaluate_pipeline(ctrl_pipe, control, ds);
  REQUIRE(r.rho_bar_tuned == ts.rho_bar);
  REQUIRE(r.rho_bar_control == cs.rho_bar);
  REQUIRE(r.pct_improved == percent_improved(ts.rho, cs.rho));
  REQUIRE(r.source_subject == "sA");
  REQUIRE(r.target_subject == "sA");
}

TEST_CASE("cross-subject transfer requires the ROI and an encode tap") {
  auto ds = transfer_subject(4, "sB");
  BackboneConfig bc = BackboneConfig::desk_default(4, 32, 5);
  BackboneF control(bc);
  BackboneF tuned(bc);  // provenance has no tap
  REQUIRE_THROWS_AS(cross_subject_encode(tuned, control, ds, "roi", 16, 1.0),
                    InvalidInput);
  tuned.provenance().encode_tap = "conv2";
  REQUIRE_THROWS_AS(cross_subject_encode(tuned, control, ds, "missing", 16, 1.0),
                    InvalidInput);
}

TEST_CASE("external validation with top_k = v reduces to plain transfer") {
  auto ds = transfer_subject(6, "sE");
  BackboneConfig bc = BackboneConfig::desk_default(4, 32, 5);
  BackboneF control(bc);
  BackboneF cl_model(bc);
  BackboneF reg_model(bc);
  CLConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 1;
  cfg.lr = 5e-4;
  cl_finetune(cl_model, ds, "roi", cfg, "conv2");
  RegressionConfig rcfg;
  rcfg.epochs = 1;
  rcfg.batch_size = 16;
  regression_finetune(reg_model, ds, "roi", rcfg, "conv2");

  auto rows = external_validate(cl_model, reg_model, control, {&ds}, {"roi"},
                                /*top_k=*/8, /*d=*/24, {1.0, 10.0}, 4, 9);
  REQUIRE(rows.size() == 1);
  const auto& ev = rows[0];

  // With every voxel kept, the CL-vs-control comparison must match
  // cross_subject_encode at the same alpha.
  TransferResult tr =
      cross_subject_encode(cl_model, control, ds, "roi", 24, ev.selected_alpha);
  REQUIRE(ev.rho_cl == Catch::Approx(tr.rho_bar_tuned).margin(1e-12));
  REQUIRE(ev.rho_ctrl == Catch::Approx(tr.rho_bar_control).margin(1e-12));
  REQUIRE(ev.pct_cl_vs_ctrl == Catch::Approx(tr.pct_improved).margin(1e-12));
}

TEST_CASE("external validation selects voxels by ceiling with index ties") {
  auto ds = transfer_subject(7, "sF");
  // Plant distinct ceilings: voxels 2 and 5 highest.
  for (Index k = 0; k < 8; ++k)
    ds.rois[0].noise_ceiling(k) = 0.1f + 0.01f * static_cast<float>(k);
  ds.rois[0].noise_ceiling(2) = 0.9f;
  ds.rois[0].noise_ceiling(5) = 0.9f;

  BackboneConfig bc = BackboneConfig::desk_default(4, 32, 5);
  BackboneF control(bc);
  BackboneF cl_model(bc);
  BackboneF reg_model(bc);
  cl_model.provenance().encode_tap = "conv2";
  reg_model.provenance().encode_tap = "conv2";

  auto rows = external_validate(cl_model, reg_model, control, {&ds}, {"roi"},
                                /*top_k=*/1, /*d=*/16, {10.0}, 4, 9);
  REQUIRE(rows.size() == 1);
  // top_k=1 keeps voxel 2 (tie with 5 broken by index); rho_bar is that
  // single voxel's correlation, so pct is 0 or 100.
  REQUIRE((rows[0].pct_cl_vs_ctrl == 0.0 || rows[0].pct_cl_vs_ctrl == 100.0));

  REQUIRE_THROWS_AS(
      external_validate(cl_model, reg_model, control, {&ds}, {"roi"},
                        /*top_k=*/9, 16, {10.0}, 4, 9),
      InvalidInput);
  ds.rois[0].noise_ceiling.resize(0);
  REQUIRE_THROWS_AS(
      external_validate(cl_model, reg_model, control, {&ds}, {"roi"},
                        /*top_k=*/1, 16, {10.0}, 4, 9),
      InvalidInput);
}
