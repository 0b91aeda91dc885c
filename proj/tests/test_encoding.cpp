#include <catch2/catch_amalgamated.hpp>

#include "neuroenc/encoding.hpp"
#include "neuroenc/synthetic.hpp"

using namespace neuroenc;

namespace {

MatD random_mat(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
  MatD m(r, c);
  Rng rng(seed);
  nn::gaussian_init(m, rng, scale);
  return m;
}

// Brute-force PCA oracle: eigendecomposition of the explicit sample
// covariance, independent of the implementation's SVD/Gram path.
VecD covariance_eigenvalues(const MatD& x) {
  MatD c = x.rowwise() - x.colwise().mean();
  MatD cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<MatD> es(cov);
  return es.eigenvalues().reverse();
}

// Direct normal-equations ridge oracle on the centered system.
MatD ridge_oracle(const MatD& a, const MatD& y, double alpha, VecD* bias) {
  VecD am = a.colwise().mean(), ym = y.colwise().mean();
  MatD ac = a.rowwise() - am.transpose();
  MatD yc = y.rowwise() - ym.transpose();
  MatD gram = ac.transpose() * ac + alpha * MatD::Identity(a.cols(), a.cols());
  MatD bt = gram.inverse() * (ac.transpose() * yc);
  if (bias) *bias = ym - bt.transpose() * am;
  return bt.transpose();
}

}  // namespace

TEST_CASE("pca on collinear points returns the diagonal direction") {
  MatD x(5, 2);
  x << 0, 0, 1, 1, 2, 2, 3, 3, -1, -1;
  PCABasis basis = fit_pca(x, 2);
  REQUIRE(basis.dim() == 1);  // rank 1, no zero-padding
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  REQUIRE(std::abs(basis.components(0, 0)) == Catch::Approx(inv_sqrt2).margin(1e-9));
  REQUIRE(std::abs(basis.components(1, 0)) == Catch::Approx(inv_sqrt2).margin(1e-9));
  // Sign convention: largest-magnitude entry positive.
  REQUIRE(basis.components(0, 0) > 0);
}

TEST_CASE("pca truncates to rank when d exceeds it") {
  MatD base = random_mat(20, 2, 3);
  MatD x(20, 5);
  x.leftCols(2) = base;
  x.col(2) = base.col(0) + base.col(1);
  x.col(3) = 2 * base.col(0);
  x.col(4) = base.col(1) - base.col(0);
  PCABasis basis = fit_pca(x, 5);
  REQUIRE(basis.dim() == 2);
  REQUIRE(basis.explained_variance.size() == 2);
}

TEST_CASE("pca eigenvalues match the covariance oracle on random instances") {
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 5 + trial % 7, d = 3 + trial % 4;
    MatD x = random_mat(n, d, 100 + static_cast<std::uint64_t>(trial));
    PCABasis basis = fit_pca(x, d);
    VecD oracle = covariance_eigenvalues(x);
    for (Index j = 0; j < basis.dim(); ++j)
      REQUIRE(basis.explained_variance(j) ==
              Catch::Approx(oracle(j)).margin(1e-8));
    // Orthonormal columns.
    MatD gram = basis.components.transpose() * basis.components;
    REQUIRE((gram - MatD::Identity(basis.dim(), basis.dim())).norm() < 1e-6);
    // Non-increasing variance.
    for (Index j = 1; j < basis.dim(); ++j)
      REQUIRE(basis.explained_variance(j) <= basis.explained_variance(j - 1) + 1e-12);
  }
}

TEST_CASE("pca via gram path (d > n) agrees with covariance path") {
  MatD x = random_mat(6, 40, 17);
  PCABasis basis = fit_pca(x, 5);
  VecD oracle = covariance_eigenvalues(x);
  for (Index j = 0; j < basis.dim(); ++j)
    REQUIRE(basis.explained_variance(j) == Catch::Approx(oracle(j)).margin(1e-8));
  MatD gram = basis.components.transpose() * basis.components;
  REQUIRE((gram - MatD::Identity(basis.dim(), basis.dim())).norm() < 1e-6);
}

TEST_CASE("pca input validation") {
  REQUIRE_THROWS_AS(fit_pca(MatD::Zero(1, 3), 2), InvalidInput);
  MatD bad = MatD::Zero(4, 2);
  bad(0, 0) = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(fit_pca(bad, 2), InvalidInput);
}

TEST_CASE("ridge interpolates orthonormal features exactly at alpha 0") {
  // Zero-mean orthonormal features; responses equal feature 1.
  MatD a(4, 2);
  a << 0.5, 0.5, 0.5, -0.5, -0.5, 0.5, -0.5, -0.5;
  MatD y = a.col(0);
  RidgeModel m = fit_ridge(a, y, 0.0);
  REQUIRE(m.weights(0, 0) == Catch::Approx(1.0).margin(1e-10));
  REQUIRE(m.weights(0, 1) == Catch::Approx(0.0).margin(1e-10));
  REQUIRE(m.bias(0) == Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("huge alpha shrinks weights to zero and bias to the mean") {
  MatD a = random_mat(12, 3, 5);
  MatD y = random_mat(12, 2, 6);
  RidgeModel m = fit_ridge(a, y, 1e12);
  REQUIRE(m.weights.norm() < 1e-6);
  for (Index k = 0; k < 2; ++k)
    REQUIRE(m.bias(k) == Catch::Approx(y.col(k).mean()).margin(1e-6));
}

TEST_CASE("ridge matches the normal-equations oracle on random instances") {
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 6 + trial % 5, d = 3, v = 2;
    MatD a = random_mat(n, d, 200 + static_cast<std::uint64_t>(trial));
    MatD y = random_mat(n, v, 300 + static_cast<std::uint64_t>(trial));
    const double alpha = trial % 3 == 0 ? 10.0 : 0.3 * (trial + 1);
    RidgeModel m = fit_ridge(a, y, alpha);
    VecD bias_oracle;
    MatD w_oracle = ridge_oracle(a, y, alpha, &bias_oracle);
    REQUIRE((m.weights - w_oracle).cwiseAbs().maxCoeff() < 1e-8);
    REQUIRE((m.bias - bias_oracle).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("ridge stationarity condition holds") {
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 15, d = 4, v = 3;
    MatD a = random_mat(n, d, 400 + static_cast<std::uint64_t>(trial));
    MatD y = random_mat(n, v, 500 + static_cast<std::uint64_t>(trial));
    const double alpha = 0.1 + trial;
    RidgeModel m = fit_ridge(a, y, alpha);
    MatD resid = (a * m.weights.transpose()).rowwise() + m.bias.transpose() - y;
    MatD station = a.transpose() * resid + alpha * m.weights.transpose();
    const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
    REQUIRE(station.cwiseAbs().maxCoeff() <= 1e-6 * scale * n);
  }
}

TEST_CASE("ridge rejects singular zero-alpha systems and bad inputs") {
  MatD a(6, 3);
  a.setZero();
  a.col(0).setOnes();
  a.col(1) = a.col(0);
  a.col(2) = 2 * a.col(0);
  MatD y = random_mat(6, 1, 7);
  REQUIRE_THROWS_AS(fit_ridge(a, y, 0.0), InvalidInput);
  REQUIRE_NOTHROW(fit_ridge(random_mat(6, 3, 8), y, 0.0));
  REQUIRE_THROWS_AS(fit_ridge(random_mat(6, 3, 8), y, -1.0), InvalidInput);
}

TEST_CASE("correlation metric on identity, negation and a hand value") {
  MatD t = random_mat(10, 4, 9);
  auto same = score_correlation(t, t);
  REQUIRE(same.rho_bar == Catch::Approx(1.0).margin(1e-12));
  auto anti = score_correlation(-t, t);
  REQUIRE(anti.rho_bar == Catch::Approx(-1.0).margin(1e-12));

  MatD pred(3, 1), truth(3, 1);
  pred << 1, 2, 3;
  truth << 1, 2, 4;
  auto s = score_correlation(pred, truth);
  // Hand value: r = 3 / sqrt(2 * 14/3) = 0.98198...
  REQUIRE(s.rho(0) == Catch::Approx(0.9820).margin(5e-5));
}

TEST_CASE("zero-variance columns score zero by convention") {
  MatD pred = MatD::Zero(5, 2);
  MatD truth = random_mat(5, 2, 11);
  auto s = score_correlation(pred, truth);
  REQUIRE(s.rho(0) == 0.0);
  REQUIRE(s.rho(1) == 0.0);
}

TEST_CASE("correlation is invariant to positive affine rescaling") {
  MatD truth = random_mat(12, 3, 13);
  MatD pred = random_mat(12, 3, 14);
  auto base = score_correlation(pred, truth);
  MatD scaled = pred;
  for (Index k = 0; k < 3; ++k)
    scaled.col(k) = 2.5 * (k + 1) * pred.col(k).array() + 7.0 * (k - 1);
  auto after = score_correlation(scaled, truth);
  REQUIRE((base.rho - after.rho).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("percent improved counts strict wins") {
  VecD a(3), b(3);
  a << 0.5, 0.2, 0.3;
  b << 0.4, 0.2, 0.5;
  REQUIRE(percent_improved(a, b) == Catch::Approx(100.0 / 3).margin(1e-9));
  REQUIRE(percent_improved(a, a) == 0.0);
  VecD c = b.array() + 0.01;
  REQUIRE(percent_improved(c, b) == 100.0);
  VecD short_vec(2);
  REQUIRE_THROWS_AS(percent_improved(a, short_vec), InvalidInput);
}

TEST_CASE("percent improved antisymmetry property") {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    VecD a(6), b(6);
    for (Index k = 0; k < 6; ++k) {
      a(k) = rng.normal();
      b(k) = rng.below(3) == 0 ? a(k) : rng.normal();  // force some ties
    }
    const double sum = percent_improved(a, b) + percent_improved(b, a);
    REQUIRE(sum <= 100.0 + 1e-9);
    bool any_tie = false;
    for (Index k = 0; k < 6; ++k) any_tie |= (a(k) == b(k));
    if (!any_tie) REQUIRE(sum == Catch::Approx(100.0).margin(1e-9));
  }
}

TEST_CASE("default alpha grid is the nine-value log-spaced ladder") {
  auto grid = default_alpha_grid();
  REQUIRE(grid.size() == 9);
  REQUIRE(grid.front() == Catch::Approx(0.1));
  REQUIRE(grid.back() == Catch::Approx(1e7));
  for (std::size_t i = 1; i < grid.size(); ++i)
    REQUIRE(grid[i] / grid[i - 1] == Catch::Approx(10.0));
}

namespace {

SubjectDataset planted_subject(double noise, std::uint64_t seed,
                               const std::string& tap) {
  SyntheticSpec spec;
  spec.subject_id = "cv";
  spec.n_images = 120;
  spec.image_size = 32;
  spec.rois = {{"roi", 10, tap, noise, Hemisphere::none}};
  spec.images.num_classes = 4;
  spec.teacher_seed = 42;
  spec.subject_seed = seed;
  auto ds = generate_synthetic_subject(spec);
  return split_dataset(ds, 0.2, 1);
}

}  // namespace

TEST_CASE("cross-validation selects the planted layer and is deterministic") {
  auto ds = planted_subject(0.15, 3, "conv2");
  // Student = the teacher itself: exhaustive grid evaluation is the oracle
  // and must pick the planted tap.
  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = 42;
  BackboneF student(tc);
  std::vector<std::string> layers = {"conv1", "conv2", "conv3"};
  CVResult res = select_hyperparams(student, ds, "roi", layers,
                                    default_alpha_grid(), 24, 5, 7);
  REQUIRE(res.selected_layer == "conv2");
  REQUIRE(res.scores.rows() == 3);
  REQUIRE(res.scores.cols() == 9);

  CVResult res2 = select_hyperparams(student, ds, "roi", layers,
                                     default_alpha_grid(), 24, 5, 7);
  REQUIRE((res.scores - res2.scores).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(res2.selected_alpha == res.selected_alpha);
}

TEST_CASE("single-cell grid selects that cell with a finite score") {
  auto ds = planted_subject(0.5, 4, "conv1");
  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  BackboneF student(tc);
  CVResult res =
      select_hyperparams(student, ds, "roi", {"conv1"}, {10.0}, 8, 5, 1);
  REQUIRE(res.selected_layer == "conv1");
  REQUIRE(res.selected_alpha == 10.0);
  REQUIRE(std::isfinite(res.scores(0, 0)));
  REQUIRE_THROWS_AS(
      select_hyperparams(student, ds, "roi", {}, {1.0}, 8, 5, 1), InvalidInput);
}

TEST_CASE("pca projection at full rank preserves encoding scores") {
  auto ds = planted_subject(0.4, 5, "conv2");
  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = 101;
  BackboneF model(tc);

  const auto train = ds.train_indices();
  StimulusSet train_stim = ds.stimuli.subset(train);
  MatD feats =
      extract_features(model, train_stim, "fc2").cast<double>();  // 256-d
  MatD resp(train.size(), ds.rois[0].voxels());
  for (std::size_t i = 0; i < train.size(); ++i)
    resp.row(static_cast<Index>(i)) = ds.rois[0].responses.row(train[i]).cast<double>();

  const auto test = ds.test_indices();
  StimulusSet test_stim = ds.stimuli.subset(test);
  MatD test_feats = extract_features(model, test_stim, "fc2").cast<double>();
  MatD test_resp(test.size(), ds.rois[0].voxels());
  for (std::size_t i = 0; i < test.size(); ++i)
    test_resp.row(static_cast<Index>(i)) = ds.rois[0].responses.row(test[i]).cast<double>();

  const double alpha = 5.0;
  // Raw centered features.
  RidgeModel raw = fit_ridge(feats, resp, alpha);
  MatD raw_pred = (test_feats * raw.weights.transpose()).rowwise() +
                  raw.bias.transpose();
  // Full-rank PCA projection.
  PCABasis pca = fit_pca(feats, feats.cols());
  RidgeModel red = fit_ridge(pca.project(feats), resp, alpha);
  MatD red_pred = (pca.project(test_feats) * red.weights.transpose()).rowwise() +
                  red.bias.transpose();

  auto raw_score = score_correlation(raw_pred, test_resp);
  auto red_score = score_correlation(red_pred, test_resp);
  REQUIRE(raw_score.rho_bar == Catch::Approx(red_score.rho_bar).margin(1e-6));
}

TEST_CASE("predict matches the staged composition and zero weights give bias") {
  auto ds = planted_subject(0.3, 6, "conv2");
  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = 7;
  BackboneF model(tc);
  auto pipe = fit_encoding_pipeline(model, ds, "roi", "conv2", 16, 2.0);

  const auto test = ds.test_indices();
  StimulusSet test_stim = ds.stimuli.subset(test);
  MatD direct = predict(pipe, model, test_stim);

  MatD feats = extract_features(model, test_stim, "conv2").cast<double>();
  MatD staged = (pipe.pca.project(feats) * pipe.ridge.weights.transpose())
                    .rowwise() +
                pipe.ridge.bias.transpose();
  REQUIRE((direct - staged).cwiseAbs().maxCoeff() < 1e-6);

  EncodingPipeline zero = pipe;
  zero.ridge.weights.setZero();
  MatD flat = predict(zero, model, test_stim);
  for (Index i = 0; i < flat.rows(); ++i)
    REQUIRE((flat.row(i).transpose() - zero.ridge.bias).cwiseAbs().maxCoeff() <
            1e-12);
}

TEST_CASE("planted-model recovery: noise-free training images encode at rho 1") {
  auto ds = planted_subject(0.0, 8, "conv2");
  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = 42;  // the teacher itself
  BackboneF teacher(tc);
  // Full-rank PCA + alpha=0 interpolates the planted linear responses on the
  // training set exactly.
  auto pipe = fit_encoding_pipeline(teacher, ds, "roi", "conv2",
                                    /*d=*/120, /*alpha=*/0.0);
  const auto train = ds.train_indices();
  StimulusSet train_stim = ds.stimuli.subset(train);
  MatD pred = predict(pipe, teacher, train_stim);
  MatD truth(train.size(), ds.rois[0].voxels());
  for (std::size_t i = 0; i < train.size(); ++i)
    truth.row(static_cast<Index>(i)) = ds.rois[0].responses.row(train[i]).cast<double>();
  auto score = score_correlation(pred, truth);
  for (Index k = 0; k < score.rho.size(); ++k)
    REQUIRE(score.rho(k) == Catch::Approx(1.0).margin(1e-6));
}
