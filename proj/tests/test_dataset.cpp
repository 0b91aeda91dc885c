#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "neuroenc/dataset.hpp"
#include "neuroenc/encoding.hpp"
#include "neuroenc/synthetic.hpp"

using namespace neuroenc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("neuroenc_ds_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SubjectDataset tiny_dataset() {
  SubjectDataset ds;
  ds.subject_id = "t0";
  ds.stimuli.height = ds.stimuli.width = 4;
  ds.stimuli.images = MatF::Zero(2, 48);
  ds.stimuli.images(0, 3) = 0.25f;
  ds.stimuli.images(1, 40) = 0.75f;
  ds.stimuli.image_ids = {"t0_img0", "t0_img1"};
  ROIResponse roi;
  roi.roi_name = "r";
  roi.responses = MatF::Random(2, 5);
  ds.rois.push_back(roi);
  return ds;
}

}  // namespace

TEST_CASE("manifest save/load reproduces matrices bit-exactly") {
  auto dir = fresh_dir("roundtrip");
  auto ds = tiny_dataset();
  save_dataset(ds, dir / "manifest.json");
  auto back = load_dataset(dir / "manifest.json");
  REQUIRE(back.n_images() == 2);
  REQUIRE(back.rois.size() == 1);
  REQUIRE(back.rois[0].voxels() == 5);
  REQUIRE(std::memcmp(back.stimuli.images.data(), ds.stimuli.images.data(),
                      sizeof(float) * 96) == 0);
  REQUIRE(std::memcmp(back.rois[0].responses.data(), ds.rois[0].responses.data(),
                      sizeof(float) * 10) == 0);

  // Save-again produces byte-identical matrix files.
  auto dir2 = fresh_dir("roundtrip2");
  save_dataset(back, dir2 / "manifest.json");
  for (const auto& name : {"manifest_images.neb", "manifest_roi0.neb"}) {
    std::ifstream a(dir / name, std::ios::binary);
    std::ifstream b(dir2 / name, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    REQUIRE(sa == sb);
  }
}

TEST_CASE("load rejects row-count mismatches") {
  auto dir = fresh_dir("mismatch");
  auto ds = tiny_dataset();
  save_dataset(ds, dir / "manifest.json");
  // Overwrite the ROI file with 3 rows while the manifest says 2 images.
  neb::save(dir / "manifest_roi0.neb", MatF::Zero(3, 5));
  REQUIRE_THROWS_AS(load_dataset(dir / "manifest.json"), InvalidInput);
}

TEST_CASE("load rejects missing manifest and non-finite values") {
  REQUIRE_THROWS_AS(load_dataset("/nonexistent/manifest.json"), IoError);

  auto dir = fresh_dir("nonfinite");
  auto ds = tiny_dataset();
  save_dataset(ds, dir / "manifest.json");
  MatF bad = MatF::Zero(2, 5);
  bad(0, 0) = std::numeric_limits<float>::quiet_NaN();
  neb::save(dir / "manifest_roi0.neb", bad);
  REQUIRE_THROWS_AS(load_dataset(dir / "manifest.json"), InvalidInput);
}

TEST_CASE("duplicate image ids are rejected") {
  auto ds = tiny_dataset();
  ds.stimuli.image_ids = {"same", "same"};
  REQUIRE_THROWS_AS(ds.validate(), InvalidInput);
}

TEST_CASE("split sizes follow round(n * fraction)") {
  SubjectDataset ds;
  ds.subject_id = "s";
  ds.stimuli.height = ds.stimuli.width = 2;
  ds.stimuli.images = MatF::Zero(100, 12);
  for (int i = 0; i < 100; ++i) ds.stimuli.image_ids.push_back("i" + std::to_string(i));

  auto out = split_dataset(ds, 0.15, 3);
  REQUIRE(out.test_indices().size() == 15);
  REQUIRE(out.train_indices().size() == 85);

  // Partition: disjoint and covering.
  std::set<int> seen;
  for (int i : out.test_indices()) seen.insert(i);
  for (int i : out.train_indices()) seen.insert(i);
  REQUIRE(seen.size() == 100);
}

TEST_CASE("smallest legal split and determinism") {
  SubjectDataset ds;
  ds.subject_id = "s";
  ds.stimuli.height = ds.stimuli.width = 2;
  ds.stimuli.images = MatF::Zero(2, 12);
  ds.stimuli.image_ids = {"a", "b"};
  auto out = split_dataset(ds, 0.5, 1);
  REQUIRE(out.test_indices().size() == 1);
  REQUIRE(out.train_indices().size() == 1);
  REQUIRE(out.test_indices()[0] != out.train_indices()[0]);

  auto again = split_dataset(ds, 0.5, 1);
  REQUIRE(again.test_indices() == out.test_indices());

  REQUIRE_THROWS_AS(split_dataset(ds, 1.5, 1), InvalidInput);
  SubjectDataset tiny;
  tiny.stimuli.height = tiny.stimuli.width = 2;
  tiny.stimuli.images = MatF::Zero(1, 12);
  tiny.stimuli.image_ids = {"only"};
  REQUIRE_THROWS_AS(split_dataset(tiny, 0.5, 1), InvalidInput);
}

TEST_CASE("synthetic generator is seeded and honors the zero-noise limit") {
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 24;
  spec.image_size = 32;
  spec.rois = {{"r0", 7, "conv2", 0.0, Hemisphere::none}};
  spec.images.num_classes = 4;
  spec.teacher_seed = 5;
  spec.subject_seed = 6;

  auto a = generate_synthetic_subject(spec);
  auto b = generate_synthetic_subject(spec);
  REQUIRE((a.stimuli.images - b.stimuli.images).cwiseAbs().maxCoeff() == 0.0f);
  REQUIRE((a.rois[0].responses - b.rois[0].responses).cwiseAbs().maxCoeff() ==
          0.0f);

  for (Index k = 0; k < 7; ++k)
    REQUIRE(a.rois[0].noise_ceiling(k) == Catch::Approx(1.0).margin(1e-7));

  spec.subject_seed = 61;
  auto c = generate_synthetic_subject(spec);
  REQUIRE((a.stimuli.images - c.stimuli.images).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("unit signal variance makes the planted ceiling exact") {
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 40;
  spec.image_size = 32;
  spec.rois = {{"r0", 5, "conv1", 1.0, Hemisphere::none}};
  spec.images.num_classes = 4;
  auto ds = generate_synthetic_subject(spec);

  // noise_std = 1 with unit signal variance: ceiling 0.5 per voxel.
  for (Index k = 0; k < 5; ++k)
    REQUIRE(ds.rois[0].noise_ceiling(k) == Catch::Approx(0.5).margin(1e-7));

  // The planted signal component really has unit empirical variance: with
  // noise_std=0 the stored responses are the signal itself.
  spec.rois[0].noise_std = 0.0;
  auto clean = generate_synthetic_subject(spec);
  for (Index k = 0; k < 5; ++k) {
    const double m = clean.rois[0].responses.col(k).cast<double>().mean();
    const double var =
        (clean.rois[0].responses.col(k).cast<double>().array() - m).square().mean();
    REQUIRE(var == Catch::Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("noise-free synthetic responses are exactly linear in teacher features") {
  // Oracle: ridge with alpha=0 on the teacher's own tap features must
  // predict a noise-free ROI with per-voxel correlation 1.
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 60;
  spec.image_size = 32;
  spec.rois = {{"r0", 6, "conv2", 0.0, Hemisphere::none}};
  spec.images.num_classes = 4;
  spec.teacher_seed = 9;
  auto ds = generate_synthetic_subject(spec);

  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = spec.teacher_seed;
  BackboneF teacher(tc);
  MatD phi = extract_features(teacher, ds.stimuli, "conv2").cast<double>();

  PCABasis pca = fit_pca(phi, 60);  // full rank (n - 1 at most)
  MatD reduced = pca.project(phi);
  RidgeModel ridge = fit_ridge(reduced, ds.rois[0].responses.cast<double>(), 0.0);
  MatD pred = (reduced * ridge.weights.transpose()).rowwise() +
              ridge.bias.transpose();
  auto score = score_correlation(pred, ds.rois[0].responses.cast<double>());
  for (Index k = 0; k < score.rho.size(); ++k)
    REQUIRE(score.rho(k) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("lateralized ROIs ignore the opposite half of the image") {
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 10;
  spec.image_size = 32;
  spec.rois = {{"lat", 4, "conv2", 0.0, Hemisphere::left}};
  spec.images.num_classes = 4;
  spec.images.bilateral = true;
  auto ds = generate_synthetic_subject(spec);

  // Perturb the right half of every image; the left-lateralized responses
  // must not change.
  SyntheticSpec spec2 = spec;
  auto ds2 = generate_synthetic_subject(spec2);
  const Index plane = 32 * 32;
  for (Index i = 0; i < ds2.n_images(); ++i)
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < 32; ++y)
        for (Index x = 16; x < 32; ++x)
          ds2.stimuli.images(i, c * plane + y * 32 + x) = 0.0f;

  BackboneConfig tc = BackboneConfig::desk_default(4, 32);
  tc.seed = spec.teacher_seed;
  BackboneF teacher(tc);

  auto masked_features = [&](const StimulusSet& stim) {
    MatF x = normalized_input(stim);
    mask_opposite_half(x, 32, 32, Hemisphere::left);
    return teacher.forward(x, teacher.tap_index("conv2"));
  };
  MatF f1 = masked_features(ds.stimuli);
  MatF f2 = masked_features(ds2.stimuli);
  REQUIRE((f1 - f2).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("bilateral stimuli place objects on both halves") {
  auto stim = generate_stimuli(6, 32, {true, Hemisphere::left, 16}, 3, "p");
  REQUIRE(stim.labeled());
  REQUIRE(stim.num_classes == 16);
  const Index plane = 32 * 32;
  // Each half must show non-background structure: variance well above the
  // background noise floor in both halves.
  for (Index i = 0; i < stim.size(); ++i) {
    double var_left = 0, var_right = 0, mean_left = 0, mean_right = 0;
    int count = 0;
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 16; ++x) {
        mean_left += stim.images(i, y * 32 + x);
        mean_right += stim.images(i, y * 32 + x + 16);
        ++count;
      }
    mean_left /= count;
    mean_right /= count;
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 16; ++x) {
        var_left += std::pow(stim.images(i, y * 32 + x) - mean_left, 2);
        var_right += std::pow(stim.images(i, y * 32 + x + 16) - mean_right, 2);
      }
    REQUIRE(var_left / count > 1e-3);
    REQUIRE(var_right / count > 1e-3);
  }
}

TEST_CASE("invalid teacher tap and voxel counts are rejected") {
  SyntheticSpec spec;
  spec.subject_id = "s0";
  spec.n_images = 4;
  spec.image_size = 32;
  spec.images.num_classes = 4;
  spec.rois = {{"bad", 3, "conv99", 0.0, Hemisphere::none}};
  REQUIRE_THROWS_AS(generate_synthetic_subject(spec), InvalidInput);
  spec.rois = {{"bad", 0, "conv1", 0.0, Hemisphere::none}};
  REQUIRE_THROWS_AS(generate_synthetic_subject(spec), InvalidInput);
}
