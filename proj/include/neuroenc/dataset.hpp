#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroenc/common.hpp"
#include "neuroenc/matrix_io.hpp"
#include "neuroenc/rng.hpp"

namespace neuroenc {

using json = nlohmann::ordered_json;

/// Stimulus images stored one per row, channel-major (c*H*W + y*W + x),
/// intensities in [0,1]. Normalization constants are applied right before
/// the backbone input, not to the stored data.
struct StimulusSet {
  int height = 0;
  int width = 0;
  MatF images;                      // n x (3*H*W)
  std::vector<std::string> image_ids;
  std::vector<int> labels;          // empty when unlabeled
  int num_classes = 0;
  std::array<float, 3> norm_mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> norm_std{0.229f, 0.224f, 0.225f};

  Index size() const { return images.rows(); }
  bool labeled() const { return !labels.empty(); }

  void validate() const {
    require(images.cols() == Index(3) * height * width,
            "StimulusSet: image buffer does not match dimensions");
    require(image_ids.size() == static_cast<std::size_t>(images.rows()),
            "StimulusSet: id count mismatch");
    std::set<std::string> uniq(image_ids.begin(), image_ids.end());
    require(uniq.size() == image_ids.size(), "StimulusSet: duplicate image_ids");
    if (labeled()) {
      require(labels.size() == static_cast<std::size_t>(images.rows()),
              "StimulusSet: label count mismatch");
      for (int l : labels)
        require(l >= 0 && l < num_classes, "StimulusSet: label out of range");
    }
    require(all_finite(images), "StimulusSet: non-finite image values");
  }

  StimulusSet subset(const std::vector<int>& idx) const {
    StimulusSet s;
    s.height = height;
    s.width = width;
    s.norm_mean = norm_mean;
    s.norm_std = norm_std;
    s.num_classes = num_classes;
    s.images.resize(static_cast<Index>(idx.size()), images.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      s.images.row(static_cast<Index>(i)) = images.row(idx[i]);
      s.image_ids.push_back(image_ids[static_cast<std::size_t>(idx[i])]);
      if (labeled()) s.labels.push_back(labels[static_cast<std::size_t>(idx[i])]);
    }
    return s;
  }
};

enum class Hemisphere { none, left, right };

inline std::string to_string(Hemisphere h) {
  switch (h) {
    case Hemisphere::left: return "left";
    case Hemisphere::right: return "right";
    default: return "none";
  }
}

inline Hemisphere hemisphere_from_string(const std::string& s) {
  if (s == "left") return Hemisphere::left;
  if (s == "right") return Hemisphere::right;
  if (s == "none") return Hemisphere::none;
  throw InvalidInput("unknown hemisphere: " + s);
}

struct ROIResponse {
  std::string roi_name;
  Hemisphere hemisphere = Hemisphere::none;
  MatF responses;          // n x v, rows aligned with image_ids
  VecF noise_ceiling;      // length v, or empty when unknown

  Index voxels() const { return responses.cols(); }
};

struct SplitInfo {
  std::uint64_t seed = 0;
  double test_fraction = 0.0;
  std::vector<int> test_indices;  // sorted ascending

  bool empty() const { return test_indices.empty() && test_fraction == 0.0; }
};

struct SubjectDataset {
  std::string subject_id;
  StimulusSet stimuli;
  std::vector<ROIResponse> rois;
  SplitInfo split;

  Index n_images() const { return stimuli.size(); }

  const ROIResponse& roi(const std::string& name) const {
    for (const auto& r : rois)
      if (r.roi_name == name) return r;
    throw InvalidInput("ROI not found: " + name);
  }
  bool has_roi(const std::string& name) const {
    for (const auto& r : rois)
      if (r.roi_name == name) return true;
    return false;
  }

  std::vector<int> test_indices() const { return split.test_indices; }

  std::vector<int> train_indices() const {
    std::vector<bool> is_test(static_cast<std::size_t>(n_images()), false);
    for (int i : split.test_indices) is_test[static_cast<std::size_t>(i)] = true;
    std::vector<int> tr;
    for (int i = 0; i < n_images(); ++i)
      if (!is_test[static_cast<std::size_t>(i)]) tr.push_back(i);
    return tr;
  }

  void validate() const {
    stimuli.validate();
    for (const auto& r : rois) {
      require(r.voxels() >= 1, "ROI " + r.roi_name + ": needs at least 1 voxel");
      require(r.responses.rows() == n_images(),
              "ROI " + r.roi_name + ": row count does not match image count");
      require(all_finite(r.responses),
              "ROI " + r.roi_name + ": non-finite responses");
      if (r.noise_ceiling.size() > 0)
        require(r.noise_ceiling.size() == r.voxels(),
                "ROI " + r.roi_name + ": noise ceiling length mismatch");
    }
    std::vector<int> seen;
    for (int i : split.test_indices) {
      require(i >= 0 && i < n_images(), "split: test index out of range");
      seen.push_back(i);
    }
    std::set<int> uniq(seen.begin(), seen.end());
    require(uniq.size() == seen.size(), "split: duplicate test indices");
  }
};

/// Uniform random test sample; the one test set is shared by every ROI of
/// the subject. |test| = round(n * test_fraction).
inline SubjectDataset split_dataset(SubjectDataset dataset, double test_fraction,
                                    std::uint64_t seed) {
  const Index n = dataset.n_images();
  require(n >= 2, "split_dataset: need at least 2 images");
  require(test_fraction > 0.0 && test_fraction < 1.0,
          "split_dataset: fraction must be in (0,1)");
  const int k = static_cast<int>(
      std::lround(test_fraction * static_cast<double>(n)));
  require(k >= 1 && k < n, "split_dataset: split leaves an empty side");
  Rng rng(seed);
  std::vector<int> test = rng.sample_without_replacement(static_cast<int>(n), k);
  std::sort(test.begin(), test.end());
  dataset.split = SplitInfo{seed, test_fraction, std::move(test)};
  return dataset;
}

// ---------------------------------------------------------------------------
// Manifest I/O. Matrices travel in NEB1 containers; the manifest is JSON.
// ---------------------------------------------------------------------------

inline void save_dataset(const SubjectDataset& ds,
                         const std::filesystem::path& manifest_path) {
  ds.validate();
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string stem = manifest_path.stem().string();

  json m;
  m["subject_id"] = ds.subject_id;
  m["n_images"] = ds.n_images();
  m["image_size"] = ds.stimuli.height;
  m["image_file"] = stem + "_images.neb";
  neb::save(dir / (stem + "_images.neb"), ds.stimuli.images);
  if (ds.stimuli.labeled()) {
    MatF lab(ds.n_images(), 1);
    for (Index i = 0; i < ds.n_images(); ++i)
      lab(i, 0) = static_cast<float>(ds.stimuli.labels[static_cast<std::size_t>(i)]);
    m["labels_file"] = stem + "_labels.neb";
    m["num_classes"] = ds.stimuli.num_classes;
    neb::save(dir / (stem + "_labels.neb"), lab);
  }
  m["normalization"] = {
      {"mean", {ds.stimuli.norm_mean[0], ds.stimuli.norm_mean[1], ds.stimuli.norm_mean[2]}},
      {"std", {ds.stimuli.norm_std[0], ds.stimuli.norm_std[1], ds.stimuli.norm_std[2]}}};
  m["rois"] = json::array();
  for (std::size_t r = 0; r < ds.rois.size(); ++r) {
    const auto& roi = ds.rois[r];
    json jr;
    jr["name"] = roi.roi_name;
    jr["hemisphere"] = to_string(roi.hemisphere);
    jr["v"] = roi.voxels();
    jr["matrix_file"] = stem + "_roi" + std::to_string(r) + ".neb";
    neb::save(dir / (stem + "_roi" + std::to_string(r) + ".neb"), roi.responses);
    if (roi.noise_ceiling.size() > 0) {
      jr["noise_ceiling_file"] = stem + "_roi" + std::to_string(r) + "_nc.neb";
      MatF nc = roi.noise_ceiling;
      neb::save(dir / (stem + "_roi" + std::to_string(r) + "_nc.neb"), nc);
    }
    m["rois"].push_back(jr);
  }
  m["split"] = {{"seed", ds.split.seed},
                {"test_fraction", ds.split.test_fraction},
                {"test_indices", ds.split.test_indices}};
  std::ofstream os(manifest_path);
  if (!os) throw IoError("cannot write manifest: " + manifest_path.string());
  os << m.dump(2) << "\n";
}

inline SubjectDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("manifest not found: " + manifest_path.string());
  json m;
  try {
    is >> m;
  } catch (const std::exception& e) {
    throw IoError("manifest parse error: " + std::string(e.what()));
  }
  const auto dir = manifest_path.parent_path();

  SubjectDataset ds;
  ds.subject_id = m.at("subject_id").get<std::string>();
  const Index n = m.at("n_images").get<Index>();
  const int size = m.at("image_size").get<int>();
  ds.stimuli.height = ds.stimuli.width = size;
  ds.stimuli.images = neb::load(dir / m.at("image_file").get<std::string>());
  require(ds.stimuli.images.rows() == n,
          "manifest: image file row count does not match n_images");
  for (Index i = 0; i < n; ++i)
    ds.stimuli.image_ids.push_back(ds.subject_id + "_img" + std::to_string(i));
  if (m.contains("labels_file")) {
    MatF lab = neb::load(dir / m.at("labels_file").get<std::string>());
    require(lab.rows() == n, "manifest: labels row count mismatch");
    for (Index i = 0; i < n; ++i)
      ds.stimuli.labels.push_back(static_cast<int>(lab(i, 0)));
    ds.stimuli.num_classes = m.at("num_classes").get<int>();
  }
  if (m.contains("normalization")) {
    for (int c = 0; c < 3; ++c) {
      ds.stimuli.norm_mean[static_cast<std::size_t>(c)] =
          m["normalization"]["mean"][static_cast<std::size_t>(c)].get<float>();
      ds.stimuli.norm_std[static_cast<std::size_t>(c)] =
          m["normalization"]["std"][static_cast<std::size_t>(c)].get<float>();
    }
  }
  for (const auto& jr : m.at("rois")) {
    ROIResponse roi;
    roi.roi_name = jr.at("name").get<std::string>();
    roi.hemisphere = hemisphere_from_string(jr.at("hemisphere").get<std::string>());
    roi.responses = neb::load(dir / jr.at("matrix_file").get<std::string>());
    require(roi.responses.rows() == n,
            "ROI " + roi.roi_name + ": row count does not match image count");
    require(roi.responses.cols() == jr.at("v").get<Index>(),
            "ROI " + roi.roi_name + ": voxel count does not match manifest");
    if (jr.contains("noise_ceiling_file")) {
      MatF nc = neb::load(dir / jr.at("noise_ceiling_file").get<std::string>());
      roi.noise_ceiling = Eigen::Map<VecF>(nc.data(), nc.size());
    }
    ds.rois.push_back(std::move(roi));
  }
  if (m.contains("split")) {
    ds.split.seed = m["split"].at("seed").get<std::uint64_t>();
    ds.split.test_fraction = m["split"].at("test_fraction").get<double>();
    ds.split.test_indices = m["split"].at("test_indices").get<std::vector<int>>();
  }
  ds.validate();
  return ds;
}

}  // namespace neuroenc
