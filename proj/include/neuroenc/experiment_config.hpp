#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroenc/backbone.hpp"
#include "neuroenc/common.hpp"
#include "neuroenc/synthetic.hpp"
#include "neuroenc/tuning.hpp"

namespace neuroenc {

// Configs are hashed over their canonical serialization (sorted keys, all
// defaults materialized); nlohmann::json's std::map storage provides the
// ordering.
using cjson = nlohmann::json;

struct CohortConfig {
  int subjects = 3;
  int n_images = 2000;
  int image_size = 64;
  double test_fraction = 0.15;
  std::vector<SyntheticROISpec> rois;
  std::uint64_t teacher_seed = 7;
  SyntheticImageSpec images;
  std::vector<double> subject_noise_scale;  // optional per-subject multiplier

  cjson to_json() const {
    cjson j;
    j["subjects"] = subjects;
    j["n_images"] = n_images;
    j["image_size"] = image_size;
    j["test_fraction"] = test_fraction;
    j["teacher_seed"] = teacher_seed;
    j["rois"] = cjson::array();
    for (const auto& r : rois)
      j["rois"].push_back({{"name", r.name},
                           {"v", r.v},
                           {"teacher_tap", r.teacher_tap},
                           {"noise_std", r.noise_std},
                           {"laterality", to_string(r.laterality)}});
    j["images"] = {{"bilateral", images.bilateral},
                   {"label_side", to_string(images.label_side)},
                   {"num_classes", images.num_classes}};
    j["subject_noise_scale"] = subject_noise_scale;
    return j;
  }

  static CohortConfig from_json(const cjson& j) {
    CohortConfig c;
    c.subjects = j.value("subjects", c.subjects);
    c.n_images = j.value("n_images", c.n_images);
    c.image_size = j.value("image_size", c.image_size);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.teacher_seed = j.value("teacher_seed", c.teacher_seed);
    if (j.contains("rois"))
      for (const auto& r : j.at("rois"))
        c.rois.push_back({r.at("name").get<std::string>(), r.at("v").get<int>(),
                          r.at("teacher_tap").get<std::string>(),
                          r.value("noise_std", 0.0),
                          hemisphere_from_string(r.value("laterality", "none"))});
    if (j.contains("images")) {
      const auto& ji = j.at("images");
      c.images.bilateral = ji.value("bilateral", false);
      c.images.label_side = hemisphere_from_string(ji.value("label_side", "left"));
      c.images.num_classes = ji.value("num_classes", 16);
    }
    c.subject_noise_scale =
        j.value("subject_noise_scale", std::vector<double>{});
    return c;
  }
};

struct CVConfig {
  Index d = 96;          // retained PCA dimension
  int folds = 5;
  std::vector<double> alphas = default_alpha_grid();
  std::vector<std::string> layers;  // empty = all taps
  int reference_subject = 0;
  bool per_subject = false;

  cjson to_json() const {
    return {{"d", d},
            {"folds", folds},
            {"alphas", alphas},
            {"layers", layers},
            {"reference_subject", reference_subject},
            {"per_subject", per_subject}};
  }
  static CVConfig from_json(const cjson& j) {
    CVConfig c;
    c.d = j.value("d", c.d);
    c.folds = j.value("folds", c.folds);
    if (j.contains("alphas")) c.alphas = j.at("alphas").get<std::vector<double>>();
    c.layers = j.value("layers", std::vector<std::string>{});
    c.reference_subject = j.value("reference_subject", 0);
    c.per_subject = j.value("per_subject", false);
    return c;
  }
};

struct TuningSection {
  CLConfig cl;
  RegressionConfig reg;
  std::vector<std::string> cl_rois;   // ROIs that get CL tuning
  std::vector<std::string> reg_rois;  // ROIs that get the regression baseline
  bool pooled_enabled = false;
  std::vector<std::string> pooled_rois;
  std::string pooled_dh_mode = "avg";
  int pooled_dh_constant = 0;

  cjson to_json() const {
    return {{"cl",
             {{"batch_size", cl.batch_size},
              {"epochs", cl.epochs},
              {"lr", cl.lr},
              {"tau", cl.tau}}},
            {"reg",
             {{"batch_size", reg.batch_size},
              {"epochs", reg.epochs},
              {"lr", reg.lr}}},
            {"cl_rois", cl_rois},
            {"reg_rois", reg_rois},
            {"pooled",
             {{"enabled", pooled_enabled},
              {"rois", pooled_rois},
              {"dh_mode", pooled_dh_mode},
              {"dh_constant", pooled_dh_constant}}}};
  }
  static TuningSection from_json(const cjson& j) {
    TuningSection t;
    if (j.contains("cl")) {
      const auto& c = j.at("cl");
      t.cl.batch_size = c.value("batch_size", t.cl.batch_size);
      t.cl.epochs = c.value("epochs", t.cl.epochs);
      t.cl.lr = c.value("lr", t.cl.lr);
      t.cl.tau = c.value("tau", t.cl.tau);
    }
    if (j.contains("reg")) {
      const auto& r = j.at("reg");
      t.reg.batch_size = r.value("batch_size", t.reg.batch_size);
      t.reg.epochs = r.value("epochs", t.reg.epochs);
      t.reg.lr = r.value("lr", t.reg.lr);
    }
    t.cl_rois = j.value("cl_rois", std::vector<std::string>{});
    t.reg_rois = j.value("reg_rois", std::vector<std::string>{});
    if (j.contains("pooled")) {
      const auto& p = j.at("pooled");
      t.pooled_enabled = p.value("enabled", false);
      t.pooled_rois = p.value("rois", std::vector<std::string>{});
      t.pooled_dh_mode = p.value("dh_mode", std::string("avg"));
      t.pooled_dh_constant = p.value("dh_constant", 0);
    }
    return t;
  }
};

struct ExternalSection {
  bool enabled = false;
  int subjects = 3;
  int n_images = 800;
  double noise_scale = 1.4;  // multiplies each ROI's noise_std
  Index top_k = 20;
  std::vector<std::string> rois;
  int source_subject = 0;  // whose tuned models are transferred

  cjson to_json() const {
    return {{"enabled", enabled},       {"subjects", subjects},
            {"n_images", n_images},     {"noise_scale", noise_scale},
            {"top_k", top_k},           {"rois", rois},
            {"source_subject", source_subject}};
  }
  static ExternalSection from_json(const cjson& j) {
    ExternalSection e;
    e.enabled = j.value("enabled", false);
    e.subjects = j.value("subjects", e.subjects);
    e.n_images = j.value("n_images", e.n_images);
    e.noise_scale = j.value("noise_scale", e.noise_scale);
    e.top_k = j.value("top_k", e.top_k);
    e.rois = j.value("rois", std::vector<std::string>{});
    e.source_subject = j.value("source_subject", 0);
    return e;
  }
};

struct ProbeSection {
  bool enabled = true;
  int n_images = 600;
  double test_fraction = 0.2;
  double l2 = 1e-4;

  cjson to_json() const {
    return {{"enabled", enabled},
            {"n_images", n_images},
            {"test_fraction", test_fraction},
            {"l2", l2}};
  }
  static ProbeSection from_json(const cjson& j) {
    ProbeSection p;
    p.enabled = j.value("enabled", true);
    p.n_images = j.value("n_images", p.n_images);
    p.test_fraction = j.value("test_fraction", p.test_fraction);
    p.l2 = j.value("l2", p.l2);
    return p;
  }
};

struct MISection {
  bool enabled = true;
  int batch_size = 64;
  int batches = 100;

  cjson to_json() const {
    return {{"enabled", enabled}, {"batch_size", batch_size}, {"batches", batches}};
  }
  static MISection from_json(const cjson& j) {
    MISection m;
    m.enabled = j.value("enabled", true);
    m.batch_size = j.value("batch_size", m.batch_size);
    m.batches = j.value("batches", m.batches);
    return m;
  }
};

struct SaliencySection {
  bool enabled = false;
  int n_images = 700;
  int voxels = 50;
  std::string teacher_tap = "conv2";
  double noise_std = 0.7;
  std::string side = "left";
  std::string conv_tap;  // empty = last conv tap
  int n_probe = 20;

  cjson to_json() const {
    return {{"enabled", enabled},     {"n_images", n_images},
            {"voxels", voxels},       {"teacher_tap", teacher_tap},
            {"noise_std", noise_std}, {"side", side},
            {"conv_tap", conv_tap},   {"n_probe", n_probe}};
  }
  static SaliencySection from_json(const cjson& j) {
    SaliencySection s;
    s.enabled = j.value("enabled", false);
    s.n_images = j.value("n_images", s.n_images);
    s.voxels = j.value("voxels", s.voxels);
    s.teacher_tap = j.value("teacher_tap", s.teacher_tap);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.side = j.value("side", s.side);
    s.conv_tap = j.value("conv_tap", std::string());
    s.n_probe = j.value("n_probe", s.n_probe);
    return s;
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  CohortConfig cohort;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  int pretrain_images = 1500;
  CVConfig cv;
  TuningSection tuning;
  ExternalSection external;
  ProbeSection probe;
  MISection mi;
  SaliencySection saliency;

  cjson to_json() const {
    cjson j;
    j["name"] = name;
    j["seed"] = seed;
    j["cohort"] = cohort.to_json();
    j["backbone"] = cjson::parse(backbone.to_json().dump());
    j["pretrain"] = {{"epochs", pretrain.epochs},
                     {"lr", pretrain.lr},
                     {"batch", pretrain.batch},
                     {"val_fraction", pretrain.val_fraction},
                     {"n_images", pretrain_images}};
    j["cv"] = cv.to_json();
    j["tuning"] = tuning.to_json();
    j["external"] = external.to_json();
    j["probe"] = probe.to_json();
    j["mi"] = mi.to_json();
    j["saliency"] = saliency.to_json();
    return j;
  }

  static ExperimentConfig from_json(const cjson& j) {
    ExperimentConfig c;
    c.name = j.value("name", std::string("experiment"));
    c.seed = j.value("seed", std::uint64_t(0));
    if (j.contains("cohort")) c.cohort = CohortConfig::from_json(j.at("cohort"));
    if (j.contains("backbone") && j.at("backbone").contains("conv_stages")) {
      c.backbone = BackboneConfig::from_json(
          json::parse(j.at("backbone").dump()));
    } else {
      int classes = c.cohort.images.num_classes;
      std::uint64_t bseed = 11;
      if (j.contains("backbone")) {
        classes = j.at("backbone").value("num_classes", classes);
        bseed = j.at("backbone").value("seed", bseed);
      }
      c.backbone =
          BackboneConfig::desk_default(classes, c.cohort.image_size, bseed);
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
      c.pretrain.lr = p.value("lr", c.pretrain.lr);
      c.pretrain.batch = p.value("batch", c.pretrain.batch);
      c.pretrain.val_fraction = p.value("val_fraction", c.pretrain.val_fraction);
      c.pretrain_images = p.value("n_images", c.pretrain_images);
    }
    if (j.contains("cv")) c.cv = CVConfig::from_json(j.at("cv"));
    if (j.contains("tuning")) c.tuning = TuningSection::from_json(j.at("tuning"));
    if (j.contains("external"))
      c.external = ExternalSection::from_json(j.at("external"));
    if (j.contains("probe")) c.probe = ProbeSection::from_json(j.at("probe"));
    if (j.contains("mi")) c.mi = MISection::from_json(j.at("mi"));
    if (j.contains("saliency"))
      c.saliency = SaliencySection::from_json(j.at("saliency"));
    c.finalize_seeds();
    return c;
  }

  /// Derive every stage seed from the one global seed. Idempotent; the
  /// pipeline runner applies it before any stage executes.
  void finalize_seeds() {
    pretrain.seed = seed_tag(seed, "pretrain");
    tuning.cl.seed = seed_tag(seed, "cl");
    tuning.reg.seed = seed_tag(seed, "reg");
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config not found: " + path.string());
    cjson j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw IoError("config parse error: " + std::string(e.what()));
    }
    return from_json(j);
  }

  /// Canonical serialization (sorted keys, defaults materialized).
  std::string canonical() const { return to_json().dump(); }

  /// FNV-1a hash of the canonical form, as 16 hex characters.
  std::string hash() const {
    const std::string text = canonical();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : text) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
  }
};

}  // namespace neuroenc
