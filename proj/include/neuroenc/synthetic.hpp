#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "neuroenc/backbone.hpp"
#include "neuroenc/dataset.hpp"
#include "neuroenc/rng.hpp"

namespace neuroenc {

struct SyntheticROISpec {
  std::string name;
  int v = 0;
  std::string teacher_tap;
  double noise_std = 0.0;
  Hemisphere laterality = Hemisphere::none;
};

struct SyntheticImageSpec {
  bool bilateral = false;   // one object per half, label taken from label_side
  Hemisphere label_side = Hemisphere::left;
  int num_classes = 16;     // 4 shapes x 4 textures
};

struct SyntheticSpec {
  std::string subject_id = "s00";
  int n_images = 0;
  int image_size = 64;
  std::vector<SyntheticROISpec> rois;
  std::uint64_t teacher_seed = 1;
  std::uint64_t subject_seed = 2;
  SyntheticImageSpec images;
  BackboneConfig teacher_config;  // seed field is overridden by teacher_seed

  void validate() const {
    require(n_images >= 1, "synthetic: n_images must be >= 1");
    require(image_size >= 8, "synthetic: image_size must be >= 8");
    require(images.num_classes >= 2 && images.num_classes <= 16,
            "synthetic: num_classes must be in [2,16]");
    for (const auto& r : rois) {
      require(r.v >= 1, "synthetic ROI " + r.name + ": v must be >= 1");
      require(r.noise_std >= 0.0,
              "synthetic ROI " + r.name + ": noise_std must be >= 0");
    }
  }
};

namespace synth_detail {

// Textured-shape drawing. Classes enumerate shape (disk, ring, square,
// triangle) x texture (flat, stripes, checker, dots).
struct ObjectParams {
  int cls = 0;
  double cx = 0, cy = 0, radius = 0, angle = 0;
  float color_a[3] = {0, 0, 0};
  float color_b[3] = {0, 0, 0};
};

inline ObjectParams random_object(Rng& rng, int cls, int size, double x_lo,
                                  double x_hi) {
  ObjectParams o;
  o.cls = cls;
  o.radius = size * rng.uniform(0.14, 0.2);
  o.cx = rng.uniform(x_lo * size + o.radius, x_hi * size - o.radius);
  o.cy = rng.uniform(o.radius, size - o.radius);
  o.angle = rng.uniform(0.0, 3.14159265358979323846);
  for (int c = 0; c < 3; ++c) {
    o.color_a[c] = static_cast<float>(rng.uniform(0.55, 1.0));
    o.color_b[c] = static_cast<float>(rng.uniform(0.0, 0.45));
  }
  return o;
}

inline double shape_sdf(const ObjectParams& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy;
  const int shape = o.cls % 4;
  switch (shape) {
    case 0:  // disk
      return std::sqrt(dx * dx + dy * dy) - o.radius;
    case 1: {  // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return std::abs(d - 0.75 * o.radius) - 0.3 * o.radius;
    }
    case 2: {  // rotated square
      const double ca = std::cos(o.angle), sa = std::sin(o.angle);
      const double u = std::abs(ca * dx + sa * dy), v = std::abs(-sa * dx + ca * dy);
      return std::max(u, v) - 0.85 * o.radius;
    }
    default: {  // triangle (upward, rotated)
      const double ca = std::cos(o.angle), sa = std::sin(o.angle);
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      const double r = 0.95 * o.radius;
      const double d1 = -v - r * 0.5;
      const double d2 = 0.86602540378 * u + 0.5 * v - r * 0.5;
      const double d3 = -0.86602540378 * u + 0.5 * v - r * 0.5;
      return std::max(d1, std::max(d2, d3));
    }
  }
}

inline bool texture_on(const ObjectParams& o, double x, double y) {
  const int tex = (o.cls / 4) % 4;
  const double s = std::max(o.radius / 3.0, 1.5);
  switch (tex) {
    case 0:  // flat
      return true;
    case 1: {  // stripes
      const double t = std::cos(o.angle) * x + std::sin(o.angle) * y;
      return std::fmod(std::floor(t / s), 2.0) == 0.0;
    }
    case 2: {  // checker
      return std::fmod(std::floor(x / s) + std::floor(y / s), 2.0) == 0.0;
    }
    default: {  // dots
      const double px = std::fmod(x, 2 * s) - s, py = std::fmod(y, 2 * s) - s;
      return px * px + py * py < 0.45 * s * s;
    }
  }
}

inline void draw_object(MatF& images, Index row, int size, const ObjectParams& o) {
  const Index plane = static_cast<Index>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d = shape_sdf(o, x + 0.5, y + 0.5);
      if (d >= 1.0) continue;
      const float alpha = static_cast<float>(std::clamp(0.5 * (1.0 - d), 0.0, 1.0));
      const bool on = texture_on(o, x + 0.5, y + 0.5);
      for (int c = 0; c < 3; ++c) {
        const Index idx = c * plane + static_cast<Index>(y) * size + x;
        const float col = on ? o.color_a[c] : o.color_b[c];
        images(row, idx) = (1.0f - alpha) * images(row, idx) + alpha * col;
      }
    }
  }
}

inline void draw_background(MatF& images, Index row, int size, Rng& rng) {
  const Index plane = static_cast<Index>(size) * size;
  float base[3], grad[3];
  const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
  for (int c = 0; c < 3; ++c) {
    base[c] = static_cast<float>(rng.uniform(0.2, 0.6));
    grad[c] = static_cast<float>(rng.uniform(-0.15, 0.15));
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = (gx * x + gy * y) / size;
      for (int c = 0; c < 3; ++c) {
        const Index idx = c * plane + static_cast<Index>(y) * size + x;
        const double v = base[c] + grad[c] * t + 0.02 * rng.normal();
        images(row, idx) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

}  // namespace synth_detail

/// Seeded procedural stimulus generator: textured shapes over smooth noisy
/// backgrounds. In bilateral mode each image carries one object per half and
/// the label comes from label_side.
inline StimulusSet generate_stimuli(int n_images, int image_size,
                                    const SyntheticImageSpec& spec,
                                    std::uint64_t seed,
                                    const std::string& id_prefix) {
  StimulusSet s;
  s.height = s.width = image_size;
  s.num_classes = spec.num_classes;
  s.images.resize(n_images, Index(3) * image_size * image_size);
  Rng rng(seed_tag(seed, "stimuli"));
  for (Index i = 0; i < n_images; ++i) {
    synth_detail::draw_background(s.images, i, image_size, rng);
    if (spec.bilateral) {
      const int cls_left = rng.below_int(spec.num_classes);
      const int cls_right = rng.below_int(spec.num_classes);
      auto left = synth_detail::random_object(rng, cls_left, image_size, 0.02, 0.48);
      auto right = synth_detail::random_object(rng, cls_right, image_size, 0.52, 0.98);
      synth_detail::draw_object(s.images, i, image_size, left);
      synth_detail::draw_object(s.images, i, image_size, right);
      s.labels.push_back(spec.label_side == Hemisphere::right ? cls_right : cls_left);
    } else {
      const int cls = rng.below_int(spec.num_classes);
      auto obj = synth_detail::random_object(rng, cls, image_size, 0.02, 0.98);
      synth_detail::draw_object(s.images, i, image_size, obj);
      s.labels.push_back(cls);
    }
    s.image_ids.push_back(id_prefix + "_img" + std::to_string(i));
  }
  return s;
}

/// Zero out the normalized pixels of the half opposite to `side`.
template <typename T>
void mask_opposite_half(Mat<T>& normalized, int height, int width,
                        Hemisphere side) {
  if (side == Hemisphere::none) return;
  const Index plane = static_cast<Index>(height) * width;
  const Index half = width / 2;
  for (int c = 0; c < 3; ++c)
    for (Index y = 0; y < height; ++y) {
      const Index base = c * plane + y * width;
      if (side == Hemisphere::left)
        normalized.middleCols(base + half, width - half).setZero();
      else
        normalized.middleCols(base, half).setZero();
    }
}

/// Planted-response generator. Responses are a random voxel mixing of teacher
/// tap features, standardized per voxel (zero mean, unit variance over the
/// generated set), plus homoscedastic Gaussian noise. The planted noise
/// ceiling 1/(1 + noise_std^2) is recorded per voxel.
inline SubjectDataset generate_synthetic_subject(const SyntheticSpec& spec) {
  spec.validate();
  BackboneConfig tc = spec.teacher_config;
  if (tc.conv_stages.empty())
    tc = BackboneConfig::desk_default(spec.images.num_classes, spec.image_size);
  tc.seed = spec.teacher_seed;
  tc.image_size = spec.image_size;
  BackboneF teacher(tc);

  SubjectDataset ds;
  ds.subject_id = spec.subject_id;
  ds.stimuli = generate_stimuli(spec.n_images, spec.image_size, spec.images,
                                spec.subject_seed, spec.subject_id);

  for (std::size_t ri = 0; ri < spec.rois.size(); ++ri) {
    const auto& rs = spec.rois[ri];
    const int t = teacher.tap_index(rs.teacher_tap);  // throws on bad tap
    const Index d_t = teacher.taps()[static_cast<std::size_t>(t)].dim;

    // Teacher features, lateralized by masking the uninformative half.
    MatD phi(spec.n_images, d_t);
    const Index chunk = 128;
    for (Index start = 0; start < spec.n_images; start += chunk) {
      const Index len = std::min<Index>(chunk, spec.n_images - start);
      MatF block = ds.stimuli.images.middleRows(start, len);
      MatF x = normalize_images<float>(block, spec.image_size, spec.image_size,
                                       ds.stimuli.norm_mean, ds.stimuli.norm_std);
      mask_opposite_half(x, spec.image_size, spec.image_size, rs.laterality);
      phi.middleRows(start, len) = teacher.forward(x, t).cast<double>();
    }

    Rng mix_rng(seed_combine(seed_tag(spec.subject_seed, "mixing"),
                             static_cast<std::uint64_t>(ri)));
    MatD w_t(rs.v, d_t);
    nn::gaussian_init(w_t, mix_rng, 1.0 / std::sqrt(static_cast<double>(d_t)));
    MatD signal = phi * w_t.transpose();  // n x v

    // Standardize each voxel's signal so the analytic ceiling is exact.
    for (Index k = 0; k < rs.v; ++k) {
      const double mean = signal.col(k).mean();
      const double var =
          (signal.col(k).array() - mean).square().mean();
      require(var > 1e-18, "synthetic ROI " + rs.name +
                               ": degenerate planted signal at voxel " +
                               std::to_string(k));
      signal.col(k) = (signal.col(k).array() - mean) / std::sqrt(var);
    }

    Rng noise_rng(seed_combine(seed_tag(spec.subject_seed, "noise"),
                               static_cast<std::uint64_t>(ri)));
    ROIResponse roi;
    roi.roi_name = rs.name;
    roi.hemisphere = rs.laterality;
    roi.responses.resize(spec.n_images, rs.v);
    for (Index i = 0; i < spec.n_images; ++i)
      for (Index k = 0; k < rs.v; ++k)
        roi.responses(i, k) = static_cast<float>(
            signal(i, k) + rs.noise_std * noise_rng.normal());
    const float ceiling =
        static_cast<float>(1.0 / (1.0 + rs.noise_std * rs.noise_std));
    roi.noise_ceiling = VecF::Constant(rs.v, ceiling);
    ds.rois.push_back(std::move(roi));
  }
  return ds;
}

}  // namespace neuroenc
