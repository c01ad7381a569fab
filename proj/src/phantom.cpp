#include "mus/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mus::phantom {
namespace {

// Smooth 0 -> 1 ramp over signed distance (positive = inside), width w in mm.
double edge_ramp(double signed_dist_mm, double w) {
  if (w <= 0) return signed_dist_mm >= 0 ? 1.0 : 0.0;
  const double t = std::clamp(signed_dist_mm / w + 0.5, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double ellipsoid_norm(const Vec3& p, const Vec3& c, const Vec3& ax) {
  double s = 0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / ax[a];
    s += d * d;
  }
  return std::sqrt(s);
}

struct Shadow {
  double theta_deg = 0;
  double half_width_deg = 0;
  double depth_start_mm = 0;
  double attenuation = 1.0;
};

}  // namespace

void PhantomConfig::validate() const {
  geometry.validate();
  for (int a = 0; a < 3; ++a)
    require(prostate_semi_axes_mm[a] > 0, "prostate semi-axes must be > 0");
  require(lesion_count >= 0, "lesion count must be >= 0");
  if (lesion_count > 0) {
    require(lesion_radius_min_mm > 0 &&
                lesion_radius_max_mm >= lesion_radius_min_mm,
            "lesion radii must be positive with min <= max");
  }
  require(contrast > 0, "contrast must be > 0");
  require(speckle_scale >= 0, "speckle scale must be >= 0");
  require(edge_softness_mm >= 0, "edge softness must be >= 0");
  require(background_intensity > 0, "background intensity must be > 0");
  require(prostate_brightness > 0, "prostate brightness must be > 0");
  require(shadow_count >= 0, "shadow count must be >= 0");
  require(scene_spacing_mm >= 0, "scene spacing must be >= 0");
}

Phantom generate(const PhantomConfig& cfg) {
  cfg.validate();
  const FanGeometry& geom = cfg.geometry;
  std::mt19937_64 rng(cfg.seed);

  // Place lesion balls fully inside the prostate. Sufficient condition via the
  // ellipsoid norm's triangle inequality: |c - P|_E + r / min_axis <= 1.
  const double min_axis = std::min(
      {cfg.prostate_semi_axes_mm[0], cfg.prostate_semi_axes_mm[1],
       cfg.prostate_semi_axes_mm[2]});
  std::vector<LesionSpec> lesions;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> rad(cfg.lesion_radius_min_mm,
                                             cfg.lesion_radius_max_mm);
  for (int64_t i = 0; i < cfg.lesion_count; ++i) {
    const double r = rad(rng);
    require(r < min_axis, "lesion outside prostate: radius exceeds smallest semi-axis");
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Vec3 c;
      for (int a = 0; a < 3; ++a)
        c[a] = cfg.prostate_center_mm[a] + unit(rng) * cfg.prostate_semi_axes_mm[a];
      const double margin =
          ellipsoid_norm(c, cfg.prostate_center_mm, cfg.prostate_semi_axes_mm) +
          r / min_axis;
      if (margin <= 1.0) {
        lesions.push_back({c, r});
        placed = true;
      }
    }
    require(placed, "lesion outside prostate: no admissible center found");
  }

  std::vector<Shadow> shadows;
  if (cfg.shadow_count > 0) {
    std::uniform_real_distribution<double> ang(geom.min_angle_deg(),
                                               geom.max_angle_deg());
    std::uniform_real_distribution<double> hw(0.5, 2.5);
    std::uniform_real_distribution<double> depth(0.2 * geom.radial_extent_mm(),
                                                 0.6 * geom.radial_extent_mm());
    std::uniform_real_distribution<double> att(0.2, 0.6);
    for (int64_t i = 0; i < cfg.shadow_count; ++i)
      shadows.push_back({ang(rng), hw(rng), depth(rng), att(rng)});
  }

  // Noise-free Cartesian scene plus hard labels on the same grid.
  const double spacing =
      cfg.scene_spacing_mm > 0
          ? cfg.scene_spacing_mm
          : std::min(geom.axial_spacing_mm, geom.radial_spacing_mm);
  const GridSpec grid = default_grid(geom, spacing);

  Phantom out;
  out.lesions = lesions;
  out.scene.grid = grid;
  out.scene.values.assign(static_cast<size_t>(grid.voxel_count()), 0.0f);
  out.gt_volume.grid = grid;
  out.gt_volume.values.assign(static_cast<size_t>(grid.voxel_count()), 0);
  out.prostate_volume.grid = grid;
  out.prostate_volume.values.assign(static_cast<size_t>(grid.voxel_count()), 0);

  const double prostate_val = cfg.background_intensity * cfg.prostate_brightness;
  const double lesion_val = prostate_val / cfg.contrast;
  parallel_chunks(grid.dims[2], [&](int64_t z0, int64_t z1) {
    for (int64_t z = z0; z < z1; ++z)
      for (int64_t y = 0; y < grid.dims[1]; ++y)
        for (int64_t x = 0; x < grid.dims[0]; ++x) {
          const Vec3 p = grid.voxel_center(x, y, z);
          const double en =
              ellipsoid_norm(p, cfg.prostate_center_mm, cfg.prostate_semi_axes_mm);
          // Signed mm distance to the prostate surface, conservative near the
          // smallest axis; exact would need iterative point-to-ellipsoid.
          const double prost_dist = (1.0 - en) * min_axis;
          double val = cfg.background_intensity +
                       (prostate_val - cfg.background_intensity) *
                           edge_ramp(prost_dist, cfg.edge_softness_mm);
          bool in_lesion = false;
          for (const LesionSpec& l : lesions) {
            const double d = std::sqrt(
                (p[0] - l.center_mm[0]) * (p[0] - l.center_mm[0]) +
                (p[1] - l.center_mm[1]) * (p[1] - l.center_mm[1]) +
                (p[2] - l.center_mm[2]) * (p[2] - l.center_mm[2]));
            val += (lesion_val - val) *
                   edge_ramp(l.radius_mm - d, cfg.edge_softness_mm);
            in_lesion = in_lesion || d <= l.radius_mm;
          }
          const int64_t idx = grid.index(x, y, z);
          out.scene.values[static_cast<size_t>(idx)] = static_cast<float>(val);
          if (en <= 1.0) out.prostate_volume.values[static_cast<size_t>(idx)] = 1;
          if (in_lesion) out.gt_volume.values[static_cast<size_t>(idx)] = 1;
        }
  });

  out.intensity = project_to_frames(out.scene, geom, FanInterp::trilinear,
                                    cfg.background_intensity);
  out.gt = project_to_frames(out.gt_volume, geom, FanInterp::nearest, 0.0);
  out.prostate =
      project_to_frames(out.prostate_volume, geom, FanInterp::nearest, 0.0);

  // Shadows then speckle, both multiplicative; serial frame-major order so the
  // draw sequence is independent of the thread count.
  for (int64_t f = 0; f < geom.frame_count(); ++f) {
    const double theta = geom.angles_deg[static_cast<size_t>(f)];
    for (const Shadow& s : shadows) {
      if (std::fabs(theta - s.theta_deg) > s.half_width_deg) continue;
      for (int64_t v = 0; v < geom.radial_pixels; ++v) {
        if (static_cast<double>(v) * geom.radial_spacing_mm < s.depth_start_mm)
          continue;
        for (int64_t u = 0; u < geom.axial_pixels; ++u)
          out.intensity.at(f, v, u) *= static_cast<float>(s.attenuation);
      }
    }
  }
  if (cfg.speckle_scale > 0) {
    const double k = 1.0 / (cfg.speckle_scale * cfg.speckle_scale);
    std::gamma_distribution<double> speckle(k, 1.0 / k);  // mean 1, var s^2
    for (auto& frame : out.intensity.frames)
      for (float& px : frame) px *= static_cast<float>(speckle(rng));
  }
  for (auto& frame : out.intensity.frames)
    for (float& px : frame) px = std::clamp(px, 0.0f, 255.0f);

  out.intensity.validate();
  out.gt.validate();
  out.prostate.validate();
  return out;
}

PhantomConfig desk_config(uint64_t seed) {
  PhantomConfig cfg;
  cfg.seed = seed;
  cfg.geometry.probe_radius_mm = 10.0;
  cfg.geometry.axial_pixels = 33;
  cfg.geometry.radial_pixels = 113;
  cfg.geometry.axial_spacing_mm = 0.25;
  cfg.geometry.radial_spacing_mm = 0.25;
  cfg.geometry.angles_deg.resize(65);
  for (int i = 0; i < 65; ++i)
    cfg.geometry.angles_deg[static_cast<size_t>(i)] = -16.0 + 0.5 * i;
  cfg.prostate_center_mm = {23.8, 0.0, 4.0};
  cfg.prostate_semi_axes_mm = {7.5, 5.5, 3.0};
  cfg.lesion_count = 1;
  cfg.lesion_radius_min_mm = 1.2;
  cfg.lesion_radius_max_mm = 2.0;
  cfg.contrast = 2.0;
  cfg.speckle_scale = 0.3;
  cfg.validate();
  return cfg;
}

}  // namespace mus::phantom
