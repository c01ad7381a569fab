#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mus/geometry.hpp"

namespace mus::phantom {

struct LesionSpec {
  Vec3 center_mm{};
  double radius_mm = 0;
};

// Analytic prostate-with-lesions scene swept by a fan-geometry probe.
// Intensities: uniform background, a brighter ellipsoidal prostate, and
// hypoechoic (darker) spherical lesions whose core intensity is the
// surrounding prostate intensity divided by `contrast`. Edges blend over
// `edge_softness_mm`; ground-truth labels stay hard. Speckle is multiplicative
// gamma noise with mean 1 and standard deviation `speckle_scale`, applied to
// frame pixels after projection. Optional shadow wedges attenuate everything
// beyond a random depth inside a narrow angular band.
struct PhantomConfig {
  uint64_t seed = 1;
  FanGeometry geometry;
  Vec3 prostate_center_mm{};
  Vec3 prostate_semi_axes_mm{};
  int64_t lesion_count = 1;
  double lesion_radius_min_mm = 1.2;
  double lesion_radius_max_mm = 2.0;
  double contrast = 2.0;        // prostate tissue / lesion core intensity ratio
  double speckle_scale = 0.3;   // std of the mean-1 multiplicative noise; 0 = off
  double edge_softness_mm = 0.5;
  double background_intensity = 100.0;
  double prostate_brightness = 1.1;  // multiplicative vs background
  int64_t shadow_count = 0;
  double scene_spacing_mm = 0;  // 0 = min of the frame pixel spacings

  void validate() const;
};

struct Phantom {
  ImageStack intensity;       // speckled frames, clamped to [0, 255]
  LabelStack gt;              // lesion labels per frame, noise-free
  LabelStack prostate;        // prostate mask per frame
  ImageVolume scene;          // noise-free Cartesian scene
  LabelVolume gt_volume;      // hard lesion labels on the scene grid
  LabelVolume prostate_volume;
  std::vector<LesionSpec> lesions;
};

// Deterministic per seed: the same config yields bit-identical stacks.
// Throws if a lesion cannot be placed fully inside the prostate.
Phantom generate(const PhantomConfig& cfg);

// Pinned small sweep used by the desk-scale pipeline: 65 frames over
// [-16, +16] degrees, 113 radial x 33 axial pixels at 0.25 mm, probe radius
// 10 mm, with a prostate that fits inside the swept wedge.
PhantomConfig desk_config(uint64_t seed);

}  // namespace mus::phantom
