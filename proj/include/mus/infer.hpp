#pragma once

#include "mus/geometry.hpp"
#include "mus/net.hpp"

namespace mus {

enum class WindowWeight { uniform, gaussian };

struct Prediction {
  ImageVolume prob_fg;  // foreground probability per voxel
  LabelVolume mask;     // argmax class per voxel
};

// Sliding-window inference over a Cartesian intensity volume: the volume is
// z-scored, tiled with patch-sized windows at the given overlap fraction, and
// per-window class probabilities are blended with the chosen window
// weighting (gaussian: per-axis sigma = patch/8). Volumes smaller than the
// patch are edge-padded internally; windows run serially so results are
// independent of thread count.
template <typename T>
Prediction predict_volume(const MedMusNet<T>& model, const ImageVolume& vol,
                          double overlap = 0.5,
                          WindowWeight weighting = WindowWeight::gaussian);

}  // namespace mus
