#pragma once

#include <filesystem>
#include <limits>

#include "mus/geometry.hpp"
#include "mus/net.hpp"

namespace mus {

template <typename T>
struct Sample {
  TensorPtr<T> patch;  // (1, 1, D, H, W), normalized intensity
  LabelPatch gt;       // b = 1, same spatial dims
};

enum class Optimizer { sgd_nesterov, adam };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  int64_t batch_size = 2;
  int64_t epochs = 100;
  Optimizer optimizer = Optimizer::sgd_nesterov;
  uint64_t seed = 0;
  std::filesystem::path out_dir;   // empty: write no checkpoint/curve files
  int64_t checkpoint_every = 0;    // epochs between checkpoints; 0 = final only
  double stop_at_train_dsc = 0.0;  // stop once training DSC reaches this; 0 = off
  int64_t eval_every = 5;          // epochs between training-DSC evaluations

  void validate() const;
};

struct EpochStats {
  int64_t epoch = 0;  // 1-based
  double loss = 0;
  std::vector<double> per_scale;
  // NaN when the epoch ended without a DSC evaluation pass.
  double train_dsc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double final_train_dsc = 0;
  int64_t epochs_run = 0;
  bool stopped_early = false;
};

// Shuffled mini-batch training, deterministic per seed in single-threaded
// mode. Non-finite losses abort with a diagnostic. When out_dir is set,
// writes checkpoint_final.ckpt, periodic checkpoints (checkpoint_every), and
// loss_curve.csv.
template <typename T>
TrainResult train_model(MedMusNet<T>& model, const std::vector<Sample<T>>& data,
                        const TrainConfig& cfg);

// Mean over samples of binary foreground Dice between argmax of the full-res
// output and the labels (no-grad forward passes); empty vs empty counts as 1.
template <typename T>
double mean_train_dsc(const MedMusNet<T>& model,
                      const std::vector<Sample<T>>& data);

// CSV: epoch, loss, train_dsc (blank when not evaluated), per-scale losses.
void save_loss_curve(const std::filesystem::path& path,
                     const std::vector<EpochStats>& curve);

// Center crop/pad an aligned intensity + label volume pair to patch dims
// (D, H, W) = (nz, ny, nx) and z-score the intensity over the crop. Edges
// replicate when the volume is smaller than the patch.
template <typename T>
Sample<T> make_sample(const ImageVolume& img, const LabelVolume& gt,
                      const std::array<int64_t, 3>& patch_dims);

}  // namespace mus
