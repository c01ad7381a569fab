#pragma once

#include <array>
#include <random>

#include "mus/tensor.hpp"

namespace mus {

/// Integer class labels on a (B, D, H, W) grid; the target side of the
/// segmentation losses and the ground-truth pyramid.
struct LabelPatch {
  int64_t b = 1, d = 1, h = 1, w = 1;
  std::vector<uint8_t> v;

  int64_t numel() const { return b * d * h * w; }
};

/// Weights for conv3d / conv_transpose3d. The kernel is always stored in
/// convolution orientation (c_out, c_in, kD, kH, kW); conv_transpose3d with
/// the same params is the exact adjoint of conv3d, mapping c_out channels
/// back to c_in. Bias (optional) is per output channel of the op it is used
/// with: c_out for conv3d, c_in for conv_transpose3d.
template <typename T>
struct Conv3dParams {
  TensorPtr<T> kernel;
  TensorPtr<T> bias;
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> padding{0, 0, 0};
};

template <typename T>
TensorPtr<T> conv3d(const TensorPtr<T>& x, const Conv3dParams<T>& p);

template <typename T>
TensorPtr<T> conv_transpose3d(const TensorPtr<T>& x, const Conv3dParams<T>& p);

/// Per (batch, channel) normalization over the spatial dims followed by an
/// affine transform; scale/shift have shape (1, C, 1, 1, 1).
template <typename T>
TensorPtr<T> instance_norm(const TensorPtr<T>& x, const TensorPtr<T>& scale,
                           const TensorPtr<T>& shift, double eps = 1e-5);

template <typename T>
TensorPtr<T> leaky_relu(const TensorPtr<T>& x, double slope = 0.01);

/// Channel softmax at every (b, d, h, w), stabilized by max subtraction.
template <typename T>
TensorPtr<T> softmax_channels(const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> elementwise_mul(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, double s);

/// Sum of every element as a scalar-shaped tensor.
template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x);

enum class Resample { nearest, mean, trilinear };

/// Factor-2 spatial downsampling; modes: nearest (picks the block corner)
/// or mean. Output dims = floor(input / 2).
template <typename T>
TensorPtr<T> downsample2(const TensorPtr<T>& x, Resample mode);

/// Factor-2 spatial upsampling; modes: nearest or trilinear (half-voxel
/// center alignment, edge-clamped).
template <typename T>
TensorPtr<T> upsample2(const TensorPtr<T>& x, Resample mode);

/// Collapses a probability map to a single foreground channel:
/// sum of channels 1..C-1, i.e. 1 - P(background).
template <typename T>
TensorPtr<T> foreground_channel(const TensorPtr<T>& prob);

/// Soft Dice loss pooled over batch and spatial dims, averaged over
/// foreground channels: 1 - mean_c (2*sum(p*g) + eps) / (sum p + sum g + eps).
template <typename T>
TensorPtr<T> dice_loss(const TensorPtr<T>& prob, const TensorPtr<T>& target_one_hot,
                       double eps = 1e-5);

/// Cross entropy over probabilities: -mean over voxels of log prob at the
/// target channel.
template <typename T>
TensorPtr<T> ce_loss(const TensorPtr<T>& prob, const LabelPatch& target);

template <typename T>
TensorPtr<T> one_hot(const LabelPatch& labels, int64_t num_classes);

enum class LabelDownsample { nearest, max };

/// Factor-2 label downsampling: nearest picks the block corner; max keeps
/// the largest label in each 2x2x2 block (foreground preserving for binary
/// masks).
LabelPatch downsample2_labels(const LabelPatch& labels, LabelDownsample mode);

/// Channel argmax; first channel wins ties.
template <typename T>
LabelPatch argmax_channels(const Tensor<T>& prob);

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double mean, double stddev);

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo, double hi);

}  // namespace mus
