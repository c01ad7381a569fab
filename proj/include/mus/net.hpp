#pragma once

#include <filesystem>
#include <utility>

#include "mus/ops.hpp"

namespace mus {

struct ModelConfig {
  int64_t num_levels = 6;    // resolution levels; level i is 2^-i scale
  int64_t base_channels = 32;
  int64_t channel_cap = 320;
  int64_t num_classes = 2;
  bool mem_enabled = true;   // false = plain per-stage heads (ablation)
  double lrelu_slope = 0.01;
  std::array<int64_t, 3> patch = {32, 192, 256};  // (D, H, W)

  int64_t channels_at(int64_t level) const;
  void validate() const;

  // Full-scale settings: N=6, base 32, patch 32x192x256.
  static ModelConfig full_preset();
  // CPU-friendly: N=4, base 8, patch 16x48x64.
  static ModelConfig desk_preset();
  // Gradient-check scale: N=3, base 2, patch 8x16x16.
  static ModelConfig tiny_preset();
};

// conv(3x3x3, pad 1) + instance norm + leaky ReLU.
template <typename T>
struct ConvBlock {
  TensorPtr<T> conv_w, conv_b, norm_w, norm_b;
  std::array<int64_t, 3> stride{1, 1, 1};

  TensorPtr<T> operator()(const TensorPtr<T>& x, double slope) const;
};

template <typename T>
struct Head {  // 1x1x1 conv to num_classes logits
  TensorPtr<T> w, b;
};

template <typename T>
struct MemBlock {  // attention-weight convs: 3x3x3 then 1x1x1
  TensorPtr<T> w3, b3, w1, b1;
};

// All per-scale tensors retained from one forward pass; index n counts
// halvings from full resolution (prob[0] is full-res). feat[N-1] is the
// bottleneck feature map; embed/attw are only populated for gated stages.
template <typename T>
struct MultiScaleOutputs {
  std::vector<TensorPtr<T>> prob;   // size N, softmax over channels
  std::vector<TensorPtr<T>> feat;   // size N, decoder features
  std::vector<TensorPtr<T>> embed;  // size N-1, concat(F_fine, upsampled fg)
  std::vector<TensorPtr<T>> attw;   // size N-1, pre-softmax attention weights
};

template <typename T>
struct MemResult {
  TensorPtr<T> prob, embed, attw;
};

// Gates a fine decoder feature map with the coarser stage's probability map:
// the foreground channel of p_coarse is upsampled to f_fine's grid,
// concatenated, run through the two attention convs, and the softmaxed
// attention multiplies f_fine before the stage head + softmax.
template <typename T>
MemResult<T> mem_forward(const TensorPtr<T>& p_coarse,
                         const TensorPtr<T>& f_fine, const MemBlock<T>& mem,
                         const Head<T>& head);

// Encoder/decoder segmentation network with per-stage deep-supervision heads
// and optional mask-gated stages. Parameters live in shared tensors so the
// same object trains and infers.
template <typename T>
struct MedMusNet {
  ModelConfig config;

  std::vector<std::array<ConvBlock<T>, 2>> enc;  // size N
  std::vector<ConvBlock<T>> down;                // size N-1, stride 2
  struct DecoderStage {
    TensorPtr<T> up_w, up_b;  // transposed conv, kernel 2 stride 2
    ConvBlock<T> block0, block1;
  };
  std::vector<DecoderStage> dec;  // size N-1, index = resolution level
  std::vector<Head<T>> head;      // size N, index = scale
  std::vector<MemBlock<T>> mem;   // size N-1 when gating enabled, else empty

  MultiScaleOutputs<T> forward(const TensorPtr<T>& patch) const;

  std::vector<std::pair<std::string, TensorPtr<T>>> named_params() const;
  std::vector<TensorPtr<T>> params() const;
  int64_t param_count() const;
  void set_requires_grad(bool on);
};

// Deterministic Kaiming (fan-in, leaky-ReLU gain) initialization.
template <typename T>
MedMusNet<T> build_model(const ModelConfig& config, uint64_t seed);

// Normalized deep-supervision weights w_n = 2^-n / sum_k 2^-k.
std::vector<double> loss_weights(int64_t n_scales);

template <typename T>
struct LossBreakdown {
  TensorPtr<T> total;             // scalar graph node (call backward on this)
  double value = 0;
  std::vector<double> per_scale;  // Dice + CE at each scale
  std::vector<double> weights;
};

// Dice + cross entropy per scale against a nearest-downsampled label pyramid,
// combined with loss_weights.
template <typename T>
LossBreakdown<T> deep_supervision_loss(
    const MultiScaleOutputs<T>& outputs, const LabelPatch& gt,
    LabelDownsample gt_mode = LabelDownsample::nearest);

// Checkpoint: 8-byte magic, little-endian u64 header length, JSON header
// (dtype, model config, normalization tag, parameter names + shapes), then
// the raw little-endian parameter arrays in header order.
template <typename T>
void save_model(const MedMusNet<T>& model, const std::filesystem::path& path);

template <typename T>
MedMusNet<T> load_model(const std::filesystem::path& path);

// dtype string stored in a checkpoint header ("float32" or "float64").
std::string checkpoint_dtype(const std::filesystem::path& path);

}  // namespace mus
