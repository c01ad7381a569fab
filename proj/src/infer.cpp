#include "mus/infer.hpp"

#include <algorithm>
#include <cmath>

namespace mus {

namespace {

std::vector<int64_t> window_starts(int64_t extent, int64_t patch, int64_t step) {
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += step) {
    if (s + patch >= extent) {
      starts.push_back(extent - patch);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

std::vector<double> axis_weights(int64_t n, WindowWeight w) {
  std::vector<double> out(static_cast<size_t>(n), 1.0);
  if (w == WindowWeight::gaussian) {
    const double c = static_cast<double>(n - 1) / 2.0;
    const double sigma = static_cast<double>(n) / 8.0;
    for (int64_t i = 0; i < n; ++i) {
      const double z = (static_cast<double>(i) - c) / sigma;
      out[static_cast<size_t>(i)] = std::exp(-0.5 * z * z);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Prediction predict_volume(const MedMusNet<T>& model, const ImageVolume& vol,
                          double overlap, WindowWeight weighting) {
  vol.validate();
  require(overlap >= 0 && overlap < 1, "overlap must lie in [0, 1)");
  const auto& P = model.config.patch;  // (D, H, W)
  const int64_t C = model.config.num_classes;
  // Volume (nx, ny, nz) maps to tensor (D, H, W) = (nz, ny, nx).
  const int64_t D = vol.grid.dims[2], H = vol.grid.dims[1], W = vol.grid.dims[0];
  const int64_t PD = std::max(D, P[0]), PH = std::max(H, P[1]),
                PW = std::max(W, P[2]);
  const int64_t pad_d = (PD - D) / 2, pad_h = (PH - H) / 2, pad_w = (PW - W) / 2;

  // z-score over the original voxels, edge-replicated into the padded buffer
  double mean = 0;
  for (float v : vol.values) mean += v;
  mean /= static_cast<double>(vol.values.size());
  double var = 0;
  for (float v : vol.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(vol.values.size());
  const double sd = std::max(std::sqrt(var), 1e-12);

  std::vector<T> padded(static_cast<size_t>(PD * PH * PW));
  for (int64_t d = 0; d < PD; ++d) {
    const int64_t iz = std::clamp<int64_t>(d - pad_d, 0, D - 1);
    for (int64_t h = 0; h < PH; ++h) {
      const int64_t iy = std::clamp<int64_t>(h - pad_h, 0, H - 1);
      for (int64_t w = 0; w < PW; ++w) {
        const int64_t ix = std::clamp<int64_t>(w - pad_w, 0, W - 1);
        padded[static_cast<size_t>((d * PH + h) * PW + w)] =
            static_cast<T>((vol.at(ix, iy, iz) - mean) / sd);
      }
    }
  }

  const auto step = [&](int64_t p) {
    return std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(p * (1.0 - overlap))));
  };
  const auto sd_list = window_starts(PD, P[0], step(P[0]));
  const auto sh_list = window_starts(PH, P[1], step(P[1]));
  const auto sw_list = window_starts(PW, P[2], step(P[2]));
  const auto wd = axis_weights(P[0], weighting);
  const auto wh = axis_weights(P[1], weighting);
  const auto ww = axis_weights(P[2], weighting);

  std::vector<double> acc(static_cast<size_t>(C * PD * PH * PW), 0.0);
  std::vector<double> wsum(static_cast<size_t>(PD * PH * PW), 0.0);
  const int64_t psp = P[0] * P[1] * P[2];

  GradGuard no_grad(false);
  auto window = Tensor<T>::create({1, 1, P[0], P[1], P[2]});
  for (int64_t s0 : sd_list)
    for (int64_t s1 : sh_list)
      for (int64_t s2 : sw_list) {
        for (int64_t d = 0; d < P[0]; ++d)
          for (int64_t h = 0; h < P[1]; ++h) {
            const T* src =
                padded.data() + ((s0 + d) * PH + (s1 + h)) * PW + s2;
            std::copy_n(src, P[2],
                        window->value.data() + (d * P[1] + h) * P[2]);
          }
        auto out = model.forward(window);
        const auto& prob = out.prob[0];
        for (int64_t d = 0; d < P[0]; ++d)
          for (int64_t h = 0; h < P[1]; ++h)
            for (int64_t w = 0; w < P[2]; ++w) {
              const double wt = wd[static_cast<size_t>(d)] *
                                wh[static_cast<size_t>(h)] *
                                ww[static_cast<size_t>(w)];
              const int64_t g = ((s0 + d) * PH + (s1 + h)) * PW + (s2 + w);
              wsum[static_cast<size_t>(g)] += wt;
              for (int64_t c = 0; c < C; ++c)
                acc[static_cast<size_t>(c * PD * PH * PW + g)] +=
                    wt * prob->value[(c * psp + (d * P[1] + h) * P[2] + w)];
            }
      }

  Prediction pred;
  pred.prob_fg.grid = vol.grid;
  pred.prob_fg.values.resize(vol.values.size());
  pred.mask.grid = vol.grid;
  pred.mask.values.resize(vol.values.size());
  for (int64_t iz = 0; iz < D; ++iz)
    for (int64_t iy = 0; iy < H; ++iy)
      for (int64_t ix = 0; ix < W; ++ix) {
        const int64_t g =
            ((iz + pad_d) * PH + (iy + pad_h)) * PW + (ix + pad_w);
        const double wt = wsum[static_cast<size_t>(g)];
        double best = -1;
        int64_t best_c = 0;
        double p0 = 0;
        for (int64_t c = 0; c < C; ++c) {
          const double p = acc[static_cast<size_t>(c * PD * PH * PW + g)] / wt;
          if (c == 0) p0 = p;
          if (p > best) {
            best = p;
            best_c = c;
          }
        }
        const int64_t o = vol.grid.index(ix, iy, iz);
        pred.prob_fg.values[static_cast<size_t>(o)] =
            static_cast<float>(1.0 - p0);
        pred.mask.values[static_cast<size_t>(o)] =
            static_cast<uint8_t>(best_c);
      }
  return pred;
}

template Prediction predict_volume<float>(const MedMusNet<float>&,
                                          const ImageVolume&, double,
                                          WindowWeight);
template Prediction predict_volume<double>(const MedMusNet<double>&,
                                           const ImageVolume&, double,
                                           WindowWeight);

}  // namespace mus
