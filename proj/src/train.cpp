#include "mus/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "mus/optim.hpp"

namespace mus {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  require(lr >= 0, "lr must be >= 0");
  require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(stop_at_train_dsc >= 0 && stop_at_train_dsc <= 1,
          "stop_at_train_dsc must lie in [0, 1]");
}

namespace {

template <typename T>
void check_samples(const MedMusNet<T>& model, const std::vector<Sample<T>>& data) {
  require(!data.empty(), "training dataset is empty");
  const auto& p = model.config.patch;
  for (const auto& s : data) {
    require(s.patch != nullptr, "null sample patch");
    const Shape5& sh = s.patch->shape;
    require(sh.b == 1 && sh.c == 1 && sh.d == p[0] && sh.h == p[1] &&
                sh.w == p[2],
            "sample shape " + sh.str() + " does not match model patch size");
    require(s.gt.b == 1 && s.gt.d == p[0] && s.gt.h == p[1] && s.gt.w == p[2],
            "sample label dims do not match model patch size");
  }
}

template <typename T>
std::pair<TensorPtr<T>, LabelPatch> gather_batch(
    const std::vector<Sample<T>>& data, const std::vector<size_t>& order,
    size_t begin, size_t end) {
  const Shape5 s1 = data[order[begin]].patch->shape;
  const int64_t bsz = static_cast<int64_t>(end - begin);
  auto x = Tensor<T>::create({bsz, 1, s1.d, s1.h, s1.w});
  LabelPatch gt{bsz, s1.d, s1.h, s1.w, {}};
  gt.v.resize(static_cast<size_t>(gt.numel()));
  const size_t sp = static_cast<size_t>(s1.spatial());
  for (size_t k = begin; k < end; ++k) {
    const Sample<T>& smp = data[order[k]];
    std::copy_n(smp.patch->value.data(), sp, x->value.data() + (k - begin) * sp);
    std::copy_n(smp.gt.v.data(), sp, gt.v.data() + (k - begin) * sp);
  }
  return {x, gt};
}

double binary_dice(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  int64_t na = 0, nb = 0, ni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool fa = a[i] != 0, fb = b[i] != 0;
    na += fa;
    nb += fb;
    ni += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

std::string checkpoint_name(int64_t epoch) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%04lld.ckpt",
                static_cast<long long>(epoch));
  return buf;
}

}  // namespace

template <typename T>
double mean_train_dsc(const MedMusNet<T>& model,
                      const std::vector<Sample<T>>& data) {
  require(!data.empty(), "no samples to evaluate");
  GradGuard no_grad(false);
  double sum = 0;
  for (const auto& s : data) {
    auto out = model.forward(s.patch);
    sum += binary_dice(argmax_channels(*out.prob[0]).v, s.gt.v);
  }
  return sum / static_cast<double>(data.size());
}

template <typename T>
TrainResult train_model(MedMusNet<T>& model, const std::vector<Sample<T>>& data,
                        const TrainConfig& cfg) {
  cfg.validate();
  check_samples(model, data);
  model.set_requires_grad(true);

  auto params = model.params();
  std::unique_ptr<SGD<T>> sgd;
  std::unique_ptr<Adam<T>> adam;
  if (cfg.optimizer == Optimizer::sgd_nesterov)
    sgd = std::make_unique<SGD<T>>(params, cfg.lr, cfg.momentum,
                                   cfg.weight_decay, /*nesterov=*/true);
  else
    adam = std::make_unique<Adam<T>>(params, cfg.lr, 0.9, 0.999, 1e-8,
                                     cfg.weight_decay);
  auto zero_grad = [&] { sgd ? sgd->zero_grad() : adam->zero_grad(); };
  auto step = [&] { sgd ? sgd->step() : adam->step(); };

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});

  TrainResult res;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::vector<double> scale_sum;
    int64_t seen = 0;
    for (size_t begin = 0; begin < order.size();
         begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end =
          std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      auto [x, gt] = gather_batch(data, order, begin, end);
      zero_grad();
      auto out = model.forward(x);
      auto lb = deep_supervision_loss(out, gt);
      if (!std::isfinite(lb.value))
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
      backward(lb.total);
      step();
      const auto bsz = static_cast<int64_t>(end - begin);
      loss_sum += lb.value * static_cast<double>(bsz);
      if (scale_sum.empty()) scale_sum.assign(lb.per_scale.size(), 0.0);
      for (size_t i = 0; i < lb.per_scale.size(); ++i)
        scale_sum[i] += lb.per_scale[i] * static_cast<double>(bsz);
      seen += bsz;
    }

    EpochStats es;
    es.epoch = epoch;
    es.loss = loss_sum / static_cast<double>(seen);
    es.per_scale = scale_sum;
    for (auto& v : es.per_scale) v /= static_cast<double>(seen);

    const bool last_epoch = epoch == cfg.epochs;
    const bool eval_now =
        last_epoch || (cfg.stop_at_train_dsc > 0 && epoch % cfg.eval_every == 0);
    if (eval_now) es.train_dsc = mean_train_dsc(model, data);
    res.curve.push_back(es);
    res.epochs_run = epoch;

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        epoch % cfg.checkpoint_every == 0)
      save_model(model, cfg.out_dir / checkpoint_name(epoch));

    if (cfg.stop_at_train_dsc > 0 && eval_now &&
        es.train_dsc >= cfg.stop_at_train_dsc) {
      res.stopped_early = !last_epoch;
      break;
    }
  }

  double last_dsc = res.curve.back().train_dsc;
  if (std::isnan(last_dsc)) last_dsc = mean_train_dsc(model, data);
  res.final_train_dsc = last_dsc;

  if (!cfg.out_dir.empty()) {
    save_model(model, cfg.out_dir / "checkpoint_final.ckpt");
    save_loss_curve(cfg.out_dir / "loss_curve.csv", res.curve);
  }
  return res;
}

void save_loss_curve(const fs::path& path, const std::vector<EpochStats>& curve) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open for writing: " + path.string());
  const size_t n_scales = curve.empty() ? 0 : curve.front().per_scale.size();
  out << "epoch,loss,train_dsc";
  for (size_t i = 0; i < n_scales; ++i) out << ",loss_scale" << i;
  out << "\n";
  char buf[32];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const auto& es : curve) {
    out << es.epoch << "," << fmt(es.loss) << ",";
    if (!std::isnan(es.train_dsc)) out << fmt(es.train_dsc);
    for (double v : es.per_scale) out << "," << fmt(v);
    out << "\n";
  }
  require(out.good(), "write failed: " + path.string());
}

template <typename T>
Sample<T> make_sample(const ImageVolume& img, const LabelVolume& gt,
                      const std::array<int64_t, 3>& patch_dims) {
  img.validate();
  gt.validate();
  require(img.grid == gt.grid, "intensity and label grids differ");
  const int64_t D = patch_dims[0], H = patch_dims[1], W = patch_dims[2];
  require(D >= 1 && H >= 1 && W >= 1, "patch dims must be >= 1");
  const auto& dims = img.grid.dims;  // (nx, ny, nz) maps to (W, H, D)

  Sample<T> s;
  s.patch = Tensor<T>::create({1, 1, D, H, W});
  s.gt = LabelPatch{1, D, H, W, {}};
  s.gt.v.resize(static_cast<size_t>(D * H * W));
  auto src = [](int64_t o, int64_t n, int64_t m) {
    return std::clamp<int64_t>(o + (n - m) / 2, 0, n - 1);
  };
  for (int64_t d = 0; d < D; ++d) {
    const int64_t iz = src(d, dims[2], D);
    for (int64_t h = 0; h < H; ++h) {
      const int64_t iy = src(h, dims[1], H);
      for (int64_t w = 0; w < W; ++w) {
        const int64_t ix = src(w, dims[0], W);
        const int64_t o = (d * H + h) * W + w;
        s.patch->value[static_cast<size_t>(o)] =
            static_cast<T>(img.at(ix, iy, iz));
        s.gt.v[static_cast<size_t>(o)] = gt.at(ix, iy, iz);
      }
    }
  }
  double mean = 0;
  for (T v : s.patch->value) mean += v;
  mean /= static_cast<double>(s.patch->numel());
  double var = 0;
  for (T v : s.patch->value) var += (v - mean) * (v - mean);
  var /= static_cast<double>(s.patch->numel());
  const double sd = std::max(std::sqrt(var), 1e-12);
  for (T& v : s.patch->value) v = static_cast<T>((v - mean) / sd);
  return s;
}

#define MUS_INSTANTIATE_TRAIN(T)                                           \
  template TrainResult train_model<T>(MedMusNet<T>&,                      \
                                      const std::vector<Sample<T>>&,      \
                                      const TrainConfig&);                 \
  template double mean_train_dsc<T>(const MedMusNet<T>&,                  \
                                    const std::vector<Sample<T>>&);       \
  template Sample<T> make_sample<T>(const ImageVolume&, const LabelVolume&, \
                                    const std::array<int64_t, 3>&);

MUS_INSTANTIATE_TRAIN(float)
MUS_INSTANTIATE_TRAIN(double)

#undef MUS_INSTANTIATE_TRAIN

}  // namespace mus
