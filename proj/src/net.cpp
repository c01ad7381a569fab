#include "mus/net.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format requires a little-endian host");

namespace mus {

namespace fs = std::filesystem;
using nlohmann::json;

int64_t ModelConfig::channels_at(int64_t level) const {
  int64_t c = base_channels;
  for (int64_t i = 0; i < level; ++i) c = std::min(c * 2, channel_cap);
  return c;
}

void ModelConfig::validate() const {
  require(num_levels >= 2, "num_levels must be >= 2");
  require(base_channels >= 1 && channel_cap >= base_channels,
          "channel counts must satisfy 1 <= base <= cap");
  require(num_classes >= 2, "num_classes must be >= 2");
  const int64_t div = int64_t(1) << (num_levels - 1);
  for (int64_t p : patch)
    require(p >= div && p % div == 0,
            "patch dims must be divisible by 2^(num_levels-1) = " +
                std::to_string(div));
}

ModelConfig ModelConfig::full_preset() {
  ModelConfig c;
  c.num_levels = 6;
  c.base_channels = 32;
  c.channel_cap = 320;
  c.patch = {32, 192, 256};
  return c;
}

ModelConfig ModelConfig::desk_preset() {
  ModelConfig c;
  c.num_levels = 4;
  c.base_channels = 8;
  c.channel_cap = 80;
  c.patch = {16, 48, 64};
  return c;
}

ModelConfig ModelConfig::tiny_preset() {
  ModelConfig c;
  c.num_levels = 3;
  c.base_channels = 2;
  c.channel_cap = 20;
  c.patch = {8, 16, 16};
  return c;
}

template <typename T>
TensorPtr<T> ConvBlock<T>::operator()(const TensorPtr<T>& x,
                                      double slope) const {
  Conv3dParams<T> p{conv_w, conv_b, stride, {1, 1, 1}};
  return leaky_relu(instance_norm(conv3d(x, p), norm_w, norm_b), slope);
}

namespace {

template <typename T>
TensorPtr<T> head_logits(const Head<T>& h, const TensorPtr<T>& f) {
  Conv3dParams<T> p{h.w, h.b, {1, 1, 1}, {0, 0, 0}};
  return conv3d(f, p);
}

template <typename T>
void kaiming_fill(Tensor<T>& w, int64_t fan_in, double slope,
                  std::mt19937_64& rng) {
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  fill_normal(w, rng, 0.0, gain / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
TensorPtr<T> param(const Shape5& s) {
  return Tensor<T>::create(s, /*requires_grad=*/true);
}

template <typename T>
TensorPtr<T> zeros_param(int64_t c) {
  return param<T>({1, c, 1, 1, 1});
}

template <typename T>
TensorPtr<T> ones_param(int64_t c) {
  auto t = zeros_param<T>(c);
  std::fill(t->value.begin(), t->value.end(), T(1));
  return t;
}

template <typename T>
ConvBlock<T> make_block(int64_t c_in, int64_t c_out,
                        std::array<int64_t, 3> stride, double slope,
                        std::mt19937_64& rng) {
  ConvBlock<T> b;
  b.stride = stride;
  b.conv_w = param<T>({c_out, c_in, 3, 3, 3});
  kaiming_fill(*b.conv_w, c_in * 27, slope, rng);
  b.conv_b = zeros_param<T>(c_out);
  b.norm_w = ones_param<T>(c_out);
  b.norm_b = zeros_param<T>(c_out);
  return b;
}

template <typename T>
void collect_block(std::vector<std::pair<std::string, TensorPtr<T>>>& out,
                   const std::string& prefix, const ConvBlock<T>& b) {
  out.emplace_back(prefix + ".conv_w", b.conv_w);
  out.emplace_back(prefix + ".conv_b", b.conv_b);
  out.emplace_back(prefix + ".norm_w", b.norm_w);
  out.emplace_back(prefix + ".norm_b", b.norm_b);
}

}  // namespace

template <typename T>
MedMusNet<T> build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  MedMusNet<T> m;
  m.config = config;
  std::mt19937_64 rng(seed);
  const int64_t N = config.num_levels;
  const double sl = config.lrelu_slope;

  for (int64_t i = 0; i < N; ++i) {
    const int64_t c = config.channels_at(i);
    const int64_t c_in = i == 0 ? 1 : c;
    m.enc.push_back({make_block<T>(c_in, c, {1, 1, 1}, sl, rng),
                     make_block<T>(c, c, {1, 1, 1}, sl, rng)});
  }
  for (int64_t i = 0; i + 1 < N; ++i)
    m.down.push_back(make_block<T>(config.channels_at(i),
                                   config.channels_at(i + 1), {2, 2, 2}, sl,
                                   rng));
  for (int64_t n = 0; n + 1 < N; ++n) {
    const int64_t c_fine = config.channels_at(n);
    const int64_t c_coarse = config.channels_at(n + 1);
    typename MedMusNet<T>::DecoderStage d;
    d.up_w = param<T>({c_coarse, c_fine, 2, 2, 2});
    kaiming_fill(*d.up_w, c_coarse * 8, sl, rng);
    d.up_b = zeros_param<T>(c_fine);
    d.block0 = make_block<T>(2 * c_fine, c_fine, {1, 1, 1}, sl, rng);
    d.block1 = make_block<T>(c_fine, c_fine, {1, 1, 1}, sl, rng);
    m.dec.push_back(std::move(d));
  }
  for (int64_t n = 0; n < N; ++n) {
    const int64_t c = config.channels_at(n);
    Head<T> h;
    h.w = param<T>({config.num_classes, c, 1, 1, 1});
    kaiming_fill(*h.w, c, sl, rng);
    h.b = zeros_param<T>(config.num_classes);
    m.head.push_back(std::move(h));
  }
  if (config.mem_enabled) {
    for (int64_t n = 0; n + 1 < N; ++n) {
      const int64_t c = config.channels_at(n);
      MemBlock<T> mb;
      mb.w3 = param<T>({c, c + 1, 3, 3, 3});
      kaiming_fill(*mb.w3, (c + 1) * 27, sl, rng);
      mb.b3 = zeros_param<T>(c);
      mb.w1 = param<T>({c, c, 1, 1, 1});
      kaiming_fill(*mb.w1, c, sl, rng);
      mb.b1 = zeros_param<T>(c);
      m.mem.push_back(std::move(mb));
    }
  }
  return m;
}

template <typename T>
MemResult<T> mem_forward(const TensorPtr<T>& p_coarse,
                         const TensorPtr<T>& f_fine, const MemBlock<T>& mem,
                         const Head<T>& head) {
  require(p_coarse != nullptr && f_fine != nullptr, "mem_forward: null input");
  const Shape5& sp = p_coarse->shape;
  const Shape5& sf = f_fine->shape;
  require(sp.b == sf.b && sp.d * 2 == sf.d && sp.h * 2 == sf.h &&
              sp.w * 2 == sf.w,
          "mem_forward: coarse map " + sp.str() +
              " is not half the fine feature grid " + sf.str());
  // Guard against callers passing logits instead of probabilities.
  const int64_t spv = sp.spatial();
  for (int64_t b = 0; b < sp.b; ++b)
    for (int64_t i = 0; i < spv; ++i) {
      double sum = 0;
      for (int64_t c = 0; c < sp.c; ++c) {
        const double v = p_coarse->value[(b * sp.c + c) * spv + i];
        require(v >= -1e-4 && v <= 1.0 + 1e-4,
                "mem_forward: coarse map is not a probability map");
        sum += v;
      }
      require(std::abs(sum - 1.0) < 1e-4,
              "mem_forward: coarse map channels do not sum to 1");
    }

  auto up = upsample2(foreground_channel(p_coarse), Resample::trilinear);
  auto embed = concat_channels(f_fine, up);
  Conv3dParams<T> p3{mem.w3, mem.b3, {1, 1, 1}, {1, 1, 1}};
  Conv3dParams<T> p1{mem.w1, mem.b1, {1, 1, 1}, {0, 0, 0}};
  auto attw = conv3d(conv3d(embed, p3), p1);
  auto gated = elementwise_mul(f_fine, softmax_channels(attw));
  auto prob = softmax_channels(head_logits(head, gated));
  return {prob, embed, attw};
}

template <typename T>
MultiScaleOutputs<T> MedMusNet<T>::forward(const TensorPtr<T>& patch) const {
  require(patch != nullptr, "forward: null patch");
  const Shape5& s = patch->shape;
  require(s.c == 1, "forward: expected a single input channel");
  require(s.d == config.patch[0] && s.h == config.patch[1] &&
              s.w == config.patch[2],
          "forward: patch spatial dims " + s.str() + " do not match config");
  const int64_t N = config.num_levels;
  const double sl = config.lrelu_slope;

  MultiScaleOutputs<T> out;
  out.prob.resize(static_cast<size_t>(N));
  out.feat.resize(static_cast<size_t>(N));
  out.embed.assign(static_cast<size_t>(N - 1), nullptr);
  out.attw.assign(static_cast<size_t>(N - 1), nullptr);

  std::vector<TensorPtr<T>> skip(static_cast<size_t>(N));
  TensorPtr<T> x = patch;
  for (int64_t i = 0; i < N; ++i) {
    if (i > 0) x = down[static_cast<size_t>(i - 1)](x, sl);
    x = enc[static_cast<size_t>(i)][0](x, sl);
    x = enc[static_cast<size_t>(i)][1](x, sl);
    skip[static_cast<size_t>(i)] = x;
  }

  out.feat[static_cast<size_t>(N - 1)] = skip[static_cast<size_t>(N - 1)];
  out.prob[static_cast<size_t>(N - 1)] = softmax_channels(
      head_logits(head[static_cast<size_t>(N - 1)], skip[static_cast<size_t>(N - 1)]));

  for (int64_t n = N - 2; n >= 0; --n) {
    const auto& d = dec[static_cast<size_t>(n)];
    Conv3dParams<T> up{d.up_w, d.up_b, {2, 2, 2}, {0, 0, 0}};
    TensorPtr<T> y = conv_transpose3d(out.feat[static_cast<size_t>(n + 1)], up);
    y = concat_channels(y, skip[static_cast<size_t>(n)]);
    y = d.block0(y, sl);
    y = d.block1(y, sl);
    out.feat[static_cast<size_t>(n)] = y;
    if (config.mem_enabled) {
      auto r = mem_forward(out.prob[static_cast<size_t>(n + 1)], y,
                           mem[static_cast<size_t>(n)],
                           head[static_cast<size_t>(n)]);
      out.prob[static_cast<size_t>(n)] = r.prob;
      out.embed[static_cast<size_t>(n)] = r.embed;
      out.attw[static_cast<size_t>(n)] = r.attw;
    } else {
      out.prob[static_cast<size_t>(n)] =
          softmax_channels(head_logits(head[static_cast<size_t>(n)], y));
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, TensorPtr<T>>> MedMusNet<T>::named_params()
    const {
  std::vector<std::pair<std::string, TensorPtr<T>>> out;
  for (size_t i = 0; i < enc.size(); ++i) {
    collect_block(out, "enc" + std::to_string(i) + ".block0", enc[i][0]);
    collect_block(out, "enc" + std::to_string(i) + ".block1", enc[i][1]);
  }
  for (size_t i = 0; i < down.size(); ++i)
    collect_block(out, "down" + std::to_string(i), down[i]);
  for (size_t n = 0; n < dec.size(); ++n) {
    const std::string p = "dec" + std::to_string(n);
    out.emplace_back(p + ".up_w", dec[n].up_w);
    out.emplace_back(p + ".up_b", dec[n].up_b);
    collect_block(out, p + ".block0", dec[n].block0);
    collect_block(out, p + ".block1", dec[n].block1);
  }
  for (size_t n = 0; n < head.size(); ++n) {
    out.emplace_back("head" + std::to_string(n) + ".w", head[n].w);
    out.emplace_back("head" + std::to_string(n) + ".b", head[n].b);
  }
  for (size_t n = 0; n < mem.size(); ++n) {
    const std::string p = "mem" + std::to_string(n);
    out.emplace_back(p + ".w3", mem[n].w3);
    out.emplace_back(p + ".b3", mem[n].b3);
    out.emplace_back(p + ".w1", mem[n].w1);
    out.emplace_back(p + ".b1", mem[n].b1);
  }
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> MedMusNet<T>::params() const {
  std::vector<TensorPtr<T>> out;
  for (auto& [name, p] : named_params()) out.push_back(p);
  return out;
}

template <typename T>
int64_t MedMusNet<T>::param_count() const {
  int64_t n = 0;
  for (auto& p : params()) n += p->numel();
  return n;
}

template <typename T>
void MedMusNet<T>::set_requires_grad(bool on) {
  for (auto& p : params()) p->requires_grad = on;
}

std::vector<double> loss_weights(int64_t n_scales) {
  require(n_scales >= 1, "need at least one supervised scale");
  std::vector<double> w(static_cast<size_t>(n_scales));
  double sum = 0;
  for (int64_t n = 0; n < n_scales; ++n) {
    w[static_cast<size_t>(n)] = std::ldexp(1.0, static_cast<int>(-n));
    sum += w[static_cast<size_t>(n)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

template <typename T>
LossBreakdown<T> deep_supervision_loss(const MultiScaleOutputs<T>& outputs,
                                       const LabelPatch& gt,
                                       LabelDownsample gt_mode) {
  const int64_t n_scales = static_cast<int64_t>(outputs.prob.size());
  require(n_scales >= 1, "deep_supervision_loss: no probability maps");
  const Shape5& s0 = outputs.prob[0]->shape;
  require(gt.b == s0.b && gt.d == s0.d && gt.h == s0.h && gt.w == s0.w,
          "deep_supervision_loss: label dims do not match full-res output");

  LossBreakdown<T> lb;
  lb.weights = loss_weights(n_scales);
  LabelPatch g = gt;
  TensorPtr<T> total;
  for (int64_t n = 0; n < n_scales; ++n) {
    if (n > 0) g = downsample2_labels(g, gt_mode);
    const auto& p = outputs.prob[static_cast<size_t>(n)];
    auto l = add(dice_loss(p, one_hot<T>(g, p->shape.c)), ce_loss(p, g));
    lb.per_scale.push_back(static_cast<double>(l->item()));
    auto wl = scale(l, lb.weights[static_cast<size_t>(n)]);
    total = total ? add(total, wl) : wl;
  }
  lb.total = total;
  lb.value = static_cast<double>(total->item());
  return lb;
}

namespace {

constexpr char kMagic[8] = {'M', 'U', 'S', 'C', 'K', 'P', 'T', 1};

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "float32";
  else
    return "float64";
}

json config_to_json(const ModelConfig& c) {
  return {{"num_levels", c.num_levels},      {"base_channels", c.base_channels},
          {"channel_cap", c.channel_cap},    {"num_classes", c.num_classes},
          {"mem_enabled", c.mem_enabled},    {"lrelu_slope", c.lrelu_slope},
          {"patch", c.patch}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.num_levels = j.at("num_levels").get<int64_t>();
  c.base_channels = j.at("base_channels").get<int64_t>();
  c.channel_cap = j.at("channel_cap").get<int64_t>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.mem_enabled = j.at("mem_enabled").get<bool>();
  c.lrelu_slope = j.at("lrelu_slope").get<double>();
  for (int a = 0; a < 3; ++a) c.patch[a] = j.at("patch").at(a).get<int64_t>();
  return c;
}

json read_header(std::ifstream& in, const fs::path& path) {
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kMagic, 8) == 0,
          path.string() + ": not a checkpoint file");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  require(in.good(), path.string() + ": truncated checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), path.string() + ": truncated checkpoint header");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": bad checkpoint header: " +
                                e.what());
  }
}

}  // namespace

template <typename T>
void save_model(const MedMusNet<T>& model, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto named = model.named_params();
  json params = json::array();
  for (auto& [name, p] : named) {
    const Shape5& s = p->shape;
    params.push_back({{"name", name},
                      {"shape", std::array<int64_t, 5>{s.b, s.c, s.d, s.h, s.w}}});
  }
  json header = {{"version", 1},
                 {"dtype", dtype_name<T>()},
                 {"normalization", "zscore_per_volume"},
                 {"model", config_to_json(model.config)},
                 {"params", params}};
  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open for writing: " + path.string());
  out.write(kMagic, 8);
  const uint64_t len = htext.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (auto& [name, p] : named)
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(T)));
  require(out.good(), "write failed: " + path.string());
}

template <typename T>
MedMusNet<T> load_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open: " + path.string());
  const json header = read_header(in, path);
  require(header.value("dtype", "") == dtype_name<T>(),
          path.string() + ": checkpoint dtype is '" +
              header.value("dtype", "") + "', expected '" + dtype_name<T>() +
              "'");
  MedMusNet<T> model = build_model<T>(config_from_json(header.at("model")), 0);
  auto named = model.named_params();
  std::map<std::string, TensorPtr<T>> by_name(named.begin(), named.end());
  const auto& params = header.at("params");
  require(params.size() == named.size(),
          path.string() + ": checkpoint has " + std::to_string(params.size()) +
              " params, model needs " + std::to_string(named.size()));
  for (const auto& entry : params) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    require(it != by_name.end(), path.string() + ": unknown param " + name);
    Shape5 s;
    s.b = entry.at("shape").at(0).get<int64_t>();
    s.c = entry.at("shape").at(1).get<int64_t>();
    s.d = entry.at("shape").at(2).get<int64_t>();
    s.h = entry.at("shape").at(3).get<int64_t>();
    s.w = entry.at("shape").at(4).get<int64_t>();
    require(s == it->second->shape, path.string() + ": shape mismatch for " +
                                        name + ": stored " + s.str() +
                                        ", model " + it->second->shape.str());
    in.read(reinterpret_cast<char*>(it->second->value.data()),
            static_cast<std::streamsize>(it->second->value.size() * sizeof(T)));
    require(in.good(), path.string() + ": truncated parameter data");
  }
  in.peek();
  require(in.eof(), path.string() + ": trailing bytes after parameter data");
  return model;
}

std::string checkpoint_dtype(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open: " + path.string());
  return read_header(in, path).value("dtype", "");
}

#define MUS_INSTANTIATE_NET(T)                                               \
  template struct ConvBlock<T>;                                              \
  template struct MedMusNet<T>;                                              \
  template MedMusNet<T> build_model<T>(const ModelConfig&, uint64_t);        \
  template MemResult<T> mem_forward<T>(const TensorPtr<T>&,                  \
                                       const TensorPtr<T>&,                  \
                                       const MemBlock<T>&, const Head<T>&);  \
  template LossBreakdown<T> deep_supervision_loss<T>(                        \
      const MultiScaleOutputs<T>&, const LabelPatch&, LabelDownsample);      \
  template void save_model<T>(const MedMusNet<T>&, const fs::path&);         \
  template MedMusNet<T> load_model<T>(const fs::path&);

MUS_INSTANTIATE_NET(float)
MUS_INSTANTIATE_NET(double)

#undef MUS_INSTANTIATE_NET

}  // namespace mus
