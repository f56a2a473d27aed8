#pragma once

#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dffnet/dfb.hpp"
#include "dffnet/ops.hpp"
#include "dffnet/params.hpp"
#include "dffnet/ssafb.hpp"

namespace dffnet {

struct ModelConfig {
  std::size_t pca_components = 30;
  std::size_t patch = 11;
  std::size_t width = 64;
  std::size_t dffm_count = 2;
  std::size_t filter_bases = 4;
  std::size_t num_classes = 5;
  std::size_t aux_channels = 1;
  std::size_t head_hidden = 64;
  std::size_t stem_kernels = 8;
  bool use_dfb = true;
  bool use_ssafb = true;
  std::uint64_t seed = 42;

  /// Spectral taps of the 3-D stem, shortened when fewer components exist.
  std::size_t stem_depth_kernel() const { return std::min<std::size_t>(7, pca_components); }
  static constexpr std::size_t stem_depth_stride = 2;
  std::size_t stem_depth_out() const { return (pca_components - stem_depth_kernel()) / stem_depth_stride + 1; }
  std::size_t head_inputs() const { return 2 * width * patch * patch; }

  void validate() const {
    if (dffm_count < 1) throw Error("model: dffm_count must be >= 1");
    if (width == 0 || width % 4 != 0) throw Error("model: width must be a positive multiple of 4");
    if (patch == 0) throw Error("model: patch size must be positive");
    if (pca_components == 0 || aux_channels == 0) throw Error("model: empty modality");
    if (num_classes < 2) throw Error("model: need at least 2 classes");
    if (filter_bases == 0 || head_hidden == 0 || stem_kernels == 0) throw Error("model: zero-sized layer");
  }

  dfb::DfbConfig dfb() const { return dfb::DfbConfig{width, patch, patch, filter_bases, {}}; }
  ssafb::SsafbConfig ssafb() const { return ssafb::SsafbConfig{width, 4, 5}; }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    auto s = [](auto v) { return std::to_string(v); };
    return {{"pca", s(pca_components)},     {"patch", s(patch)},
            {"width", s(width)},            {"dffm", s(dffm_count)},
            {"bases", s(filter_bases)},     {"classes", s(num_classes)},
            {"aux_channels", s(aux_channels)}, {"head_hidden", s(head_hidden)},
            {"stem_kernels", s(stem_kernels)}, {"use_dfb", use_dfb ? "1" : "0"},
            {"use_ssafb", use_ssafb ? "1" : "0"}, {"seed", s(seed)}};
  }

  /// Applies known keys; returns false for an unknown key.
  bool set(const std::string& key, const std::string& value) {
    auto u = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    auto b = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw Error("expected boolean for '" + key + "', got '" + value + "'");
    };
    if (key == "pca") pca_components = u();
    else if (key == "patch") patch = u();
    else if (key == "width") width = u();
    else if (key == "dffm") dffm_count = u();
    else if (key == "bases") filter_bases = u();
    else if (key == "classes") num_classes = u();
    else if (key == "aux_channels") aux_channels = u();
    else if (key == "head_hidden") head_hidden = u();
    else if (key == "stem_kernels") stem_kernels = u();
    else if (key == "use_dfb") use_dfb = b();
    else if (key == "use_ssafb") use_ssafb = b();
    else if (key == "seed") seed = std::stoull(value);
    else return false;
    return true;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// DFFNet: modality stems, a stack of DFFMs (per-modality DFB + shared
/// SSAFB), per-stream 3x3 convolutions, and a two-layer classifier over the
/// flattened pair of feature maps.
template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t C = cfg_.width;
    init::dense(params_, "stem.hsi.conv3d", Shape{cfg_.stem_kernels, 1, cfg_.stem_depth_kernel(), 3, 3}, rng);
    init::dense(params_, "stem.hsi.proj", Shape{C, cfg_.stem_kernels * cfg_.stem_depth_out(), 1, 1}, rng);
    init::dense(params_, "stem.aux.conv", Shape{C, cfg_.aux_channels, 3, 3}, rng);
    for (std::size_t i = 0; i < cfg_.dffm_count; ++i) {
      const std::string m = "dffm" + std::to_string(i);
      if (cfg_.use_dfb) {
        dfb::add_params(params_, m + ".dfb_h", cfg_.dfb(), rng);
        dfb::add_params(params_, m + ".dfb_x", cfg_.dfb(), rng);
      }
      if (cfg_.use_ssafb) ssafb::add_params(params_, m + ".ssafb", cfg_.ssafb(), rng);
    }
    init::dense(params_, "post.hsi", Shape{C, C, 3, 3}, rng);
    init::dense(params_, "post.aux", Shape{C, C, 3, 3}, rng);
    init::dense(params_, "head.fc1", Shape{cfg_.head_hidden, cfg_.head_inputs()}, rng);
    init::dense(params_, "head.fc2", Shape{cfg_.num_classes, cfg_.head_hidden}, rng);
  }

  Model(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    Model fresh(cfg_);
    if (fresh.params_.names() != params_.names()) throw Error("parameter set does not match model configuration");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_.at(i).shape() != fresh.params_.at(i).shape()) {
        throw Error("parameter '" + params_.names()[i] + "' has shape " + shape_str(params_.at(i).shape()) +
                    ", expected " + shape_str(fresh.params_.at(i).shape()));
      }
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
};

namespace model {

template <class T>
struct Streams {
  Var<T> hsi;
  Var<T> aux;
};

/// HSI: 3-D conv (k_d x 3 x 3, spectral stride 2, no spectral padding, same
/// spatial) + relu, flatten kernels x depth into channels, 1x1 conv to C + relu.
/// Aux: 3x3 conv to C + relu.
template <class T>
Streams<T> stem_forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> hsi, Var<T> aux) {
  Tape<T>& tape = *hsi.tape;
  const Shape want_h{hsi.shape().empty() ? 0 : hsi.dim(0), 1, cfg.pca_components, cfg.patch, cfg.patch};
  if (hsi.shape() != want_h) tape.fail("model.stem", "hsi patch " + shape_str(hsi.shape()) + ", expected " + shape_str(want_h));
  const Shape want_x{hsi.dim(0), cfg.aux_channels, cfg.patch, cfg.patch};
  if (aux.shape() != want_x) tape.fail("model.stem", "aux patch " + shape_str(aux.shape()) + ", expected " + shape_str(want_x));
  const std::size_t B = hsi.dim(0), C = cfg.width;

  ops::ConvSpec s3;
  s3.in_channels = 1;
  s3.out_channels = cfg.stem_kernels;
  s3.kernel = {cfg.stem_depth_kernel(), 3, 3};
  s3.stride = {ModelConfig::stem_depth_stride, 1, 1};
  s3.padding = {0, 1, 1};
  Var<T> v = ops::relu(ops::conv3d(hsi, p["stem.hsi.conv3d.w"], p["stem.hsi.conv3d.b"], s3));
  const std::size_t flat = cfg.stem_kernels * cfg.stem_depth_out();
  v = ops::reshape(v, Shape{B, flat, cfg.patch, cfg.patch});
  Var<T> fh = ops::relu(ops::conv2d(v, p["stem.hsi.proj.w"], p["stem.hsi.proj.b"], ops::ConvSpec::same2d(flat, C, 1)));
  Var<T> fx = ops::relu(ops::conv2d(aux, p["stem.aux.conv.w"], p["stem.aux.conv.b"], ops::ConvSpec::same2d(cfg.aux_channels, C, 3)));
  return {fh, fx};
}

/// One DFFM: D_h = DFB_h(F_h), D_x = DFB_x(F_x), F_o = SSAFB(D_h, D_x),
/// outputs (D_h + F_o, D_x + F_o). Disabled blocks act as identity / zero.
template <class T>
Streams<T> dffm_forward(const BoundParams<T>& p, const ModelConfig& cfg, std::size_t index, Streams<T> in) {
  const std::string m = "dffm" + std::to_string(index);
  Streams<T> d = in;
  if (cfg.use_dfb) {
    d.hsi = dfb::forward(p, m + ".dfb_h", cfg.dfb(), in.hsi);
    d.aux = dfb::forward(p, m + ".dfb_x", cfg.dfb(), in.aux);
  }
  if (!cfg.use_ssafb) return d;
  auto s = ssafb::forward(p, m + ".ssafb", cfg.ssafb(), d.hsi, d.aux);
  return {s.hsi, s.aux};
}

/// Raw class logits, B x num_classes.
template <class T>
Var<T> forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> hsi, Var<T> aux) {
  Streams<T> s = stem_forward(p, cfg, hsi, aux);
  for (std::size_t i = 0; i < cfg.dffm_count; ++i) s = dffm_forward(p, cfg, i, s);
  const auto post = ops::ConvSpec::same2d(cfg.width, cfg.width, 3);
  Var<T> h = ops::relu(ops::conv2d(s.hsi, p["post.hsi.w"], p["post.hsi.b"], post));
  Var<T> x = ops::relu(ops::conv2d(s.aux, p["post.aux.w"], p["post.aux.b"], post));
  Var<T> joint = ops::reshape(ops::concat<T>({h, x}, 1), Shape{hsi.dim(0), cfg.head_inputs()});
  Var<T> z = ops::relu(ops::linear(joint, p["head.fc1.w"], p["head.fc1.b"]));
  return ops::linear(z, p["head.fc2.w"], p["head.fc2.b"]);
}

/// Exact number of learnable scalars for a configuration.
inline std::size_t count_parameters(const ModelConfig& cfg) { return Model<float>(cfg).params().scalar_count(); }

/// Multiply-accumulates of one forward pass for one sample, by layer family.
inline std::map<std::string, double> estimate_macs(const ModelConfig& cfg) {
  const double C = static_cast<double>(cfg.width), P = static_cast<double>(cfg.patch * cfg.patch);
  const double H = static_cast<double>(cfg.patch), Wf = static_cast<double>(cfg.patch / 2 + 1);
  std::map<std::string, double> m;
  m["stem"] = static_cast<double>(cfg.stem_kernels * cfg.stem_depth_out() * cfg.stem_depth_kernel() * 9) * P +
              static_cast<double>(cfg.stem_kernels * cfg.stem_depth_out()) * C * P +
              static_cast<double>(cfg.aux_channels) * 9 * C * P;
  // Separable transform: width pass 2*W*Wf per row, height pass 4*H per bin.
  const double fft = C * (2.0 * H * H * Wf + 4.0 * H * H * Wf);
  double dfb = 0;
  if (cfg.use_dfb) {
    dfb = C * C / 4 * 2 + static_cast<double>(cfg.filter_bases) * 2 * C * H * Wf +  // mlp + mixture
          4 * fft + 4 * C * H * Wf +                                                 // transforms + product
          9 * C * P + 9 * 2 * C * H * Wf;                                           // depthwise branches
  }
  double ssafb = 0;
  if (cfg.use_ssafb) ssafb = C * C / 2 + 50 * P + 2 * C * C * P;
  m["dffm"] = static_cast<double>(cfg.dffm_count) * (2 * dfb + ssafb);
  m["post"] = 2 * 9 * C * C * P;
  m["head"] = static_cast<double>(cfg.head_inputs() * cfg.head_hidden + cfg.head_hidden * cfg.num_classes);
  double total = 0;
  for (const auto& [k, v] : m) total += v;
  m["total"] = total;
  return m;
}

}  // namespace model
}  // namespace dffnet
