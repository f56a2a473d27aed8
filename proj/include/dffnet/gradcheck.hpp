#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dffnet/dfb.hpp"
#include "dffnet/fft.hpp"
#include "dffnet/model.hpp"
#include "dffnet/ops.hpp"
#include "dffnet/ssafb.hpp"

/// Named gradient checks for every differentiable op and the composite
/// blocks. Each case draws fresh random double inputs per trial and reduces
/// its output to a scalar as mean(R * y) with a fixed random R. Analytic
/// gradients are taken in double; the finite-difference oracle re-evaluates
/// the same graph in long double.
namespace dffnet::gradcheck {

using Wide = long double;
using Leaves = LeafValues<double>;

template <class T>
using Vs = std::vector<Var<T>>;

struct Instance {
  GraphBuilder<double> build;
  GraphBuilder<Wide> oracle;
  Leaves leaves;
};

struct Case {
  std::string name;
  bool composite = false;
  std::size_t trials = 10;
  std::function<Instance(Rng&)> make;
};

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

/// mean(R * y) with R drawn from `seed`; identical on every rebuild.
template <class T>
Var<T> project(Var<T> y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> r(y.shape());
  for (auto& v : r.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return ops::mean(ops::mul(y, y.tape->constant(std::move(r), "projection")));
}

namespace detail {

template <class T, class Fn>
GraphBuilder<T> unary_builder(Fn f, std::uint64_t seed) {
  return [f, seed](Tape<T>&, const Vs<T>& v) { return project(f(v), seed); };
}

/// A case whose leaves are plain random tensors. `f` is called with the leaf
/// handles in either precision.
template <class Fn>
Case unary(std::string name, std::vector<Shape> shapes, Fn f, std::size_t trials = 10, bool composite = false) {
  Case c{name, composite, trials, nullptr};
  c.make = [shapes, f](Rng& rng) {
    Instance in;
    for (std::size_t i = 0; i < shapes.size(); ++i) in.leaves.emplace_back("x" + std::to_string(i), random_tensor(shapes[i], rng));
    const std::uint64_t seed = rng.next_u64();
    in.build = unary_builder<double>(f, seed);
    in.oracle = unary_builder<Wide>(f, seed);
    return in;
  };
  return c;
}

template <class T, class Fn>
GraphBuilder<T> parametric_builder(std::vector<std::string> names, Fn forward, std::uint64_t seed, bool projected) {
  return [names, forward, seed, projected](Tape<T>&, const Vs<T>& v) {
    BoundParams<T> p(names, v);
    Vs<T> xs(v.begin() + static_cast<std::ptrdiff_t>(names.size()), v.end());
    Var<T> y = forward(p, xs);
    return projected ? project(y, seed) : y;
  };
}

/// A case over a parameter store plus random inputs. `forward` receives the
/// bound parameters and the input handles.
template <class Fn>
Case parametric(std::string name, std::size_t trials, std::function<void(ParamStore<double>&, Rng&)> init,
                std::vector<Shape> inputs, Fn forward, bool projected = true) {
  Case c{name, true, trials, nullptr};
  c.make = [init, inputs, forward, projected](Rng& rng) {
    ParamStore<double> store;
    init(store, rng);
    // Training init keeps the bases within 2% of each other, which makes the
    // mixture-weight gradients vanish.
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.names()[i].find(".bank.") != std::string::npos) store.at(i) = random_tensor(store.at(i).shape(), rng);
    }
    Instance in;
    for (std::size_t i = 0; i < store.size(); ++i) in.leaves.emplace_back(store.names()[i], store.at(i));
    for (std::size_t i = 0; i < inputs.size(); ++i) in.leaves.emplace_back("input" + std::to_string(i), random_tensor(inputs[i], rng));
    const std::uint64_t seed = rng.next_u64();
    in.build = parametric_builder<double>(store.names(), forward, seed, projected);
    in.oracle = parametric_builder<Wide>(store.names(), forward, seed, projected);
    return in;
  };
  return c;
}

inline ops::ConvSpec stem_like_3d() {
  ops::ConvSpec s;
  s.in_channels = 1;
  s.out_channels = 3;
  s.kernel = {3, 3, 3};
  s.stride = {2, 1, 1};
  s.padding = {0, 1, 1};
  return s;
}

}  // namespace detail

/// Small configuration used by the whole-model and DFFM checks.
inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.pca_components = 6;
  c.patch = 4;
  c.width = 8;
  c.dffm_count = 2;
  c.filter_bases = 2;
  c.num_classes = 3;
  c.aux_channels = 1;
  c.head_hidden = 8;
  c.stem_kernels = 2;
  return c;
}

inline const std::vector<Case>& registry() {
  using detail::parametric;
  using detail::unary;
  static const std::vector<Case> cases = [] {
    std::vector<Case> c;
    // Elementwise and reductions.
    c.push_back(unary("add", {{2, 3}, {2, 3}}, []<class T>(const Vs<T>& v) { return ops::add(v[0], v[1]); }));
    c.push_back(unary("sub", {{2, 3}, {2, 3}}, []<class T>(const Vs<T>& v) { return ops::sub(v[0], v[1]); }));
    c.push_back(unary("mul", {{2, 3}, {2, 3}}, []<class T>(const Vs<T>& v) { return ops::mul(v[0], v[1]); }));
    c.push_back(unary("scale", {{2, 3}}, []<class T>(const Vs<T>& v) { return ops::scale(v[0], T(-1.7)); }));
    c.push_back(unary("sum", {{3, 4}}, []<class T>(const Vs<T>& v) { return ops::sum(ops::mul(v[0], v[0])); }));
    c.push_back(unary("mean", {{3, 4}}, []<class T>(const Vs<T>& v) { return ops::mean(ops::mul(v[0], v[0])); }));
    c.push_back(unary("relu", {{4, 5}}, []<class T>(const Vs<T>& v) { return ops::relu(v[0]); }));
    c.push_back(unary("softmax", {{3, 5}}, []<class T>(const Vs<T>& v) { return ops::softmax(v[0]); }));
    // Shape ops.
    c.push_back(unary("reshape", {{2, 6}}, []<class T>(const Vs<T>& v) { return ops::mul(ops::reshape(v[0], {3, 4}), ops::reshape(v[0], {3, 4})); }));
    c.push_back(unary("concat", {{2, 2, 3}, {2, 1, 3}}, []<class T>(const Vs<T>& v) { return ops::concat<T>({v[0], v[1]}, 1); }));
    c.push_back(unary("channel_shuffle", {{2, 6, 2, 2}}, []<class T>(const Vs<T>& v) { return ops::channel_shuffle(v[0], 2); }));
    c.push_back(unary("add_broadcast", {{2, 3, 4, 4}, {2, 3, 1, 1}, {2, 1, 4, 4}},
                      []<class T>(const Vs<T>& v) { return ops::add_broadcast(ops::add_broadcast(v[0], v[1]), v[2]); }));
    // Dense algebra.
    c.push_back(unary("matmul", {{3, 4}, {4, 2}}, []<class T>(const Vs<T>& v) { return ops::matmul(v[0], v[1]); }));
    c.push_back(unary("linear", {{3, 4}, {2, 4}, {2}}, []<class T>(const Vs<T>& v) { return ops::linear(v[0], v[1], v[2]); }));
    c.push_back(unary("cross_entropy", {{4, 3}}, []<class T>(const Vs<T>& v) { return ops::cross_entropy(v[0], {0, 2, 1, 2}); }));
    // Pooling.
    c.push_back(unary("pool_spatial_avg", {{2, 3, 4, 4}}, []<class T>(const Vs<T>& v) { return ops::pool_spatial(v[0], ops::PoolKind::avg); }));
    c.push_back(unary("pool_spatial_max", {{2, 3, 4, 4}}, []<class T>(const Vs<T>& v) { return ops::pool_spatial(v[0], ops::PoolKind::max); }));
    c.push_back(unary("pool_channel_avg", {{2, 3, 4, 4}}, []<class T>(const Vs<T>& v) { return ops::pool_channel(v[0], ops::PoolKind::avg); }));
    c.push_back(unary("pool_channel_max", {{2, 3, 4, 4}}, []<class T>(const Vs<T>& v) { return ops::pool_channel(v[0], ops::PoolKind::max); }));
    // Convolutions.
    c.push_back(unary("conv2d", {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}},
                      []<class T>(const Vs<T>& v) { return ops::conv2d(v[0], v[1], v[2], ops::ConvSpec::same2d(3, 4, 3)); }));
    c.push_back(unary("conv2d_grouped", {{2, 4, 4, 5}, {6, 2, 3, 3}, {6}},
                      []<class T>(const Vs<T>& v) { return ops::conv2d(v[0], v[1], v[2], ops::ConvSpec::same2d(4, 6, 3, 2)); }));
    c.push_back(unary("conv2d_depthwise", {{2, 3, 5, 4}, {3, 1, 3, 3}, {3}},
                      []<class T>(const Vs<T>& v) { return ops::conv2d(v[0], v[1], v[2], ops::ConvSpec::depthwise2d(3, 3)); }));
    c.push_back(unary("conv3d", {{2, 1, 7, 4, 4}, {3, 1, 3, 3, 3}, {3}},
                      []<class T>(const Vs<T>& v) { return ops::conv3d(v[0], v[1], v[2], detail::stem_like_3d()); }));
    // Spectral.
    c.push_back(unary("rfft2_even", {{1, 2, 5, 6}}, []<class T>(const Vs<T>& v) { return ops::rfft2(v[0]); }));
    c.push_back(unary("rfft2_odd", {{1, 2, 4, 5}}, []<class T>(const Vs<T>& v) { return ops::rfft2(v[0]); }));
    c.push_back(unary("irfft2_even", {{1, 4, 5, 4}}, []<class T>(const Vs<T>& v) { return ops::irfft2(v[0], 6); }));
    c.push_back(unary("irfft2_odd", {{1, 4, 4, 3}}, []<class T>(const Vs<T>& v) { return ops::irfft2(v[0], 5); }));
    c.push_back(unary("complex_mul", {{1, 4, 3, 3}, {1, 4, 3, 3}}, []<class T>(const Vs<T>& v) { return ops::complex_mul(v[0], v[1]); }));

    // Composite blocks.
    const dfb::DfbConfig dcfg{8, 6, 6, 4, {}};
    auto dfb_init = [dcfg](ParamStore<double>& s, Rng& r) { dfb::add_params(s, "dfb", dcfg, r); };
    c.push_back(parametric("dfb.generate_filter", 3, dfb_init, {{2, 8, 6, 6}},
                           [dcfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return dfb::generate_filter(p, "dfb", dcfg, x[0]).filter; }));
    c.push_back(unary("dfb.apply_filter", {{2, 3, 5, 6}, {2, 6, 5, 4}}, []<class T>(const Vs<T>& v) { return dfb::apply_filter(v[0], v[1]); }, 3, true));
    c.push_back(parametric("dfb.ffn", 3, dfb_init, {{1, 8, 6, 6}},
                           [dcfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return dfb::ffn(p, "dfb", dcfg, x[0]); }));
    c.push_back(parametric("dfb", 3, dfb_init, {{1, 8, 6, 6}},
                           [dcfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return dfb::forward(p, "dfb", dcfg, x[0]); }));

    const ssafb::SsafbConfig scfg{4, 4, 5};
    auto ssafb_init = [scfg](ParamStore<double>& s, Rng& r) { ssafb::add_params(s, "ssafb", scfg, r); };
    c.push_back(parametric("ssafb.channel_attention", 3, ssafb_init, {{1, 4, 3, 3}},
                           []<class T>(const BoundParams<T>& p, const Vs<T>& x) { return ssafb::channel_attention(p, "ssafb", x[0]); }));
    c.push_back(parametric("ssafb.spatial_attention", 3, ssafb_init, {{1, 4, 6, 6}},
                           [scfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return ssafb::spatial_attention(p, "ssafb", scfg, x[0]); }));
    c.push_back(parametric("ssafb.fuse", 3, ssafb_init, {{1, 4, 5, 5}, {1, 4, 5, 5}},
                           [scfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return ssafb::fuse(p, "ssafb", scfg, x[0], x[1]); }));
    c.push_back(parametric("ssafb", 3, ssafb_init, {{1, 4, 5, 5}, {1, 4, 5, 5}}, [scfg]<class T>(const BoundParams<T>& p, const Vs<T>& x) {
      auto o = ssafb::forward(p, "ssafb", scfg, x[0], x[1]);
      return ops::concat<T>({o.hsi, o.aux}, 1);
    }));

    const ModelConfig toy = toy_model_config();
    auto dffm_init = [toy](ParamStore<double>& s, Rng& r) {
      dfb::add_params(s, "dffm0.dfb_h", toy.dfb(), r);
      dfb::add_params(s, "dffm0.dfb_x", toy.dfb(), r);
      ssafb::add_params(s, "dffm0.ssafb", toy.ssafb(), r);
    };
    c.push_back(parametric("dffm", 2, dffm_init, {{1, 8, 4, 4}, {1, 8, 4, 4}}, [toy]<class T>(const BoundParams<T>& p, const Vs<T>& x) {
      auto s = model::dffm_forward(p, toy, 0, model::Streams<T>{x[0], x[1]});
      return ops::concat<T>({s.hsi, s.aux}, 1);
    }));
    auto model_init = [toy](ParamStore<double>& s, Rng& r) {
      ModelConfig cfg = toy;
      cfg.seed = r.next_u64();
      s = Model<double>(cfg).params();
    };
    c.push_back(parametric(
        "model", 1, model_init, {{2, 1, 6, 4, 4}, {2, 1, 4, 4}},
        [toy]<class T>(const BoundParams<T>& p, const Vs<T>& x) { return ops::cross_entropy(model::forward(p, toy, x[0], x[1]), {0, 2}); },
        false));
    return c;
  }();
  return cases;
}

inline const Case* find(const std::string& name) {
  for (const auto& c : registry()) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

inline std::vector<std::string> names() {
  std::vector<std::string> out;
  for (const auto& c : registry()) out.push_back(c.name);
  return out;
}

/// Runs every trial of `c`; leaf reports are merged by name (worst error wins).
inline GradcheckReport run(const Case& c, const GradcheckOptions& opt = {}, std::uint64_t seed = 20240601) {
  Rng rng(seed);
  for (char ch : c.name) rng = Rng(rng.next_u64() ^ static_cast<unsigned char>(ch));
  GradcheckReport merged;
  merged.tolerance = opt.tolerance;
  std::map<std::string, std::size_t> slot;
  for (std::size_t t = 0; t < c.trials; ++t) {
    Instance in = c.make(rng);
    GradcheckReport r = check_gradients<double, Wide>(in.build, in.oracle, in.leaves, opt);
    for (auto& l : r.leaves) {
      auto it = slot.find(l.name);
      if (it == slot.end()) {
        slot.emplace(l.name, merged.leaves.size());
        merged.leaves.push_back(l);
        continue;
      }
      LeafReport& m = merged.leaves[it->second];
      if (l.max_rel_error > m.max_rel_error) {
        m.max_rel_error = l.max_rel_error;
        m.worst_index = l.worst_index;
      }
      m.checked += l.checked;
      m.skipped += l.skipped;
      m.pass = m.pass && l.pass;
    }
    merged.pass = merged.pass && r.pass;
  }
  return merged;
}

}  // namespace dffnet::gradcheck
