#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dffnet/model.hpp"
#include "dffnet/pipeline.hpp"

namespace dffnet {

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;  // L2 coefficient added to the gradient
};

template <class T>
class Adam {
 public:
  Adam(const ParamStore<T>& params, AdamConfig cfg) : cfg_(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params.at(i).shape(), T{0});
      v_.emplace_back(params.at(i).shape(), T{0});
    }
  }

  std::size_t step_count() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  /// One bias-corrected update. A null gradient counts as zero. `lr` overrides
  /// the configured rate (for schedules).
  void step(ParamStore<T>& params, const std::vector<const Tensor<T>*>& grads, std::optional<double> lr = {}) {
    if (grads.size() != params.size()) throw ShapeError("adam: gradient count does not match parameter count");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i]) continue;
      if (grads[i]->shape() != params.at(i).shape()) {
        throw ShapeError("adam: gradient for '" + params.names()[i] + "' has shape " + shape_str(grads[i]->shape()));
      }
      for (T g : grads[i]->data()) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter '" + params.names()[i] + "'");
      }
    }
    ++t_;
    const double rate = lr.value_or(cfg_.lr);
    const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T wd = static_cast<T>(cfg_.weight_decay), eps = static_cast<T>(cfg_.eps);
    const T step = static_cast<T>(rate / c1), root_c2 = static_cast<T>(std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params.at(i);
      T* m = m_[i].raw();
      T* v = v_[i].raw();
      const T* g = grads[i] ? grads[i]->raw() : nullptr;
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const T gj = (g ? g[j] : T{0}) + wd * p[j];
        m[j] = b1 * m[j] + (1 - b1) * gj;
        v[j] = b2 * v[j] + (1 - b2) * gj * gj;
        p[j] -= step * m[j] / (std::sqrt(v[j]) / root_c2 + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

/// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw Error("confusion matrix needs at least one class");
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.counts_[i * cm.k_ + j] = rows[i][j];
    }
    return cm;
  }

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1) {
    if (truth >= k_ || predicted >= k_) throw Error("confusion matrix: class index outside [0, " + std::to_string(k_) + ")");
    counts_[truth * k_ + predicted] += n;
  }

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t at(std::size_t i, std::size_t j) const { return counts_.at(i * k_ + j); }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }
  std::uint64_t row_sum(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += at(i, j);
    return s;
  }
  std::uint64_t col_sum(std::size_t j) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, j);
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, i);
    return s;
  }

  /// Comma-separated rows of integer counts.
  std::string to_csv() const {
    std::string out;
    for (std::size_t i = 0; i < k_; ++i) {
      for (std::size_t j = 0; j < k_; ++j) out += (j ? "," : "") + std::to_string(at(i, j));
      out += "\n";
    }
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct Metrics {
  double oa = 0, aa = 0, kappa = 0;
  std::vector<std::optional<double>> per_class;  // empty when the class has no samples
  std::vector<std::size_t> excluded;             // classes left out of AA
};

/// OA = trace / total; AA over non-empty rows; Kappa = (p_o - p_e) / (1 - p_e).
/// When p_e = 1 (a single class on both axes) Kappa is 1 for perfect agreement.
inline Metrics metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw Error("metrics: empty confusion matrix");
  const double n = static_cast<double>(total);
  Metrics m;
  m.oa = static_cast<double>(cm.trace()) / n;
  double aa = 0, pe = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const auto r = cm.row_sum(i);
    pe += static_cast<double>(r) * static_cast<double>(cm.col_sum(i));
    if (r == 0) {
      m.per_class.emplace_back();
      m.excluded.push_back(i);
      continue;
    }
    const double acc = static_cast<double>(cm.at(i, i)) / static_cast<double>(r);
    m.per_class.emplace_back(acc);
    aa += acc;
    ++used;
  }
  m.aa = aa / static_cast<double>(used);
  pe /= n * n;
  m.kappa = pe >= 1 ? (m.oa >= 1 ? 1.0 : 0.0) : (m.oa - pe) / (1 - pe);
  return m;
}

// ---------------------------------------------------------------------------
// Training

enum class Schedule { constant, cosine };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 128;
  AdamConfig adam{};
  Schedule schedule = Schedule::constant;
  std::uint64_t seed = 42;
  std::function<void(std::size_t epoch, double loss, double train_oa)> on_epoch;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // sample-weighted mean cross-entropy
  double train_oa = 0;    // accuracy of the pre-update predictions
};

using History = std::vector<EpochRecord>;

inline std::string history_csv(const History& h) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss,train_oa\n";
  for (const auto& r : h) out << r.epoch << "," << r.loss << "," << r.train_oa << "\n";
  return out.str();
}

/// First index of the row maximum.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t r = 0; r < B; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < K; ++j) {
      if (logits[r * K + j] > logits[r * K + best]) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

template <class T>
Tensor<T> batch_logits(const Model<T>& m, const data::Batch<T>& b) {
  Tape<T> tape(false);
  BoundParams<T> p(tape, m.params());
  Var<T> z = model::forward(p, m.config(), tape.constant(b.hsi, "hsi"), tape.constant(b.aux, "aux"));
  return z.value();
}

/// Zero-based predictions for `pixels`, in order.
template <class T>
std::vector<int> predict(const Model<T>& m, const data::Prepared& d, const std::vector<std::size_t>& pixels,
                         std::size_t batch = 128, bool allow_unlabeled = false) {
  std::vector<int> out;
  out.reserve(pixels.size());
  for (std::size_t s = 0; s < pixels.size(); s += batch) {
    auto b = data::make_batch<T>(d, pixels, s, std::min(pixels.size(), s + batch), m.config().patch, allow_unlabeled);
    for (int c : argmax_rows(batch_logits(m, b))) out.push_back(c);
  }
  return out;
}

template <class T>
ConfusionMatrix evaluate(const Model<T>& m, const data::Prepared& d, const std::vector<std::size_t>& pixels,
                         std::size_t batch = 128) {
  if (pixels.empty()) throw Error("evaluate: no pixels");
  ConfusionMatrix cm(m.config().num_classes);
  const auto pred = predict(m, d, pixels, batch);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    cm.add(static_cast<std::size_t>(d.labels[pixels[i]] - 1), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

/// Mini-batch Adam on mean cross-entropy. Each epoch draws a fresh seeded
/// permutation; the last batch may be short.
template <class T>
History train(Model<T>& m, const data::Prepared& d, const std::vector<std::size_t>& pixels, const TrainConfig& cfg) {
  if (pixels.empty()) throw Error("train: empty training set");
  if (cfg.batch == 0) throw Error("train: batch size must be positive");
  if (d.classes != m.config().num_classes) {
    throw Error("train: scene has " + std::to_string(d.classes) + " classes, model expects " +
                std::to_string(m.config().num_classes));
  }
  Rng rng(cfg.seed);
  Adam<T> opt(m.params(), cfg.adam);
  const std::size_t n = pixels.size(), steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const double total_steps = static_cast<double>(cfg.epochs * steps_per_epoch);
  History hist;
  std::vector<std::size_t> order(n);
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto perm = rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = pixels[perm[i]];
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t s = 0, bi = 0; s < n; s += cfg.batch, ++bi) {
      const auto b = data::make_batch<T>(d, order, s, std::min(n, s + cfg.batch), m.config().patch);
      Tape<T> tape;
      BoundParams<T> p(tape, m.params());
      Var<T> logits = model::forward(p, m.config(), tape.constant(b.hsi, "hsi"), tape.constant(b.aux, "aux"));
      Var<T> loss = ops::cross_entropy(logits, b.labels);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(e) + ", batch " + std::to_string(bi));
      }
      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
      loss_sum += lv * static_cast<double>(b.labels.size());
      tape.backward(loss.id);
      std::vector<const Tensor<T>*> grads;
      for (const auto& name : p.names()) grads.push_back(tape.grad(p[name].id));
      double lr = cfg.adam.lr;
      if (cfg.schedule == Schedule::cosine) {
        lr *= 0.5 * (1 + std::cos(std::numbers::pi * static_cast<double>(opt.step_count()) / total_steps));
      }
      opt.step(m.params(), grads, lr);
    }
    hist.push_back({e, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)});
    if (cfg.on_epoch) cfg.on_epoch(e, hist.back().loss, hist.back().train_oa);
  }
  return hist;
}

}  // namespace dffnet
