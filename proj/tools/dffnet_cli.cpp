// dffnet: synth | train | eval | predict | gradcheck | summary.
//
// Settings resolve as defaults < --config file (key=value lines) < flags.
// Exit status: 0 success, 1 runtime or data error, 2 usage error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dffnet/checkpoint.hpp"
#include "dffnet/data.hpp"
#include "dffnet/gradcheck.hpp"
#include "dffnet/model.hpp"
#include "dffnet/pipeline.hpp"
#include "dffnet/train.hpp"

namespace fs = std::filesystem;
using namespace dffnet;

namespace {

constexpr double kReferenceParams = 1.2829e6;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string exact(double v) { return fmt("%.17g", v); }

std::string dashed(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

/// Declared keys with their resolved values, in declaration order.
class Settings {
 public:
  void declare(const std::string& key, const std::string& def) { entries_.push_back({key, def}); }

  void set(std::string key, const std::string& value, const std::string& origin) {
    for (auto& c : key)
      if (c == '-') c = '_';
    for (auto& e : entries_) {
      if (e.first == key) {
        e.second = value;
        return;
      }
    }
    throw UsageError(origin + ": unknown key '" + key + "'");
  }

  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path.string() + "'");
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      const std::string where = path.string() + ":" + std::to_string(no);
      if (eq == std::string::npos) throw UsageError(where + ": expected key=value, got '" + line + "'");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
  }

  const std::string& str(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return e.second;
    throw std::logic_error("undeclared setting '" + key + "'");
  }

  const std::string& required(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty()) throw UsageError("--" + dashed(key) + " is required");
    return v;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("'" + key + "' expects a non-negative integer, got '" + v + "'");
    }
    try {
      return std::stoull(v);
    } catch (const std::out_of_range&) {
      throw UsageError("'" + key + "' is out of range: " + v);
    }
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  std::size_t positive(const std::string& key) const {
    const auto n = size(key);
    if (n == 0) throw UsageError("'" + key + "' must be positive");
    return n;
  }

  double real(const std::string& key) const {
    const auto& v = str(key);
    std::size_t pos = 0;
    double d = 0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (v.empty() || pos != v.size() || !std::isfinite(d)) throw UsageError("'" + key + "' expects a number, got '" + v + "'");
    return d;
  }

  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw UsageError("'" + key + "' expects 0/1 or true/false, got '" + v + "'");
  }

  void print(std::ostream& out, const std::string& command) const {
    out << "# dffnet " << command << "\n";
    for (const auto& [k, v] : entries_) out << k << "=" << v << "\n";
    out << "#\n";
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// A subcommand whose options all feed a Settings table.
struct Command {
  CLI::App* app = nullptr;
  Settings settings;
  std::map<std::string, std::string> raw;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, std::pair<std::string, CLI::Option*>> negations;  // flag -> (key, option)
  std::string config;

  Command(CLI::App& parent, const std::string& name, const std::string& about) {
    app = parent.add_subcommand(name, about);
    app->add_option("--config", config, "key=value file; flags override it");
  }

  void opt(const std::string& key, const std::string& def, const std::string& help) {
    settings.declare(key, def);
    options[key] = app->add_option("--" + dashed(key), raw[key], help + (def.empty() ? "" : " [" + def + "]"));
  }

  void negate(const std::string& flag, const std::string& key, const std::string& help) {
    negations[flag] = {key, app->add_flag("--" + flag, help)};
  }

  void resolve() {
    if (!config.empty()) settings.load_file(config);
    for (const auto& [key, o] : options)
      if (o->count() > 0) settings.set(key, raw[key], "--" + dashed(key));
    for (const auto& [flag, kv] : negations)
      if (kv.second->count() > 0) settings.set(kv.first, "0", "--" + flag);
  }
};

void model_options(Command& c) {
  c.opt("pca", "30", "PCA components kept from the spectra");
  c.opt("patch", "11", "odd patch side");
  c.opt("width", "64", "feature channels C (multiple of 4)");
  c.opt("dffm", "2", "number of fusion modules");
  c.opt("bases", "4", "filter bases per dynamic filter block");
  c.opt("head_hidden", "64", "hidden units of the classifier");
  c.opt("stem_kernels", "8", "kernels of the 3-D spectral stem");
  c.opt("use_dfb", "1", "enable the dynamic filter blocks");
  c.opt("use_ssafb", "1", "enable the shuffle attention fusion blocks");
  c.negate("no-dfb", "use_dfb", "disable the dynamic filter blocks");
  c.negate("no-ssafb", "use_ssafb", "disable the shuffle attention fusion blocks");
}

ModelConfig model_config(const Settings& s) {
  ModelConfig cfg;
  cfg.pca_components = s.positive("pca");
  cfg.patch = s.positive("patch");
  cfg.width = s.positive("width");
  cfg.dffm_count = s.positive("dffm");
  cfg.filter_bases = s.positive("bases");
  cfg.head_hidden = s.positive("head_hidden");
  cfg.stem_kernels = s.positive("stem_kernels");
  cfg.use_dfb = s.flag("use_dfb");
  cfg.use_ssafb = s.flag("use_ssafb");
  if (cfg.patch % 2 == 0) throw UsageError("--patch must be odd, got " + std::to_string(cfg.patch));
  if (cfg.width % 4 != 0) throw UsageError("--width must be a multiple of 4, got " + std::to_string(cfg.width));
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int cmd_synth(const Settings& s) {
  data::SynthConfig c;
  const fs::path out = s.required("out");
  c.classes = s.size("classes");
  c.size = s.positive("size");
  c.bands = s.positive("bands");
  c.aux_channels = s.positive("aux_channels");
  c.seed = s.u64("seed");
  c.noise = s.real("noise");
  c.sites_per_class = s.positive("sites");
  if (c.classes < 2) throw UsageError("--classes must be at least 2, got " + std::to_string(c.classes));
  if (c.noise < 0) throw UsageError("--noise must be non-negative");
  const auto scene = data::synth_generate(c);
  data::save_scene(out, scene);
  std::vector<std::size_t> count(c.classes + 1, 0);
  for (auto v : scene.labels.data()) ++count[static_cast<std::size_t>(v)];
  std::cout << "wrote " << out.string() << ": " << c.size << "x" << c.size << ", " << c.bands << " bands, "
            << c.aux_channels << " aux channel(s)\n";
  for (std::size_t k = 1; k <= c.classes; ++k) std::cout << "class " << k << ": " << count[k] << " pixels\n";
  return 0;
}

template <class T>
int train_as(const Settings& s) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path data_dir = s.required("data"), out = s.required("out");
  const double fraction = s.real("train_fraction");
  if (!(fraction > 0 && fraction < 1)) throw UsageError("--train-fraction must be in (0, 1)");
  const std::uint64_t seed = s.u64("seed");
  TrainConfig tc;
  tc.epochs = s.size("epochs");
  tc.batch = s.positive("batch");
  tc.adam.lr = s.real("lr");
  tc.adam.weight_decay = s.real("weight_decay");
  tc.seed = seed;
  const std::string schedule = s.str("schedule");
  if (schedule == "cosine") tc.schedule = Schedule::cosine;
  else if (schedule != "constant") throw UsageError("--schedule must be constant or cosine, got '" + schedule + "'");
  if (tc.adam.lr < 0 || tc.adam.weight_decay < 0) throw UsageError("--lr and --weight-decay must be non-negative");
  ModelConfig cfg = model_config(s);
  cfg.seed = seed;

  const auto scene = data::load_scene(data_dir);
  cfg.num_classes = scene.classes;
  cfg.aux_channels = scene.aux_channels();
  if (cfg.pca_components > scene.bands()) {
    throw UsageError("--pca " + std::to_string(cfg.pca_components) + " exceeds the scene's " + std::to_string(scene.bands()) +
                     " bands");
  }
  const auto split = data::split_dataset(scene.labels, scene.classes, fraction, seed);
  std::cout << "split: " << split.train.size() << " train, " << split.test.size() << " test pixels\n";
  const auto pre = data::fit_preprocess(scene, split.train, cfg.pca_components);
  const auto prepared = data::apply_preprocess(pre, scene);

  Model<T> m(cfg);
  std::cout << "parameters: " << m.params().scalar_count() << "\n";
  tc.on_epoch = [&](std::size_t e, double loss, double oa) {
    std::printf("epoch %zu loss %.6f train_oa %.4f (%.1fs)\n", e, loss, oa, seconds_since(t0));
    std::fflush(stdout);
  };
  const History hist = train(m, prepared, split.train, tc);
  const Metrics fit = metrics(evaluate(m, prepared, split.train, tc.batch));

  std::map<std::string, std::string> info{{"epochs", std::to_string(tc.epochs)},
                                          {"batch", std::to_string(tc.batch)},
                                          {"lr", exact(tc.adam.lr)},
                                          {"weight_decay", exact(tc.adam.weight_decay)},
                                          {"schedule", schedule},
                                          {"train_fraction", exact(fraction)},
                                          {"split_seed", std::to_string(seed)},
                                          {"train_pixels", std::to_string(split.train.size())},
                                          {"test_pixels", std::to_string(split.test.size())},
                                          {"final_train_oa", exact(fit.oa)}};
  if (!hist.empty()) info["final_loss"] = exact(hist.back().loss);
  save_checkpoint(out, cfg, pre, m.params(), info);
  io::write_bytes(out / "history.csv", history_csv(hist));
  std::cout << "final train OA " << fmt("%.4f", fit.oa) << "\n";
  std::cout << "wrote " << out.string() << " (manifest, params.dtns, history.csv) in " << fmt("%.1f", seconds_since(t0))
            << "s\n";
  return 0;
}

int cmd_train(const Settings& s) {
  s.positive("threads");
  const std::string p = s.str("precision");
  if (p == "f64") return train_as<double>(s);
  if (p == "f32") return train_as<float>(s);
  throw UsageError("--precision must be f32 or f64, got '" + p + "'");
}

/// The model of a checkpoint together with the scene it is applied to.
template <class T>
struct Loaded {
  Model<T> model;
  data::Preprocess pre;
  std::map<std::string, std::string> info;
  data::Scene scene;
};

template <class T>
Loaded<T> load(const Settings& s) {
  const fs::path model_dir = s.required("model"), data_dir = s.required("data");
  s.positive("threads");
  auto ck = load_checkpoint<T>(model_dir);
  auto scene = data::load_scene(data_dir);
  if (scene.classes != ck.config.num_classes || scene.aux_channels() != ck.config.aux_channels) {
    throw Error("scene has " + std::to_string(scene.classes) + " classes and " + std::to_string(scene.aux_channels()) +
                " aux channel(s); the model was trained for " + std::to_string(ck.config.num_classes) + " and " +
                std::to_string(ck.config.aux_channels));
  }
  return {Model<T>(ck.config, std::move(ck.params)), std::move(ck.pre), std::move(ck.info), std::move(scene)};
}

std::string info_value(const std::map<std::string, std::string>& info, const std::string& key) {
  auto it = info.find(key);
  if (it == info.end()) throw FormatError("checkpoint manifest: missing info." + key);
  return it->second;
}

template <class T>
int eval_as(const Settings& s) {
  const auto L = load<T>(s);
  const std::string which = s.str("split");
  const auto split = data::split_dataset(L.scene.labels, L.scene.classes, std::stod(info_value(L.info, "train_fraction")),
                                         std::stoull(info_value(L.info, "split_seed")));
  if (which != "train" && which != "test" && which != "all") throw UsageError("--split must be train, test or all");
  std::vector<std::size_t> pixels;
  if (which == "train" || which == "all") pixels.insert(pixels.end(), split.train.begin(), split.train.end());
  if (which == "test" || which == "all") pixels.insert(pixels.end(), split.test.begin(), split.test.end());
  const auto prepared = data::apply_preprocess(L.pre, L.scene);
  const auto cm = evaluate(L.model, prepared, pixels, s.positive("batch"));
  const Metrics mt = metrics(cm);
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    if (mt.per_class[k]) {
      std::printf("class %zu accuracy %.4f (%llu pixels)\n", k + 1, *mt.per_class[k],
                  static_cast<unsigned long long>(cm.row_sum(k)));
    } else {
      std::printf("class %zu accuracy - (no pixels)\n", k + 1);
    }
  }
  for (auto k : mt.excluded) std::cerr << "warning: class " << k + 1 << " has no pixels in this split; left out of AA\n";
  std::printf("OA %.4f AA %.4f Kappa %.4f (%llu pixels)\n", mt.oa, mt.aa, mt.kappa,
              static_cast<unsigned long long>(cm.total()));
  fs::path confusion = s.str("confusion");
  if (confusion.empty()) confusion = fs::path(s.str("model")) / ("confusion_" + which + ".csv");
  io::write_bytes(confusion, cm.to_csv());
  std::cout << "wrote " << confusion.string() << "\n";
  return 0;
}

template <class T>
int predict_as(const Settings& s) {
  const fs::path out = s.required("out");
  const auto L = load<T>(s);
  const auto prepared = data::apply_preprocess(L.pre, L.scene);
  const std::size_t h = L.scene.height(), w = L.scene.width();
  std::vector<std::size_t> pixels(h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = i;
  const auto pred = predict(L.model, prepared, pixels, s.positive("batch"), true);
  Tensor<std::int32_t> map(Shape{h, w});
  for (std::size_t i = 0; i < pred.size(); ++i) map[i] = pred[i] + 1;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_tensor(out, map);
  std::cout << "wrote " << out.string() << ": " << h << "x" << w << " i32 class map (classes 1.." << L.scene.classes << ")\n";
  return 0;
}

template <int (*F64)(const Settings&), int (*F32)(const Settings&)>
int by_precision(const Settings& s) {
  return checkpoint_precision(s.required("model")) == io::DType::f32 ? F32(s) : F64(s);
}

int cmd_gradcheck(const Settings& s) {
  const std::string op = s.str("op");
  GradcheckOptions opt;
  opt.tolerance = s.real("tolerance");
  if (!(opt.tolerance > 0)) throw UsageError("--tolerance must be positive");
  std::vector<const gradcheck::Case*> cases;
  if (op == "all") {
    for (const auto& c : gradcheck::registry()) cases.push_back(&c);
  } else if (const auto* c = gradcheck::find(op)) {
    cases.push_back(c);
  } else {
    std::string known;
    for (const auto& n : gradcheck::names()) known += " " + n;
    throw UsageError("unknown op '" + op + "'; known:" + known);
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t passed = 0;
  for (const auto* c : cases) {
    const auto t1 = std::chrono::steady_clock::now();
    const GradcheckReport r = gradcheck::run(*c, opt);
    std::size_t checked = 0, skipped = 0;
    for (const auto& l : r.leaves) checked += l.checked, skipped += l.skipped;
    std::printf("%s %-24s max_rel_err %.3e checked %zu skipped %zu (%.2fs)\n", r.pass ? "PASS" : "FAIL", c->name.c_str(),
                r.max_rel_error(), checked, skipped, seconds_since(t1));
    for (const auto& l : r.leaves) {
      if (!l.pass) std::printf("  leaf %s max_rel_err %.3e at index %zu\n", l.name.c_str(), l.max_rel_error, l.worst_index);
    }
    passed += r.pass;
  }
  std::printf("gradcheck: %zu/%zu passed, tolerance %g, %.1fs\n", passed, cases.size(), opt.tolerance, seconds_since(t0));
  return passed == cases.size() ? 0 : 1;
}

int cmd_summary(const Settings& s) {
  ModelConfig cfg = model_config(s);
  cfg.num_classes = s.size("classes");
  cfg.aux_channels = s.positive("aux_channels");
  if (cfg.num_classes < 2) throw UsageError("--classes must be at least 2");
  const Model<float> m(cfg);
  std::map<std::string, std::size_t> groups;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& n = m.params().names()[i];
    groups[n.substr(0, n.find('.'))] += m.params().at(i).numel();
  }
  const std::size_t total = m.params().scalar_count();
  for (const auto& [g, n] : groups) std::printf("params %-8s %zu\n", g.c_str(), n);
  std::printf("parameters %zu (%.4f M), ratio to reference 1.2829 M: %.4f\n", total, static_cast<double>(total) / 1e6,
              static_cast<double>(total) / kReferenceParams);
  for (const auto& [k, v] : model::estimate_macs(cfg)) {
    if (k != "total") std::printf("macs %-8s %.4g\n", k.c_str(), v);
  }
  std::printf("macs per sample %.4g (%.3f G)\n", model::estimate_macs(cfg).at("total"), model::estimate_macs(cfg).at("total") / 1e9);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFFNet: frequency-domain fusion network for hyperspectral + auxiliary classification"};
  app.require_subcommand(1);

  Command synth(app, "synth", "write a synthetic labelled scene");
  synth.opt("out", "", "output scene directory");
  synth.opt("classes", "5", "number of classes (>= 2)");
  synth.opt("size", "64", "scene side in pixels");
  synth.opt("bands", "64", "hyperspectral bands");
  synth.opt("aux_channels", "1", "auxiliary channels");
  synth.opt("seed", "42", "random seed");
  synth.opt("noise", "0.05", "Gaussian noise standard deviation");
  synth.opt("sites", "3", "Voronoi sites per class");

  Command tr(app, "train", "train a model and write a checkpoint directory");
  tr.opt("data", "", "scene directory");
  tr.opt("out", "", "checkpoint directory");
  tr.opt("epochs", "100", "training epochs");
  tr.opt("lr", "0.0001", "Adam learning rate");
  tr.opt("batch", "128", "minibatch size");
  tr.opt("weight_decay", "0", "L2 coefficient");
  tr.opt("schedule", "constant", "learning-rate schedule: constant or cosine");
  model_options(tr);
  tr.opt("train_fraction", "0.1", "labelled fraction per class used for training");
  tr.opt("seed", "42", "seed for the split, initialisation and shuffling");
  tr.opt("precision", "f64", "f64 or f32 training");
  tr.opt("threads", "1", "worker cap (kernels are single-threaded)");

  Command ev(app, "eval", "evaluate a checkpoint on a split of a scene");
  ev.opt("model", "", "checkpoint directory");
  ev.opt("data", "", "scene directory");
  ev.opt("split", "test", "train, test or all");
  ev.opt("confusion", "", "confusion CSV path [MODEL/confusion_SPLIT.csv]");
  ev.opt("batch", "128", "inference batch size");
  ev.opt("threads", "1", "worker cap (kernels are single-threaded)");

  Command pr(app, "predict", "write a full-scene class map");
  pr.opt("model", "", "checkpoint directory");
  pr.opt("data", "", "scene directory");
  pr.opt("out", "", "output map (.dtns, i32 H x W)");
  pr.opt("batch", "128", "inference batch size");
  pr.opt("threads", "1", "worker cap (kernels are single-threaded)");

  Command gc(app, "gradcheck", "compare analytic gradients with finite differences");
  gc.opt("op", "all", "registered op or composite name, or all");
  gc.opt("tolerance", "1e-4", "maximum relative error");

  Command sm(app, "summary", "parameter count and multiply-accumulate estimate");
  model_options(sm);
  sm.opt("classes", "5", "number of classes");
  sm.opt("aux_channels", "1", "auxiliary channels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  Command* active = nullptr;
  for (Command* c : {&synth, &tr, &ev, &pr, &gc, &sm})
    if (c->app->parsed()) active = c;
  try {
    active->resolve();
    active->settings.print(std::cout, active->app->get_name());
    std::cout.flush();
    const auto& name = active->app->get_name();
    if (name == "synth") return cmd_synth(active->settings);
    if (name == "train") return cmd_train(active->settings);
    if (name == "eval") return by_precision<eval_as<double>, eval_as<float>>(active->settings);
    if (name == "predict") return by_precision<predict_as<double>, predict_as<float>>(active->settings);
    if (name == "gradcheck") return cmd_gradcheck(active->settings);
    return cmd_summary(active->settings);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << active->app->help();
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
