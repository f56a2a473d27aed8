#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dffnet/io.hpp"
#include "dffnet/model.hpp"
#include "dffnet/pipeline.hpp"

/// Checkpoint directory:
///   manifest    key=value lines: format, precision, model.* config, info.*,
///               then one `tensor=NAME` line per record in params.dtns
///   params.dtns concatenated DTNS records (preprocessing, then parameters)
namespace dffnet {

inline constexpr const char* kCheckpointFormat = "dffnet-checkpoint-1";

template <class T>
struct Checkpoint {
  ModelConfig config;
  data::Preprocess pre;
  ParamStore<T> params;
  std::map<std::string, std::string> info;
};

namespace detail {

inline std::vector<std::pair<std::string, Tensor<double>>> preprocess_tensors(const data::Preprocess& p) {
  return {{"pre.pca.mean", p.pca.mean},
          {"pre.pca.components", p.pca.components},
          {"pre.pca.eigenvalues", p.pca.eigenvalues},
          {"pre.hsi_scale", Tensor<double>::scalar(p.hsi_scale)},
          {"pre.aux.mean", p.aux_mean},
          {"pre.aux.scale", p.aux_scale}};
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const data::Preprocess& pre,
                     const ParamStore<T>& params, const std::map<std::string, std::string>& info = {}) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "format=" << kCheckpointFormat << "\n";
  manifest << "precision=" << io::dtype_name(io::dtype_of<T>()) << "\n";
  for (const auto& [k, v] : cfg.to_kv()) manifest << "model." << k << "=" << v << "\n";
  for (const auto& [k, v] : info) manifest << "info." << k << "=" << v << "\n";
  std::string blob;
  for (const auto& [name, t] : detail::preprocess_tensors(pre)) {
    manifest << "tensor=" << name << "\n";
    blob += io::encode(t);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    manifest << "tensor=" << params.names()[i] << "\n";
    blob += io::encode(params.at(i));
  }
  io::write_bytes(dir / "params.dtns", blob);
  io::write_bytes(dir / "manifest", manifest.str());
}

/// The `precision` line of the manifest (f32 or f64).
inline io::DType checkpoint_precision(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest");
  if (!mf) throw Error("cannot open '" + (dir / "manifest").string() + "'");
  std::string line;
  while (std::getline(mf, line)) {
    if (line == "precision=f32") return io::DType::f32;
    if (line == "precision=f64") return io::DType::f64;
    if (line.rfind("precision=", 0) == 0) throw FormatError("checkpoint manifest: unsupported " + line);
  }
  throw FormatError("checkpoint manifest: no precision line");
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("checkpoint '" + dir.string() + "' is not a directory");
  std::ifstream mf(dir / "manifest");
  if (!mf) throw Error("cannot open '" + (dir / "manifest").string() + "'");
  Checkpoint<T> ck;
  std::vector<std::string> names;
  std::string line, format;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint manifest: malformed line '" + line + "'");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "format") format = v;
    else if (k == "precision") continue;
    else if (k == "tensor") names.push_back(v);
    else if (k.rfind("model.", 0) == 0) {
      if (!ck.config.set(k.substr(6), v)) throw FormatError("checkpoint manifest: unknown model key '" + k + "'");
    } else if (k.rfind("info.", 0) == 0) ck.info[k.substr(5)] = v;
    else throw FormatError("checkpoint manifest: unknown key '" + k + "'");
  }
  if (format != kCheckpointFormat) throw FormatError("checkpoint manifest: unsupported format '" + format + "'");

  std::ifstream in(dir / "params.dtns", std::ios::binary);
  if (!in) throw Error("cannot open '" + (dir / "params.dtns").string() + "'");
  std::map<std::string, io::Record> rec;
  for (const auto& n : names) {
    try {
      rec[n] = io::read_record(in);
    } catch (const FormatError& e) {
      throw FormatError((dir / "params.dtns").string() + ": tensor '" + n + "': " + e.what());
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("params.dtns: trailing bytes after last tensor");
  auto take = [&](const std::string& n) {
    auto it = rec.find(n);
    if (it == rec.end()) throw FormatError("checkpoint: missing tensor '" + n + "'");
    return Tensor<double>(it->second.shape, it->second.as<double>());
  };
  ck.pre.pca.mean = take("pre.pca.mean");
  ck.pre.pca.components = take("pre.pca.components");
  ck.pre.pca.eigenvalues = take("pre.pca.eigenvalues");
  ck.pre.hsi_scale = take("pre.hsi_scale").item();
  ck.pre.aux_mean = take("pre.aux.mean");
  ck.pre.aux_scale = take("pre.aux.scale");
  for (const auto& n : names) {
    if (n.rfind("pre.", 0) == 0) continue;
    const auto& r = rec.at(n);
    ck.params.add(n, Tensor<T>(r.shape, r.as<T>()));
  }
  Model<T> check(ck.config, ck.params);  // validates names and shapes
  return ck;
}

}  // namespace dffnet
