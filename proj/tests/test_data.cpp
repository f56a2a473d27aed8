#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "dffnet/data.hpp"
#include "dffnet/io.hpp"
#include "dffnet/pipeline.hpp"
#include "helpers.hpp"

using namespace dffnet;
using namespace dffnet::data;
using testing_util::randn;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("dffnet_data_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Dtns, HeaderBytesForTwoByTwoF64) {
  const auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  const std::string bytes = io::encode(t);
  std::string want = "DTNS";
  for (unsigned char c : {1, 0, 0, 0}) want.push_back(static_cast<char>(c));  // version
  want.push_back(1);                                                         // f64
  want.push_back(2);                                                         // rank
  for (int d = 0; d < 2; ++d) {
    want.push_back(2);
    want.append(7, '\0');
  }
  ASSERT_EQ(bytes.size(), want.size() + 4 * 8);
  EXPECT_EQ(bytes.substr(0, want.size()), want);
  // 1.0 = 0x3FF0000000000000, little-endian.
  EXPECT_EQ(bytes.substr(want.size(), 8), std::string("\0\0\0\0\0\0\xf0\x3f", 8));
}

TEST(Dtns, RoundTrips) {
  TempDir dir;
  const auto a = randn({3, 4, 5}, 1);
  io::write_tensor(dir.path() / "a.dtns", a);
  EXPECT_EQ(io::read_tensor<double>(dir.path() / "a.dtns"), a);

  const auto s = Tensor<double>::scalar(-2.5);
  io::write_tensor(dir.path() / "s.dtns", s);
  const auto sr = io::read_tensor<double>(dir.path() / "s.dtns");
  EXPECT_EQ(sr.shape(), Shape{});
  EXPECT_EQ(sr.item(), -2.5);

  const auto f = randn({7, 3}, 2).cast<float>();
  io::write_tensor(dir.path() / "f.dtns", f);
  const auto rec = io::read_file(dir.path() / "f.dtns");
  EXPECT_EQ(rec.dtype, io::DType::f32);
  EXPECT_EQ(io::read_tensor<float>(dir.path() / "f.dtns"), f);

  const auto i = Tensor<std::int32_t>::from({2, 3}, {0, -1, 5, 2147483647, -2147483647 - 1, 7});
  io::write_tensor(dir.path() / "i.dtns", i);
  const auto ri = io::read_file(dir.path() / "i.dtns");
  EXPECT_EQ(ri.dtype, io::DType::i32);
  EXPECT_EQ(Tensor<std::int32_t>(ri.shape, ri.as<std::int32_t>()), i);
}

TEST(Dtns, BitExactForSpecialValues) {
  const auto t = Tensor<double>::from({4}, {-0.0, 5e-324, std::numeric_limits<double>::max(), 1.0 / 3});
  const auto r = io::decode(io::encode(t));
  const auto back = r.as<double>();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));
}

TEST(Dtns, Errors) {
  const std::string good = io::encode(randn({2, 3}, 1));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(io::decode(bad_magic), FormatError);
  EXPECT_THROW(io::decode(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(io::decode(good.substr(0, 6)), FormatError);
  std::string bad_dtype = good;
  bad_dtype[8] = 9;
  EXPECT_THROW(io::decode(bad_dtype), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(io::decode(bad_version), FormatError);

  TempDir dir;
  io::write_bytes(dir.path() / "t.dtns", good + "x");
  EXPECT_THROW(io::read_file(dir.path() / "t.dtns"), FormatError);
  EXPECT_THROW(io::read_file(dir.path() / "missing.dtns"), Error);
}

TEST(Pca, LineData) {
  const auto x = Tensor<double>::from({4, 2}, {1, 1, -1, -1, 2, 2, -2, -2});
  const auto m = pca_fit(x, 2);
  EXPECT_NEAR(m.components.at(0, 0), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(m.components.at(0, 1), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(m.eigenvalues[0], 20.0 / 3, 1e-12);
  EXPECT_NEAR(m.eigenvalues[1], 0.0, 1e-12);
}

TEST(Pca, IsotropicEigenvaluesEqual) {
  const auto x = Tensor<double>::from({4, 2}, {1, 0, -1, 0, 0, 1, 0, -1});
  const auto m = pca_fit(x, 2);
  EXPECT_NEAR(m.eigenvalues[0], m.eigenvalues[1], 1e-12);
  EXPECT_NEAR(m.eigenvalues[0], 2.0 / 3, 1e-12);
}

TEST(Pca, MatchesEigenSolver) {
  const std::size_t n = 50, b = 8;
  auto x = randn({n, b}, 7);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b; ++j) x[i * b + j] *= 0.5 + static_cast<double>(j);
  const auto m = pca_fit(x, b);

  Eigen::MatrixXd X(n, b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b; ++j) X(i, j) = x[i * b + j];
  const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd cov = Xc.transpose() * Xc / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (std::size_t c = 0; c < b; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(b - 1 - c);  // ascending order
    EXPECT_NEAR(m.eigenvalues[c], es.eigenvalues()(col), 1e-8);
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < b; ++j) EXPECT_NEAR(m.components.at(c, j), v(static_cast<Eigen::Index>(j)), 1e-8);
  }
}

TEST(Pca, OrthonormalAndVarianceEqualsEigenvalue) {
  const auto x = randn({200, 12}, 3);
  const auto m = pca_fit(x, 12);
  for (std::size_t a = 0; a < 12; ++a) {
    if (a > 0) {
      EXPECT_LE(m.eigenvalues[a], m.eigenvalues[a - 1]);
    }
    for (std::size_t c = 0; c < 12; ++c) {
      double d = 0;
      for (std::size_t j = 0; j < 12; ++j) d += m.components.at(a, j) * m.components.at(c, j);
      EXPECT_NEAR(d, a == c ? 1.0 : 0.0, 1e-8);
    }
  }
  const auto y = pca_transform(m, x);
  for (std::size_t c = 0; c < 12; ++c) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 200; ++i) mean += y.at(i, c);
    mean /= 200;
    for (std::size_t i = 0; i < 200; ++i) var += (y.at(i, c) - mean) * (y.at(i, c) - mean);
    var /= 199;
    EXPECT_NEAR(var, m.eigenvalues[c], 1e-6 * m.eigenvalues[c]);
  }
  Tensor<double> recon(x.shape());
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 12; ++j) {
      double s = m.mean[j];
      for (std::size_t c = 0; c < 12; ++c) s += y.at(i, c) * m.components.at(c, j);
      EXPECT_NEAR(s, x.at(i, j), 1e-8);
    }
}

TEST(Pca, MeanMapsToZero) {
  const auto x = randn({30, 5}, 4);
  const auto m = pca_fit(x, 3);
  const auto y = pca_transform(m, m.mean.reshape({1, 5}));
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Pca, Errors) {
  EXPECT_THROW(pca_fit(randn({10, 4}, 1), 5), Error);
  EXPECT_THROW(pca_fit(randn({1, 4}, 1), 2), Error);
}

TEST(Patches, ReflectIndex) {
  EXPECT_EQ(reflect_index(-1, 3), 1u);
  EXPECT_EQ(reflect_index(0, 3), 0u);
  EXPECT_EQ(reflect_index(3, 3), 1u);
  EXPECT_EQ(reflect_index(-2, 3), 2u);
  EXPECT_EQ(reflect_index(5, 1), 0u);
}

TEST(Patches, OneDimensionalReflect) {
  Tensor<double> cube(Shape{1, 1, 3});
  cube[0] = 10, cube[1] = 20, cube[2] = 30;  // a, b, c
  Tensor<std::int32_t> labels(Shape{1, 3}, 1);
  const auto s = extract_patch(cube, cube, labels, 0, 0, 3);
  // Row index reflects to 0 for a single-row scene; columns give [b, a, b].
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(s.hsi.at(0, 0, r, 0), 20.0);
    EXPECT_EQ(s.hsi.at(0, 0, r, 1), 10.0);
    EXPECT_EQ(s.hsi.at(0, 0, r, 2), 20.0);
  }
}

TEST(Patches, InteriorWindowIsExact) {
  const auto cube = randn({2, 5, 5}, 1);
  Tensor<std::int32_t> labels(Shape{5, 5}, 2);
  const auto s = extract_patch(cube, cube, labels, 2, 3, 3);
  EXPECT_EQ(s.label, 2);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s.hsi.at(0, ch, i, j), cube.at(ch, 1 + i, 2 + j));
}

TEST(Patches, ExhaustiveIndexMapping) {
  for (auto [H, W, p] : {std::tuple<std::size_t, std::size_t, std::size_t>{4, 5, 3}, {5, 5, 5}, {3, 6, 7}, {6, 4, 11}}) {
    // Values encode their own coordinates, so every read can be traced.
    Tensor<double> cube(Shape{2, H, W});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t q = 0; q < W; ++q) cube.at(c, r, q) = static_cast<double>(c * 10000 + r * 100 + q);
    Tensor<std::int32_t> labels(Shape{H, W}, 1);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q) {
        const auto s = extract_patch(cube, cube, labels, r, q, p);
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const long rr = long(r) + long(i) - long(p / 2), cc = long(q) + long(j) - long(p / 2);
              auto mirror = [](long v, long n) {
                while (v < 0 || v >= n) v = v < 0 ? -v : 2 * (n - 1) - v;
                return v;
              };
              const double v = s.aux.at(c, i, j);
              ASSERT_EQ(v, static_cast<double>(c * 10000 + mirror(rr, long(H)) * 100 + mirror(cc, long(W))));
            }
      }
  }
}

TEST(Patches, Errors) {
  const auto cube = randn({1, 4, 4}, 1);
  Tensor<std::int32_t> labels(Shape{4, 4}, 1);
  labels[5] = 0;
  EXPECT_THROW(extract_patch(cube, cube, labels, 1, 1, 3), Error);
  EXPECT_THROW(extract_patch(cube, cube, labels, 0, 0, 4), Error);
  EXPECT_THROW(extract_patch(cube, cube, labels, 4, 0, 3), Error);
}

TEST(Split, Properties) {
  SynthConfig cfg;
  cfg.size = 32;
  const auto scene = synth_generate(cfg);
  const auto sp = split_dataset(scene.labels, scene.classes, 0.1, 42);
  std::set<std::size_t> tr(sp.train.begin(), sp.train.end()), te(sp.test.begin(), sp.test.end());
  EXPECT_EQ(tr.size(), sp.train.size());
  for (auto px : tr) EXPECT_EQ(te.count(px), 0u);
  EXPECT_EQ(sp.train.size() + sp.test.size(), 32u * 32u);
  for (int c = 1; c <= 5; ++c) {
    std::size_t n = 0, t = 0;
    for (std::size_t i = 0; i < scene.labels.numel(); ++i) n += scene.labels[i] == c;
    for (auto px : sp.train) t += scene.labels[px] == c;
    EXPECT_LE(std::abs(static_cast<double>(t) - 0.1 * static_cast<double>(n)), 1.0) << "class " << c;
  }
  const auto again = split_dataset(scene.labels, scene.classes, 0.1, 42);
  EXPECT_EQ(again.train, sp.train);
  EXPECT_EQ(again.test, sp.test);
  EXPECT_NE(split_dataset(scene.labels, scene.classes, 0.1, 43).train, sp.train);
}

TEST(Split, SkipsUnlabeledAndRejectsBadFraction) {
  Tensor<std::int32_t> labels = Tensor<std::int32_t>::from({2, 3}, {0, 1, 1, 2, 2, 0});
  const auto sp = split_dataset(labels, 2, 0.5, 1);
  EXPECT_EQ(sp.train.size() + sp.test.size(), 4u);
  for (auto v : {0.0, 1.0, -0.1}) EXPECT_THROW(split_dataset(labels, 2, v, 1), Error);
}

TEST(Synth, Deterministic) {
  SynthConfig cfg;
  cfg.size = 24;
  const auto a = synth_generate(cfg), b = synth_generate(cfg);
  EXPECT_EQ(a.hsi, b.hsi);
  EXPECT_EQ(a.aux, b.aux);
  EXPECT_EQ(a.labels, b.labels);
  cfg.seed = 7;
  EXPECT_FALSE(synth_generate(cfg).hsi == a.hsi);
}

TEST(Synth, NoiselessClassMeansAreSignatures) {
  SynthConfig cfg;
  cfg.classes = 2;
  cfg.size = 16;
  cfg.bands = 20;
  cfg.noise = 0;
  const auto s = synth_generate(cfg);
  EXPECT_NO_THROW(s.validate());
  // Generator draw order: 2 coordinates per Voronoi site, then one signature per class.
  Rng rng(cfg.seed);
  for (std::size_t i = 0; i < 2 * cfg.classes * cfg.sites_per_class; ++i) rng.uniform();
  const auto sig1 = synth_signature(cfg.bands, rng), sig2 = synth_signature(cfg.bands, rng);
  const std::size_t hw = 16 * 16;
  for (int c = 1; c <= 2; ++c) {
    const auto& sig = c == 1 ? sig1 : sig2;
    std::size_t n = 0;
    std::vector<double> mean(cfg.bands, 0.0);
    for (std::size_t px = 0; px < hw; ++px) {
      if (s.labels[px] != c) continue;
      ++n;
      for (std::size_t b = 0; b < cfg.bands; ++b) mean[b] += s.hsi[b * hw + px];
    }
    ASSERT_GT(n, 0u);
    for (std::size_t b = 0; b < cfg.bands; ++b) EXPECT_NEAR(mean[b] / static_cast<double>(n), sig[b], 1e-12);
  }
}

TEST(Synth, RejectsSingleClass) {
  SynthConfig cfg;
  cfg.classes = 1;
  EXPECT_THROW(synth_generate(cfg), Error);
}

TEST(Scene, SaveLoadRoundTrip) {
  TempDir dir;
  SynthConfig cfg;
  cfg.size = 12;
  cfg.aux_channels = 2;
  const auto s = synth_generate(cfg);
  save_scene(dir.path() / "scene", s);
  const auto r = load_scene(dir.path() / "scene");
  EXPECT_EQ(r.hsi, s.hsi);
  EXPECT_EQ(r.aux, s.aux);
  EXPECT_EQ(r.labels, s.labels);
  EXPECT_EQ(r.classes, s.classes);
  EXPECT_EQ(io::read_file(dir.path() / "scene" / "labels.dtns").dtype, io::DType::i32);
  save_scene(dir.path() / "again", s);
  EXPECT_EQ(slurp(dir.path() / "again" / "hsi.dtns"), slurp(dir.path() / "scene" / "hsi.dtns"));
}

TEST(Preprocess, FitOnTrainOnly) {
  SynthConfig cfg;
  cfg.size = 20;
  const auto scene = synth_generate(cfg);
  const auto sp = split_dataset(scene.labels, scene.classes, 0.2, 1);
  const auto pre = fit_preprocess(scene, sp.train, 6);
  const auto d = apply_preprocess(pre, scene);
  ASSERT_EQ(d.hsi.shape(), (Shape{6, 20, 20}));
  // On training pixels: leading component has unit variance, aux is standardised.
  const std::size_t n = sp.train.size();
  double m0 = 0, v0 = 0, ma = 0, va = 0;
  for (auto px : sp.train) m0 += d.hsi[px], ma += d.aux[px];
  m0 /= double(n), ma /= double(n);
  for (auto px : sp.train) v0 += std::pow(d.hsi[px] - m0, 2), va += std::pow(d.aux[px] - ma, 2);
  EXPECT_NEAR(m0, 0.0, 1e-10);
  EXPECT_NEAR(v0 / double(n - 1), 1.0, 1e-9);
  EXPECT_NEAR(ma, 0.0, 1e-10);
  EXPECT_NEAR(va / double(n - 1), 1.0, 1e-9);
  // Test pixels do not influence the fit.
  auto perturbed = scene;
  for (auto px : sp.test) perturbed.hsi[px] += 100.0;
  const auto pre2 = fit_preprocess(perturbed, sp.train, 6);
  EXPECT_EQ(pre2.pca.components, pre.pca.components);
}

TEST(Preprocess, BatchLayout) {
  SynthConfig cfg;
  cfg.size = 10;
  const auto scene = synth_generate(cfg);
  const auto sp = split_dataset(scene.labels, scene.classes, 0.3, 2);
  const auto d = apply_preprocess(fit_preprocess(scene, sp.train, 4), scene);
  const auto b = make_batch<float>(d, sp.train, 0, 3, 5);
  EXPECT_EQ(b.hsi.shape(), (Shape{3, 1, 4, 5, 5}));
  EXPECT_EQ(b.aux.shape(), (Shape{3, 1, 5, 5}));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t px = sp.train[i];
    EXPECT_EQ(b.labels[i], scene.labels[px] - 1);
    const auto s = extract_patch(d.hsi, d.aux, d.labels, px / 10, px % 10, 5);
    for (std::size_t j = 0; j < 4 * 25; ++j) EXPECT_EQ(b.hsi[i * 100 + j], static_cast<float>(s.hsi[j]));
  }
  EXPECT_THROW(make_batch<float>(d, sp.train, 0, 3, 4), Error);
}
