#include <gtest/gtest.h>

#include "dffnet/ssafb.hpp"
#include "helpers.hpp"

using namespace dffnet;
using testing_util::randn;

namespace {

ParamStore<double> make_store(std::size_t C, std::uint64_t seed = 1) {
  ParamStore<double> s;
  Rng rng(seed);
  ssafb::add_params(s, "s", ssafb::SsafbConfig{C, 4, 5}, rng);
  return s;
}

void zero_all(ParamStore<double>& s) {
  for (std::size_t i = 0; i < s.size(); ++i) s.at(i).fill(0.0);
}

}  // namespace

TEST(ChannelAttention, ZeroParamsIsIdentity) {
  auto s = make_store(4);
  zero_all(s);
  const auto x = randn({2, 4, 3, 3}, 1);
  Tape<double> t;
  BoundParams<double> p(t, s);
  EXPECT_EQ(ssafb::channel_attention(p, "s", t.leaf(x, "x")).value(), x);
}

TEST(ChannelAttention, BroadcastsPerChannel) {
  auto s = make_store(4);
  zero_all(s);
  s.get("s.ca.fc2.b") = Tensor<double>::from({4}, {0.5, -1, 2, 0.25});
  Tape<double> t;
  BoundParams<double> p(t, s);
  const auto y = ssafb::channel_attention(p, "s", t.leaf(Tensor<double>(Shape{1, 4, 3, 3}, 2.0), "x")).value();
  const double a[] = {0.5, -1, 2, 0.25};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[c * 9 + i], 2.0 + a[c]);
}

TEST(SpatialAttention, ZeroParamsIsIdentity) {
  auto s = make_store(4);
  zero_all(s);
  const auto x = randn({1, 4, 6, 6}, 2);
  Tape<double> t;
  BoundParams<double> p(t, s);
  EXPECT_EQ(ssafb::spatial_attention(p, "s", ssafb::SsafbConfig{4, 4, 5}, t.leaf(x, "x")).value(), x);
}

TEST(SpatialAttention, SingleChannelPoolsEqualInput) {
  const auto x = randn({1, 1, 5, 5}, 3);
  for (std::size_t pick : {0, 1}) {
    auto s = make_store(1);
    zero_all(s);
    s.get("s.sa.conv.w").at(0, pick, 2, 2) = 1;
    Tape<double> t;
    BoundParams<double> p(t, s);
    const auto y = ssafb::spatial_attention(p, "s", ssafb::SsafbConfig{1, 4, 5}, t.leaf(x, "x")).value();
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], 2 * x[i]);
  }
}

TEST(SpatialAttention, MapBroadcastsOverChannels) {
  auto s = make_store(3);
  zero_all(s);
  s.get("s.sa.conv.b")[0] = 0.75;
  Tape<double> t;
  BoundParams<double> p(t, s);
  const auto x = randn({2, 3, 4, 4}, 4);
  const auto y = ssafb::spatial_attention(p, "s", ssafb::SsafbConfig{3, 4, 5}, t.leaf(x, "x")).value();
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i] + 0.75);
}

TEST(Fuse, ShuffleInterleavesStreams) {
  Tensor<double> h(Shape{1, 2, 1, 1}), x(Shape{1, 2, 1, 1});
  h[0] = 10, h[1] = 11, x[0] = 20, x[1] = 21;
  const double expect[] = {10, 20, 11, 21};
  for (std::size_t k = 0; k < 4; ++k) {
    auto s = make_store(2);
    zero_all(s);
    s.get("s.fuse.w").at(0, k, 0, 0) = 1;
    Tape<double> t;
    BoundParams<double> p(t, s);
    const auto y = ssafb::fuse(p, "s", ssafb::SsafbConfig{2, 4, 5}, t.leaf(h, "h"), t.leaf(x, "x")).value();
    EXPECT_EQ(y[0], expect[k]) << "input channel " << k;
  }
}

TEST(Fuse, ZeroConvGivesZero) {
  auto s = make_store(4);
  zero_all(s);
  Tape<double> t;
  BoundParams<double> p(t, s);
  const auto y = ssafb::fuse(p, "s", ssafb::SsafbConfig{4, 4, 5}, t.leaf(randn({1, 4, 3, 3}, 1), "h"),
                             t.leaf(randn({1, 4, 3, 3}, 2), "x")).value();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fuse, AveragingKernel) {
  const std::size_t C = 2;
  auto s = make_store(C);
  zero_all(s);
  for (std::size_t i = 0; i < C; ++i) {
    s.get("s.fuse.w").at(i, 2 * i, 0, 0) = 0.5;
    s.get("s.fuse.w").at(i, 2 * i + 1, 0, 0) = 0.5;
  }
  const auto h = randn({1, C, 2, 2}, 5), x = randn({1, C, 2, 2}, 6);
  Tape<double> t;
  BoundParams<double> p(t, s);
  const auto y = ssafb::fuse(p, "s", ssafb::SsafbConfig{C, 4, 5}, t.leaf(h, "h"), t.leaf(x, "x")).value();
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], (h[i] + x[i]) / 2, 1e-15);
}

TEST(Ssafb, ZeroParamsLeavesStreamsUnchanged) {
  auto s = make_store(4);
  zero_all(s);
  const auto h = randn({2, 4, 5, 5}, 7), x = randn({2, 4, 5, 5}, 8);
  Tape<double> t;
  BoundParams<double> p(t, s);
  auto o = ssafb::forward(p, "s", ssafb::SsafbConfig{4, 4, 5}, t.leaf(h, "h"), t.leaf(x, "x"));
  EXPECT_EQ(o.hsi.value(), h);
  EXPECT_EQ(o.aux.value(), x);
  for (double v : o.fused.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Ssafb, ShapesPreserved) {
  for (auto [C, H, W] : {std::tuple<std::size_t, std::size_t, std::size_t>{4, 5, 5}, {8, 11, 11}, {4, 3, 7}}) {
    const auto s = make_store(C, C + H);
    Tape<double> t;
    BoundParams<double> p(t, s);
    auto o = ssafb::forward(p, "s", ssafb::SsafbConfig{C, 4, 5}, t.leaf(randn({2, C, H, W}, 1), "h"),
                            t.leaf(randn({2, C, H, W}, 2), "x"));
    for (auto* v : {&o.hsi, &o.aux, &o.fused}) EXPECT_EQ(v->shape(), (Shape{2, C, H, W}));
  }
}

TEST(Ssafb, StreamMismatchIsShapeError) {
  const auto s = make_store(4);
  Tape<double> t;
  BoundParams<double> p(t, s);
  EXPECT_THROW(ssafb::forward(p, "s", ssafb::SsafbConfig{4, 4, 5}, t.leaf(randn({1, 4, 5, 5}, 1), "h"),
                              t.leaf(randn({1, 4, 4, 5}, 2), "x")),
               ShapeError);
}
