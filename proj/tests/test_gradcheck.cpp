#include <gtest/gtest.h>

#include <set>

#include "dffnet/gradcheck.hpp"

using namespace dffnet;

namespace {

std::set<std::string> recorded_ops(const gradcheck::Case& c) {
  Rng rng(1);
  auto in = c.make(rng);
  Tape<double> t;
  std::vector<Var<double>> vs;
  for (const auto& [name, v] : in.leaves) vs.push_back(t.leaf(v, name));
  in.build(t, vs);
  std::set<std::string> ops;
  for (NodeId i = 0; i < t.size(); ++i)
    if (!t.is_leaf(i)) ops.insert(t.op(i));
  return ops;
}

}  // namespace

TEST(GradcheckRegistry, CoversEveryDifferentiableOp) {
  std::set<std::string> seen;
  for (const auto& c : gradcheck::registry()) {
    const auto ops = recorded_ops(c);
    seen.insert(ops.begin(), ops.end());
  }
  const char* required[] = {"add",   "sub",      "mul",          "scale",       "sum",       "mean",
                            "relu",  "reshape",  "concat",       "channel_shuffle", "add_broadcast",
                            "matmul", "linear",  "softmax",      "cross_entropy", "conv2d", "conv3d",
                            "rfft2", "irfft2",   "complex_mul"};
  for (const char* op : required) EXPECT_TRUE(seen.count(op)) << op;
  std::string all;
  for (const auto& s : seen) all += s + " ";
  std::size_t pools = 0;
  for (const auto& s : seen) pools += s.rfind("pool", 0) == 0;
  EXPECT_GE(pools, 4u) << all;
}

TEST(GradcheckRegistry, NamesAreUniqueAndFindable) {
  const auto names = gradcheck::names();
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  for (const auto& n : names) EXPECT_NE(gradcheck::find(n), nullptr) << n;
  EXPECT_EQ(gradcheck::find("no_such_op"), nullptr);
  for (const char* n : {"dfb", "ssafb", "model"}) EXPECT_NE(gradcheck::find(n), nullptr) << n;
}

TEST(GradcheckRegistry, PrimitiveCasesPass) {
  for (const auto& c : gradcheck::registry()) {
    if (c.composite || c.name.find('.') != std::string::npos || c.name == "dfb" || c.name == "ssafb" ||
        c.name == "dffm" || c.name == "model")
      continue;
    const auto r = gradcheck::run(c);
    EXPECT_TRUE(r.pass) << c.name << " max rel error " << r.max_rel_error();
    EXPECT_LE(r.max_rel_error(), 1e-4) << c.name;
    for (const auto& l : r.leaves) EXPECT_GT(l.checked, 0u) << c.name << " " << l.name;
  }
}

TEST(GradcheckRegistry, RunIsDeterministic) {
  const auto* c = gradcheck::find("conv2d");
  ASSERT_NE(c, nullptr);
  const auto a = gradcheck::run(*c), b = gradcheck::run(*c);
  ASSERT_EQ(a.leaves.size(), b.leaves.size());
  for (std::size_t i = 0; i < a.leaves.size(); ++i) EXPECT_EQ(a.leaves[i].max_rel_error, b.leaves[i].max_rel_error);
}

TEST(GradcheckRegistry, DfbBlockPasses) {
  const auto r = gradcheck::run(*gradcheck::find("dfb.apply_filter"));
  EXPECT_TRUE(r.pass) << r.max_rel_error();
}
