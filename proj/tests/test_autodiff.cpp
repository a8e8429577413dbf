#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "recvsr/autodiff.hpp"
#include "recvsr/gradcheck_suite.hpp"

using namespace recvsr;
using DT = BasicTensor<double>;

TEST(Autodiff, SumOfSquaresByHand) {
  ad::Tape<double> tape;
  auto x = tape.leaf("x", DT({3}, std::vector<double>{1.0, -2.0, 0.5}));
  auto loss = ad::sum(ad::mul(x, x));
  EXPECT_DOUBLE_EQ(loss.value()[0], 5.25);
  const auto g = tape.backward(loss);
  EXPECT_EQ(g.at("x"), DT({3}, std::vector<double>{2.0, -4.0, 1.0}));
}

TEST(Autodiff, ReusedNodeAccumulates) {
  ad::Tape<double> tape;
  auto x = tape.leaf("x", DT({2}, 3.0));
  auto y = ad::add(x, ad::scale(x, 4.0));
  const auto g = tape.backward(ad::mean(y));
  for (double v : g.at("x").data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Autodiff, UnusedLeafAndConstants) {
  ad::Tape<double> tape;
  auto x = tape.leaf("x", DT({2}, 1.0));
  tape.leaf("unused", DT({4}, 7.0));
  auto c = tape.constant(DT({2}, 2.0));
  const auto g = tape.backward(ad::sum(ad::mul(x, c)));
  EXPECT_EQ(g.at("unused"), DT({4}, 0.0));
  EXPECT_EQ(g.at("x"), DT({2}, 2.0));
  EXPECT_EQ(g.size(), 2u);
}

TEST(Autodiff, L1SignsAndTies) {
  ad::Tape<double> tape;
  auto p = tape.leaf("p", DT({4}, std::vector<double>{1.0, -1.0, 0.5, 2.0}));
  auto q = tape.leaf("q", DT({4}, std::vector<double>{0.0, 0.0, 0.5, 3.0}));
  auto loss = ad::l1_loss(p, q);
  EXPECT_DOUBLE_EQ(loss.value()[0], 0.75);
  const auto g = tape.backward(loss);
  EXPECT_EQ(g.at("p"), DT({4}, std::vector<double>{0.25, -0.25, 0.0, -0.25}));
  EXPECT_EQ(g.at("q"), DT({4}, std::vector<double>{-0.25, 0.25, 0.0, 0.25}));
}

TEST(Autodiff, ConvKernelGradientIsCorrelationWithInput) {
  // d/dk sum(conv(x, k)) with a single 1x1 kernel equals sum(x).
  std::mt19937_64 rng(1);
  const Tensor xf = oracle::random_tensor(rng, {1, 4, 4});
  ad::Tape<double> tape;
  auto x = tape.constant(xf.cast<double>());
  auto k = tape.leaf("k", DT({1, 1, 1, 1}, 0.3));
  const auto g = tape.backward(ad::sum(ad::conv2d(x, k)));
  double s = 0.0;
  for (float v : xf.data()) s += v;
  EXPECT_NEAR(g.at("k")[0], s, 1e-12);
}

TEST(Autodiff, LeakyReluSlopes) {
  ad::Tape<double> tape;
  auto x = tape.leaf("x", DT({2}, std::vector<double>{-2.0, 3.0}));
  auto y = ad::leaky_relu(x, 0.1);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.2);
  const auto g = tape.backward(ad::sum(y));
  EXPECT_EQ(g.at("x"), DT({2}, std::vector<double>{0.1, 1.0}));
}

TEST(Autodiff, RecordMatchesDirectCalls) {
  std::mt19937_64 rng(2);
  const DT xv = oracle::random_tensor(rng, {4, 2, 2}).cast<double>();
  ad::Tape<double> tape;
  auto x = tape.leaf("x", xv);
  ad::OpParams<double> p;
  p.factor = 2;
  const std::vector<ad::Var<double>> in{x};
  auto viaRecord = ad::record<double>("pixel_shuffle", in, p);
  EXPECT_EQ(viaRecord.value(), pixel_shuffle(xv, 2));
  EXPECT_THROW(ad::record<double>("no_such_op", in, p), Error);
  EXPECT_THROW(ad::record<double>("add", in, p), Error);
}

TEST(Autodiff, Errors) {
  ad::Tape<double> a, b;
  auto x = a.leaf("x", DT({2}, 1.0));
  auto y = b.leaf("y", DT({2}, 1.0));
  EXPECT_THROW(ad::add(x, y), Error);
  EXPECT_THROW(a.backward(x), Error);
  EXPECT_THROW(b.backward(ad::sum(x)), Error);
  auto big = a.leaf("big", DT({1}, 1e300));
  EXPECT_THROW(ad::mul(big, big), Error);
}

TEST(GradCheck, DetectsAWrongBackward) {
  // y = 2x with a backward that claims dy/dx = 3.
  auto build = [](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) {
    const std::size_t id = v[0].id();
    auto y = t.push("bad", {id}, recvsr::scale(v[0].value(), 2.0),
                    [id](ad::Tape<double>& tt, const DT& g) { tt.accumulate(id, recvsr::scale(g, 3.0)); });
    return ad::sum(y);
  };
  const auto r = ad::grad_check<double>(build, {{"x", DT({3}, 1.0)}}, 1e-6);
  EXPECT_NEAR(r.max_rel_error, 1.0 / 3.0, 1e-6);
  EXPECT_EQ(r.worst_leaf, "x");
  EXPECT_EQ(r.coordinates, 3u);
}

TEST(GradCheck, SuiteCoversEveryPrimitiveWithinTolerance) {
  const auto cases = run_grad_suite(7);
  std::set<std::string> seen;
  for (const auto& c : cases) {
    seen.insert(c.primitive);
    EXPECT_LT(c.report.max_rel_error, 1e-3) << c.primitive << " " << c.shape << " worst " << c.report.worst_leaf
                                            << "[" << c.report.worst_index << "]";
    EXPECT_GT(c.report.coordinates, 0u);
  }
  for (const char* p : {"conv2d", "softmax", "bilinear_resize", "pixel_shuffle", "backward_warp", "residual_block",
                        "sca_aggregate", "l1_loss", "depthwise_filter", "leaky_relu"}) {
    EXPECT_EQ(seen.count(p), 1u) << p;
  }
}

TEST(GradCheck, SuiteIsDeterministic) {
  const auto a = run_grad_suite(3);
  const auto b = run_grad_suite(3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].report.max_rel_error, b[i].report.max_rel_error);
}
