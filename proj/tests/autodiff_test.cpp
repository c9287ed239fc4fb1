#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/gradcheck.hpp"
#include "gradcache/memtrace.hpp"

namespace gradcache {
namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(r * c);
  for (auto& x : v) x = dist(rng);
  return Tensor::matrix(r, c, std::move(v));
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1}, std::vector<double>(1)), ShapeError);
  const Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Ops, MatmulIdentity) {
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor x = Tensor::from_rows({{3, -1}, {0.5, 7}});
  EXPECT_EQ(ops::matmul(eye, x).to_vector(), x.to_vector());
}

TEST(Ops, ReluDefinition) {
  EXPECT_EQ(ops::relu(Tensor::vector({-1, 2})).to_vector(), (std::vector<double>{0, 2}));
}

TEST(Ops, RowSoftmaxSymmetric) {
  EXPECT_EQ(ops::row_softmax(Tensor::vector({0, 0})).to_vector(),
            (std::vector<double>{0.5, 0.5}));
}

TEST(Ops, RowLogSoftmaxStaysFinite) {
  const auto y = ops::row_log_softmax(Tensor::vector({0.0, -2000.0})).to_vector();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], -2000.0);
  const auto z = ops::row_log_softmax(Tensor::vector({1.0, 2.0, 3.0})).to_vector();
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(z[0], 1.0 - lse, 1e-15);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(ops::add(a, Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(ops::mul(a, Tensor::zeros({1, 3})), ShapeError);
  EXPECT_THROW(ops::index_rows(a, std::vector<std::size_t>{2}), ShapeError);
}

TEST(Backward, SumIsOnes) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2, 3}));
  const Tensor y = ops::sum(x);
  backward(y);
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, DotWithSelf) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  const Tensor y = ops::sum(ops::matmul_nt(x, x));
  backward(y);
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{2, 4}));
}

TEST(Backward, AccumulatesAcrossUses) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({0.3, -1.7, 2.5}));
  const Tensor y = ops::add(ops::sum(x), ops::sum(x));
  backward(y);
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{2, 2, 2}));
}

TEST(Backward, LogSoftmaxMatchesFiniteDifferences) {
  const std::vector<std::size_t> first{0};
  auto f = [&](const Tensor& x) {
    return ops::sum(ops::log(ops::pick(ops::row_softmax(x), first)));
  };
  const auto report = finite_diff_check(f, Tensor::vector({1, 0}),
                                        {.step = 1e-6, .tolerance = 1e-5});
  EXPECT_TRUE(report.passed) << report.max_rel_err;
  const double sigma = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(report.analytic[0], 1.0 - sigma, 1e-15);
  EXPECT_NEAR(report.analytic[1], -(1.0 - sigma), 1e-15);
}

TEST(Backward, NonScalarSeedRejected) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  const Tensor y = ops::scale(x, 2.0);
  EXPECT_THROW(backward(y), GraphError);
}

TEST(Backward, UnreachedNodesKeepZeroAndShapesMatch) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  const Tensor unused = tape.variable(Tensor::from_rows({{5, 6, 7}}));
  const Tensor y = ops::sum(ops::tanh(x));
  backward(y);
  EXPECT_EQ(tape.grad(unused).to_vector(), (std::vector<double>{0, 0, 0}));
  for (std::size_t k = 0; k < tape.size(); ++k) {
    for (const auto& in : tape.inputs_of(k)) {
      if (in) {
        EXPECT_LT(*in, k);
      }
    }
  }
}

TEST(Backward, SingleUseUntilZeroGrad) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  const Tensor y = ops::sum(ops::mul(x, x));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), GraphError);
  EXPECT_THROW(ops::sum(x), GraphError);  // no recording after backward
  tape.zero_grad();
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{2, 4}));
}

TEST(Backward, MixedTapesRejected) {
  Tape a, b;
  const Tensor x = a.variable(Tensor::vector({1}));
  const Tensor y = b.variable(Tensor::vector({2}));
  EXPECT_THROW(ops::add(x, y), GraphError);
}

TEST(NoGraph, SameValuesAndNoNodes) {
  const Tensor w = random_matrix(4, 3, 1);
  const Tensor x = random_matrix(5, 4, 2);
  Tape tape;
  const Tensor wl = tape.variable(w);
  const Tensor taped = ops::tanh(ops::matmul(x, wl));
  const std::size_t before = tape.size();
  const Tensor plain = no_graph_scope([&] { return ops::tanh(ops::matmul(x, wl)); });
  EXPECT_EQ(tape.size(), before);
  EXPECT_FALSE(plain.attached());
  EXPECT_EQ(plain.to_vector(), taped.to_vector());
  try {
    backward(ops::sum(plain));
    FAIL() << "expected GraphError";
  } catch (const GraphError& e) {
    EXPECT_STREQ(e.what(), "no graph recorded");
  }
}

TEST(NoGraph, LowerPeakThanTaped) {
  const Tensor w1 = random_matrix(8, 32, 3);
  const Tensor w2 = random_matrix(32, 16, 4);
  const Tensor x = random_matrix(64, 8, 5);
  auto run = [&](bool taped) {
    auto counter = std::make_shared<mem::MemCounter>();
    mem::CounterScope scope(counter);
    Tape tape;
    const Tensor a = taped ? tape.variable(w1) : w1;
    const Tensor b = taped ? tape.variable(w2) : w2;
    auto body = [&] {
      Tensor h = ops::matmul(x, a);
      h = ops::tanh(h);
      h = ops::matmul(h, b);
      return ops::sum(h);
    };
    if (taped) {
      tape.backward(body());
    } else {
      no_graph_scope(body);
    }
    return counter->peak(mem::Category::activation);
  };
  EXPECT_LT(run(false), run(true));
}

TEST(Determinism, BitIdenticalReruns) {
  auto run = [] {
    Tape tape;
    const Tensor w = tape.variable(random_matrix(6, 4, 11));
    const Tensor x = random_matrix(3, 6, 12);
    const Tensor y = ops::mean(ops::row_softmax(ops::tanh(ops::matmul(x, w))));
    tape.backward(y);
    auto out = tape.grad(w).to_vector();
    out.push_back(y.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](const Tensor& x) { return ops::sum(ops::mul(x, x)); };
  const auto r = finite_diff_check(f, Tensor::vector({1, 2, 3}), {.step = 1e-6, .tolerance = 1e-7});
  EXPECT_TRUE(r.passed) << r.max_rel_err;
  EXPECT_LT(r.max_rel_err, 1e-7);
  EXPECT_EQ(r.coords_checked, 3u);
}

TEST(GradCheck, ConstantFunction) {
  auto f = [](const Tensor&) { return Tensor::scalar(4.0); };
  const auto r = finite_diff_check(f, Tensor::vector({1, 2}));
  EXPECT_EQ(r.analytic, (std::vector<double>{0, 0}));
  EXPECT_EQ(r.max_rel_err, 0.0);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  auto f = [](const Tensor& x) { return ops::sum(x); };
  EXPECT_THROW(finite_diff_check(f, Tensor::vector({1}), {.step = 0.0}), ConfigError);
}

// Every op's backward rule against central differences on random inputs.
struct OpCase {
  std::string name;
  std::function<Tensor(const Tensor&)> f;
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
};

void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, PassesFiniteDifferenceCheck) {
  const auto& c = GetParam();
  const std::size_t r = c.shape.size() == 2 ? c.shape[0] : 1;
  const Tensor m = random_matrix(r, shape_numel(c.shape) / r, 99, c.lo, c.hi);
  const Tensor x(c.shape, m.to_vector());
  const auto rep = finite_diff_check(c.f, x, {.step = 1e-6, .tolerance = 1e-5});
  EXPECT_TRUE(rep.passed) << c.name << " max rel err " << rep.max_rel_err;
}

// Fixed random weights so each case reduces to a scalar via a nontrivial
// linear functional.
Tensor project(const Tensor& y) {
  const Tensor w(y.shape(), random_matrix(1, y.size(), 7).to_vector());
  return ops::sum(ops::mul(y, w));
}

const Tensor kOther = random_matrix(3, 4, 21);
const Tensor kRight = random_matrix(4, 2, 22);
const Tensor kRow = random_matrix(1, 4, 23);
const std::vector<std::size_t> kIdx{2, 0, 2, 1};
const std::vector<std::size_t> kCols{3, 0, 1};

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"matmul_lhs", [](const Tensor& x) { return project(ops::matmul(x, kRight)); }, {3, 4}},
        OpCase{"matmul_rhs", [](const Tensor& x) { return project(ops::matmul(kOther, x)); }, {4, 2}},
        OpCase{"matmul_nt", [](const Tensor& x) { return project(ops::matmul_nt(x, kOther)); }, {2, 4}},
        OpCase{"matmul_nt_self", [](const Tensor& x) { return project(ops::matmul_nt(x, x)); }, {3, 4}},
        OpCase{"add", [](const Tensor& x) { return project(ops::add(x, kOther)); }, {3, 4}},
        OpCase{"add_bias", [](const Tensor& x) { return project(ops::add(kOther, x)); }, {1, 4}},
        OpCase{"mul", [](const Tensor& x) { return project(ops::mul(x, kOther)); }, {3, 4}},
        OpCase{"scale", [](const Tensor& x) { return project(ops::scale(x, -2.5)); }, {3, 4}},
        OpCase{"relu", [](const Tensor& x) { return project(ops::relu(x)); }, {3, 4}},
        OpCase{"tanh", [](const Tensor& x) { return project(ops::tanh(x)); }, {3, 4}},
        OpCase{"exp", [](const Tensor& x) { return project(ops::exp(x)); }, {3, 4}},
        OpCase{"log", [](const Tensor& x) { return project(ops::log(x)); }, {3, 4}, 0.5, 2.0},
        OpCase{"row_softmax", [](const Tensor& x) { return project(ops::row_softmax(x)); }, {3, 4}},
        OpCase{"row_log_softmax", [](const Tensor& x) { return project(ops::row_log_softmax(x)); }, {3, 4}},
        OpCase{"sum", [](const Tensor& x) { return ops::sum(ops::mul(x, x)); }, {3, 4}},
        OpCase{"mean", [](const Tensor& x) { return ops::mean(ops::tanh(x)); }, {3, 4}},
        OpCase{"transpose", [](const Tensor& x) { return project(ops::transpose(x)); }, {3, 4}},
        OpCase{"concat_rows", [](const Tensor& x) { return project(ops::concat_rows({x, kOther, x})); }, {3, 4}},
        OpCase{"concat_cols", [](const Tensor& x) { return project(ops::concat_cols(kOther, x)); }, {3, 4}},
        OpCase{"index_rows", [](const Tensor& x) { return project(ops::index_rows(x, kIdx)); }, {3, 4}},
        OpCase{"pick", [](const Tensor& x) { return project(ops::pick(x, kCols)); }, {3, 4}},
        OpCase{"reshape", [](const Tensor& x) { return project(ops::reshape(x, {6, 2})); }, {3, 4}}),
    [](const auto& info) { return info.param.name; });

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({0.0, 1.0, -1.0}));
  tape.backward(ops::sum(ops::relu(x)));
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{0, 1, 0}));
}

}  // namespace
}  // namespace gradcache
