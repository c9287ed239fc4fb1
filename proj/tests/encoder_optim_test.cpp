#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "gradcache/checkpoint.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/optim.hpp"
#include "test_util.hpp"

namespace gradcache {
namespace {

using testing::random_matrix;

TEST(Encoder, IdentityLinearLayer) {
  EncoderParams p;
  Layer l;
  l.weight = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  l.bias = Tensor::matrix(1, 3, {0, 0, 0});
  p.layers.push_back(l);
  const Tensor x = random_matrix(4, 3, 1);
  EXPECT_EQ(encode(p, x, false).to_vector(), x.to_vector());
  EXPECT_EQ(encode(EncoderParams::identity(3), x).to_vector(), x.to_vector());
}

TEST(Encoder, EmptyBatch) {
  const auto p = init_params(3, {5, 7, 4});
  const Tensor out = encode(p, Tensor::zeros({0, 5}), false);
  EXPECT_EQ(out.shape(), (Shape{0, 4}));
}

TEST(Encoder, InputWidthMismatch) {
  const auto p = init_params(3, {5, 4});
  EXPECT_THROW(encode(p, Tensor::zeros({2, 6})), ShapeError);
}

TEST(Encoder, DeterministicAndTapeIndependent) {
  const auto p = init_params(42, {6, 32, 16});
  const Tensor x = random_matrix(9, 6, 5);
  const Tensor a = encode(p, x, false);
  const Tensor b = encode(init_params(42, {6, 32, 16}), x, false);
  EXPECT_EQ(a.to_vector(), b.to_vector());
  Tape tape;
  const Tensor taped = encode(attach(tape, p), x, true);
  EXPECT_TRUE(taped.attached());
  EXPECT_EQ(taped.to_vector(), a.to_vector());
  // taped=false on attached params still records nothing
  const std::size_t before = tape.size();
  const Tensor untaped = encode(attach(tape, p), x, false);
  EXPECT_FALSE(untaped.attached());
  EXPECT_EQ(tape.size(), before + 4);  // only the four new leaves
}

TEST(InitParams, SameSeedBitIdentical) {
  EXPECT_EQ(init_params(7, {4, 8, 16}).flat(), init_params(7, {4, 8, 16}).flat());
  EXPECT_NE(init_params(7, {4, 8, 16}).flat(), init_params(8, {4, 8, 16}).flat());
}

TEST(InitParams, BiasZeroAndShapesChain) {
  const auto p = init_params(1, {4, 4});
  for (double b : p.layers[0].bias.data()) EXPECT_EQ(b, 0.0);
  const auto q = init_params(1, {4, 8, 16});
  ASSERT_EQ(q.layers.size(), 2u);
  EXPECT_EQ(q.layers[0].weight.shape(), (Shape{4, 8}));
  EXPECT_EQ(q.layers[1].weight.shape(), (Shape{8, 16}));
  EXPECT_EQ(q.out_dim(), 16u);
  EXPECT_EQ(q.layers[0].activation, Activation::tanh);
  EXPECT_EQ(q.layers[1].activation, Activation::identity);
  EXPECT_NO_THROW(q.validate());
}

TEST(InitParams, UniformBound) {
  const auto p = init_params(9, {25, 10});
  for (double w : p.layers[0].weight.data()) EXPECT_LE(std::abs(w), 0.2);
}

TEST(InitParams, RejectsEmptyDims) {
  EXPECT_THROW(init_params(1, std::span<const std::size_t>{}), ConfigError);
}

TEST(EncoderParams, ValidateCatchesBrokenChain) {
  auto p = init_params(1, {4, 8, 16});
  p.layers[1].weight = Tensor::zeros({7, 16});
  EXPECT_THROW(p.validate(), ShapeError);
}

TEST(Optimizer, SgdArithmetic) {
  const OptimizerState s = testing::sgd(0.1);
  const std::vector<Tensor> p{Tensor::scalar(1.0)};
  const std::vector<Tensor> g{Tensor::scalar(2.0)};
  const auto upd = optimizer_step(s, p, g);
  EXPECT_DOUBLE_EQ(upd.params[0].item(), 0.8);
  EXPECT_EQ(upd.state.step, 1u);
  EXPECT_EQ(p[0].item(), 1.0);  // input untouched
}

TEST(Optimizer, ZeroGradLeavesParams) {
  const std::vector<Tensor> p{Tensor::vector({1.5, -2.0})};
  const std::vector<Tensor> g{Tensor::vector({0.0, 0.0})};
  EXPECT_EQ(optimizer_step(testing::sgd(0.3), p, g).params[0].to_vector(), p[0].to_vector());
  EXPECT_EQ(optimizer_step(testing::adam(0.3), p, g).params[0].to_vector(), p[0].to_vector());
}

TEST(Optimizer, AdamFirstStepHandComputed) {
  // Step 1: m = 0.1 g, v = 0.001 g^2; bias correction gives m_hat = g and
  // v_hat = g^2, so the update is -lr * g / (|g| + eps).
  const double lr = 0.1, eps = 1e-8;
  const std::vector<Tensor> p{Tensor::vector({1.0, -3.0})};
  const std::vector<Tensor> g{Tensor::vector({0.5, -2.0})};
  const auto upd = optimizer_step(testing::adam(lr), p, g);
  EXPECT_NEAR(upd.params[0][0], 1.0 - lr * 0.5 / (0.5 + eps), 1e-15);
  EXPECT_NEAR(upd.params[0][1], -3.0 + lr * 2.0 / (2.0 + eps), 1e-15);
  EXPECT_NEAR(upd.state.m[0][0], 0.05, 1e-15);
  EXPECT_NEAR(upd.state.v[0][1], 0.004, 1e-15);
}

TEST(Optimizer, AdamSecondStepHandComputed) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g1 = 0.3, g2 = -0.7;
  const std::vector<Tensor> p0{Tensor::scalar(2.0)};
  const auto s1 = optimizer_step(testing::adam(lr), p0, std::vector<Tensor>{Tensor::scalar(g1)});
  const auto s2 = optimizer_step(s1.state, s1.params, std::vector<Tensor>{Tensor::scalar(g2)});
  double m = (1 - b1) * g1, v = (1 - b2) * g1 * g1;
  double p = 2.0 - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  m = b1 * m + (1 - b1) * g2;
  v = b2 * v + (1 - b2) * g2 * g2;
  p -= lr * (m / (1 - b1 * b1)) / (std::sqrt(v / (1 - b2 * b2)) + eps);
  EXPECT_NEAR(s2.params[0].item(), p, 1e-14);
  EXPECT_EQ(s2.state.step, 2u);
}

TEST(Optimizer, PureFunction) {
  const auto model = testing::make_model(2, 5, 4, 3);
  const auto params = model.tensors();
  std::vector<Tensor> grads;
  for (std::size_t k = 0; k < params.size(); ++k)
    grads.push_back(random_matrix(params[k].rows(), params[k].cols(), 100 + k));
  for (auto& g : grads) g = Tensor(g.shape(), g.to_vector());
  const OptimizerState s = testing::adam(0.01);
  const auto a = optimizer_step(s, params, grads);
  const auto b = optimizer_step(s, params, grads);
  for (std::size_t k = 0; k < params.size(); ++k) {
    EXPECT_EQ(a.params[k].to_vector(), b.params[k].to_vector());
    EXPECT_EQ(params[k].to_vector(), model.tensors()[k].to_vector());
  }
  EXPECT_EQ(s.step, 0u);
  EXPECT_TRUE(s.m.empty());
}

TEST(Optimizer, ShapeMismatch) {
  const std::vector<Tensor> p{Tensor::vector({1.0, 2.0})};
  const std::vector<Tensor> g{Tensor::vector({1.0})};
  EXPECT_THROW(optimizer_step(testing::sgd(0.1), p, g), ShapeError);
  EXPECT_THROW(optimizer_step(testing::sgd(0.1), p, std::vector<Tensor>{}), ShapeError);
}

TEST(Checkpoint, RoundTripIsLossless) {
  Checkpoint ck;
  ck.model = testing::make_model(2, 6, 16, 11);
  ck.head = init_params(5, {32, 8, 1});
  const auto path = std::filesystem::temp_directory_path() / "gradcache_ck_test.json";
  save_checkpoint(path.string(), ck);
  const Checkpoint back = load_checkpoint(path.string());
  EXPECT_EQ(back.model.flat(), ck.model.flat());
  ASSERT_TRUE(back.head.has_value());
  EXPECT_EQ(back.head->flat(), ck.head->flat());
  EXPECT_EQ(back.model.anchor.layers[0].activation, Activation::tanh);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TiedAndVersionCheck) {
  Checkpoint ck;
  ck.model.anchor = init_params(1, {3, 4});
  ck.model.tied = true;
  auto j = checkpoint_to_json(ck);
  EXPECT_FALSE(j["encoders"].contains("target"));
  const auto back = checkpoint_from_json(j);
  EXPECT_TRUE(back.model.tied);
  j["version"] = 99;
  EXPECT_THROW(checkpoint_from_json(j), ConfigError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/ck.json"), ConfigError);
}

}  // namespace
}  // namespace gradcache
