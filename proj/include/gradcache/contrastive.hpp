#pragma once

// In-batch-negative contrastive loss
//
//   L = -(1/|S|) sum_i log softmax_j(f(s_i)^T g(t_j) / tau)[r_i]
//
// its closed-form representation gradients, and the single-graph baseline
// gradient with respect to both encoders.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"

namespace gradcache {

/// A training batch. Row i of `anchors` is s_i; its positive is row
/// `positives[i]` of `targets`. With `hard_negatives == h > 0`, the h rows
/// following each positive are that anchor's hard negatives; every other row
/// of `targets` acts as an in-batch negative.
struct Batch {
  Tensor anchors;
  Tensor targets;
  std::vector<std::size_t> positives;
  std::size_t hard_negatives = 0;

  std::size_t num_anchors() const { return anchors.rows(); }
  std::size_t num_targets() const { return targets.rows(); }

  void validate() const {
    if (anchors.rank() != 2 || targets.rank() != 2) {
      throw ShapeError("batch anchors and targets must be matrices");
    }
    if (positives.size() != num_anchors()) {
      throw ConfigError("batch has " + std::to_string(num_anchors()) + " anchors but " +
                        std::to_string(positives.size()) + " positive indices");
    }
    for (std::size_t i = 0; i < positives.size(); ++i) {
      if (positives[i] + hard_negatives >= num_targets()) {
        throw ConfigError("positive index " + std::to_string(positives[i]) +
                          " of anchor " + std::to_string(i) + " (with " +
                          std::to_string(hard_negatives) +
                          " hard negatives) out of range for " +
                          std::to_string(num_targets()) + " targets");
      }
    }
  }
};

/// Counts of encoder work done during a step, in examples (rows).
struct StepStats {
  std::size_t encoder_forward_rows = 0;
  std::size_t encoder_backward_rows = 0;
  std::size_t distance_forward_pairs = 0;
  std::size_t cache_floats = 0;
  std::size_t exchanges = 0;
};

inline void check_positives(std::span<const std::size_t> positives,
                            std::size_t num_anchors, std::size_t num_targets) {
  if (positives.size() != num_anchors) {
    throw ConfigError("expected " + std::to_string(num_anchors) +
                      " positive indices, got " + std::to_string(positives.size()));
  }
  for (std::size_t i = 0; i < positives.size(); ++i) {
    if (positives[i] >= num_targets) {
      throw ConfigError("positive index " + std::to_string(positives[i]) +
                        " of anchor " + std::to_string(i) + " out of range for " +
                        std::to_string(num_targets) + " targets");
    }
  }
}

/// Loss over an arbitrary score matrix [|S| x |T|]; differentiable.
inline Tensor contrastive_loss_from_scores(const Tensor& scores,
                                           std::span<const std::size_t> positives,
                                           double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (scores.rank() != 2) throw ShapeError("scores must be a matrix");
  check_positives(positives, scores.rows(), scores.cols());
  if (scores.rows() == 0) throw ShapeError("contrastive loss over zero anchors");
  const Tensor logits = ops::scale(scores, 1.0 / temperature);
  const Tensor log_pos = ops::pick(ops::row_log_softmax(logits), positives);
  return ops::scale(ops::sum(log_pos), -1.0 / static_cast<double>(scores.rows()));
}

/// Loss over representation matrices F [|S| x d], G [|T| x d]; differentiable.
inline Tensor contrastive_loss_tensor(const Tensor& reps_s, const Tensor& reps_t,
                                      std::span<const std::size_t> positives,
                                      double temperature) {
  if (reps_s.cols() != reps_t.cols()) {
    throw ShapeError("representation dims differ: " + shape_string(reps_s.shape()) +
                     " vs " + shape_string(reps_t.shape()));
  }
  return contrastive_loss_from_scores(ops::matmul_nt(reps_s, reps_t), positives,
                                      temperature);
}

struct SimilarityResult {
  Tensor logits;  // f(s_i)^T g(t_j) / tau
  Tensor p;       // row-softmax of logits
  double loss = 0.0;
};

/// Graph-less evaluation exposing the intermediate logits and p.
inline SimilarityResult contrastive_loss(const Tensor& reps_s, const Tensor& reps_t,
                                         std::span<const std::size_t> positives,
                                         double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (reps_s.cols() != reps_t.cols()) {
    throw ShapeError("representation dims differ: " + shape_string(reps_s.shape()) +
                     " vs " + shape_string(reps_t.shape()));
  }
  check_positives(positives, reps_s.rows(), reps_t.rows());
  if (reps_s.rows() == 0) throw ShapeError("contrastive loss over zero anchors");
  NoGraphScope no_graph;
  SimilarityResult r;
  r.logits = ops::scale(ops::matmul_nt(reps_s, reps_t), 1.0 / temperature);
  r.p = ops::row_softmax(r.logits);
  const Tensor log_pos = ops::pick(ops::row_log_softmax(r.logits), positives);
  r.loss = ops::scale(ops::sum(log_pos), -1.0 / static_cast<double>(reps_s.rows())).item();
  return r;
}

struct RepresentationGradients {
  Tensor u;        // dL/df(s_i), [|S| x d]
  Tensor v;        // dL/dg(t_j), [|T| x d]
  Tensor epsilon;  // eps_j = sum_{k: r_k = j} f(s_k), [|T| x d]
};

/// Closed-form representation gradients:
///   u_i = -(1/(|S| tau)) (g(t_{r_i}) - sum_j p_ij g(t_j))
///   v_j = -(1/(|S| tau)) (eps_j     - sum_i p_ij f(s_i))
/// Computed with plain loops, independent of the tape.
inline RepresentationGradients analytic_rep_grads(const Tensor& reps_s,
                                                  const Tensor& reps_t,
                                                  std::span<const std::size_t> positives,
                                                  double temperature,
                                                  const SimilarityResult& result) {
  const std::size_t ns = reps_s.rows(), nt = reps_t.rows(), d = reps_s.cols();
  check_positives(positives, ns, nt);
  const auto F = reps_s.data();
  const auto G = reps_t.data();
  const auto P = result.p.data();
  const double c = -1.0 / (static_cast<double>(ns) * temperature);

  std::vector<double> eps(nt * d, 0.0);
  for (std::size_t k = 0; k < ns; ++k)
    for (std::size_t a = 0; a < d; ++a) eps[positives[k] * d + a] += F[k * d + a];

  std::vector<double> u(ns * d), v(nt * d);
  for (std::size_t i = 0; i < ns; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      double expect = 0.0;
      for (std::size_t j = 0; j < nt; ++j) expect += P[i * nt + j] * G[j * d + a];
      u[i * d + a] = c * (G[positives[i] * d + a] - expect);
    }
  }
  for (std::size_t j = 0; j < nt; ++j) {
    for (std::size_t a = 0; a < d; ++a) {
      double expect = 0.0;
      for (std::size_t i = 0; i < ns; ++i) expect += P[i * nt + j] * F[i * d + a];
      v[j * d + a] = c * (eps[j * d + a] - expect);
    }
  }
  RepresentationGradients out;
  out.u = Tensor::matrix(ns, d, std::move(u));
  out.v = Tensor::matrix(nt, d, std::move(v));
  out.epsilon = Tensor::matrix(nt, d, std::move(eps));
  return out;
}

struct GradResult {
  DualGrads grads;
  double loss = 0.0;
};

/// Ground-truth gradients: one taped pass encoding all of S and T, the loss,
/// and a backward through everything.
inline GradResult direct_param_grads(const Batch& batch, const DualEncoder& model,
                                     double temperature, StepStats* stats = nullptr) {
  batch.validate();
  model.validate();
  Tape tape;
  const EncoderParams f = attach(tape, model.anchor);
  const EncoderParams g = model.tied ? f : attach(tape, model.target);
  const Tensor reps_s = encode(f, batch.anchors);
  const Tensor reps_t = encode(g, batch.targets);
  Tensor loss;
  {
    mem::CategoryScope category(mem::Category::loss_graph);
    loss = contrastive_loss_tensor(reps_s, reps_t, batch.positives, temperature);
  }
  GradResult out;
  out.loss = loss.item();
  out.grads.tied = model.tied;
  if (loss.attached()) {
    tape.backward(loss);
    out.grads.anchor = gradients(tape, f);
    if (!model.tied) out.grads.target = gradients(tape, g);
  } else {
    out.grads = DualGrads::zeros(model);
  }
  if (stats) {
    stats->encoder_forward_rows += batch.num_anchors() + batch.num_targets();
    stats->encoder_backward_rows += batch.num_anchors() + batch.num_targets();
  }
  return out;
}

}  // namespace gradcache
