#pragma once

// Gradient caching with a parameterized distance d_ij = phi(f(s_i), g(t_j)).
//
// Two caches are chained: the distance gradient cache w_ij = dL/dd_ij is
// built from the graph-less distances, then each (anchor chunk, target chunk)
// pair block re-runs phi on its own tape seeded with w, accumulating the head
// gradient and folding w into u_i = sum_j w_ij dd_ij/df(s_i) and
// v_j = sum_i w_ij dd_ij/dg(t_j). Those form a representation gradient cache
// consumed by the ordinary encoder step 3.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/contrastive.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/optim.hpp"
#include "gradcache/trainer.hpp"

namespace gradcache {

/// phi: either the parameter-free dot product or an MLP on [f(s); g(t)]
/// producing one scalar per pair.
struct DistanceHead {
  enum class Kind { dot, mlp };

  Kind kind = Kind::dot;
  EncoderParams mlp;

  static DistanceHead dot_product() { return {}; }

  /// One hidden layer of `hidden` units on the concatenated 2d-vector.
  static DistanceHead make_mlp(std::uint64_t seed, std::size_t embedding_dim,
                               std::size_t hidden, Activation activation = Activation::tanh) {
    DistanceHead h;
    h.kind = Kind::mlp;
    h.mlp = init_params(seed, {2 * embedding_dim, hidden, 1}, activation);
    return h;
  }

  bool has_params() const { return kind == Kind::mlp; }

  void validate(std::size_t embedding_dim) const {
    if (kind == Kind::dot) return;
    mlp.validate();
    if (mlp.in_dim() != 2 * embedding_dim || mlp.out_dim() != 1) {
      throw ShapeError("distance head must map " + std::to_string(2 * embedding_dim) +
                       " inputs to 1 output");
    }
  }

  DistanceHead with_mlp(EncoderParams p) const {
    DistanceHead h = *this;
    h.mlp = std::move(p);
    return h;
  }
};

/// Scores for every pair of a block: [rows(fb) x rows(gb)].
inline Tensor phi_block(const DistanceHead& head, const Tensor& fb, const Tensor& gb) {
  if (head.kind == DistanceHead::Kind::dot) return ops::matmul_nt(fb, gb);
  const std::size_t a = fb.rows(), b = gb.rows();
  std::vector<std::size_t> left(a * b), right(a * b);
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      left[i * b + j] = i;
      right[i * b + j] = j;
    }
  const Tensor pairs = ops::concat_cols(ops::index_rows(fb, left), ops::index_rows(gb, right));
  return ops::reshape(encode(head.mlp, pairs), Shape{a, b});
}

struct PairBlock {
  IndexRange anchors;
  IndexRange targets;
};

/// Pair blocks in summation order: outer loop over anchor chunks, inner over
/// target chunks.
inline std::vector<PairBlock> pair_blocks(const SubBatchPlan& plan) {
  std::vector<PairBlock> out;
  for (const auto& s : plan.anchor_chunks)
    for (const auto& t : plan.target_chunks) out.push_back({s, t});
  return out;
}

struct DeepForward {
  Representations reps;
  Tensor distances;  // [|S| x |T|]
};

/// First pass: representations and all pairwise distances, recording nothing.
inline DeepForward forward_collect(const Batch& batch, const DualEncoder& model,
                                   const DistanceHead& head, const SubBatchPlan& plan,
                                   StepStats* stats = nullptr) {
  DeepForward out;
  out.reps = step1_graphless_forward(batch, model, plan, stats);
  NoGraphScope no_graph;
  const std::size_t ns = batch.num_anchors(), nt = batch.num_targets();
  auto store = std::make_shared<mem::Buffer>(std::vector<double>(ns * nt, 0.0),
                                             mem::Category::representation_store);
  for (const auto& blk : pair_blocks(plan)) {
    const Tensor fb = ops::slice_rows(out.reps.anchors, blk.anchors.begin, blk.anchors.end);
    const Tensor gb = ops::slice_rows(out.reps.targets, blk.targets.begin, blk.targets.end);
    const Tensor db = phi_block(head, fb, gb);
    const std::size_t b = blk.targets.size();
    for (std::size_t i = 0; i < blk.anchors.size(); ++i) {
      const auto row = db.data().subspan(i * b, b);
      std::copy(row.begin(), row.end(),
                store->data().begin() + (blk.anchors.begin + i) * nt + blk.targets.begin);
    }
    if (stats) stats->distance_forward_pairs += blk.anchors.size() * b;
  }
  out.distances = Tensor(Shape{ns, nt}, std::move(store));
  return out;
}

struct DistanceGradientCache {
  Tensor w;       // dL/dd_ij, [|S| x |T|]
  Tensor d_vals;  // d_ij, [|S| x |T|]
  bool filled = false;
  double loss = 0.0;
};

/// Loss over the distance matrix and w = dL/dd.
inline DistanceGradientCache build_distance_cache(const Tensor& d_vals,
                                                  std::span<const std::size_t> positives,
                                                  double temperature) {
  DistanceGradientCache cache;
  Tape tape;
  Tensor leaf, loss;
  {
    mem::CategoryScope category(mem::Category::loss_graph);
    leaf = tape.variable(d_vals.detach(), mem::Category::loss_graph);
    loss = contrastive_loss_from_scores(leaf, positives, temperature);
    tape.backward(loss);
  }
  mem::CategoryScope category(mem::Category::gradient_cache);
  cache.w = tape.grad(leaf).clone();
  cache.d_vals = d_vals.detach();
  cache.loss = loss.item();
  cache.filled = true;
  return cache;
}

struct FoldResult {
  EncoderParams head_grad;  // empty layers for the dot product
  RepresentationGradientCache cache;
};

namespace detail {
inline Tensor block_of(const Tensor& m, const PairBlock& blk) {
  const std::size_t nt = m.cols(), b = blk.targets.size();
  std::vector<double> out(blk.anchors.size() * b);
  for (std::size_t i = 0; i < blk.anchors.size(); ++i) {
    const auto row = m.data().subspan((blk.anchors.begin + i) * nt + blk.targets.begin, b);
    std::copy(row.begin(), row.end(), out.begin() + i * b);
  }
  return Tensor::matrix(blk.anchors.size(), b, std::move(out));
}
}  // namespace detail

/// Second pass over pair blocks: head gradient plus folded u, v.
inline FoldResult update_omega_and_fold(const Representations& reps,
                                        const DistanceHead& head,
                                        const DistanceGradientCache& dcache,
                                        const SubBatchPlan& plan,
                                        StepStats* stats = nullptr, bool reverse = false) {
  if (!dcache.filled) {
    throw GraphError("distance gradient cache used before it was filled");
  }
  const std::size_t ns = reps.anchors.rows(), nt = reps.targets.rows();
  const std::size_t d = reps.anchors.cols();
  if (dcache.w.rows() != ns || dcache.w.cols() != nt) {
    throw ShapeError("distance cache shape does not match representations");
  }
  FoldResult out;
  out.head_grad = zeros_like(head.mlp);
  std::vector<double> u(ns * d, 0.0), v(nt * d, 0.0);

  auto blocks = pair_blocks(plan);
  if (reverse) std::reverse(blocks.begin(), blocks.end());
  for (const auto& blk : blocks) {
    Tape tape;
    const Tensor fb = tape.variable(
        ops::slice_rows(reps.anchors, blk.anchors.begin, blk.anchors.end));
    const Tensor gb = tape.variable(
        ops::slice_rows(reps.targets, blk.targets.begin, blk.targets.end));
    const EncoderParams attached = attach(tape, head.mlp);
    const DistanceHead local = head.with_mlp(attached);
    const Tensor db = phi_block(local, fb, gb);
    const Tensor wb = detail::block_of(dcache.w, blk);
    tape.backward(ops::sum(ops::mul(db, wb)));

    const Tensor gf = tape.grad(fb);
    const Tensor gg = tape.grad(gb);
    for (std::size_t k = 0; k < gf.size(); ++k) u[blk.anchors.begin * d + k] += gf[k];
    for (std::size_t k = 0; k < gg.size(); ++k) v[blk.targets.begin * d + k] += gg[k];
    if (head.has_params()) out.head_grad = add_params(out.head_grad, gradients(tape, attached));
    if (stats) stats->distance_forward_pairs += blk.anchors.size() * blk.targets.size();
  }

  mem::CategoryScope category(mem::Category::gradient_cache);
  out.cache.u = Tensor::matrix(ns, d, std::move(u));
  out.cache.v = Tensor::matrix(nt, d, std::move(v));
  out.cache.filled = true;
  out.cache.loss = dcache.loss;
  return out;
}

struct DeepGradResult {
  DualGrads grads;
  EncoderParams head_grad;
  double loss = 0.0;
};

/// Cached gradients for encoders and head.
inline DeepGradResult deep_cached_grads(const Batch& batch, const DualEncoder& model,
                                        const DistanceHead& head, const CacheConfig& config,
                                        StepStats* stats = nullptr) {
  batch.validate();
  model.validate();
  head.validate(model.embedding_dim());
  const SubBatchPlan plan = plan_subbatches(batch.num_anchors(), batch.num_targets(),
                                            config.sub_batch_anchors,
                                            config.sub_batch_targets);
  FoldResult fold;
  {
    const DeepForward fwd = forward_collect(batch, model, head, plan, stats);
    const DistanceGradientCache dcache =
        build_distance_cache(fwd.distances, batch.positives, config.temperature);
    fold = update_omega_and_fold(fwd.reps, head, dcache, plan, stats,
                                 config.reverse_chunk_order);
  }
  if (stats) stats->cache_floats = fold.cache.float_count();
  DeepGradResult out;
  out.loss = fold.cache.loss;
  out.head_grad = std::move(fold.head_grad);
  out.grads = step3_accumulate(batch, model, plan, fold.cache, stats,
                               config.reverse_chunk_order);
  return out;
}

/// Single-graph baseline: encoders, every pair through phi, loss, backward.
inline DeepGradResult deep_direct_grads(const Batch& batch, const DualEncoder& model,
                                        const DistanceHead& head, double temperature,
                                        StepStats* stats = nullptr) {
  batch.validate();
  model.validate();
  head.validate(model.embedding_dim());
  Tape tape;
  const EncoderParams f = attach(tape, model.anchor);
  const EncoderParams g = model.tied ? f : attach(tape, model.target);
  const EncoderParams h = attach(tape, head.mlp);
  const Tensor reps_s = encode(f, batch.anchors);
  const Tensor reps_t = encode(g, batch.targets);
  Tensor loss;
  {
    mem::CategoryScope category(mem::Category::loss_graph);
    const Tensor scores = phi_block(head.with_mlp(h), reps_s, reps_t);
    loss = contrastive_loss_from_scores(scores, batch.positives, temperature);
  }
  DeepGradResult out;
  out.loss = loss.item();
  out.grads.tied = model.tied;
  if (!loss.attached()) {
    out.grads = DualGrads::zeros(model);
    out.head_grad = zeros_like(head.mlp);
  } else {
    tape.backward(loss);
    out.grads.anchor = gradients(tape, f);
    if (!model.tied) out.grads.target = gradients(tape, g);
    out.head_grad = gradients(tape, h);
  }
  if (stats) {
    stats->encoder_forward_rows += batch.num_anchors() + batch.num_targets();
    stats->encoder_backward_rows += batch.num_anchors() + batch.num_targets();
    stats->distance_forward_pairs += batch.num_anchors() * batch.num_targets();
  }
  return out;
}

struct DeepStepResult {
  double loss = 0.0;
  DualEncoder model;
  DistanceHead head;
  OptimizerState optimizer;
  DeepGradResult grads;
  StepStats stats;
};

inline DeepStepResult apply_deep_update(const DualEncoder& model, const DistanceHead& head,
                                        const OptimizerState& opt, DeepGradResult gr,
                                        const StepStats& stats) {
  auto params = model.tensors();
  auto grads = gr.grads.tensors();
  const std::size_t n_model = params.size();
  for (const auto& t : head.mlp.tensors()) params.push_back(t);
  for (const auto& t : gr.head_grad.tensors()) grads.push_back(t);
  OptimizerUpdate upd = optimizer_step(opt, params, grads);
  DeepStepResult out;
  out.loss = gr.loss;
  out.model = model.with_tensors(std::span<const Tensor>(upd.params).subspan(0, n_model));
  out.head = head.with_mlp(
      head.mlp.with_tensors(std::span<const Tensor>(upd.params).subspan(n_model)));
  out.optimizer = std::move(upd.state);
  out.grads = std::move(gr);
  out.stats = stats;
  return out;
}

/// Cached step over (f, g, phi).
inline DeepStepResult train_step_deep(const Batch& batch, const DualEncoder& model,
                                      const DistanceHead& head, const OptimizerState& opt,
                                      const CacheConfig& config) {
  StepStats stats;
  DeepGradResult gr = deep_cached_grads(batch, model, head, config, &stats);
  return apply_deep_update(model, head, opt, std::move(gr), stats);
}

inline DeepStepResult train_step_deep_direct(const Batch& batch, const DualEncoder& model,
                                             const DistanceHead& head,
                                             const OptimizerState& opt, double temperature) {
  StepStats stats;
  DeepGradResult gr = deep_direct_grads(batch, model, head, temperature, &stats);
  return apply_deep_update(model, head, opt, std::move(gr), stats);
}

}  // namespace gradcache
