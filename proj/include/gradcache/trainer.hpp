#pragma once

// Gradient Cache training step and the baselines it is compared against.
//
// A cached step runs in four phases:
//   1. encode every sub-batch with recording disabled and keep the
//      representations F, G;
//   2. build a small graph over F, G only, take the loss and backpropagate to
//      get u_i = dL/df(s_i), v_j = dL/dg(t_j) (the representation gradient
//      cache);
//   3. re-encode one sub-batch at a time on its own tape and backpropagate the
//      cached rows through the encoder, summing parameter gradients;
//   4. take one optimizer step.
// Peak encoder activation memory depends only on the sub-batch sizes.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/contrastive.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/optim.hpp"

namespace gradcache {

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

struct SubBatchPlan {
  std::vector<IndexRange> anchor_chunks;
  std::vector<IndexRange> target_chunks;
  std::size_t sub_batch_anchors = 1;
  std::size_t sub_batch_targets = 1;
};

/// Contiguous, order-preserving chunks of at most `size` over [0, n).
inline std::vector<IndexRange> chunk_ranges(std::size_t n, std::size_t size) {
  if (size == 0) throw ConfigError("sub-batch size must be >= 1");
  std::vector<IndexRange> out;
  for (std::size_t b = 0; b < n; b += size) out.push_back({b, std::min(n, b + size)});
  return out;
}

inline SubBatchPlan plan_subbatches(std::size_t num_anchors, std::size_t num_targets,
                                    std::size_t sub_batch_anchors,
                                    std::size_t sub_batch_targets) {
  SubBatchPlan plan;
  plan.anchor_chunks = chunk_ranges(num_anchors, sub_batch_anchors);
  plan.target_chunks = chunk_ranges(num_targets, sub_batch_targets);
  plan.sub_batch_anchors = sub_batch_anchors;
  plan.sub_batch_targets = sub_batch_targets;
  return plan;
}

struct CacheConfig {
  std::size_t sub_batch_anchors = 16;
  std::size_t sub_batch_targets = 8;
  double temperature = 1.0;
  /// Process step-3 chunks last-to-first. Only useful for testing that the
  /// result does not depend on chunk order.
  bool reverse_chunk_order = false;
};

struct Representations {
  Tensor anchors;  // F, [|S| x d]
  Tensor targets;  // G, [|T| x d]
};

struct RepresentationGradientCache {
  Tensor u;  // [|S| x d]
  Tensor v;  // [|T| x d]
  bool filled = false;
  double loss = 0.0;

  std::size_t float_count() const { return filled ? u.size() + v.size() : 0; }
};

namespace detail {

/// Encode `inputs` chunk by chunk with recording disabled, writing rows into
/// one representation-store buffer.
inline Tensor encode_chunked(const EncoderParams& encoder, const Tensor& inputs,
                             std::span<const IndexRange> chunks, StepStats* stats) {
  NoGraphScope no_graph;
  const std::size_t d = encoder.out_dim();
  auto store = std::make_shared<mem::Buffer>(
      std::vector<double>(inputs.rows() * d, 0.0), mem::Category::representation_store);
  for (const auto& c : chunks) {
    const Tensor e = encode(encoder, ops::slice_rows(inputs, c.begin, c.end));
    std::copy(e.data().begin(), e.data().end(), store->data().begin() + c.begin * d);
    if (stats) stats->encoder_forward_rows += c.size();
  }
  return Tensor(Shape{inputs.rows(), d}, std::move(store));
}

/// Sum over chunks of u_chunk . d(encoder(chunk))/d(params).
inline void accumulate_encoder_grads(const EncoderParams& encoder, const Tensor& inputs,
                                     const Tensor& cached, std::vector<IndexRange> chunks,
                                     bool reverse, EncoderParams& acc, StepStats* stats) {
  if (encoder.is_identity()) return;
  if (reverse) std::reverse(chunks.begin(), chunks.end());
  for (const auto& c : chunks) {
    Tape tape;
    const EncoderParams p = attach(tape, encoder);
    const Tensor reps = encode(p, ops::slice_rows(inputs, c.begin, c.end));
    // The cached rows enter as constants, so backward of sum(reps * rows)
    // seeds reps with exactly those rows.
    const Tensor rows = ops::slice_rows(cached, c.begin, c.end);
    const Tensor surrogate = ops::sum(ops::mul(reps, rows));
    tape.backward(surrogate);
    acc = add_params(acc, gradients(tape, p));
    if (stats) {
      stats->encoder_forward_rows += c.size();
      stats->encoder_backward_rows += c.size();
    }
  }
}

}  // namespace detail

/// Step 1: graph-less forward of every chunk.
inline Representations step1_graphless_forward(const Batch& batch,
                                               const DualEncoder& model,
                                               const SubBatchPlan& plan,
                                               StepStats* stats = nullptr) {
  Representations reps;
  reps.anchors = detail::encode_chunked(model.anchor, batch.anchors, plan.anchor_chunks, stats);
  reps.targets =
      detail::encode_chunked(model.target_encoder(), batch.targets, plan.target_chunks, stats);
  return reps;
}

/// Step 2: loss over the stored representations and their gradients. The
/// encoders are not part of this graph.
inline RepresentationGradientCache step2_build_cache(const Tensor& reps_s,
                                                     const Tensor& reps_t,
                                                     std::span<const std::size_t> positives,
                                                     double temperature) {
  RepresentationGradientCache cache;
  Tape tape;
  Tensor loss;
  Tensor leaf_s, leaf_t;
  {
    mem::CategoryScope category(mem::Category::loss_graph);
    leaf_s = tape.variable(reps_s.detach(), mem::Category::loss_graph);
    leaf_t = tape.variable(reps_t.detach(), mem::Category::loss_graph);
    loss = contrastive_loss_tensor(leaf_s, leaf_t, positives, temperature);
    tape.backward(loss);
  }
  mem::CategoryScope category(mem::Category::gradient_cache);
  cache.u = tape.grad(leaf_s).clone();
  cache.v = tape.grad(leaf_t).clone();
  cache.loss = loss.item();
  cache.filled = true;
  return cache;
}

/// Step 3: per-chunk encoder backward seeded from the cache, summed.
inline DualGrads step3_accumulate(const Batch& batch, const DualEncoder& model,
                                  const SubBatchPlan& plan,
                                  const RepresentationGradientCache& cache,
                                  StepStats* stats = nullptr, bool reverse = false) {
  if (!cache.filled) {
    throw GraphError("representation gradient cache used before it was filled");
  }
  if (cache.u.rows() != batch.num_anchors() || cache.v.rows() != batch.num_targets()) {
    throw ShapeError("cache rows do not match the batch");
  }
  DualGrads acc = DualGrads::zeros(model);
  detail::accumulate_encoder_grads(model.anchor, batch.anchors, cache.u, plan.anchor_chunks,
                                   reverse, acc.anchor, stats);
  detail::accumulate_encoder_grads(model.target_encoder(), batch.targets, cache.v,
                                   plan.target_chunks, reverse, acc.target_slot(), stats);
  return acc;
}

/// Steps 1-3. The loss is the full-batch value from step 2.
inline GradResult cached_grads(const Batch& batch, const DualEncoder& model,
                               const CacheConfig& config, StepStats* stats = nullptr) {
  batch.validate();
  model.validate();
  const SubBatchPlan plan = plan_subbatches(batch.num_anchors(), batch.num_targets(),
                                            config.sub_batch_anchors,
                                            config.sub_batch_targets);
  RepresentationGradientCache cache;
  {
    const Representations reps = step1_graphless_forward(batch, model, plan, stats);
    cache = step2_build_cache(reps.anchors, reps.targets, batch.positives, config.temperature);
  }
  if (stats) stats->cache_floats = cache.float_count();
  GradResult out;
  out.loss = cache.loss;
  out.grads = step3_accumulate(batch, model, plan, cache, stats, config.reverse_chunk_order);
  return out;
}

/// Gradient-accumulation baseline: each chunk of `chunk_size` anchors is an
/// independent small batch whose negatives come only from its own targets.
/// Each chunk's loss is normalized by its own anchor count, chunk gradients
/// are summed, and the reported loss is the mean of chunk losses.
inline GradResult accumulation_grads(const Batch& batch, const DualEncoder& model,
                                     std::size_t chunk_size, double temperature,
                                     StepStats* stats = nullptr) {
  batch.validate();
  const auto chunks = chunk_ranges(batch.num_anchors(), chunk_size);
  if (chunks.size() <= 1) return direct_param_grads(batch, model, temperature, stats);

  GradResult out;
  out.grads = DualGrads::zeros(model);
  double loss_sum = 0.0;
  const std::size_t h = batch.hard_negatives;
  for (const auto& c : chunks) {
    Batch sub;
    std::vector<std::size_t> target_rows;
    for (std::size_t i = c.begin; i < c.end; ++i) {
      for (std::size_t k = 0; k <= h; ++k) {
        const std::size_t row = batch.positives[i] + k;
        auto it = std::find(target_rows.begin(), target_rows.end(), row);
        if (it == target_rows.end()) {
          target_rows.push_back(row);
          it = target_rows.end() - 1;
        }
        if (k == 0) sub.positives.push_back(static_cast<std::size_t>(it - target_rows.begin()));
      }
    }
    {
      NoGraphScope no_graph;
      sub.anchors = ops::slice_rows(batch.anchors, c.begin, c.end);
      sub.targets = ops::index_rows(batch.targets, target_rows);
    }
    const GradResult part = direct_param_grads(sub, model, temperature, stats);
    out.grads.anchor = add_params(out.grads.anchor, part.grads.anchor);
    if (!model.tied) out.grads.target = add_params(out.grads.target, part.grads.target);
    loss_sum += part.loss;
  }
  out.loss = loss_sum / static_cast<double>(chunks.size());
  return out;
}

struct StepResult {
  double loss = 0.0;
  DualEncoder model;
  OptimizerState optimizer;
  DualGrads grads;
  StepStats stats;
};

/// Step 4 for a DualEncoder.
inline StepResult apply_update(const DualEncoder& model, const OptimizerState& opt,
                               GradResult gr, const StepStats& stats) {
  const auto params = model.tensors();
  const auto grads = gr.grads.tensors();
  OptimizerUpdate upd = optimizer_step(opt, params, grads);
  StepResult out;
  out.loss = gr.loss;
  out.model = model.with_tensors(upd.params);
  out.optimizer = std::move(upd.state);
  out.grads = std::move(gr.grads);
  out.stats = stats;
  return out;
}

inline StepResult train_step_cached(const Batch& batch, const DualEncoder& model,
                                    const OptimizerState& opt, const CacheConfig& config) {
  StepStats stats;
  GradResult gr = cached_grads(batch, model, config, &stats);
  return apply_update(model, opt, std::move(gr), stats);
}

inline StepResult train_step_direct(const Batch& batch, const DualEncoder& model,
                                    const OptimizerState& opt, double temperature) {
  StepStats stats;
  GradResult gr = direct_param_grads(batch, model, temperature, &stats);
  return apply_update(model, opt, std::move(gr), stats);
}

inline StepResult train_step_accumulation(const Batch& batch, const DualEncoder& model,
                                          const OptimizerState& opt, std::size_t chunk_size,
                                          double temperature) {
  StepStats stats;
  GradResult gr = accumulation_grads(batch, model, chunk_size, temperature, &stats);
  return apply_update(model, opt, std::move(gr), stats);
}

}  // namespace gradcache
