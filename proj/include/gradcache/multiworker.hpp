#pragma once

// Data-parallel gradient caching over N logical workers.
//
// Each worker holds a contiguous shard of the global batch and a replica of
// the parameters. Per step:
//   step 1 on the local shard
//   -> all-gather of representations (the only exchange before step 2)
//   -> step 2 over the gathered set, keeping only local rows of u and v
//   -> step 3 on the local shard, no communication
//   -> sum-reduction of parameter gradients in rank order
//   -> identical optimizer step on every worker.
// The loss is normalized by the global anchor count, so summing the per-worker
// gradients reproduces the single-worker full-batch gradient.

#include <atomic>
#include <barrier>
#include <cstddef>
#include <exception>
#include <memory>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/contrastive.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/optim.hpp"
#include "gradcache/trainer.hpp"

namespace gradcache {

struct WorkerShard {
  IndexRange anchors;
  IndexRange targets;
};

namespace detail {
inline std::vector<IndexRange> split_even(std::size_t n, std::size_t parts) {
  std::vector<IndexRange> out;
  std::size_t begin = 0;
  for (std::size_t r = 0; r < parts; ++r) {
    const std::size_t len = n / parts + (r < n % parts ? 1 : 0);
    out.push_back({begin, begin + len});
    begin += len;
  }
  return out;
}
}  // namespace detail

/// Contiguous rank-ordered shards; the first n % N ranks get one extra row.
inline std::vector<WorkerShard> partition_batch(std::size_t num_anchors,
                                                std::size_t num_targets,
                                                std::size_t workers) {
  if (workers == 0) throw ConfigError("worker count must be >= 1");
  const auto a = detail::split_even(num_anchors, workers);
  const auto t = detail::split_even(num_targets, workers);
  std::vector<WorkerShard> out(workers);
  for (std::size_t r = 0; r < workers; ++r) out[r] = {a[r], t[r]};
  return out;
}

struct GatheredReps {
  Tensor anchors;  // F^1 u ... u F^N
  Tensor targets;  // G^1 u ... u G^N
  std::vector<std::size_t> anchor_offsets;  // N + 1 entries
  std::vector<std::size_t> target_offsets;
};

/// Concatenate per-worker representations in rank order.
inline GatheredReps all_gather(std::span<const Representations> parts,
                               std::size_t expected_workers) {
  if (parts.size() != expected_workers) {
    throw ConfigError("all_gather: expected " + std::to_string(expected_workers) +
                      " workers, got " + std::to_string(parts.size()));
  }
  if (parts.empty()) throw ConfigError("all_gather: no workers");
  const std::size_t d = parts.front().anchors.cols();
  GatheredReps g;
  g.anchor_offsets.push_back(0);
  g.target_offsets.push_back(0);
  std::vector<double> fa, ga;
  for (const auto& p : parts) {
    if (p.anchors.cols() != d || p.targets.cols() != d) {
      throw ShapeError("all_gather: representation dims differ across workers");
    }
    fa.insert(fa.end(), p.anchors.data().begin(), p.anchors.data().end());
    ga.insert(ga.end(), p.targets.data().begin(), p.targets.data().end());
    g.anchor_offsets.push_back(g.anchor_offsets.back() + p.anchors.rows());
    g.target_offsets.push_back(g.target_offsets.back() + p.targets.rows());
  }
  mem::CategoryScope category(mem::Category::representation_store);
  g.anchors = Tensor::matrix(g.anchor_offsets.back(), d, std::move(fa));
  g.targets = Tensor::matrix(g.target_offsets.back(), d, std::move(ga));
  return g;
}

/// Step 2 over the gathered set; returns only `worker`'s rows of u and v.
inline RepresentationGradientCache local_rep_grads(const GatheredReps& gathered,
                                                   std::size_t worker,
                                                   std::span<const std::size_t> positives,
                                                   double temperature) {
  if (worker + 1 >= gathered.anchor_offsets.size()) {
    throw ConfigError("local_rep_grads: worker " + std::to_string(worker) + " out of range");
  }
  Tape tape;
  Tensor leaf_s, leaf_t, loss;
  {
    mem::CategoryScope category(mem::Category::loss_graph);
    leaf_s = tape.variable(gathered.anchors.detach(), mem::Category::loss_graph);
    leaf_t = tape.variable(gathered.targets.detach(), mem::Category::loss_graph);
    loss = contrastive_loss_tensor(leaf_s, leaf_t, positives, temperature);
    tape.backward(loss);
  }
  const Tensor gu = tape.grad(leaf_s);
  const Tensor gv = tape.grad(leaf_t);
  mem::CategoryScope category(mem::Category::gradient_cache);
  NoGraphScope no_graph;
  RepresentationGradientCache cache;
  cache.u = ops::slice_rows(gu, gathered.anchor_offsets[worker],
                            gathered.anchor_offsets[worker + 1]);
  cache.v = ops::slice_rows(gv, gathered.target_offsets[worker],
                            gathered.target_offsets[worker + 1]);
  cache.loss = loss.item();
  cache.filled = true;
  return cache;
}

/// Elementwise sum across workers, accumulated in rank order.
inline std::vector<Tensor> reduce_grads(std::span<const std::vector<Tensor>> per_worker) {
  if (per_worker.empty()) throw ConfigError("reduce_grads: no workers");
  const auto& first = per_worker.front();
  std::vector<std::vector<double>> acc;
  for (const auto& t : first) acc.push_back(t.to_vector());
  for (std::size_t r = 1; r < per_worker.size(); ++r) {
    if (per_worker[r].size() != first.size()) {
      throw ShapeError("reduce_grads: worker " + std::to_string(r) + " has " +
                       std::to_string(per_worker[r].size()) + " tensors, expected " +
                       std::to_string(first.size()));
    }
    for (std::size_t k = 0; k < first.size(); ++k) {
      if (per_worker[r][k].shape() != first[k].shape()) {
        throw ShapeError("reduce_grads: shape mismatch for tensor " + std::to_string(k) +
                         ": " + shape_string(per_worker[r][k].shape()) + " vs " +
                         shape_string(first[k].shape()));
      }
      const auto src = per_worker[r][k].data();
      for (std::size_t i = 0; i < src.size(); ++i) acc[k][i] += src[i];
    }
  }
  mem::CategoryScope category(mem::Category::parameters);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < first.size(); ++k) out.emplace_back(first[k].shape(), std::move(acc[k]));
  return out;
}

/// Barrier-synchronized slot exchange among N threads.
template <typename T>
class Collective {
 public:
  explicit Collective(std::size_t n) : barrier_(static_cast<std::ptrdiff_t>(n)), slots_(n) {}

  /// Every rank contributes `value`; every rank receives all values in rank
  /// order. Rank 0 counts the exchange.
  std::vector<T> exchange(std::size_t rank, T value) {
    slots_[rank] = std::move(value);
    barrier_.arrive_and_wait();
    if (failed_.load()) throw std::runtime_error("peer worker failed");
    std::vector<T> all = slots_;
    if (rank == 0) ++count_;
    barrier_.arrive_and_wait();
    return all;
  }

  /// Leave the group after a local failure so peers are not blocked.
  void abandon() {
    failed_.store(true);
    barrier_.arrive_and_drop();
  }

  std::size_t count() const { return count_.load(); }

 private:
  std::barrier<> barrier_;
  std::vector<T> slots_;
  std::atomic<bool> failed_{false};
  std::atomic<std::size_t> count_{0};
};

struct WorkerStepReport {
  StepStats stats;
  mem::MemReport memory;
  GatheredReps gathered;
  RepresentationGradientCache cache;
  DualGrads local_grads;
};

struct MultiStepResult {
  double loss = 0.0;
  std::vector<Tensor> reduced_grads;  // DualEncoder::tensors() order
  std::vector<WorkerStepReport> workers;
  std::size_t all_gathers = 0;
  std::size_t reductions = 0;
};

/// N replicas of (parameters, optimizer state) stepping in lockstep.
class WorkerGroup {
 public:
  WorkerGroup(std::size_t workers, const DualEncoder& model, const OptimizerState& opt)
      : models_(workers, model), optimizers_(workers, opt) {
    if (workers == 0) throw ConfigError("worker count must be >= 1");
    model.validate();
  }

  std::size_t size() const { return models_.size(); }
  const DualEncoder& model(std::size_t rank) const { return models_.at(rank); }
  const OptimizerState& optimizer(std::size_t rank) const { return optimizers_.at(rank); }
  std::size_t total_all_gathers() const { return total_gathers_; }
  std::size_t total_reductions() const { return total_reductions_; }

  /// One data-parallel cached step over `global`, sharded contiguously.
  MultiStepResult step(const Batch& global, const CacheConfig& config) {
    global.validate();
    const std::size_t n = size();
    const auto shards = partition_batch(global.num_anchors(), global.num_targets(), n);

    std::vector<Batch> local(n);
    {
      NoGraphScope no_graph;
      for (std::size_t r = 0; r < n; ++r) {
        // Positives stay in the global index space; step 2 uses the global map.
        local[r].anchors =
            ops::slice_rows(global.anchors, shards[r].anchors.begin, shards[r].anchors.end);
        local[r].targets =
            ops::slice_rows(global.targets, shards[r].targets.begin, shards[r].targets.end);
      }
    }

    Collective<Representations> gather(n);
    Collective<std::vector<Tensor>> reduce(n);
    MultiStepResult result;
    result.workers.resize(n);
    std::vector<double> losses(n, 0.0);
    std::vector<std::vector<Tensor>> new_params(n);
    std::vector<OptimizerState> new_opts(n);
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::vector<Tensor>> reduced(n);

    auto body = [&](std::size_t rank) {
      auto counter = std::make_shared<mem::MemCounter>();
      WorkerStepReport& report = result.workers[rank];
      try {
        {
          mem::CounterScope scope(counter);
          const DualEncoder& model = models_[rank];
          const SubBatchPlan plan =
              plan_subbatches(local[rank].num_anchors(), local[rank].num_targets(),
                              config.sub_batch_anchors, config.sub_batch_targets);
          {
            Representations mine = step1_graphless_forward(local[rank], model, plan, &report.stats);
            const auto all = gather.exchange(rank, std::move(mine));
            report.gathered = all_gather(all, n);
          }
          report.cache =
              local_rep_grads(report.gathered, rank, global.positives, config.temperature);
          losses[rank] = report.cache.loss;
          report.stats.cache_floats = report.cache.float_count();
          report.local_grads = step3_accumulate(local[rank], model, plan, report.cache,
                                                &report.stats, config.reverse_chunk_order);
          const auto all_grads = reduce.exchange(rank, report.local_grads.tensors());
          reduced[rank] = reduce_grads(all_grads);
          OptimizerUpdate upd = optimizer_step(optimizers_[rank], model.tensors(), reduced[rank]);
          new_params[rank] = std::move(upd.params);
          new_opts[rank] = std::move(upd.state);
        }
        report.memory = mem::MemReport::snapshot(*counter);
      } catch (...) {
        errors[rank] = std::current_exception();
        gather.abandon();
        reduce.abandon();
      }
    };

    {
      std::vector<std::jthread> threads;
      threads.reserve(n);
      for (std::size_t r = 0; r < n; ++r) threads.emplace_back(body, r);
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);

    for (std::size_t r = 0; r < n; ++r) {
      models_[r] = models_[r].with_tensors(new_params[r]);
      optimizers_[r] = std::move(new_opts[r]);
      result.workers[r].stats.exchanges = gather.count() + reduce.count();
    }
    result.loss = losses.front();
    result.reduced_grads = std::move(reduced.front());
    result.all_gathers = gather.count();
    result.reductions = reduce.count();
    total_gathers_ += result.all_gathers;
    total_reductions_ += result.reductions;
    return result;
  }

 private:
  std::vector<DualEncoder> models_;
  std::vector<OptimizerState> optimizers_;
  std::size_t total_gathers_ = 0;
  std::size_t total_reductions_ = 0;
};

inline MultiStepResult train_step_multi(WorkerGroup& group, const Batch& global,
                                        const CacheConfig& config) {
  return group.step(global, config);
}

}  // namespace gradcache
