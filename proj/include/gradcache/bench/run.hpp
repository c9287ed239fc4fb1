#pragma once

// Training runs over a synthetic task in any of the compared modes.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gradcache/bench/eval.hpp"
#include "gradcache/bench/task.hpp"
#include "gradcache/checkpoint.hpp"
#include "gradcache/contrastive.hpp"
#include "gradcache/deep_distance.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/multiworker.hpp"
#include "gradcache/optim.hpp"
#include "gradcache/trainer.hpp"

namespace gradcache::bench {

enum class Mode { direct, cache, accumulation, sequential, deep, multi };

constexpr std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::direct:
      return "direct";
    case Mode::cache:
      return "cache";
    case Mode::accumulation:
      return "accumulation";
    case Mode::sequential:
      return "sequential";
    case Mode::deep:
      return "deep";
    case Mode::multi:
      return "multi";
  }
  return "unknown";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : {Mode::direct, Mode::cache, Mode::accumulation, Mode::sequential, Mode::deep,
                 Mode::multi}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + std::string(s) +
                    "' (expected direct|cache|accumulation|sequential|deep|multi)");
}

struct RunConfig {
  Mode mode = Mode::cache;
  std::size_t batch_size = 128;
  /// Anchor sub-batch; also the chunk size in accumulation mode.
  std::size_t sub_batch_s = 16;
  std::size_t sub_batch_t = 8;
  std::size_t workers = 2;
  double temperature = 0.1;
  OptimizerConfig optimizer{OptimizerKind::adam, 1e-2};
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> eval_k{1, 5, 20};
  std::size_t embedding_dim = 16;
  /// 0 gives a single linear layer per encoder.
  std::size_t hidden_dim = 32;
  std::size_t head_hidden = 16;
  bool tied = false;
  std::optional<std::size_t> activation_budget;
  /// Off for byte-reproducible metric files.
  bool record_wall_time = true;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
    switch (mode) {
      case Mode::cache:
      case Mode::deep:
      case Mode::multi:
        if (sub_batch_s == 0 || sub_batch_t == 0) {
          throw ConfigError(std::string(to_string(mode)) + " mode needs sub-batch sizes >= 1");
        }
        break;
      case Mode::accumulation:
        if (sub_batch_s == 0) throw ConfigError("accumulation mode needs a chunk size >= 1");
        break;
      default:
        break;
    }
    if (mode == Mode::multi && workers == 0) throw ConfigError("multi mode needs workers >= 1");
    if (mode == Mode::deep && head_hidden == 0) throw ConfigError("deep mode needs head_hidden >= 1");
  }
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::size_t fwd_count = 0;
  std::size_t bwd_count = 0;
  std::size_t act_peak = 0;
  std::size_t cache_floats = 0;
  double wall_ms = 0.0;
};

struct RunResult {
  RunConfig config;
  TaskConfig task;
  std::vector<StepRecord> steps;
  std::optional<EvalResult> eval;
  Checkpoint checkpoint;
};

inline DualEncoder init_model(const RunConfig& cfg, std::size_t in_s, std::size_t in_t) {
  std::vector<std::size_t> ds{in_s}, dt{in_t};
  if (cfg.hidden_dim) {
    ds.push_back(cfg.hidden_dim);
    dt.push_back(cfg.hidden_dim);
  }
  ds.push_back(cfg.embedding_dim);
  dt.push_back(cfg.embedding_dim);
  DualEncoder m;
  m.anchor = init_params(cfg.seed * 3 + 1, ds);
  m.tied = cfg.tied;
  if (cfg.tied) {
    if (in_s != in_t) throw ConfigError("tied encoders need equal input dims");
  } else {
    m.target = init_params(cfg.seed * 3 + 2, dt);
  }
  return m;
}

/// Per-epoch shuffled batches of `batch_size` pair indices. An incomplete
/// tail is dropped unless it is the only batch, so every step sees the same
/// number of in-batch negatives.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed * 1000003 + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b + batch_size <= n; b += batch_size)
    out.emplace_back(order.begin() + b, order.begin() + b + batch_size);
  if (out.empty() && n > 0) out.emplace_back(order.begin(), order.end());
  return out;
}

inline Batch make_batch(const PairSet& pairs, std::span<const std::size_t> idx) {
  Batch b;
  NoGraphScope no_graph;
  b.anchors = ops::index_rows(pairs.anchors, idx);
  b.targets = ops::index_rows(pairs.targets, idx);
  b.positives.resize(idx.size());
  std::iota(b.positives.begin(), b.positives.end(), std::size_t{0});
  return b;
}

/// Train for `config.epochs` epochs and evaluate. Throws BudgetExceeded if a
/// step's activation peak would pass `activation_budget`.
inline RunResult run_experiment(const RunConfig& config, const SyntheticTask& task) {
  config.validate();
  RunResult result;
  result.config = config;
  result.task = task.config;

  DualEncoder model = init_model(config, task.train.anchors.cols(), task.train.targets.cols());
  DistanceHead head = config.mode == Mode::deep
                          ? DistanceHead::make_mlp(config.seed * 3 + 3, config.embedding_dim,
                                                   config.head_hidden)
                          : DistanceHead::dot_product();
  OptimizerState opt;
  opt.config = config.optimizer;
  std::optional<WorkerGroup> group;
  if (config.mode == Mode::multi) group.emplace(config.workers, model, opt);

  CacheConfig cache;
  cache.sub_batch_anchors = config.sub_batch_s;
  cache.sub_batch_targets = config.sub_batch_t;
  cache.temperature = config.temperature;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(task.train.size(), config.batch_size, config.seed, epoch)) {
      const Batch batch = make_batch(task.train, idx);
      auto counter = std::make_shared<mem::MemCounter>();
      counter->set_activation_budget(config.activation_budget);
      StepRecord rec;
      rec.step = step++;
      rec.epoch = epoch;
      const auto t0 = std::chrono::steady_clock::now();
      StepStats stats;
      {
        mem::CounterScope scope(counter);
        switch (config.mode) {
          case Mode::direct:
          case Mode::sequential: {
            auto r = train_step_direct(batch, model, opt, config.temperature);
            model = std::move(r.model);
            opt = std::move(r.optimizer);
            rec.loss = r.loss;
            stats = r.stats;
            break;
          }
          case Mode::cache: {
            auto r = train_step_cached(batch, model, opt, cache);
            model = std::move(r.model);
            opt = std::move(r.optimizer);
            rec.loss = r.loss;
            stats = r.stats;
            break;
          }
          case Mode::accumulation: {
            auto r = train_step_accumulation(batch, model, opt, config.sub_batch_s,
                                             config.temperature);
            model = std::move(r.model);
            opt = std::move(r.optimizer);
            rec.loss = r.loss;
            stats = r.stats;
            break;
          }
          case Mode::deep: {
            auto r = train_step_deep(batch, model, head, opt, cache);
            model = std::move(r.model);
            head = std::move(r.head);
            opt = std::move(r.optimizer);
            rec.loss = r.loss;
            stats = r.stats;
            break;
          }
          case Mode::multi: {
            // Workers keep their own counters; report the largest.
            auto r = group->step(batch, cache);
            rec.loss = r.loss;
            for (const auto& w : r.workers) {
              stats.encoder_forward_rows += w.stats.encoder_forward_rows;
              stats.encoder_backward_rows += w.stats.encoder_backward_rows;
              stats.cache_floats += w.stats.cache_floats;
              rec.act_peak = std::max(rec.act_peak, w.memory.peak_of(mem::Category::activation));
            }
            model = group->model(0);
            break;
          }
        }
      }
      if (config.mode != Mode::multi) rec.act_peak = counter->peak(mem::Category::activation);
      rec.fwd_count = stats.encoder_forward_rows;
      rec.bwd_count = stats.encoder_backward_rows;
      rec.cache_floats = stats.cache_floats;
      if (config.record_wall_time) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
      }
      result.steps.push_back(rec);
    }
  }

  std::vector<std::size_t> ks;
  for (std::size_t k : config.eval_k)
    if (k <= task.eval.size()) ks.push_back(k);
  result.eval = evaluate_topk(model, task.eval, ks, head);
  result.checkpoint.model = model;
  if (head.has_params()) result.checkpoint.head = head.mlp;
  return result;
}

}  // namespace gradcache::bench
