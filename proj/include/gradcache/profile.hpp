#pragma once

// One training step under a fresh memory counter.

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradcache/contrastive.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/optim.hpp"
#include "gradcache/trainer.hpp"

namespace gradcache {

enum class ProfileMode { direct, cache, accumulation };

constexpr std::string_view to_string(ProfileMode m) {
  switch (m) {
    case ProfileMode::direct:
      return "direct";
    case ProfileMode::cache:
      return "cache";
    case ProfileMode::accumulation:
      return "accumulation";
  }
  return "unknown";
}

struct ProfileReport {
  ProfileMode mode = ProfileMode::cache;
  std::size_t num_anchors = 0;
  std::size_t num_targets = 0;
  std::size_t sub_batch = 0;
  mem::MemReport memory;   // peaks over the whole step
  std::size_t activation_live_after = 0;
  StepStats stats;
  double loss = 0.0;

  std::size_t activation_peak() const { return memory.peak_of(mem::Category::activation); }
  std::size_t cache_peak() const { return memory.peak_of(mem::Category::gradient_cache); }
  std::size_t representation_peak() const {
    return memory.peak_of(mem::Category::representation_store);
  }

  /// Flat key/value record for reports.
  std::vector<std::pair<std::string, std::string>> key_values() const {
    std::vector<std::pair<std::string, std::string>> kv{
        {"mode", std::string(to_string(mode))},
        {"num_anchors", std::to_string(num_anchors)},
        {"num_targets", std::to_string(num_targets)},
        {"sub_batch", std::to_string(sub_batch)},
        {"fwd_count", std::to_string(stats.encoder_forward_rows)},
        {"bwd_count", std::to_string(stats.encoder_backward_rows)},
        {"cache_floats", std::to_string(stats.cache_floats)},
        {"activation_live_after", std::to_string(activation_live_after)},
    };
    for (const auto& [k, v] : memory.key_values()) kv.emplace_back(k, std::to_string(v));
    return kv;
  }
};

/// Run one full step (gradients and optimizer update) of `mode` on `batch`
/// with counters reset. `sub_batch` is the sub-batch size for both anchors
/// and targets in cache mode, and the chunk size in accumulation mode.
inline ProfileReport profile_step(ProfileMode mode, const Batch& batch, const DualEncoder& model,
                                  const OptimizerState& opt, std::size_t sub_batch,
                                  double temperature,
                                  std::optional<std::size_t> activation_budget = std::nullopt) {
  auto counter = std::make_shared<mem::MemCounter>();
  counter->set_activation_budget(activation_budget);
  ProfileReport report;
  report.mode = mode;
  report.num_anchors = batch.num_anchors();
  report.num_targets = batch.num_targets();
  report.sub_batch = sub_batch;
  {
    mem::CounterScope scope(counter);
    StepResult r;
    switch (mode) {
      case ProfileMode::direct:
        r = train_step_direct(batch, model, opt, temperature);
        break;
      case ProfileMode::cache: {
        CacheConfig cfg;
        cfg.sub_batch_anchors = sub_batch;
        cfg.sub_batch_targets = sub_batch;
        cfg.temperature = temperature;
        r = train_step_cached(batch, model, opt, cfg);
        break;
      }
      case ProfileMode::accumulation:
        r = train_step_accumulation(batch, model, opt, sub_batch, temperature);
        break;
    }
    report.stats = r.stats;
    report.loss = r.loss;
  }
  report.memory = mem::MemReport::snapshot(*counter);
  report.activation_live_after = counter->live(mem::Category::activation);
  return report;
}

}  // namespace gradcache
