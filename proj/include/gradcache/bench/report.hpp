#pragma once

// Output files.
//
// metrics.jsonl (schema "gradcache.metrics", version 1): the first line is
// {"schema", "version"}; then per run one "run" record (configuration), one
// "step" record per optimizer step and one "eval" record:
//   step:  step, epoch, loss, fwd_count, bwd_count, act_peak, cache_floats,
//          wall_ms   (counts are encoder rows; act_peak is in floats)
//   eval:  hit@<k> for each k, plus mean_rank
// summary.csv: one row per run.
// sweep.csv: one row per profiled batch size.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradcache/bench/run.hpp"
#include "gradcache/bench/task.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/profile.hpp"

namespace gradcache::bench {

inline constexpr int kMetricsVersion = 1;

namespace detail {
inline std::ofstream open_out(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

inline std::string num(double x) { return nlohmann::json(x).dump(); }
}  // namespace detail

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j{{"mode", std::string(to_string(c.mode))},
                   {"batch_size", c.batch_size},
                   {"sub_batch_s", c.sub_batch_s},
                   {"sub_batch_t", c.sub_batch_t},
                   {"workers", c.workers},
                   {"temperature", c.temperature},
                   {"optimizer", std::string(to_string(c.optimizer.kind))},
                   {"lr", c.optimizer.lr},
                   {"epochs", c.epochs},
                   {"seed", c.seed},
                   {"eval_k", c.eval_k},
                   {"embedding_dim", c.embedding_dim},
                   {"hidden_dim", c.hidden_dim},
                   {"tied", c.tied}};
  if (c.mode == Mode::deep) j["head_hidden"] = c.head_hidden;
  if (c.activation_budget) j["activation_budget"] = *c.activation_budget;
  return j;
}

inline nlohmann::json step_to_json(const StepRecord& r) {
  return {{"kind", "step"},           {"step", r.step},
          {"epoch", r.epoch},         {"loss", r.loss},
          {"fwd_count", r.fwd_count}, {"bwd_count", r.bwd_count},
          {"act_peak", r.act_peak},   {"cache_floats", r.cache_floats},
          {"wall_ms", r.wall_ms}};
}

inline nlohmann::json eval_to_json(const EvalResult& e) {
  nlohmann::json j{{"kind", "eval"}};
  for (std::size_t q = 0; q < e.ks.size(); ++q) j["hit@" + std::to_string(e.ks[q])] = e.hits[q];
  double mean_rank = 0.0;
  for (auto r : e.ranks) mean_rank += static_cast<double>(r);
  if (!e.ranks.empty()) mean_rank /= static_cast<double>(e.ranks.size());
  j["mean_rank"] = mean_rank;
  return j;
}

inline void write_metrics(const std::filesystem::path& path, std::span<const RunResult> runs) {
  auto out = detail::open_out(path);
  out << nlohmann::json{{"schema", "gradcache.metrics"}, {"version", kMetricsVersion}}.dump()
      << '\n';
  for (const auto& run : runs) {
    out << nlohmann::json{{"kind", "run"},
                          {"config", run_config_to_json(run.config)},
                          {"task", task_config_to_json(run.task)}}
               .dump()
        << '\n';
    for (const auto& s : run.steps) out << step_to_json(s).dump() << '\n';
    if (run.eval) out << eval_to_json(*run.eval).dump() << '\n';
  }
}

inline void write_summary(const std::filesystem::path& path, std::span<const RunResult> runs) {
  std::set<std::size_t> ks;
  for (const auto& run : runs)
    if (run.eval) ks.insert(run.eval->ks.begin(), run.eval->ks.end());
  auto out = detail::open_out(path);
  out << "mode,batch_size,sub_batch_s,sub_batch_t,workers,temperature,epochs,seed,steps,"
         "final_loss,fwd_count,bwd_count,max_act_peak,cache_floats";
  for (auto k : ks) out << ",hit@" << k;
  out << '\n';
  for (const auto& run : runs) {
    const auto& c = run.config;
    std::size_t fwd = 0, bwd = 0, act = 0, cache = 0;
    for (const auto& s : run.steps) {
      fwd += s.fwd_count;
      bwd += s.bwd_count;
      act = std::max(act, s.act_peak);
      cache = std::max(cache, s.cache_floats);
    }
    out << to_string(c.mode) << ',' << c.batch_size << ',' << c.sub_batch_s << ','
        << c.sub_batch_t << ',' << c.workers << ',' << detail::num(c.temperature) << ','
        << c.epochs << ',' << c.seed << ',' << run.steps.size() << ','
        << (run.steps.empty() ? std::string() : detail::num(run.steps.back().loss)) << ','
        << fwd << ',' << bwd << ',' << act << ',' << cache;
    for (auto k : ks) {
      out << ',';
      if (!run.eval) continue;
      const auto it = std::find(run.eval->ks.begin(), run.eval->ks.end(), k);
      if (it != run.eval->ks.end()) out << detail::num(run.eval->hits[it - run.eval->ks.begin()]);
    }
    out << '\n';
  }
}

/// metrics.jsonl and summary.csv under `dir`.
inline void emit_report(const std::filesystem::path& dir, std::span<const RunResult> runs) {
  write_metrics(dir / "metrics.jsonl", runs);
  write_summary(dir / "summary.csv", runs);
}

struct SweepRow {
  ProfileReport report;
  bool budget_exceeded = false;
  double wall_ms = 0.0;
};

inline void write_sweep(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  auto out = detail::open_out(path);
  out << "mode,examples,num_targets,sub_batch,status,act_peak,cache_floats,"
         "representation_floats,loss_graph_peak,fwd_count,bwd_count,wall_ms\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << to_string(r.mode) << ',' << r.num_anchors << ',' << r.num_targets << ','
        << r.sub_batch << ',' << (row.budget_exceeded ? "budget_exceeded" : "ok") << ',';
    if (row.budget_exceeded) {
      out << ",,,,,,\n";
      continue;
    }
    out << r.activation_peak() << ',' << r.cache_peak() << ',' << r.representation_peak() << ','
        << r.memory.peak_of(mem::Category::loss_graph) << ',' << r.stats.encoder_forward_rows
        << ',' << r.stats.encoder_backward_rows << ',' << detail::num(row.wall_ms) << '\n';
  }
}

}  // namespace gradcache::bench
