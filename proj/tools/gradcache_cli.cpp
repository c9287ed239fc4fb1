// Command-line driver: generate | train | eval | sweep | profile.
//
// Exit codes: 0 success, 2 configuration error, 3 activation budget exceeded.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradcache/bench/eval.hpp"
#include "gradcache/bench/report.hpp"
#include "gradcache/bench/run.hpp"
#include "gradcache/bench/task.hpp"
#include "gradcache/checkpoint.hpp"
#include "gradcache/profile.hpp"

namespace fs = std::filesystem;
using namespace gradcache;
using namespace gradcache::bench;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitBudget = 3;

struct Options {
  std::string mode = "cache";
  RunConfig run;
  TaskConfig task;
  std::string optimizer = "adam";
  std::size_t activation_budget = 0;
  std::string out = "out";
  std::string task_path;
  std::string checkpoint_path;
  std::vector<std::size_t> sizes{64, 128, 256, 512, 1024, 2048, 4096};
  bool no_wall_time = false;
};

SyntheticTask load_or_generate(const Options& o) {
  if (!o.task_path.empty()) return load_task(o.task_path);
  return generate_task(o.task);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void print_eval(const EvalResult& e) {
  for (std::size_t q = 0; q < e.ks.size(); ++q)
    std::cout << "hit@" << e.ks[q] << '=' << e.hits[q] << '\n';
}

int cmd_generate(const Options& o) {
  const SyntheticTask task = generate_task(o.task);
  const fs::path path = fs::path(o.out) / "task.json";
  std::error_code ec;
  fs::create_directories(o.out, ec);
  save_task(path.string(), task);
  std::cout << "wrote " << path.string() << " (" << task.train.size() << " train, "
            << task.eval.size() << " eval pairs)\n";
  return 0;
}

int cmd_train(const Options& o) {
  const SyntheticTask task = load_or_generate(o);
  const RunResult result = run_experiment(o.run, task);
  const fs::path out(o.out);
  emit_report(out, std::span<const RunResult>(&result, 1));
  save_checkpoint((out / "checkpoint.json").string(), result.checkpoint);
  std::cout << "mode=" << to_string(o.run.mode) << " steps=" << result.steps.size();
  if (!result.steps.empty()) std::cout << " final_loss=" << result.steps.back().loss;
  std::cout << '\n';
  if (result.eval) print_eval(*result.eval);
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint_path.empty()) throw ConfigError("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint_path);
  const SyntheticTask task = load_or_generate(o);
  DistanceHead head = DistanceHead::dot_product();
  if (ck.head) {
    head.kind = DistanceHead::Kind::mlp;
    head.mlp = *ck.head;
  }
  const EvalResult e = evaluate_topk(ck.model, task.eval, o.run.eval_k, head);
  write_json(fs::path(o.out) / "eval.json", eval_to_json(e));
  print_eval(e);
  return 0;
}

ProfileMode profile_mode(Mode m) {
  switch (m) {
    case Mode::direct:
    case Mode::sequential:
      return ProfileMode::direct;
    case Mode::cache:
      return ProfileMode::cache;
    case Mode::accumulation:
      return ProfileMode::accumulation;
    default:
      throw ConfigError("profiling supports direct, sequential, cache and accumulation modes");
  }
}

Batch first_pairs(const PairSet& pairs, std::size_t n) {
  if (n > pairs.size()) {
    throw ConfigError("batch of " + std::to_string(n) + " needs more than " +
                      std::to_string(pairs.size()) + " training pairs");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_batch(pairs, idx);
}

/// A task big enough for a batch of `n` unless the user supplied one.
SyntheticTask task_for(const Options& o, std::size_t n) {
  if (!o.task_path.empty()) return load_task(o.task_path);
  TaskConfig tc = o.task;
  if (tc.n_pairs - tc.eval_count() < n) {
    tc.n_pairs = n + n / 4 + 2;
    tc.eval_fraction = 0.1;
  }
  return generate_task(tc);
}

SweepRow profile_row(const Options& o, const PairSet& pairs, std::size_t n) {
  const Batch batch = first_pairs(pairs, n);
  const DualEncoder model = init_model(o.run, pairs.anchors.cols(), pairs.targets.cols());
  OptimizerState opt;
  opt.config = o.run.optimizer;
  SweepRow row;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    row.report = profile_step(profile_mode(o.run.mode), batch, model, opt, o.run.sub_batch_s,
                              o.run.temperature, o.run.activation_budget);
  } catch (const BudgetExceeded&) {
    row.budget_exceeded = true;
    row.report.mode = profile_mode(o.run.mode);
    row.report.num_anchors = batch.num_anchors();
    row.report.num_targets = batch.num_targets();
    row.report.sub_batch = o.run.sub_batch_s;
  }
  if (o.run.record_wall_time) {
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return row;
}

int cmd_sweep(const Options& o) {
  std::size_t largest = 0;
  for (auto n : o.sizes) largest = std::max(largest, n);
  const SyntheticTask task = task_for(o, largest);
  std::vector<SweepRow> rows;
  for (auto n : o.sizes) {
    rows.push_back(profile_row(o, task.train, n));
    const auto& r = rows.back();
    std::cout << "examples=" << n << " status=" << (r.budget_exceeded ? "budget_exceeded" : "ok");
    if (!r.budget_exceeded) {
      std::cout << " act_peak=" << r.report.activation_peak()
                << " cache_floats=" << r.report.cache_peak();
    }
    std::cout << '\n';
  }
  const fs::path path = fs::path(o.out) / "sweep.csv";
  write_sweep(path, rows);
  std::cout << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_profile(const Options& o) {
  const SyntheticTask task = task_for(o, o.run.batch_size);
  const SweepRow row = profile_row(o, task.train, o.run.batch_size);
  if (row.budget_exceeded) {
    std::cerr << "activation budget of " << *o.run.activation_budget << " floats exceeded in "
              << to_string(o.run.mode) << " mode at batch " << o.run.batch_size << '\n';
    return kExitBudget;
  }
  nlohmann::json j;
  for (const auto& [k, v] : row.report.key_values()) {
    j[k] = v;
    std::cout << k << '=' << v << '\n';
  }
  j["wall_ms"] = row.wall_ms;
  write_json(fs::path(o.out) / "profile.json", j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-cache training benchmarks on a synthetic retrieval task"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value configuration file; command-line flags win");

  Options o;
  auto* generate = app.add_subcommand("generate", "write a synthetic task description");
  auto* train = app.add_subcommand("train", "train one configuration and evaluate it");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a task's eval split");
  auto* sweep = app.add_subcommand("sweep", "profile one step at several batch sizes");
  auto* profile = app.add_subcommand("profile", "profile memory of one step");
  for (auto* sub : {generate, train, eval, sweep, profile}) sub->fallthrough();

  app.add_option("--mode", o.mode, "direct|cache|accumulation|sequential|deep|multi")
      ->capture_default_str();
  app.add_option("--batch-size", o.run.batch_size)->capture_default_str();
  app.add_option("--sub-batch-s", o.run.sub_batch_s, "anchor sub-batch (accumulation chunk)")
      ->capture_default_str();
  app.add_option("--sub-batch-t", o.run.sub_batch_t)->capture_default_str();
  app.add_option("--workers", o.run.workers)->capture_default_str();
  app.add_option("--temperature", o.run.temperature)->capture_default_str();
  app.add_option("--epochs", o.run.epochs)->capture_default_str();
  app.add_option("--seed", o.run.seed, "seeds both the task and the run")->capture_default_str();
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_option("--activation-budget", o.activation_budget,
                 "fail a step whose live activations exceed this many floats");
  app.add_option("--optimizer", o.optimizer, "adam|sgd")->capture_default_str();
  app.add_option("--lr", o.run.optimizer.lr)->capture_default_str();
  app.add_option("--embedding-dim", o.run.embedding_dim)->capture_default_str();
  app.add_option("--hidden-dim", o.run.hidden_dim, "0 for linear encoders")->capture_default_str();
  app.add_option("--head-hidden", o.run.head_hidden)->capture_default_str();
  app.add_flag("--tied", o.run.tied, "share one encoder for anchors and targets");
  app.add_option("--eval-k", o.run.eval_k)->capture_default_str()->delimiter(',');
  app.add_option("--n-pairs", o.task.n_pairs)->capture_default_str();
  app.add_option("--latent-dim", o.task.latent_dim)->capture_default_str();
  app.add_option("--in-dim", o.task.in_dim_s, "input dim of both sides")->capture_default_str();
  app.add_option("--noise", o.task.noise)->capture_default_str();
  app.add_option("--clusters", o.task.clusters, "0 for an isotropic latent")->capture_default_str();
  app.add_option("--cluster-spread", o.task.cluster_spread)->capture_default_str();
  app.add_option("--eval-fraction", o.task.eval_fraction)->capture_default_str();
  app.add_option("--task", o.task_path, "task.json from `generate`");
  app.add_option("--checkpoint", o.checkpoint_path, "checkpoint.json from `train`");
  app.add_option("--sizes", o.sizes, "sweep batch sizes")->capture_default_str()->delimiter(',');
  app.add_flag("--no-wall-time", o.no_wall_time, "record wall_ms as 0 for reproducible files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    o.run.mode = parse_mode(o.mode);
    o.run.optimizer.kind = parse_optimizer(o.optimizer);
    if (o.activation_budget) o.run.activation_budget = o.activation_budget;
    o.run.record_wall_time = !o.no_wall_time;
    o.task.seed = o.run.seed;
    o.task.in_dim_t = o.task.in_dim_s;
    o.run.validate();

    if (*generate) return cmd_generate(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*profile) return cmd_profile(o);
  } catch (const BudgetExceeded& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBudget;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
