#pragma once

// Synthetic paired retrieval data from a shared linear latent:
//   anchor = A z + noise,  target = B z + noise,
// with z ~ N(0, I), or with `clusters > 0`, z = c_k + spread * N(0, I) for a
// uniformly drawn center c_k ~ N(0, I). Clustered latents make near
// neighbours common, so negatives drawn from the same cluster are hard.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradcache/errors.hpp"
#include "gradcache/tensor.hpp"

namespace gradcache::bench {

struct TaskConfig {
  std::uint64_t seed = 0;
  std::size_t n_pairs = 1000;
  std::size_t latent_dim = 16;
  std::size_t in_dim_s = 32;
  std::size_t in_dim_t = 32;
  double noise = 0.5;
  double eval_fraction = 0.1;
  std::size_t clusters = 10;
  double cluster_spread = 0.3;
  /// A = B = I; requires both input dims to equal latent_dim.
  bool identity_maps = false;

  std::size_t eval_count() const {
    return static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(n_pairs)));
  }

  void validate() const {
    if (n_pairs < 2) throw ConfigError("n_pairs must be >= 2");
    if (latent_dim == 0 || in_dim_s == 0 || in_dim_t == 0) {
      throw ConfigError("task dimensions must be >= 1");
    }
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
    if (!(cluster_spread >= 0.0)) throw ConfigError("cluster_spread must be >= 0");
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
      throw ConfigError("eval_fraction must be in (0, 1)");
    }
    if (eval_count() == 0 || eval_count() >= n_pairs) {
      throw ConfigError("eval split of " + std::to_string(eval_fraction) + " over " +
                        std::to_string(n_pairs) + " pairs leaves an empty side");
    }
    if (identity_maps && (in_dim_s != latent_dim || in_dim_t != latent_dim)) {
      throw ConfigError("identity maps need in_dim_s == in_dim_t == latent_dim");
    }
  }
};

/// Row i of `anchors` is paired with row i of `targets`.
struct PairSet {
  Tensor anchors;
  Tensor targets;

  std::size_t size() const { return anchors.rows(); }
};

struct SyntheticTask {
  TaskConfig config;
  PairSet train;
  PairSet eval;
};

namespace detail {
inline Tensor rows_of(const std::vector<double>& all, std::size_t dim, std::size_t begin,
                      std::size_t end) {
  return Tensor::matrix(end - begin, dim,
                        std::vector<double>(all.begin() + begin * dim, all.begin() + end * dim));
}
}  // namespace detail

/// Deterministic in `config`. The first n_pairs - eval_count pairs train,
/// the rest evaluate.
inline SyntheticTask generate_task(const TaskConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = config.n_pairs, k = config.latent_dim;

  const auto random_map = [&](std::size_t out_dim) {
    std::vector<double> m(out_dim * k);
    if (config.identity_maps) {
      for (std::size_t i = 0; i < out_dim; ++i) m[i * k + i] = 1.0;
    } else {
      const double scale = 1.0 / std::sqrt(static_cast<double>(k));
      for (auto& x : m) x = normal(rng) * scale;
    }
    return m;
  };
  const auto A = random_map(config.in_dim_s);
  const auto B = random_map(config.in_dim_t);

  std::vector<double> centers(config.clusters * k);
  for (auto& x : centers) x = normal(rng);
  std::uniform_int_distribution<std::size_t> pick_cluster(0, config.clusters ? config.clusters - 1 : 0);

  std::vector<double> s(n * config.in_dim_s), t(n * config.in_dim_t), z(k);
  for (std::size_t p = 0; p < n; ++p) {
    if (config.clusters) {
      const double* c = centers.data() + pick_cluster(rng) * k;
      for (std::size_t i = 0; i < k; ++i) z[i] = c[i] + config.cluster_spread * normal(rng);
    } else {
      for (auto& x : z) x = normal(rng);
    }
    for (std::size_t i = 0; i < config.in_dim_s; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += A[i * k + c] * z[c];
      s[p * config.in_dim_s + i] = acc + config.noise * normal(rng);
    }
    for (std::size_t i = 0; i < config.in_dim_t; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += B[i * k + c] * z[c];
      t[p * config.in_dim_t + i] = acc + config.noise * normal(rng);
    }
  }

  SyntheticTask task;
  task.config = config;
  const std::size_t n_train = n - config.eval_count();
  task.train = {detail::rows_of(s, config.in_dim_s, 0, n_train),
                detail::rows_of(t, config.in_dim_t, 0, n_train)};
  task.eval = {detail::rows_of(s, config.in_dim_s, n_train, n),
               detail::rows_of(t, config.in_dim_t, n_train, n)};
  return task;
}

inline nlohmann::json task_config_to_json(const TaskConfig& c) {
  return {{"seed", c.seed},         {"n_pairs", c.n_pairs},
          {"latent_dim", c.latent_dim}, {"in_dim_s", c.in_dim_s},
          {"in_dim_t", c.in_dim_t}, {"noise", c.noise},
          {"eval_fraction", c.eval_fraction}, {"clusters", c.clusters},
          {"cluster_spread", c.cluster_spread}, {"identity_maps", c.identity_maps}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_pairs = j.at("n_pairs").get<std::size_t>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.in_dim_s = j.at("in_dim_s").get<std::size_t>();
    c.in_dim_t = j.at("in_dim_t").get<std::size_t>();
    c.noise = j.at("noise").get<double>();
    c.eval_fraction = j.at("eval_fraction").get<double>();
    c.clusters = j.value("clusters", std::size_t{10});
    c.cluster_spread = j.value("cluster_spread", 0.3);
    c.identity_maps = j.value("identity_maps", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad task config: ") + e.what());
  }
  return c;
}

/// Tasks are stored by their generator config; loading regenerates the data.
inline void save_task(const std::string& path, const SyntheticTask& task) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write task file " + path);
  nlohmann::json j{{"format", "gradcache.task"}, {"version", 1},
                   {"config", task_config_to_json(task.config)},
                   {"train_pairs", task.train.size()}, {"eval_pairs", task.eval.size()}};
  out << j.dump(2) << '\n';
}

inline SyntheticTask load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read task file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("task file " + path + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "gradcache.task" || j.value("version", 0) != 1) {
    throw ConfigError("task file " + path + " has an unknown format or version");
  }
  return generate_task(task_config_from_json(j.at("config")));
}

}  // namespace gradcache::bench
