#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"
#include "gradcache/tensor.hpp"

namespace gradcache {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

constexpr std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  // Adam moments, one per parameter tensor; empty until the first step.
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

struct OptimizerUpdate {
  OptimizerState state;
  std::vector<Tensor> params;
};

/// One optimizer step. Pure: the inputs are left untouched.
///
/// sgd:  p <- p - lr * g
/// adam: m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///       p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
inline OptimizerUpdate optimizer_step(const OptimizerState& state,
                                      std::span<const Tensor> params,
                                      std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(params.size()) +
                     " params but " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape()) {
      throw ShapeError("optimizer_step: param " + std::to_string(k) + " shape " +
                       shape_string(params[k].shape()) + " vs grad " +
                       shape_string(grads[k].shape()));
    }
  }

  mem::CategoryScope category(mem::Category::parameters);
  OptimizerUpdate out;
  out.state = state;
  out.state.step = state.step + 1;
  out.params.reserve(params.size());
  const auto& cfg = state.config;

  if (cfg.kind == OptimizerKind::sgd) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      std::vector<double> p = params[k].to_vector();
      const auto g = grads[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * g[i];
      out.params.emplace_back(params[k].shape(), std::move(p));
    }
    return out;
  }

  const bool fresh = state.m.empty();
  if (!fresh && (state.m.size() != params.size() || state.v.size() != params.size())) {
    throw ShapeError("optimizer_step: moment count does not match params");
  }
  const double t = static_cast<double>(out.state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  out.state.m.clear();
  out.state.v.clear();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k].size();
    std::vector<double> p = params[k].to_vector();
    std::vector<double> m = fresh ? std::vector<double>(n, 0.0) : state.m[k].to_vector();
    std::vector<double> v = fresh ? std::vector<double>(n, 0.0) : state.v[k].to_vector();
    if (m.size() != n || v.size() != n) {
      throw ShapeError("optimizer_step: moment shape mismatch at param " +
                       std::to_string(k));
    }
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    out.params.emplace_back(params[k].shape(), std::move(p));
    out.state.m.emplace_back(params[k].shape(), std::move(m));
    out.state.v.emplace_back(params[k].shape(), std::move(v));
  }
  return out;
}

}  // namespace gradcache
