#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/bench/task.hpp"
#include "gradcache/deep_distance.hpp"
#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"

namespace gradcache::bench {

struct EvalResult {
  std::vector<std::size_t> ks;
  std::vector<double> hits;         // hit@k, parallel to ks
  std::vector<std::size_t> ranks;  // 1-based rank of each anchor's positive
};

/// 1-based rank of column `pos` in `scores`; ties go to the lower index and
/// a NaN score ranks below every number.
inline std::size_t rank_of(std::span<const double> scores, std::size_t pos) {
  const auto before = [](double a, double b) {
    if (std::isnan(b)) return !std::isnan(a);
    return a > b;
  };
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == pos) continue;
    const bool tie = scores[j] == scores[pos] || (std::isnan(scores[j]) && std::isnan(scores[pos]));
    if (before(scores[j], scores[pos]) || (tie && j < pos)) ++rank;
  }
  return rank;
}

/// Rank every eval target for every eval anchor by phi (dot product unless
/// a trained head is given) and report hit@k.
inline EvalResult evaluate_topk(const DualEncoder& model, const PairSet& pairs,
                                const std::vector<std::size_t>& ks,
                                const DistanceHead& head = DistanceHead::dot_product()) {
  const std::size_t n = pairs.size();
  if (n == 0) throw ConfigError("evaluation set is empty");
  for (std::size_t k : ks) {
    if (k == 0 || k > n) {
      throw ConfigError("top-k of " + std::to_string(k) + " needs 1 <= k <= " +
                        std::to_string(n) + " eval targets");
    }
  }
  NoGraphScope no_graph;
  const Tensor F = encode(model.anchor, pairs.anchors);
  const Tensor G = encode(model.target_encoder(), pairs.targets);
  const Tensor scores = phi_block(head, F, G);

  EvalResult out;
  out.ks = ks;
  out.hits.assign(ks.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = rank_of(scores.row(i), i);
    out.ranks.push_back(r);
    for (std::size_t q = 0; q < ks.size(); ++q)
      if (r <= ks[q]) out.hits[q] += 1.0;
  }
  for (auto& h : out.hits) h /= static_cast<double>(n);
  return out;
}

}  // namespace gradcache::bench
