#include <gtest/gtest.h>

#include <memory>
#include <tuple>
#include <vector>

#include "gradcache/gradcheck.hpp"
#include "gradcache/profile.hpp"
#include "gradcache/trainer.hpp"
#include "test_util.hpp"

namespace gradcache {
namespace {

std::vector<std::size_t> sizes(const std::vector<IndexRange>& chunks) {
  std::vector<std::size_t> out;
  for (const auto& c : chunks) out.push_back(c.size());
  return out;
}

CacheConfig cache_config(std::size_t bs_s, std::size_t bs_t, double tau) {
  CacheConfig c;
  c.sub_batch_anchors = bs_s;
  c.sub_batch_targets = bs_t;
  c.temperature = tau;
  return c;
}

TEST(PlanSubbatches, Examples) {
  const auto p = plan_subbatches(128, 256, 16, 8);
  EXPECT_EQ(p.anchor_chunks.size(), 8u);
  EXPECT_EQ(p.target_chunks.size(), 32u);
  EXPECT_EQ(sizes(plan_subbatches(10, 10, 4, 4).anchor_chunks),
            (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(plan_subbatches(10, 3, 10, 10).anchor_chunks.size(), 1u);
  EXPECT_TRUE(plan_subbatches(0, 0, 4, 4).anchor_chunks.empty());
  EXPECT_THROW(plan_subbatches(4, 4, 0, 1), ConfigError);
}

TEST(PlanSubbatches, CoversInOrder) {
  for (std::size_t n = 0; n < 40; ++n) {
    for (std::size_t bs = 1; bs < 12; ++bs) {
      const auto chunks = chunk_ranges(n, bs);
      std::size_t next = 0;
      for (std::size_t k = 0; k < chunks.size(); ++k) {
        EXPECT_EQ(chunks[k].begin, next);
        EXPECT_LE(chunks[k].size(), bs);
        if (k + 1 < chunks.size()) {
          EXPECT_EQ(chunks[k].size(), bs);
        }
        next = chunks[k].end;
      }
      EXPECT_EQ(next, n);
    }
  }
}

TEST(Step1, MatchesTapedFullForwardBitForBit) {
  const auto model = testing::make_model(2, 6, 8, 1);
  const auto batch = testing::random_batch(13, 6, 2);
  const auto plan = plan_subbatches(13, 13, 4, 5);
  Tape tape;
  const std::size_t before = tape.size();
  const auto reps = step1_graphless_forward(batch, model, plan);
  EXPECT_EQ(tape.size(), before);
  EXPECT_FALSE(reps.anchors.attached());
  Tape full;
  EXPECT_EQ(reps.anchors.to_vector(), encode(attach(full, model.anchor), batch.anchors).to_vector());
  EXPECT_EQ(reps.targets.to_vector(), encode(attach(full, model.target), batch.targets).to_vector());
}

TEST(Step1, IdentityEncoderPassesInputsThrough) {
  DualEncoder model;
  model.anchor = EncoderParams::identity(5);
  model.target = EncoderParams::identity(5);
  const auto batch = testing::random_batch(7, 5, 3);
  const auto reps = step1_graphless_forward(batch, model, plan_subbatches(7, 7, 2, 3));
  EXPECT_EQ(reps.anchors.to_vector(), batch.anchors.to_vector());
}

TEST(Step2, MatchesAnalyticOracle) {
  const auto b = testing::random_batch_nt(9, 17, 6, 4);
  const auto cache = step2_build_cache(b.anchors, b.targets, b.positives, 0.2);
  const auto a = analytic_rep_grads(b.anchors, b.targets, b.positives, 0.2,
                                    contrastive_loss(b.anchors, b.targets, b.positives, 0.2));
  EXPECT_TRUE(cache.filled);
  EXPECT_LE(max_rel_err(cache.u, a.u), 1e-10);
  EXPECT_LE(max_rel_err(cache.v, a.v), 1e-10);
  EXPECT_EQ(cache.float_count(), (9u + 17u) * 6u);
}

TEST(Step2, SinglePairIsZero) {
  const auto b = testing::random_batch(1, 3, 5);
  const auto cache = step2_build_cache(b.anchors, b.targets, b.positives, 1.0);
  for (double x : cache.u.data()) EXPECT_EQ(x, 0.0);
  for (double x : cache.v.data()) EXPECT_EQ(x, 0.0);
}

TEST(Step2, CacheSizeAtPaperScale) {
  // |S| = 128, |T| = 256, d = 768
  const auto F = testing::random_matrix(128, 768, 1, -0.05, 0.05);
  const auto G = testing::random_matrix(256, 768, 2, -0.05, 0.05);
  std::vector<std::size_t> r(128);
  for (std::size_t i = 0; i < 128; ++i) r[i] = 2 * i;
  EXPECT_EQ(step2_build_cache(F, G, r, 1.0).float_count(), 294912u);
}

TEST(Step3, UnfilledCacheIsAnError) {
  const auto model = testing::make_model(1, 4, 3, 1);
  const auto batch = testing::random_batch(4, 4, 2);
  RepresentationGradientCache cache;
  EXPECT_THROW(step3_accumulate(batch, model, plan_subbatches(4, 4, 2, 2), cache), GraphError);
}

using EquivParam = std::tuple<std::size_t /*depth*/, double /*tau*/, std::size_t /*bs*/>;

class CachedEquivalence : public ::testing::TestWithParam<EquivParam> {};

TEST_P(CachedEquivalence, MatchesDirectGradientsAndUpdate) {
  const auto [depth, tau, bs] = GetParam();
  const auto model = testing::make_model(depth, 12, 16, 100 + depth);
  const auto batch = testing::random_batch(32, 12, 7, 1);  // |T| = 64
  // SGD: Adam would turn rounding noise in structurally-zero gradients into
  // full-size steps, so post-step parameters would not be comparable.
  const auto opt = testing::sgd(0.1);
  const auto direct = train_step_direct(batch, model, opt, tau);
  const auto cached = train_step_cached(batch, model, opt, cache_config(bs, bs, tau));
  const auto ref = direct.grads.flat();
  EXPECT_LE(max_rel_err(cached.grads.flat(), ref, testing::scale_floor(ref)), 1e-9);
  const auto ref_params = direct.model.flat();
  EXPECT_LE(max_rel_err(cached.model.flat(), ref_params, testing::scale_floor(ref_params)), 1e-9);
  EXPECT_NEAR(cached.loss, direct.loss, 1e-12 * std::abs(direct.loss));
}

INSTANTIATE_TEST_SUITE_P(
    Grid, CachedEquivalence,
    ::testing::Combine(::testing::Values<std::size_t>(1, 2), ::testing::Values(1.0, 0.05),
                       ::testing::Values<std::size_t>(1, 2, 4, 8, 16, 32)));

TEST(CachedStep, SingleChunkMatchesDirectTightly) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(10, 8, 4);
  StepStats s;
  const auto cached = cached_grads(batch, model, cache_config(10, 10, 0.5), &s);
  const auto ref = direct_param_grads(batch, model, 0.5).grads.flat();
  EXPECT_LE(max_rel_err(cached.grads.flat(), ref, testing::scale_floor(ref)), 1e-12);
}

TEST(CachedStep, ReversedChunkOrder) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(24, 8, 4, 1);
  auto cfg = cache_config(4, 5, 0.1);
  const auto fwd = cached_grads(batch, model, cfg);
  cfg.reverse_chunk_order = true;
  const auto rev = cached_grads(batch, model, cfg);
  const auto ref = fwd.grads.flat();
  // Reordering a sum perturbs every coordinate by ~eps times the summed
  // magnitudes; at 1e-12 the floor has to sit well above that.
  EXPECT_LE(max_rel_err(rev.grads.flat(), ref, testing::scale_floor(ref, 1e-4)), 1e-12);
}

TEST(CachedStep, TiedEncoders) {
  auto model = testing::make_model(2, 8, 6, 3);
  model.tied = true;
  const auto batch = testing::random_batch(12, 8, 9, 1);
  const auto ref = direct_param_grads(batch, model, 0.5).grads.flat();
  const auto cached = cached_grads(batch, model, cache_config(5, 7, 0.5));
  EXPECT_LE(max_rel_err(cached.grads.flat(), ref, testing::scale_floor(ref)), 1e-9);
}

TEST(CachedStep, PureGivenState) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(12, 8, 9);
  const auto opt = testing::adam(0.01);
  const auto a = train_step_cached(batch, model, opt, cache_config(4, 4, 1.0));
  const auto b = train_step_cached(batch, model, opt, cache_config(4, 4, 1.0));
  EXPECT_EQ(a.model.flat(), b.model.flat());
  EXPECT_EQ(a.loss, b.loss);
}

TEST(CachedStep, ForwardAndBackwardCounts) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(16, 8, 9, 1);
  const auto cached = train_step_cached(batch, model, testing::sgd(0.1), cache_config(4, 8, 1.0));
  const std::size_t n = 16 + 32;
  EXPECT_EQ(cached.stats.encoder_forward_rows, 2 * n);
  EXPECT_EQ(cached.stats.encoder_backward_rows, n);
  EXPECT_EQ(cached.stats.cache_floats, n * 6);
  const auto direct = train_step_direct(batch, model, testing::sgd(0.1), 1.0);
  EXPECT_EQ(direct.stats.encoder_forward_rows, n);
  EXPECT_EQ(direct.stats.encoder_backward_rows, n);
}

TEST(DirectStep, LossMatchesGraphlessLoss) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(9, 8, 9);
  const auto r = train_step_direct(batch, model, testing::sgd(0.1), 0.3);
  const auto ref = contrastive_loss(encode(model.anchor, batch.anchors, false),
                                    encode(model.target, batch.targets, false),
                                    batch.positives, 0.3);
  EXPECT_EQ(r.loss, ref.loss);
}

TEST(Accumulation, FullChunkEqualsDirect) {
  const auto model = testing::make_model(2, 8, 6, 3);
  const auto batch = testing::random_batch(12, 8, 9, 1);
  const auto acc = accumulation_grads(batch, model, 12, 1.0);
  const auto direct = direct_param_grads(batch, model, 1.0);
  EXPECT_EQ(acc.grads.flat(), direct.grads.flat());
}

TEST(Accumulation, SmallChunksAreNotEquivalent) {
  const auto model = testing::make_model(2, 12, 16, 5);
  const auto batch = testing::random_batch(32, 12, 11, 1);
  const auto acc = accumulation_grads(batch, model, 8, 1.0);
  const auto direct = direct_param_grads(batch, model, 1.0);
  EXPECT_GT(max_rel_err(acc.grads.flat(), direct.grads.flat()), 1e-3);
}

TEST(Accumulation, LossIsMeanOfChunkLosses) {
  const auto model = testing::make_model(1, 6, 4, 5);
  const auto batch = testing::random_batch(8, 6, 11, 1);
  const auto acc = accumulation_grads(batch, model, 4, 1.0);
  double expect = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    Batch sub;
    NoGraphScope ng;
    sub.anchors = ops::slice_rows(batch.anchors, 4 * c, 4 * c + 4);
    sub.targets = ops::slice_rows(batch.targets, 8 * c, 8 * c + 8);
    sub.positives = {0, 2, 4, 6};
    expect += direct_param_grads(sub, model, 1.0).loss / 2.0;
  }
  EXPECT_NEAR(acc.loss, expect, 1e-14);
}

TEST(Memory, CachedActivationPeakIndependentOfBatch) {
  const auto model = testing::make_model(2, 16, 8, 3);
  std::vector<std::size_t> peaks;
  for (std::size_t ns : {32, 64, 128}) {
    const auto batch = testing::random_batch(ns, 16, 5, 1);
    const auto rep = profile_step(ProfileMode::cache, batch, model, testing::sgd(0.1), 8, 1.0);
    peaks.push_back(rep.activation_peak());
    EXPECT_EQ(rep.cache_peak(), 3 * ns * 8);
    EXPECT_EQ(rep.representation_peak(), 3 * ns * 8);
    EXPECT_EQ(rep.activation_live_after, 0u);
  }
  EXPECT_EQ(peaks[0], peaks[1]);
  EXPECT_EQ(peaks[1], peaks[2]);
}

TEST(Memory, DirectActivationPeakGrows) {
  const auto model = testing::make_model(2, 16, 8, 3);
  std::size_t prev = 0;
  for (std::size_t ns : {32, 64, 128}) {
    const auto batch = testing::random_batch(ns, 16, 5, 1);
    const auto rep = profile_step(ProfileMode::direct, batch, model, testing::sgd(0.1), 8, 1.0);
    EXPECT_GT(rep.activation_peak(), prev);
    prev = rep.activation_peak();
  }
}

TEST(Memory, BudgetExceededInDirectButNotCached) {
  const auto model = testing::make_model(2, 16, 8, 3);
  const auto batch = testing::random_batch(64, 16, 5, 1);
  const auto cached = profile_step(ProfileMode::cache, batch, model, testing::sgd(0.1), 8, 1.0);
  const std::size_t budget = cached.activation_peak();
  EXPECT_NO_THROW(profile_step(ProfileMode::cache, batch, model, testing::sgd(0.1), 8, 1.0, budget));
  EXPECT_THROW(profile_step(ProfileMode::direct, batch, model, testing::sgd(0.1), 8, 1.0, budget),
               BudgetExceeded);
}

}  // namespace
}  // namespace gradcache
