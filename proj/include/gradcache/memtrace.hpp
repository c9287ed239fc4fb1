#pragma once

// Float-granular accounting of live tensor memory.
//
// Every tensor buffer registers its element count with the counter installed
// on the creating thread (if any) under the category active at creation time,
// and releases it on destruction. Counters are shared-owned by the buffers
// they track, so a buffer outliving a profiling scope stays well defined.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradcache/errors.hpp"

namespace gradcache::mem {

enum class Category : std::uint8_t {
  activation,
  representation_store,
  gradient_cache,
  parameters,
  loss_graph,
};

inline constexpr std::size_t kCategoryCount = 5;

inline constexpr std::array<Category, kCategoryCount> kAllCategories = {
    Category::activation, Category::representation_store,
    Category::gradient_cache, Category::parameters, Category::loss_graph};

constexpr std::string_view to_string(Category c) {
  switch (c) {
    case Category::activation:
      return "activation";
    case Category::representation_store:
      return "representation_store";
    case Category::gradient_cache:
      return "gradient_cache";
    case Category::parameters:
      return "parameters";
    case Category::loss_graph:
      return "loss_graph";
  }
  return "unknown";
}

/// Live and high-water float counts per category. Thread-safe.
class MemCounter {
 public:
  MemCounter() = default;
  MemCounter(const MemCounter&) = delete;
  MemCounter& operator=(const MemCounter&) = delete;

  void track_alloc(Category c, std::size_t n_floats) {
    std::lock_guard lock(mutex_);
    auto& slot = slots_[index(c)];
    if (c == Category::activation && activation_budget_ &&
        slot.live + n_floats > *activation_budget_) {
      throw BudgetExceeded("activation budget of " +
                           std::to_string(*activation_budget_) +
                           " floats exceeded (requested " +
                           std::to_string(slot.live + n_floats) + ")");
    }
    slot.live += n_floats;
    if (slot.live > slot.peak) slot.peak = slot.live;
    const std::size_t total = live_total_locked();
    if (total > peak_total_) peak_total_ = total;
  }

  void track_release(Category c, std::size_t n_floats) {
    std::lock_guard lock(mutex_);
    auto& slot = slots_[index(c)];
    if (n_floats > slot.live) {
      throw MemoryViolation("release of " + std::to_string(n_floats) +
                            " floats exceeds live " + std::to_string(slot.live) +
                            " in category " + std::string(to_string(c)));
    }
    slot.live -= n_floats;
  }

  std::size_t live(Category c) const {
    std::lock_guard lock(mutex_);
    return slots_[index(c)].live;
  }
  std::size_t peak(Category c) const {
    std::lock_guard lock(mutex_);
    return slots_[index(c)].peak;
  }
  std::size_t live_total() const {
    std::lock_guard lock(mutex_);
    return live_total_locked();
  }
  std::size_t peak_total() const {
    std::lock_guard lock(mutex_);
    return peak_total_;
  }

  /// Restart high-water marks from the current live counts.
  void reset_peaks() {
    std::lock_guard lock(mutex_);
    for (auto& s : slots_) s.peak = s.live;
    peak_total_ = live_total_locked();
  }

  void set_activation_budget(std::optional<std::size_t> floats) {
    std::lock_guard lock(mutex_);
    activation_budget_ = floats;
  }
  std::optional<std::size_t> activation_budget() const {
    std::lock_guard lock(mutex_);
    return activation_budget_;
  }

 private:
  struct Slot {
    std::size_t live = 0;
    std::size_t peak = 0;
  };

  static constexpr std::size_t index(Category c) {
    return static_cast<std::size_t>(c);
  }
  std::size_t live_total_locked() const {
    std::size_t t = 0;
    for (const auto& s : slots_) t += s.live;
    return t;
  }

  mutable std::mutex mutex_;
  std::array<Slot, kCategoryCount> slots_{};
  std::size_t peak_total_ = 0;
  std::optional<std::size_t> activation_budget_;
};

/// Per-category readout of a counter, detached from it.
struct MemReport {
  std::array<std::size_t, kCategoryCount> live{};
  std::array<std::size_t, kCategoryCount> peak{};
  std::size_t peak_total = 0;

  std::size_t live_of(Category c) const {
    return live[static_cast<std::size_t>(c)];
  }
  std::size_t peak_of(Category c) const {
    return peak[static_cast<std::size_t>(c)];
  }

  static MemReport snapshot(const MemCounter& counter) {
    MemReport r;
    for (auto c : kAllCategories) {
      r.live[static_cast<std::size_t>(c)] = counter.live(c);
      r.peak[static_cast<std::size_t>(c)] = counter.peak(c);
    }
    r.peak_total = counter.peak_total();
    return r;
  }

  /// Merge per-worker reports: live and peak summed per category.
  static MemReport merged(std::span<const MemReport> parts) {
    MemReport r;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < kCategoryCount; ++i) {
        r.live[i] += p.live[i];
        r.peak[i] += p.peak[i];
      }
      r.peak_total += p.peak_total;
    }
    return r;
  }

  /// Flat key/value pairs, e.g. {"activation_peak", 1234}.
  std::vector<std::pair<std::string, std::size_t>> key_values() const {
    std::vector<std::pair<std::string, std::size_t>> kv;
    for (auto c : kAllCategories) {
      kv.emplace_back(std::string(to_string(c)) + "_peak", peak_of(c));
      kv.emplace_back(std::string(to_string(c)) + "_live", live_of(c));
    }
    kv.emplace_back("total_peak", peak_total);
    return kv;
  }
};

namespace detail {
inline std::shared_ptr<MemCounter>& thread_counter() {
  thread_local std::shared_ptr<MemCounter> counter;
  return counter;
}
inline Category& thread_category() {
  thread_local Category category = Category::activation;
  return category;
}
}  // namespace detail

inline const std::shared_ptr<MemCounter>& current_counter() {
  return detail::thread_counter();
}
inline Category current_category() { return detail::thread_category(); }

/// Installs a counter on this thread for the lifetime of the scope.
class CounterScope {
 public:
  explicit CounterScope(std::shared_ptr<MemCounter> counter)
      : previous_(std::exchange(detail::thread_counter(), std::move(counter))) {}
  ~CounterScope() { detail::thread_counter() = std::move(previous_); }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  std::shared_ptr<MemCounter> previous_;
};

/// Tags buffers created in this scope with `category`.
class CategoryScope {
 public:
  explicit CategoryScope(Category category)
      : previous_(std::exchange(detail::thread_category(), category)) {}
  ~CategoryScope() { detail::thread_category() = previous_; }
  CategoryScope(const CategoryScope&) = delete;
  CategoryScope& operator=(const CategoryScope&) = delete;

 private:
  Category previous_;
};

/// Move-only float storage registered with the thread's counter.
class Buffer {
 public:
  explicit Buffer(std::vector<double> values)
      : Buffer(std::move(values), current_category()) {}

  Buffer(std::vector<double> values, Category category)
      : values_(std::move(values)), category_(category) {
    if (const auto& c = current_counter()) {
      c->track_alloc(category_, values_.size());
      counter_ = c;
    }
  }

  ~Buffer() { release(); }

  Buffer(Buffer&& other) noexcept
      : values_(std::move(other.values_)),
        counter_(std::move(other.counter_)),
        category_(other.category_) {
    other.values_.clear();
  }
  Buffer& operator=(Buffer&& other) noexcept {
    if (this != &other) {
      release();
      values_ = std::move(other.values_);
      counter_ = std::move(other.counter_);
      category_ = other.category_;
      other.values_.clear();
    }
    return *this;
  }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  std::size_t size() const { return values_.size(); }
  Category category() const { return category_; }
  bool tracked() const { return counter_ != nullptr; }

 private:
  void release() noexcept {
    if (counter_) {
      // Counts only ever come from the matching alloc, so this cannot throw.
      try {
        counter_->track_release(category_, values_.size());
      } catch (...) {
      }
      counter_.reset();
    }
  }

  std::vector<double> values_;
  std::shared_ptr<MemCounter> counter_;
  Category category_;
};

}  // namespace gradcache::mem
