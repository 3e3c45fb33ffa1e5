#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <vector>

#include "helix/errors.hpp"

namespace helix {

// Logical byte accounting for every tensor buffer (values, gradients,
// scratch). Counters are thread_local: one model instance per logical thread,
// so peaks are exact and bit-reproducible, never sampled from the OS.
//
// budget == 0 means unlimited. When a budget is set, an allocation that would
// push `live` past it throws FeasibilityError before any memory is touched.
class MemoryMeter {
 public:
  static MemoryMeter& get() {
    thread_local MemoryMeter m;
    return m;
  }

  void on_alloc(std::size_t bytes) {
    if (budget_ != 0 && live_ + bytes > budget_) {
      throw FeasibilityError(live_ + bytes, budget_, "tensor allocation");
    }
    live_ += bytes;
    if (live_ > peak_) peak_ = live_;
    if (log_) log_->push_back(static_cast<std::int64_t>(bytes));
  }

  void on_free(std::size_t bytes) {
    live_ -= bytes;
    if (log_) log_->push_back(-static_cast<std::int64_t>(bytes));
  }

  std::size_t live_bytes() const { return live_; }
  std::size_t peak_bytes() const { return peak_; }
  void reset_peak() { peak_ = live_; }

  std::size_t budget() const { return budget_; }
  void set_budget(std::size_t bytes) { budget_ = bytes; }

  // Optional event log (signed deltas) used by tests to re-derive the peak.
  void set_log(std::vector<std::int64_t>* log) { log_ = log; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
  std::size_t budget_ = 0;
  std::vector<std::int64_t>* log_ = nullptr;
};

// Restores the previous budget on scope exit.
class BudgetGuard {
 public:
  explicit BudgetGuard(std::size_t bytes) : prev_(MemoryMeter::get().budget()) {
    MemoryMeter::get().set_budget(bytes);
  }
  ~BudgetGuard() { MemoryMeter::get().set_budget(prev_); }
  BudgetGuard(const BudgetGuard&) = delete;
  BudgetGuard& operator=(const BudgetGuard&) = delete;

 private:
  std::size_t prev_;
};

template <class T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() = default;
  template <class U>
  CountingAllocator(const CountingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    MemoryMeter::get().on_alloc(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }

  void deallocate(T* p, std::size_t n) {
    MemoryMeter::get().on_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const CountingAllocator<U>&) const {
    return true;
  }
};

template <class T>
using counted_vector = std::vector<T, CountingAllocator<T>>;

}  // namespace helix
