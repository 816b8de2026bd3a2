#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace pcda {

/// Runs `work(i)` for i in [0, count) on up to `workers` threads and feeds the
/// results to `consume(i, result)` strictly in index order. The consumed
/// sequence (and therefore any floating-point accumulation done inside
/// `consume`) is identical for every worker count, including 1.
template <typename Result>
void ordered_parallel_for(std::size_t count, unsigned workers,
                          const std::function<Result(std::size_t)>& work,
                          const std::function<void(std::size_t, Result&&)>& consume) {
  if (count == 0) return;
  if (workers <= 1 || count == 1) {
    for (std::size_t i = 0; i < count; ++i) consume(i, work(i));
    return;
  }

  const std::size_t window = std::max<std::size_t>(2 * workers, 4);
  std::vector<std::optional<Result>> slots(window);
  std::mutex mu;
  std::condition_variable slot_ready;
  std::condition_variable slot_free;
  std::atomic<std::size_t> next{0};
  std::size_t consumed = 0;

  auto worker_fn = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      Result r = work(i);
      std::unique_lock lock(mu);
      slot_free.wait(lock, [&] { return i < consumed + window; });
      slots[i % window] = std::move(r);
      slot_ready.notify_all();
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker_fn);

  for (std::size_t i = 0; i < count; ++i) {
    std::optional<Result> r;
    {
      std::unique_lock lock(mu);
      slot_ready.wait(lock, [&] { return slots[i % window].has_value(); });
      r = std::move(slots[i % window]);
      slots[i % window].reset();
      consumed = i + 1;
      slot_free.notify_all();
    }
    consume(i, std::move(*r));
  }
  for (auto& t : pool) t.join();
}

}  // namespace pcda
