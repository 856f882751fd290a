#include "tlam/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tlam {
namespace {
std::atomic<unsigned> g_threads{0};
}

void set_num_threads(unsigned n) { g_threads = n; }

unsigned num_threads() {
  const unsigned n = g_threads.load();
  if (n != 0) return n;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_chunks(std::size_t n, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  chunk_size = std::max<std::size_t>(chunk_size, 1);
  const std::size_t chunks = chunk_count(n, chunk_size);
  const auto run = [&](std::size_t c) { fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size)); };
  const std::size_t workers = std::min<std::size_t>(num_threads(), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t c = next++; c < chunks; c = next++) {
      try {
        run(c);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t i = 1; i < workers; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace tlam
