#pragma once

#include <cstddef>
#include <functional>

namespace tlam {

/// Worker count used by parallel_chunks; 0 means hardware concurrency.
void set_num_threads(unsigned n);
unsigned num_threads();

/// Split [0, n) into fixed-size chunks and run fn(chunk, begin, end) on each.
/// The partition depends only on n and chunk_size, never on the thread count,
/// so reductions done in ascending chunk order are bit-identical for any
/// number of workers.
void parallel_chunks(std::size_t n, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
  return (n + chunk_size - 1) / chunk_size;
}

}  // namespace tlam
