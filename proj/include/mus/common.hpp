#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace mus {

inline constexpr const char* kVersion = "0.1.0";

/// Thrown on contract violations (bad arguments, malformed inputs).
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Worker count used by parallel_chunks. Resolution order: set_thread_count()
/// > MUS_THREADS environment variable > hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// Runs fn(begin, end) over a static partition of [0, n) into contiguous
/// chunks, one per worker. Each index is handled by exactly one worker and
/// every chunk is iterated serially, so results are bit-identical for any
/// thread count as long as chunks write disjoint outputs.
void parallel_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

/// FNV-1a 64-bit, used for provenance digests (not cryptographic).
uint64_t fnv1a64(const void* data, size_t len,
                 uint64_t state = 14695981039346656037ull);
uint64_t fnv1a64_file(const std::string& path);
std::string hex64(uint64_t v);

}  // namespace mus
