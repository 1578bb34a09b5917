#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace flowrecon {

// Worker cap: FLOWRECON_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

// Fixed partition count used for reductions. Independent of the worker count
// so that summation order (and therefore every bit of the result) does not
// depend on how many threads happen to run.
inline constexpr std::size_t kReducePartitions = 8;

struct Chunk {
  std::size_t index;
  std::size_t begin;
  std::size_t end;
};

inline std::vector<Chunk> make_chunks(std::size_t n, std::size_t parts) {
  std::vector<Chunk> chunks;
  parts = std::max<std::size_t>(1, std::min(parts, n));
  for (std::size_t c = 0; c < parts; ++c) {
    std::size_t b = n * c / parts;
    std::size_t e = n * (c + 1) / parts;
    if (e > b) chunks.push_back({chunks.size(), b, e});
  }
  return chunks;
}

// Runs fn(chunk) for each chunk of [0, n), spreading chunks over workers.
// The first exception thrown by any chunk is rethrown on the caller thread.
template <class Fn>
void parallel_chunks(const std::vector<Chunk>& chunks, Fn&& fn) {
  std::size_t workers = std::min(worker_count(), chunks.size());
  if (workers <= 1) {
    for (const auto& c : chunks) fn(c);
    return;
  }
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < chunks.size(); i += workers) {
        try {
          fn(chunks[i]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  auto chunks = make_chunks(n, std::max<std::size_t>(1, worker_count()));
  parallel_chunks(chunks, [&](const Chunk& c) {
    for (std::size_t i = c.begin; i < c.end; ++i) fn(i);
  });
}

}  // namespace flowrecon

namespace flowrecon {

// Row-wise accumulation into a gradient buffer with a fixed partitioning.
// fn(row, grad_chunk) adds row contributions into grad_chunk; chunk buffers
// are summed into `grad` in partition order.
template <class Fn>
void reduce_rows(std::size_t n, std::span<double> grad, Fn&& fn) {
  auto chunks = make_chunks(n, kReducePartitions);
  std::vector<std::vector<double>> bufs(chunks.size(), std::vector<double>(grad.size(), 0.0));
  parallel_chunks(chunks, [&](const Chunk& c) {
    for (std::size_t i = c.begin; i < c.end; ++i) fn(i, std::span<double>(bufs[c.index]));
  });
  for (const auto& b : bufs) {
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += b[k];
  }
}

}  // namespace flowrecon
