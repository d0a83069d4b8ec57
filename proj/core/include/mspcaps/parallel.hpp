#pragma once

#include <cstddef>
#include <functional>

namespace mspcaps {

/// Worker-thread cap: MSPCAPS_THREADS if set, else the hardware concurrency.
std::size_t worker_threads();

/// Overrides the cap for this process (0 restores the default).
void set_worker_threads(std::size_t n);

/// Splits [0, n) into contiguous chunks, one per worker. Each index is
/// handled by exactly one thread, so callers that write disjoint outputs per
/// index get results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t begin, std::size_t end)>& fn);

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates the same activation sizes every step, and fresh pages
/// cost a fault each. No-op off glibc.
void retain_heap_memory();

}  // namespace mspcaps
