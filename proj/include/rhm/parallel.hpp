#pragma once

#include <cstddef>
#include <functional>

namespace rhm {

// Worker count for internal loops: RHM_LAB_THREADS when set, else the hardware
// concurrency. Always >= 1.
std::size_t thread_count();

// Splits [0, n) into contiguous chunks, one per worker. Chunks write disjoint
// outputs, so results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace rhm

namespace rhm {

// Keeps large activation buffers on the heap between steps instead of
// returning them to the OS. No-op outside glibc; idempotent.
void retain_large_allocations();

}  // namespace rhm
