#pragma once

#include <cstdint>
#include <functional>

namespace ebfkit {

// Worker cap: EBFKIT_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
int worker_count();

// Runs fn(0..n-1) on up to worker_count() threads. Exceptions from tasks
// are rethrown (the one with the lowest index wins).
void parallel_for(int n, const std::function<void(int)>& fn);

// Deterministic 64-bit seed for a sub-stream (chain, grid cell, fold).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace ebfkit
