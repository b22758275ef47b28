#pragma once

#include <cstddef>
#include <functional>

namespace presnet {

// Global worker count for row-parallel kernels. 1 (the default) means run
// everything on the calling thread; benchmarks rely on that contract.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over disjoint chunks of [0, n). Each index is touched
// by exactly one worker, so results are bit-identical for any thread count
// as long as fn writes only to its own indices. Small n runs inline unless
// force is set (used by reduction kernels that chunk their own work).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  bool force = false);

// Fixed chunk count for deterministic parallel reductions: partials are
// accumulated per chunk and combined in chunk order, so the result does not
// depend on the thread count.
inline constexpr std::size_t kReduceChunks = 8;

} // namespace presnet
