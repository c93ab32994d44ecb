#pragma once

#include <cstddef>
#include <functional>

namespace bil {

/// Worker cap: the BIL_THREADS environment variable if set and positive,
/// otherwise the hardware concurrency.
std::size_t worker_count();

/// Runs task(i) for i in [0, n). Tasks must write to disjoint outputs; any
/// reduction over their results is done by the caller in index order, which
/// keeps results independent of scheduling. The first exception thrown by a
/// task is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace bil
