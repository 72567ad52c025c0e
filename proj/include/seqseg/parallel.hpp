#pragma once

#include <cstddef>
#include <functional>

namespace seqseg {

/// Worker count: SEQSEG_THREADS if set to a positive integer, otherwise the
/// number of hardware threads.
int thread_count();

/// Runs body(i) for i in [0, n). Iterations must not share mutable state;
/// callers reduce per-iteration results in index order to stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace seqseg
