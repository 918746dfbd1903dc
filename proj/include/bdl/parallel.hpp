#pragma once

#include <cstddef>
#include <functional>

namespace bdl {

// Worker count used by parallel_for; 0 selects hardware concurrency.
void set_thread_count(int threads);
int thread_count();

// Runs body(i) for i in [0, n). Work items must be independent; callers
// reduce results in index order so outcomes do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace bdl
