#pragma once

#include <cstddef>
#include <functional>

namespace dml {

// Worker cap: DML_THREADS when set to a positive integer, else the number of
// logical cores.
std::size_t worker_count();

// Runs body(i) for i in [0, n) on up to worker_count() threads. Exceptions
// from any task are rethrown (first by index) after all tasks finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace dml
