#pragma once

#include <cstddef>
#include <functional>

namespace malvit {

/// Runs fn(0) ... fn(count - 1) on up to `threads` workers. Work items are
/// independent and write to disjoint outputs, so results do not depend on the
/// thread count. The first exception thrown by any item is rethrown.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace malvit
