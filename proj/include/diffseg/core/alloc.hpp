#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace diffseg {

/// Keep multi-megabyte tensor buffers on the heap instead of per-allocation
/// mmap so they are recycled without fresh page faults. Call once at startup.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace diffseg
