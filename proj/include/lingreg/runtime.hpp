// SPDX-License-Identifier: Apache-2.0
//
// Process-level tuning for executables that train models.

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lingreg {

/// Keeps per-step activation buffers on the heap instead of returning them to
/// the kernel after every step. Without this, mmap/munmap traffic dominates the
/// system time of a training run. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
    mallopt(M_TOP_PAD, 256 * 1024 * 1024);
#endif
}

}  // namespace lingreg
