#pragma once

namespace fd {

// Process-wide numeric and allocator settings used by the tools and tests.
// Flushes denormals to zero on x86 and keeps freed large blocks in the heap
// instead of returning them to the kernel on every training step.
// Safe to call more than once.
void tune_runtime();

}  // namespace fd
