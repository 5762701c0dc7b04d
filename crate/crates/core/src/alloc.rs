//! Allocator tuning for training loops.
//!
//! A training step allocates and frees the same set of large buffers over
//! and over. glibc's defaults hand those pages back to the kernel after
//! every step, so the next step pays a page fault per 4 KiB again.

use std::sync::Once;

/// Keeps freed heap memory mapped for reuse. Idempotent; a no-op on
/// platforms other than glibc Linux.
pub fn retain_freed_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
