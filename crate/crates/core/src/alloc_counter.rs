//! Thread-local allocation accounting.
//!
//! Install [`CountingAllocator`] as the global allocator of a binary or
//! test target, then wrap the code of interest in [`measure`] to learn the
//! peak number of live heap bytes it allocated on the calling thread.
//! Buffers allocated before the scope (inputs, outputs) are not counted.
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: linattn_core::alloc_counter::CountingAllocator =
//!     linattn_core::alloc_counter::CountingAllocator;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct CountingAllocator;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static TOTAL: Cell<usize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    // try_with: the slots may already be gone during thread teardown
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
    if delta > 0 {
        let _ = TOTAL.try_with(|t| t.set(t.get().wrapping_add(1)));
    }
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Result of a measured scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocStats {
    /// Highest number of live bytes allocated inside the scope.
    pub peak_bytes: usize,
    /// Live bytes still held when the scope ended (e.g. returned buffers).
    pub retained_bytes: usize,
    /// Number of allocation calls.
    pub allocations: usize,
}

/// Runs `f` and reports allocation statistics for the current thread.
/// Nested calls are not supported; the inner scope resets the peak.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let start = LIVE.with(Cell::get);
    let start_total = TOTAL.with(Cell::get);
    PEAK.with(|p| p.set(start));
    let r = f();
    let end = LIVE.with(Cell::get);
    let peak = PEAK.with(Cell::get);
    let stats = AllocStats {
        peak_bytes: (peak - start).max(0) as usize,
        retained_bytes: (end - start).max(0) as usize,
        allocations: TOTAL.with(Cell::get).wrapping_sub(start_total),
    };
    (r, stats)
}

/// Whether [`CountingAllocator`] is the active global allocator.
pub fn is_installed() -> bool {
    let (_, stats) = measure(|| std::hint::black_box(Box::new([0u8; 64])));
    stats.allocations > 0
}
