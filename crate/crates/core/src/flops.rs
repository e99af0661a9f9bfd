//! Per-thread counter of floating-point work.
//!
//! Every floating-point kernel in this crate reports the number of float
//! operations it performs. The integer kernels never touch the counter, which
//! lets tests assert that a code path is float-free.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn record(n: usize) {
    FLOPS.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

/// Float operations recorded on this thread since the last reset.
pub fn count() -> u64 {
    FLOPS.with(|c| c.get())
}

pub fn reset() {
    FLOPS.with(|c| c.set(0));
}

/// Run `f` and return its result with the number of float operations it recorded.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = count();
    let out = f();
    (out, count().wrapping_sub(before))
}
