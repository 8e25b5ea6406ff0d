//! Thread-local multiply-accumulate tally used as the cost-model oracle.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Total multiply-accumulates recorded on this thread so far.
pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the number of MACs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = macs();
    let out = f();
    (out, macs() - before)
}
