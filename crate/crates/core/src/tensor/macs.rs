//! Multiply-accumulate counters for the convolution kernels.
//!
//! Every convolution forward pass adds the number of MACs it executes to a
//! per-thread counter. Padded taps count: the GEMM path multiplies them too.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: usize) {
    COUNTER.with(|c| c.set(c.get() + n as u64));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns its result with the MACs it executed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
