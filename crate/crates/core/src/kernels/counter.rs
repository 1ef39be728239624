//! Thread-local multiply-accumulate counter fed by the matmul and
//! convolution kernels. Used to cross-check the analytic FLOP model.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn get() -> u64 {
    MACS.with(Cell::get)
}
