//! Per-invocation operation counters.
//!
//! The integer executor opens a window after quantizing its input and closes
//! it before dequantizing the output. Any floating-point work recorded while
//! the window is open shows up in [`OpCounts::float_ops_in_window`].

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub int_mul: u64,
    pub int_add: u64,
    pub shift: u64,
    pub compare: u64,
    pub float_ops: u64,
    pub float_ops_in_window: u64,
}

#[derive(Debug, Default)]
pub struct OpCounter {
    counts: OpCounts,
    window_open: bool,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_window(&mut self) {
        self.window_open = true;
    }

    pub fn close_window(&mut self) {
        self.window_open = false;
    }

    pub fn int_mul(&mut self, n: u64) {
        self.counts.int_mul += n;
    }

    pub fn int_add(&mut self, n: u64) {
        self.counts.int_add += n;
    }

    pub fn shift(&mut self, n: u64) {
        self.counts.shift += n;
    }

    pub fn compare(&mut self, n: u64) {
        self.counts.compare += n;
    }

    pub fn float(&mut self, n: u64) {
        self.counts.float_ops += n;
        if self.window_open {
            self.counts.float_ops_in_window += n;
        }
    }

    pub fn counts(&self) -> OpCounts {
        self.counts
    }
}
