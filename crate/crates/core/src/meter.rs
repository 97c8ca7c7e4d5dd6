//! Per-thread operation counters.
//!
//! Every final-feature evaluation and every backward pass of a
//! [`ResidualNetwork`](crate::network::ResidualNetwork) bumps these counters on
//! the calling thread, which lets tests assert exact work budgets without
//! interference from other test threads.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Batched forward evaluations that produced final features.
    pub forward_passes: u64,
    /// Rows pushed through those forward evaluations.
    pub forward_samples: u64,
    pub backward_passes: u64,
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;

    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            forward_passes: self.forward_passes - rhs.forward_passes,
            forward_samples: self.forward_samples - rhs.forward_samples,
            backward_passes: self.backward_passes - rhs.backward_passes,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts {
        forward_passes: 0,
        forward_samples: 0,
        backward_passes: 0,
    }) };
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Runs `f` and returns its result with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

pub(crate) fn record_forward(samples: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.forward_passes += 1;
        v.forward_samples += samples as u64;
        c.set(v);
    });
}

pub(crate) fn record_backward() {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.backward_passes += 1;
        c.set(v);
    });
}
