//! Per-thread solver-call counters.
//!
//! Regrounding and zero-shot transfer promise that no saLMDP or absorption
//! solve is performed. Every solver entry point bumps a counter for the
//! thread it runs on, so a caller can snapshot before and after an operation
//! and assert on the difference.

use std::cell::Cell;

/// Solver-call counts observed on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverCounts {
    pub salmdp_solves: u64,
    pub absorption_solves: u64,
    pub gs_solves: u64,
}

impl std::ops::Sub for SolverCounts {
    type Output = SolverCounts;

    fn sub(self, rhs: SolverCounts) -> SolverCounts {
        SolverCounts {
            salmdp_solves: self.salmdp_solves - rhs.salmdp_solves,
            absorption_solves: self.absorption_solves - rhs.absorption_solves,
            gs_solves: self.gs_solves - rhs.gs_solves,
        }
    }
}

thread_local! {
    static COUNTS: Cell<SolverCounts> = Cell::new(SolverCounts::default());
}

/// Current counts for this thread.
pub fn snapshot() -> SolverCounts {
    COUNTS.with(|c| c.get())
}

fn bump(f: impl FnOnce(&mut SolverCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn record_salmdp_solve() {
    bump(|c| c.salmdp_solves += 1);
}

pub(crate) fn record_absorption_solve() {
    bump(|c| c.absorption_solves += 1);
}

pub(crate) fn record_gs_solve() {
    bump(|c| c.gs_solves += 1);
}
