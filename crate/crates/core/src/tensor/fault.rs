//! Fault-injection hook used by `selfcheck --inject-fault` to prove that the
//! gradient checker catches a broken backward rule. Thread-local so that
//! concurrent tests are unaffected.

use std::cell::Cell;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Perturbs the sigmoid backward rule on the current thread while enabled.
pub fn inject_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

pub(crate) fn active() -> bool {
    BACKWARD_FAULT.with(Cell::get)
}
