//! Process-wide execution mode.
//!
//! Deterministic mode (the default) keeps every kernel on the calling thread.
//! Setting `TDANN_DETERMINISTIC=0` lets large matrix products and kernel sums
//! split their output rows across the rayon pool. Each output element is
//! still summed in the same order, so both modes give the same bits.

use std::sync::atomic::{AtomicU8, Ordering};

pub const ENV_VAR: &str = "TDANN_DETERMINISTIC";

// 0 = unresolved, 1 = deterministic, 2 = parallel
static MODE: AtomicU8 = AtomicU8::new(0);

pub fn deterministic() -> bool {
    match MODE.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => {
            let det = !matches!(
                std::env::var(ENV_VAR).ok().as_deref().map(str::trim),
                Some("0") | Some("false") | Some("off")
            );
            MODE.store(if det { 1 } else { 2 }, Ordering::Relaxed);
            det
        }
    }
}

pub fn parallel() -> bool {
    !deterministic()
}

/// Overrides the environment for the rest of the process.
pub fn set_deterministic(on: bool) {
    MODE.store(if on { 1 } else { 2 }, Ordering::Relaxed);
}
