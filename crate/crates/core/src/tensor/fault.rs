//! Fault-injection hooks used to prove the self-test catches broken kernels.

use std::sync::atomic::{AtomicBool, Ordering};

static CORRUPT_CONV_BACKWARD: AtomicBool = AtomicBool::new(false);

/// When enabled, conv2d's input gradient is scaled by a wrong factor.
pub fn set_corrupt_conv_backward(on: bool) {
    CORRUPT_CONV_BACKWARD.store(on, Ordering::SeqCst);
}

pub(crate) fn conv_backward_corrupted() -> bool {
    CORRUPT_CONV_BACKWARD.load(Ordering::SeqCst)
}
