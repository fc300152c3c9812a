//! Single-slot mailbox for handing work between the coordinator and the
//! resolver thread once per pipeline stage.
//!
//! Stages are a few microseconds long, so receivers spin briefly before
//! yielding. On a single hardware thread spinning only burns the peer's
//! time slice, so the spin budget drops to zero there.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

pub(crate) struct Mailbox<T> {
    full: AtomicBool,
    closed: AtomicBool,
    slot: Mutex<Option<T>>,
    spin_limit: u32,
}

impl<T> Mailbox<T> {
    pub(crate) fn new(spin_limit: u32) -> Self {
        Self {
            full: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            slot: Mutex::new(None),
            spin_limit,
        }
    }

    /// Posts a value. The protocol is strictly request/response, so the slot
    /// is always empty here.
    pub(crate) fn send(&self, value: T) {
        let mut slot = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        debug_assert!(slot.is_none(), "mailbox overrun");
        *slot = Some(value);
        drop(slot);
        self.full.store(true, Ordering::Release);
    }

    /// Blocks until a value arrives; `None` once the sender has hung up.
    pub(crate) fn recv(&self) -> Option<T> {
        let mut spins = 0u32;
        loop {
            if self.full.swap(false, Ordering::Acquire) {
                return self.slot.lock().unwrap_or_else(|e| e.into_inner()).take();
            }
            if self.closed.load(Ordering::Acquire) {
                // a value may have landed just before close
                if self.full.swap(false, Ordering::Acquire) {
                    return self.slot.lock().unwrap_or_else(|e| e.into_inner()).take();
                }
                return None;
            }
            if spins < self.spin_limit {
                spins += 1;
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}

/// Closes the mailbox when dropped, including during unwinding.
pub(crate) struct CloseOnDrop<'a, T>(pub(crate) &'a Mailbox<T>);

impl<T> Drop for CloseOnDrop<'_, T> {
    fn drop(&mut self) {
        self.0.close();
    }
}

pub(crate) fn default_spin_limit() -> u32 {
    match std::thread::available_parallelism() {
        Ok(n) if n.get() > 1 => 4_000,
        _ => 0,
    }
}
