//! Multiply-accumulate tally for matrix products.
//!
//! Only one counter may be live in the process at a time; the tally is
//! per-thread and only the thread that started the counter records.

use std::cell::Cell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static ACTIVE: AtomicBool = AtomicBool::new(false);

thread_local! {
    static TALLY: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Serialises unit tests that start a counter.
#[cfg(test)]
pub(crate) static TEST_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

pub fn record_macs(n: u64) {
    TALLY.with(|t| {
        if let Some(v) = t.get() {
            t.set(Some(v + n));
        }
    });
}

/// Live counter; dropping it stops the tally.
pub struct MacCounter {
    // Tied to the thread that owns the tally.
    _not_send: PhantomData<*const ()>,
}

impl MacCounter {
    pub fn start() -> Result<MacCounter> {
        if ACTIVE
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::contract(
                "MAC instrumentation is already active; it is single-threaded only",
            ));
        }
        TALLY.with(|t| t.set(Some(0)));
        Ok(MacCounter {
            _not_send: PhantomData,
        })
    }

    pub fn tally(&self) -> u64 {
        TALLY.with(|t| t.get().unwrap_or(0))
    }

    pub fn reset(&self) {
        TALLY.with(|t| t.set(Some(0)));
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        TALLY.with(|t| t.set(None));
        ACTIVE.store(false, Ordering::Release);
    }
}

/// Runs `f` with a fresh tally and returns its result plus the MAC count.
pub fn mac_tally<R>(f: impl FnOnce() -> R) -> Result<(R, u64)> {
    let counter = MacCounter::start()?;
    let out = f();
    let n = counter.tally();
    Ok((out, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_counts_m_k_n() {
        let _guard = TEST_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        let (_, n) = mac_tally(|| a.matmul(&b).unwrap()).unwrap();
        assert_eq!(n, 60);
    }

    #[test]
    fn nested_counter_is_refused() {
        let _guard = TEST_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let outer = MacCounter::start().unwrap();
        assert!(MacCounter::start().is_err());
        drop(outer);
        assert!(MacCounter::start().is_ok());
    }
}
