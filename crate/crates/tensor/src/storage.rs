//! Tensor buffers with live/peak byte accounting.
//!
//! Every tensor buffer and convolution scratch buffer goes through
//! [`Storage`], so `peak_bytes` reports the high-water mark of numeric
//! memory held by values, autograd graphs, gradients and optimizer state.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn track_alloc(bytes: usize) {
    let live = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(live, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    LIVE.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently held by tensor storage.
pub fn live_bytes() -> usize {
    LIVE.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Resets the peak counter to the current live byte count.
pub fn reset_peak() {
    PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// A tracked `Vec<f64>`.
#[derive(Debug)]
pub struct Storage {
    data: Vec<f64>,
}

impl Storage {
    pub fn new(data: Vec<f64>) -> Self {
        track_alloc(data.capacity() * 8);
        Storage { data }
    }

    pub fn zeros(len: usize) -> Self {
        Storage::new(vec![0.0; len])
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        let data = std::mem::take(&mut self.data);
        track_free(data.capacity() * 8);
        data
    }
}

impl Clone for Storage {
    fn clone(&self) -> Self {
        Storage::new(self.data.clone())
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        track_free(self.data.capacity() * 8);
    }
}

impl Deref for Storage {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.data
    }
}

impl DerefMut for Storage {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }
}
