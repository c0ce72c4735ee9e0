//! Accounting of the floating-point state an algorithm holds.
//!
//! Only persistent algorithm state is counted (iterates, tangents, directions,
//! stored trajectories, Jacobian matrices), never scratch space inside an
//! oracle call. Accounting happens on the sequential control path, so the
//! peak does not depend on how many threads execute a parallel map.

use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Debug, Default)]
pub struct FloatMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl FloatMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, floats: usize) {
        let now = self.current.fetch_add(floats, Ordering::Relaxed) + floats;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    pub fn free(&self, floats: usize) {
        let prev = self.current.fetch_sub(floats, Ordering::Relaxed);
        debug_assert!(prev >= floats, "freed more floats than were allocated");
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let m = FloatMeter::new();
        m.alloc(10);
        m.alloc(5);
        m.free(12);
        m.alloc(2);
        assert_eq!(m.current(), 5);
        assert_eq!(m.peak(), 15);
    }
}
