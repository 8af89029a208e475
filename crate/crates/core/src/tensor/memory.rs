//! Thread-local accounting of live tensor buffer bytes.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

const ELEM: usize = std::mem::size_of::<f64>();

pub(crate) fn track_alloc(elems: usize) {
    LIVE.with(|live| {
        let now = live.get() + elems * ELEM;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(elems: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(elems * ELEM)));
}

/// Bytes held by tensors alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live size.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn peak_follows_allocations() {
        reset_peak();
        let base = live_bytes();
        {
            let _a = Tensor::zeros(&[10, 10]);
            assert_eq!(live_bytes(), base + 800);
        }
        assert_eq!(live_bytes(), base);
        assert!(peak_bytes() >= base + 800);
        reset_peak();
        assert_eq!(peak_bytes(), base);
    }
}
