use serde::{Deserialize, Serialize};

/// Half-open interval `[start_ms, end_ms)` on a clip's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start_ms: u64,
    pub end_ms: u64,
}

/// Union of the intervals a rater actually played, kept sorted and merged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    intervals: Vec<Interval>,
}

impl Coverage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, start_ms: u64, end_ms: u64) {
        if start_ms >= end_ms {
            return;
        }
        let mut merged = Interval { start_ms, end_ms };
        let mut out = Vec::with_capacity(self.intervals.len() + 1);
        let mut placed = false;
        for iv in self.intervals.drain(..) {
            if iv.end_ms < merged.start_ms {
                out.push(iv);
            } else if iv.start_ms > merged.end_ms {
                if !placed {
                    out.push(merged);
                    placed = true;
                }
                out.push(iv);
            } else {
                merged.start_ms = merged.start_ms.min(iv.start_ms);
                merged.end_ms = merged.end_ms.max(iv.end_ms);
            }
        }
        if !placed {
            out.push(merged);
        }
        self.intervals = out;
    }

    pub fn covered_ms(&self) -> u64 {
        self.intervals.iter().map(|iv| iv.end_ms - iv.start_ms).sum()
    }

    /// Complete once coverage reaches `duration_ms - tolerance_ms`.
    pub fn is_complete(&self, duration_ms: u64, tolerance_ms: u64) -> bool {
        self.covered_ms() >= duration_ms.saturating_sub(tolerance_ms)
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }
}
