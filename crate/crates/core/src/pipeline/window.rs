//! Sliding input/target windows over hourly-contiguous segments, and the
//! temporal train/test split.

use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::records::Timestamp;
use crate::error::{Error, Result};

/// `J` input frames starting at `start`, followed by `K` target frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleWindow {
    pub start: usize,
    pub j: usize,
    pub k: usize,
}

impl SampleWindow {
    pub fn inputs(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.j
    }

    pub fn targets(&self) -> std::ops::Range<usize> {
        self.start + self.j..self.start + self.j + self.k
    }

    pub fn end(&self) -> usize {
        self.start + self.j + self.k
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<SampleWindow>,
    /// Segments too short to hold a single window.
    pub skipped_segments: usize,
}

/// Maximal runs `[a, b)` of consecutive hours.
pub fn segments(hours: &[Timestamp]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = 0;
    for i in 1..=hours.len() {
        if i == hours.len() || hours[i] - hours[i - 1] != Duration::hours(1) {
            if i > a {
                out.push((a, i));
            }
            a = i;
        }
    }
    out
}

/// Windows over `hours[range]`, never crossing a missing hour.
pub fn window(
    hours: &[Timestamp],
    range: std::ops::Range<usize>,
    j: usize,
    k: usize,
    stride: usize,
) -> Result<WindowSet> {
    if j == 0 || k == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window needs J, K, stride >= 1 (got J={j}, K={k}, stride={stride})"
        )));
    }
    let mut set = WindowSet::default();
    let offset = range.start;
    for (a, b) in segments(&hours[range]) {
        let (a, b) = (a + offset, b + offset);
        if b - a < j + k {
            set.skipped_segments += 1;
            continue;
        }
        let mut s = a;
        while s + j + k <= b {
            set.windows.push(SampleWindow { start: s, j, k });
            s += stride;
        }
    }
    Ok(set)
}

/// Index of the first hour at or after `boundary`; both sides must be
/// non-empty.
pub fn split_train_test(hours: &[Timestamp], boundary: Timestamp) -> Result<usize> {
    let b = hours.partition_point(|t| *t < boundary);
    if b == 0 || b == hours.len() {
        return Err(Error::Config(format!(
            "split boundary {boundary} leaves an empty {} side",
            if b == 0 { "train" } else { "test" }
        )));
    }
    Ok(b)
}
