//! Receptive field (RF) and sample rate (SR) analysis.
//!
//! Two independent routes compute the same statistics:
//!
//! * closed forms for a single atrous conv, ASPP, serial chains and the
//!   deformable-conv formula over given sample offsets ([`closed`]);
//! * a brute-force enumerator that walks any [`GraphSpec`](crate::netspec::GraphSpec)
//!   and tracks the exact set of input offsets each node can see
//!   ([`enumerate`]).
//!
//! RF is reported as a side length; the SR denominator is the side squared.

pub mod closed;
pub mod enumerate;
pub mod render;
pub mod report;

pub use closed::{rf_sr_aspp, rf_sr_atrous, rf_sr_dcn, rf_sr_serial, DcnResult};
pub use enumerate::{enumerate_samples, longest_path_side, rf_sr_gps, Enumeration};
pub use report::{analysis_report, reference_report, AnalysisReport, ReportInput, ReportRow};

use crate::netspec::Violation;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("graph fails validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Graph(Vec<Violation>),
}

/// Integer offset `(dx, dy)` of an input sample relative to the output
/// position. Ordered row-major (by `dy`, then `dx`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Offset {
    pub dy: i32,
    pub dx: i32,
}

impl Offset {
    pub const ORIGIN: Offset = Offset { dy: 0, dx: 0 };

    pub fn new(dx: i32, dy: i32) -> Self {
        Offset { dy, dx }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BoundingBox {
    pub min_x: i32,
    pub max_x: i32,
    pub min_y: i32,
    pub max_y: i32,
}

impl BoundingBox {
    pub fn width(&self) -> u64 {
        (self.max_x - self.min_x) as u64 + 1
    }

    pub fn height(&self) -> u64 {
        (self.max_y - self.min_y) as u64 + 1
    }
}

/// A set of sample offsets, kept sorted and duplicate-free.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SamplePositionSet {
    offsets: Vec<Offset>,
}

impl SamplePositionSet {
    pub fn origin() -> Self {
        SamplePositionSet {
            offsets: vec![Offset::ORIGIN],
        }
    }

    pub fn from_offsets(offsets: impl IntoIterator<Item = Offset>) -> Self {
        let mut offsets: Vec<Offset> = offsets.into_iter().collect();
        offsets.sort_unstable();
        offsets.dedup();
        SamplePositionSet { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, o: Offset) -> bool {
        self.offsets.binary_search(&o).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = Offset> + '_ {
        self.offsets.iter().copied()
    }

    pub fn union(&self, other: &SamplePositionSet) -> SamplePositionSet {
        let (a, b) = (&self.offsets, &other.offsets);
        let mut out = Vec::with_capacity(a.len().max(b.len()));
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        SamplePositionSet { offsets: out }
    }

    /// Minkowski sum with the tap pattern of a `k×k` kernel at dilation `r`.
    pub fn dilate(&self, k: u32, r: u32) -> SamplePositionSet {
        let half = (k as i32 - 1) / 2;
        let r = r as i32;
        let mut out = Vec::with_capacity(self.offsets.len() * (k * k) as usize);
        for o in &self.offsets {
            for ty in -half..=half {
                for tx in -half..=half {
                    out.push(Offset::new(o.dx + tx * r, o.dy + ty * r));
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        SamplePositionSet { offsets: out }
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        let first = self.offsets.first()?;
        let mut b = BoundingBox {
            min_x: first.dx,
            max_x: first.dx,
            min_y: first.dy,
            max_y: self.offsets.last()?.dy,
        };
        for o in &self.offsets {
            b.min_x = b.min_x.min(o.dx);
            b.max_x = b.max_x.max(o.dx);
        }
        Some(b)
    }

    /// Side of the smallest enclosing square (0 for the empty set).
    pub fn rf_side(&self) -> u64 {
        self.bbox().map_or(0, |b| b.width().max(b.height()))
    }
}

/// RF and SR of one method.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RfSrResult {
    pub method: String,
    pub rf_side: u64,
    pub rf_area: u64,
    pub sample_count: u64,
    pub sr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
    /// Set when part of the result could not come from the closed form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RfSrResult {
    pub fn new(method: impl Into<String>, rf_side: u64, sample_count: u64) -> Self {
        let rf_area = rf_side * rf_side;
        RfSrResult {
            method: method.into(),
            rf_side,
            rf_area,
            sample_count,
            sr: sample_count as f64 / rf_area as f64,
            params: None,
            note: None,
        }
    }

    pub fn from_set(method: impl Into<String>, set: &SamplePositionSet) -> Self {
        RfSrResult::new(method, set.rf_side(), set.len() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilate_origin_gives_tap_pattern() {
        let s = SamplePositionSet::origin().dilate(3, 4);
        assert_eq!(s.len(), 9);
        assert_eq!(
            s.bbox(),
            Some(BoundingBox {
                min_x: -4,
                max_x: 4,
                min_y: -4,
                max_y: 4
            })
        );
        assert!(s.contains(Offset::new(-4, 0)));
        assert!(!s.contains(Offset::new(-2, 0)));
        assert_eq!(SamplePositionSet::origin().dilate(1, 7), SamplePositionSet::origin());
    }

    #[test]
    fn union_merges_sorted() {
        let a = SamplePositionSet::from_offsets([Offset::new(0, 0), Offset::new(2, 1)]);
        let b = SamplePositionSet::from_offsets([Offset::new(2, 1), Offset::new(-1, 0)]);
        let u = a.union(&b);
        assert_eq!(u.len(), 3);
        assert_eq!(u, SamplePositionSet::from_offsets(a.iter().chain(b.iter())));
    }

    #[test]
    fn rf_side_of_rectangle_is_longer_edge() {
        let s = SamplePositionSet::from_offsets([Offset::new(-3, 0), Offset::new(3, 1)]);
        assert_eq!(s.rf_side(), 7);
        assert_eq!(SamplePositionSet::default().rf_side(), 0);
    }
}
