//! Closed-form RF/SR formulas.

use super::{AnalysisError, RfSrResult};
use serde::Serialize;
use std::collections::BTreeSet;

fn check_kernel(k: u32) -> Result<(), AnalysisError> {
    if k == 0 || k % 2 == 0 {
        return Err(AnalysisError::Unsupported(format!("kernel size {k} (odd kernels only)")));
    }
    Ok(())
}

/// Single atrous convolution: side `r*k - r + 1`, `k²` samples.
pub fn rf_sr_atrous(k: u32, r: u32) -> Result<RfSrResult, AnalysisError> {
    check_kernel(k)?;
    if r == 0 {
        return Err(AnalysisError::Invalid("dilation must be positive".into()));
    }
    let side = (r * k - r + 1) as u64;
    Ok(RfSrResult::new("atrous", side, (k * k) as u64))
}

/// Parallel atrous convolutions: side `max(r)*(k-1) + 1`; with pairwise
/// distinct rates the branches share only the centre tap, so the sample
/// count is `B*k² - B + 1`.
pub fn rf_sr_aspp(k: u32, rates: &[u32]) -> Result<RfSrResult, AnalysisError> {
    check_kernel(k)?;
    let max = *rates
        .iter()
        .max()
        .ok_or_else(|| AnalysisError::Invalid("ASPP needs at least one rate".into()))?;
    if rates.contains(&0) {
        return Err(AnalysisError::Invalid("dilation must be positive".into()));
    }
    let side = (max * (k - 1) + 1) as u64;
    let b = rates.len() as u64;
    let distinct: BTreeSet<u32> = rates.iter().copied().collect();
    let mut result = if distinct.len() == rates.len() {
        RfSrResult::new("aspp", side, b * (k * k) as u64 - b + 1)
    } else {
        // Shared taps beyond the centre: count the union directly.
        let half = (k as i64 - 1) / 2;
        let mut taps = BTreeSet::new();
        for &r in &distinct {
            for ty in -half..=half {
                for tx in -half..=half {
                    taps.insert((tx * r as i64, ty * r as i64));
                }
            }
        }
        let mut res = RfSrResult::new("aspp", side, taps.len() as u64);
        res.note = Some(format!(
            "duplicate rates: closed-form count {} does not apply",
            b * (k * k) as u64 - b + 1
        ));
        res
    };
    result.method = "aspp".into();
    Ok(result)
}

/// Serial chain of `(k, r)` layers: side `Σ r(k-1) + 1`. The sample set is
/// the iterated Minkowski sum of the per-layer tap patterns; since each
/// pattern is a Cartesian square, the 2-D set is the square of the 1-D sum.
pub fn rf_sr_serial(chain: &[(u32, u32)]) -> Result<RfSrResult, AnalysisError> {
    let mut side = 1u64;
    let mut line: BTreeSet<i64> = BTreeSet::from([0]);
    for &(k, r) in chain {
        check_kernel(k)?;
        if r == 0 && k > 1 {
            return Err(AnalysisError::Invalid("dilation must be positive".into()));
        }
        side += (r * (k - 1)) as u64;
        let half = (k as i64 - 1) / 2;
        let mut next = BTreeSet::new();
        for p in &line {
            for t in -half..=half {
                next.insert(p + t * r as i64);
            }
        }
        line = next;
    }
    let n = line.len() as u64;
    Ok(RfSrResult::new("serial", side, n * n))
}

/// Deformable-conv formula over explicit sample positions, taken verbatim:
/// `RF = (max x - min x) * (max y - min y)`, `SR = k² / RF`. Unlike the
/// other formulas there is no `+1`, so a dense 3×3 grid gets RF 4 rather
/// than 9 and SR above 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DcnResult {
    pub span_x: f64,
    pub span_y: f64,
    pub rf: f64,
    /// `None` when the RF is degenerate (zero).
    pub sr: Option<f64>,
    pub degenerate: bool,
}

pub fn rf_sr_dcn(positions: &[(f64, f64)], k: u32) -> Result<DcnResult, AnalysisError> {
    if positions.is_empty() {
        return Err(AnalysisError::Invalid("no sample positions".into()));
    }
    if positions.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::Invalid("non-finite sample position".into()));
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        let lo = positions.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = positions.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let span_x = fold(|p| p.0);
    let span_y = fold(|p| p.1);
    let rf = span_x * span_y;
    let degenerate = rf == 0.0;
    if degenerate {
        log::warn!("deformable RF is zero: sample positions are collinear or coincide");
    }
    Ok(DcnResult {
        span_x,
        span_y,
        rf,
        sr: (!degenerate).then(|| (k * k) as f64 / rf),
        degenerate,
    })
}
