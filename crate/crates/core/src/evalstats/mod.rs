//! Overlap and surface-distance metrics, paired significance testing and reports.

pub mod hd95;
pub mod report;
pub mod ttest;

pub use hd95::{hd95, hd95_with, sample_surface_points, Hd95Mode, Hd95Options};
pub use report::{
    read_records_csv, per_case_medians, summarize, write_records_csv, write_report, Comparison, MethodSummary, MetricsRecord,
    ReportSummary, TrialSummary,
};
pub use ttest::{compare, glyph, paired_t_test, tier, Direction, Metric, SignificanceResult, TTest};

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// `2|a∩b| / (|a| + |b|)` over voxels outside `exclusion`.
pub fn dice(a: &BinaryMask, b: &BinaryMask, exclusion: Option<&BinaryMask>) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "dice")?;
    if let Some(e) = exclusion {
        a.grid().ensure_matches(e.grid(), "dice exclusion")?;
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for idx in 0..a.data().len() {
        if exclusion.is_some_and(|e| e.data()[idx] != 0) {
            continue;
        }
        let (x, y) = (a.data()[idx] != 0, b.data()[idx] != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::Empty("both masks are empty after exclusion".into()));
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Median with the mean of the two central values for even counts. NaN for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Percentile `q` in [0, 100] with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub(crate) fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}
