//! Dependent (paired) Student t-test and significance tiers.

use serde::{Deserialize, Serialize};
use statrs::function::beta::checked_beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub mean_diff: f64,
}

/// Test on `d = x - y`. Zero-variance differences give `p = 1` for a zero mean and
/// `p = 0` (infinite `t`) otherwise.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("paired samples must be finite".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { n, t: 0.0, p: 1.0, mean_diff: 0.0 }
        } else {
            TTest { n, t: f64::INFINITY.copysign(mean), p: 0.0, mean_diff: mean }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let nu = (n - 1) as f64;
    let p = checked_beta_reg(0.5 * nu, 0.5, nu / (nu + t * t))
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    Ok(TTest { n, t, p: p.clamp(0.0, 1.0), mean_diff: mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Hd95,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dice)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Metric::Dice),
            "hd95" => Ok(Metric::Hd95),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?} (dice|hd95)"))),
        }
    }
}

/// Outcome for the right-hand method relative to the left-hand one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    RightBetter,
    RightWorse,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub n: usize,
    pub t: f64,
    pub p: f64,
    pub mean_diff: f64,
    pub direction: Direction,
    pub tier: u8,
    pub glyph: String,
}

/// 1, 2, 3 for p below 0.05, 1e-3, 1e-5; otherwise 0.
pub fn tier(p: f64) -> u8 {
    if p < 1e-5 {
        3
    } else if p < 1e-3 {
        2
    } else if p < 0.05 {
        1
    } else {
        0
    }
}

pub fn glyph(tier: u8, direction: Direction) -> &'static str {
    match (direction, tier) {
        (_, 0) | (Direction::Equal, _) => "",
        (Direction::RightBetter, 1) => "*",
        (Direction::RightBetter, 2) => "**",
        (Direction::RightBetter, _) => "***",
        (Direction::RightWorse, 1) => "\u{25bf}",
        (Direction::RightWorse, 2) => "\u{25bf}\u{25bf}",
        (Direction::RightWorse, _) => "\u{25bf}\u{25bf}\u{25bf}",
    }
}

/// Paired test of `left` against `right` for `metric`, with glyphs from the right-hand view.
pub fn compare(left: &[f64], right: &[f64], metric: Metric) -> Result<SignificanceResult> {
    let r = paired_t_test(left, right)?;
    let direction = if r.mean_diff == 0.0 {
        Direction::Equal
    } else if (r.mean_diff < 0.0) == metric.higher_is_better() {
        Direction::RightBetter
    } else {
        Direction::RightWorse
    };
    let tier = tier(r.p);
    Ok(SignificanceResult {
        n: r.n,
        t: r.t,
        p: r.p,
        mean_diff: r.mean_diff,
        direction,
        tier,
        glyph: glyph(tier, direction).to_string(),
    })
}
