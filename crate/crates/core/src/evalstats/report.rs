//! Raw metric records (CSV) and median-of-trials summaries with pairwise tests (JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ttest::{compare, Metric, SignificanceResult};
use super::median;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub seed: u64,
    pub method: String,
    pub dice: f64,
    pub hd95_mm: f64,
}

impl MetricsRecord {
    pub fn value(&self, m: Metric) -> f64 {
        match m {
            Metric::Dice => self.dice,
            Metric::Hd95 => self.hd95_mm,
        }
    }
}

pub fn write_records_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub median_dice: f64,
    pub median_hd95_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cases: usize,
    /// Median over trials of the per-trial median over cases.
    pub median_dice: f64,
    pub median_hd95_mm: f64,
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub left: String,
    pub right: String,
    pub metric: Metric,
    pub result: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
}

type ByMethod<'a> = BTreeMap<&'a str, Vec<&'a MetricsRecord>>;

fn group(records: &[MetricsRecord]) -> Result<ByMethod<'_>> {
    let mut seen = BTreeSet::new();
    let mut out: ByMethod = BTreeMap::new();
    for r in records {
        if !seen.insert((r.case_id.as_str(), r.seed, r.method.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "duplicate record for case {:?}, seed {}, method {:?}",
                r.case_id, r.seed, r.method
            )));
        }
        if !(0.0..=1.0).contains(&r.dice) || !(r.hd95_mm >= 0.0) {
            return Err(Error::InvalidArgument(format!("metric out of range in record {r:?}")));
        }
        out.entry(r.method.as_str()).or_default().push(r);
    }
    Ok(out)
}

/// Per-case median over seeds, keyed by case id.
pub fn per_case_medians(records: &[&MetricsRecord], metric: Metric) -> BTreeMap<String, f64> {
    let mut by_case: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_case.entry(r.case_id.as_str()).or_default().push(r.value(metric));
    }
    by_case.into_iter().map(|(k, v)| (k.to_string(), median(&v))).collect()
}

fn method_summary(method: &str, recs: &[&MetricsRecord]) -> MethodSummary {
    let mut by_seed: BTreeMap<u64, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in recs {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let trials: Vec<TrialSummary> = by_seed
        .into_iter()
        .map(|(seed, rs)| TrialSummary {
            seed,
            median_dice: median(&rs.iter().map(|r| r.dice).collect::<Vec<_>>()),
            median_hd95_mm: median(&rs.iter().map(|r| r.hd95_mm).collect::<Vec<_>>()),
        })
        .collect();
    let cases = recs.iter().map(|r| r.case_id.as_str()).collect::<BTreeSet<_>>().len();
    MethodSummary {
        method: method.to_string(),
        cases,
        median_dice: median(&trials.iter().map(|t| t.median_dice).collect::<Vec<_>>()),
        median_hd95_mm: median(&trials.iter().map(|t| t.median_hd95_mm).collect::<Vec<_>>()),
        trials,
    }
}

/// Summaries for every method plus a Dice and an HD95 test per `(left, right)` pair,
/// paired by case id on per-case medians over seeds.
pub fn summarize(records: &[MetricsRecord], pairs: &[(String, String)]) -> Result<ReportSummary> {
    let groups = group(records)?;
    let methods = groups.iter().map(|(m, r)| method_summary(m, r)).collect();
    let mut comparisons = Vec::new();
    for (left, right) in pairs {
        let get = |m: &str| groups.get(m).ok_or_else(|| Error::InvalidArgument(format!("no records for method {m:?}")));
        let (l, r) = (get(left)?, get(right)?);
        for metric in [Metric::Dice, Metric::Hd95] {
            let lm = per_case_medians(l, metric);
            let rm = per_case_medians(r, metric);
            if lm.keys().ne(rm.keys()) {
                return Err(Error::InvalidArgument(format!("methods {left:?} and {right:?} cover different cases")));
            }
            let lv: Vec<f64> = lm.values().copied().collect();
            let rv: Vec<f64> = rm.values().copied().collect();
            comparisons.push(Comparison {
                left: left.clone(),
                right: right.clone(),
                metric,
                result: compare(&lv, &rv, metric)?,
            });
        }
    }
    Ok(ReportSummary { methods, comparisons })
}

/// Writes `records.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, records: &[MetricsRecord], summary: &ReportSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| (&a.method, a.seed, &a.case_id).cmp(&(&b.method, b.seed, &b.case_id)));
    write_records_csv(&dir.join("records.csv"), &sorted)?;
    let p = dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(summary)? + "\n").map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::ttest::Direction;

    fn rec(case: &str, seed: u64, method: &str, dice: f64, hd: f64) -> MetricsRecord {
        MetricsRecord { case_id: case.into(), seed, method: method.into(), dice, hd95_mm: hd }
    }

    #[test]
    fn single_trial_summary_equals_raw() {
        let r = vec![rec("c0", 1, "vxm", 0.8, 2.0)];
        let s = summarize(&r, &[]).unwrap();
        assert_eq!(s.methods[0].median_dice, 0.8);
        assert_eq!(s.methods[0].median_hd95_mm, 2.0);
        assert_eq!(s.methods[0].cases, 1);
    }

    #[test]
    fn planted_medians_match_sorting_oracle() {
        let dice = [[0.7, 0.9, 0.8], [0.6, 0.65, 0.95], [0.5, 0.99, 0.75], [0.81, 0.82, 0.83], [0.1, 0.2, 0.3]];
        let mut r = Vec::new();
        for (s, row) in dice.iter().enumerate() {
            for (c, &d) in row.iter().enumerate() {
                r.push(rec(&format!("c{c}"), s as u64 + 10, "new", d, 1.0 + d));
            }
        }
        let s = summarize(&r, &[]).unwrap();
        let mut trial_medians: Vec<f64> = dice
            .iter()
            .map(|row| {
                let mut v = row.to_vec();
                v.sort_by(f64::total_cmp);
                v[1]
            })
            .collect();
        trial_medians.sort_by(f64::total_cmp);
        assert_eq!(s.methods[0].median_dice, trial_medians[2]);
        assert_eq!(s.methods[0].trials.len(), 5);
    }

    #[test]
    fn identical_methods_have_no_significance() {
        let mut r = Vec::new();
        for c in 0..6 {
            for m in ["vxm", "new"] {
                r.push(rec(&format!("c{c}"), 0, m, 0.5 + 0.05 * c as f64, 3.0 - 0.1 * c as f64));
            }
        }
        let s = summarize(&r, &[("vxm".into(), "new".into())]).unwrap();
        assert_eq!(s.comparisons.len(), 2);
        for c in &s.comparisons {
            assert_eq!(c.result.tier, 0);
            assert_eq!(c.result.direction, Direction::Equal);
        }
    }

    #[test]
    fn mismatched_cases_and_duplicates_rejected() {
        let r = vec![rec("a", 0, "x", 0.5, 1.0), rec("b", 0, "x", 0.5, 1.0), rec("a", 0, "y", 0.5, 1.0), rec("c", 0, "y", 0.5, 1.0)];
        assert!(summarize(&r, &[("x".into(), "y".into())]).is_err());
        let dup = vec![rec("a", 0, "x", 0.5, 1.0), rec("a", 0, "x", 0.6, 1.0)];
        assert!(summarize(&dup, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = vec![rec("case, with comma", 3, "new", 0.875, 1.25), rec("b", u64::MAX, "vxm", 0.0, 0.0)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_records_csv(&p, &r).unwrap();
        assert_eq!(read_records_csv(&p).unwrap(), r);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("case_id,seed,method,dice,hd95_mm\n"));
    }
}
