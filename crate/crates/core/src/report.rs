//! Verification reports.
//!
//! A report is the outcome of one inequality check over a grid of locations.
//! Each row is judged by `estimate <= bound + margin`; the report's headline
//! numbers are copied from the worst row, so the top-level pass flag can be
//! recomputed from the stored fields alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Where a number came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Formula,
    Quadrature {
        abs_err: f64,
    },
    MonteCarlo {
        n: usize,
        se: f64,
    },
    /// Grid or pair-sampling search; not rigorous.
    Numeric {
        method: String,
    },
}

impl Provenance {
    pub fn numeric(method: impl Into<String>) -> Self {
        Provenance::Numeric { method: method.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub label: String,
    pub location: Vec<f64>,
    pub estimate: f64,
    pub bound: f64,
    pub margin: f64,
    pub provenance: Provenance,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl CheckRow {
    pub fn new(
        label: impl Into<String>,
        location: Vec<f64>,
        estimate: f64,
        bound: f64,
        margin: f64,
        provenance: Provenance,
    ) -> Self {
        let pass = passes(estimate, bound, margin);
        CheckRow {
            label: label.into(),
            location,
            estimate,
            bound,
            margin,
            provenance,
            pass,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    /// Signed violation; positive means the row fails.
    pub fn excess(&self) -> f64 {
        let e = self.estimate - self.bound - self.margin;
        if e.is_nan() {
            f64::INFINITY
        } else {
            e
        }
    }
}

pub(crate) fn passes(estimate: f64, bound: f64, margin: f64) -> bool {
    estimate <= bound + margin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub claim: String,
    pub estimate: f64,
    pub bound: f64,
    pub margin: f64,
    pub provenance: Provenance,
    pub worst_label: String,
    pub worst_location: Vec<f64>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub rows: Vec<CheckRow>,
    /// Wall-clock time; kept out of the JSON body so reruns compare byte-for-byte.
    #[serde(skip)]
    pub runtime: Duration,
}

impl VerificationReport {
    pub fn from_rows(claim: impl Into<String>, rows: Vec<CheckRow>) -> Self {
        let worst = rows
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.excess().total_cmp(&b.excess()))
            .map(|(i, _)| i);
        let (estimate, bound, margin, provenance, label, location) = match worst {
            Some(i) => {
                let r = &rows[i];
                (
                    r.estimate,
                    r.bound,
                    r.margin,
                    r.provenance.clone(),
                    r.label.clone(),
                    r.location.clone(),
                )
            }
            None => (0.0, 0.0, 0.0, Provenance::Formula, String::from("empty"), Vec::new()),
        };
        VerificationReport {
            claim: claim.into(),
            estimate,
            bound,
            margin,
            provenance,
            worst_label: label,
            worst_location: location,
            pass: passes(estimate, bound, margin) && rows.iter().all(|r| r.pass),
            params: BTreeMap::new(),
            notes: Vec::new(),
            rows,
            runtime: Duration::ZERO,
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn with_runtime(mut self, runtime: Duration) -> Self {
        self.runtime = runtime;
        self
    }

    /// Recomputes the pass flag from stored numbers.
    pub fn recomputed_pass(&self) -> bool {
        passes(self.estimate, self.bound, self.margin)
            && self.rows.iter().all(|r| passes(r.estimate, r.bound, r.margin))
    }

    /// Merges several reports into one; the claim passes only if all parts do.
    pub fn combine(claim: impl Into<String>, parts: Vec<VerificationReport>) -> Self {
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        let mut params = BTreeMap::new();
        let mut runtime = Duration::ZERO;
        for part in parts {
            for mut r in part.rows {
                r.label = format!("{}/{}", part.claim, r.label);
                rows.push(r);
            }
            notes.extend(part.notes);
            for (k, v) in part.params {
                params.insert(format!("{}.{}", part.claim, k), v);
            }
            runtime += part.runtime;
        }
        let mut report = VerificationReport::from_rows(claim, rows);
        report.notes = notes;
        report.params = params;
        report.runtime = runtime;
        report
    }

    /// One line per row: `label,loc_0..loc_{k-1},estimate,bound,margin,pass`.
    pub fn rows_csv(&self) -> String {
        let width = self.rows.iter().map(|r| r.location.len()).max().unwrap_or(0);
        let mut out = String::from("label");
        for i in 0..width {
            let _ = write!(out, ",loc_{i}");
        }
        out.push_str(",estimate,bound,margin,pass\n");
        for r in &self.rows {
            out.push_str(&r.label.replace(',', ";"));
            for i in 0..width {
                match r.location.get(i) {
                    Some(v) => {
                        let _ = write!(out, ",{v:e}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:e},{:e},{:e},{}", r.estimate, r.bound, r.margin, r.pass);
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {}: estimate {:.6e} <= bound {:.6e} + margin {:.3e} (worst at {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.claim,
            self.estimate,
            self.bound,
            self.margin,
            self.worst_label
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_row_drives_headline() {
        let rows = vec![
            CheckRow::new("a", vec![0.0], 1.0, 2.0, 0.0, Provenance::Formula),
            CheckRow::new("b", vec![1.0], 2.5, 2.0, 0.1, Provenance::Formula),
        ];
        let r = VerificationReport::from_rows("t", rows);
        assert!(!r.pass);
        assert_eq!(r.worst_label, "b");
        assert_eq!(r.recomputed_pass(), r.pass);
    }

    #[test]
    fn nan_estimate_fails() {
        let rows = vec![CheckRow::new("n", vec![], f64::NAN, 1.0, 1.0, Provenance::Formula)];
        let r = VerificationReport::from_rows("t", rows);
        assert!(!r.pass);
    }

    #[test]
    fn empty_report_passes() {
        let r = VerificationReport::from_rows("t", vec![]);
        assert!(r.pass);
        assert!(r.recomputed_pass());
    }

    #[test]
    fn runtime_not_serialised() {
        let r = VerificationReport::from_rows("t", vec![]).with_runtime(Duration::from_secs(3));
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("runtime"));
    }
}
