//! Group-robustness metrics, PMI tables and decision margins.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{CfError, Result};

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub group: String,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub correct: u64,
    pub total: u64,
}

impl GroupCount {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub per_group_accuracy: BTreeMap<String, f64>,
    pub per_group_counts: BTreeMap<String, GroupCount>,
    /// Total correct over total count.
    pub average_accuracy: f64,
    pub worst_group: (String, f64),
    pub gap: Option<f64>,
}

/// Builds a report from per-group counts; empty groups are dropped.
pub fn report_from_counts(counts: BTreeMap<String, GroupCount>) -> Result<GroupReport> {
    let counts: BTreeMap<String, GroupCount> = counts.into_iter().filter(|(_, c)| c.total > 0).collect();
    if counts.is_empty() {
        return Err(CfError::EmptyInput("outcomes"));
    }
    let per_group_accuracy: BTreeMap<String, f64> =
        counts.iter().map(|(g, c)| (g.clone(), c.accuracy())).collect();
    let (correct, total) = counts
        .values()
        .fold((0u64, 0u64), |(a, b), c| (a + c.correct, b + c.total));
    let worst_group = per_group_accuracy
        .iter()
        .fold(None::<(&String, f64)>, |best, (g, &a)| match best {
            Some((_, b)) if b <= a => best,
            _ => Some((g, a)),
        })
        .map(|(g, a)| (g.clone(), a))
        .expect("non-empty");
    let mut report = GroupReport {
        per_group_accuracy,
        per_group_counts: counts,
        average_accuracy: correct as f64 / total as f64,
        worst_group,
        gap: None,
    };
    report.gap = gender_gap(&report).ok();
    Ok(report)
}

pub fn group_accuracy(outcomes: &[Outcome]) -> Result<GroupReport> {
    let mut counts: BTreeMap<String, GroupCount> = BTreeMap::new();
    for o in outcomes {
        let c = counts
            .entry(o.group.clone())
            .or_insert(GroupCount { correct: 0, total: 0 });
        c.total += 1;
        c.correct += u64::from(o.correct);
    }
    report_from_counts(counts)
}

/// `|acc_female − acc_male|`; the report must hold exactly those two groups.
pub fn gender_gap(report: &GroupReport) -> Result<f64> {
    let groups: Vec<&str> = report.per_group_accuracy.keys().map(String::as_str).collect();
    if groups != ["female", "male"] {
        return Err(CfError::WrongGroupSchema(format!(
            "expected groups [female, male], found {groups:?}"
        )));
    }
    Ok((report.per_group_accuracy["female"] - report.per_group_accuracy["male"]).abs())
}

/// Pointwise mutual information (natural log) of a count table. With zero
/// smoothing, empty cells are NaN.
pub fn pmi_matrix(counts: &[Vec<f64>], smoothing: f64) -> Result<Vec<Vec<f64>>> {
    if counts.is_empty() || counts[0].is_empty() {
        return Err(CfError::EmptyCounts);
    }
    let cols = counts[0].len();
    for (i, row) in counts.iter().enumerate() {
        if row.len() != cols {
            return Err(CfError::DimensionMismatch {
                expected: cols,
                found: row.len(),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CfError::NonFinite {
                what: "count",
                index: i * cols + j,
            });
        }
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(CfError::config("smoothing", "must be a finite value >= 0"));
    }
    let table: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|v| v + smoothing).collect())
        .collect();
    let total: f64 = table.iter().flatten().sum();
    if total <= 0.0 {
        return Err(CfError::EmptyCounts);
    }
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(table
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, &n)| {
                    if n == 0.0 {
                        f64::NAN
                    } else {
                        (n * total / (row_sums[i] * col_sums[j])).ln()
                    }
                })
                .collect()
        })
        .collect())
}

/// `scores[true] − scores[rival]`; the rival defaults to the best other class.
pub fn decision_margin(scores: &[f64], true_class: usize, rival: Option<usize>) -> Result<f64> {
    let size = scores.len();
    let check = |i: usize| {
        if i < size {
            Ok(i)
        } else {
            Err(CfError::InvalidIndex { index: i, size })
        }
    };
    check(true_class)?;
    let rival = match rival {
        Some(r) if r == true_class => return Err(CfError::SameClass(r)),
        Some(r) => check(r)?,
        None => (0..size)
            .filter(|&c| c != true_class)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .ok_or(CfError::SameClass(true_class))?,
    };
    Ok(scores[true_class] - scores[rival])
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pmi_transpose_and_scale(
            raw in prop::collection::vec(prop::collection::vec(1u32..50, 4), 3),
            k in 1u32..7,
        ) {
            let t: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
            let tt: Vec<Vec<f64>> = (0..4).map(|j| t.iter().map(|r| r[j]).collect()).collect();
            let scaled: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v * f64::from(k)).collect()).collect();
            let a = pmi_matrix(&t, 0.0).unwrap();
            let b = pmi_matrix(&tt, 0.0).unwrap();
            let c = pmi_matrix(&scaled, 0.0).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    prop_assert!((a[i][j] - b[j][i]).abs() < 1e-12);
                    prop_assert!((a[i][j] - c[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn argmax_has_positive_margin(scores in prop::collection::vec(-10.0f64..10.0, 2..10)) {
            let best = crate::tde::argmax(&scores);
            let m = decision_margin(&scores, best, None).unwrap();
            prop_assert!(m >= 0.0);
        }
    }
}
