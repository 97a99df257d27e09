//! Classification and mask-prediction metrics, and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts for the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.r#fn += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs(predicted: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            c.add(p, t);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
        self.tn += other.tn;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1; every `0/0` is 0.
pub fn prf1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.r#fn);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Predicted mask probabilities and true PR flags for one document's
/// context clauses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub truth: Vec<bool>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskMetrics {
    /// F1 over every context clause of documents with a PR clause.
    pub g_f1: f64,
    /// Mean per-document F1 over documents with a PR clause.
    pub d_f1: f64,
    /// Documents with a PR clause whose mask is predicted exactly.
    pub rac_num: u64,
    /// Documents with a PR clause.
    pub rac_den: u64,
    /// Accuracy over every context clause of every document.
    pub acc: f64,
}

impl MaskMetrics {
    pub fn rac(&self) -> f64 {
        ratio(self.rac_num, self.rac_den)
    }

    pub fn rac_text(&self) -> String {
        format!("{}/{}", self.rac_num, self.rac_den)
    }
}

/// A clause is predicted PR when its probability reaches `threshold`.
pub fn mask_metrics(docs: &[ScoredMask], threshold: f64) -> MaskMetrics {
    let mut global = ConfusionCounts::default();
    let mut d_f1_sum = 0.0;
    let (mut rac_num, mut rac_den) = (0, 0);
    let (mut correct, mut slots) = (0u64, 0u64);
    for d in docs {
        let pred: Vec<bool> = d.probs.iter().map(|&p| p >= threshold).collect();
        let c = ConfusionCounts::from_pairs(&pred, &d.truth);
        correct += c.tp + c.tn;
        slots += c.total();
        if d.truth.iter().any(|&t| t) {
            global.merge(&c);
            d_f1_sum += prf1(&c).2;
            rac_den += 1;
            if c.fp == 0 && c.r#fn == 0 {
                rac_num += 1;
            }
        }
    }
    MaskMetrics {
        g_f1: prf1(&global).2,
        d_f1: if rac_den == 0 { 0.0 } else { d_f1_sum / rac_den as f64 },
        rac_num,
        rac_den,
        acc: ratio(correct, slots),
    }
}

/// Test-fold results for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub counts: ConfusionCounts,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub mask: Option<MaskMetrics>,
    /// Epochs trained before stopping.
    pub epochs: usize,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl FoldMetrics {
    pub fn new(fold: usize, counts: ConfusionCounts, mask: Option<MaskMetrics>) -> Self {
        let (p, r, f1) = prf1(&counts);
        Self {
            fold,
            n_test: counts.total() as usize,
            counts,
            p,
            r,
            f1,
            mask,
            epochs: 0,
            best_epoch: 0,
        }
    }
}

/// Averages across folds. rAC is pooled: summed numerators over summed
/// denominators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub mask: Option<MaskMetrics>,
}

/// All folds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRun {
    pub label: String,
    pub folds: Vec<FoldMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl ConfigRun {
    pub fn mean(&self) -> MeanMetrics {
        let f = &self.folds;
        let masks: Vec<&MaskMetrics> = f.iter().filter_map(|m| m.mask.as_ref()).collect();
        let mask = (!masks.is_empty() && masks.len() == f.len()).then(|| MaskMetrics {
            g_f1: mean(masks.iter().map(|m| m.g_f1)),
            d_f1: mean(masks.iter().map(|m| m.d_f1)),
            rac_num: masks.iter().map(|m| m.rac_num).sum(),
            rac_den: masks.iter().map(|m| m.rac_den).sum(),
            acc: mean(masks.iter().map(|m| m.acc)),
        });
        MeanMetrics {
            p: mean(f.iter().map(|m| m.p)),
            r: mean(f.iter().map(|m| m.r)),
            f1: mean(f.iter().map(|m| m.f1)),
            mask,
        }
    }
}

/// Per-fold and mean results for every configuration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Settings echoed into the report header, in order.
    pub settings: Vec<(String, String)>,
    pub runs: Vec<ConfigRun>,
    /// Free-form lines appended under the table.
    #[serde(default)]
    pub notes: Vec<String>,
}

pub const REPORT_COLUMNS: [&str; 7] = ["P", "R", "F1", "gF1", "dF1", "rAC", "Acc"];

pub fn make_report(runs: Vec<ConfigRun>, settings: Vec<(String, String)>) -> Result<RunReport> {
    if runs.iter().any(|r| r.folds.is_empty()) {
        return Err(Error::Empty("report needs at least one fold per configuration"));
    }
    Ok(RunReport {
        settings,
        runs,
        notes: Vec::new(),
    })
}

fn cells(p: f64, r: f64, f1: f64, mask: Option<&MaskMetrics>) -> Vec<String> {
    let mut v = vec![format!("{p:.4}"), format!("{r:.4}"), format!("{f1:.4}")];
    match mask {
        Some(m) => v.extend([
            format!("{:.4}", m.g_f1),
            format!("{:.4}", m.d_f1),
            m.rac_text(),
            format!("{:.4}", m.acc),
        ]),
        None => v.extend(std::iter::repeat_n("-".to_string(), 4)),
    }
    v
}

impl RunReport {
    /// Fixed-width text table: one row per fold, then a mean row, per
    /// configuration. Configurations without a mask show `-`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["config".to_string(), "fold".to_string()];
        header.extend(REPORT_COLUMNS.iter().map(|s| s.to_string()));
        rows.push(header);
        for run in &self.runs {
            for f in &run.folds {
                let mut row = vec![run.label.clone(), (f.fold + 1).to_string()];
                row.extend(cells(f.p, f.r, f.f1, f.mask.as_ref()));
                rows.push(row);
            }
            let m = run.mean();
            let mut row = vec![run.label.clone(), "mean".to_string()];
            row.extend(cells(m.p, m.r, m.f1, m.mask.as_ref()));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();

        let mut s = String::from("# run report\n");
        for (k, v) in &self.settings {
            let _ = writeln!(s, "# {k} = {v}");
        }
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Concatenate the runs of several reports; settings come from the first.
    pub fn merge(reports: &[RunReport]) -> Result<RunReport> {
        let first = reports.first().ok_or(Error::Empty("no report to merge"))?;
        Ok(RunReport {
            settings: first.settings.clone(),
            runs: reports.iter().flat_map(|r| r.runs.iter().cloned()).collect(),
            notes: reports.iter().flat_map(|r| r.notes.iter().cloned()).collect(),
        })
    }
}

#[cfg(test)]
mod tests;
