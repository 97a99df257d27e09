use proptest::prelude::*;

use super::*;

fn mask(truth: &[u8], probs: &[f64]) -> ScoredMask {
    ScoredMask {
        truth: truth.iter().map(|&t| t == 1).collect(),
        probs: probs.to_vec(),
    }
}

#[test]
fn prf1_zero_denominators() {
    assert_eq!(prf1(&ConfusionCounts::default()), (0.0, 0.0, 0.0));
    let only_tn = ConfusionCounts {
        tn: 5,
        ..Default::default()
    };
    assert_eq!(prf1(&only_tn), (0.0, 0.0, 0.0));
}

#[test]
fn prf1_example() {
    let c = ConfusionCounts::from_pairs(&[true, true, false, false], &[true, false, true, false]);
    assert_eq!(
        c,
        ConfusionCounts {
            tp: 1,
            fp: 1,
            r#fn: 1,
            tn: 1
        }
    );
    let (p, r, f1) = prf1(&c);
    assert_eq!((p, r, f1), (0.5, 0.5, 0.5));
}

#[test]
fn mask_metrics_worked_example() {
    let docs = [
        mask(&[1, 0, 0], &[0.4, 0.05, 0.2]),
        mask(&[0, 1], &[0.05, 0.5]),
        mask(&[0, 0], &[0.0, 0.0]),
    ];
    let m = mask_metrics(&docs, 0.1);
    assert!((m.g_f1 - 0.8).abs() < 1e-12);
    assert!((m.d_f1 - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!((m.rac_num, m.rac_den), (1, 2));
    assert_eq!(m.rac_text(), "1/2");
    assert!((m.acc - 6.0 / 7.0).abs() < 1e-12);
}

#[test]
fn threshold_is_inclusive() {
    let m = mask_metrics(&[mask(&[1], &[0.1])], 0.1);
    assert_eq!((m.rac_num, m.rac_den), (1, 1));
}

#[test]
fn no_pr_documents_give_zero_scores() {
    let m = mask_metrics(&[mask(&[0, 0], &[0.9, 0.0])], 0.1);
    assert_eq!((m.g_f1, m.d_f1, m.rac_den), (0.0, 0.0, 0));
    assert_eq!(m.acc, 0.5);
    assert_eq!(mask_metrics(&[], 0.1).acc, 0.0);
}

/// Straightforward per-clause reference for the mask metrics.
fn reference(docs: &[ScoredMask], t: f64) -> (f64, f64, u64, u64, f64) {
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    let (mut gtp, mut gfp, mut gfn) = (0.0, 0.0, 0.0);
    let (mut dsum, mut nd, mut exact) = (0.0, 0u64, 0u64);
    let (mut ok, mut all) = (0.0, 0.0);
    for d in docs {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&truth, &p) in d.truth.iter().zip(&d.probs) {
            let pred = p >= t;
            all += 1.0;
            if pred == truth {
                ok += 1.0;
            }
            match (pred, truth) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        if d.truth.contains(&true) {
            gtp += tp;
            gfp += fp;
            gfn += fn_;
            dsum += f1(tp, fp, fn_);
            nd += 1;
            if fp == 0.0 && fn_ == 0.0 {
                exact += 1;
            }
        }
    }
    let d = if nd > 0 { dsum / nd as f64 } else { 0.0 };
    let acc = if all > 0.0 { ok / all } else { 0.0 };
    (f1(gtp, gfp, gfn), d, exact, nd, acc)
}

fn arb_docs() -> impl Strategy<Value = Vec<ScoredMask>> {
    prop::collection::vec(
        prop::collection::vec((any::<bool>(), 0.0f64..1.0), 0..5).prop_map(|v| ScoredMask {
            truth: v.iter().map(|x| x.0).collect(),
            probs: v.iter().map(|x| x.1).collect(),
        }),
        0..8,
    )
}

proptest! {
    #[test]
    fn matches_reference(docs in arb_docs(), t in 0.0f64..1.0) {
        let m = mask_metrics(&docs, t);
        let (g, d, k, n, acc) = reference(&docs, t);
        prop_assert!((m.g_f1 - g).abs() < 1e-12);
        prop_assert!((m.d_f1 - d).abs() < 1e-12);
        prop_assert_eq!((m.rac_num, m.rac_den), (k, n));
        prop_assert!((m.acc - acc).abs() < 1e-12);
    }

    #[test]
    fn lower_threshold_never_lowers_recall(docs in arb_docs(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let recall = |t: f64| {
            let mut c = ConfusionCounts::default();
            for d in &docs {
                for (&truth, &p) in d.truth.iter().zip(&d.probs) {
                    c.add(p >= t, truth);
                }
            }
            prf1(&c).1
        };
        prop_assert!(recall(lo) >= recall(hi));
    }

    #[test]
    fn prf1_in_unit_interval(tp in 0u64..50, fp in 0u64..50, f in 0u64..50, tn in 0u64..50) {
        let (p, r, f1) = prf1(&ConfusionCounts { tp, fp, r#fn: f, tn });
        for x in [p, r, f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(f1 <= p.max(r) + 1e-15);
    }
}

fn fold(i: usize, tp: u64, fp: u64, f: u64, mask: Option<MaskMetrics>) -> FoldMetrics {
    FoldMetrics::new(i, ConfusionCounts { tp, fp, r#fn: f, tn: 3 }, mask)
}

fn sample_report() -> RunReport {
    let mm = |k, n| MaskMetrics {
        g_f1: 0.5,
        d_f1: 0.25,
        rac_num: k,
        rac_den: n,
        acc: 0.75,
    };
    let runs = vec![
        ConfigRun {
            label: "SA+C+P".into(),
            folds: vec![fold(0, 4, 1, 1, Some(mm(1, 3))), fold(1, 2, 0, 2, Some(mm(2, 4)))],
        },
        ConfigRun {
            label: "CC".into(),
            folds: vec![fold(0, 1, 1, 1, None)],
        },
    ];
    make_report(runs, vec![("seed".into(), "1".into())]).unwrap()
}

#[test]
fn mean_row_averages_folds_and_pools_rac() {
    let r = sample_report();
    let m = r.runs[0].mean();
    let f1s: Vec<f64> = r.runs[0].folds.iter().map(|f| f.f1).collect();
    assert!((m.f1 - (f1s[0] + f1s[1]) / 2.0).abs() < 1e-12);
    let mask = m.mask.unwrap();
    assert_eq!(mask.rac_text(), "3/7");
    assert!(r.runs[1].mean().mask.is_none());
}

#[test]
fn text_layout() {
    let text = sample_report().to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# run report");
    assert_eq!(lines[1], "# seed = 1");
    let header: Vec<&str> = lines[2].split_whitespace().collect();
    assert_eq!(header, ["config", "fold", "P", "R", "F1", "gF1", "dF1", "rAC", "Acc"]);
    let mean: Vec<&str> = lines[5].split_whitespace().collect();
    assert_eq!(&mean[..2], ["SA+C+P", "mean"]);
    assert_eq!(mean[7], "3/7");
    let cc: Vec<&str> = lines[6].split_whitespace().collect();
    assert_eq!(cc, ["CC", "1", "0.5000", "0.5000", "0.5000", "-", "-", "-", "-"]);
    assert_eq!(text, sample_report().to_text());
}

#[test]
fn json_round_trip_and_merge() {
    let r = sample_report();
    let back: RunReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(back.to_json().unwrap().contains("\"fn\": 1"));
    let merged = RunReport::merge(&[r.clone(), r.clone()]).unwrap();
    assert_eq!(merged.runs.len(), 4);
    assert!(RunReport::merge(&[]).is_err());
}

#[test]
fn empty_fold_list_is_rejected() {
    let runs = vec![ConfigRun {
        label: "x".into(),
        folds: vec![],
    }];
    assert!(make_report(runs, vec![]).is_err());
}
