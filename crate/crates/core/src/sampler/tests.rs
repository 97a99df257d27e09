use proptest::prelude::*;

use super::*;

/// Clause tokens are prefixed by the document id so borrowed clauses can be
/// traced back to their donor.
fn doc(id: &str, y_c: u8, types: &str, tag: &str) -> Document {
    let n_ctx = types.len();
    let mut clauses = vec![Clause::new([format!("{id}.cause")]), Clause::new([format!("{id}.emo")])];
    clauses.extend((0..n_ctx).map(|i| Clause::new([format!("{id}.ctx{i}")])));
    Document {
        id: id.into(),
        clauses,
        cause: vec![0],
        emotion: 1,
        y_c: CondLabel::try_from(y_c).unwrap(),
        ctx_type: types
            .chars()
            .map(|c| if c == 'P' { ContextType::PR } else { ContextType::IR })
            .collect(),
        origin: Origin::Original,
        source_id: id.into(),
        emotion_tag: Some(tag.into()),
    }
}

fn counts(nc: usize, con: usize, o: usize) -> TypeCounts {
    TypeCounts::new(nc, con, o)
}

fn small_corpus() -> Corpus {
    Corpus::new(vec![
        doc("c1", 2, "PIP", "neg"),
        doc("o1", 0, "II", "pos"),
        doc("o2", 0, "III", "pos"),
        doc("m1", 1, "I", "neg"),
    ])
    .unwrap()
}

#[test]
fn counts_n_zero_leaves_originals() {
    assert_eq!(counts_from_n(counts(146, 763, 1176), 0), (1939, 146));
}

#[test]
fn counts_on_reference_totals() {
    assert_eq!(counts_from_n(counts(146, 763, 1176), 2), (5054, 6313));
    assert_eq!(counts_from_n(counts(146, 763, 1176), 3), (6993, 9015));
}

#[test]
fn counts_balanced_case() {
    assert_eq!(counts_from_n(counts(0, 100, 300), 2), (1100, 1100));
    assert!(balance_holds(counts(0, 100, 300), 2));
}

#[test]
fn solve_n_examples() {
    assert_eq!(solve_n(counts(0, 100, 300), 5).unwrap(), 2);
    assert_eq!(solve_n(counts(0, 1, 0), 5).unwrap(), 1);
    // n=1 gives 3878/2848 (off by 0.362), n=2 gives 5054/6313 (off by 0.199).
    assert_eq!(solve_n(counts(146, 763, 1176), 5).unwrap(), 2);
}

#[test]
fn published_totals_disagree_with_formula() {
    let note = published_totals_note(REFERENCE_COUNTS, 2).unwrap();
    assert!(
        note.contains("5554") && note.contains("5415") && note.contains("5054 / 6313"),
        "{note}"
    );
    assert!(published_totals_note(REFERENCE_COUNTS, 3)
        .unwrap()
        .contains("6993 / 9015"));
    assert!(published_totals_note(REFERENCE_COUNTS, 4).is_none());
    assert!(published_totals_note(counts(0, 100, 300), 2).is_none());
}

#[test]
fn solve_n_rejects_bad_input() {
    assert!(solve_n(counts(1, 0, 5), 5).is_err());
    assert!(solve_n(counts(1, 2, 5), 0).is_err());
}

#[test]
fn plan_ratio() {
    let p = SamplePlan::new(counts(0, 100, 300), 2);
    assert_eq!((p.n_pos, p.n_neg, p.ratio), (1100, 1100, 1.0));
    assert!(SamplePlan::new(counts(0, 0, 3), 0).ratio.is_infinite());
}

#[test]
fn replace_pr_removes_relation() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    let mut rng = RngStream::new(1);
    let out = make_context_negative(&c.documents()[0], &pool, ReplaceMode::ReplacePr, 0, &mut rng).unwrap();
    let t = derive_targets(&out);
    assert_eq!((t.y, t.y_o), (false, false));
    assert!(t.mask.iter().all(|&m| !m));
    assert_eq!(out.origin, Origin::CtxNegReplacePr);
    assert_eq!(out.source_id, "c1");
    // The IR slot is kept, the PR slots are replaced.
    assert_eq!(out.clauses[3], c.documents()[0].clauses[3]);
    assert_ne!(out.clauses[2], c.documents()[0].clauses[2]);
    assert_ne!(out.clauses[4], c.documents()[0].clauses[4]);
    out.validate().unwrap();
}

#[test]
fn replace_ir_keeps_relation_and_mask() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    let src = &c.documents()[0];
    let out = make_context_negative(src, &pool, ReplaceMode::ReplaceIr, 0, &mut RngStream::new(2)).unwrap();
    let t = derive_targets(&out);
    assert_eq!((t.y, t.y_o), (true, false));
    assert_eq!(t.mask, derive_targets(src).mask);
    assert_eq!(out.clauses[2], src.clauses[2]);
    assert_eq!(out.clauses[4], src.clauses[4]);
    assert_ne!(out.clauses[3], src.clauses[3]);
}

#[test]
fn replace_all_stays_non_conditional() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    let src = &c.documents()[1];
    let out = make_context_negative(src, &pool, ReplaceMode::ReplaceAll, 0, &mut RngStream::new(3)).unwrap();
    let t = derive_targets(&out);
    assert_eq!((t.y, t.y_o), (true, true));
    for i in 2..4 {
        assert!(!out.clauses[i].tokens()[0].starts_with("o1."));
    }
}

#[test]
fn mode_label_mismatch_is_an_error() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    let mut rng = RngStream::new(0);
    let d = c.documents();
    assert!(make_context_negative(&d[1], &pool, ReplaceMode::ReplacePr, 0, &mut rng).is_err());
    assert!(make_context_negative(&d[0], &pool, ReplaceMode::ReplaceAll, 0, &mut rng).is_err());
    assert!(make_context_negative(&d[3], &pool, ReplaceMode::ReplaceIr, 0, &mut rng).is_err());
    assert!(make_emotion_negative(&d[3], &pool, 0, &mut rng).is_err());
}

#[test]
fn self_only_donor_pool_is_an_error() {
    let c = Corpus::new(vec![doc("a", 0, "II", "pos")]).unwrap();
    let pool = DonorPool::from_corpus(&c);
    let r = make_context_negative(
        &c.documents()[0],
        &pool,
        ReplaceMode::ReplaceAll,
        0,
        &mut RngStream::new(0),
    );
    assert!(matches!(r, Err(Error::Sampling(_))));
}

#[test]
fn emotion_negative_swaps_only_the_emotion_clause() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    for src in &c.documents()[..3] {
        let out = make_emotion_negative(src, &pool, 0, &mut RngStream::new(5)).unwrap();
        let t = derive_targets(&out);
        assert!(!t.y && !t.y_o);
        assert_eq!(out.origin, Origin::EmoNeg);
        for i in 0..src.clauses.len() {
            if i != src.emotion {
                assert_eq!(out.clauses[i], src.clauses[i]);
            }
        }
        assert_ne!(out.emotion_category(), src.emotion_category());
    }
}

#[test]
fn emotion_negative_without_other_category_fails() {
    let c = Corpus::new(vec![doc("a", 0, "I", "pos"), doc("b", 0, "I", "pos")]).unwrap();
    let pool = DonorPool::from_corpus(&c);
    assert!(make_emotion_negative(&c.documents()[0], &pool, 0, &mut RngStream::new(0)).is_err());
}

#[test]
fn emotion_negative_is_deterministic() {
    let c = small_corpus();
    let pool = DonorPool::from_corpus(&c);
    let a = make_emotion_negative(&c.documents()[1], &pool, 0, &mut RngStream::new(9)).unwrap();
    let b = make_emotion_negative(&c.documents()[1], &pool, 0, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn build_dataset_one_conditional_one_other() {
    let c = Corpus::new(vec![doc("c", 2, "PI", "neg"), doc("o", 0, "II", "pos")]).unwrap();
    let out = build_dataset(&c, 2, &RngStream::new(4)).unwrap();
    assert_eq!(out.len(), 12);
    let by = |o: Origin| out.documents().iter().filter(|d| d.origin == o).count();
    assert_eq!(by(Origin::Original), 2);
    assert_eq!(by(Origin::CtxNegReplaceIr), 1);
    assert_eq!(by(Origin::CtxNegReplacePr), 3);
    assert_eq!(by(Origin::CtxNegReplaceAll), 2);
    assert_eq!(by(Origin::EmoNeg), 4);
    assert_eq!(realized_counts(out.documents()), counts_from_n(c.counts(), 2));
}

#[test]
fn build_dataset_skips_not_causal() {
    let c = Corpus::new(vec![doc("m", 1, "II", "neg")]).unwrap();
    for n in 0..4 {
        let out = build_dataset(&c, n, &RngStream::new(0)).unwrap();
        assert_eq!(out, c);
    }
}

#[test]
fn build_dataset_is_byte_deterministic() {
    let c = small_corpus();
    let a = build_dataset(&c, 3, &RngStream::new(11)).unwrap().to_jsonl().unwrap();
    let b = build_dataset(&c, 3, &RngStream::new(11)).unwrap().to_jsonl().unwrap();
    assert_eq!(a, b);
    let other = build_dataset(&c, 3, &RngStream::new(12)).unwrap().to_jsonl().unwrap();
    assert_ne!(a, other);
}

#[test]
fn generated_documents_never_borrow_from_their_source() {
    let c = small_corpus();
    let out = build_dataset(&c, 3, &RngStream::new(6)).unwrap();
    for d in out.documents().iter().filter(|d| d.origin != Origin::Original) {
        let own = format!("{}.", d.source_id);
        let src = c.get(&d.source_id).unwrap();
        for (i, clause) in d.clauses.iter().enumerate() {
            if clause != &src.clauses[i] {
                assert!(!clause.tokens()[0].starts_with(&own), "{} borrowed from itself", d.id);
            }
        }
        let t = derive_targets(d);
        assert!(!t.y_o || t.y);
        if !t.has_pr() {
            assert!(t.mask.iter().all(|&m| !m));
        }
    }
}

proptest! {
    #[test]
    fn balance_iff_equal_counts(nc in 0usize..800, con in 0usize..800, o in 0usize..800, n in 0usize..=10) {
        let c = counts(nc, con, o);
        let (pos, neg) = counts_from_n(c, n);
        prop_assert_eq!(balance_holds(c, n), pos == neg);
    }

    #[test]
    fn solve_n_matches_brute_force(nc in 0usize..200, con in 1usize..200, o in 0usize..200, n_max in 1usize..8) {
        let c = counts(nc, con, o);
        let devs: Vec<f64> = (1..=n_max).map(|n| (SamplePlan::new(c, n).ratio - 1.0).abs()).collect();
        let min = devs.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = devs.iter().position(|&d| d == min).unwrap() + 1;
        prop_assert_eq!(solve_n(c, n_max).unwrap(), first);
    }

    #[test]
    fn realized_counts_match_plan(con in 0usize..4, o in 0usize..4, nc in 0usize..3, n in 0usize..4, seed in any::<u64>()) {
        let mut docs = Vec::new();
        for i in 0..con { docs.push(doc(&format!("c{i}"), 2, "PII", "neg")); }
        for i in 0..o { docs.push(doc(&format!("o{i}"), 0, "II", "pos")); }
        for i in 0..nc { docs.push(doc(&format!("m{i}"), 1, "I", "neg")); }
        // Guarantee donors of both categories from a distinct source.
        docs.push(doc("dp", 1, "II", "pos"));
        docs.push(doc("dn", 1, "II", "neg"));
        let c = Corpus::new(docs).unwrap();
        let out = build_dataset(&c, n, &RngStream::new(seed)).unwrap();
        prop_assert_eq!(realized_counts(out.documents()), counts_from_n(c.counts(), n));
    }
}
