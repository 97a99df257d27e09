use crate::corpus::{derive_targets, load_corpus, TypeCounts};
use crate::sampler::{build_dataset, counts_from_n, realized_counts};

use super::*;

fn cfg(n_docs: usize, cond: f64, missing: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_docs,
        fraction_conditional: cond,
        fraction_missing_condition: missing,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn no_conditional_fraction_gives_only_others() {
    let (c, _) = generate_corpus(&cfg(200, 0.0, 0.5, 1)).unwrap();
    assert_eq!(c.counts(), TypeCounts::new(0, 0, 200));
    assert!(c.documents().iter().all(|d| !derive_targets(d).has_pr()));
}

#[test]
fn all_missing_gives_only_not_causal() {
    let (c, _) = generate_corpus(&cfg(150, 1.0, 1.0, 2)).unwrap();
    assert_eq!(c.counts(), TypeCounts::new(150, 0, 0));
}

#[test]
fn generation_is_byte_deterministic() {
    let c = cfg(1000, 0.4, 0.2, 7);
    let a = generate_corpus(&c).unwrap().0.to_jsonl().unwrap();
    let b = generate_corpus(&c).unwrap().0.to_jsonl().unwrap();
    assert_eq!(a, b);
    let other = generate_corpus(&cfg(1000, 0.4, 0.2, 8)).unwrap().0.to_jsonl().unwrap();
    assert_ne!(a, other);
}

#[test]
fn class_balance_matches_fractions() {
    for (n, cond, missing) in [(1000, 0.4, 0.2), (333, 0.3, 0.5), (17, 0.5, 0.1), (500, 0.4, 0.0)] {
        let (c, _) = generate_corpus(&cfg(n, cond, missing, 3)).unwrap();
        let counts = c.counts();
        let want_cond = cond * n as f64;
        let want_missing = want_cond * missing;
        let got_cond = (counts.conditional + counts.not_causal) as f64;
        assert!(
            (got_cond - want_cond).abs() <= 1.0,
            "{n} {cond}: {got_cond} vs {want_cond}"
        );
        assert!((counts.not_causal as f64 - want_missing).abs() <= 1.0);
        assert!((counts.others as f64 - (n as f64 - want_cond)).abs() <= 1.0);
    }
}

#[test]
fn acceptance_shaped_corpus_counts() {
    let (c, _) = generate_corpus(&cfg(500, 0.4, 0.0, 5)).unwrap();
    assert_eq!(c.counts(), TypeCounts::new(0, 200, 300));
}

#[test]
fn documents_respect_shape_limits() {
    let c = cfg(300, 0.5, 0.3, 4);
    let (corpus, _) = generate_corpus(&c).unwrap();
    assert!(corpus.max_context() <= c.max_context);
    assert!(corpus.max_clause_len() <= c.clause_len);
    for d in corpus.documents() {
        if d.y_c == CondLabel::ConditionPresent {
            let pr = d.ctx_type.iter().filter(|t| **t == ContextType::PR).count();
            assert!((1..=2).contains(&pr));
        }
    }
}

#[test]
fn config_errors() {
    let tiny = SynthConfig {
        vocab_size: 10,
        ..SynthConfig::default()
    };
    assert!(matches!(generate_corpus(&tiny), Err(Error::Config(_))));
    assert!(generate_corpus(&cfg(10, 1.5, 0.0, 0)).is_err());
    assert!(generate_corpus(&cfg(10, 0.01, 0.0, 0)).is_err());
    let no_ctx = SynthConfig {
        max_context: 0,
        ..cfg(10, 0.5, 0.0, 0)
    };
    assert!(generate_corpus(&no_ctx).is_err());
}

#[test]
fn table_invariants_and_sidecar_round_trip() {
    let c = SynthConfig::default();
    let t = CausalTable::for_config(&c);
    t.check().unwrap();
    assert_eq!(t.pairs.len(), c.n_events * c.n_emotions);
    assert_eq!(t.conditional_pairs.len(), c.n_cond_events * c.n_emotions);
    let f = tempfile::NamedTempFile::new().unwrap();
    t.save(f.path()).unwrap();
    assert_eq!(CausalTable::load(f.path()).unwrap(), t);
}

#[test]
fn overlapping_table_is_rejected() {
    let e = |ev: &str, em: &str, c: Option<&str>| TableEntry {
        event: ev.into(),
        emotion: em.into(),
        condition: c.map(Into::into),
    };
    assert!(CausalTable::from_entries(&[e("ev0", "em0", None), e("ev0", "em0", Some("cond0"))]).is_err());
    assert!(CausalTable::from_entries(&[e("ev0", "em1", Some("ev0"))]).is_err());
}

#[test]
fn token_roles_are_disjoint() {
    let c = SynthConfig::default();
    let tokens = all_tokens(&c);
    assert_eq!(tokens.len(), c.vocab_size);
    let set: BTreeSet<&String> = tokens.iter().collect();
    assert_eq!(set.len(), tokens.len());
}

#[test]
fn embeddings_cover_vocabulary_in_range() {
    let c = SynthConfig::default();
    let e = synthetic_embeddings(&c, 6);
    assert_eq!(e.values.len(), c.vocab_size * 6);
    assert!(e.values.iter().all(|v| (-0.1..0.1).contains(v)));
    let f = tempfile::NamedTempFile::new().unwrap();
    e.save(f.path()).unwrap();
    assert_eq!(Embeddings::load(f.path()).unwrap(), e);
}

#[test]
fn oracle_matches_labels_on_generated_and_sampled_documents() {
    let (corpus, table) = generate_corpus(&cfg(400, 0.4, 0.2, 9)).unwrap();
    let sampled = build_dataset(&corpus, 2, &RngStream::new(9)).unwrap();
    for d in sampled.documents() {
        assert_eq!(oracle_label(d, &table).unwrap(), derive_targets(d), "{}", d.id);
    }
    assert_eq!(realized_counts(sampled.documents()), counts_from_n(corpus.counts(), 2));
}

#[test]
fn oracle_on_replace_modes() {
    let (corpus, table) = generate_corpus(&cfg(100, 0.5, 0.0, 10)).unwrap();
    let sampled = build_dataset(&corpus, 2, &RngStream::new(1)).unwrap();
    for d in sampled.documents() {
        let o = oracle_label(d, &table).unwrap();
        match d.origin {
            Origin::CtxNegReplacePr | Origin::EmoNeg => assert!(!o.y),
            Origin::CtxNegReplaceIr => {
                assert!(o.y);
                assert_eq!(o.mask, derive_targets(corpus.get(&d.source_id).unwrap()).mask);
            }
            Origin::CtxNegReplaceAll => assert!(o.y && o.y_o),
            Origin::Original => {}
        }
    }
}

#[test]
fn oracle_rejects_unknown_tokens() {
    let (corpus, table) = generate_corpus(&cfg(10, 0.0, 0.0, 0)).unwrap();
    let mut d = corpus.documents()[0].clone();
    d.clauses[d.cause[0]] = Clause::new(["w1"]);
    assert!(oracle_label(&d, &table).is_err());
}

#[test]
fn corpus_file_round_trip() {
    let (corpus, _) = generate_corpus(&cfg(50, 0.4, 0.2, 12)).unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    corpus.save(f.path()).unwrap();
    assert_eq!(load_corpus(f.path()).unwrap(), corpus);
}
