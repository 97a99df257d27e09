//! End-to-end: generate, sample, persist, train, checkpoint, evaluate.

use condcause::corpus::{load_corpus, Embeddings};
use condcause::model::{load_checkpoint, save_checkpoint, ModelConfig};
use condcause::rng::RngStream;
use condcause::sampler::{build_dataset, counts_from_n, realized_counts};
use condcause::synth::{generate_corpus, synthetic_embeddings, CausalTable, SynthConfig};
use condcause::train::{evaluate, run_cv, TrainConfig};

#[test]
fn files_round_trip_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_docs: 40,
        seed: 9,
        ..SynthConfig::default()
    };
    let (corpus, table) = generate_corpus(&cfg).unwrap();
    let emb = synthetic_embeddings(&cfg, 8);

    let paths = (
        dir.path().join("c.jsonl"),
        dir.path().join("e.txt"),
        dir.path().join("t.json"),
    );
    corpus.save(&paths.0).unwrap();
    emb.save(&paths.1).unwrap();
    table.save(&paths.2).unwrap();
    assert_eq!(load_corpus(&paths.0).unwrap(), corpus);
    assert_eq!(Embeddings::load(&paths.1).unwrap(), emb);
    assert_eq!(CausalTable::load(&paths.2).unwrap(), table);

    let sampled = build_dataset(&corpus, 2, &RngStream::new(9)).unwrap();
    assert_eq!(realized_counts(sampled.documents()), counts_from_n(corpus.counts(), 2));

    let mc = ModelConfig {
        embed_dim: 8,
        hidden: 6,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        folds: 2,
        batch: 32,
        ..TrainConfig::default()
    };
    let (report, models) = run_cv(&sampled, &mc, &tc, Some(&emb)).unwrap();
    assert_eq!(report.runs[0].folds.len(), 2);

    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&models[0], &ckpt).unwrap();
    let back = load_checkpoint(&ckpt).unwrap();
    let docs = sampled.documents();
    assert_eq!(
        evaluate(&back, docs, 64).unwrap(),
        evaluate(&models[0], docs, 64).unwrap()
    );
}
