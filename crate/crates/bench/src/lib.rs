//! Shared fixtures for the benchmarks.

use condcause::corpus::{Corpus, Document};
use condcause::model::{Model, ModelConfig};
use condcause::rng::RngStream;
use condcause::sampler::build_dataset;
use condcause::synth::{generate_corpus, SynthConfig};

/// A sampled synthetic corpus of roughly `6 * n_docs` documents.
pub fn sampled_corpus(n_docs: usize, seed: u64) -> Corpus {
    let cfg = SynthConfig {
        n_docs,
        seed,
        fraction_missing_condition: 0.0,
        ..SynthConfig::default()
    };
    let (corpus, _) = generate_corpus(&cfg).expect("valid synth config");
    build_dataset(&corpus, 2, &RngStream::new(seed)).expect("sampling succeeds")
}

pub fn model_for(corpus: &Corpus, cfg: ModelConfig) -> Model {
    let cfg = ModelConfig {
        max_context: corpus.max_context(),
        clause_len: corpus.max_clause_len(),
        max_causes: corpus.max_causes(),
        ..cfg
    };
    Model::new(cfg, corpus.vocab().clone(), None, &mut RngStream::new(0)).expect("valid model config")
}

pub fn batch(corpus: &Corpus, n: usize) -> Vec<Document> {
    corpus.documents().iter().take(n).cloned().collect()
}
