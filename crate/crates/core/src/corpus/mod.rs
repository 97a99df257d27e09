//! Documents, labels, and the line-delimited corpus file.

mod annotation;
mod document;
mod embedding;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotation::{
    aggregate_annotations, agreement_rate, load_judgments, majority_vote, save_judgments, AggregatedLabel,
    AnnotatorJudgment,
};
pub use document::{derive_targets, Clause, CondLabel, ContextType, Document, Origin, Targets};
pub use embedding::Embeddings;
pub use vocab::{Vocab, UNK};

/// Document counts by type: Not-causal (`y_c = 1`), Conditional (`y_c = 2`),
/// Others (`y_c = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeCounts {
    pub not_causal: usize,
    pub conditional: usize,
    pub others: usize,
}

impl TypeCounts {
    pub fn new(not_causal: usize, conditional: usize, others: usize) -> Self {
        Self {
            not_causal,
            conditional,
            others,
        }
    }

    pub fn of(docs: &[Document]) -> Self {
        let mut c = TypeCounts::default();
        for d in docs {
            match d.y_c {
                CondLabel::MissingCondition => c.not_causal += 1,
                CondLabel::ConditionPresent => c.conditional += 1,
                CondLabel::NonConditional => c.others += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.not_causal + self.conditional + self.others
    }
}

/// A validated document collection with its vocabulary and type counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab: Vocab,
    counts: TypeCounts,
}

impl Corpus {
    /// Validate every document, check id uniqueness, and build vocab and counts.
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for d in &documents {
            d.validate()?;
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Validation(format!("duplicate document id {}", d.id)));
            }
        }
        let vocab = Vocab::from_documents(&documents);
        let counts = TypeCounts::of(&documents);
        Ok(Self {
            documents,
            vocab,
            counts,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn counts(&self) -> TypeCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Largest context-clause count over the corpus (`L`).
    pub fn max_context(&self) -> usize {
        self.documents.iter().map(Document::num_context).max().unwrap_or(0)
    }

    /// Longest clause in tokens (`l`).
    pub fn max_clause_len(&self) -> usize {
        self.documents
            .iter()
            .flat_map(|d| d.clauses.iter().map(Clause::len))
            .max()
            .unwrap_or(0)
    }

    pub fn max_causes(&self) -> usize {
        self.documents.iter().map(|d| d.cause.len()).max().unwrap_or(0)
    }

    /// Subset by position, re-validated.
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        Corpus::new(indices.iter().map(|&i| self.documents[i].clone()).collect())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        write_jsonl(&self.documents)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Read and validate a corpus file.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let docs: Vec<Document> = read_jsonl(path)?;
    Corpus::new(docs)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.save(path)
}

/// One JSON object per line; blank lines are skipped.
pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub(crate) fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    fs::write(path, write_jsonl(items)?)?;
    Ok(())
}

/// One annotated emotion-cause pair inside a multi-pair record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub cause: Vec<usize>,
    pub emotion: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_tag: Option<String>,
}

/// A source document that may carry several pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub clauses: Vec<Clause>,
    pub pairs: Vec<PairAnnotation>,
}

pub fn load_raw_records(path: &Path) -> Result<Vec<RawRecord>> {
    read_jsonl(path)
}

/// Split each record into one document per pair.
///
/// Documents start unlabeled (`y_c = 0`, every context clause IR) until
/// annotations are aggregated. A single-pair record keeps its id; otherwise
/// ids are suffixed `-1`, `-2`, ... in pair order. Records with no pair are
/// skipped with a warning.
pub fn duplicate_per_pair(raw: &[RawRecord]) -> Vec<Document> {
    let mut out = Vec::new();
    for rec in raw {
        if rec.pairs.is_empty() {
            log::warn!("record {} has no emotion-cause pair; skipped", rec.id);
            continue;
        }
        let single = rec.pairs.len() == 1;
        for (k, pair) in rec.pairs.iter().enumerate() {
            let id = if single {
                rec.id.clone()
            } else {
                format!("{}-{}", rec.id, k + 1)
            };
            let n_ctx = (0..rec.clauses.len())
                .filter(|i| *i != pair.emotion && !pair.cause.contains(i))
                .count();
            out.push(Document {
                id,
                clauses: rec.clauses.clone(),
                cause: pair.cause.clone(),
                emotion: pair.emotion,
                y_c: CondLabel::NonConditional,
                ctx_type: vec![ContextType::IR; n_ctx],
                origin: Origin::Original,
                source_id: rec.id.clone(),
                emotion_tag: pair.emotion_tag.clone(),
            });
        }
    }
    out
}

/// Apply aggregated labels to a document.
pub fn apply_label(doc: &mut Document, label: &AggregatedLabel) -> Result<()> {
    if label.ctx_type.len() != doc.num_context() {
        return Err(Error::Aggregation(format!(
            "document {}: {} aggregated context types for {} context clauses",
            doc.id,
            label.ctx_type.len(),
            doc.num_context()
        )));
    }
    doc.y_c = label.y_c;
    doc.ctx_type = if label.y_c == CondLabel::MissingCondition {
        // missing condition: nothing in the document can be the condition
        vec![ContextType::IR; label.ctx_type.len()]
    } else {
        label.ctx_type.clone()
    };
    Ok(())
}
