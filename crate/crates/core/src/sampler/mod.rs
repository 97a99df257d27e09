//! Negative sampling and the balance arithmetic that sizes it.
//!
//! Context-type samples swap context clauses for clauses borrowed from other
//! documents; emotion-type samples swap the emotion clause for one carrying a
//! different emotion category. Donor clauses never come from a document that
//! shares the source record of the document being rewritten.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_targets, Clause, CondLabel, ContextType, Corpus, Document, Origin, TypeCounts};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Positive/negative document totals for a given `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub n: usize,
    pub n_pos: u64,
    pub n_neg: u64,
    /// `n_pos / n_neg`; infinite when there are no negatives.
    pub ratio: f64,
}

impl SamplePlan {
    pub fn new(counts: TypeCounts, n: usize) -> Self {
        let (n_pos, n_neg) = counts_from_n(counts, n);
        let ratio = if n_neg == 0 {
            f64::INFINITY
        } else {
            n_pos as f64 / n_neg as f64
        };
        Self { n, n_pos, n_neg, ratio }
    }
}

/// Expected positive and negative totals after sampling with `n`.
///
/// ```text
/// N_V   = N_Con + N_O
/// N_pos = N_V + N_Con·(n − ⌊n/2⌋) + N_O·n
/// N_neg = N_Nc + N_V·n + N_Con·(n + ⌊n/2⌋)
/// ```
pub fn counts_from_n(counts: TypeCounts, n: usize) -> (u64, u64) {
    let (nc, con, o, n) = (
        counts.not_causal as u64,
        counts.conditional as u64,
        counts.others as u64,
        n as u64,
    );
    let half = n / 2;
    let v = con + o;
    let pos = v + con * (n - half) + o * n;
    let neg = nc + v * n + con * (n + half);
    (pos, neg)
}

/// The balance condition `N_V − N_Nc = N_Con·n + 2·N_Con·⌊n/2⌋`, evaluated
/// exactly in signed arithmetic.
pub fn balance_holds(counts: TypeCounts, n: usize) -> bool {
    let (nc, con, o, n) = (
        counts.not_causal as i128,
        counts.conditional as i128,
        counts.others as i128,
        n as i128,
    );
    (con + o) - nc == con * n + 2 * con * (n / 2)
}

/// The `n ∈ [1, n_max]` whose plan ratio is closest to 1; ties go to the
/// smaller `n`. Advisory only.
pub fn solve_n(counts: TypeCounts, n_max: usize) -> Result<usize> {
    if counts.conditional == 0 {
        return Err(Error::Sampling(
            "solve_n needs at least one conditional document".into(),
        ));
    }
    if n_max == 0 {
        return Err(Error::Sampling("solve_n needs n_max >= 1".into()));
    }
    let mut best = 1;
    let mut best_dev = f64::INFINITY;
    for n in 1..=n_max {
        let dev = (SamplePlan::new(counts, n).ratio - 1.0).abs();
        if dev < best_dev {
            best = n;
            best_dev = dev;
        }
    }
    Ok(best)
}

/// Which context clauses a context-type sample replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    /// PR clauses of a conditional document; the result has no causal relation.
    ReplacePr,
    /// IR clauses of a conditional document; the result keeps its relation.
    ReplaceIr,
    /// The whole context of a non-conditional document.
    ReplaceAll,
}

impl ReplaceMode {
    fn origin(self) -> Origin {
        match self {
            ReplaceMode::ReplacePr => Origin::CtxNegReplacePr,
            ReplaceMode::ReplaceIr => Origin::CtxNegReplaceIr,
            ReplaceMode::ReplaceAll => Origin::CtxNegReplaceAll,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ReplaceMode::ReplacePr => "pr",
            ReplaceMode::ReplaceIr => "ir",
            ReplaceMode::ReplaceAll => "all",
        }
    }
}

struct EmotionDonor {
    source: String,
    category: String,
    clause: Clause,
    tag: Option<String>,
}

/// Clauses that may be transplanted into sampled documents.
///
/// Context donors are the IR-typed context clauses of every document; PR
/// clauses are left out so a condition is never carried into a document by
/// accident.
pub struct DonorPool {
    context: Vec<(String, Clause)>,
    context_per_source: HashMap<String, usize>,
    emotion: Vec<EmotionDonor>,
}

const REJECTION_TRIES: usize = 64;

impl DonorPool {
    pub fn new(docs: &[Document]) -> Self {
        let mut context = Vec::new();
        let mut context_per_source: HashMap<String, usize> = HashMap::new();
        let mut emotion = Vec::with_capacity(docs.len());
        for d in docs {
            for (clause, ty) in d.context_clauses().zip(&d.ctx_type) {
                if *ty == ContextType::IR {
                    context.push((d.source_id.clone(), clause.clone()));
                    *context_per_source.entry(d.source_id.clone()).or_default() += 1;
                }
            }
            emotion.push(EmotionDonor {
                source: d.source_id.clone(),
                category: d.emotion_category(),
                clause: d.emotion_clause().clone(),
                tag: d.emotion_tag.clone(),
            });
        }
        Self {
            context,
            context_per_source,
            emotion,
        }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::new(corpus.documents())
    }

    pub fn num_context(&self) -> usize {
        self.context.len()
    }

    fn context_clause(&self, source: &str, rng: &mut RngStream) -> Result<Clause> {
        let own = self.context_per_source.get(source).copied().unwrap_or(0);
        if own == self.context.len() {
            return Err(Error::Sampling(format!("no context donor outside source {source}")));
        }
        loop {
            let (s, c) = &self.context[rng.index(self.context.len())];
            if s != source {
                return Ok(c.clone());
            }
        }
    }

    fn emotion_donor(&self, source: &str, category: &str, rng: &mut RngStream) -> Result<&EmotionDonor> {
        let ok = |d: &EmotionDonor| d.source != source && d.category != category;
        if self.emotion.is_empty() {
            return Err(Error::Sampling("empty emotion donor pool".into()));
        }
        for _ in 0..REJECTION_TRIES {
            let d = &self.emotion[rng.index(self.emotion.len())];
            if ok(d) {
                return Ok(d);
            }
        }
        // Rare categories: fall back to an explicit scan.
        let eligible: Vec<&EmotionDonor> = self.emotion.iter().filter(|d| ok(d)).collect();
        if eligible.is_empty() {
            return Err(Error::Sampling(format!(
                "no emotion donor with a category other than {category:?} outside source {source}"
            )));
        }
        Ok(eligible[rng.index(eligible.len())])
    }
}

/// Build a context-type sample from `doc`.
pub fn make_context_negative(
    doc: &Document,
    donors: &DonorPool,
    mode: ReplaceMode,
    index: usize,
    rng: &mut RngStream,
) -> Result<Document> {
    let expected = match mode {
        ReplaceMode::ReplacePr | ReplaceMode::ReplaceIr => CondLabel::ConditionPresent,
        ReplaceMode::ReplaceAll => CondLabel::NonConditional,
    };
    if doc.y_c != expected {
        return Err(Error::Sampling(format!(
            "{mode:?} needs y_c = {expected}, document {} has y_c = {}",
            doc.id, doc.y_c
        )));
    }
    let mut out = doc.clone();
    for (slot, idx) in doc.context_indices().into_iter().enumerate() {
        let replace = match mode {
            ReplaceMode::ReplacePr => doc.ctx_type[slot] == ContextType::PR,
            ReplaceMode::ReplaceIr => doc.ctx_type[slot] == ContextType::IR,
            ReplaceMode::ReplaceAll => true,
        };
        if replace {
            out.clauses[idx] = donors.context_clause(&doc.source_id, rng)?;
        }
    }
    match mode {
        ReplaceMode::ReplacePr => {
            out.y_c = CondLabel::MissingCondition;
            out.ctx_type.fill(ContextType::IR);
        }
        ReplaceMode::ReplaceIr => {}
        ReplaceMode::ReplaceAll => out.ctx_type.fill(ContextType::IR),
    }
    out.id = format!("{}#{}{}", doc.id, mode.tag(), index);
    out.origin = mode.origin();
    out.source_id = doc.id.clone();
    Ok(out)
}

/// Build an emotion-type sample from `doc`: the emotion clause is swapped for
/// one of a different category, leaving a pair with no causal relation.
pub fn make_emotion_negative(
    doc: &Document,
    donors: &DonorPool,
    index: usize,
    rng: &mut RngStream,
) -> Result<Document> {
    if doc.y_c == CondLabel::MissingCondition {
        return Err(Error::Sampling(format!(
            "emotion-type sample from Not-causal document {}",
            doc.id
        )));
    }
    let donor = donors.emotion_donor(&doc.source_id, &doc.emotion_category(), rng)?;
    let mut out = doc.clone();
    out.clauses[doc.emotion] = donor.clause.clone();
    out.emotion_tag = donor.tag.clone();
    out.y_c = CondLabel::MissingCondition;
    out.ctx_type.fill(ContextType::IR);
    out.id = format!("{}#emo{}", doc.id, index);
    out.origin = Origin::EmoNeg;
    out.source_id = doc.id.clone();
    Ok(out)
}

/// Samples generated for one document, in output order.
fn samples_for(doc: &Document, donors: &DonorPool, n: usize, rng: &mut RngStream) -> Result<Vec<Document>> {
    let half = n / 2;
    let mut out = Vec::new();
    match doc.y_c {
        CondLabel::MissingCondition => return Ok(out),
        CondLabel::ConditionPresent => {
            for k in 0..n - half {
                out.push(make_context_negative(doc, donors, ReplaceMode::ReplaceIr, k, rng)?);
            }
            for k in 0..n + half {
                out.push(make_context_negative(doc, donors, ReplaceMode::ReplacePr, k, rng)?);
            }
        }
        CondLabel::NonConditional => {
            for k in 0..n {
                out.push(make_context_negative(doc, donors, ReplaceMode::ReplaceAll, k, rng)?);
            }
        }
    }
    for k in 0..n {
        out.push(make_emotion_negative(doc, donors, k, rng)?);
    }
    Ok(out)
}

/// Originals plus all generated samples. Each original is followed by its
/// samples; document `i` draws from `rng.child("sample", i)`.
pub fn build_dataset(corpus: &Corpus, n: usize, rng: &RngStream) -> Result<Corpus> {
    let donors = DonorPool::from_corpus(corpus);
    let mut docs = Vec::with_capacity(corpus.len() * (1 + 3 * n));
    for (i, doc) in corpus.documents().iter().enumerate() {
        docs.push(doc.clone());
        let mut stream = rng.child("sample", i as u64);
        docs.extend(samples_for(doc, &donors, n, &mut stream)?);
    }
    Corpus::new(docs)
}

/// Realized positive (`y = 1`) and negative totals.
pub fn realized_counts(docs: &[Document]) -> (u64, u64) {
    let pos = docs.iter().filter(|d| derive_targets(d).y).count() as u64;
    (pos, docs.len() as u64 - pos)
}

/// Type counts of the annotated corpus the sampling scheme was designed on.
pub const REFERENCE_COUNTS: TypeCounts = TypeCounts {
    not_causal: 146,
    conditional: 763,
    others: 1176,
};

/// `(n, N_pos, N_neg)` totals published for [`REFERENCE_COUNTS`]. They do
/// not follow from the count formula.
pub const PUBLISHED_TOTALS: [(usize, u64, u64); 2] = [(2, 5554, 5415), (3, 7743, 7668)];

/// A warning when `counts` and `n` have published totals that disagree with
/// [`counts_from_n`].
pub fn published_totals_note(counts: TypeCounts, n: usize) -> Option<String> {
    if counts != REFERENCE_COUNTS {
        return None;
    }
    let (_, pos, neg) = PUBLISHED_TOTALS.iter().copied().find(|t| t.0 == n)?;
    let (fp, fneg) = counts_from_n(counts, n);
    ((fp, fneg) != (pos, neg)).then(|| {
        format!(
            "published totals for these counts at n={n} are {pos} positive / {neg} negative; the count formula gives {fp} / {fneg}"
        )
    })
}

#[cfg(test)]
mod tests;
