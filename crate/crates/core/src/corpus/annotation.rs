//! Aggregation of three annotators' judgments into final labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, save_jsonl, CondLabel, ContextType};
use crate::error::{Error, Result};

/// One annotator's labels for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorJudgment {
    pub doc_id: String,
    /// Pair is conditional.
    pub y_ce: u8,
    /// Condition present in the document; only given when `y_ce = 1`.
    pub y_cv: Option<u8>,
    pub ctx_type: Vec<ContextType>,
}

impl AnnotatorJudgment {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("judgment for {}: {m}", self.doc_id)));
        if self.y_ce > 1 {
            return bad(format!("y_ce = {} is not binary", self.y_ce));
        }
        match (self.y_ce, self.y_cv) {
            (1, None) => bad("y_cv missing although y_ce = 1".into()),
            (0, Some(_)) => bad("y_cv given although y_ce = 0".into()),
            (_, Some(v)) if v > 1 => bad(format!("y_cv = {v} is not binary")),
            _ => Ok(()),
        }
    }
}

pub fn load_judgments(path: &Path) -> Result<Vec<AnnotatorJudgment>> {
    let items: Vec<AnnotatorJudgment> = read_jsonl(path)?;
    for j in &items {
        j.validate()?;
    }
    Ok(items)
}

pub fn save_judgments(items: &[AnnotatorJudgment], path: &Path) -> Result<()> {
    save_jsonl(items, path)
}

/// The label held by at least two of three voters.
pub fn majority_vote(votes: [bool; 3]) -> bool {
    votes.iter().filter(|&&v| v).count() >= 2
}

fn majority_type(votes: [ContextType; 3]) -> ContextType {
    if majority_vote(votes.map(|t| t == ContextType::PR)) {
        ContextType::PR
    } else {
        ContextType::IR
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedLabel {
    pub y_c: CondLabel,
    pub ctx_type: Vec<ContextType>,
}

/// Majority-vote `y_ce` and `y_cv` separately, then `y_c = y_ce + y_ce * y_cv`.
///
/// An absent `y_cv` (annotator judged the pair non-conditional) counts as a
/// vote for 0. Each context clause takes its majority type.
pub fn aggregate_annotations(judgments: &[AnnotatorJudgment; 3]) -> Result<AggregatedLabel> {
    let id = &judgments[0].doc_id;
    for j in judgments {
        j.validate()?;
        if &j.doc_id != id {
            return Err(Error::Aggregation(format!(
                "judgments for different documents: {id} and {}",
                j.doc_id
            )));
        }
        if j.ctx_type.len() != judgments[0].ctx_type.len() {
            return Err(Error::Aggregation(format!(
                "document {id}: annotators disagree on the context clause count"
            )));
        }
    }
    let y_ce = u8::from(majority_vote(judgments.each_ref().map(|j| j.y_ce == 1)));
    let y_cv = u8::from(majority_vote(judgments.each_ref().map(|j| j.y_cv == Some(1))));
    let y_c = CondLabel::try_from(y_ce + y_ce * y_cv).map_err(Error::Aggregation)?;
    let ctx_type = (0..judgments[0].ctx_type.len())
        .map(|k| majority_type(judgments.each_ref().map(|j| j.ctx_type[k])))
        .collect();
    Ok(AggregatedLabel { y_c, ctx_type })
}

/// Mean over items of the fraction of the three annotator pairs that agree.
pub fn agreement_rate<T: PartialEq>(triples: &[[T; 3]]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Empty("agreement rate over no items"));
    }
    let total: f64 = triples
        .iter()
        .map(|[a, b, c]| {
            let agree = usize::from(a == b) + usize::from(a == c) + usize::from(b == c);
            agree as f64 / 3.0
        })
        .sum();
    Ok(total / triples.len() as f64)
}
