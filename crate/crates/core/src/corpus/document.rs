use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered tokens of one clause.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Clause(pub Vec<String>);

impl Clause {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Clause(tokens.into_iter().map(Into::into).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.iter().any(|t| t == token)
    }
}

/// Role of a context clause with respect to the document's pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextType {
    /// Irrelevant to the causal relationship.
    IR,
    /// Directly related to the pair; the condition when the pair is conditional.
    PR,
}

/// Three-valued document label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CondLabel {
    /// Non-conditional pair ("Others").
    NonConditional = 0,
    /// Conditional pair whose condition is missing ("Not-causal").
    MissingCondition = 1,
    /// Conditional pair with its condition present ("Conditional").
    ConditionPresent = 2,
}

impl CondLabel {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for CondLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(CondLabel::NonConditional),
            1 => Ok(CondLabel::MissingCondition),
            2 => Ok(CondLabel::ConditionPresent),
            other => Err(format!("y_c must be 0, 1 or 2, got {other}")),
        }
    }
}

impl From<CondLabel> for u8 {
    fn from(v: CondLabel) -> u8 {
        v as u8
    }
}

impl fmt::Display for CondLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// How a document came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    CtxNegReplacePr,
    CtxNegReplaceIr,
    CtxNegReplaceAll,
    EmoNeg,
}

/// One document holding exactly one emotion-cause pair.
///
/// Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub clauses: Vec<Clause>,
    pub cause: Vec<usize>,
    pub emotion: usize,
    pub y_c: CondLabel,
    /// One entry per context clause, in document order.
    pub ctx_type: Vec<ContextType>,
    pub origin: Origin,
    pub source_id: String,
    /// Emotion category of the emotion clause, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_tag: Option<String>,
}

impl Document {
    pub fn is_context(&self, idx: usize) -> bool {
        idx != self.emotion && !self.cause.contains(&idx)
    }

    /// Indices of context clauses in document order.
    pub fn context_indices(&self) -> Vec<usize> {
        (0..self.clauses.len()).filter(|&i| self.is_context(i)).collect()
    }

    pub fn context_clauses(&self) -> impl Iterator<Item = &Clause> {
        self.clauses
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_context(*i))
            .map(|(_, c)| c)
    }

    pub fn num_context(&self) -> usize {
        self.clauses.len() - self.cause.len() - 1
    }

    pub fn has_pr(&self) -> bool {
        self.ctx_type.contains(&ContextType::PR)
    }

    pub fn emotion_clause(&self) -> &Clause {
        &self.clauses[self.emotion]
    }

    /// Emotion category used for emotion-type sampling: the annotated tag, or
    /// the emotion clause text when no tag is present.
    pub fn emotion_category(&self) -> String {
        self.emotion_tag
            .clone()
            .unwrap_or_else(|| self.emotion_clause().tokens().join(" "))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("document {}: {msg}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Validation("document with empty id".into()));
        }
        if self.clauses.is_empty() {
            return fail("no clauses".into());
        }
        if let Some(i) = self.clauses.iter().position(Clause::is_empty) {
            return fail(format!("clause {i} is empty"));
        }
        let n = self.clauses.len();
        if self.emotion >= n {
            return fail(format!("emotion index {} out of range ({n} clauses)", self.emotion));
        }
        if self.cause.is_empty() {
            return fail("no cause clause".into());
        }
        for (k, &c) in self.cause.iter().enumerate() {
            if c >= n {
                return fail(format!("cause index {c} out of range ({n} clauses)"));
            }
            if self.cause[..k].contains(&c) {
                return fail(format!("cause index {c} repeated"));
            }
        }
        if self.cause.contains(&self.emotion) {
            return fail(format!("emotion index {} is also a cause", self.emotion));
        }
        if self.ctx_type.len() != self.num_context() {
            return fail(format!(
                "{} context types for {} context clauses",
                self.ctx_type.len(),
                self.num_context()
            ));
        }
        if self.y_c == CondLabel::MissingCondition && self.has_pr() {
            return fail("y_c = 1 but a context clause is typed PR".into());
        }
        Ok(())
    }
}

/// Training targets derived from a document's labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    /// Causal relationship holds under the given context.
    pub y: bool,
    /// Causal relationship holds without any context (non-conditional pair).
    pub y_o: bool,
    /// PR membership per context clause, at true length.
    pub mask: Vec<bool>,
}

impl Targets {
    pub fn has_pr(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

/// `y = 1` iff `y_c ∈ {0, 2}`; `y_o = 1` iff `y_c = 0`; mask marks PR clauses.
pub fn derive_targets(doc: &Document) -> Targets {
    Targets {
        y: matches!(doc.y_c, CondLabel::NonConditional | CondLabel::ConditionPresent),
        y_o: doc.y_c == CondLabel::NonConditional,
        mask: doc.ctx_type.iter().map(|t| *t == ContextType::PR).collect(),
    }
}
