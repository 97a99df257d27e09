//! Synthetic corpora with planted conditional causal structure.
//!
//! Tokens come in disjoint roles: events (`ev*`), emotions (`em*`),
//! conditions (`cond*`) and filler (`w*`). Emotions split into two polarity
//! groups. Every plain event forms a non-conditional pair with every emotion
//! of the first group; conditional event `j` forms a conditional pair with
//! every emotion of the second group, valid only when `cond{j}` appears in the
//! context. Labels are therefore a deterministic function of token content.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    read_jsonl, save_jsonl, Clause, CondLabel, ContextType, Corpus, Document, Embeddings, Origin, Targets,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const POSITIVE_GROUP: &str = "pos";
pub const NEGATIVE_GROUP: &str = "neg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total token count over all roles.
    pub vocab_size: usize,
    pub n_docs: usize,
    /// Maximum clause length `l`.
    pub clause_len: usize,
    /// Maximum context-clause count `L`.
    pub max_context: usize,
    pub fraction_conditional: f64,
    /// Share of conditional documents whose condition is left out.
    pub fraction_missing_condition: f64,
    pub seed: u64,
    /// Events forming non-conditional pairs.
    pub n_events: usize,
    /// Events forming conditional pairs, one condition token each.
    pub n_cond_events: usize,
    /// Emotion tokens per polarity group.
    pub n_emotions: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 400,
            n_docs: 1000,
            clause_len: 5,
            max_context: 4,
            fraction_conditional: 0.4,
            fraction_missing_condition: 0.2,
            seed: 0,
            n_events: 20,
            n_cond_events: 20,
            n_emotions: 4,
        }
    }
}

impl SynthConfig {
    fn role_tokens(&self) -> usize {
        self.n_events + 2 * self.n_cond_events + 2 * self.n_emotions
    }

    fn n_filler(&self) -> usize {
        self.vocab_size.saturating_sub(self.role_tokens())
    }

    /// Document totals by label: (y_c = 0, y_c = 1, y_c = 2).
    pub fn label_counts(&self) -> (usize, usize, usize) {
        let conditional = (self.fraction_conditional * self.n_docs as f64).round() as usize;
        let missing = (self.fraction_missing_condition * conditional as f64).round() as usize;
        (self.n_docs - conditional, missing, conditional - missing)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, f) in [
            ("fraction_conditional", self.fraction_conditional),
            ("fraction_missing_condition", self.fraction_missing_condition),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.clause_len == 0 {
            return bad("clause_len must be positive".into());
        }
        if self.n_emotions == 0 {
            return bad("n_emotions must be positive".into());
        }
        if self.n_filler() == 0 {
            return bad(format!(
                "vocab_size {} cannot host {} role tokens plus filler",
                self.vocab_size,
                self.role_tokens()
            ));
        }
        let (others, missing, present) = self.label_counts();
        if others > 0 && self.n_events == 0 {
            return bad("non-conditional documents need n_events > 0".into());
        }
        if self.fraction_conditional > 0.0 && missing + present == 0 {
            return bad("fraction_conditional * n_docs rounds to zero documents".into());
        }
        if missing + present > 0 && self.n_cond_events == 0 {
            return bad("conditional documents need n_cond_events > 0".into());
        }
        if present > 0 && self.max_context == 0 {
            return bad("documents with a condition need max_context >= 1".into());
        }
        Ok(())
    }
}

pub fn event_token(i: usize) -> String {
    format!("ev{i}")
}

pub fn emotion_token(i: usize) -> String {
    format!("em{i}")
}

pub fn condition_token(i: usize) -> String {
    format!("cond{i}")
}

pub fn filler_token(i: usize) -> String {
    format!("w{i}")
}

/// Every token of the synthetic vocabulary, in role order.
pub fn all_tokens(cfg: &SynthConfig) -> Vec<String> {
    let mut t: Vec<String> = (0..cfg.n_events + cfg.n_cond_events).map(event_token).collect();
    t.extend((0..2 * cfg.n_emotions).map(emotion_token));
    t.extend((0..cfg.n_cond_events).map(condition_token));
    t.extend((0..cfg.n_filler()).map(filler_token));
    t
}

/// One line of the causal-table sidecar file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub event: String,
    pub emotion: String,
    /// Present for conditional pairs.
    pub condition: Option<String>,
}

/// Ground truth for synthetic documents.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CausalTable {
    pub pairs: BTreeSet<(String, String)>,
    /// `(event, emotion) -> condition`.
    pub conditional_pairs: BTreeMap<(String, String), String>,
    /// Emotion token -> polarity group.
    pub emotion_groups: BTreeMap<String, String>,
    events: BTreeSet<String>,
}

impl CausalTable {
    pub fn for_config(cfg: &SynthConfig) -> Self {
        let mut t = CausalTable::default();
        for k in 0..2 * cfg.n_emotions {
            let group = if k < cfg.n_emotions {
                POSITIVE_GROUP
            } else {
                NEGATIVE_GROUP
            };
            t.emotion_groups.insert(emotion_token(k), group.to_string());
        }
        for ev in 0..cfg.n_events {
            for em in 0..cfg.n_emotions {
                t.add_pair(event_token(ev), emotion_token(em));
            }
        }
        for j in 0..cfg.n_cond_events {
            for em in cfg.n_emotions..2 * cfg.n_emotions {
                t.add_conditional(event_token(cfg.n_events + j), emotion_token(em), condition_token(j));
            }
        }
        t
    }

    pub fn add_pair(&mut self, event: String, emotion: String) {
        self.events.insert(event.clone());
        self.pairs.insert((event, emotion));
    }

    pub fn add_conditional(&mut self, event: String, emotion: String, condition: String) {
        self.events.insert(event.clone());
        self.conditional_pairs.insert((event, emotion), condition);
    }

    pub fn is_event(&self, token: &str) -> bool {
        self.events.contains(token)
    }

    pub fn is_emotion(&self, token: &str) -> bool {
        self.emotion_groups.contains_key(token)
    }

    pub fn entries(&self) -> Vec<TableEntry> {
        let mut out: Vec<TableEntry> = self
            .pairs
            .iter()
            .map(|(ev, em)| TableEntry {
                event: ev.clone(),
                emotion: em.clone(),
                condition: None,
            })
            .collect();
        out.extend(self.conditional_pairs.iter().map(|((ev, em), c)| TableEntry {
            event: ev.clone(),
            emotion: em.clone(),
            condition: Some(c.clone()),
        }));
        out
    }

    /// Rebuild from sidecar entries. Emotion groups follow the entry kind:
    /// emotions of plain pairs are positive, of conditional pairs negative.
    pub fn from_entries(entries: &[TableEntry]) -> Result<Self> {
        let mut t = CausalTable::default();
        for e in entries {
            let group = if e.condition.is_some() {
                NEGATIVE_GROUP
            } else {
                POSITIVE_GROUP
            };
            if let Some(g) = t.emotion_groups.get(&e.emotion) {
                if g != group {
                    return Err(Error::Validation(format!(
                        "emotion {} appears in both plain and conditional pairs",
                        e.emotion
                    )));
                }
            }
            t.emotion_groups.insert(e.emotion.clone(), group.to_string());
            match &e.condition {
                None => t.add_pair(e.event.clone(), e.emotion.clone()),
                Some(c) => t.add_conditional(e.event.clone(), e.emotion.clone(), c.clone()),
            }
        }
        t.check()?;
        Ok(t)
    }

    /// Pairs and conditional pairs are disjoint; conditions are never events
    /// or emotions.
    pub fn check(&self) -> Result<()> {
        if let Some(k) = self.conditional_pairs.keys().find(|k| self.pairs.contains(*k)) {
            return Err(Error::Validation(format!(
                "pair ({}, {}) is both plain and conditional",
                k.0, k.1
            )));
        }
        for c in self.conditional_pairs.values() {
            if self.is_event(c) || self.is_emotion(c) {
                return Err(Error::Validation(format!(
                    "condition token {c} also used as event or emotion"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_jsonl(&self.entries(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&read_jsonl::<TableEntry>(path)?)
    }
}

/// Random clause of `len` filler tokens with `role` (if any) at a random slot.
fn clause(cfg: &SynthConfig, rng: &mut RngStream, role: Option<&str>) -> Clause {
    let len = 1 + rng.index(cfg.clause_len);
    let mut tokens: Vec<String> = (0..len).map(|_| filler_token(rng.index(cfg.n_filler()))).collect();
    if let Some(r) = role {
        tokens[rng.index(len)] = r.to_string();
    }
    Clause(tokens)
}

fn generate_document(cfg: &SynthConfig, y_c: CondLabel, index: usize, rng: &mut RngStream) -> Document {
    let (event, emotion, condition) = match y_c {
        CondLabel::NonConditional => (event_token(rng.index(cfg.n_events)), rng.index(cfg.n_emotions), None),
        _ => {
            let j = rng.index(cfg.n_cond_events);
            (
                event_token(cfg.n_events + j),
                cfg.n_emotions + rng.index(cfg.n_emotions),
                Some(condition_token(j)),
            )
        }
    };
    let n_ctx = if cfg.max_context == 0 {
        0
    } else {
        1 + rng.index(cfg.max_context)
    };
    let mut types = vec![ContextType::IR; n_ctx];
    if y_c == CondLabel::ConditionPresent {
        let n_pr = (1 + rng.index(2)).min(n_ctx);
        let mut slots: Vec<usize> = (0..n_ctx).collect();
        rng.shuffle(&mut slots);
        for &s in &slots[..n_pr] {
            types[s] = ContextType::PR;
        }
    }

    // Clause order: random positions for cause and emotion, context fills the rest.
    let total = n_ctx + 2;
    let mut positions: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut positions);
    let (cause_pos, emotion_pos) = (positions[0], positions[1]);

    let mut clauses = Vec::with_capacity(total);
    let mut ctx_slot = 0;
    for p in 0..total {
        let c = if p == cause_pos {
            clause(cfg, rng, Some(&event))
        } else if p == emotion_pos {
            clause(cfg, rng, Some(&emotion_token(emotion)))
        } else {
            let pr = types[ctx_slot] == ContextType::PR;
            ctx_slot += 1;
            clause(cfg, rng, if pr { condition.as_deref() } else { None })
        };
        clauses.push(c);
    }
    let id = format!("d{index:05}");
    Document {
        id: id.clone(),
        clauses,
        cause: vec![cause_pos],
        emotion: emotion_pos,
        y_c,
        ctx_type: types,
        origin: Origin::Original,
        source_id: id,
        emotion_tag: Some(
            if emotion < cfg.n_emotions {
                POSITIVE_GROUP
            } else {
                NEGATIVE_GROUP
            }
            .to_string(),
        ),
    }
}

/// Generate a corpus and its causal table.
///
/// Label totals are fixed up front from the configured fractions, assigned to
/// positions by a seeded shuffle; document `i` then draws from
/// `child("doc", i)`.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<(Corpus, CausalTable)> {
    cfg.validate()?;
    let (others, missing, present) = cfg.label_counts();
    let mut labels = Vec::with_capacity(cfg.n_docs);
    labels.extend(std::iter::repeat_n(CondLabel::NonConditional, others));
    labels.extend(std::iter::repeat_n(CondLabel::MissingCondition, missing));
    labels.extend(std::iter::repeat_n(CondLabel::ConditionPresent, present));
    let root = RngStream::new(cfg.seed);
    root.child("labels", 0).shuffle(&mut labels);

    let docs = labels
        .iter()
        .enumerate()
        .map(|(i, &y_c)| generate_document(cfg, y_c, i, &mut root.child("doc", i as u64)))
        .collect();
    Ok((Corpus::new(docs)?, CausalTable::for_config(cfg)))
}

/// Seeded uniform vectors in `[-0.1, 0.1)` for every synthetic token.
pub fn synthetic_embeddings(cfg: &SynthConfig, dim: usize) -> Embeddings {
    let tokens = all_tokens(cfg);
    let mut rng = RngStream::new(cfg.seed).child("embeddings", 0);
    let values = (0..tokens.len() * dim).map(|_| rng.uniform(-0.1, 0.1)).collect();
    Embeddings { tokens, dim, values }
}

fn find_role<'a>(clauses: impl Iterator<Item = &'a Clause>, pred: impl Fn(&str) -> bool) -> Option<&'a str> {
    clauses
        .flat_map(|c| c.tokens().iter())
        .map(String::as_str)
        .find(|t| pred(t))
}

/// Recompute targets from token content alone.
pub fn oracle_label(doc: &Document, table: &CausalTable) -> Result<Targets> {
    let event = find_role(doc.cause.iter().map(|&i| &doc.clauses[i]), |t| table.is_event(t))
        .ok_or_else(|| Error::Validation(format!("document {}: no known event in cause", doc.id)))?;
    let emotion = find_role(std::iter::once(doc.emotion_clause()), |t| table.is_emotion(t))
        .ok_or_else(|| Error::Validation(format!("document {}: no known emotion token", doc.id)))?;
    let key = (event.to_string(), emotion.to_string());
    let n_ctx = doc.num_context();
    if table.pairs.contains(&key) {
        return Ok(Targets {
            y: true,
            y_o: true,
            mask: vec![false; n_ctx],
        });
    }
    let Some(cond) = table.conditional_pairs.get(&key) else {
        return Ok(Targets {
            y: false,
            y_o: false,
            mask: vec![false; n_ctx],
        });
    };
    let mask: Vec<bool> = doc.context_clauses().map(|c| c.contains(cond)).collect();
    Ok(Targets {
        y: mask.iter().any(|&m| m),
        y_o: false,
        mask,
    })
}

#[cfg(test)]
mod tests;
