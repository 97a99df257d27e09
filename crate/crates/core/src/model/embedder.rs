//! Clause embedders: token ids in, one vector per clause out.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndiff::{Graph, NodeId, ParamId, ParamStore};
use crate::rng::RngStream;

use super::lstm::LstmParams;

/// Maps a batch of clauses (token id lists) to an `N x dim` matrix, one row
/// per clause in input order.
pub trait ClauseEmbedder: Send + Sync {
    /// Width of a clause vector.
    fn dim(&self) -> usize;

    /// Identifier written into checkpoints.
    fn kind(&self) -> &'static str;

    fn embed(&self, g: &mut Graph, store: &ParamStore, clauses: &[Vec<usize>]) -> Result<NodeId>;
}

/// Word-level BiLSTM over embedding rows, pooled by a learned attention
/// vector `W_cls`:
///
/// ```text
/// alpha_j = exp(W_cls v_j) / sum_k exp(W_cls v_k)
/// s       = sum_j alpha_j v_j
/// ```
#[derive(Debug, Clone)]
pub struct WordBiLstm {
    pub embedding: ParamId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub w_cls: ParamId,
    hidden: usize,
}

impl WordBiLstm {
    pub const KIND: &'static str = "word-bilstm";

    /// Registers `word_fwd.*`, `word_bwd.*` and `w_cls`. The embedding table
    /// must already be in the store.
    pub fn new(
        store: &mut ParamStore,
        embedding: ParamId,
        hidden: usize,
        init: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = store.get(embedding).value.cols();
        let fwd = LstmParams::new(store, "word_fwd", d, hidden, true, init, rng)?;
        let bwd = LstmParams::new(store, "word_bwd", d, hidden, true, init, rng)?;
        let w_cls = store.add_uniform("w_cls", vec![2 * hidden, 1], init, rng)?;
        Ok(Self {
            embedding,
            fwd,
            bwd,
            w_cls,
            hidden,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let missing = |n: &str| Error::Checkpoint(format!("missing parameter {n}"));
        let fwd = LstmParams::lookup(store, "word_fwd", true).ok_or_else(|| missing("word_fwd"))?;
        let bwd = LstmParams::lookup(store, "word_bwd", true).ok_or_else(|| missing("word_bwd"))?;
        Ok(Self {
            embedding: store.id("embedding").ok_or_else(|| missing("embedding"))?,
            w_cls: store.id("w_cls").ok_or_else(|| missing("w_cls"))?,
            hidden: fwd.hidden,
            fwd,
            bwd,
        })
    }
}

impl ClauseEmbedder for WordBiLstm {
    fn dim(&self) -> usize {
        2 * self.hidden
    }

    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, clauses: &[Vec<usize>]) -> Result<NodeId> {
        if let Some(i) = clauses.iter().position(Vec::is_empty) {
            return Err(Error::Model(format!("clause {i} is empty")));
        }
        let table = g.param(store, self.embedding);
        let fwd = self.fwd.bind(g, store);
        let bwd = self.bwd.bind(g, store);
        let w_cls = g.param(store, self.w_cls);

        // Equal-length clauses share one recurrent pass.
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in clauses.iter().enumerate() {
            groups.entry(c.len()).or_default().push(i);
        }
        let mut pooled = Vec::with_capacity(groups.len());
        let mut row_of = vec![0; clauses.len()];
        let mut next_row = 0;
        for (len, members) in &groups {
            for &m in members {
                row_of[m] = next_row;
                next_row += 1;
            }
            let steps = (0..*len)
                .map(|t| {
                    let ids: Vec<usize> = members.iter().map(|&m| clauses[m][t]).collect();
                    g.gather(table, &ids)
                })
                .collect::<Result<Vec<_>>>()?;
            let hf = fwd.run(g, &steps, None, false)?;
            let hb = bwd.run(g, &steps, None, true)?;
            let words = hf
                .iter()
                .zip(&hb)
                .map(|(&f, &b)| g.concat(&[f, b], 1))
                .collect::<Result<Vec<_>>>()?;
            pooled.push(attention_pool(g, &words, w_cls)?);
        }
        let stacked = g.concat(&pooled, 0)?;
        g.gather(stacked, &row_of)
    }
}

/// Attention pooling over per-word vectors (`B x k` each) with a `k x 1`
/// scoring vector.
pub fn attention_pool(g: &mut Graph, words: &[NodeId], w_cls: NodeId) -> Result<NodeId> {
    if words.len() == 1 {
        return Ok(words[0]);
    }
    let scores = words.iter().map(|&v| g.matmul(v, w_cls)).collect::<Result<Vec<_>>>()?;
    let scores = g.concat(&scores, 1)?;
    let alpha = g.row_softmax(scores)?;
    let mut terms = Vec::with_capacity(words.len());
    for (j, &v) in words.iter().enumerate() {
        let a = g.slice_cols(alpha, j, j + 1)?;
        terms.push(g.scale_rows(v, a)?);
    }
    g.add_all(&terms)
}
