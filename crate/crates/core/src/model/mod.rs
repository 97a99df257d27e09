//! Clause embedding, context masking, context encoders and prediction
//! aggregation.
//!
//! A forward pass runs on a batch of documents at once. Every clause of every
//! document is embedded in one call to the [`ClauseEmbedder`]; cause, emotion
//! and context slots are then gathered out of that matrix, with absent slots
//! filled by zero rows.

mod checkpoint;
mod embedder;
mod lstm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Embeddings, Vocab};
use crate::error::{Error, Result};
use crate::ndiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::RngStream;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use embedder::{attention_pool, ClauseEmbedder, WordBiLstm};
pub use lstm::{BoundLstm, LstmParams};

/// Half-width of the uniform initialization range.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    /// Concatenation of all clause vectors.
    CC,
    /// Clause-level BiLSTM.
    BL,
    /// Residual dot-product attention from cause and emotion to context.
    SA,
}

impl Encoder {
    pub const ALL: [Encoder; 3] = [Encoder::CC, Encoder::BL, Encoder::SA];
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoder::CC => "CC",
            Encoder::BL => "BL",
            Encoder::SA => "SA",
        })
    }
}

impl FromStr for Encoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(Encoder::CC),
            "bl" => Ok(Encoder::BL),
            "sa" => Ok(Encoder::SA),
            other => Err(Error::Config(format!("unknown encoder {other:?} (cc, bl, sa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub encoder: Encoder,
    pub use_cmm: bool,
    pub use_pam: bool,
    pub heads: usize,
    /// Maximum clause length `l`.
    pub clause_len: usize,
    /// Maximum context-clause count `L`.
    pub max_context: usize,
    /// Cause slots in the pair representation.
    pub max_causes: usize,
    pub dropout: f64,
    pub mask_threshold: f64,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    INIT_SCALE
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 100,
            encoder: Encoder::SA,
            use_cmm: true,
            use_pam: true,
            heads: 1,
            clause_len: 5,
            max_context: 4,
            max_causes: 1,
            dropout: 0.2,
            mask_threshold: 0.1,
            init_scale: INIT_SCALE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be positive".into());
        }
        if self.heads != 1 {
            return bad(format!("only one attention head is supported, got {}", self.heads));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask_threshold {} outside (0, 1)", self.mask_threshold));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be positive", self.init_scale));
        }
        if self.clause_len == 0 || self.max_causes == 0 {
            return bad("clause_len and max_causes must be positive".into());
        }
        Ok(())
    }

    /// Short row label such as `SA+C+P`.
    pub fn label(&self) -> String {
        let mut s = self.encoder.to_string();
        if self.use_cmm {
            s.push_str("+C");
        }
        if self.use_pam {
            s.push_str("+P");
        }
        s
    }
}

#[derive(Debug, Clone)]
struct HeadParams {
    cmm: Option<(ParamId, ParamId)>,
    sentence: Option<(LstmParams, LstmParams)>,
    w_o: ParamId,
    b_o: ParamId,
    w_c: ParamId,
    b_c: ParamId,
}

impl HeadParams {
    fn new(cfg: &ModelConfig, k: usize, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        let pair_width = (cfg.max_causes + 1) * k;
        let cmm = if cfg.use_cmm {
            Some((
                store.add_uniform("w_con", vec![k, 1], cfg.init_scale, rng)?,
                store.add_uniform("b_con", vec![1, 1], cfg.init_scale, rng)?,
            ))
        } else {
            None
        };
        let (sentence, enc_width) = match cfg.encoder {
            Encoder::CC => (None, (cfg.max_causes + 1 + cfg.max_context) * k),
            Encoder::SA => (None, pair_width),
            Encoder::BL => {
                let f = LstmParams::new(store, "sent_fwd", k, cfg.hidden, false, cfg.init_scale, rng)?;
                let b = LstmParams::new(store, "sent_bwd", k, cfg.hidden, false, cfg.init_scale, rng)?;
                (Some((f, b)), (cfg.max_causes + 1) * 2 * cfg.hidden)
            }
        };
        Ok(Self {
            cmm,
            sentence,
            w_o: store.add_uniform("w_o", vec![pair_width, 2], cfg.init_scale, rng)?,
            b_o: store.add_uniform("b_o", vec![1, 2], cfg.init_scale, rng)?,
            w_c: store.add_uniform("w_c", vec![enc_width, 2], cfg.init_scale, rng)?,
            b_c: store.add_uniform("b_c", vec![1, 2], cfg.init_scale, rng)?,
        })
    }

    fn lookup(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let cmm = if cfg.use_cmm {
            Some((get("w_con")?, get("b_con")?))
        } else {
            None
        };
        let sentence = if cfg.encoder == Encoder::BL {
            let f = LstmParams::lookup(store, "sent_fwd", false)
                .ok_or_else(|| Error::Checkpoint("missing parameter sent_fwd".into()))?;
            let b = LstmParams::lookup(store, "sent_bwd", false)
                .ok_or_else(|| Error::Checkpoint("missing parameter sent_bwd".into()))?;
            Some((f, b))
        } else {
            None
        };
        Ok(Self {
            cmm,
            sentence,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
            w_c: get("w_c")?,
            b_c: get("b_c")?,
        })
    }
}

/// Model outputs for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub p_y: [f64; 2],
    /// Present when PAM is on or its loss term is requested.
    pub p_yo: Option<[f64; 2]>,
    pub p_yc: [f64; 2],
    /// One probability per context clause; present when CMM is on.
    pub mask_probs: Option<Vec<f64>>,
    /// `p_yo[1]`, present with `p_yo`.
    pub lambda: Option<f64>,
}

/// Graph handles produced by one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `D x 2`.
    pub p_y: NodeId,
    pub p_yo: Option<NodeId>,
    pub p_yc: NodeId,
    /// `V x 1` over all valid context clauses of the batch.
    pub mask_probs: Option<NodeId>,
    /// Per document, the rows of `mask_probs` for its context clauses in order.
    pub mask_rows: Vec<Vec<usize>>,
    /// Attention weights per anchor (`D x P`), SA only.
    pub attention: Vec<NodeId>,
}

fn pair(t: &Tensor, r: usize) -> [f64; 2] {
    [t.get(r, 0), t.get(r, 1)]
}

impl BatchForward {
    pub fn outputs(&self, g: &Graph) -> Vec<ForwardOutput> {
        let p_y = g.value(self.p_y);
        let p_yc = g.value(self.p_yc);
        let p_yo = self.p_yo.map(|n| g.value(n));
        let masks = self.mask_probs.map(|n| g.value(n));
        (0..self.mask_rows.len())
            .map(|d| {
                let yo = p_yo.map(|t| pair(t, d));
                ForwardOutput {
                    p_y: pair(p_y, d),
                    p_yo: yo,
                    p_yc: pair(p_yc, d),
                    mask_probs: masks.map(|m| self.mask_rows[d].iter().map(|&r| m.data()[r]).collect()),
                    lambda: yo.map(|p| p[1]),
                }
            })
            .collect()
    }
}

/// Per-clause sigmoid gate: `p = sigmoid(rows W_con + b_con)`, rows scaled by
/// `p`. Returns `(p [V x 1], scaled rows)`.
pub fn context_mask(g: &mut Graph, rows: NodeId, w_con: NodeId, b_con: NodeId) -> Result<(NodeId, NodeId)> {
    let logits = g.matmul(rows, w_con)?;
    let logits = g.add_row_bias(logits, b_con)?;
    let p = g.sigmoid(logits);
    let scaled = g.scale_rows(rows, p)?;
    Ok((p, scaled))
}

/// `[c; e; con_1; ...; con_L]`.
pub fn encode_cc(g: &mut Graph, c: NodeId, e: NodeId, cons: &[NodeId]) -> Result<NodeId> {
    let mut parts = vec![c, e];
    parts.extend_from_slice(cons);
    g.concat(&parts, 1)
}

/// `u + sum_j alpha_j con_j` with `alpha = softmax_j(u . con_j)` over the
/// slots where `valid` (row-major `D x P`) is true. Returns the updated anchor
/// and, when there is any context slot, the attention weights.
pub fn encode_sa(g: &mut Graph, anchor: NodeId, cons: &[NodeId], valid: &[bool]) -> Result<(NodeId, Option<NodeId>)> {
    if cons.is_empty() {
        return Ok((anchor, None));
    }
    let scores = cons
        .iter()
        .map(|&c| {
            let prod = g.mul(anchor, c)?;
            g.row_sum(prod)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = g.concat(&scores, 1)?;
    let alpha = g.masked_row_softmax(scores, valid)?;
    let mut terms = Vec::with_capacity(cons.len() + 1);
    terms.push(anchor);
    for (j, &c) in cons.iter().enumerate() {
        let a = g.slice_cols(alpha, j, j + 1)?;
        terms.push(g.scale_rows(c, a)?);
    }
    Ok((g.add_all(&terms)?, Some(alpha)))
}

/// `P(y) = lambda P(y^o) + (1 - lambda) P(y^c)` with `lambda = P(y^o = 1)`.
/// Returns `(p_y, lambda)`.
pub fn aggregate(g: &mut Graph, p_yo: NodeId, p_yc: NodeId) -> Result<(NodeId, NodeId)> {
    let lambda = g.slice_cols(p_yo, 1, 2)?;
    let rest = g.one_minus(lambda);
    let a = g.scale_rows(p_yo, lambda)?;
    let b = g.scale_rows(p_yc, rest)?;
    Ok((g.add(a, b)?, lambda))
}

fn softmax_head(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let logits = g.matmul(x, w)?;
    let logits = g.add_row_bias(logits, b)?;
    g.row_softmax(logits)
}

fn column(g: &mut Graph, v: Vec<f64>) -> NodeId {
    g.constant(Tensor::column(v))
}

pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    embedder: Box<dyn ClauseEmbedder>,
    head: HeadParams,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("vocab", &self.vocab.len())
            .field("params", &self.store.num_values())
            .field("embedder", &self.embedder.kind())
            .finish()
    }
}

impl Model {
    /// Word-level BiLSTM model. The embedding table starts from `pretrained`
    /// where a token is covered and from the uniform initializer elsewhere.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        pretrained: Option<&Embeddings>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let scale = config.init_scale;
        let mut table: Vec<f64> = (0..vocab.len() * d).map(|_| rng.uniform(-scale, scale)).collect();
        if let Some(e) = pretrained {
            if e.dim != d {
                return Err(Error::Config(format!(
                    "embedding file has dimension {}, model expects {d}",
                    e.dim
                )));
            }
            for (row, token) in e.tokens.iter().enumerate() {
                if vocab.contains(token) {
                    let i = vocab.id(token);
                    table[i * d..(i + 1) * d].copy_from_slice(e.row(row));
                }
            }
        }
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", Tensor::matrix(vocab.len(), d, table)?)?;
        let embedder = WordBiLstm::new(&mut store, embedding, config.hidden, scale, rng)?;
        Self::with_embedder(config, vocab, store, Box::new(embedder), rng)
    }

    /// Build the heads on top of an arbitrary clause embedder whose
    /// parameters are already in `store`.
    pub fn with_embedder(
        config: ModelConfig,
        vocab: Vocab,
        mut store: ParamStore,
        embedder: Box<dyn ClauseEmbedder>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        let head = HeadParams::new(&config, embedder.dim(), &mut store, rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            embedder,
            head,
        })
    }

    /// Rebuild a word-level model around existing parameters.
    pub(crate) fn from_parts(config: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let embedder = WordBiLstm::lookup(&store)?;
        let head = HeadParams::lookup(&config, &store)?;
        Ok(Self {
            config,
            vocab,
            store,
            embedder: Box::new(embedder),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embedder(&self) -> &dyn ClauseEmbedder {
        self.embedder.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_store(&mut self, store: ParamStore) {
        self.store = store;
    }

    fn clause_ids(&self, doc: &Document) -> Result<Vec<Vec<usize>>> {
        doc.clauses
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.is_empty() {
                    return Err(Error::Model(format!("document {}: clause {i} is empty", doc.id)));
                }
                if c.len() > self.config.clause_len {
                    return Err(Error::Model(format!(
                        "document {}: clause {i} has {} tokens, limit is {}",
                        doc.id,
                        c.len(),
                        self.config.clause_len
                    )));
                }
                Ok(c.tokens().iter().map(|t| self.vocab.id(t)).collect())
            })
            .collect()
    }

    /// Squared L2 norm of every parameter, as a graph node.
    pub fn l2(&self, g: &mut Graph) -> Result<NodeId> {
        let terms: Vec<NodeId> = self
            .store
            .iter()
            .map(|(id, _)| id)
            .collect::<Vec<_>>()
            .into_iter()
            .map(|id| {
                let p = g.param(&self.store, id);
                g.sum_squares(p)
            })
            .collect();
        g.add_all(&terms)
    }

    /// Batched forward pass. `need_yo` requests `P(y^o)` even without PAM.
    pub fn forward(
        &self,
        g: &mut Graph,
        docs: &[&Document],
        train: bool,
        need_yo: bool,
        rng: &mut RngStream,
    ) -> Result<BatchForward> {
        if docs.is_empty() {
            return Err(Error::Empty("forward on an empty batch"));
        }
        let cfg = &self.config;
        let n_docs = docs.len();
        let k_slots = cfg.max_causes;

        // Embed every clause of the batch.
        let mut clauses = Vec::new();
        let mut offset = Vec::with_capacity(n_docs);
        for d in docs {
            if d.cause.len() > k_slots {
                return Err(Error::Model(format!(
                    "document {} has {} cause clauses, model supports {k_slots}",
                    d.id,
                    d.cause.len()
                )));
            }
            offset.push(clauses.len());
            clauses.extend(self.clause_ids(d)?);
        }
        let all = self.embedder.embed(g, &self.store, &clauses)?;
        let all = g.dropout(all, cfg.dropout, train, rng)?;

        let mut causes = Vec::with_capacity(k_slots);
        let mut cause_valid = Vec::with_capacity(k_slots);
        for k in 0..k_slots {
            let ids: Vec<Option<usize>> = docs
                .iter()
                .zip(&offset)
                .map(|(d, o)| d.cause.get(k).map(|c| o + c))
                .collect();
            cause_valid.push(
                ids.iter()
                    .map(|i| f64::from(u8::from(i.is_some())))
                    .collect::<Vec<f64>>(),
            );
            causes.push(g.gather_rows(all, &ids)?);
        }
        let emo_ids: Vec<usize> = docs.iter().zip(&offset).map(|(d, o)| o + d.emotion).collect();
        let e = g.gather(all, &emo_ids)?;
        let c = g.concat(&causes, 1)?;
        let x = g.concat(&[c, e], 1)?;

        // Context slots.
        let ctx: Vec<Vec<usize>> = docs.iter().map(|d| d.context_indices()).collect();
        let longest = ctx.iter().map(Vec::len).max().unwrap_or(0);
        let slots = if cfg.encoder == Encoder::CC {
            if longest > cfg.max_context {
                return Err(Error::Model(format!(
                    "document with {longest} context clauses exceeds L = {}",
                    cfg.max_context
                )));
            }
            cfg.max_context
        } else {
            longest
        };
        let mut mask_rows = vec![Vec::new(); n_docs];
        let mut valid_rows = Vec::new();
        for (d, idx) in ctx.iter().enumerate() {
            for &i in idx {
                mask_rows[d].push(valid_rows.len());
                valid_rows.push(offset[d] + i);
            }
        }
        let mut mask_probs = None;
        let mut cons = Vec::with_capacity(slots);
        match self.head.cmm {
            Some((w_con, b_con)) if !valid_rows.is_empty() => {
                let rows = g.gather(all, &valid_rows)?;
                let w = g.param(&self.store, w_con);
                let b = g.param(&self.store, b_con);
                let (p, scaled) = context_mask(g, rows, w, b)?;
                mask_probs = Some(p);
                for j in 0..slots {
                    let ids: Vec<Option<usize>> = mask_rows.iter().map(|r| r.get(j).copied()).collect();
                    cons.push(g.gather_rows(scaled, &ids)?);
                }
            }
            _ => {
                for j in 0..slots {
                    let ids: Vec<Option<usize>> = ctx
                        .iter()
                        .zip(&offset)
                        .map(|(idx, o)| idx.get(j).map(|i| o + i))
                        .collect();
                    cons.push(g.gather_rows(all, &ids)?);
                }
            }
        }
        let ctx_valid: Vec<bool> = ctx
            .iter()
            .flat_map(|idx| (0..slots).map(move |j| j < idx.len()))
            .collect();

        let mut attention = Vec::new();
        let x_hat = match cfg.encoder {
            Encoder::CC => encode_cc(g, c, e, &cons)?,
            Encoder::SA => {
                let mut parts = Vec::with_capacity(k_slots + 1);
                for (k, &u) in causes.iter().enumerate() {
                    let (mut u_hat, alpha) = encode_sa(g, u, &cons, &ctx_valid)?;
                    attention.extend(alpha);
                    if cause_valid[k].contains(&0.0) {
                        // Padded cause slots stay zero.
                        let m = column(g, cause_valid[k].clone());
                        u_hat = g.scale_rows(u_hat, m)?;
                    }
                    parts.push(u_hat);
                }
                let (e_hat, alpha) = encode_sa(g, e, &cons, &ctx_valid)?;
                attention.extend(alpha);
                parts.push(e_hat);
                g.concat(&parts, 1)?
            }
            Encoder::BL => {
                let (fp, bp) = self.head.sentence.expect("BL encoder has sentence parameters");
                let (fwd, bwd) = (fp.bind(g, &self.store), bp.bind(g, &self.store));
                let mut steps = causes.clone();
                steps.push(e);
                steps.extend_from_slice(&cons);
                let mut masks = cause_valid.clone();
                masks.push(vec![1.0; n_docs]);
                for j in 0..slots {
                    masks.push(ctx.iter().map(|idx| f64::from(u8::from(j < idx.len()))).collect());
                }
                let hf = fwd.run(g, &steps, Some(&masks), false)?;
                let hb = bwd.run(g, &steps, Some(&masks), true)?;
                let mut parts = Vec::with_capacity(k_slots + 1);
                for t in 0..=k_slots {
                    let mut out = g.concat(&[hf[t], hb[t]], 1)?;
                    if masks[t].contains(&0.0) {
                        let m = column(g, masks[t].clone());
                        out = g.scale_rows(out, m)?;
                    }
                    parts.push(out);
                }
                g.concat(&parts, 1)?
            }
        };

        let w_c = g.param(&self.store, self.head.w_c);
        let b_c = g.param(&self.store, self.head.b_c);
        let p_yc = softmax_head(g, x_hat, w_c, b_c)?;
        let p_yo = if cfg.use_pam || need_yo {
            let w_o = g.param(&self.store, self.head.w_o);
            let b_o = g.param(&self.store, self.head.b_o);
            Some(softmax_head(g, x, w_o, b_o)?)
        } else {
            None
        };
        let p_y = match (cfg.use_pam, p_yo) {
            (true, Some(po)) => aggregate(g, po, p_yc)?.0,
            _ => p_yc,
        };
        if cfg.use_cmm && mask_probs.is_none() {
            // No context clause anywhere in the batch.
            mask_probs = Some(g.constant(Tensor::zeros(vec![0, 1])));
        }
        Ok(BatchForward {
            p_y,
            p_yo,
            p_yc,
            mask_probs,
            mask_rows,
            attention,
        })
    }

    /// Evaluation-mode outputs for `docs`, in batches of `batch`.
    pub fn predict(&self, docs: &[Document], batch: usize) -> Result<Vec<ForwardOutput>> {
        let mut out = Vec::with_capacity(docs.len());
        let mut rng = RngStream::new(0);
        for chunk in docs.chunks(batch.max(1)) {
            let refs: Vec<&Document> = chunk.iter().collect();
            let mut g = Graph::new();
            let f = self.forward(&mut g, &refs, false, false, &mut rng)?;
            out.extend(f.outputs(&g));
        }
        Ok(out)
    }
}
