//! Multi-task loss, optimization and the cross-validation harness.

mod config;
mod cv;

pub use config::{apply_settings, parse_bool, parse_settings, set_model_key, settings_echo, LossTerms, TrainConfig};
pub use cv::{
    evaluate, fold_split, grid_search, run_cv, train_fold, FoldSplit, GridCell, GridReport, TrainOutcome, GRID_ETA,
    GRID_TAU,
};

use crate::corpus::{derive_targets, Document, Targets};
use crate::error::{Error, Result};
use crate::model::{BatchForward, ForwardOutput, Model, ModelConfig};
use crate::ndiff::{grad_check, GradCheckReport, Graph, NodeId, ParamStore, Tensor};
use crate::rng::RngStream;

/// Lower bound applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

fn ce(p: [f64; 2], label: bool) -> f64 {
    -p[usize::from(label)].max(LOG_FLOOR).ln()
}

/// Sum over enabled terms of the mean cross-entropy. The `y^c` head is
/// supervised with `y`.
pub fn loss_p(outputs: &[ForwardOutput], targets: &[Targets], terms: LossTerms) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::Model(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let d = outputs.len() as f64;
    let mut total = 0.0;
    if terms.y {
        total += outputs.iter().zip(targets).map(|(o, t)| ce(o.p_y, t.y)).sum::<f64>() / d;
    }
    if terms.y_o {
        let mut s = 0.0;
        for (o, t) in outputs.iter().zip(targets) {
            let p = o.p_yo.ok_or_else(|| Error::Model("y^o loss needs p_yo".into()))?;
            s += ce(p, t.y_o);
        }
        total += s / d;
    }
    if terms.y_c {
        total += outputs.iter().zip(targets).map(|(o, t)| ce(o.p_yc, t.y)).sum::<f64>() / d;
    }
    Ok(total)
}

/// Mask loss: binary cross-entropy averaged over each document's context
/// clauses, then over documents with at least one PR clause. 0 when there are
/// none.
pub fn loss_m(mask_probs: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    if mask_probs.len() != masks.len() {
        return Err(Error::Model(format!(
            "{} mask rows for {} targets",
            mask_probs.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    let mut n_pr = 0usize;
    for (p, m) in mask_probs.iter().zip(masks) {
        if p.len() != m.len() {
            return Err(Error::Model(format!(
                "{} mask probabilities for {} clauses",
                p.len(),
                m.len()
            )));
        }
        if !m.iter().any(|&b| b) {
            continue;
        }
        n_pr += 1;
        let s: f64 = p
            .iter()
            .zip(m)
            .map(|(&q, &t)| -(if t { q } else { 1.0 - q }).max(LOG_FLOOR).ln())
            .sum();
        total += s / m.len() as f64;
    }
    Ok(if n_pr == 0 { 0.0 } else { total / n_pr as f64 })
}

/// `eta * loss_p + tau * loss_m + gamma * squared_norm`.
pub fn total_loss(loss_p: f64, loss_m: f64, squared_norm: f64, cfg: &TrainConfig) -> f64 {
    cfg.eta * loss_p + cfg.tau * loss_m + cfg.gamma * squared_norm
}

/// Graph nodes of the batch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub p: NodeId,
    pub m: Option<NodeId>,
}

fn ce_node(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = g.log(probs, LOG_FLOOR);
    let picked = g.pick(lp, labels)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / labels.len() as f64))
}

fn mask_loss_node(g: &mut Graph, fwd: &BatchForward, targets: &[Targets]) -> Result<Option<NodeId>> {
    let Some(probs) = fwd.mask_probs else { return Ok(None) };
    let pr: Vec<usize> = (0..targets.len()).filter(|&d| targets[d].has_pr()).collect();
    if pr.is_empty() {
        return Ok(None);
    }
    let (mut rows, mut labels, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for &d in &pr {
        let n = targets[d].mask.len() as f64;
        for (&r, &t) in fwd.mask_rows[d].iter().zip(&targets[d].mask) {
            rows.push(r);
            labels.push(usize::from(t));
            weights.push(1.0 / (n * pr.len() as f64));
        }
    }
    let q = g.gather(probs, &rows)?;
    let neg = g.one_minus(q);
    let both = g.concat(&[neg, q], 1)?;
    let logs = g.log(both, LOG_FLOOR);
    let picked = g.pick(logs, &labels)?;
    let w = g.constant(Tensor::column(weights));
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted);
    Ok(Some(g.scale(s, -1.0)))
}

/// Build the full objective for one forward pass.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    fwd: &BatchForward,
    targets: &[Targets],
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    let y: Vec<usize> = targets.iter().map(|t| usize::from(t.y)).collect();
    let mut parts = Vec::new();
    if cfg.loss_terms.y {
        parts.push(ce_node(g, fwd.p_y, &y)?);
    }
    if cfg.loss_terms.y_o {
        let p_yo = fwd.p_yo.ok_or_else(|| Error::Model("y^o loss needs p_yo".into()))?;
        let y_o: Vec<usize> = targets.iter().map(|t| usize::from(t.y_o)).collect();
        parts.push(ce_node(g, p_yo, &y_o)?);
    }
    if cfg.loss_terms.y_c {
        parts.push(ce_node(g, fwd.p_yc, &y)?);
    }
    let p = g.add_all(&parts)?;
    let m = mask_loss_node(g, fwd, targets)?;

    let mut terms = vec![g.scale(p, cfg.eta)];
    if let Some(m) = m {
        terms.push(g.scale(m, cfg.tau));
    }
    if cfg.gamma > 0.0 {
        let l2 = model.l2(g)?;
        terms.push(g.scale(l2, cfg.gamma));
    }
    Ok(LossNodes {
        total: g.add_all(&terms)?,
        p,
        m,
    })
}

/// Bias-corrected Adam with one moment pair per parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update every parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                let gk = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *x -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Two documents for gradient checking: the first with a PR clause and the
/// first non-conditional one.
pub fn micro_batch(docs: &[Document]) -> Result<Vec<Document>> {
    let with_pr = docs.iter().find(|d| d.has_pr());
    let plain = docs.iter().find(|d| !d.has_pr() && d.num_context() > 0);
    match (with_pr, plain) {
        (Some(a), Some(b)) => Ok(vec![a.clone(), b.clone()]),
        _ => Err(Error::Empty(
            "micro-batch needs a document with a PR clause and one without",
        )),
    }
}

/// Finite-difference check of the full objective on `docs`, with dropout off.
/// The model vocabulary is restricted to the batch's tokens.
pub fn gradcheck_objective(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    docs: &[Document],
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..model_cfg.clone()
    };
    let vocab = crate::corpus::Vocab::from_documents(docs);
    let mut model = Model::new(cfg, vocab, None, &mut RngStream::new(seed).child("init", 0))?;
    let targets: Vec<Targets> = docs.iter().map(derive_targets).collect();
    let need_yo = train_cfg.loss_terms.y_o;
    let mut store = model.store().clone();
    grad_check(&mut store, h, |s, g| {
        model.set_store(s.clone());
        let refs: Vec<&Document> = docs.iter().collect();
        let fwd = model.forward(g, &refs, false, need_yo, &mut RngStream::new(0))?;
        Ok(batch_loss(g, &model, &fwd, &targets, train_cfg)?.total)
    })
}

#[cfg(test)]
mod tests;
