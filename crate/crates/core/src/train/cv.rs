use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{batch_loss, clip_gradients, settings_echo, Adam, TrainConfig};
use crate::corpus::{derive_targets, Corpus, Document, Embeddings, Origin, Targets};
use crate::error::{Error, Result};
use crate::eval::{
    make_report, mask_metrics, prf1, ConfigRun, ConfusionCounts, FoldMetrics, MaskMetrics, RunReport, ScoredMask,
};
use crate::model::{Model, ModelConfig};
use crate::ndiff::Graph;
use crate::rng::RngStream;

/// Document ids per fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

/// Source id of the original a document descends from.
fn root_source(doc: &Document, corpus: &Corpus) -> String {
    if doc.origin == Origin::Original {
        return doc.source_id.clone();
    }
    corpus
        .get(&doc.source_id)
        .map(|src| src.source_id.clone())
        .unwrap_or_else(|| doc.source_id.clone())
}

/// Groups of document indices sharing a root source, in first-seen order.
fn source_groups(corpus: &Corpus, indices: &[usize]) -> Vec<Vec<usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for &i in indices {
        let root = root_source(&corpus.documents()[i], corpus);
        groups
            .entry(root.clone())
            .or_insert_with(|| {
                order.push(root);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|r| groups.remove(&r).unwrap_or_default())
        .collect()
}

/// Shuffle source groups, then assign each to the currently smallest fold.
/// A document and everything sampled from it share a fold.
fn assign(mut groups: Vec<Vec<usize>>, k: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    rng.shuffle(&mut groups);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for grp in groups {
        let smallest = (0..k).min_by_key(|&f| (folds[f].len(), f)).unwrap_or(0);
        folds[smallest].extend(grp);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

pub fn fold_split(corpus: &Corpus, k: usize, rng: &RngStream) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let all: Vec<usize> = (0..corpus.len()).collect();
    let groups = source_groups(corpus, &all);
    if groups.len() < k {
        return Err(Error::Empty(
            "fewer source documents than folds; a test fold would be empty",
        ));
    }
    let folds = assign(groups, k, &mut rng.child("folds", 0));
    Ok(FoldSplit {
        folds: folds
            .into_iter()
            .map(|f| f.into_iter().map(|i| corpus.documents()[i].id.clone()).collect())
            .collect(),
    })
}

/// Test-set scores: classification counts at `p_y[1] >= 0.5`, plus mask
/// metrics when the model has CMM.
pub fn evaluate(model: &Model, docs: &[Document], batch: usize) -> Result<(ConfusionCounts, Option<MaskMetrics>)> {
    let outputs = model.predict(docs, batch)?;
    let mut counts = ConfusionCounts::default();
    let mut scored = Vec::new();
    for (o, d) in outputs.iter().zip(docs) {
        let t = derive_targets(d);
        counts.add(o.p_y[1] >= 0.5, t.y);
        if let Some(p) = &o.mask_probs {
            scored.push(ScoredMask {
                truth: t.mask,
                probs: p.clone(),
            });
        }
    }
    let mask = model
        .config()
        .use_cmm
        .then(|| mask_metrics(&scored, model.config().mask_threshold));
    Ok((counts, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: usize,
    /// 1-based; 0 when no validation set was used.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Mean objective per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train `model` in place on `train`, keeping the parameters with the best
/// validation F1 (ties keep the earlier epoch). Without validation documents
/// the final parameters are kept.
pub fn train_fold(
    model: &mut Model,
    train: &[Document],
    val: &[Document],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training documents"));
    }
    let targets: Vec<Targets> = train.iter().map(derive_targets).collect();
    let need_yo = cfg.loss_terms.y_o;
    let mut adam = Adam::new(model.store(), cfg.lr);
    let mut out = TrainOutcome {
        epochs: 0,
        best_epoch: 0,
        best_val_f1: -1.0,
        epoch_loss: Vec::new(),
    };
    let mut best = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.child("epoch", epoch as u64).shuffle(&mut order);
        let mut drop_rng = rng.child("dropout", epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let docs: Vec<&Document> = chunk.iter().map(|&i| &train[i]).collect();
            let t: Vec<Targets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &docs, true, need_yo, &mut drop_rng)?;
            let loss = batch_loss(&mut g, model, &fwd, &t, cfg)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Model(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            loss_sum += value * chunk.len() as f64;
            g.backward_into(loss.total, model.store_mut())?;
            if let Some(c) = cfg.clip {
                clip_gradients(model.store_mut(), c);
            }
            adam.step(model.store_mut());
        }
        out.epochs = epoch + 1;
        out.epoch_loss.push(loss_sum / train.len() as f64);

        if val.is_empty() {
            log::info!("epoch {}: loss {:.6}", epoch + 1, loss_sum / train.len() as f64);
            continue;
        }
        let f1 = prf1(&evaluate(model, val, cfg.batch)?.0).2;
        log::info!(
            "epoch {}: loss {:.6} val F1 {f1:.4}",
            epoch + 1,
            loss_sum / train.len() as f64
        );
        if f1 > out.best_val_f1 {
            out.best_val_f1 = f1;
            out.best_epoch = epoch + 1;
            best = Some(model.store().clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    if let Some(store) = best {
        model.set_store(store);
    } else {
        out.best_val_f1 = 0.0;
    }
    Ok(out)
}

/// Size the model's slot counts to the corpus.
fn sized_for(cfg: &ModelConfig, corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        max_context: corpus.max_context().max(1),
        clause_len: corpus.max_clause_len().max(1),
        max_causes: corpus.max_causes().max(1),
        ..cfg.clone()
    }
}

fn run_fold(
    corpus: &Corpus,
    split: &FoldSplit,
    fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&Embeddings>,
    rng: &RngStream,
) -> Result<(FoldMetrics, Model)> {
    let position: HashMap<&str, usize> = corpus
        .documents()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.as_str(), i))
        .collect();
    let test: Vec<Document> = split.folds[fold]
        .iter()
        .map(|id| corpus.documents()[position[id.as_str()]].clone())
        .collect();
    if test.is_empty() {
        return Err(Error::Empty("a test fold has no documents"));
    }
    let pool: Vec<usize> = (0..split.folds.len())
        .filter(|&f| f != fold)
        .flat_map(|f| split.folds[f].iter().map(|id| position[id.as_str()]))
        .collect();
    let mut groups = source_groups(corpus, &pool);
    rng.child("val", fold as u64).shuffle(&mut groups);
    let n_val = ((groups.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = if cfg.val_fraction > 0.0 {
        n_val.clamp(1, groups.len() - 1)
    } else {
        0
    };
    let mut val_idx: Vec<usize> = groups[..n_val].concat();
    let mut train_idx: Vec<usize> = groups[n_val..].concat();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ix: &[usize]| -> Vec<Document> { ix.iter().map(|&i| corpus.documents()[i].clone()).collect() };
    let (train, val) = (pick(&train_idx), pick(&val_idx));

    let mut model = Model::new(
        model_cfg.clone(),
        corpus.vocab().clone(),
        pretrained,
        &mut rng.child("init", fold as u64),
    )?;
    let outcome = train_fold(&mut model, &train, &val, cfg, &rng.child("train", fold as u64))?;
    let (counts, mask) = evaluate(&model, &test, cfg.batch)?;
    let mut m = FoldMetrics::new(fold, counts, mask);
    m.epochs = outcome.epochs;
    m.best_epoch = outcome.best_epoch;
    log::info!("{} fold {}: F1 {:.4}", model_cfg.label(), fold + 1, m.f1);
    Ok((m, model))
}

/// K-fold cross-validation: train on the other folds, test on each fold in
/// turn. Returns the report and the model kept for each fold.
pub fn run_cv(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&Embeddings>,
) -> Result<(RunReport, Vec<Model>)> {
    cfg.validate()?;
    let model_cfg = sized_for(model_cfg, corpus);
    model_cfg.validate()?;
    let rng = RngStream::new(cfg.seed);
    let split = fold_split(corpus, cfg.folds, &rng)?;

    let mut results: BTreeMap<usize, (FoldMetrics, Model)> = BTreeMap::new();
    let folds: Vec<usize> = (0..cfg.folds).collect();
    for wave in folds.chunks(cfg.parallel_folds) {
        if wave.len() == 1 {
            let f = wave[0];
            results.insert(f, run_fold(corpus, &split, f, &model_cfg, cfg, pretrained, &rng)?);
            continue;
        }
        let done: Vec<Result<(FoldMetrics, Model)>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&f| {
                    let (split, model_cfg, rng) = (&split, &model_cfg, &rng);
                    s.spawn(move || run_fold(corpus, split, f, model_cfg, cfg, pretrained, rng))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Model("fold worker panicked".into())))
                })
                .collect()
        });
        for (&f, r) in wave.iter().zip(done) {
            results.insert(f, r?);
        }
    }

    let (metrics, models): (Vec<FoldMetrics>, Vec<Model>) = results.into_values().unzip();
    let run = ConfigRun {
        label: model_cfg.label(),
        folds: metrics,
    };
    let report = make_report(vec![run], settings_echo(&model_cfg, cfg))?;
    Ok((report, models))
}

pub const GRID_ETA: [f64; 4] = [0.01, 0.1, 0.5, 1.0];
pub const GRID_TAU: [f64; 4] = [1.0, 5.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub eta: f64,
    pub tau: f64,
    pub f1: f64,
    pub g_f1: f64,
    /// `(F1 + gF1) / 2` over fold means.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn best(&self) -> Option<&GridCell> {
        self.cells.iter().fold(None, |best: Option<&GridCell>, c| match best {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# eta/tau grid, score = (F1 + gF1) / 2\n");
        let _ = writeln!(
            s,
            "{:>6}  {:>6}  {:>6}  {:>6}  {:>6}",
            "eta", "tau", "F1", "gF1", "score"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:>6}  {:>6}  {:>6.4}  {:>6.4}  {:>6.4}",
                c.eta, c.tau, c.f1, c.g_f1, c.score
            );
        }
        if let Some(b) = self.best() {
            let _ = writeln!(s, "# best eta={} tau={} score={:.4}", b.eta, b.tau, b.score);
        }
        s
    }
}

/// Cross-validate every `(eta, tau)` pair; the model config should have CMM
/// on so gF1 exists (otherwise it counts as 0).
pub fn grid_search(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    etas: &[f64],
    taus: &[f64],
    pretrained: Option<&Embeddings>,
) -> Result<GridReport> {
    let mut cells = Vec::new();
    for &eta in etas {
        for &tau in taus {
            let c = TrainConfig {
                eta,
                tau,
                ..cfg.clone()
            };
            let (report, _) = run_cv(corpus, model_cfg, &c, pretrained)?;
            let mean = report.runs[0].mean();
            let g_f1 = mean.mask.map_or(0.0, |m| m.g_f1);
            cells.push(GridCell {
                eta,
                tau,
                f1: mean.f1,
                g_f1,
                score: (mean.f1 + g_f1) / 2.0,
            });
        }
    }
    Ok(GridReport { cells })
}
