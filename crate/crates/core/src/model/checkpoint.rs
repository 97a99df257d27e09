//! Text checkpoint: a versioned header, the model configuration, the
//! vocabulary and every parameter with its shape and row-major values.
//!
//! ```text
//! condcause-checkpoint 1
//! config {"embed_dim":32,...}
//! vocab 3
//! "<unk>"
//! ...
//! params 14
//! embedding 3 32
//! 0.01 -0.02 ...
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`,
//! so a save/load cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::ndiff::{ParamStore, Tensor};

use super::{Model, ModelConfig, WordBiLstm};

pub const CHECKPOINT_HEADER: &str = "condcause-checkpoint 1";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)?)?;
    Ok(())
}

fn to_text(model: &Model) -> Result<String> {
    if model.embedder().kind() != WordBiLstm::KIND {
        return Err(Error::Checkpoint(format!(
            "cannot checkpoint embedder {}",
            model.embedder().kind()
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_HEADER}");
    let _ = writeln!(s, "config {}", serde_json::to_string(model.config())?);
    let _ = writeln!(s, "vocab {}", model.vocab().len());
    for t in model.vocab().tokens() {
        let _ = writeln!(s, "{}", serde_json::to_string(t)?);
    }
    let store = model.store();
    let _ = writeln!(s, "params {}", store.len());
    for (_, p) in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{} {}", p.name, shape.join(" "));
        let values: Vec<String> = p.value.data().iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{}", values.join(" "));
    }
    Ok(s)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    from_text(&text)
}

fn from_text(text: &str) -> Result<Model> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
    };
    let bad = |line: usize, m: String| Error::Checkpoint(format!("line {line}: {m}"));

    let (n, header) = next("header")?;
    if header != CHECKPOINT_HEADER {
        return Err(bad(n, format!("expected {CHECKPOINT_HEADER:?}, got {header:?}")));
    }
    let (n, line) = next("config")?;
    let json = line
        .strip_prefix("config ")
        .ok_or_else(|| bad(n, "expected config".into()))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| bad(n, e.to_string()))?;

    let (n, line) = next("vocab")?;
    let count: usize = line
        .strip_prefix("vocab ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n, "expected `vocab <count>`".into()))?;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next("vocab entry")?;
        tokens.push(serde_json::from_str::<String>(line).map_err(|e| bad(n, e.to_string()))?);
    }
    let vocab = Vocab::from_ordered(tokens)?;

    let (n, line) = next("params")?;
    let count: usize = line
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n, "expected `params <count>`".into()))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (n, line) = next("parameter header")?;
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad(n, "missing name".into()))?;
        let shape = parts
            .map(|p| p.parse::<usize>().map_err(|e| bad(n, format!("shape: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let (n, line) = next("parameter values")?;
        let values = if line.is_empty() {
            Vec::new()
        } else {
            line.split(' ')
                .map(|v| v.parse::<f64>().map_err(|e| bad(n, format!("value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?
        };
        store.add(
            name,
            Tensor::from_vec(shape, values).map_err(|e| bad(n, e.to_string()))?,
        )?;
    }
    if let Some((n, extra)) = next("end").ok().filter(|(_, l)| !l.is_empty()) {
        return Err(bad(n, format!("trailing content {extra:?}")));
    }
    Model::from_parts(config, vocab, store)
}
