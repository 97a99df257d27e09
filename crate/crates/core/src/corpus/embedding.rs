//! Text embedding file: a `V d` header, then `token x1 ... xd` per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub tokens: Vec<String>,
    pub dim: usize,
    /// Row-major `tokens.len() x dim`.
    pub values: Vec<f64>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header".into()))??;
        let mut parts = header.split_whitespace();
        let (Some(v), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(1, format!("header must be `V d`, got {header:?}")));
        };
        let v: usize = v.parse().map_err(|e| err(1, format!("vocabulary size: {e}")))?;
        let dim: usize = d.parse().map_err(|e| err(1, format!("dimension: {e}")))?;

        let mut tokens = Vec::with_capacity(v);
        let mut values = Vec::with_capacity(v * dim);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let token = parts.next().unwrap_or_default().to_string();
            let row: Vec<f64> = parts
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(err(lineno, format!("expected {dim} values, got {}", row.len())));
            }
            tokens.push(token);
            values.extend(row);
        }
        if tokens.len() != v {
            return Err(err(1, format!("header says {v} tokens, file has {}", tokens.len())));
        }
        Ok(Self { tokens, dim, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{} {}", self.tokens.len(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(w, "{t}")?;
            for x in self.row(i) {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}
