//! Static word vectors in the plain-text format: `token v1 v2 ... vD` per line.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

/// Mean-pooled token features with out-of-vocabulary tokens kept symbolic:
/// the full feature is `known + unk_weight * unk` for a learned unknown vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub known: Vec<f64>,
    pub unk_weight: f64,
}

impl PooledFeature {
    pub fn zeros(dim: usize) -> Self {
        Self {
            known: vec![0.0; dim],
            unk_weight: 0.0,
        }
    }

    pub fn resolve(&self, unk: &[f64]) -> Vec<f64> {
        self.known
            .iter()
            .zip(unk)
            .map(|(k, u)| k + self.unk_weight * u)
            .collect()
    }
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::WordVectors {
                line: 0,
                reason: format!("{token}: expected {} values, got {}", self.dim, vector.len()),
            });
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Parses the text format. A leading `count dim` header line is skipped.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::WordVectors {
                line: n + 1,
                reason: e.to_string(),
            })?;
            if n == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(Error::WordVectors {
                    line: n + 1,
                    reason: format!("expected {d} values, got {}", values.len()),
                });
            }
            vectors.insert(token.to_string(), values);
        }
        let dim = dim.ok_or(Error::WordVectors {
            line: 0,
            reason: "no vectors".into(),
        })?;
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Writes tokens in sorted order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            write!(w, "{t}")?;
            for v in &self.vectors[t] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Mean of per-token vectors; tokens without a vector contribute to `unk_weight`.
    pub fn pool<S: AsRef<str>>(&self, tokens: &[S]) -> PooledFeature {
        let mut out = PooledFeature::zeros(self.dim);
        if tokens.is_empty() {
            return out;
        }
        let inv = 1.0 / tokens.len() as f64;
        for t in tokens {
            match self.get(t.as_ref()) {
                Some(v) => {
                    for (o, x) in out.known.iter_mut().zip(v) {
                        *o += x * inv;
                    }
                }
                None => out.unk_weight += inv,
            }
        }
        out
    }
}
