use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors in insertion order.
///
/// The version counter increases on every optimizer update so that caches
/// derived from parameter values can detect staleness.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }

    pub fn init<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> Result<usize> {
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                (0..rows * cols).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..rows * cols).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(name, Tensor::new(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &*self.values[i])
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub(crate) fn value_arc(&self, index: usize) -> Arc<Tensor> {
        self.values[index].clone()
    }

    /// Mutable access; bumps the version.
    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        self.version += 1;
        Arc::make_mut(&mut self.values[index])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(self.value_mut(i))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_parameter",
                left: self.values[i].shape(),
                right: value.shape(),
            });
        }
        *self.value_mut(i) = value;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParameterSet::new();
        p.init("w", 4, 12, Init::Xavier, &mut rng).unwrap();
        let a = (6.0f64 / 16.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert!(p.insert("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn mutation_bumps_version() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(1, 1)).unwrap();
        let v = p.version();
        p.get_mut("a").unwrap().set(0, 0, 1.0);
        assert!(p.version() > v);
    }
}
