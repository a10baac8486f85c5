//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TXGCKPT\0"
//! version  u32
//! seed     u64
//! meta     u64 length + UTF-8 bytes (caller-defined JSON)
//! count    u32
//! tensors  count x { u32 name length, name, u32 rows, u32 cols, rows*cols f64 }
//! step     u64 optimizer step
//! moments  count x { u8 present, [rows*cols f64 first, rows*cols f64 second] }
//! ```

use std::io::{Read, Write};

use super::optim::Adam;
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TXGCKPT\0";
pub const VERSION: u32 = 1;

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub metadata: String,
    pub params: ParameterSet,
    pub optimizer_step: u64,
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Checkpoint {
    pub fn capture(seed: u64, metadata: String, params: &ParameterSet, optimizer: Option<&Adam>) -> Self {
        let moments = (0..params.len())
            .map(|i| {
                optimizer
                    .and_then(|o| o.moments(i))
                    .map(|(m, v)| (m.clone(), v.clone()))
            })
            .collect();
        Self {
            seed,
            metadata,
            params: params.clone(),
            optimizer_step: optimizer.map_or(0, Adam::steps),
            moments,
        }
    }

    /// Restores optimizer moments into `optimizer`.
    pub fn restore_optimizer(&self, optimizer: &mut Adam) {
        optimizer.restore(self.optimizer_step, self.moments.clone());
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            write_values(w, t)?;
        }
        w.write_all(&self.optimizer_step.to_le_bytes())?;
        for m in &self.moments {
            match m {
                Some((a, b)) => {
                    w.write_all(&[1])?;
                    write_values(w, a)?;
                    write_values(w, b)?;
                }
                None => w.write_all(&[0])?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "incompatible version {version}, expected {VERSION}"
            )));
        }
        let seed = read_u64(r)?;
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(truncated)?;
        let metadata =
            String::from_utf8(meta).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = read_u32(r)? as usize;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let t = read_values(r, rows, cols)?;
            params.insert(&name, t)?;
        }
        let optimizer_step = read_u64(r)?;
        let mut moments = Vec::with_capacity(count);
        for i in 0..count {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(truncated)?;
            let [rows, cols] = params.value(i).shape();
            moments.push(match flag[0] {
                0 => None,
                1 => Some((read_values(r, rows, cols)?, read_values(r, rows, cols)?)),
                f => return Err(Error::Checkpoint(format!("bad moment flag {f}"))),
            });
        }
        Ok(Self {
            seed,
            metadata,
            params,
            optimizer_step,
            moments,
        })
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated file".into())
}

fn write_values<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_values<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(rows, cols, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::AdamConfig;

    #[test]
    fn round_trip_preserves_everything() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        p.insert("b", Tensor::scalar(0.1)).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[(0, Tensor::filled(2, 2, 0.5))]).unwrap();
        let ck = Checkpoint::capture(7, "{\"k\":1}".into(), &p, Some(&opt));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.metadata, "{\"k\":1}");
        assert_eq!(back.optimizer_step, 1);
        assert_eq!(back.params.get("a"), p.get("a"));
        assert!(back.moments[0].is_some());
        assert!(back.moments[1].is_none());
    }

    #[test]
    fn rejects_other_versions() {
        let ck = Checkpoint::capture(0, String::new(), &ParameterSet::new(), None);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes[8] = 99;
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("incompatible version 99"));
    }
}
