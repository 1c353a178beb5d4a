//! Portable binary checkpoint format.
//!
//! Everything little-endian:
//!
//! ```text
//! magic "CCMK" | u32 version | u64 config_hash | u64 iteration | u64 seed
//! u8 optimizer_kind (0 = sgd, 1 = adam) | u64 adam_step
//! u32 n_params | n_params x record            (student parameters)
//! u8 has_adam_state | if 1: n_params x record twice (first moments, then second)
//! u8 has_teacher    | if 1: n_params x record  (teacher parameters)
//!
//! record: u16 name_len | name (utf8) | u32 rank | rank x u32 extents
//!         | product(extents) x f32 payload
//! ```
//!
//! The RNG state is the `(seed, iteration)` pair: all randomness is derived
//! per iteration from the master seed, so resuming at `iteration` reproduces
//! the uninterrupted run bitwise. Save/load round-trips are byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Parameters;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCMK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerCkpt {
    Sgd,
    Adam {
        step: u64,
        m: Vec<NamedArray>,
        v: Vec<NamedArray>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Next iteration to run; state reflects all iterations before it.
    pub iteration: u64,
    pub seed: u64,
    pub params: Vec<NamedArray>,
    pub optimizer: OptimizerCkpt,
    /// Present only when the teacher is not tied to the student (EMA mode).
    pub teacher: Option<Vec<NamedArray>>,
}

/// FNV-1a 64-bit, used for config hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn parameters_to_arrays(params: &Parameters<f32>) -> Vec<NamedArray> {
    params
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect()
}

pub fn arrays_to_parameters(arrays: &[NamedArray]) -> Result<Parameters<f32>> {
    let mut params = Parameters::new();
    for a in arrays {
        params.insert(a.name.clone(), Tensor::from_vec(a.shape.clone(), a.data.clone())?)?;
    }
    Ok(params)
}

fn write_record(buf: &mut Vec<u8>, rec: &NamedArray) -> Result<()> {
    if rec.name.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!(
            "parameter name too long: {}",
            rec.name.len()
        )));
    }
    buf.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
    buf.extend_from_slice(rec.name.as_bytes());
    buf.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
    for &e in &rec.shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let numel: usize = rec.shape.iter().product();
    if numel != rec.data.len() {
        return Err(Error::Checkpoint(format!(
            "{}: shape {:?} does not match buffer length {}",
            rec.name,
            rec.shape,
            rec.data.len()
        )));
    }
    for &v in &rec.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn record(&mut self) -> Result<NamedArray> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name not utf8: {e}")))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(NamedArray { name, shape, data })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash.to_le_bytes());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let (kind, step) = match &self.optimizer {
            OptimizerCkpt::Sgd => (0u8, 0u64),
            OptimizerCkpt::Adam { step, .. } => (1u8, *step),
        };
        buf.push(kind);
        buf.extend_from_slice(&step.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for rec in &self.params {
            write_record(&mut buf, rec)?;
        }
        match &self.optimizer {
            OptimizerCkpt::Sgd => buf.push(0),
            OptimizerCkpt::Adam { m, v, .. } => {
                if m.len() != self.params.len() || v.len() != self.params.len() {
                    return Err(Error::Checkpoint(
                        "adam moment arrays must match parameter count".into(),
                    ));
                }
                buf.push(1);
                for rec in m {
                    write_record(&mut buf, rec)?;
                }
                for rec in v {
                    write_record(&mut buf, rec)?;
                }
            }
        }
        match &self.teacher {
            None => buf.push(0),
            Some(teacher) => {
                if teacher.len() != self.params.len() {
                    return Err(Error::Checkpoint(
                        "teacher arrays must match parameter count".into(),
                    ));
                }
                buf.push(1);
                for rec in teacher {
                    write_record(&mut buf, rec)?;
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let kind = r.u8()?;
        let adam_step = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.record()?);
        }
        let has_adam = r.u8()?;
        let optimizer = match (kind, has_adam) {
            (0, 0) => OptimizerCkpt::Sgd,
            (1, 1) => {
                let mut m = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    m.push(r.record()?);
                }
                let mut v = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    v.push(r.record()?);
                }
                OptimizerCkpt::Adam {
                    step: adam_step,
                    m,
                    v,
                }
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "inconsistent optimizer encoding: kind {kind}, state flag {has_adam}"
                )))
            }
        };
        let teacher = match r.u8()? {
            0 => None,
            1 => {
                let mut t = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    t.push(r.record()?);
                }
                Some(t)
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad teacher flag {other}"
                )))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_hash,
            iteration,
            seed,
            params,
            optimizer,
            teacher,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn student_parameters(&self) -> Result<Parameters<f32>> {
        arrays_to_parameters(&self.params)
    }

    pub fn teacher_parameters(&self) -> Result<Parameters<f32>> {
        match &self.teacher {
            Some(t) => arrays_to_parameters(t),
            None => arrays_to_parameters(&self.params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: 0xDEAD_BEEF,
            iteration: 123,
            seed: 7,
            params: vec![
                NamedArray {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, 0.0, 1e-7, -42.0],
                },
                NamedArray {
                    name: "a.bias".into(),
                    shape: vec![2],
                    data: vec![0.5, -0.5],
                },
            ],
            optimizer: OptimizerCkpt::Adam {
                step: 9,
                m: vec![
                    NamedArray {
                        name: "a.weight".into(),
                        shape: vec![2, 3],
                        data: vec![0.0; 6],
                    },
                    NamedArray {
                        name: "a.bias".into(),
                        shape: vec![2],
                        data: vec![0.1, 0.2],
                    },
                ],
                v: vec![
                    NamedArray {
                        name: "a.weight".into(),
                        shape: vec![2, 3],
                        data: vec![0.25; 6],
                    },
                    NamedArray {
                        name: "a.bias".into(),
                        shape: vec![2],
                        data: vec![0.3, 0.4],
                    },
                ],
            },
            teacher: None,
        }
    }

    #[test]
    fn round_trip_is_bitwise_stable() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), fnv1a64(b"a"));
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
