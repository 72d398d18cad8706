//! Versioned binary model checkpoints.
//!
//! Layout (little endian): magic `WSMSCKPT`, `u32` version, `u8` precision
//! tag, a length-prefixed JSON metadata string, the parameters, the
//! batch-norm states and the optional input normalizer.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ParamEntry, ParamId, ParamRole, ParamStore};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"WSMSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub store: ParamStore<T>,
    pub normalizer: Option<Normalizer>,
    /// Free-form JSON describing the run (epoch, config).
    pub meta: String,
}

fn fmt_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    if len > r.get_ref().len() {
        return Err(Error::Format(format!("string length {len} exceeds checkpoint size")));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(fmt_err)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not valid UTF-8".into()))
}

fn write_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        v.write_le(out);
    }
}

fn read_values<T: Scalar>(r: &mut Cursor<&[u8]>, n: usize, stored: Precision) -> Result<Vec<T>> {
    let width = stored.tag() as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(width).is_none_or(|b| b > remaining) {
        return Err(Error::Format(format!("{n} values do not fit in the remaining {remaining} bytes")));
    }
    (0..n)
        .map(|_| {
            Ok(match stored {
                Precision::F32 => T::of(r.read_f32::<LE>().map_err(fmt_err)? as f64),
                Precision::F64 => T::of(r.read_f64::<LE>().map_err(fmt_err)?),
            })
        })
        .collect()
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.push(T::PRECISION.tag());
    write_str(&mut out, &ckpt.meta);

    out.write_u32::<LE>(ckpt.store.len() as u32).unwrap();
    for (id, e) in ckpt.store.iter() {
        out.write_u64::<LE>(id.0).unwrap();
        out.push(e.role.tag());
        write_str(&mut out, &e.name);
        out.write_u32::<LE>(e.tensor.shape().len() as u32).unwrap();
        for &d in e.tensor.shape() {
            out.write_u64::<LE>(d as u64).unwrap();
        }
        write_values(&mut out, e.tensor.data());
    }

    let bns: Vec<_> = ckpt.store.bn_states().collect();
    out.write_u32::<LE>(bns.len() as u32).unwrap();
    for (_, s) in bns {
        write_str(&mut out, &s.name);
        out.write_u64::<LE>(s.gamma.0).unwrap();
        out.write_u64::<LE>(s.beta.0).unwrap();
        out.write_f64::<LE>(s.momentum).unwrap();
        out.write_f64::<LE>(s.eps).unwrap();
        out.write_u32::<LE>(s.channels() as u32).unwrap();
        write_values(&mut out, &s.running_mean);
        write_values(&mut out, &s.running_var);
    }

    match &ckpt.normalizer {
        None => out.push(0),
        Some(n) => {
            out.push(1);
            out.write_u32::<LE>(n.mean.len() as u32).unwrap();
            for &v in n.mean.iter().chain(&n.std) {
                out.write_f32::<LE>(v).unwrap();
            }
        }
    }
    out
}

/// Decodes a checkpoint. Values stored at a different precision are
/// converted to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file is too short to be a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.read_u32::<LE>().map_err(fmt_err)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let tag = r.read_u8().map_err(fmt_err)?;
    let stored = Precision::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
    if stored != T::PRECISION {
        log::warn!("converting {stored} checkpoint to {}", T::PRECISION);
    }
    let meta = read_str(&mut r)?;

    let mut store = ParamStore::new();
    let count = r.read_u32::<LE>().map_err(fmt_err)?;
    for _ in 0..count {
        let id = ParamId(r.read_u64::<LE>().map_err(fmt_err)?);
        let role_tag = r.read_u8().map_err(fmt_err)?;
        let role = ParamRole::from_tag(role_tag).ok_or_else(|| Error::Format(format!("unknown role tag {role_tag}")))?;
        let name = read_str(&mut r)?;
        let rank = r.read_u32::<LE>().map_err(fmt_err)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(fmt_err))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("parameter `{name}` shape overflows")))?;
        let data = read_values(&mut r, numel, stored)?;
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        store
            .insert_raw(id, ParamEntry { name, role, tensor })
            .map_err(|e| Error::Format(e.to_string()))?;
    }

    let bn_count = r.read_u32::<LE>().map_err(fmt_err)?;
    for _ in 0..bn_count {
        let name = read_str(&mut r)?;
        let gamma = ParamId(r.read_u64::<LE>().map_err(fmt_err)?);
        let beta = ParamId(r.read_u64::<LE>().map_err(fmt_err)?);
        let momentum = r.read_f64::<LE>().map_err(fmt_err)?;
        let eps = r.read_f64::<LE>().map_err(fmt_err)?;
        let ch = r.read_u32::<LE>().map_err(fmt_err)? as usize;
        let running_mean = read_values(&mut r, ch, stored)?;
        let running_var = read_values(&mut r, ch, stored)?;
        store
            .push_bn_raw(BatchNormState { name, gamma, beta, running_mean, running_var, momentum, eps })
            .map_err(|e| Error::Format(e.to_string()))?;
    }

    let normalizer = match r.read_u8().map_err(fmt_err)? {
        0 => None,
        1 => {
            let ch = r.read_u32::<LE>().map_err(fmt_err)? as usize;
            let vals = read_values::<f32>(&mut r, 2 * ch, Precision::F32)?;
            Some(Normalizer { mean: vals[..ch].to_vec(), std: vals[ch..].to_vec() })
        }
        other => return Err(Error::Format(format!("bad normalizer flag {other}"))),
    };
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.position() as usize
        )));
    }
    Ok(Checkpoint { store, normalizer, meta })
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(ckpt))?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies parameter values and batch-norm statistics into `target`,
    /// which must have been built from the same architecture.
    pub fn restore_into(&self, target: &mut ParamStore<T>) -> Result<()> {
        if self.store.len() != target.len() {
            return Err(Error::InvalidState(format!(
                "checkpoint has {} parameters, model has {}",
                self.store.len(),
                target.len()
            )));
        }
        for (id, e) in self.store.iter() {
            let dst = target
                .get(id)
                .ok_or_else(|| Error::InvalidState(format!("model has no parameter {id} (`{}`)", e.name)))?;
            if dst.name != e.name || dst.tensor.shape() != e.tensor.shape() {
                return Err(Error::InvalidState(format!(
                    "parameter {id}: checkpoint `{}` {:?} does not match model `{}` {:?}",
                    e.name,
                    e.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            *target.tensor_mut(id)? = e.tensor.clone();
        }
        let src: Vec<_> = self.store.bn_states().collect();
        let dst_count = target.bn_states().count();
        if src.len() != dst_count {
            return Err(Error::InvalidState(format!(
                "checkpoint has {} batch norms, model has {dst_count}",
                src.len()
            )));
        }
        for (bid, s) in src {
            let d = target.bn_mut(bid)?;
            if d.name != s.name || d.channels() != s.channels() {
                return Err(Error::InvalidState(format!("batch norm `{}` does not match `{}`", s.name, d.name)));
            }
            d.running_mean.clone_from(&s.running_mean);
            d.running_var.clone_from(&s.running_var);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParamStore::<f32>::new();
        store.register("w", ParamRole::ConvWeight, Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.1 - 0.7));
        let bn = store.add_batch_norm("bn", 2);
        store.bn_mut(bn).unwrap().running_mean = vec![0.25, -1.5];
        Checkpoint {
            store,
            normalizer: Some(Normalizer { mean: vec![0.1, 0.2, 0.3], std: vec![1.0, 2.0, 3.0] }),
            meta: "{\"epoch\":3}".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back: Checkpoint<f32> = decode(&encode(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), encode(&c));
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let bytes = encode(&sample());
        for cut in [0, 5, 13, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode::<f32>(&long), Err(Error::Format(_))));
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let c = sample();
        let back: Checkpoint<f64> = decode(&encode(&c)).unwrap();
        let (_, e) = back.store.iter().next().unwrap();
        assert_eq!(e.tensor.data()[1], (0.1f32 - 0.7f32) as f64);
    }
}
