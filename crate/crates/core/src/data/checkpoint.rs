//! `CDCK` checkpoint format. All integers and reals are little-endian.
//!
//! ```text
//! magic        4 bytes  "CDCK"
//! version      u32
//! step         u64
//! lr           f64
//! seed         u64
//! attr count   u32, then per attribute: key (u32 len + utf8), value (u32 len + utf8)
//! tensor count u32, then per tensor:
//!     name     u32 len + utf8
//!     rank     u32
//!     extents  rank x u64
//!     data     prod(extents) x f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
    /// Free-form string attributes (model kind, serialized configs, ...).
    pub attrs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 4 * params.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.step.to_le_bytes());
    buf.extend_from_slice(&meta.lr.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&(meta.attrs.len() as u32).to_le_bytes());
    for (k, v) in &meta.attrs {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamSet<f32>) -> Result<()> {
    fs::write(path, encode(meta, params))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid utf-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a CDCK checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let step = r.u64("step")?;
    let lr = f64::from_bits(r.u64("lr")?);
    let seed = r.u64("seed")?;
    let mut attrs = BTreeMap::new();
    for _ in 0..r.u32("attribute count")? {
        let k = r.string("attribute key")?;
        let v = r.string("attribute value")?;
        attrs.insert(k, v);
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("tensor extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is too large")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        meta: CheckpointMeta { step, lr, seed, attrs },
        tensors,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Copy every stored tensor into `params`. Names and shapes are checked
    /// for all tensors before any parameter is written.
    pub fn load_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let mut targets = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let idx = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}' for this model")))?;
            let expected = params.tensor(idx).shape();
            if expected != t.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            targets.push(idx);
        }
        let mut seen = vec![false; params.len()];
        for &i in &targets {
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has no tensor '{}'",
                params.name(missing)
            )));
        }
        for (idx, (_, t)) in targets.into_iter().zip(&self.tensors) {
            params.set(idx, t.clone())?;
        }
        Ok(())
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.meta
            .attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing attribute '{key}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointMeta, ParamSet<f32>) {
        let mut p = ParamSet::new();
        p.push(
            "a.weight",
            Tensor::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0]).unwrap(),
        );
        p.push("a.bias", Tensor::new(&[2], vec![0.25, -7.0]).unwrap());
        let mut meta = CheckpointMeta {
            step: 42,
            lr: 2e-4,
            seed: 9,
            ..Default::default()
        };
        meta.attrs.insert("model".into(), "wnet".into());
        (meta, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (meta, p) = sample();
        let ck = decode(&encode(&meta, &p)).unwrap();
        assert_eq!(ck.meta, meta);
        let mut q = p.clone();
        q.fill(9.0);
        ck.load_into(&mut q).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn structural_errors() {
        let (meta, p) = sample();
        let bytes = encode(&meta, &p);
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        match decode(&v2).unwrap_err() {
            Error::CheckpointVersion { found, expected } => assert_eq!((found, expected), (2, 1)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_name_leaves_model_untouched() {
        let (meta, p) = sample();
        let mut other = ParamSet::new();
        other.push("a.weight", Tensor::zeros(&[2, 3]).unwrap());
        other.push("b.bias", Tensor::zeros(&[2]).unwrap());
        let ck = decode(&encode(&meta, &p)).unwrap();
        assert!(ck.load_into(&mut other).is_err());
        assert!(other.tensor(0).data().iter().all(|&v| v == 0.0));
    }
}
