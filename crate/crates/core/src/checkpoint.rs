//! Versioned binary container for model weights and training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "DMIXCKPT"
//! version   u32       1
//! schedule  u8 flag; if 1: steps u32, beta_start f64, beta_end f64
//! metadata  u32 count, then (u32 len, utf-8 key, u32 len, utf-8 value)*
//! tensors   u32 count, then per entry:
//!           u32 len, utf-8 name, u32 ndim, u64 dims[ndim],
//!           u8 dtype (0 = f32, 1 = f64), raw little-endian elements
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{dtype_width, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"DMIXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub steps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: u8,
    data: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub schedule: Option<ScheduleParams>,
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has unparsable value {raw:?}")))
    }

    pub fn push_tensor<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut data = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
        for &v in t.data() {
            v.write_le(&mut data);
        }
        self.entries.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            data,
        });
    }

    pub fn push_all<T: Element>(&mut self, prefix: &str, tensors: &[(String, Tensor<T>)]) {
        for (n, t) in tensors {
            self.push_tensor(format!("{prefix}{n}"), t);
        }
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        decode_entry(e)
    }

    /// Every tensor whose name starts with `prefix`, with the prefix removed.
    pub fn tensors_with_prefix<T: Element>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.entries
            .iter()
            .filter_map(|e| e.name.strip_prefix(prefix).map(|rest| (rest, e)))
            .map(|(rest, e)| Ok((rest.to_string(), decode_entry(e)?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        match self.schedule {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.steps.to_le_bytes());
                out.extend_from_slice(&s.beta_start.to_le_bytes());
                out.extend_from_slice(&s.beta_end.to_le_bytes());
            }
            None => out.push(0),
        }
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.dtype);
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let schedule = match r.take(1)?[0] {
            0 => None,
            1 => Some(ScheduleParams {
                steps: r.u32()?,
                beta_start: r.f64()?,
                beta_end: r.f64()?,
            }),
            other => return Err(Error::Checkpoint(format!("bad schedule flag {other}"))),
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut entries = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = r.take(1)?[0];
            let width =
                dtype_width(dtype).ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: unknown dtype {dtype}")))?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: shape overflows")))?;
            let data = r.take(count)?.to_vec();
            entries.push(Entry {
                name,
                shape,
                dtype,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the tensor table".into()));
        }
        Ok(Self {
            schedule,
            metadata,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn decode_entry<T: Element>(e: &Entry) -> Result<Tensor<T>> {
    if e.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "tensor `{}` has dtype {} but {} was requested",
            e.name,
            e.dtype,
            T::DTYPE
        )));
    }
    let w = std::mem::size_of::<T>();
    let data = e.data.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(e.shape.clone(), data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint {
            schedule: Some(ScheduleParams {
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            }),
            ..Default::default()
        };
        c.set_meta("kind", "denoiser");
        c.push_tensor("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5));
        c.push_tensor("d", &Tensor::<f64>::full(&[1], std::f64::consts::PI));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor::<f64>("d").unwrap().item(), std::f64::consts::PI);
        assert!(back.tensor::<f32>("d").is_err());
        assert_eq!(back.meta("kind").unwrap(), "denoiser");
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut c = Checkpoint::default();
        c.push_tensor("w", &Tensor::<f32>::zeros(&[4]));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\x00\x00\x00").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
