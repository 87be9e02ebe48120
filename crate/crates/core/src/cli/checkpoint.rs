//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `MAGIC`, `u32` version, method string, `u64` epoch, `u64` step, config
//! string, three tensor sections (parameters, optimizer state, extra state),
//! `u64` optimizer step count, then the SHA-256 of everything before it.
//! Strings are `u32` length plus UTF-8. A section is a `u32` count followed by
//! entries: name, `u8` trainable flag, `u32` rank, `u64` dims, f32 values.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CTSSLCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: String,
    pub epoch: u64,
    pub step: u64,
    /// Resolved run configuration in `key = value` form.
    pub config: String,
    pub params: ParamSet<f32>,
    pub optimizer_steps: u64,
    pub optimizer: Vec<(String, Tensor<f32>)>,
    /// Method state outside the parameters, such as a key queue.
    pub extra: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(method: &str, params: ParamSet<f32>) -> Self {
        Self {
            method: method.to_string(),
            epoch: 0,
            step: 0,
            config: String::new(),
            params,
            optimizer_steps: 0,
            optimizer: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.method);
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut b, &self.config);
        let params: Vec<(&str, bool, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.trainable, &p.value))
            .collect();
        put_section(&mut b, &params);
        put_section(
            &mut b,
            &self
                .optimizer
                .iter()
                .map(|(n, t)| (n.as_str(), false, t))
                .collect::<Vec<_>>(),
        );
        put_section(
            &mut b,
            &self
                .extra
                .iter()
                .map(|(n, t)| (n.as_str(), false, t))
                .collect::<Vec<_>>(),
        );
        b.extend_from_slice(&self.optimizer_steps.to_le_bytes());
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let mut r = Reader { b: bytes, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Migration {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(
                "checksum mismatch; the file is corrupt or truncated".into(),
            ));
        }
        r.b = body;
        let method = r.string()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let config = r.string()?;
        let mut params = ParamSet::new();
        for (name, trainable, t) in r.section()? {
            params.insert(name, t, trainable)?;
        }
        let optimizer = r.section()?.into_iter().map(|(n, _, t)| (n, t)).collect();
        let extra = r.section()?.into_iter().map(|(n, _, t)| (n, t)).collect();
        let optimizer_steps = r.u64()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(
                "trailing bytes after checkpoint body".into(),
            ));
        }
        Ok(Self {
            method,
            epoch,
            step,
            config,
            params,
            optimizer_steps,
            optimizer,
            extra,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_section(b: &mut Vec<u8>, entries: &[(&str, bool, &Tensor<f32>)]) {
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, trainable, t) in entries {
        put_str(b, name);
        b.push(u8::from(*trainable));
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn section(&mut self) -> Result<Vec<(String, bool, Tensor<f32>)>> {
        let n = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.string()?;
            let trainable = self.take(1)?[0] != 0;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = self
                .take(
                    count
                        .checked_mul(4)
                        .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
                )?
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((
                name.clone(),
                trainable,
                Tensor::new(&shape, data)
                    .map_err(|_| Error::Checkpoint(format!("tensor `{name}` is malformed")))?,
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert(
            "encoder.w",
            Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
            true,
        )
        .unwrap();
        p.insert(
            "encoder.bn.running_mean",
            Tensor::new(&[1], vec![0.25]).unwrap(),
            false,
        )
        .unwrap();
        let mut c = Checkpoint::new("moco", p);
        c.epoch = 2;
        c.step = 8;
        c.config = "method = moco\n".into();
        c.optimizer_steps = 8;
        c.optimizer = vec![("encoder.w.0".into(), Tensor::full(&[2, 2], 0.5))];
        c.extra = vec![("queue".into(), Tensor::full(&[3, 2], 0.1))];
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        let bits: Vec<u32> = back
            .params
            .get("encoder.w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(
            bits,
            c.params
                .get("encoder.w")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert!(
            !back
                .params
                .entry("encoder.bn.running_mean")
                .unwrap()
                .trainable
        );
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn version_and_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Migration {
                found: 9,
                expected: 1
            })
        ));
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
