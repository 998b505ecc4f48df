//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PPCKPT01"  u32 version  u8 dtype
//! str architecture descriptor   str architecture json
//! str config json               str config hash
//! u64 step
//! u64 tensor count, per tensor: str name, u32 rank, u64 dims…, values, m, v
//! u64 points, positions (f64 ×3), features, feature m, feature v (f64 ×8), u64 steps
//! [32] SHA-256 of everything above
//! ```
//!
//! `str` is a `u64` byte length followed by UTF-8.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{with_path, Error, Result};
use crate::network::{Architecture, NetworkParams};
use crate::pointcloud::{PointCloudStore, APPEARANCE_DIM};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"PPCKPT01";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn scalars<T: Scalar>(&mut self, v: &[T]) {
        for x in v {
            x.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("length overflows"))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 in checkpoint"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("length overflows"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::format("length overflows"))?)?;
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = self.state.params.architecture();
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(T::DTYPE.tag());
        w.str(&arch.descriptor());
        w.str(&serde_json::to_string(arch)?);
        w.str(&serde_json::to_string(&self.config)?);
        w.str(&self.config.hash());
        w.u64(self.state.step);
        w.u64(self.state.params.len() as u64);
        for ((name, t), (m, v)) in self.state.params.iter().zip(&self.state.moments) {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.scalars(t.data());
            w.scalars(m.data());
            w.scalars(v.data());
        }
        let store = &self.state.store;
        w.u64(store.len() as u64);
        for p in store.positions() {
            w.f64s(p);
        }
        w.f64s(store.feature_matrix());
        w.f64s(&self.state.feature_m);
        w.f64s(&self.state.feature_v);
        for s in &self.state.feature_steps {
            w.u64(*s);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 5 + DIGEST_LEN {
            return Err(Error::format("checkpoint is truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: 0 };
        r.take(MAGIC.len())?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format("checkpoint checksum mismatch (truncated or corrupt)"));
        }
        let tag = r.u8()?;
        if tag != T::DTYPE.tag() {
            let found = [DType::F32, DType::F64].into_iter().find(|d| d.tag() == tag);
            return Err(Error::Incompatible(format!(
                "checkpoint holds {found:?} values, expected {:?}",
                T::DTYPE
            )));
        }
        let descriptor = r.str()?;
        let arch: Architecture = serde_json::from_str(&r.str()?)?;
        if arch.descriptor() != descriptor {
            return Err(Error::Incompatible(
                "architecture descriptor does not match this build".into(),
            ));
        }
        let config_json = r.str()?;
        let config: TrainConfig = serde_json::from_str(&config_json)?;
        let hash = r.str()?;
        if config.hash() != hash {
            return Err(Error::Incompatible("config hash mismatch".into()));
        }
        if config.architecture != arch {
            return Err(Error::Incompatible("config and stored architecture differ".into()));
        }
        let step = r.u64()?;
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count);
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let n = n.ok_or_else(|| Error::format("tensor size overflows"))?;
            let value = Tensor::from_vec(shape.clone(), r.scalars(n)?)?;
            let m = Tensor::from_vec(shape.clone(), r.scalars(n)?)?;
            let v = Tensor::from_vec(shape, r.scalars(n)?)?;
            tensors.push((name, value));
            moments.push((m, v));
        }
        let params = NetworkParams::from_named(arch, tensors).map_err(|e| Error::Incompatible(e.to_string()))?;
        let n = r.len()?;
        let flat = r.f64s(n.checked_mul(3).ok_or_else(|| Error::format("length overflows"))?)?;
        let positions = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let features = r.f64s(n * APPEARANCE_DIM)?;
        let feature_m = r.f64s(n * APPEARANCE_DIM)?;
        let feature_v = r.f64s(n * APPEARANCE_DIM)?;
        let feature_steps = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
        if r.pos != body.len() {
            return Err(Error::format("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                params,
                moments,
                store: PointCloudStore::from_parts(positions, features)?,
                feature_m,
                feature_v,
                feature_steps,
                step,
            },
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = with_path(&tmp, std::fs::File::create(&tmp))?;
            with_path(&tmp, f.write_all(&bytes))?;
            with_path(&tmp, f.sync_all())?;
        }
        with_path(path, std::fs::rename(&tmp, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = with_path(path, std::fs::read(path))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was written under `config`.
    pub fn ensure_config(&self, config: &TrainConfig) -> Result<()> {
        if self.config.hash() != config.hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} differs from {}",
                self.config.hash(),
                config.hash()
            )));
        }
        Ok(())
    }
}

/// Reads only the dtype tag of a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = with_path(path, std::fs::read(path))?;
    if bytes.len() < MAGIC.len() + 5 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let tag = bytes[MAGIC.len() + 4];
    [DType::F32, DType::F64]
        .into_iter()
        .find(|d| d.tag() == tag)
        .ok_or_else(|| Error::format(format!("unknown dtype tag {tag}")))
}
