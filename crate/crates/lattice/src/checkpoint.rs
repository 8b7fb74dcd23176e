//! Checkpoint archive: one file holding the model configuration and every
//! named parameter tensor.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes   "ALCK"
//! version   u32       1
//! cfg_len   u64       length of the JSON-encoded model configuration
//! cfg       bytes     serde_json of ModelConfig
//! count     u64       number of tensors
//! per tensor:
//!   name_len u64, name utf-8 bytes
//!   dtype    u8       0 = f64, 1 = f32
//!   ndim     u64, dims u64 × ndim
//!   data     dtype-sized little-endian floats, row-major
//! digest    32 bytes  SHA-256 of everything above
//! ```
//!
//! Saving writes f64 (bit-exact round trip, used for resume and
//! determinism checks) or f32 (half the size, for sharing); loading
//! accepts both and widens f32 to f64.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"ALCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

fn encode(cfg: &ModelConfig, store: &ParamStore, as_f32: bool) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(cfg)
        .map_err(|e| Error::Internal(format!("cannot encode config: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, value) in store.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(if as_f32 { DTYPE_F32 } else { DTYPE_F64 });
        buf.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            if as_f32 {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Save with full f64 precision; loading restores every bit.
pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    write_atomically(path, &encode(cfg, store, false)?)
}

/// Save with f32 tensors (half the size, lossy).
pub fn save_f32(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    write_atomically(path, &encode(cfg, store, true)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Input(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Load a checkpoint; verifies the trailing digest before decoding.
pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Input(format!("{} is too short to be a checkpoint", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Input(format!("{} is corrupt: digest mismatch", path.display())));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Input(format!("{} is not a checkpoint archive", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = r.u64()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Input(format!("bad checkpoint config: {e}")))?;
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Input("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => {
                return Err(Error::Input(format!("unknown tensor dtype {other} for {name}")))
            }
        };
        let array = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Input(format!("bad tensor {name}: {e}")))?;
        store.insert(&name, array);
    }
    if r.pos != body.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} trailing bytes",
            body.len() - r.pos
        )));
    }
    cfg.validate()?;
    Ok((cfg, store))
}

/// SHA-256 of a file's bytes, for provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::params::hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let model = Model::new(crate::model::tests::toy_config(true), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model.cfg, &model.store).unwrap();
        let (cfg, store) = load(&path).unwrap();
        assert_eq!(store.checksum(), model.store.checksum());
        assert_eq!(cfg.num_classes, model.cfg.num_classes);
        assert_eq!(cfg.encoder.num_blocks, model.cfg.encoder.num_blocks);
        // Reconstructed model behaves identically.
        let restored = Model::from_parts(cfg, store).unwrap();
        assert_eq!(restored.checksum(), model.checksum());
    }

    #[test]
    fn f32_round_trip_is_close_but_lossy() {
        let model = Model::new(crate::model::tests::toy_config(false), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.ckpt");
        save_f32(&path, &model.cfg, &model.store).unwrap();
        let (_, store) = load(&path).unwrap();
        assert_ne!(store.checksum(), model.store.checksum());
        for (name, value) in model.store.iter() {
            let loaded = store.get(name).unwrap();
            for (&a, &b) in value.iter().zip(loaded.iter()) {
                assert!((a - b).abs() <= a.abs() * 1e-6 + 1e-9, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let model = Model::new(crate::model::tests::toy_config(false), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model.cfg, &model.store).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(load(&bad).is_err());

        let clean = fs::read(&path).unwrap();
        let short = dir.path().join("short.ckpt");
        fs::write(&short, &clean[..clean.len() - 10]).unwrap();
        assert!(load(&short).is_err());

        let garbage = dir.path().join("garbage.ckpt");
        fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(load(&garbage).is_err());
    }

    #[test]
    fn file_hash_is_stable_and_content_sensitive() {
        let model = Model::new(crate::model::tests::toy_config(false), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, &model.cfg, &model.store).unwrap();
        save(&b, &model.cfg, &model.store).unwrap();
        assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap());
        let other = Model::new(crate::model::tests::toy_config(false), 6).unwrap();
        let c = dir.path().join("c.ckpt");
        save(&c, &other.cfg, &other.store).unwrap();
        assert_ne!(file_sha256(&a).unwrap(), file_sha256(&c).unwrap());
    }
}
