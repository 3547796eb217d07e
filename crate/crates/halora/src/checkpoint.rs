//! Checkpoint container for backbones and adapters.
//!
//! A small self-describing binary format, built for byte-level
//! reproducibility: no timestamps, sorted entry order, little-endian `f64`
//! payloads. The same container carries pretrained backbones (named
//! matrices) and trained adapters (named A/B pairs), plus a sorted
//! string-to-string metadata section for provenance (run id, mode, rank,
//! the checksum of the backbone an adapter set was trained against, ...).
//!
//! Layout:
//!
//! ```text
//! magic "HLRC" | u16 version | meta count | (key, value)* |
//! matrix count | (name, rows, cols, f64*)* |
//! adapter count | (name, d1, rank, d2, A f64*, B f64*)*
//! ```
//!
//! All integers little-endian (`u32` unless noted); strings are u32-length-
//! prefixed UTF-8. [`Checkpoint::digest`] hashes the serialized bytes, so
//! two checkpoints are interchangeable exactly when their digests match.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"HLRC";
const VERSION: u16 = 1;

/// Named matrices + named adapters + provenance metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub matrices: BTreeMap<String, Matrix>,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        write_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }

        write_u32(&mut out, self.matrices.len() as u32);
        for (name, m) in &self.matrices {
            write_str(&mut out, name);
            write_u32(&mut out, m.rows() as u32);
            write_u32(&mut out, m.cols() as u32);
            write_f64s(&mut out, m.data());
        }

        write_u32(&mut out, self.adapters.len() as u32);
        for (name, ad) in &self.adapters {
            write_str(&mut out, name);
            write_u32(&mut out, ad.a.rows() as u32);
            write_u32(&mut out, ad.rank() as u32);
            write_u32(&mut out, ad.b.cols() as u32);
            write_f64s(&mut out, ad.a.data());
            write_f64s(&mut out, ad.b.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }

        let mut meta = BTreeMap::new();
        for _ in 0..r.read_u32()? {
            let k = r.read_str()?;
            let v = r.read_str()?;
            meta.insert(k, v);
        }

        let mut matrices = BTreeMap::new();
        for _ in 0..r.read_u32()? {
            let name = r.read_str()?;
            let rows = r.read_u32()? as usize;
            let cols = r.read_u32()? as usize;
            let data = r.read_f64s(rows * cols)?;
            matrices.insert(name, Matrix::from_vec(rows, cols, data)?);
        }

        let mut adapters = BTreeMap::new();
        for _ in 0..r.read_u32()? {
            let name = r.read_str()?;
            let d1 = r.read_u32()? as usize;
            let rank = r.read_u32()? as usize;
            let d2 = r.read_u32()? as usize;
            let a = Matrix::from_vec(d1, rank, r.read_f64s(d1 * rank)?)?;
            let b = Matrix::from_vec(rank, d2, r.read_f64s(rank * d2)?)?;
            adapters.insert(name, LoraAdapter::from_parts(a, b)?);
        }

        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            meta,
            matrices,
            adapters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the serialized container, hex-encoded. Stable across
    /// save/load roundtrips.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Hex-encoded SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn write_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
    }

    fn read_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adapter;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(1);
        let mut ck = Checkpoint::new();
        ck.meta.insert("run_id".into(), "abc123".into());
        ck.meta.insert("mode".into(), "halora".into());
        ck.matrices
            .insert("layer0.wq".into(), rng.uniform_matrix(8, 8, -1.0, 1.0));
        ck.matrices
            .insert("layer0.wk".into(), rng.uniform_matrix(8, 8, -1.0, 1.0));
        ck.adapters
            .insert("layer0.wq".into(), init_adapter(8, 8, 2, &mut rng).unwrap());
        ck
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn digest_is_stable_across_roundtrip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck.digest(), back.digest());
        assert_eq!(ck.digest().len(), 64);
    }

    #[test]
    fn digest_changes_when_a_value_changes() {
        let ck = sample();
        let mut other = ck.clone();
        let m = other.matrices.get_mut("layer0.wq").unwrap();
        let v = m.get(0, 0) + 1e-12;
        m.set(0, 0, v);
        assert_ne!(ck.digest(), other.digest());
    }

    #[test]
    fn save_load_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/dir/model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_trailing_garbage() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        bytes.extend_from_slice(b"junk");
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        // SHA-256 of the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
