//! Binary tensor archive for checkpoints. Layout, all little endian:
//!
//! ```text
//! magic "RDMB" | version: u32 | count: u32
//! per entry:
//!   name_len: u32 | name bytes (utf-8)
//!   dtype: u8 (0 = f32, 1 = f64)
//!   rank: u32 | extents: u64 * rank
//!   values, row major, in the entry dtype
//! ```

use crate::backbone::Backbone;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RDMB";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a tensor archive")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("invalid utf-8 in entry name")]
    BadName,
    #[error("archive truncated")]
    Truncated,
    #[error("entry {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing entry {0}")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub entries: Vec<Entry>,
}

impl TensorArchive {
    pub fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(Entry { name: name.to_string(), dtype, shape: shape.to_vec(), values });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ArchiveError> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[match e.dtype {
                Dtype::F32 => 0u8,
                Dtype::F64 => 1u8,
            }])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match e.dtype {
                Dtype::F32 => {
                    for &v in &e.values {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                Dtype::F64 => {
                    for &v in &e.values {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<TensorArchive, ArchiveError> {
        fn bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ArchiveError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    ArchiveError::Truncated
                } else {
                    ArchiveError::Io(e)
                }
            })?;
            Ok(buf)
        }
        if bytes::<4>(r)? != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes::<4>(r)?);
        if version != VERSION {
            return Err(ArchiveError::BadVersion(version));
        }
        let count = u32::from_le_bytes(bytes::<4>(r)?);
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(bytes::<4>(r)?) as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf).map_err(|_| ArchiveError::Truncated)?;
            let name = String::from_utf8(nbuf).map_err(|_| ArchiveError::BadName)?;
            let dtype = match bytes::<1>(r)?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                t => return Err(ArchiveError::BadDtype(t)),
            };
            let rank = u32::from_le_bytes(bytes::<4>(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(bytes::<8>(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            match dtype {
                Dtype::F32 => {
                    for _ in 0..n {
                        values.push(f32::from_le_bytes(bytes::<4>(r)?) as f64);
                    }
                }
                Dtype::F64 => {
                    for _ in 0..n {
                        values.push(f64::from_le_bytes(bytes::<8>(r)?));
                    }
                }
            }
            entries.push(Entry { name, dtype, shape, values });
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TensorArchive, ArchiveError> {
        TensorArchive::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Snapshot every named parameter of the network, f64 so a reload is bitwise.
pub fn checkpoint_of(net: &Backbone) -> TensorArchive {
    let mut ar = TensorArchive::default();
    for (name, p) in net.named_params() {
        ar.push(&name, Dtype::F64, p.shape(), p.to_vec());
    }
    ar
}

pub fn save_checkpoint(net: &Backbone, path: &Path) -> Result<(), ArchiveError> {
    checkpoint_of(net).save(path)
}

/// Copy archive contents into the network in place. Every parameter must be
/// present with its exact shape.
pub fn load_checkpoint(net: &Backbone, ar: &TensorArchive) -> Result<(), ArchiveError> {
    for (name, p) in net.named_params() {
        let e = ar.get(&name).ok_or_else(|| ArchiveError::Missing(name.clone()))?;
        if e.shape != p.shape() {
            return Err(ArchiveError::ShapeMismatch {
                name,
                expected: p.shape().to_vec(),
                found: e.shape.clone(),
            });
        }
        p.set_data(&e.values);
    }
    Ok(())
}

/// Convenience for tools that only need tensors, not a network.
pub fn tensor_entries(ts: &[(String, Tensor)]) -> TensorArchive {
    let mut ar = TensorArchive::default();
    for (name, t) in ts {
        ar.push(name, Dtype::F64, t.shape(), t.to_vec());
    }
    ar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(ar: &TensorArchive) -> TensorArchive {
        let mut buf = Vec::new();
        ar.write_to(&mut buf).unwrap();
        TensorArchive::read_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn f64_roundtrip_is_bitwise() {
        let mut ar = TensorArchive::default();
        let vals = vec![0.1, -2.5e300, f64::MIN_POSITIVE, 0.0, 1.0 / 3.0];
        ar.push("a", Dtype::F64, &[5], vals.clone());
        ar.push("b", Dtype::F64, &[1, 2], vec![std::f64::consts::PI, -0.0]);
        let back = roundtrip(&ar);
        assert_eq!(back.entries.len(), 2);
        let a = back.get("a").unwrap();
        assert_eq!(a.shape, vec![5]);
        for (x, y) in a.values.iter().zip(&vals) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.get("b").unwrap().values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn f32_roundtrip_quantizes_once() {
        let mut ar = TensorArchive::default();
        ar.push("x", Dtype::F32, &[3], vec![0.1, 1.0 / 3.0, -7.25]);
        let once = roundtrip(&ar);
        let twice = roundtrip(&once);
        for (a, b) in once.get("x").unwrap().values.iter().zip(&twice.get("x").unwrap().values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(once.get("x").unwrap().values[0], 0.1f32 as f64);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut ar = TensorArchive::default();
        ar.push("x", Dtype::F64, &[1], vec![1.0]);
        let mut buf = Vec::new();
        ar.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            TensorArchive::read_from(&mut buf.as_slice()),
            Err(ArchiveError::BadMagic)
        ));
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let mut ar = TensorArchive::default();
        ar.push("x", Dtype::F64, &[4], vec![1.0; 4]);
        let mut buf = Vec::new();
        ar.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            TensorArchive::read_from(&mut buf.as_slice()),
            Err(ArchiveError::Truncated)
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut ar = TensorArchive::default();
        ar.push("x", Dtype::F64, &[1], vec![1.0]);
        let mut buf = Vec::new();
        ar.write_to(&mut buf).unwrap();
        buf[4] = 99;
        assert!(matches!(
            TensorArchive::read_from(&mut buf.as_slice()),
            Err(ArchiveError::BadVersion(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_restores_network_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BackboneConfig::micro();
        let net = Backbone::new(&cfg, &mut rng);
        let before: Vec<Vec<f64>> = net.params(true).iter().map(|p| p.to_vec()).collect();
        let ar = roundtrip(&checkpoint_of(&net));
        // scramble, then restore
        for p in net.params(true) {
            p.set_data(&vec![42.0; p.numel()]);
        }
        load_checkpoint(&net, &ar).unwrap();
        let after: Vec<Vec<f64>> = net.params(true).iter().map(|p| p.to_vec()).collect();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_shape_mismatch_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BackboneConfig::micro();
        let net = Backbone::new(&cfg, &mut rng);
        let mut ar = checkpoint_of(&net);
        let i = ar.entries.iter().position(|e| e.name == "head.b").unwrap();
        ar.entries[i].shape = vec![5];
        ar.entries[i].values = vec![0.0; 5];
        match load_checkpoint(&net, &ar) {
            Err(ArchiveError::ShapeMismatch { name, .. }) => assert_eq!(name, "head.b"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_missing_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig::micro();
        let net = Backbone::new(&cfg, &mut rng);
        let mut ar = checkpoint_of(&net);
        ar.entries.retain(|e| e.name != "stem.w");
        assert!(matches!(load_checkpoint(&net, &ar), Err(ArchiveError::Missing(n)) if n == "stem.w"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = std::env::temp_dir().join("rdmb_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.rdmb");
        let mut ar = TensorArchive::default();
        ar.push("w", Dtype::F64, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        ar.save(&path).unwrap();
        let back = TensorArchive::load(&path).unwrap();
        assert_eq!(back.get("w").unwrap().values, vec![1.0, 2.0, 3.0, 4.0]);
        std::fs::remove_file(&path).unwrap();
    }
}
