//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! "DPPT"            4 bytes magic
//! version           u32 = 1
//! layer count       u32
//! per layer:
//!   name length     u16
//!   name            UTF-8 bytes
//!   frozen          u8 (0 or 1)
//!   rank            u8
//!   dims            rank × u64
//!   values          product(dims) × f64
//! ```
//!
//! The squared-gradient accumulator is stored in a sidecar file with the
//! same layout: one layer per accumulator entry (frozen = 0), followed by a
//! final one-element layer named [`STEPS_LAYER`] holding `steps_seen`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::freeze::SqGradAccumulator;
use crate::params::{GradTree, ParamTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPPT";
pub const VERSION: u32 = 1;
/// Reserved layer name carrying the accumulator step count.
pub const STEPS_LAYER: &str = "__steps_seen__";

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode<S: Scalar>(tree: &ParamTree<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + tree.total_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tree.len()).map_err(|_| Error::Config("too many layers".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for layer in tree.layers() {
        let name = layer.name.as_bytes();
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Config(format!("layer name too long: `{}`", layer.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(layer.frozen));
        let rank = u8::try_from(layer.tensor.rank())
            .map_err(|_| Error::Config(format!("rank too large in `{}`", layer.name)))?;
        out.push(rank);
        for &d in layer.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in layer.tensor.values() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamTree<S>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(fmt_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut tree = ParamTree::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| fmt_err(path, "layer name is not UTF-8"))?
            .to_string();
        let frozen = match r.array::<1>()?[0] {
            0 => false,
            1 => true,
            f => return Err(fmt_err(path, format!("bad frozen flag {f} in `{name}`"))),
        };
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            shape.push(usize::try_from(d).map_err(|_| fmt_err(path, "dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt_err(path, "size overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| fmt_err(path, "size overflow"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| fmt_err(path, e.to_string()))?;
        tree.push(name, tensor, frozen)
            .map_err(|e| fmt_err(path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(path, "trailing bytes"));
    }
    Ok(tree)
}

pub fn save<S: Scalar>(tree: &ParamTree<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(tree)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamTree<S>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

/// Path of the accumulator sidecar for a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sqacc");
    PathBuf::from(s)
}

pub fn save_accumulator<S: Scalar>(acc: &SqGradAccumulator<S>, path: &Path) -> Result<()> {
    let mut tree = ParamTree::<S>::new();
    for (name, t) in acc.sums().entries() {
        tree.push(name.clone(), t.clone(), false)?;
    }
    tree.push(STEPS_LAYER, Tensor::scalar(S::of(acc.steps_seen() as f64)), false)?;
    save(&tree, path)
}

pub fn load_accumulator<S: Scalar>(path: &Path) -> Result<SqGradAccumulator<S>> {
    let tree: ParamTree<S> = load(path)?;
    let steps_layer = tree.get(STEPS_LAYER).map_err(|_| fmt_err(path, "missing step count"))?;
    let steps = steps_layer.tensor.values()[0].as_f64();
    if steps < 0.0 || steps.fract() != 0.0 {
        return Err(fmt_err(path, format!("bad step count {steps}")));
    }
    let entries = tree
        .layers()
        .iter()
        .filter(|l| l.name != STEPS_LAYER)
        .map(|l| (l.name.clone(), l.tensor.clone()))
        .collect();
    SqGradAccumulator::from_parts(GradTree::from_entries(entries), steps as u64)
        .map_err(|e| fmt_err(path, e.to_string()))
}

/// Writes a checkpoint and, when given, its accumulator sidecar.
pub fn checkpoint_save<S: Scalar>(tree: &ParamTree<S>, acc: Option<&SqGradAccumulator<S>>, path: &Path) -> Result<()> {
    save(tree, path)?;
    if let Some(acc) = acc {
        save_accumulator(acc, &sidecar_path(path))?;
    }
    Ok(())
}

/// Reads a checkpoint and its accumulator sidecar if one exists.
pub fn checkpoint_load<S: Scalar>(path: &Path) -> Result<(ParamTree<S>, Option<SqGradAccumulator<S>>)> {
    let tree = load(path)?;
    let side = sidecar_path(path);
    let acc = if side.exists() {
        Some(load_accumulator(&side)?)
    } else {
        None
    };
    Ok((tree, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.push(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
            false,
        )
        .unwrap();
        t.push("γ", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), true)
            .unwrap();
        t
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&tree(), &a).unwrap();
        let loaded: ParamTree = load(&a).unwrap();
        save(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.frozen_names(), vec!["γ"]);
        assert_eq!(loaded, tree());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tree()).unwrap();
        assert_eq!(&bytes[..4], b"DPPT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&tree()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode::<f64>(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode(&tree()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode::<f64>(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&tree()).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn accumulator_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ws.ckpt");
        let t = tree();
        let mut acc = SqGradAccumulator::new(&t);
        let mut all = t.clone();
        all.freeze_all(false);
        let mut g = all.zero_grad();
        g.entries_mut()[0].1.values_mut()[1] = 0.75;
        acc.accumulate(&g).unwrap();
        acc.accumulate(&g).unwrap();
        checkpoint_save(&t, Some(&acc), &path).unwrap();
        let (t2, acc2) = checkpoint_load::<f64>(&path).unwrap();
        assert_eq!(t2, t);
        assert_eq!(acc2.unwrap(), acc);
    }
}
