//! Binary checkpoint container and its text manifest.
//!
//! Layout: the magic `FLMCKPT1`, a `u32` record count, then per record a `u32`
//! name length, the utf-8 name, a `u8` dtype tag (0 = f32, 1 = f64), a `u32`
//! rank, `u64` dims and the row-major data. All integers and floats are little
//! endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Array, Precision};

const MAGIC: &[u8; 8] = b"FLMCKPT1";

fn dtype_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let tag = dtype_tag(store.precision());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, a) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tag);
        out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for d in a.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in a.data() {
            match store.precision() {
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()?;
    let mut store: Option<ParamStore> = None;
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let precision = match r.take(1)?[0] {
            0 => Precision::F32,
            1 => Precision::F64,
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        };
        let store = store.get_or_insert_with(|| ParamStore::new(precision));
        if store.precision() != precision {
            return Err(Error::Checkpoint("mixed dtypes in one checkpoint".into()));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match precision {
            Precision::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let a = Array::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(name, a);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(store.unwrap_or_else(|| ParamStore::new(Precision::F32)))
}

/// One line per parameter: `name dtype d0xd1x...`.
pub fn manifest(store: &ParamStore) -> String {
    let dtype = match store.precision() {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let mut s = String::new();
    for (name, a) in store.iter() {
        let dims: Vec<String> = a.shape().iter().map(usize::to_string).collect();
        s.push_str(&format!("{name} {dtype} {}\n", dims.join("x")));
    }
    s
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the container to `path` and the manifest next to it.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    fs::write(&mp, manifest(store)).map_err(|e| Error::io(mp, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Names whose shapes or values differ, plus names present on one side only.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct Diff {
    pub changed: Vec<String>,
    pub only_left: Vec<String>,
    pub only_right: Vec<String>,
}

impl Diff {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.only_left.is_empty() && self.only_right.is_empty()
    }
}

pub fn diff(a: &ParamStore, b: &ParamStore) -> Diff {
    let mut d = Diff::default();
    for (name, x) in a.iter() {
        match b.get(name) {
            Ok(y) => {
                let same = x.shape() == y.shape()
                    && x.data()
                        .iter()
                        .zip(y.data())
                        .all(|(p, q)| p.to_bits() == q.to_bits());
                if !same {
                    d.changed.push(name.clone());
                }
            }
            Err(_) => d.only_left.push(name.clone()),
        }
    }
    d.only_right = b.names().filter(|n| !a.contains(n)).cloned().collect();
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(precision: Precision) -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new(precision);
        s.insert("embed.stream.0", Array::randn(&[4, 3], 1.0, &mut rng));
        s.insert("head.norm", Array::full(&[3], 1.0));
        s.insert("understand.0.attn.wq", Array::randn(&[3, 3], 0.1, &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for p in [Precision::F32, Precision::F64] {
            let s = sample(p);
            let back = decode(&encode(&s)).unwrap();
            assert_eq!(back, s);
            assert!(diff(&s, &back).is_empty());
        }
    }

    #[test]
    fn manifest_lists_names_and_shapes() {
        let m = manifest(&sample(Precision::F32));
        assert!(m.contains("embed.stream.0 f32 4x3\n"));
        assert_eq!(m.lines().count(), 3);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = encode(&sample(Precision::F32));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTACKPT").is_err());
    }

    #[test]
    fn compatibility_names_groups() {
        let a = sample(Precision::F32);
        let mut b = a.clone();
        b.insert("head.norm", Array::full(&[5], 1.0));
        match b.check_compatible(&a) {
            Err(Error::IncompatibleCheckpoint(groups)) => assert_eq!(groups, vec!["head"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
