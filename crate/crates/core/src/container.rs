//! Binary tensor container used for model checkpoints and adversarial
//! archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "VGCT"
//! version  u32 (= 1)
//! kind     u32 length + UTF-8
//! meta     u32 length + UTF-8 (JSON document)
//! count    u32
//! count × { name: u32 length + UTF-8, ndim: u32, dims: ndim × u64,
//!           data: prod(dims) × f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VGCT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "tensor `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("container has no tensor `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        write_str(w, &self.meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: io::Error| Error::Format(format!("truncated container: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let version = read_u32(r).map_err(fmt)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let kind = read_str(r)?;
        let meta = read_str(r)?;
        let count = read_u32(r).map_err(fmt)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(r)?;
            let ndim = read_u32(r).map_err(fmt)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(fmt)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw).map_err(fmt)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r).map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            meta in "[a-z{}\":0-9 ]{0,30}",
        ) {
            let mut c = Container::new("test", meta);
            c.push(Tensor::new("a", vec![vals.len()], vals.clone()).unwrap());
            c.push(Tensor::new("empty", vec![0, 3], vec![]).unwrap());
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Container::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&back.kind, &c.kind);
            prop_assert_eq!(&back.meta, &c.meta);
            let bits: Vec<u64> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(&back.tensors[1].shape, &vec![0, 3]);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Container::read_from(&mut &b"nope"[..]).is_err());
        let mut c = Container::new("k", "{}");
        c.push(Tensor::new("x", vec![2], vec![1.0, 2.0]).unwrap());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Container::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
