//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, all floats little-endian IEEE-754
//! `f64`. Strings are a `u32` byte length followed by UTF-8 bytes.
//!
//! ```text
//! magic        12 bytes  "sinn-ckpt-1\n"
//! variant      string    logistic | topdown | binn | sinn
//! feature_dim  u32
//! layers       u32, then one u32 size per layer
//! graph_hash   string    hex SHA-256 of the canonical graph text
//! tensors      u32 count, then per tensor:
//!                name string, rows u32, cols u32, rows*cols f64 (row-major)
//! ```
//!
//! Tensors are written in ascending name order (the order of [`ParamId`]).

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layout, ModelParams, ParamId, Tensors, Variant};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 12] = b"sinn-ckpt-1\n";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * p.num_values());
    out.extend_from_slice(MAGIC);
    put_str(&mut out, p.variant.as_str());
    put_u32(&mut out, p.feature_dim);
    put_u32(&mut out, p.sizes.len());
    for &n in &p.sizes {
        put_u32(&mut out, n);
    }
    put_str(&mut out, &p.graph_hash);
    put_u32(&mut out, p.tensors.len());
    for (id, m) in &p.tensors {
        put_str(&mut out, &id.to_string());
        put_u32(&mut out, m.rows());
        put_u32(&mut out, m.cols());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a sinn-ckpt-1 file".into()));
    }
    let variant: Variant = r.string()?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    let feature_dim = r.u32()?;
    let layers = r.u32()?;
    let sizes = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let graph_hash = r.string()?;
    let count = r.u32()?;
    let mut tensors = Tensors::new();
    for _ in 0..count {
        let id: ParamId = r.string()?.parse()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if tensors.insert(id, Matrix::from_vec(rows, cols, data)?).is_some() {
            return Err(Error::Checkpoint(format!("tensor {id} appears twice")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let expected = layout(variant, &sizes, feature_dim);
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!("{variant} model needs {} tensors, file has {}", expected.len(), tensors.len())));
    }
    for (id, rows, cols) in expected {
        match tensors.get(&id) {
            Some(m) if m.shape() == (rows, cols) => {}
            Some(m) => return Err(Error::Checkpoint(format!("{id} has shape {:?}, expected {:?}", m.shape(), (rows, cols)))),
            None => return Err(Error::Checkpoint(format!("missing tensor {id}"))),
        }
    }
    Ok(ModelParams { variant, feature_dim, sizes, graph_hash, tensors })
}

pub fn save(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(p))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}
