//! Tensor container and checkpoint persistence.
//!
//! The PHYT container is the on-disk format used repo-wide: magic "PHYT",
//! u32 version (1), u32 dtype code (0 = f64), u32 ndim, ndim x u64 extents,
//! then the raw little-endian payload. Round-trips are bit-exact.
//!
//! Checkpoints bundle named PHYT blobs behind a small text manifest in a
//! single file.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PHYT";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 0;

/// Serializes a tensor into the PHYT wire format.
pub fn write_phyt_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_phyt_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, want \"PHYT\"", magic)));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PHYT version {version}")));
    }
    let dtype = read_u32(r)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_phyt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_phyt_from(&mut r)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Named tensors plus string metadata in one file: a text manifest
/// (`meta` and `tensor` lines) terminated by `---`, then the PHYT blobs in
/// manifest order.
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "PHYLAA-CKPT v1")?;
        for (k, v) in &self.meta {
            if k.contains(['\t', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("meta key/value may not contain tabs/newlines: {k}")));
            }
            writeln!(w, "meta\t{k}\t{v}")?;
        }
        for (name, t) in &self.tensors {
            if name.contains(['\t', '\n']) {
                return Err(Error::Format(format!("tensor name may not contain tabs/newlines: {name}")));
            }
            let bytes = 16 + 8 * t.shape.len() + 8 * t.len();
            writeln!(w, "tensor\t{name}\t{bytes}")?;
        }
        writeln!(w, "---")?;
        for (_, t) in &self.tensors {
            write_phyt_to(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        // Read the text section byte-by-byte up to the `---` terminator so the
        // binary section stays untouched in the reader.
        let mut line = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            if b[0] == b'\n' {
                let text = String::from_utf8(line.clone())
                    .map_err(|_| Error::Format("non-utf8 checkpoint header".into()))?;
                line.clear();
                if text == "---" {
                    break;
                }
                header.push(text);
            } else {
                line.push(b[0]);
            }
        }
        let mut it = header.into_iter();
        match it.next() {
            Some(ref l) if l == "PHYLAA-CKPT v1" => {}
            other => return Err(Error::Format(format!("bad checkpoint header {:?}", other))),
        }
        let mut meta = BTreeMap::new();
        let mut names = Vec::new();
        for l in it {
            let parts: Vec<&str> = l.splitn(3, '\t').collect();
            match parts.as_slice() {
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, _bytes] => names.push(name.to_string()),
                _ => return Err(Error::Format(format!("bad manifest line: {l}"))),
            }
        }
        let mut tensors = Vec::with_capacity(names.len());
        for name in names {
            let t = read_phyt_from(&mut r)?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phyt_roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(
            vec![2, 3],
            vec![0.1, -2.5e300, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0, 42.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_phyt_to(&mut buf, &t).unwrap();
        let back = read_phyt_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn phyt_header_layout() {
        let t = Tensor::zeros(&[4, 5]);
        let mut buf = Vec::new();
        write_phyt_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"PHYT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(buf[24..32].try_into().unwrap()), 5);
        assert_eq!(buf.len(), 32 + 8 * 20);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(read_phyt_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "recurrent".to_string());
        meta.insert("channels".to_string(), "16".to_string());
        let ckpt = Checkpoint {
            meta,
            tensors: vec![
                ("w".into(), Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap()),
                ("b".into(), Tensor::from_vec(vec![1], vec![-0.5]).unwrap()),
            ],
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta["kind"], "recurrent");
        assert_eq!(back.tensor("w").unwrap().data, vec![1., 2., 3., 4.]);
        assert_eq!(back.tensor("b").unwrap().data, vec![-0.5]);
    }
}
