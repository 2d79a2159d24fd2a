//! `FEA1` feature container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic   "FEA1"            4 bytes
//! version u32 = 1
//! count   u32               number of entries
//! entry*  name_len u16, name (UTF-8), rows u32, cols u32,
//!         rows*cols f32 values, row-major
//! ```
//!
//! Values are stored as `f32` and promoted to `f64` when read.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 4] = b"FEA1";
pub const VERSION: u32 = 1;

/// Bytes before the first entry.
pub const FILE_HEADER_LEN: usize = 12;

/// A named matrix inside a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub matrix: Matrix,
}

impl Entry {
    pub fn new(name: impl Into<String>, matrix: Matrix) -> Self {
        Self {
            name: name.into(),
            matrix,
        }
    }
}

pub fn encode_container(entries: &[Entry]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::invalid("too many entries for a FEA1 container"))?;
    let payload: usize = entries
        .iter()
        .map(|e| 2 + e.name.len() + 8 + 4 * e.matrix.len())
        .sum();
    let mut out = Vec::with_capacity(FILE_HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());

    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::invalid(format!("duplicate entry name {:?}", e.name)));
        }
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::invalid(format!("entry name {:?} is too long", e.name)))?;
        let rows = u32::try_from(e.matrix.rows())
            .map_err(|_| Error::invalid(format!("entry {:?} has too many rows", e.name)))?;
        let cols = u32::try_from(e.matrix.cols())
            .map_err(|_| Error::invalid(format!("entry {:?} has too many columns", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for &x in e.matrix.as_slice() {
            let f = x as f32;
            if !f.is_finite() {
                return Err(Error::invalid(format!(
                    "entry {:?} has a value not representable as a finite f32: {x}",
                    e.name
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated container: need {n} bytes for {what} at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_container(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"FEA1\""
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::Format(format!("entry {i} name is not valid UTF-8")))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n_bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("entry {name:?} dimensions overflow")))?;
        let raw = r.take(n_bytes, "entry payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push(Entry {
            name,
            matrix: Matrix::from_vec(rows, cols, data)?,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last entry",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode_container(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode_container(&[]).unwrap();
        assert_eq!(bytes, b"FEA1\x01\x00\x00\x00\x00\x00\x00\x00");
        assert!(decode_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_value_layout_is_exact() {
        let bytes =
            encode_container(&[Entry::new("a", Matrix::from_vec(1, 1, vec![2.5]).unwrap())])
                .unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FEA1");
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0]);
        // name_len = 1, "a", rows = 1, cols = 1
        expected.extend_from_slice(&[1, 0, b'a', 1, 0, 0, 0, 1, 0, 0, 0]);
        // 2.5f32 = 0x40200000
        expected.extend_from_slice(&[0x00, 0x00, 0x20, 0x40]);
        assert_eq!(bytes, expected);
        let entry_header = 2 + 1 + 4 + 4;
        assert_eq!(
            &bytes[FILE_HEADER_LEN + entry_header..],
            &2.5f32.to_le_bytes()
        );
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let good = encode_container(&[Entry::new(
            "x",
            Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap(),
        )])
        .unwrap();
        for cut in 0..good.len() {
            assert!(
                matches!(decode_container(&good[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        let mut bad_magic = good.clone();
        bad_magic[0] = b'G';
        assert!(matches!(
            decode_container(&bad_magic),
            Err(Error::Format(_))
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_container(&bad_version),
            Err(Error::Format(_))
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_container(&trailing), Err(Error::Format(_))));
        let mut huge = good.clone();
        // rows = u32::MAX
        huge[FILE_HEADER_LEN + 3..FILE_HEADER_LEN + 7].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_container(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let m = Matrix::zeros(1, 1);
        assert!(encode_container(&[Entry::new("a", m.clone()), Entry::new("a", m)]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_shape_and_f32_values(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in proptest::collection::vec(-1e4f64..1e4, 36),
        ) {
            let m = Matrix::from_fn(rows, cols, |r, c| seed[r * 6 + c]);
            let back = decode_container(&encode_container(&[Entry::new("m", m.clone())]).unwrap()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].matrix.shape(), m.shape());
            for (a, b) in m.as_slice().iter().zip(back[0].matrix.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
            }
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_container(&bytes);
        }
    }
}
