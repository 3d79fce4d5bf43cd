//! Binary tensor container shared by feature files and checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CPFE" | version u32 | entry count u32 |
//!   { name len u32 | name bytes | rank u32 | dims u32 * rank | f32 * prod(dims) } * count |
//! crc32 u32
//! ```
//!
//! The CRC covers every byte between the version field and the CRC itself.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPFE";
pub const FORMAT_VERSION: u32 = 1;

/// One named f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(entries.len(), "entry count")?.to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate entry name {:?}", e.name)));
        }
        let expected: usize = e.dims.iter().product();
        if expected != e.data.len() {
            return Err(Error::Format(format!(
                "entry {:?}: dims {:?} need {} values, have {}",
                e.name,
                e.dims,
                expected,
                e.data.len()
            )));
        }
        out.extend_from_slice(&u32_len(e.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&u32_len(e.dims.len(), "rank")?.to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"CPFE\"".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("truncated header".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[8..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name:?}: dims overflow")))?;
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("payload overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != body_end {
        return Err(Error::Format(format!(
            "{} trailing bytes after entries",
            body_end - r.pos
        )));
    }
    Ok(entries)
}

pub fn write_file(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Entry> {
        vec![
            Entry::new(
                "a.w",
                vec![2, 3],
                vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0],
            ),
            Entry::new("empty", vec![0, 4], vec![]),
            Entry::new("v", vec![1], vec![42.0]),
        ]
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"CPFE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let mut bytes = encode(&sample()).unwrap();
        let idx = bytes.len() - 6;
        bytes[idx] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 9]).is_err());
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let e = Entry::new("x", vec![1], vec![1.0]);
        assert!(encode(&[e.clone(), e]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(values in prop::collection::vec(any::<u32>(), 0..64), cols in 1usize..5) {
            let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let rows = data.len() / cols;
            let data = data[..rows * cols].to_vec();
            let entries = vec![Entry::new("t", vec![rows, cols], data.clone())];
            let back = decode(&encode(&entries).unwrap()).unwrap();
            let bits: Vec<u32> = back[0].data.iter().map(|v| v.to_bits()).collect();
            let expected: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, expected);
        }
    }
}
