//! The "CBMB" v1 container: a checksummed JSON directory followed by
//! 64-byte aligned little-endian blobs.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CBMB"
//! 4       4     format_version, u32 LE (= 1)
//! 8       8     header_len, u64 LE
//! 16      H     header, UTF-8 JSON
//! 16+H    32    SHA-256 of the header bytes
//! ...           zero padding up to the next multiple of 64 (= data_start)
//! data_start    blobs; directory offsets are relative to data_start,
//!               every blob starts on a 64-byte boundary and is zero-padded
//!               to the next one
//! ```
//!
//! The file size is therefore `data_start + Σ align64(blob_len)`, and any
//! byte flipped anywhere before `data_start` makes the reader fail.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CBMB";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: u64 = 64;

const PREAMBLE_LEN: u64 = 16;
const DIGEST_LEN: u64 = 32;

pub(crate) fn align_up(n: u64) -> u64 {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
    U8,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U32(_) => DType::U32,
            ArrayData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        match self {
            ArrayData::F32(v) => v.iter().all(|x| x.is_finite()),
            ArrayData::F64(v) => v.iter().all(|x| x.is_finite()),
            ArrayData::U32(_) | ArrayData::U8(_) => true,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> ArrayData {
        match dtype {
            DType::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => ArrayData::U8(bytes.to_vec()),
        }
    }
}

/// A named, shaped array stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "array `{name}` has {} elements but shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * self.data.dtype().size()
    }
}

/// One entry of the on-disk array directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub offset: u64,
    pub length: u64,
}

/// The JSON document at the head of every container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleHeader {
    pub kind: String,
    pub arrays: Vec<DirectoryEntry>,
    #[serde(default)]
    pub names: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

/// In-memory form of a container: a kind tag, name tables, free-form
/// attributes and an ordered list of arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub names: BTreeMap<String, Vec<String>>,
    pub attrs: serde_json::Map<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::InvalidBundle(format!("missing array `{name}`")))
    }

    fn header(&self) -> BundleHeader {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let length = a.byte_len();
                let entry = DirectoryEntry {
                    name: a.name.clone(),
                    dtype: a.data.dtype(),
                    shape: a.shape.iter().map(|&d| d as u64).collect(),
                    offset,
                    length,
                };
                offset += align_up(length);
                entry
            })
            .collect();
        BundleHeader {
            kind: self.kind.clone(),
            arrays,
            names: self.names.clone(),
            attrs: self.attrs.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        for a in &self.arrays {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::InvalidBundle(format!("duplicate array `{}`", a.name)));
            }
            if !a.data.is_finite() {
                return Err(Error::NonFinite(a.name.clone()));
            }
        }
        let header = serde_json::to_vec(&self.header())?;
        let digest = Sha256::digest(&header);
        let data_start = align_up(PREAMBLE_LEN + header.len() as u64 + DIGEST_LEN);

        let mut out = Vec::with_capacity(data_start as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&digest);
        out.resize(data_start as usize, 0);
        for a in &self.arrays {
            a.data.write_le(&mut out);
            let padded = align_up(out.len() as u64) as usize;
            out.resize(padded, 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file_len = bytes.len() as u64;
        if file_len < PREAMBLE_LEN {
            return Err(Error::CorruptHeader(format!(
                "file is {file_len} bytes, shorter than the preamble"
            )));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = PREAMBLE_LEN
            .checked_add(header_len)
            .and_then(|e| e.checked_add(DIGEST_LEN))
            .filter(|&e| e <= file_len)
            .ok_or_else(|| {
                Error::CorruptHeader(format!("header length {header_len} exceeds file size"))
            })?;
        let header_bytes = &bytes[PREAMBLE_LEN as usize..(PREAMBLE_LEN + header_len) as usize];
        let stored_digest = &bytes[(PREAMBLE_LEN + header_len) as usize..header_end as usize];
        if Sha256::digest(header_bytes).as_slice() != stored_digest {
            return Err(Error::CorruptHeader("header checksum mismatch".into()));
        }
        let data_start = align_up(header_end);
        if data_start > file_len {
            return Err(Error::CorruptHeader("missing header padding".into()));
        }
        if bytes[header_end as usize..data_start as usize].iter().any(|&b| b != 0) {
            return Err(Error::CorruptHeader("non-zero header padding".into()));
        }
        let header: BundleHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::CorruptHeader(format!("header json: {e}")))?;

        let available = file_len - data_start;
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.arrays.len());
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let elements = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptHeader(format!("shape overflow in `{}`", entry.name)))?;
            if elements.checked_mul(entry.dtype.size()) != Some(entry.length) {
                return Err(Error::CorruptHeader(format!(
                    "`{}` declares {} bytes for shape {:?}",
                    entry.name, entry.length, entry.shape
                )));
            }
            if entry.offset % ALIGNMENT != 0 {
                return Err(Error::CorruptHeader(format!(
                    "`{}` offset {} is not 64-byte aligned",
                    entry.name, entry.offset
                )));
            }
            let end = entry.offset.saturating_add(entry.length);
            if end > available {
                return Err(Error::Truncated {
                    name: entry.name.clone(),
                    end: data_start.saturating_add(end),
                    available: file_len,
                });
            }
            if entry.length > 0 {
                spans.push((entry.offset, end, &entry.name));
            }
            let start = (data_start + entry.offset) as usize;
            let data = ArrayData::read_le(entry.dtype, &bytes[start..start + entry.length as usize]);
            if !data.is_finite() {
                return Err(Error::NonFinite(entry.name.clone()));
            }
            let shape = entry.shape.iter().map(|&d| d as usize).collect();
            arrays.push(NamedArray {
                name: entry.name.clone(),
                shape,
                data,
            });
        }
        spans.sort();
        for pair in spans.windows(2) {
            let (_, first_end, first) = pair[0];
            let (second_start, _, second) = pair[1];
            if second_start < align_up(first_end) {
                return Err(Error::Overlap {
                    first: first.to_string(),
                    second: second.to_string(),
                });
            }
        }
        let expected = spans.iter().map(|&(s, e, _)| align_up(e) - s).sum::<u64>();
        if available != expected {
            return Err(Error::CorruptHeader(format!(
                "data section is {available} bytes, directory accounts for {expected}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = arrays.iter().find(|a| !seen.insert(a.name.as_str())) {
            return Err(Error::CorruptHeader(format!("duplicate array `{}`", dup.name)));
        }
        Ok(Container {
            kind: header.kind,
            names: header.names,
            attrs: header.attrs,
            arrays,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Parses only the directory of a container, without touching blob payloads.
pub fn read_header(bytes: &[u8]) -> Result<(BundleHeader, u64)> {
    if bytes.len() < PREAMBLE_LEN as usize || bytes[0..4] != MAGIC {
        return Err(Error::CorruptHeader("not a CBMB container".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = PREAMBLE_LEN as usize + header_len;
    if end + DIGEST_LEN as usize > bytes.len() {
        return Err(Error::CorruptHeader("header length exceeds file size".into()));
    }
    let header = serde_json::from_slice(&bytes[PREAMBLE_LEN as usize..end])
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    Ok((header, align_up((end + DIGEST_LEN as usize) as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.push(NamedArray::new("a", vec![2, 3], ArrayData::F32(vec![1.0, -2.5, 3.0, 0.0, 1e-30, 7.0])).unwrap());
        c.push(NamedArray::new("b", vec![3], ArrayData::U32(vec![0, 1, 2])).unwrap());
        c.push(NamedArray::new("c", vec![1], ArrayData::U8(vec![9])).unwrap());
        c.names.insert("things".into(), vec!["α".into(), "beta".into()]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CBMB");
        assert_eq!(bytes.len() % 64, 0);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn size_matches_directory_arithmetic() {
        let bytes = sample().to_bytes().unwrap();
        let (header, data_start) = read_header(&bytes).unwrap();
        let blobs: u64 = header.arrays.iter().map(|e| align_up(e.length)).sum();
        assert_eq!(bytes.len() as u64, data_start + blobs);
        for e in &header.arrays {
            assert_eq!((data_start + e.offset) % 64, 0);
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_blob() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 64]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn nan_payload_rejected() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        let (header, data_start) = read_header(&bytes).unwrap();
        let off = (data_start + header.arrays[0].offset) as usize + 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if n == "a"), "{err}");
        assert!(err.to_string().contains("non-finite payload"));
    }

    #[test]
    fn refuses_to_write_non_finite() {
        let mut c = Container::new("x");
        c.push(NamedArray::new("a", vec![1], ArrayData::F64(vec![f64::INFINITY])).unwrap());
        assert!(matches!(c.to_bytes(), Err(Error::NonFinite(_))));
    }

    /// Rewrites the header JSON (and its checksum) so that structural
    /// validation, not the checksum, has to catch the problem.
    fn forge(bytes: &[u8], edit: impl FnOnce(&mut BundleHeader)) -> Vec<u8> {
        let (mut header, old_start) = read_header(bytes).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.resize(align_up(out.len() as u64) as usize, 0);
        out.extend_from_slice(&bytes[old_start as usize..]);
        out
    }

    #[test]
    fn overlapping_directory_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let forged = forge(&bytes, |h| h.arrays[1].offset = h.arrays[0].offset);
        let err = Container::from_bytes(&forged).unwrap_err();
        assert!(matches!(err, Error::Overlap { .. }), "{err}");
    }

    #[test]
    fn misaligned_offset_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let forged = forge(&bytes, |h| h.arrays[1].offset += 4);
        assert!(matches!(Container::from_bytes(&forged), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn length_shape_disagreement_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let forged = forge(&bytes, |h| h.arrays[0].shape = vec![3, 3]);
        assert!(matches!(Container::from_bytes(&forged), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.extend_from_slice(&[0u8; 64]);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn every_header_byte_flip_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let (_, data_start) = read_header(&bytes).unwrap();
        for i in 0..data_start as usize {
            for flip in [0x01u8, 0x80] {
                let mut corrupt = bytes.clone();
                corrupt[i] ^= flip;
                assert!(Container::from_bytes(&corrupt).is_err(), "byte {i} flip {flip:#x} undetected");
            }
        }
    }
}
