//! Binary tensor container.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! "LCRF" | version u32 | n_meta u32 | (key, value)* | n_tensors u32 |
//! (name, rank u32, dims u64*, dtype u8, offset u64)* | payload_len u64 |
//! payload | crc32 u32
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8 bytes. Tensor offsets
//! are relative to the payload start. The trailing CRC32 covers every
//! preceding byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::params::NamedTensor;

pub const MAGIC: &[u8; 4] = b"LCRF";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata key naming what a container holds.
pub const KIND_KEY: &str = "kind";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("container is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("container holds '{found}', expected '{expected}'")]
    KindMismatch { expected: String, found: String },
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, CheckpointError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(CheckpointError::Malformed(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.metadata.insert(KIND_KEY.to_string(), kind.to_string());
        c
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = NamedTensor>) {
        self.tensors.extend(ts);
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get(KIND_KEY).map(String::as_str)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        match self.kind() {
            Some(k) if k == expected => Ok(()),
            other => Err(CheckpointError::KindMismatch {
                expected: expected.to_string(),
                found: other.unwrap_or("<none>").to_string(),
            }),
        }
    }

    /// Serializes with full double precision, so a roundtrip is bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_as(DType::F64)
    }

    pub fn to_bytes_as(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &dim in &t.dims {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            out.push(dtype.code());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data.len() * dtype.width()) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for &v in &t.data {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let dtype = DType::from_code(r.u8()?)?;
            let offset = r.u64()? as usize;
            entries.push((name, dims, dtype, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let tensors = entries
            .into_iter()
            .map(|(name, dims, dtype, offset)| {
                let count: usize = dims.iter().product();
                let end = offset
                    .checked_add(count * dtype.width())
                    .filter(|&e| e <= payload.len())
                    .ok_or_else(|| CheckpointError::Malformed(format!("tensor '{name}' exceeds payload")))?;
                let raw = &payload[offset..end];
                let data = match dtype {
                    DType::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                    DType::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                Ok(NamedTensor { name, dims, data })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Loads and checks the container's kind.
    pub fn load_kind(path: &Path, kind: &str) -> crate::Result<Self> {
        let c = Self::load(path)?;
        c.expect_kind(kind)?;
        Ok(c)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| crate::Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("crf").with_meta("seed", 7);
        c.push(NamedTensor::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0]));
        c.push(NamedTensor::vector("b", vec![0.1, 0.2]));
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for (a, b) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn single_precision_payload_is_readable() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes_as(DType::F32)).unwrap();
        assert_eq!(back.tensors[1].data[0], 0.1f32 as f64);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for len in 0..bytes.len() {
            assert!(Container::from_bytes(&bytes[..len]).is_err(), "length {len}");
        }
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn other_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(
            Container::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 2, expected: 1 })
        );
    }

    #[test]
    fn kind_gate() {
        let c = sample();
        assert!(c.expect_kind("crf").is_ok());
        assert!(matches!(c.expect_kind("denoiser"), Err(CheckpointError::KindMismatch { .. })));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("c.lcrf");
        sample().save(&path).unwrap();
        let back = Container::load_kind(&path, "crf").unwrap();
        assert_eq!(back.tensors.len(), 2);
        assert!(Container::load_kind(&path, "denoiser").is_err());
    }
}
