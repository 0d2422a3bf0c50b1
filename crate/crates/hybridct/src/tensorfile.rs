//! Checksummed named-tensor container used for model weights, fusion
//! parameters, and SVC models.
//!
//! Layout: `HCTW1` magic, tensor count, then per tensor a name, dtype tag,
//! shape, and little-endian payload; a SHA-256 digest of everything before it
//! closes the file. Truncation or bit corruption surfaces as an integrity
//! error, an unknown magic as a version error.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"HCTW1\0";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// An ordered map of named tensors with file round-tripping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: BTreeMap<String, NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.into(),
            NamedTensor {
                shape,
                data: TensorData::F32(data),
            },
        );
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.into(),
            NamedTensor {
                shape,
                data: TensorData::F64(data),
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("tensor '{name}' missing from container")))
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name)? {
            NamedTensor {
                shape,
                data: TensorData::F32(v),
            } => Ok((shape, v)),
            _ => Err(Error::Integrity(format!("tensor '{name}' is not f32"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            NamedTensor {
                shape,
                data: TensorData::F64(v),
            } => Ok((shape, v)),
            _ => Err(Error::Integrity(format!("tensor '{name}' is not f64"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            match &tensor.data {
                TensorData::F32(_) => buf.push(0),
                TensorData::F64(_) => buf.push(1),
            }
            buf.push(tensor.shape.len() as u8);
            for &dim in &tensor.shape {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            match &tensor.data {
                TensorData::F32(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        std::fs::write(path, buf).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<TensorFile> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path)(e)
            }
        })?;
        if bytes.len() < MAGIC.len() {
            return Err(Error::Integrity(format!("{} is truncated", path.display())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Version {
                expected: String::from_utf8_lossy(&MAGIC[..5]).into_owned(),
                found: String::from_utf8_lossy(&bytes[..5.min(bytes.len())]).into_owned(),
            });
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Integrity(format!("{} is truncated", path.display())));
        }
        let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_digest {
            return Err(Error::Integrity(format!(
                "checksum mismatch in {}",
                path.display()
            )));
        }

        let mut cursor = MAGIC.len();
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > body.len() {
                return Err(Error::Integrity(format!("{} is truncated", path.display())));
            }
            let slice = &body[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };

        let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(take(&mut cursor, name_len)?).into_owned();
            let dtype = take(&mut cursor, 1)?[0];
            let ndim = take(&mut cursor, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    let raw = take(&mut cursor, numel * 4)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = take(&mut cursor, numel * 8)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::Integrity(format!("unknown dtype tag {other}")));
                }
            };
            tensors.insert(name, NamedTensor { shape, data });
        }
        Ok(TensorFile { tensors })
    }
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut tf = TensorFile::new();
        tf.insert_f32("a.weight", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -6.125]);
        tf.insert_f64("b.center", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        tf
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tf = sample();
        tf.write(&path).unwrap();
        let back = TensorFile::read(&path).unwrap();
        assert_eq!(back, tf);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        sample().write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let err = TensorFile::read(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        sample().write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = TensorFile::read(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn wrong_magic_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, b"HCTW9\0junkjunkjunkjunkjunkjunkjunkjunkjunk").unwrap();
        let err = TensorFile::read(&path).unwrap_err();
        assert!(matches!(err, Error::Version { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = TensorFile::read(Path::new("/nonexistent/t.bin")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)), "{err}");
    }
}
