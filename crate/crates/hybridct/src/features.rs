//! Feature matrices with provenance, plus the binary feature-file format.
//!
//! Files carry the magic `HCTF1`, then `n` and `d` as unsigned 32-bit
//! little-endian integers, then `n * d` little-endian 32-bit floats in
//! row-major order. A sidecar `<name>.meta` records backbone(s), stage,
//! split, record ids, and the creating config hash.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use crate::dataset::Split;
use crate::error::{Error, Result};

/// The three supported backbones, in canonical concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneId {
    Vgg16,
    DenseNet121,
    MobileNetV2,
}

impl BackboneId {
    pub const ALL: [BackboneId; 3] = [
        BackboneId::Vgg16,
        BackboneId::DenseNet121,
        BackboneId::MobileNetV2,
    ];

    /// Channel width of the backbone's pooled output.
    pub fn feature_channels(self) -> usize {
        match self {
            BackboneId::Vgg16 => 512,
            BackboneId::DenseNet121 => 1024,
            BackboneId::MobileNetV2 => 1280,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneId::Vgg16 => write!(f, "vgg16"),
            BackboneId::DenseNet121 => write!(f, "densenet121"),
            BackboneId::MobileNetV2 => write!(f, "mobilenetv2"),
        }
    }
}

impl FromStr for BackboneId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vgg16" => Ok(BackboneId::Vgg16),
            "densenet121" => Ok(BackboneId::DenseNet121),
            "mobilenetv2" => Ok(BackboneId::MobileNetV2),
            other => Err(format!("unknown backbone '{other}'")),
        }
    }
}

/// Where a feature matrix sits in the fusion pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Raw,
    Standardized,
    Reduced,
    Stacked,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "RAW",
            Stage::Standardized => "STANDARDIZED",
            Stage::Reduced => "REDUCED",
            Stage::Stacked => "STACKED",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "RAW" => Ok(Stage::Raw),
            "STANDARDIZED" => Ok(Stage::Standardized),
            "REDUCED" => Ok(Stage::Reduced),
            "STACKED" => Ok(Stage::Stacked),
            other => Err(format!("unknown stage '{other}'")),
        }
    }
}

/// Which backbone(s) and records produced a matrix; row order always equals
/// `record_ids` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub backbones: Vec<BackboneId>,
    pub split: Split,
    pub record_ids: Vec<String>,
}

/// An `n x d` feature array tagged with its pipeline stage and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub stage: Stage,
    pub provenance: Provenance,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

const FEATURE_MAGIC: &[u8; 5] = b"HCTF1";
const META_HEADER: &str = "hybridct-feature-meta v1";

/// Write `matrix` to `path` in the fixed binary layout, with its sidecar
/// meta next to it (same file stem, `.meta` extension).
pub fn write_features(matrix: &FeatureMatrix, path: &Path, config_hash: &str) -> Result<()> {
    let n = matrix.rows();
    let d = matrix.dim();
    let mut buf = Vec::with_capacity(FEATURE_MAGIC.len() + 8 + n * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for row in matrix.data.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(Error::io(path))?;

    let mut meta = String::new();
    meta.push_str(META_HEADER);
    meta.push('\n');
    let backbones: Vec<String> = matrix
        .provenance
        .backbones
        .iter()
        .map(|b| b.to_string())
        .collect();
    meta.push_str(&format!("backbones\t{}\n", backbones.join(",")));
    meta.push_str(&format!("stage\t{}\n", matrix.stage));
    meta.push_str(&format!("split\t{}\n", matrix.provenance.split));
    meta.push_str(&format!("config_hash\t{config_hash}\n"));
    meta.push_str(&format!("records\t{n}\n"));
    for id in &matrix.provenance.record_ids {
        meta.push_str(&format!("record\t{id}\n"));
    }
    let meta_path = meta_path_for(path);
    std::fs::write(&meta_path, meta).map_err(Error::io(meta_path))
}

fn meta_path_for(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Read a feature file and its sidecar; returns the matrix and the config
/// hash recorded at creation.
pub fn read_features(path: &Path) -> Result<(FeatureMatrix, String)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::io(path)(e)
        }
    })?;
    if bytes.len() < FEATURE_MAGIC.len() + 8 {
        return Err(Error::Integrity(format!("{} is truncated", path.display())));
    }
    if &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(Error::Version {
            expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..FEATURE_MAGIC.len()]).into_owned(),
        });
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = FEATURE_MAGIC.len() + 8 + n * d * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: expected {expected} bytes for {n}x{d}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[13..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;

    let meta_path = meta_path_for(path);
    let file = std::fs::File::open(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(meta_path.clone())
        } else {
            Error::io(&meta_path)(e)
        }
    })?;
    let mut backbones = Vec::new();
    let mut stage = None;
    let mut split = None;
    let mut config_hash = String::new();
    let mut record_ids = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(&meta_path))?;
        let line_no = idx + 1;
        if idx == 0 {
            if line != META_HEADER {
                return Err(Error::Parse {
                    file: meta_path.display().to_string(),
                    line: 1,
                    msg: format!("expected '{META_HEADER}'"),
                });
            }
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let key = parts.next().unwrap_or("");
        let value = parts.next().unwrap_or("");
        let perr = |msg: String| Error::Parse {
            file: meta_path.display().to_string(),
            line: line_no,
            msg,
        };
        match key {
            "backbones" => {
                for b in value.split(',') {
                    backbones.push(b.parse::<BackboneId>().map_err(perr)?);
                }
            }
            "stage" => stage = Some(value.parse::<Stage>().map_err(perr)?),
            "split" => split = Some(value.parse::<Split>().map_err(perr)?),
            "config_hash" => config_hash = value.to_string(),
            "records" => {}
            "record" => record_ids.push(value.to_string()),
            other => return Err(perr(format!("unrecognized key '{other}'"))),
        }
    }
    if record_ids.len() != n {
        return Err(Error::Integrity(format!(
            "{}: {} record ids for {n} rows",
            meta_path.display(),
            record_ids.len()
        )));
    }
    Ok((
        FeatureMatrix {
            data,
            stage: stage.ok_or_else(|| Error::Integrity("meta missing stage".into()))?,
            provenance: Provenance {
                backbones,
                split: split.ok_or_else(|| Error::Integrity("meta missing split".into()))?,
                record_ids,
            },
        },
        config_hash,
    ))
}
