//! Feature standardization, PCA, and stacking.
//!
//! Scaler and PCA parameters are fitted on TRAIN features only; everything
//! else is transformed with the frozen parameters. PCA keeps the smallest
//! number of principal axes whose cumulative explained variance reaches the
//! target (default 95%). Reduced features from the three backbones are
//! concatenated in canonical order to form the stacked set.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{BackboneId, FeatureMatrix, Provenance, Stage};
use crate::tensorfile::TensorFile;

/// Per-column mean and population standard deviation, fitted on TRAIN rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit column means and population (1/n) standard deviations.
pub fn fit_scaler(x: &FeatureMatrix) -> Result<ScalerParams> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Invalid("cannot fit scaler on an empty matrix".into()));
    }
    let d = x.dim();
    let mut mean = vec![0.0f64; d];
    for row in x.data.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for row in x.data.rows() {
        for ((v, &m), &value) in var.iter_mut().zip(&mean).zip(row) {
            let diff = value as f64 - m;
            *v += diff * diff;
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(ScalerParams { mean, std })
}

/// Standardize columns; zero-variance columns map to all zeros.
pub fn apply_scaler(x: &FeatureMatrix, params: &ScalerParams) -> Result<FeatureMatrix> {
    if x.dim() != params.mean.len() {
        return Err(Error::Shape(format!(
            "scaler fitted on {} columns, input has {}",
            params.mean.len(),
            x.dim()
        )));
    }
    let mut data = Array2::<f32>::zeros((x.rows(), x.dim()));
    for (i, row) in x.data.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            data[(i, j)] = if params.std[j] == 0.0 {
                0.0
            } else {
                ((v as f64 - params.mean[j]) / params.std[j]) as f32
            };
        }
    }
    Ok(FeatureMatrix {
        data,
        stage: Stage::Standardized,
        provenance: x.provenance.clone(),
    })
}

/// Principal axes (rows, orthonormal), the centering vector, and the
/// explained variance ratio of each kept axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PCAParams {
    pub components: Array2<f64>,
    pub center: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub variance_target: f64,
}

impl PCAParams {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }
}

/// Smallest k whose cumulative ratio reaches `target` (with a 1e-9 slack for
/// accumulated rounding); all components if the target is unreachable.
pub fn select_k(ratios: &[f64], target: f64) -> Result<usize> {
    if ratios.is_empty() {
        return Err(Error::Invalid("select_k on an empty ratio vector".into()));
    }
    let mut cumulative = 0.0;
    for (i, &r) in ratios.iter().enumerate() {
        cumulative += r;
        if cumulative >= target - 1e-9 {
            return Ok(i + 1);
        }
    }
    Ok(ratios.len())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order with matching eigenvectors as
/// rows. Deterministic; accuracy is limited only by f64 rounding.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut vecs = Array2::<f64>::eye(n);

    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[(p, q)] * m[(p, q)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = c * mpj - s * mqj;
                    m[(q, j)] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = vecs[(i, p)];
                    let viq = vecs[(i, q)];
                    vecs[(i, p)] = c * vip - s * viq;
                    vecs[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap().then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut rows = Array2::<f64>::zeros((n, n));
    for (out_row, &i) in order.iter().enumerate() {
        for r in 0..n {
            rows[(out_row, r)] = vecs[(r, i)];
        }
    }
    (eigenvalues, rows)
}

/// Flip each axis so its largest-magnitude entry is positive, making fitted
/// artifacts reproducible across eigensolvers.
fn fix_signs(components: &mut Array2<f64>) {
    for mut row in components.rows_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// Fit PCA on a standardized TRAIN matrix via eigendecomposition of the
/// population covariance.
pub fn fit_pca(x: &FeatureMatrix, variance_target: f64) -> Result<PCAParams> {
    let n = x.rows();
    let d = x.dim();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }

    let mut center = vec![0.0f64; d];
    for row in x.data.rows() {
        for (c, &v) in center.iter_mut().zip(row) {
            *c += v as f64;
        }
    }
    for c in &mut center {
        *c /= n as f64;
    }

    // Population covariance of the centered data.
    let mut centered = Array2::<f64>::zeros((n, d));
    for (i, row) in x.data.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[(i, j)] = v as f64 - center[j];
        }
    }
    let cov = centered.t().dot(&centered) / n as f64;

    let (mut eigenvalues, mut vectors) = symmetric_eigen(&cov);
    // Clamp rounding noise so rank-deficient data reports exact zeros.
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    for v in &mut eigenvalues {
        if *v < lambda_max * 1e-12 {
            *v = 0.0;
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    let ratios: Vec<f64> = if total > 0.0 {
        eigenvalues.iter().map(|&v| v / total).collect()
    } else {
        vec![0.0; eigenvalues.len()]
    };

    let k = select_k(&ratios, variance_target)?;
    let mut components = vectors.slice_mut(ndarray::s![..k, ..]).to_owned();
    fix_signs(&mut components);
    Ok(PCAParams {
        components,
        center,
        explained_variance_ratio: ratios[..k].to_vec(),
        variance_target,
    })
}

/// Project rows onto the principal axes: `(x - center) @ components^T`.
pub fn transform_pca(x: &FeatureMatrix, params: &PCAParams) -> Result<FeatureMatrix> {
    if x.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "PCA fitted on {} columns, input has {}",
            params.input_dim(),
            x.dim()
        )));
    }
    let n = x.rows();
    let mut centered = Array2::<f64>::zeros((n, x.dim()));
    for (i, row) in x.data.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[(i, j)] = v as f64 - params.center[j];
        }
    }
    let projected = centered.dot(&params.components.t());
    Ok(FeatureMatrix {
        data: projected.mapv(|v| v as f32),
        stage: Stage::Reduced,
        provenance: x.provenance.clone(),
    })
}

/// Horizontally concatenate reduced per-backbone matrices.
///
/// Parts must hold the same records in the same order (checked via record
/// ids, not assumed) and appear in canonical backbone order.
pub fn stack_features(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    if parts.is_empty() {
        return Err(Error::Invalid("nothing to stack".into()));
    }
    let first = &parts[0];
    let mut backbones = Vec::new();
    for part in parts {
        if part.stage != Stage::Reduced {
            return Err(Error::Invalid(format!(
                "stacking expects REDUCED inputs, found {}",
                part.stage
            )));
        }
        if part.provenance.record_ids != first.provenance.record_ids {
            return Err(Error::Alignment(
                "parts disagree on record order; refusing to stack".into(),
            ));
        }
        if part.provenance.split != first.provenance.split {
            return Err(Error::Alignment("parts come from different splits".into()));
        }
        backbones.extend(part.provenance.backbones.iter().copied());
    }
    let canonical_index =
        |b: BackboneId| BackboneId::ALL.iter().position(|&x| x == b).unwrap();
    if backbones.windows(2).any(|w| canonical_index(w[0]) >= canonical_index(w[1])) {
        return Err(Error::Invalid(format!(
            "parts must be in canonical backbone order, got {backbones:?}"
        )));
    }

    let n = first.rows();
    let width: usize = parts.iter().map(|p| p.dim()).sum();
    let mut data = Array2::<f32>::zeros((n, width));
    let mut offset = 0;
    for part in parts {
        data.slice_mut(ndarray::s![.., offset..offset + part.dim()])
            .assign(&part.data);
        offset += part.dim();
    }
    Ok(FeatureMatrix {
        data,
        stage: Stage::Stacked,
        provenance: Provenance {
            backbones,
            split: first.provenance.split,
            record_ids: first.provenance.record_ids.clone(),
        },
    })
}

/// Whether PCA runs per backbone before stacking (default) or once on the
/// stacked standardized features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    PerBackbone,
    AfterStack,
}

/// Frozen scaler + PCA parameters for all three backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionArtifact {
    pub mode: FusionMode,
    pub variance_target: f64,
    pub scalers: BTreeMap<BackboneId, ScalerParams>,
    /// Per-backbone PCA (PerBackbone mode).
    pub pcas: BTreeMap<BackboneId, PCAParams>,
    /// Single PCA over the stacked standardized features (AfterStack mode).
    pub stacked_pca: Option<PCAParams>,
    pub config_hash: String,
}

impl FusionArtifact {
    /// Fit on RAW TRAIN features from all three backbones.
    pub fn fit(
        train: &BTreeMap<BackboneId, FeatureMatrix>,
        variance_target: f64,
        mode: FusionMode,
        config_hash: impl Into<String>,
    ) -> Result<FusionArtifact> {
        for id in BackboneId::ALL {
            if !train.contains_key(&id) {
                return Err(Error::Invalid(format!("missing TRAIN features for {id}")));
            }
        }
        let mut scalers = BTreeMap::new();
        let mut pcas = BTreeMap::new();
        let mut standardized = Vec::new();
        for id in BackboneId::ALL {
            let raw = &train[&id];
            let scaler = fit_scaler(raw)?;
            let std_matrix = apply_scaler(raw, &scaler)?;
            scalers.insert(id, scaler);
            standardized.push(std_matrix);
        }
        let stacked_pca = match mode {
            FusionMode::PerBackbone => {
                for (id, std_matrix) in BackboneId::ALL.iter().zip(&standardized) {
                    pcas.insert(*id, fit_pca(std_matrix, variance_target)?);
                }
                None
            }
            FusionMode::AfterStack => {
                let stacked = hstack_standardized(&standardized)?;
                Some(fit_pca(&stacked, variance_target)?)
            }
        };
        Ok(FusionArtifact {
            mode,
            variance_target,
            scalers,
            pcas,
            stacked_pca,
            config_hash: config_hash.into(),
        })
    }

    /// Transform per-backbone RAW features into the STACKED representation
    /// using the frozen parameters.
    pub fn transform(&self, raw: &BTreeMap<BackboneId, FeatureMatrix>) -> Result<FeatureMatrix> {
        for id in BackboneId::ALL {
            if !raw.contains_key(&id) {
                return Err(Error::Invalid(format!("missing features for {id}")));
            }
        }
        let mut standardized = Vec::new();
        for id in BackboneId::ALL {
            let scaler = self
                .scalers
                .get(&id)
                .ok_or_else(|| Error::Integrity(format!("fusion artifact missing scaler for {id}")))?;
            standardized.push(apply_scaler(&raw[&id], scaler)?);
        }
        match self.mode {
            FusionMode::PerBackbone => {
                let mut reduced = Vec::new();
                for (id, std_matrix) in BackboneId::ALL.iter().zip(&standardized) {
                    let pca = self.pcas.get(id).ok_or_else(|| {
                        Error::Integrity(format!("fusion artifact missing PCA for {id}"))
                    })?;
                    reduced.push(transform_pca(std_matrix, pca)?);
                }
                stack_features(&reduced)
            }
            FusionMode::AfterStack => {
                let stacked = hstack_standardized(&standardized)?;
                let pca = self
                    .stacked_pca
                    .as_ref()
                    .ok_or_else(|| Error::Integrity("fusion artifact missing stacked PCA".into()))?;
                let mut out = transform_pca(&stacked, pca)?;
                out.stage = Stage::Stacked;
                Ok(out)
            }
        }
    }

    /// Width of the stacked representation.
    pub fn stacked_dim(&self) -> usize {
        match self.mode {
            FusionMode::PerBackbone => self.pcas.values().map(|p| p.k()).sum(),
            FusionMode::AfterStack => self.stacked_pca.as_ref().map_or(0, |p| p.k()),
        }
    }
}

/// Concatenate standardized per-backbone matrices (internal to AfterStack).
fn hstack_standardized(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = &parts[0];
    let mut backbones = Vec::new();
    for part in parts {
        if part.provenance.record_ids != first.provenance.record_ids {
            return Err(Error::Alignment("parts disagree on record order".into()));
        }
        backbones.extend(part.provenance.backbones.iter().copied());
    }
    let width: usize = parts.iter().map(|p| p.dim()).sum();
    let mut data = Array2::<f32>::zeros((first.rows(), width));
    let mut offset = 0;
    for part in parts {
        data.slice_mut(ndarray::s![.., offset..offset + part.dim()])
            .assign(&part.data);
        offset += part.dim();
    }
    Ok(FeatureMatrix {
        data,
        stage: Stage::Standardized,
        provenance: Provenance {
            backbones,
            split: first.provenance.split,
            record_ids: first.provenance.record_ids.clone(),
        },
    })
}

const FUSION_META: &str = "fusion.toml";
const FUSION_BIN: &str = "fusion.bin";
const FUSION_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct FusionMeta {
    version: u32,
    mode: FusionMode,
    variance_target: f64,
    config_hash: String,
}

/// Persist the artifact under `dir` (binary tensors + toml sidecar).
pub fn save_fusion(artifact: &FusionArtifact, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tf = TensorFile::new();
    for (id, scaler) in &artifact.scalers {
        tf.insert_f64(format!("{id}.scaler.mean"), vec![scaler.mean.len()], scaler.mean.clone());
        tf.insert_f64(format!("{id}.scaler.std"), vec![scaler.std.len()], scaler.std.clone());
    }
    let mut put_pca = |prefix: String, pca: &PCAParams| {
        tf.insert_f64(
            format!("{prefix}.components"),
            vec![pca.k(), pca.input_dim()],
            pca.components.iter().copied().collect(),
        );
        tf.insert_f64(format!("{prefix}.center"), vec![pca.center.len()], pca.center.clone());
        tf.insert_f64(
            format!("{prefix}.ratios"),
            vec![pca.explained_variance_ratio.len()],
            pca.explained_variance_ratio.clone(),
        );
    };
    for (id, pca) in &artifact.pcas {
        put_pca(format!("{id}.pca"), pca);
    }
    if let Some(pca) = &artifact.stacked_pca {
        put_pca("stacked.pca".to_string(), pca);
    }
    tf.write(&dir.join(FUSION_BIN))?;

    let meta = FusionMeta {
        version: FUSION_VERSION,
        mode: artifact.mode,
        variance_target: artifact.variance_target,
        config_hash: artifact.config_hash.clone(),
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Invalid(format!("serializing fusion meta: {e}")))?;
    let meta_path = dir.join(FUSION_META);
    std::fs::write(&meta_path, text).map_err(Error::io(meta_path))
}

fn read_pca(tf: &TensorFile, prefix: &str, variance_target: f64) -> Result<PCAParams> {
    let (shape, comp) = tf.get_f64(&format!("{prefix}.components"))?;
    if shape.len() != 2 {
        return Err(Error::Integrity(format!("{prefix}.components is not 2-d")));
    }
    let components = Array2::from_shape_vec((shape[0], shape[1]), comp.to_vec())
        .map_err(|e| Error::Integrity(e.to_string()))?;
    let (_, center) = tf.get_f64(&format!("{prefix}.center"))?;
    let (_, ratios) = tf.get_f64(&format!("{prefix}.ratios"))?;
    Ok(PCAParams {
        components,
        center: center.to_vec(),
        explained_variance_ratio: ratios.to_vec(),
        variance_target,
    })
}

/// Load an artifact saved by [`save_fusion`]. A missing backbone entry is an
/// integrity error.
pub fn load_fusion(dir: &Path) -> Result<FusionArtifact> {
    let meta_path = dir.join(FUSION_META);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(meta_path.clone())
        } else {
            Error::io(&meta_path)(e)
        }
    })?;
    let meta: FusionMeta = toml::from_str(&text)
        .map_err(|e| Error::Parse {
            file: meta_path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    if meta.version != FUSION_VERSION {
        return Err(Error::Version {
            expected: FUSION_VERSION.to_string(),
            found: meta.version.to_string(),
        });
    }

    let tf = TensorFile::read(&dir.join(FUSION_BIN))?;
    let mut scalers = BTreeMap::new();
    let mut pcas = BTreeMap::new();
    for id in BackboneId::ALL {
        let (_, mean) = tf
            .get_f64(&format!("{id}.scaler.mean"))
            .map_err(|_| Error::Integrity(format!("fusion artifact missing {id} entries")))?;
        let (_, std) = tf.get_f64(&format!("{id}.scaler.std"))?;
        scalers.insert(
            id,
            ScalerParams {
                mean: mean.to_vec(),
                std: std.to_vec(),
            },
        );
        if meta.mode == FusionMode::PerBackbone {
            if !tf.contains(&format!("{id}.pca.components")) {
                return Err(Error::Integrity(format!("fusion artifact missing {id} PCA")));
            }
            pcas.insert(id, read_pca(&tf, &format!("{id}.pca"), meta.variance_target)?);
        }
    }
    let stacked_pca = if meta.mode == FusionMode::AfterStack {
        Some(read_pca(&tf, "stacked.pca", meta.variance_target)?)
    } else {
        None
    };
    Ok(FusionArtifact {
        mode: meta.mode,
        variance_target: meta.variance_target,
        scalers,
        pcas,
        stacked_pca,
        config_hash: meta.config_hash,
    })
}
