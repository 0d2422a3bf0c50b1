//! Soft-margin support-vector classifier on the stacked feature set.
//!
//! The dual problem is solved with sequential minimal optimization using
//! maximal-violating-pair working-set selection, a full kernel cache, and
//! deterministic tie-breaking, so identical inputs always produce identical
//! models. Decision scores are the raw signed margin and double as the ROC
//! score; ties at exactly zero predict non-COVID.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tensorfile::TensorFile;

/// Kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Rbf,
    Linear,
    Poly,
}

/// Gamma setting: a fixed value or derived from the data as
/// `1 / (d * mean column variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", untagged)]
pub enum Gamma {
    Auto(AutoTag),
    Value(f64),
}

/// Marker so `gamma = "auto"` round-trips through config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::Auto(AutoTag::Auto)
    }
}

/// SVC hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SVCConfig {
    pub kernel: Kernel,
    pub c: f64,
    pub gamma: Gamma,
    pub poly_degree: u32,
    /// KKT violation tolerance for the solver stopping rule.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SVCConfig {
    fn default() -> Self {
        SVCConfig {
            kernel: Kernel::Rbf,
            c: 1.0,
            gamma: Gamma::default(),
            poly_degree: 3,
            tolerance: 1e-3,
            max_iterations: 10_000_000,
        }
    }
}

impl SVCConfig {
    fn validate(&self) -> Result<()> {
        if self.c <= 0.0 {
            return Err(Error::Invalid(format!("C must be positive, got {}", self.c)));
        }
        if let Gamma::Value(g) = self.gamma {
            if g <= 0.0 {
                return Err(Error::Invalid(format!("gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// Resolved kernel: all parameters concrete.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedKernel {
    pub kernel: Kernel,
    pub gamma: f64,
    pub poly_degree: u32,
}

impl ResolvedKernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kernel {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf => {
                let mut dist = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let diff = x - y;
                    dist += diff * diff;
                }
                (-self.gamma * dist).exp()
            }
            Kernel::Poly => (self.gamma * dot(a, b) + 1.0).powi(self.poly_degree as i32),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 / (d * mean column variance)` with population variances; falls back to
/// `1 / d` when the data is constant.
fn resolve_gamma(gamma: Gamma, x: &Array2<f64>) -> f64 {
    match gamma {
        Gamma::Value(v) => v,
        Gamma::Auto(_) => {
            let (n, d) = x.dim();
            let mut mean_var = 0.0;
            for j in 0..d {
                let col = x.column(j);
                let mean: f64 = col.sum() / n as f64;
                let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                mean_var += var;
            }
            mean_var /= d as f64;
            if mean_var > 0.0 {
                1.0 / (d as f64 * mean_var)
            } else {
                1.0 / d as f64
            }
        }
    }
}

/// A fitted classifier: support vectors, dual coefficients `alpha_i * y_i`,
/// and the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SVCModel {
    pub support_vectors: Array2<f64>,
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub kernel: ResolvedKernel,
    pub config: SVCConfig,
    /// Feature width the model was trained on.
    pub input_dim: usize,
}

/// Fit the soft-margin dual on stacked TRAIN features.
pub fn fit_svc(x: &FeatureMatrix, y: &[Label], config: &SVCConfig) -> Result<SVCModel> {
    if x.rows() != y.len() {
        return Err(Error::Invalid(format!(
            "{} feature rows vs {} labels",
            x.rows(),
            y.len()
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature values".into()));
    }
    let data = x.data.mapv(|v| v as f64);
    let signs: Vec<f64> = y
        .iter()
        .map(|&l| if l == Label::Covid { 1.0 } else { -1.0 })
        .collect();
    fit_svc_raw(&data, &signs, config)
}

/// Core solver on plain arrays; `y` entries must be +-1.
pub fn fit_svc_raw(x: &Array2<f64>, y: &[f64], config: &SVCConfig) -> Result<SVCModel> {
    config.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {n}")));
    }
    let n_pos = y.iter().filter(|&&v| v > 0.0).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Invalid(
            "training labels contain a single class; SVC needs both".into(),
        ));
    }

    let kernel = ResolvedKernel {
        kernel: config.kernel,
        gamma: resolve_gamma(config.gamma, x),
        poly_degree: config.poly_degree,
    };

    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    // Full kernel cache; the training sets here are small enough (a few
    // thousand rows) that n^2 doubles are cheap.
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let k = kernel.eval(&rows[i], &rows[j]);
            q[i * n + j] = y[i] * y[j] * k;
            q[j * n + i] = q[i * n + j];
        }
    }

    // Minimize 1/2 a^T Q a - e^T a  s.t.  y^T a = 0, 0 <= a <= C.
    let c = config.c;
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let tau = 1e-12;

    let mut iterations = 0usize;
    loop {
        if iterations >= config.max_iterations {
            break;
        }
        iterations += 1;

        // Maximal violating pair over I_up / I_low.
        let mut i_sel = None;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            if in_up {
                let val = -y[t] * grad[t];
                if val > g_max {
                    g_max = val;
                    i_sel = Some(t);
                }
            }
        }
        let mut j_sel = None;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            let in_low = (y[t] < 0.0 && alpha[t] < c) || (y[t] > 0.0 && alpha[t] > 0.0);
            if in_low {
                let val = -y[t] * grad[t];
                if val < g_min {
                    g_min = val;
                    j_sel = Some(t);
                }
            }
        }
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) => (i, j),
            _ => break,
        };
        if g_max - g_min <= config.tolerance {
            break;
        }

        // Analytic two-variable update with box clipping.
        let quad = (q[i * n + i] + q[j * n + j] - 2.0 * y[i] * y[j] * q[i * n + j]).max(tau);
        let delta = (g_max - g_min) / quad;

        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        alpha[i] += y[i] * delta;
        alpha[j] -= y[j] * delta;

        // Project back to the feasible box while preserving y^T a.
        let sum = y[i] * old_ai + y[j] * old_aj;
        alpha[i] = alpha[i].clamp(0.0, c);
        alpha[j] = y[j] * (sum - y[i] * alpha[i]);
        alpha[j] = alpha[j].clamp(0.0, c);
        alpha[i] = y[i] * (sum - y[j] * alpha[j]);
        alpha[i] = alpha[i].clamp(0.0, c);

        let (di, dj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        if di.abs() < 1e-16 && dj.abs() < 1e-16 {
            break;
        }
        for t in 0..n {
            grad[t] += q[t * n + i] * di + q[t * n + j] * dj;
        }
    }

    // Bias from the KKT conditions at convergence: midpoint of the bounds.
    let mut g_max = f64::NEG_INFINITY;
    let mut g_min = f64::INFINITY;
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..n {
        let val = -y[t] * grad[t];
        if (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0) {
            g_max = g_max.max(val);
        }
        if (y[t] < 0.0 && alpha[t] < c) || (y[t] > 0.0 && alpha[t] > 0.0) {
            g_min = g_min.min(val);
        }
        if alpha[t] > tau && alpha[t] < c - tau {
            free_sum += val;
            free_count += 1;
        }
    }
    let bias = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        (g_max + g_min) / 2.0
    };

    // Keep only support vectors; dropping alpha = 0 rows cannot change the
    // decision function.
    let sv_threshold = 1e-10;
    let sv_idx: Vec<usize> = (0..n).filter(|&i| alpha[i] > sv_threshold).collect();
    let mut support_vectors = Array2::<f64>::zeros((sv_idx.len(), x.ncols()));
    let mut dual_coef = Vec::with_capacity(sv_idx.len());
    for (row, &i) in sv_idx.iter().enumerate() {
        support_vectors.row_mut(row).assign(&x.row(i));
        dual_coef.push(alpha[i] * y[i]);
    }

    Ok(SVCModel {
        support_vectors,
        dual_coef,
        bias,
        kernel,
        config: *config,
        input_dim: x.ncols(),
    })
}

impl SVCModel {
    /// Signed decision value for each row; positive means COVID.
    pub fn decision_score(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.decision_score_raw(&x.data.mapv(|v| v as f64))
    }

    /// Decision scores on a plain f64 matrix.
    pub fn decision_score_raw(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "model trained on {} features, input has {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut scores = Vec::with_capacity(x.nrows());
        for row in x.rows() {
            let row: Vec<f64> = row.to_vec();
            let mut acc = self.bias;
            for (sv, &coef) in self.support_vectors.rows().into_iter().zip(&self.dual_coef) {
                let sv: Vec<f64> = sv.to_vec();
                acc += coef * self.kernel.eval(&sv, &row);
            }
            scores.push(acc);
        }
        Ok(scores)
    }

    /// Hard labels: COVID iff the decision score is strictly positive.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<Label>> {
        Ok(self
            .decision_score(x)?
            .into_iter()
            .map(|s| if s > 0.0 { Label::Covid } else { Label::NonCovid })
            .collect())
    }

    pub fn n_support(&self) -> usize {
        self.dual_coef.len()
    }
}

const SVC_META: &str = "svc.toml";
const SVC_BIN: &str = "svc.bin";
const SVC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SvcMeta {
    version: u32,
    config: SVCConfig,
    kernel: ResolvedKernel,
    input_dim: usize,
    n_support: usize,
    config_hash: String,
    /// Label encoding, recorded for the reader: 0 maps to NONCOVID, 1 to COVID.
    positive_label: String,
}

/// Persist a model under `dir`.
pub fn save_svc(model: &SVCModel, dir: &Path, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tf = TensorFile::new();
    tf.insert_f64(
        "support_vectors",
        vec![model.support_vectors.nrows(), model.support_vectors.ncols()],
        model.support_vectors.iter().copied().collect(),
    );
    tf.insert_f64("dual_coef", vec![model.dual_coef.len()], model.dual_coef.clone());
    tf.insert_f64("bias", vec![1], vec![model.bias]);
    tf.write(&dir.join(SVC_BIN))?;

    let meta = SvcMeta {
        version: SVC_VERSION,
        config: model.config,
        kernel: model.kernel,
        input_dim: model.input_dim,
        n_support: model.n_support(),
        config_hash: config_hash.to_string(),
        positive_label: Label::Covid.to_string(),
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Invalid(format!("serializing svc meta: {e}")))?;
    let meta_path = dir.join(SVC_META);
    std::fs::write(&meta_path, text).map_err(Error::io(meta_path))
}

/// Load a model saved by [`save_svc`], returning it with its config hash.
pub fn load_svc(dir: &Path) -> Result<(SVCModel, String)> {
    let meta_path = dir.join(SVC_META);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(meta_path.clone())
        } else {
            Error::io(&meta_path)(e)
        }
    })?;
    let meta: SvcMeta = toml::from_str(&text).map_err(|e| Error::Parse {
        file: meta_path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    if meta.version != SVC_VERSION {
        return Err(Error::Version {
            expected: SVC_VERSION.to_string(),
            found: meta.version.to_string(),
        });
    }
    let tf = TensorFile::read(&dir.join(SVC_BIN))?;
    let (shape, sv) = tf.get_f64("support_vectors")?;
    if shape.len() != 2 {
        return Err(Error::Integrity("support_vectors is not 2-d".into()));
    }
    let support_vectors = Array2::from_shape_vec((shape[0], shape[1]), sv.to_vec())
        .map_err(|e| Error::Integrity(e.to_string()))?;
    let (_, coef) = tf.get_f64("dual_coef")?;
    let (_, bias) = tf.get_f64("bias")?;
    if coef.len() != meta.n_support || support_vectors.nrows() != meta.n_support {
        return Err(Error::Integrity("support vector count disagrees with meta".into()));
    }
    if support_vectors.ncols() != meta.input_dim {
        return Err(Error::Integrity("support vector width disagrees with meta".into()));
    }
    Ok((
        SVCModel {
            support_vectors,
            dual_coef: coef.to_vec(),
            bias: bias[0],
            kernel: meta.kernel,
            config: meta.config,
            input_dim: meta.input_dim,
        },
        meta.config_hash,
    ))
}
