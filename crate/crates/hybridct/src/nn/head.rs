//! The trainable classification head appended to each frozen backbone:
//! global-average-pooled features -> dropout -> batch norm -> dense+ReLU ->
//! dense+sigmoid.
//!
//! Batch norm here normalizes with the running statistics (updated by
//! exponential moving average from each training batch and treated as
//! constants in backprop). With dropout disabled this makes training-mode
//! and inference-mode forward passes identical for fixed parameters.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ParamSource;
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

/// Head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub dense_width: usize,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dense_width: 128,
            dropout_rate: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dense_width == 0 {
            return Err(Error::Invalid("dense_width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Learnable parameters of the head for a given input width:
    /// batch-norm gamma/beta, two dense layers with biases.
    pub fn param_count(&self, in_dim: usize) -> usize {
        2 * in_dim + (in_dim * self.dense_width + self.dense_width) + (self.dense_width + 1)
    }
}

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    pub in_dim: usize,
    gamma: Array1<f32>,
    beta: Array1<f32>,
    running_mean: Array1<f32>,
    running_var: Array1<f32>,
    /// `(dense_width, in_dim)`.
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array1<f32>,
    b2: f32,
}

/// Captured intermediate activations for one training step.
pub struct ForwardCache {
    /// Normalized (pre-affine) input, needed for the gamma gradient.
    normalized: Array2<f32>,
    /// Batch-norm output (input to fc1).
    bn_out: Array2<f32>,
    /// fc1 pre-activation, for the ReLU mask.
    pre1: Array2<f32>,
    /// ReLU output (input to fc2).
    pub hidden: Array2<f32>,
    pub logits: Array1<f32>,
}

/// Gradients in parameter order `[gamma, beta, w1, b1, w2, b2]`.
pub struct Grads {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array1<f32>,
    b2: f32,
}

impl Head {
    pub fn build(source: &mut ParamSource, in_dim: usize, config: HeadConfig) -> Result<Head> {
        config.validate()?;
        let width = config.dense_width;
        let (w1, b1, w2, b2) = match source {
            ParamSource::Random(rng) => {
                // Uniform Kaiming-style init for the dense layers.
                let bound1 = (1.0 / in_dim as f64).sqrt();
                let w1: Vec<f32> = (0..width * in_dim)
                    .map(|_| (rng.gen_range(-bound1..bound1)) as f32)
                    .collect();
                let b1: Vec<f32> = (0..width).map(|_| (rng.gen_range(-bound1..bound1)) as f32).collect();
                let bound2 = (1.0 / width as f64).sqrt();
                let w2: Vec<f32> = (0..width).map(|_| (rng.gen_range(-bound2..bound2)) as f32).collect();
                let b2 = rng.gen_range(-bound2..bound2) as f32;
                (
                    Array2::from_shape_vec((width, in_dim), w1).unwrap(),
                    Array1::from_vec(b1),
                    Array1::from_vec(w2),
                    b2,
                )
            }
            ParamSource::Loaded(tf) => {
                let (shape, w1) = tf.get_f32("head.fc1.weight")?;
                if shape != [width, in_dim] {
                    return Err(Error::Shape(format!(
                        "head.fc1.weight: expected {:?}, found {shape:?}",
                        [width, in_dim]
                    )));
                }
                let w1 = Array2::from_shape_vec((width, in_dim), w1.to_vec()).unwrap();
                let (_, b1) = tf.get_f32("head.fc1.bias")?;
                let (_, w2) = tf.get_f32("head.fc2.weight")?;
                let (_, b2) = tf.get_f32("head.fc2.bias")?;
                (
                    w1,
                    Array1::from_vec(b1.to_vec()),
                    Array1::from_vec(w2.to_vec()),
                    b2[0],
                )
            }
        };
        Ok(Head {
            config,
            in_dim,
            gamma: source.vector("head.norm.weight", in_dim, 1.0)?,
            beta: source.vector("head.norm.bias", in_dim, 0.0)?,
            running_mean: source.vector("head.norm.running_mean", in_dim, 0.0)?,
            running_var: source.vector("head.norm.running_var", in_dim, 1.0)?,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count(self.in_dim)
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        let d = self.in_dim;
        let w = self.config.dense_width;
        tf.insert_f32("head.norm.weight", vec![d], self.gamma.to_vec());
        tf.insert_f32("head.norm.bias", vec![d], self.beta.to_vec());
        tf.insert_f32("head.norm.running_mean", vec![d], self.running_mean.to_vec());
        tf.insert_f32("head.norm.running_var", vec![d], self.running_var.to_vec());
        tf.insert_f32("head.fc1.weight", vec![w, d], self.w1.iter().copied().collect());
        tf.insert_f32("head.fc1.bias", vec![w], self.b1.to_vec());
        tf.insert_f32("head.fc2.weight", vec![w], self.w2.to_vec());
        tf.insert_f32("head.fc2.bias", vec![1], vec![self.b2]);
    }

    /// Sample an inverted-dropout mask (entries 0 or `1/(1-p)`).
    pub fn sample_dropout_mask(&self, batch: usize, rng: &mut ChaCha8Rng) -> Option<Array2<f32>> {
        let p = self.config.dropout_rate;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        Some(Array2::from_shape_fn((batch, self.in_dim), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }

    /// Update running statistics from a (dropout-applied) batch.
    fn update_running_stats(&mut self, x: &Array2<f32>) {
        let n = x.nrows() as f32;
        for j in 0..self.in_dim {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
            // Unbiased variance feeds the running estimate when possible.
            let var_unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mean;
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * var_unbiased;
        }
    }

    /// Forward pass. `mask` enables dropout (training); `update_stats`
    /// refreshes the batch-norm running statistics before normalizing.
    pub fn forward(
        &mut self,
        x: &Array2<f32>,
        mask: Option<&Array2<f32>>,
        update_stats: bool,
    ) -> ForwardCache {
        let dropped = match mask {
            Some(m) => x * m,
            None => x.clone(),
        };
        if update_stats {
            self.update_running_stats(&dropped);
        }
        let (n, d) = dropped.dim();
        let mut normalized = Array2::<f32>::zeros((n, d));
        let mut bn_out = Array2::<f32>::zeros((n, d));
        for j in 0..d {
            let inv_std = 1.0 / (self.running_var[j] + BN_EPS).sqrt();
            let mean = self.running_mean[j];
            for i in 0..n {
                let z = (dropped[(i, j)] - mean) * inv_std;
                normalized[(i, j)] = z;
                bn_out[(i, j)] = z * self.gamma[j] + self.beta[j];
            }
        }
        let mut pre1 = bn_out.dot(&self.w1.t());
        for (mut row, _) in pre1.rows_mut().into_iter().zip(0..) {
            row += &self.b1;
        }
        let hidden = pre1.mapv(|v| v.max(0.0));
        let logits = hidden.dot(&self.w2) + self.b2;
        ForwardCache {
            normalized,
            bn_out,
            pre1,
            hidden,
            logits,
        }
    }

    /// Final-layer logits from already-computed hidden activations.
    pub fn logits_from_hidden(&self, hidden: &Array2<f32>) -> Array1<f32> {
        hidden.dot(&self.w2) + self.b2
    }

    /// Inference-mode forward (no dropout, frozen statistics).
    pub fn forward_infer(&self, x: &Array2<f32>) -> ForwardCache {
        // Running stats are not touched, so the &mut is only structural.
        let mut shadow = self.clone();
        shadow.forward(x, None, false)
    }

    /// Mean binary cross-entropy on logits plus its gradient, numerically
    /// stable for large |logit|.
    pub fn bce_loss(logits: &Array1<f32>, targets: &[f32]) -> (f64, Array1<f32>) {
        let n = logits.len();
        let mut loss = 0.0f64;
        let mut dlogits = Array1::<f32>::zeros(n);
        for i in 0..n {
            let z = logits[i] as f64;
            let y = targets[i] as f64;
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let sigma = stable_sigmoid(z);
            dlogits[i] = ((sigma - y) / n as f64) as f32;
        }
        (loss / n as f64, dlogits)
    }

    /// Backpropagate through the head (batch-norm statistics are constants).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array1<f32>) -> Grads {
        let n = cache.hidden.nrows();
        let gw2 = cache.hidden.t().dot(dlogits);
        let gb2 = dlogits.sum();

        let mut dpre1 = Array2::<f32>::zeros(cache.pre1.dim());
        for i in 0..n {
            for j in 0..self.config.dense_width {
                if cache.pre1[(i, j)] > 0.0 {
                    dpre1[(i, j)] = dlogits[i] * self.w2[j];
                }
            }
        }
        let gw1 = dpre1.t().dot(&cache.bn_out);
        let gb1 = dpre1.sum_axis(ndarray::Axis(0));

        let dbn = dpre1.dot(&self.w1);
        let mut ggamma = Array1::<f32>::zeros(self.in_dim);
        let mut gbeta = Array1::<f32>::zeros(self.in_dim);
        for i in 0..n {
            for j in 0..self.in_dim {
                ggamma[j] += dbn[(i, j)] * cache.normalized[(i, j)];
                gbeta[j] += dbn[(i, j)];
            }
        }
        Grads {
            gamma: ggamma,
            beta: gbeta,
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        }
    }

    pub fn params_flat_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.gamma.as_slice_mut().unwrap(),
            self.beta.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        vec![
            self.in_dim,
            self.in_dim,
            self.in_dim * self.config.dense_width,
            self.config.dense_width,
            self.config.dense_width,
            1,
        ]
    }
}

impl Grads {
    pub fn flat(&self) -> Vec<&[f32]> {
        vec![
            self.gamma.as_slice().unwrap(),
            self.beta.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            std::slice::from_ref(&self.b2),
        ]
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adam over flat parameter slices, state kept in declaration order.
pub struct Adam {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Adam {
        Adam {
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                param[i] -= update as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn small_head() -> Head {
        let mut rng = derive_rng(7, "head", 0);
        let mut src = ParamSource::Random(&mut rng);
        Head::build(
            &mut src,
            5,
            HeadConfig {
                dense_width: 4,
                dropout_rate: 0.0,
            },
        )
        .unwrap()
    }

    fn loss_of(head: &mut Head, x: &Array2<f32>, y: &[f32]) -> f64 {
        let cache = head.forward(x, None, false);
        Head::bce_loss(&cache.logits, y).0
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut head = small_head();
        // Non-trivial running stats so the BN path is exercised.
        head.running_mean = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        head.running_var = Array1::from_vec(vec![1.5, 0.7, 2.0, 1.0, 0.9]);

        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f32 * 0.37).sin());
        let y = [1.0f32, 0.0, 1.0];

        let cache = head.forward(&x, None, false);
        let (_, dlogits) = Head::bce_loss(&cache.logits, &y);
        let grads = head.backward(&cache, &dlogits);
        let analytic: Vec<Vec<f32>> = grads.flat().iter().map(|g| g.to_vec()).collect();

        let eps = 1e-3f32;
        for (pi, size) in head.param_sizes().into_iter().enumerate() {
            #[allow(clippy::needless_range_loop)]
            for k in 0..size {
                let mut plus = head.clone();
                plus.params_flat_mut()[pi][k] += eps;
                let lp = loss_of(&mut plus, &x, &y);
                let mut minus = head.clone();
                minus.params_flat_mut()[pi][k] -= eps;
                let lm = loss_of(&mut minus, &x, &y);
                let numeric = ((lp - lm) / (2.0 * eps as f64)) as f32;
                let a = analytic[pi][k];
                assert!(
                    (numeric - a).abs() < 2e-3 + 0.05 * a.abs().max(numeric.abs()),
                    "param {pi}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn train_and_infer_agree_without_dropout() {
        let mut head = small_head();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i as f32 - j as f32) * 0.2);
        let train = head.forward(&x, None, false);
        let infer = head.forward_infer(&x);
        assert_eq!(train.logits, infer.logits);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut head = small_head();
        head.config.dropout_rate = 0.5;
        let mut rng = derive_rng(1, "mask", 0);
        let mask = head.sample_dropout_mask(8, &mut rng).unwrap();
        for &v in mask.iter() {
            assert!(v == 0.0 || v == 2.0);
        }
        let kept = mask.iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 10 && kept < 30, "kept {kept} of 40");
    }

    #[test]
    fn head_learns_a_separable_problem() {
        let mut head = small_head();
        let n = 32;
        let x = Array2::from_shape_fn((n, 5), |(i, j)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.5 + j as f32 * 0.1)
        });
        let y: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();

        let mut adam = Adam::new(&head.param_sizes());
        let mut first_loss = None;
        let mut last_loss = 0.0;
        for _ in 0..200 {
            let cache = head.forward(&x, None, true);
            let (loss, dlogits) = Head::bce_loss(&cache.logits, &y);
            let grads = head.backward(&cache, &dlogits);
            adam.step(1e-2, &mut head.params_flat_mut(), &grads.flat());
            first_loss.get_or_insert(loss);
            last_loss = loss;
        }
        assert!(last_loss < first_loss.unwrap() * 0.2, "loss {last_loss}");

        let cache = head.forward_infer(&x);
        let correct = cache
            .logits
            .iter()
            .zip(&y)
            .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
            .count();
        assert_eq!(correct, n);
    }

    #[test]
    fn head_dump_and_reload_roundtrip() {
        let head = small_head();
        let mut tf = TensorFile::new();
        head.dump(&mut tf);
        let mut src = ParamSource::Loaded(&tf);
        let back = Head::build(&mut src, 5, head.config).unwrap();
        assert_eq!(back.w1, head.w1);
        assert_eq!(back.running_var, head.running_var);

        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f32 * 0.1);
        assert_eq!(back.forward_infer(&x).logits, head.forward_infer(&x).logits);
    }
}
