//! Minimal CNN inference/training plumbing for the frozen-backbone models.
//!
//! Only what the three backbones and the trainable head require: 2-d
//! convolution (im2col + GEMM), depthwise convolution, pooling, inference
//! batch norm, and ReLU variants. Activations are CHW `f32` arrays. Weight
//! tensors live in a [`crate::tensorfile::TensorFile`] under
//! torchvision-compatible names so pretrained weights can be exported
//! straight from a `state_dict`.

pub mod densenet;
pub mod head;
pub mod mobilenet;
pub mod ops;
pub mod vgg;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

/// Where layer parameters come from when a network is constructed.
pub enum ParamSource<'a> {
    /// Seeded He-normal initialization (convolutions), identity batch norm.
    Random(&'a mut ChaCha8Rng),
    /// Named tensors, e.g. exported pretrained weights or a saved artifact.
    Loaded(&'a TensorFile),
}

impl ParamSource<'_> {
    fn conv_weight(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> Result<Array2<f32>> {
        let fan_in = in_c * k * k;
        match self {
            ParamSource::Random(rng) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let data: Vec<f32> = (0..out_c * fan_in)
                    .map(|_| (normal_sample(rng) * std) as f32)
                    .collect();
                Ok(Array2::from_shape_vec((out_c, fan_in), data).unwrap())
            }
            ParamSource::Loaded(tf) => {
                let (shape, data) = tf.get_f32(name)?;
                let expected = [out_c, in_c, k, k];
                if shape != expected {
                    return Err(Error::Shape(format!(
                        "{name}: expected shape {expected:?}, found {shape:?}"
                    )));
                }
                Ok(Array2::from_shape_vec((out_c, fan_in), data.to_vec()).unwrap())
            }
        }
    }

    fn vector(&mut self, name: &str, len: usize, fill: f32) -> Result<Array1<f32>> {
        match self {
            ParamSource::Random(_) => Ok(Array1::from_elem(len, fill)),
            ParamSource::Loaded(tf) => {
                let (shape, data) = tf.get_f32(name)?;
                if shape != [len] {
                    return Err(Error::Shape(format!(
                        "{name}: expected length {len}, found shape {shape:?}"
                    )));
                }
                Ok(Array1::from_vec(data.to_vec()))
            }
        }
    }
}

/// Standard normal via Box-Muller; keeps initialization independent of the
/// rand_distr crate's evolving sampling internals.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Convert an HWC image tensor to the CHW layout the conv stack uses.
pub fn hwc_to_chw(data: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = data.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci, y, x)] = data[(y, x, ci)];
            }
        }
    }
    out
}
