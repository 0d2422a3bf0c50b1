//! Layer primitives over CHW activations.

use ndarray::{s, Array1, Array2, Array3};

use super::ParamSource;
use crate::error::Result;
use crate::tensorfile::TensorFile;

/// 2-d convolution; the kernel is stored flattened as `(out_c, in_c*k*k)`
/// for direct GEMM use, and round-trips through files as `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        source: &mut ParamSource,
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Result<Conv2d> {
        let name = name.into();
        let weight = source.conv_weight(&format!("{name}.weight"), out_c, in_c, k)?;
        let bias = if with_bias {
            Some(source.vector(&format!("{name}.bias"), out_c, 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            name,
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        tf.insert_f32(
            format!("{}.weight", self.name),
            vec![self.out_c, self.in_c, self.k, self.k],
            self.weight.iter().copied().collect(),
        );
        if let Some(bias) = &self.bias {
            tf.insert_f32(format!("{}.bias", self.name), vec![self.out_c], bias.to_vec());
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.k) / self.stride + 1
    }

    /// im2col in strips of output rows to bound the patch buffer, then GEMM.
    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (in_c, h, w) = x.dim();
        debug_assert_eq!(in_c, self.in_c, "{}: channel mismatch", self.name);
        let oh = self.out_size(h);
        let ow = self.out_size(w);
        let k = self.k;
        let patch_rows = in_c * k * k;

        let mut out = Array3::<f32>::zeros((self.out_c, oh, ow));
        // Strip height tuned so the patch buffer stays around a few MB.
        let strip = (4_000_000 / (patch_rows * ow * 4)).clamp(1, oh);
        let mut patches = Array2::<f32>::zeros((patch_rows, strip * ow));

        let mut oy0 = 0;
        while oy0 < oh {
            let rows = strip.min(oh - oy0);
            let cols = rows * ow;
            {
                let mut view = patches.slice_mut(s![.., ..cols]);
                view.fill(0.0);
                for ci in 0..in_c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let pr = (ci * k + ky) * k + kx;
                            for dy in 0..rows {
                                let iy = (oy0 + dy) * self.stride + ky;
                                if iy < self.pad || iy >= h + self.pad {
                                    continue;
                                }
                                let iy = iy - self.pad;
                                for ox in 0..ow {
                                    let ix = ox * self.stride + kx;
                                    if ix < self.pad || ix >= w + self.pad {
                                        continue;
                                    }
                                    view[(pr, dy * ow + ox)] = x[(ci, iy, ix - self.pad)];
                                }
                            }
                        }
                    }
                }
            }
            let result = self.weight.dot(&patches.slice(s![.., ..cols]));
            for oc in 0..self.out_c {
                let bias = self.bias.as_ref().map_or(0.0, |b| b[oc]);
                for dy in 0..rows {
                    for ox in 0..ow {
                        out[(oc, oy0 + dy, ox)] = result[(oc, dy * ow + ox)] + bias;
                    }
                }
            }
            oy0 += rows;
        }
        out
    }
}

/// Depthwise 3x3-style convolution (one filter per channel, no bias).
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub name: String,
    /// `(channels, k, k)`.
    pub weight: Array3<f32>,
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DwConv2d {
    pub fn build(
        source: &mut ParamSource,
        name: impl Into<String>,
        channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<DwConv2d> {
        let name = name.into();
        // Stored as (C, 1, k, k) to match grouped-conv weight shapes.
        let flat = source.conv_weight(&format!("{name}.weight"), channels, 1, k)?;
        let weight = Array3::from_shape_vec((channels, k, k), flat.iter().copied().collect()).unwrap();
        Ok(DwConv2d {
            name,
            weight,
            channels,
            k,
            stride,
            pad,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        tf.insert_f32(
            format!("{}.weight", self.name),
            vec![self.channels, 1, self.k, self.k],
            self.weight.iter().copied().collect(),
        );
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..self.k {
                        let iy = oy * self.stride + ky;
                        if iy < self.pad || iy >= h + self.pad {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for kx in 0..self.k {
                            let ix = ox * self.stride + kx;
                            if ix < self.pad || ix >= w + self.pad {
                                continue;
                            }
                            acc += self.weight[(ci, ky, kx)] * x[(ci, iy, ix - self.pad)];
                        }
                    }
                    out[(ci, oy, ox)] = acc;
                }
            }
        }
        out
    }
}

/// Inference-mode batch normalization: a per-channel affine map derived from
/// the stored running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn build(source: &mut ParamSource, name: impl Into<String>, channels: usize) -> Result<BatchNorm2d> {
        let name = name.into();
        Ok(BatchNorm2d {
            gamma: source.vector(&format!("{name}.weight"), channels, 1.0)?,
            beta: source.vector(&format!("{name}.bias"), channels, 0.0)?,
            running_mean: source.vector(&format!("{name}.running_mean"), channels, 0.0)?,
            running_var: source.vector(&format!("{name}.running_var"), channels, 1.0)?,
            eps: 1e-5,
            name,
        })
    }

    /// Learnable parameters only; running statistics are buffers.
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        let c = self.gamma.len();
        tf.insert_f32(format!("{}.weight", self.name), vec![c], self.gamma.to_vec());
        tf.insert_f32(format!("{}.bias", self.name), vec![c], self.beta.to_vec());
        tf.insert_f32(format!("{}.running_mean", self.name), vec![c], self.running_mean.to_vec());
        tf.insert_f32(format!("{}.running_var", self.name), vec![c], self.running_var.to_vec());
    }

    pub fn forward_inplace(&self, x: &mut Array3<f32>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.gamma.len());
        for ci in 0..c {
            let scale = self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt();
            let shift = self.beta[ci] - self.running_mean[ci] * scale;
            for y in 0..h {
                for xx in 0..w {
                    x[(ci, y, xx)] = x[(ci, y, xx)] * scale + shift;
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu6_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.clamp(0.0, 6.0));
}

/// Max pooling with optional zero padding (padded samples never win unless
/// the window is entirely outside the image, which does not occur here).
pub fn max_pool(x: &Array3<f32>, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox * stride + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        best = best.max(x[(ci, iy - pad, ix - pad)]);
                    }
                }
                out[(ci, oy, ox)] = best;
            }
        }
    }
    out
}

/// Non-padded average pooling.
pub fn avg_pool(x: &Array3<f32>, k: usize, stride: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let norm = 1.0 / (k * k) as f32;
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x[(ci, oy * stride + ky, ox * stride + kx)];
                    }
                }
                out[(ci, oy, ox)] = acc * norm;
            }
        }
    }
    out
}

/// Global average pooling: each feature map collapses to its spatial mean.
pub fn global_avg_pool(x: &Array3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    let norm = 1.0 / (h * w) as f32;
    let mut out = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut acc = 0.0f32;
        for y in 0..h {
            for xx in 0..w {
                acc += x[(ci, y, xx)];
            }
        }
        out[ci] = acc * norm;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::array;

    fn loaded_conv(weight: Vec<f32>, bias: Option<Vec<f32>>, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
        Conv2d {
            name: "t".into(),
            weight: Array2::from_shape_vec((out_c, in_c * k * k), weight).unwrap(),
            bias: bias.map(Array1::from_vec),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let conv = loaded_conv(vec![1.0], None, 1, 1, 1, 1, 0);
        let x = array![[[1.0f32, 2.0], [3.0, 4.0]]];
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn conv_brute_force_oracle() {
        // Compare the im2col path against direct summation on a small case.
        let mut rng = derive_rng(1, "conv-test", 0);
        let mut src = ParamSource::Random(&mut rng);
        let conv = Conv2d::build(&mut src, "c", 3, 5, 3, 2, 1, true).unwrap();
        let x = Array3::from_shape_fn((3, 9, 11), |(c, y, xx)| ((c * 37 + y * 13 + xx * 7) % 19) as f32 * 0.25 - 1.0);

        let got = conv.forward(&x);
        let (oh, ow) = (got.dim().1, got.dim().2);
        for oc in 0..5 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut want = conv.bias.as_ref().unwrap()[oc];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as i64 - 1;
                                let ix = (ox * 2 + kx) as i64 - 1;
                                if !(0..9).contains(&iy) || !(0..11).contains(&ix) {
                                    continue;
                                }
                                want += conv.weight[(oc, (ci * 3 + ky) * 3 + kx)]
                                    * x[(ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                    let diff = (got[(oc, oy, ox)] - want).abs();
                    assert!(diff < 1e-4, "mismatch at ({oc},{oy},{ox}): {diff}");
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_direct() {
        let mut rng = derive_rng(2, "dw-test", 0);
        let mut src = ParamSource::Random(&mut rng);
        let dw = DwConv2d::build(&mut src, "d", 4, 3, 2, 1).unwrap();
        let x = Array3::from_shape_fn((4, 7, 7), |(c, y, xx)| (c + y * 2 + xx) as f32 * 0.1);
        let out = dw.forward(&x);
        assert_eq!(out.dim(), (4, 4, 4));
        // Center tap check for an interior output.
        let mut want = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                want += dw.weight[(1, ky, kx)] * x[(1, 2 + ky - 1, 2 + kx - 1)];
            }
        }
        assert!((out[(1, 1, 1)] - want).abs() < 1e-5);
    }

    #[test]
    fn pooling_shapes_and_values() {
        let x = array![[
            [1.0f32, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0]
        ]];
        let mp = max_pool(&x, 2, 2, 0);
        assert_eq!(mp, array![[[6.0f32, 8.0], [14.0, 16.0]]]);
        let ap = avg_pool(&x, 2, 2);
        assert_eq!(ap, array![[[3.5f32, 5.5], [11.5, 13.5]]]);
        let gap = global_avg_pool(&x);
        assert!((gap[0] - 8.5).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_affine() {
        let mut rng = derive_rng(3, "bn-test", 0);
        let mut src = ParamSource::Random(&mut rng);
        let mut bn = BatchNorm2d::build(&mut src, "bn", 2).unwrap();
        bn.running_mean = array![1.0f32, -1.0];
        bn.running_var = array![4.0f32, 0.25];
        bn.gamma = array![2.0f32, 1.0];
        bn.beta = array![0.5f32, 0.0];
        let mut x = array![[[3.0f32]], [[0.0f32]]];
        bn.forward_inplace(&mut x);
        // (3-1)/2 * 2 + 0.5 = 2.5 ; (0+1)/0.5 * 1 = 2 (up to eps)
        assert!((x[(0, 0, 0)] - 2.5).abs() < 1e-3);
        assert!((x[(1, 0, 0)] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn relu_variants() {
        let mut x = array![[[-1.0f32, 3.0, 9.0]]];
        let mut y = x.clone();
        relu_inplace(&mut x);
        assert_eq!(x, array![[[0.0f32, 3.0, 9.0]]]);
        relu6_inplace(&mut y);
        assert_eq!(y, array![[[0.0f32, 3.0, 6.0]]]);
    }
}
