//! VGG16 convolutional trunk: thirteen 3x3 convolutions in five blocks,
//! each block closed by 2x2 max pooling. Output is `(512, 7, 7)` for a
//! 224x224 input. Tensor names follow the `features.<idx>` convention.

use ndarray::Array3;

use super::ops::{max_pool, relu_inplace, Conv2d};
use super::ParamSource;
use crate::error::Result;
use crate::tensorfile::TensorFile;

/// `(layer index, in channels, out channels)` for each convolution.
const CONV_SPECS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (17, 256, 512),
    (19, 512, 512),
    (21, 512, 512),
    (24, 512, 512),
    (26, 512, 512),
    (28, 512, 512),
];

/// Pooling happens after these convolution positions (0-based in CONV_SPECS).
const POOL_AFTER: [usize; 5] = [1, 3, 6, 9, 12];

#[derive(Debug, Clone)]
pub struct Vgg16 {
    convs: Vec<Conv2d>,
}

impl Vgg16 {
    pub fn build(source: &mut ParamSource) -> Result<Vgg16> {
        let mut convs = Vec::with_capacity(CONV_SPECS.len());
        for (idx, in_c, out_c) in CONV_SPECS {
            convs.push(Conv2d::build(
                source,
                format!("features.{idx}"),
                in_c,
                out_c,
                3,
                1,
                1,
                true,
            )?);
        }
        Ok(Vgg16 { convs })
    }

    pub fn out_channels(&self) -> usize {
        512
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        for conv in &self.convs {
            conv.dump(tf);
        }
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut act = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            act = conv.forward(&act);
            relu_inplace(&mut act);
            if POOL_AFTER.contains(&i) {
                act = max_pool(&act, 2, 2, 0);
            }
        }
        act
    }
}
