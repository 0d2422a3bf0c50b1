//! DenseNet121 trunk: a 7x7 stem, four dense blocks of (6, 12, 24, 16)
//! layers with growth rate 32 and bottleneck width 128, halving transitions
//! between blocks, and a final batch norm. Every layer's input is the
//! concatenation of all previous feature maps in its block. Output is
//! `(1024, 7, 7)` for a 224x224 input (after the closing norm + ReLU).

use ndarray::{s, Array3};

use super::ops::{avg_pool, max_pool, relu_inplace, BatchNorm2d, Conv2d};
use super::ParamSource;
use crate::error::Result;
use crate::tensorfile::TensorFile;

const GROWTH: usize = 32;
const BOTTLENECK: usize = 4 * GROWTH;
const BLOCK_LAYERS: [usize; 4] = [6, 12, 24, 16];

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn build(source: &mut ParamSource, prefix: &str, in_c: usize) -> Result<DenseLayer> {
        Ok(DenseLayer {
            norm1: BatchNorm2d::build(source, format!("{prefix}.norm1"), in_c)?,
            conv1: Conv2d::build(source, format!("{prefix}.conv1"), in_c, BOTTLENECK, 1, 1, 0, false)?,
            norm2: BatchNorm2d::build(source, format!("{prefix}.norm2"), BOTTLENECK)?,
            conv2: Conv2d::build(source, format!("{prefix}.conv2"), BOTTLENECK, GROWTH, 3, 1, 1, false)?,
        })
    }

    /// New GROWTH feature maps from the concatenated input.
    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut a = x.clone();
        self.norm1.forward_inplace(&mut a);
        relu_inplace(&mut a);
        let mut b = self.conv1.forward(&a);
        self.norm2.forward_inplace(&mut b);
        relu_inplace(&mut b);
        self.conv2.forward(&b)
    }

    fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.conv1.param_count()
            + self.norm2.param_count()
            + self.conv2.param_count()
    }

    fn dump(&self, tf: &mut TensorFile) {
        self.norm1.dump(tf);
        self.conv1.dump(tf);
        self.norm2.dump(tf);
        self.conv2.dump(tf);
    }
}

#[derive(Debug, Clone)]
struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn build(source: &mut ParamSource, prefix: &str, in_c: usize) -> Result<Transition> {
        Ok(Transition {
            norm: BatchNorm2d::build(source, format!("{prefix}.norm"), in_c)?,
            conv: Conv2d::build(source, format!("{prefix}.conv"), in_c, in_c / 2, 1, 1, 0, false)?,
        })
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut a = x.clone();
        self.norm.forward_inplace(&mut a);
        relu_inplace(&mut a);
        let a = self.conv.forward(&a);
        avg_pool(&a, 2, 2)
    }

    fn param_count(&self) -> usize {
        self.norm.param_count() + self.conv.param_count()
    }

    fn dump(&self, tf: &mut TensorFile) {
        self.norm.dump(tf);
        self.conv.dump(tf);
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet121 {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
}

impl DenseNet121 {
    pub fn build(source: &mut ParamSource) -> Result<DenseNet121> {
        let conv0 = Conv2d::build(source, "features.conv0", 3, 64, 7, 2, 3, false)?;
        let norm0 = BatchNorm2d::build(source, "features.norm0", 64)?;

        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut channels = 64usize;
        for (b, &layer_count) in BLOCK_LAYERS.iter().enumerate() {
            let mut layers = Vec::with_capacity(layer_count);
            for l in 0..layer_count {
                let prefix = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
                layers.push(DenseLayer::build(source, &prefix, channels + l * GROWTH)?);
            }
            channels += layer_count * GROWTH;
            blocks.push(layers);
            if b + 1 < BLOCK_LAYERS.len() {
                let prefix = format!("features.transition{}", b + 1);
                transitions.push(Transition::build(source, &prefix, channels)?);
                channels /= 2;
            }
        }
        let norm5 = BatchNorm2d::build(source, "features.norm5", channels)?;
        Ok(DenseNet121 {
            conv0,
            norm0,
            blocks,
            transitions,
            norm5,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.norm5.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.conv0.param_count()
            + self.norm0.param_count()
            + self.blocks.iter().flatten().map(|l| l.param_count()).sum::<usize>()
            + self.transitions.iter().map(|t| t.param_count()).sum::<usize>()
            + self.norm5.param_count()
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        self.conv0.dump(tf);
        self.norm0.dump(tf);
        for layer in self.blocks.iter().flatten() {
            layer.dump(tf);
        }
        for t in &self.transitions {
            t.dump(tf);
        }
        self.norm5.dump(tf);
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut act = self.conv0.forward(x);
        self.norm0.forward_inplace(&mut act);
        relu_inplace(&mut act);
        act = max_pool(&act, 3, 2, 1);

        for (b, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let new = layer.forward(&act);
                act = concat_channels(&act, &new);
            }
            if b < self.transitions.len() {
                act = self.transitions[b].forward(&act);
            }
        }
        self.norm5.forward_inplace(&mut act);
        relu_inplace(&mut act);
        act
    }
}

fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    let (ca, h, w) = a.dim();
    let cb = b.dim().0;
    let mut out = Array3::<f32>::zeros((ca + cb, h, w));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn published_parameter_count() {
        let mut rng = derive_rng(0, "densenet", 0);
        let mut src = ParamSource::Random(&mut rng);
        let net = DenseNet121::build(&mut src).unwrap();
        assert_eq!(net.param_count(), 6_953_856);
        assert_eq!(net.out_channels(), 1024);
    }

    #[test]
    fn concat_stacks_along_channels() {
        let a = Array3::<f32>::zeros((2, 3, 3));
        let b = Array3::<f32>::ones((1, 3, 3));
        let out = concat_channels(&a, &b);
        assert_eq!(out.dim(), (3, 3, 3));
        assert_eq!(out[(2, 0, 0)], 1.0);
    }
}
