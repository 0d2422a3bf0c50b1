//! MobileNetV2 trunk: a strided 3x3 stem, seventeen inverted-residual
//! bottlenecks (expand 1x1 -> depthwise 3x3 -> linear project 1x1, with a
//! shortcut when shapes allow), and a final 1x1 expansion to 1280 channels.
//! Activations are ReLU6. Output is `(1280, 7, 7)` for a 224x224 input.

use ndarray::Array3;

use super::ops::{relu6_inplace, BatchNorm2d, Conv2d, DwConv2d};
use super::ParamSource;
use crate::error::Result;
use crate::tensorfile::TensorFile;

/// `(expansion, out channels, repeats, first stride)` per stage.
const STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<(Conv2d, BatchNorm2d)>,
    depthwise: DwConv2d,
    dw_norm: BatchNorm2d,
    project: Conv2d,
    project_norm: BatchNorm2d,
    use_shortcut: bool,
}

impl InvertedResidual {
    fn build(
        source: &mut ParamSource,
        index: usize,
        in_c: usize,
        out_c: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<InvertedResidual> {
        let hidden = in_c * expansion;
        let prefix = format!("features.{index}.conv");
        // Torchvision numbering: with expansion the stages are conv.0
        // (expand), conv.1 (depthwise), conv.2 (project), conv.3 (norm);
        // without it the depthwise pack is conv.0.
        let (expand, dw_idx, proj_idx) = if expansion != 1 {
            let conv = Conv2d::build(source, format!("{prefix}.0.0"), in_c, hidden, 1, 1, 0, false)?;
            let norm = BatchNorm2d::build(source, format!("{prefix}.0.1"), hidden)?;
            (Some((conv, norm)), 1usize, 2usize)
        } else {
            (None, 0usize, 1usize)
        };
        let depthwise = DwConv2d::build(source, format!("{prefix}.{dw_idx}.0"), hidden, 3, stride, 1)?;
        let dw_norm = BatchNorm2d::build(source, format!("{prefix}.{dw_idx}.1"), hidden)?;
        let project = Conv2d::build(source, format!("{prefix}.{proj_idx}"), hidden, out_c, 1, 1, 0, false)?;
        let project_norm = BatchNorm2d::build(source, format!("{prefix}.{}", proj_idx + 1), out_c)?;
        Ok(InvertedResidual {
            expand,
            depthwise,
            dw_norm,
            project,
            project_norm,
            use_shortcut: stride == 1 && in_c == out_c,
        })
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut act = match &self.expand {
            Some((conv, norm)) => {
                let mut a = conv.forward(x);
                norm.forward_inplace(&mut a);
                relu6_inplace(&mut a);
                a
            }
            None => x.clone(),
        };
        act = self.depthwise.forward(&act);
        self.dw_norm.forward_inplace(&mut act);
        relu6_inplace(&mut act);
        let mut out = self.project.forward(&act);
        self.project_norm.forward_inplace(&mut out);
        if self.use_shortcut {
            out += x;
        }
        out
    }

    fn param_count(&self) -> usize {
        self.expand
            .as_ref()
            .map_or(0, |(c, n)| c.param_count() + n.param_count())
            + self.depthwise.param_count()
            + self.dw_norm.param_count()
            + self.project.param_count()
            + self.project_norm.param_count()
    }

    fn dump(&self, tf: &mut TensorFile) {
        if let Some((conv, norm)) = &self.expand {
            conv.dump(tf);
            norm.dump(tf);
        }
        self.depthwise.dump(tf);
        self.dw_norm.dump(tf);
        self.project.dump(tf);
        self.project_norm.dump(tf);
    }
}

#[derive(Debug, Clone)]
pub struct MobileNetV2 {
    stem: Conv2d,
    stem_norm: BatchNorm2d,
    blocks: Vec<InvertedResidual>,
    last: Conv2d,
    last_norm: BatchNorm2d,
}

impl MobileNetV2 {
    pub fn build(source: &mut ParamSource) -> Result<MobileNetV2> {
        let stem = Conv2d::build(source, "features.0.0", 3, 32, 3, 2, 1, false)?;
        let stem_norm = BatchNorm2d::build(source, "features.0.1", 32)?;

        let mut blocks = Vec::new();
        let mut in_c = 32usize;
        let mut index = 1usize;
        for (expansion, out_c, repeats, first_stride) in STAGES {
            for r in 0..repeats {
                let stride = if r == 0 { first_stride } else { 1 };
                blocks.push(InvertedResidual::build(source, index, in_c, out_c, expansion, stride)?);
                in_c = out_c;
                index += 1;
            }
        }
        let last = Conv2d::build(source, format!("features.{index}.0"), in_c, 1280, 1, 1, 0, false)?;
        let last_norm = BatchNorm2d::build(source, format!("features.{index}.1"), 1280)?;
        Ok(MobileNetV2 {
            stem,
            stem_norm,
            blocks,
            last,
            last_norm,
        })
    }

    pub fn out_channels(&self) -> usize {
        1280
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stem_norm.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.last.param_count()
            + self.last_norm.param_count()
    }

    pub fn dump(&self, tf: &mut TensorFile) {
        self.stem.dump(tf);
        self.stem_norm.dump(tf);
        for b in &self.blocks {
            b.dump(tf);
        }
        self.last.dump(tf);
        self.last_norm.dump(tf);
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut act = self.stem.forward(x);
        self.stem_norm.forward_inplace(&mut act);
        relu6_inplace(&mut act);
        for block in &self.blocks {
            act = block.forward(&act);
        }
        act = self.last.forward(&act);
        self.last_norm.forward_inplace(&mut act);
        relu6_inplace(&mut act);
        act
    }
}
