//! Frozen-backbone transfer models: build, fine-tune the head, predict, and
//! persist. Backbone weights are never updated; only the appended head
//! (GAP -> dropout -> batch norm -> dense+ReLU -> dense+sigmoid) trains,
//! with Adam on binary cross-entropy and the validation-loss callbacks.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::augment::{apply_augmentation, sample_params, AugmentationConfig};
use crate::callbacks::{CallbackConfig, TrainingController};
use crate::dataset::{ImageRecord, ImageTensor, Split};
use crate::error::{Error, Result};
use crate::features::{BackboneId, FeatureMatrix, Provenance};
use crate::nn::densenet::DenseNet121;
use crate::nn::head::{Adam, Head, HeadConfig};
use crate::nn::mobilenet::MobileNetV2;
use crate::nn::vgg::Vgg16;
use crate::nn::{hwc_to_chw, ParamSource};
use crate::rng::{derive_rng, derive_rng_keyed};
use crate::tensorfile::TensorFile;

/// Logistic function, numerically stable across the full f64 range.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Training hyperparameters. Defaults: Adam at 1e-4 on binary cross-entropy,
/// 20 epochs, batch size 8, early stop patience 5 (restoring the best
/// weights), plateau halving with a 1e-6 floor, all monitoring validation
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f64,
    /// Plateau length before the learning rate is reduced; must sit below
    /// the early-stop patience to have any effect.
    pub lr_plateau_patience: usize,
    pub lr_min: f64,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 8,
            early_stop_patience: 5,
            lr_reduce_factor: 0.5,
            lr_plateau_patience: 3,
            lr_min: 1e-6,
            min_delta: 1e-4,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min > self.learning_rate {
            return Err(Error::Invalid(format!(
                "lr_min {} exceeds the initial learning rate {}",
                self.lr_min, self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn callback_config(&self) -> CallbackConfig {
        CallbackConfig {
            initial_lr: self.learning_rate,
            early_stop_patience: self.early_stop_patience,
            plateau_patience: self.lr_plateau_patience,
            lr_factor: self.lr_reduce_factor,
            lr_min: self.lr_min,
            min_delta: self.min_delta,
        }
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsSource {
    /// Seeded He initialization; no external files required.
    Random,
    /// Exported pretrained weights (`<dir>/<backbone>.hctw`). `None` falls
    /// back to the `HYBRIDCT_WEIGHTS_DIR` environment variable.
    Pretrained { dir: Option<PathBuf> },
}

/// Environment variable naming the pretrained-weights cache directory.
pub const WEIGHTS_DIR_ENV: &str = "HYBRIDCT_WEIGHTS_DIR";

fn pretrained_file(id: BackboneId, dir: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = match dir {
        Some(d) => d.clone(),
        None => std::env::var_os(WEIGHTS_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::WeightsUnavailable(format!(
                    "no weights directory configured; set {WEIGHTS_DIR_ENV} or \
                     `weights_dir` in the config (export weights with tools/export_weights.py)"
                ))
            })?,
    };
    let path = dir.join(format!("{id}.hctw"));
    if !path.is_file() {
        return Err(Error::WeightsUnavailable(format!(
            "{} does not exist; export it with tools/export_weights.py \
             (ImageNet weights for {id}) or switch weights to \"random\"",
            path.display()
        )));
    }
    Ok(path)
}

/// One of the three frozen trunks.
#[derive(Debug, Clone)]
pub enum Backbone {
    Vgg16(Vgg16),
    DenseNet121(DenseNet121),
    MobileNetV2(MobileNetV2),
}

impl Backbone {
    fn build(id: BackboneId, source: &mut ParamSource) -> Result<Backbone> {
        Ok(match id {
            BackboneId::Vgg16 => Backbone::Vgg16(Vgg16::build(source)?),
            BackboneId::DenseNet121 => Backbone::DenseNet121(DenseNet121::build(source)?),
            BackboneId::MobileNetV2 => Backbone::MobileNetV2(MobileNetV2::build(source)?),
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Backbone::Vgg16(n) => n.out_channels(),
            Backbone::DenseNet121(n) => n.out_channels(),
            Backbone::MobileNetV2(n) => n.out_channels(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Backbone::Vgg16(n) => n.param_count(),
            Backbone::DenseNet121(n) => n.param_count(),
            Backbone::MobileNetV2(n) => n.param_count(),
        }
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        match self {
            Backbone::Vgg16(n) => n.forward(x),
            Backbone::DenseNet121(n) => n.forward(x),
            Backbone::MobileNetV2(n) => n.forward(x),
        }
    }

    fn dump(&self, tf: &mut TensorFile) {
        match self {
            Backbone::Vgg16(n) => n.dump(tf),
            Backbone::DenseNet121(n) => n.dump(tf),
            Backbone::MobileNetV2(n) => n.dump(tf),
        }
    }
}

/// Parameter accounting for a built model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    /// Trainable count if nothing were frozen over trainable as built.
    pub reduction_factor: f64,
}

impl ParamCounts {
    pub fn compute(frozen: usize, trainable: usize) -> ParamCounts {
        let total = frozen + trainable;
        ParamCounts {
            total,
            trainable,
            frozen,
            reduction_factor: total as f64 / trainable as f64,
        }
    }
}

/// A frozen backbone plus its trainable head.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone_id: BackboneId,
    pub head_config: HeadConfig,
    /// Apply ImageNet channel normalization before the backbone (an explicit
    /// deviation from the default plain [0, 1] scaling).
    pub imagenet_preproc: bool,
    backbone: Backbone,
    pub(crate) head: Head,
}

/// Build a model with the head appended and every backbone layer frozen.
pub fn build_model(
    id: BackboneId,
    head_config: HeadConfig,
    weights: &WeightsSource,
    seed: u64,
) -> Result<Model> {
    let backbone = match weights {
        WeightsSource::Random => {
            let mut rng = derive_rng(seed, "backbone-init", id as u64);
            Backbone::build(id, &mut ParamSource::Random(&mut rng))?
        }
        WeightsSource::Pretrained { dir } => {
            let path = pretrained_file(id, dir)?;
            let tf = TensorFile::read(&path)?;
            Backbone::build(id, &mut ParamSource::Loaded(&tf))?
        }
    };
    let mut head_rng = derive_rng(seed, "head-init", id as u64);
    let head = Head::build(
        &mut ParamSource::Random(&mut head_rng),
        backbone.out_channels(),
        head_config,
    )?;
    Ok(Model {
        backbone_id: id,
        head_config,
        imagenet_preproc: false,
        backbone,
        head,
    })
}

/// (total, trainable, frozen, reduction factor) for a built model.
pub fn count_parameters(model: &Model) -> ParamCounts {
    ParamCounts::compute(model.backbone.param_count(), model.head.param_count())
}

impl Model {
    /// Pooled backbone features for one image.
    fn gap_features(&self, image: &ImageTensor) -> Array1<f32> {
        let chw = if self.imagenet_preproc {
            hwc_to_chw(&imagenet_normalize(image).data)
        } else {
            hwc_to_chw(&image.data)
        };
        let maps = self.backbone.forward(&chw);
        crate::nn::ops::global_avg_pool(&maps)
    }

    /// Pooled backbone features for a batch, in input order. Images are
    /// independent, so this parallelizes freely without affecting results.
    pub fn gap_batch(&self, images: &[ImageTensor]) -> Array2<f32> {
        let rows: Vec<Array1<f32>> = images.par_iter().map(|img| self.gap_features(img)).collect();
        let mut out = Array2::<f32>::zeros((images.len(), self.backbone.out_channels()));
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&row);
        }
        out
    }

    /// Sigmoid probability of the COVID class per image (inference mode).
    pub fn predict_proba(&self, images: &[ImageTensor]) -> Vec<f64> {
        let features = self.gap_batch(images);
        let cache = self.head.forward_infer(&features);
        cache.logits.iter().map(|&z| sigmoid(z as f64)).collect()
    }

    /// Probabilities from already-extracted penultimate features
    /// (the dense+ReLU activations), bypassing the backbone.
    pub fn predict_proba_from_features(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if features.dim() != self.head_config.dense_width {
            return Err(Error::Shape(format!(
                "expected {} penultimate features, got {}",
                self.head_config.dense_width,
                features.dim()
            )));
        }
        let logits = self.head.logits_from_hidden(&features.data);
        Ok(logits.iter().map(|&z| sigmoid(z as f64)).collect())
    }

    /// Penultimate-layer activations (dense+ReLU, width `dense_width`) in
    /// inference mode: the features that feed the fusion stage.
    pub fn extract_features(&self, images: &[ImageTensor], split: Split) -> FeatureMatrix {
        let gap = self.gap_batch(images);
        let cache = self.head.forward_infer(&gap);
        FeatureMatrix {
            data: cache.hidden,
            stage: crate::features::Stage::Raw,
            provenance: Provenance {
                backbones: vec![self.backbone_id],
                split,
                record_ids: images.iter().map(|i| i.source.clone()).collect(),
            },
        }
    }

    /// Dump every tensor (backbone, head, and batch-norm buffers).
    pub fn dump_weights(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        self.backbone.dump(&mut tf);
        self.head.dump(&mut tf);
        tf
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights the artifact carries.
    pub best_epoch: usize,
    /// 1-based epoch after which early stopping fired, if it did.
    pub stopped_early: Option<usize>,
}

/// A trained model: weights, accounting, and history.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub backbone_id: BackboneId,
    pub head_config: HeadConfig,
    pub train_config: TrainConfig,
    pub imagenet_preproc: bool,
    pub weights: TensorFile,
    pub param_counts: ParamCounts,
    pub history: TrainingHistory,
}

impl ModelArtifact {
    /// Reconstruct a runnable model from the stored weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut source = ParamSource::Loaded(&self.weights);
        let backbone = Backbone::build(self.backbone_id, &mut source)?;
        let head = Head::build(
            &mut ParamSource::Loaded(&self.weights),
            backbone.out_channels(),
            self.head_config,
        )?;
        Ok(Model {
            backbone_id: self.backbone_id,
            head_config: self.head_config,
            imagenet_preproc: self.imagenet_preproc,
            backbone,
            head,
        })
    }
}

/// Fine-tune the head on augmented TRAIN images.
///
/// Every epoch reloads and re-augments the training stream (fresh parameters
/// per image per epoch, derived from `(seed, record id, epoch)`), pushes it
/// through the frozen backbone, and fits the head. Validation features are
/// extracted once. The returned artifact carries the best-validation-loss
/// weights regardless of how training ended.
pub fn train<L>(
    model: &mut Model,
    train_records: &[&ImageRecord],
    val_records: &[&ImageRecord],
    loader: &L,
    augment: &AugmentationConfig,
    config: &TrainConfig,
) -> Result<ModelArtifact>
where
    L: Fn(&ImageRecord) -> Result<ImageTensor> + Sync,
{
    config.validate()?;
    augment.validate()?;
    if train_records.is_empty() {
        return Err(Error::Training("training stream is empty".into()));
    }
    if val_records.is_empty() {
        return Err(Error::Training(
            "validation set is empty; callbacks monitor validation loss".into(),
        ));
    }

    let val_images: Vec<ImageTensor> = val_records
        .par_iter()
        .map(|r| loader(r))
        .collect::<Result<_>>()?;
    let val_features = model.gap_batch(&val_images);
    let val_targets: Vec<f32> = val_records.iter().map(|r| r.label.as_f32()).collect();

    let train_targets: Vec<f32> = train_records.iter().map(|r| r.label.as_f32()).collect();
    let seed = config.seed;

    let mut adam = Adam::new(&model.head.param_sizes());
    let mut controller = TrainingController::new(config.callback_config());
    let mut best_head: Option<Head> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = None;

    for epoch in 1..=config.epochs {
        let lr = controller.current_lr();

        // Fresh augmented pass through the frozen backbone.
        let feature_rows: Vec<Array1<f32>> = train_records
            .par_iter()
            .map(|record| {
                let image = loader(record)?;
                let mut rng = derive_rng_keyed(seed, "augment", &record.record_id, epoch as u64);
                let params = sample_params(augment, &mut rng);
                let augmented = apply_augmentation(&image, &params);
                Ok(model.gap_features(&augmented))
            })
            .collect::<Result<_>>()?;
        let in_dim = model.backbone.out_channels();
        let mut features = Array2::<f32>::zeros((train_records.len(), in_dim));
        for (i, row) in feature_rows.into_iter().enumerate() {
            features.row_mut(i).assign(&row);
        }

        let mut order: Vec<usize> = (0..train_records.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = derive_rng(seed, "batch-order", epoch as u64);
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut x = Array2::<f32>::zeros((chunk.len(), in_dim));
            let mut y = Vec::with_capacity(chunk.len());
            for (bi, &i) in chunk.iter().enumerate() {
                x.row_mut(bi).assign(&features.row(i));
                y.push(train_targets[i]);
            }
            let mut mask_rng = derive_rng(
                seed,
                "dropout",
                (epoch as u64) << 32 | batch_idx as u64,
            );
            let mask = model.head.sample_dropout_mask(chunk.len(), &mut mask_rng);
            let cache = model.head.forward(&x, mask.as_ref(), true);
            let (loss, dlogits) = Head::bce_loss(&cache.logits, &y);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx} (lr {lr:e}); aborting"
                )));
            }
            let grads = model.head.backward(&cache, &dlogits);
            adam.step(lr, &mut model.head.params_flat_mut(), &grads.flat());

            loss_sum += loss * chunk.len() as f64;
            for (&z, &t) in cache.logits.iter().zip(&y) {
                if (z > 0.0) == (t > 0.5) {
                    correct += 1;
                }
            }
        }
        let train_loss = loss_sum / train_records.len() as f64;
        let train_acc = correct as f64 / train_records.len() as f64;

        let val_cache = model.head.forward_infer(&val_features);
        let (val_loss, _) = Head::bce_loss(&val_cache.logits, &val_targets);
        let val_correct = val_cache
            .logits
            .iter()
            .zip(&val_targets)
            .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
            .count();
        let val_acc = val_correct as f64 / val_records.len() as f64;

        epochs.push(EpochStats {
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
        });

        let decision = controller.observe(val_loss);
        if decision.checkpoint {
            best_head = Some(model.head.clone());
        }
        if decision.stop {
            stopped_early = Some(epoch);
            break;
        }
    }

    if let Some(best) = best_head {
        model.head = best;
    }
    let history = TrainingHistory {
        epochs,
        best_epoch: controller.best_epoch().unwrap_or(1),
        stopped_early,
    };
    Ok(ModelArtifact {
        backbone_id: model.backbone_id,
        head_config: model.head_config,
        train_config: *config,
        imagenet_preproc: model.imagenet_preproc,
        weights: model.dump_weights(),
        param_counts: count_parameters(model),
        history,
    })
}

const MODEL_BIN: &str = "model.bin";
const MODEL_META: &str = "meta.toml";
const MODEL_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelMeta {
    version: u32,
    backbone: BackboneId,
    head: HeadConfig,
    train: TrainConfig,
    #[serde(default)]
    imagenet_preproc: bool,
    param_counts: ParamCounts,
    history: TrainingHistory,
}

/// Persist an artifact as `model.bin` + `meta.toml` under `dir`.
pub fn save_artifact(artifact: &ModelArtifact, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    artifact.weights.write(&dir.join(MODEL_BIN))?;
    let meta = ModelMeta {
        version: MODEL_VERSION,
        backbone: artifact.backbone_id,
        head: artifact.head_config,
        train: artifact.train_config,
        imagenet_preproc: artifact.imagenet_preproc,
        param_counts: artifact.param_counts,
        history: artifact.history.clone(),
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Invalid(format!("serializing model meta: {e}")))?;
    let path = dir.join(MODEL_META);
    std::fs::write(&path, text).map_err(Error::io(path))
}

/// Load an artifact saved by [`save_artifact`].
pub fn load_artifact(dir: &Path) -> Result<ModelArtifact> {
    let meta_path = dir.join(MODEL_META);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(meta_path.clone())
        } else {
            Error::io(&meta_path)(e)
        }
    })?;
    let meta: ModelMeta = toml::from_str(&text).map_err(|e| Error::Parse {
        file: meta_path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    if meta.version != MODEL_VERSION {
        return Err(Error::Version {
            expected: MODEL_VERSION.to_string(),
            found: meta.version.to_string(),
        });
    }
    let weights = TensorFile::read(&dir.join(MODEL_BIN))?;
    Ok(ModelArtifact {
        backbone_id: meta.backbone,
        head_config: meta.head,
        train_config: meta.train,
        imagenet_preproc: meta.imagenet_preproc,
        weights,
        param_counts: meta.param_counts,
        history: meta.history,
    })
}

/// ImageNet channel normalization, offered as an explicit deviation from the
/// plain `[0, 1]` scaling used by default.
pub fn imagenet_normalize(image: &ImageTensor) -> ImageTensor {
    const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const STD: [f32; 3] = [0.229, 0.224, 0.225];
    let mut data = image.data.clone();
    for ((_, _, c), v) in data.indexed_iter_mut() {
        *v = (*v - MEAN[c]) / STD[c];
    }
    ImageTensor {
        data,
        source: image.source.clone(),
    }
}
