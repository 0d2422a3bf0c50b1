//! End-to-end orchestration: one config drives prepare -> train (x3) ->
//! extract -> fuse -> fit-svc -> evaluate, with every intermediate artifact
//! persisted under the run directory and a manifest recording stage hashes.
//!
//! Stages are resumable: a stage whose recorded hash matches the current
//! config (and whose artifacts exist) is skipped. Artifacts left by a
//! different configuration are never reused silently; rerunning over them
//! requires `force`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::backbone::{
    build_model, count_parameters, load_artifact, save_artifact, train, Model, TrainConfig,
    WeightsSource,
};
use crate::dataset::{
    load_record, read_manifest, scan_dataset, split_dataset, split_dataset_by_patient,
    write_manifest, DatasetManifest, ImageRecord, ImageTensor, Label, LabelMapping, Split,
};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::features::{read_features, write_features, BackboneId, FeatureMatrix};
use crate::fusion::{save_fusion, FusionArtifact, FusionMode};
use crate::nn::head::HeadConfig;
use crate::report::{comparison_table, read_report, render_report};
use crate::svc::{fit_svc, load_svc, save_svc, SVCConfig};

/// Environment variable overriding the rayon thread count.
pub const THREADS_ENV: &str = "HYBRIDCT_THREADS";

/// Build the global thread pool from `HYBRIDCT_THREADS` if set. Harmless to
/// call more than once.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Split fractions plus the optional patient-level grouping mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    /// When set, capture group 1 of this regex (applied to record ids)
    /// names a patient; whole patients are assigned to one split.
    pub patient_regex: Option<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.85,
            val_frac: 0.10,
            patient_regex: None,
        }
    }
}

/// PCA placement and the explained-variance target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variance_target: f64,
    /// PCA once on the stacked standardized features instead of per backbone.
    pub pca_after_stack: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variance_target: 0.95,
            pca_after_stack: false,
        }
    }
}

impl FusionConfig {
    fn mode(&self) -> FusionMode {
        if self.pca_after_stack {
            FusionMode::AfterStack
        } else {
            FusionMode::PerBackbone
        }
    }
}

/// Backbone weight initialization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Random,
    Pretrained,
}

/// The single config that drives a run. Every field has a default matching
/// the reference training setup, so a config file only needs to override
/// what differs (typically `data_root`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    /// Directory names mapping to the COVID label; everything else is
    /// non-COVID.
    pub covid_dir_names: Vec<String>,
    pub imagenet_preproc: bool,
    pub weights: WeightsMode,
    /// Pretrained weights cache; falls back to `HYBRIDCT_WEIGHTS_DIR`.
    pub weights_dir: Option<PathBuf>,
    pub split: SplitConfig,
    pub augment: AugmentationConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub svc: SVCConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/run"),
            seed: 42,
            covid_dir_names: vec!["COVID".to_string()],
            imagenet_preproc: false,
            weights: WeightsMode::Pretrained,
            weights_dir: None,
            split: SplitConfig::default(),
            augment: AugmentationConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            svc: SVCConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML config file; missing keys take the defaults above.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path)(e)
            }
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if !(0.0 < self.fusion.variance_target && self.fusion.variance_target <= 1.0) {
            return Err(Error::Invalid(format!(
                "variance_target must be in (0, 1], got {}",
                self.fusion.variance_target
            )));
        }
        Ok(())
    }

    /// Hash of the full semantic config (everything except `run_dir`),
    /// stable under key reordering in the source file.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("run_dir");
        }
        sha_hex(value.to_string().as_bytes())
    }

    /// Training config with the run seed applied.
    fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    fn weights_source(&self) -> WeightsSource {
        match self.weights {
            WeightsMode::Random => WeightsSource::Random,
            WeightsMode::Pretrained => WeightsSource::Pretrained {
                dir: self.weights_dir.clone(),
            },
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn canonical_hash(value: &serde_json::Value) -> String {
    sha_hex(value.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub completed_at: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub os: String,
    pub arch: String,
    pub crate_version: String,
    pub threads: usize,
}

impl EnvFingerprint {
    fn current() -> EnvFingerprint {
        EnvFingerprint {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// Reproducibility record persisted as `manifest.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub environment: EnvFingerprint,
    pub stages: BTreeMap<String, StageRecord>,
    pub metrics_summary: BTreeMap<String, f64>,
}

const MANIFEST_FILE: &str = "manifest.json";

/// Stage names in dependency order.
pub const STAGE_ORDER: [&str; 8] = [
    "prepare",
    "train.vgg16",
    "train.densenet121",
    "train.mobilenetv2",
    "extract",
    "fuse",
    "fit-svc",
    "evaluate",
];

/// A run directory with its config and manifest.
pub struct Pipeline {
    pub config: RunConfig,
    pub manifest: RunManifest,
}

impl Pipeline {
    /// Open (or create) the run directory for this config.
    pub fn open(config: RunConfig) -> Result<Pipeline> {
        config.validate()?;
        std::fs::create_dir_all(&config.run_dir).map_err(Error::io(&config.run_dir))?;
        let manifest_path = config.run_dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.is_file() {
            let text = std::fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
            let mut manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
                file: manifest_path.display().to_string(),
                line: 0,
                msg: e.to_string(),
            })?;
            manifest.config_hash = config.config_hash();
            manifest.environment = EnvFingerprint::current();
            manifest
        } else {
            RunManifest {
                config_hash: config.config_hash(),
                seed: config.seed,
                environment: EnvFingerprint::current(),
                stages: BTreeMap::new(),
                metrics_summary: BTreeMap::new(),
            }
        };
        Ok(Pipeline { config, manifest })
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.config.run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Invalid(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, text).map_err(Error::io(path))
    }

    fn run_path(&self, rel: &str) -> PathBuf {
        self.config.run_dir.join(rel)
    }

    /// Skip / run / refuse decision for one stage.
    fn stage_is_current(&self, name: &str, hash: &str, artifacts: &[String], force: bool) -> Result<bool> {
        let all_exist = artifacts.iter().all(|a| self.run_path(a).exists());
        let recorded = self.manifest.stages.get(name);
        match recorded {
            Some(record) if record.hash == hash && all_exist => Ok(true),
            _ => {
                if all_exist && !force {
                    return Err(Error::Config(format!(
                        "stage '{name}': artifacts in {} were produced by a different \
                         configuration; pass --force to overwrite them",
                        self.config.run_dir.display()
                    ))
                    .in_stage(stage_static(name)));
                }
                Ok(false)
            }
        }
    }

    fn record_stage(&mut self, name: &str, hash: String, artifacts: Vec<String>) -> Result<()> {
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                hash,
                completed_at: chrono::Utc::now().to_rfc3339(),
                artifacts,
            },
        );
        self.save_manifest()
    }

    // Per-stage config hashes, each folding in its upstream hash.

    fn prepare_hash(&self) -> String {
        canonical_hash(&serde_json::json!({
            "data_root": self.config.data_root,
            "covid_dir_names": self.config.covid_dir_names,
            "seed": self.config.seed,
            "split": self.config.split,
        }))
    }

    fn train_hash(&self, id: BackboneId) -> String {
        canonical_hash(&serde_json::json!({
            "upstream": self.prepare_hash(),
            "backbone": id,
            "augment": self.config.augment,
            "head": self.config.head,
            "train": self.config.effective_train(),
            "weights": self.config.weights,
            "weights_dir": self.config.weights_dir,
            "imagenet_preproc": self.config.imagenet_preproc,
        }))
    }

    fn extract_hash(&self) -> String {
        let upstream: Vec<String> = BackboneId::ALL.iter().map(|&id| self.train_hash(id)).collect();
        canonical_hash(&serde_json::json!({ "upstream": upstream }))
    }

    fn fuse_hash(&self) -> String {
        canonical_hash(&serde_json::json!({
            "upstream": self.extract_hash(),
            "fusion": self.config.fusion,
        }))
    }

    fn svc_hash(&self) -> String {
        canonical_hash(&serde_json::json!({
            "upstream": self.fuse_hash(),
            "svc": self.config.svc,
        }))
    }

    fn evaluate_hash(&self) -> String {
        canonical_hash(&serde_json::json!({ "upstream": self.svc_hash() }))
    }

    /// Scan and split the dataset, writing `data/manifest.txt`.
    pub fn stage_prepare(&mut self, force: bool) -> Result<DatasetManifest> {
        let name = "prepare";
        let hash = self.prepare_hash();
        let artifacts = vec!["data/manifest.txt".to_string()];
        let manifest_path = self.run_path(&artifacts[0]);
        if self.stage_is_current(name, &hash, &artifacts, force)? {
            return read_manifest(&manifest_path).map_err(|e| e.in_stage(name));
        }

        let inner = (|| -> Result<DatasetManifest> {
            let mapping = LabelMapping {
                covid_names: self.config.covid_dir_names.clone(),
            };
            let outcome = scan_dataset(&self.config.data_root, &mapping)?;
            if !outcome.skipped.is_empty() {
                log::warn!("prepare: skipped {} undecodable file(s)", outcome.skipped.len());
            }
            let split = match &self.config.split.patient_regex {
                Some(re) => split_dataset_by_patient(
                    &outcome.manifest,
                    self.config.split.train_frac,
                    self.config.split.val_frac,
                    self.config.seed,
                    re,
                )?,
                None => split_dataset(
                    &outcome.manifest,
                    self.config.split.train_frac,
                    self.config.split.val_frac,
                    self.config.seed,
                )?,
            };
            let dir = self.run_path("data");
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            write_manifest(&split, &manifest_path)?;
            Ok(split)
        })();
        let dataset = inner.map_err(|e| e.in_stage(name))?;
        self.record_stage(name, hash, artifacts)?;
        Ok(dataset)
    }

    /// Fine-tune one backbone and persist its artifact.
    pub fn stage_train(&mut self, id: BackboneId, force: bool) -> Result<()> {
        let dataset = self.stage_prepare(false)?;
        let name = format!("train.{id}");
        let static_name = stage_static(&name);
        let hash = self.train_hash(id);
        let artifacts = vec![
            format!("models/{id}/model.bin"),
            format!("models/{id}/meta.toml"),
        ];
        if self.stage_is_current(&name, &hash, &artifacts, force)? {
            return Ok(());
        }

        let inner = (|| -> Result<()> {
            let train_records: Vec<&ImageRecord> = dataset.records_in(Split::Train);
            let val_records: Vec<&ImageRecord> = dataset.records_in(Split::Val);
            let mut model = build_model(id, self.config.head, &self.config.weights_source(), self.config.seed)?;
            model.imagenet_preproc = self.config.imagenet_preproc;
            log::info!(
                "training {id}: {} parameters ({} trainable)",
                count_parameters(&model).total,
                count_parameters(&model).trainable
            );
            let loader = |r: &ImageRecord| load_record(&dataset, r);
            let artifact = train(
                &mut model,
                &train_records,
                &val_records,
                &loader,
                &self.config.augment,
                &self.config.effective_train(),
            )?;
            save_artifact(&artifact, &self.run_path(&format!("models/{id}")))
        })();
        inner.map_err(|e| e.in_stage(static_name))?;
        self.record_stage(&name, hash, artifacts)?;
        Ok(())
    }

    fn feature_file(&self, id: BackboneId, split: Split) -> String {
        let split = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        format!("features/{id}_{split}.hctf")
    }

    /// Extract penultimate features for TRAIN and TEST from all backbones.
    pub fn stage_extract(&mut self, force: bool) -> Result<()> {
        for id in BackboneId::ALL {
            self.stage_train(id, false)?;
        }
        let dataset = self.stage_prepare(false)?;
        let name = "extract";
        let hash = self.extract_hash();
        let mut artifacts = Vec::new();
        for id in BackboneId::ALL {
            artifacts.push(self.feature_file(id, Split::Train));
            artifacts.push(self.feature_file(id, Split::Test));
        }
        if self.stage_is_current(name, &hash, &artifacts, force)? {
            return Ok(());
        }

        let inner = (|| -> Result<()> {
            let dir = self.run_path("features");
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            for id in BackboneId::ALL {
                let artifact = load_artifact(&self.run_path(&format!("models/{id}")))?;
                let model = artifact.to_model()?;
                for split in [Split::Train, Split::Test] {
                    let records = dataset.records_in(split);
                    let features = extract_in_chunks(&model, &dataset, &records, split)?;
                    write_features(&features, &self.run_path(&self.feature_file(id, split)), &hash)?;
                }
                log::info!("extracted features for {id}");
            }
            Ok(())
        })();
        inner.map_err(|e| e.in_stage(name))?;
        self.record_stage(name, hash, artifacts)?;
        Ok(())
    }

    fn read_feature_map(&self, split: Split) -> Result<BTreeMap<BackboneId, FeatureMatrix>> {
        let mut map = BTreeMap::new();
        for id in BackboneId::ALL {
            let (features, _) = read_features(&self.run_path(&self.feature_file(id, split)))?;
            map.insert(id, features);
        }
        Ok(map)
    }

    /// Fit scaler+PCA on TRAIN features and write the stacked matrices.
    pub fn stage_fuse(&mut self, force: bool) -> Result<()> {
        self.stage_extract(false)?;
        let name = "fuse";
        let hash = self.fuse_hash();
        let artifacts = vec![
            "fusion/fusion.bin".to_string(),
            "fusion/fusion.toml".to_string(),
            "features/stacked_train.hctf".to_string(),
            "features/stacked_test.hctf".to_string(),
        ];
        if self.stage_is_current(name, &hash, &artifacts, force)? {
            return Ok(());
        }

        let inner = (|| -> Result<()> {
            let train_map = self.read_feature_map(Split::Train)?;
            let fusion = FusionArtifact::fit(
                &train_map,
                self.config.fusion.variance_target,
                self.config.fusion.mode(),
                hash.clone(),
            )?;
            save_fusion(&fusion, &self.run_path("fusion"))?;

            let stacked_train = fusion.transform(&train_map)?;
            write_features(&stacked_train, &self.run_path("features/stacked_train.hctf"), &hash)?;
            let test_map = self.read_feature_map(Split::Test)?;
            let stacked_test = fusion.transform(&test_map)?;
            write_features(&stacked_test, &self.run_path("features/stacked_test.hctf"), &hash)?;
            log::info!("fused features: stacked width {}", fusion.stacked_dim());
            Ok(())
        })();
        inner.map_err(|e| e.in_stage(name))?;
        self.record_stage(name, hash, artifacts)?;
        Ok(())
    }

    fn label_map(dataset: &DatasetManifest) -> BTreeMap<&str, Label> {
        dataset
            .records
            .iter()
            .map(|r| (r.record_id.as_str(), r.label))
            .collect()
    }

    fn labels_for(dataset: &DatasetManifest, features: &FeatureMatrix) -> Result<Vec<Label>> {
        let map = Self::label_map(dataset);
        features
            .provenance
            .record_ids
            .iter()
            .map(|id| {
                map.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Alignment(format!("record '{id}' in feature file but not in manifest"))
                })
            })
            .collect()
    }

    /// Train the SVC on the stacked TRAIN features.
    pub fn stage_fit_svc(&mut self, force: bool) -> Result<()> {
        self.stage_fuse(false)?;
        let dataset = self.stage_prepare(false)?;
        let name = "fit-svc";
        let hash = self.svc_hash();
        let artifacts = vec!["svc/svc.bin".to_string(), "svc/svc.toml".to_string()];
        if self.stage_is_current(name, &hash, &artifacts, force)? {
            return Ok(());
        }

        let inner = (|| -> Result<()> {
            let (stacked, _) = read_features(&self.run_path("features/stacked_train.hctf"))?;
            let labels = Self::labels_for(&dataset, &stacked)?;
            let model = fit_svc(&stacked, &labels, &self.config.svc)?;
            log::info!("svc fitted: {} support vectors", model.n_support());
            save_svc(&model, &self.run_path("svc"), &hash)
        })();
        inner.map_err(|e| e.in_stage(name))?;
        self.record_stage(name, hash, artifacts)?;
        Ok(())
    }

    /// Evaluate the three fine-tuned backbones (own sigmoid head at 0.5) and
    /// the hybrid SVC on the TEST split; render all reports.
    pub fn stage_evaluate(&mut self, force: bool) -> Result<Vec<EvalReport>> {
        self.stage_fit_svc(false)?;
        let dataset = self.stage_prepare(false)?;
        let name = "evaluate";
        let hash = self.evaluate_hash();
        let mut artifacts: Vec<String> = BackboneId::ALL
            .iter()
            .map(|id| format!("report/{id}/report.json"))
            .collect();
        artifacts.push("report/hybrid/report.json".to_string());
        artifacts.push("report/comparison.txt".to_string());
        if self.stage_is_current(name, &hash, &artifacts, force)? {
            let mut reports = Vec::new();
            for artifact in &artifacts[..4] {
                reports.push(read_report(&self.run_path(artifact)).map_err(|e| e.in_stage(name))?);
            }
            return Ok(reports);
        }

        let inner = (|| -> Result<Vec<EvalReport>> {
            let mut reports = Vec::new();
            for id in BackboneId::ALL {
                let artifact = load_artifact(&self.run_path(&format!("models/{id}")))?;
                let model = artifact.to_model()?;
                let (features, _) = read_features(&self.run_path(&self.feature_file(id, Split::Test)))?;
                let y_true = Self::labels_for(&dataset, &features)?;
                let probs = model.predict_proba_from_features(&features)?;
                let y_pred: Vec<Label> = probs
                    .iter()
                    .map(|&p| if p > 0.5 { Label::Covid } else { Label::NonCovid })
                    .collect();
                let report = EvalReport::from_predictions(id.to_string(), &y_true, &y_pred, &probs, &hash)?;
                render_report(&report, &self.run_path(&format!("report/{id}")))?;
                reports.push(report);
            }

            let (stacked, _) = read_features(&self.run_path("features/stacked_test.hctf"))?;
            let y_true = Self::labels_for(&dataset, &stacked)?;
            let (svc_model, _) = load_svc(&self.run_path("svc"))?;
            let scores = svc_model.decision_score(&stacked)?;
            let y_pred = svc_model.predict(&stacked)?;
            let report = EvalReport::from_predictions("hybrid", &y_true, &y_pred, &scores, &hash)?;
            render_report(&report, &self.run_path("report/hybrid"))?;
            reports.push(report);

            let table = comparison_table(&reports);
            let path = self.run_path("report/comparison.txt");
            std::fs::write(&path, &table).map_err(Error::io(path))?;
            log::info!("evaluation complete:\n{table}");
            Ok(reports)
        })();
        let reports = inner.map_err(|e| e.in_stage(name))?;

        for report in &reports {
            self.manifest
                .metrics_summary
                .insert(format!("{}_accuracy", report.model), report.accuracy);
            self.manifest
                .metrics_summary
                .insert(format!("{}_auc", report.model), report.auc);
        }
        self.record_stage(name, hash, artifacts)?;
        Ok(reports)
    }

    /// All stages in dependency order. `force` only overrides the refusal to
    /// overwrite stale artifacts; up-to-date stages are still skipped.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<EvalReport>> {
        self.stage_prepare(force)?;
        for id in BackboneId::ALL {
            self.stage_train(id, force)?;
        }
        self.stage_extract(force)?;
        self.stage_fuse(force)?;
        self.stage_fit_svc(force)?;
        self.stage_evaluate(force)
    }
}

/// Extract penultimate features without holding the whole split in memory.
fn extract_in_chunks(
    model: &Model,
    dataset: &DatasetManifest,
    records: &[&ImageRecord],
    split: Split,
) -> Result<FeatureMatrix> {
    use rayon::prelude::*;
    const CHUNK: usize = 48;
    let mut parts: Vec<FeatureMatrix> = Vec::new();
    for chunk in records.chunks(CHUNK) {
        let images: Vec<ImageTensor> = chunk
            .par_iter()
            .map(|r| load_record(dataset, r))
            .collect::<Result<_>>()?;
        parts.push(model.extract_features(&images, split));
    }
    let total: usize = parts.iter().map(|p| p.rows()).sum();
    let dim = parts.first().map_or(0, |p| p.dim());
    let mut data = ndarray::Array2::<f32>::zeros((total, dim));
    let mut record_ids = Vec::with_capacity(total);
    let mut row = 0;
    for part in parts {
        let rows = part.rows();
        data.slice_mut(ndarray::s![row..row + rows, ..]).assign(&part.data);
        record_ids.extend(part.provenance.record_ids);
        row += rows;
    }
    Ok(FeatureMatrix {
        data,
        stage: crate::features::Stage::Raw,
        provenance: crate::features::Provenance {
            backbones: vec![model.backbone_id],
            split,
            record_ids,
        },
    })
}

/// Static name for error context (stage names are a fixed set).
fn stage_static(name: &str) -> &'static str {
    match name {
        "prepare" => "prepare",
        "train.vgg16" => "train.vgg16",
        "train.densenet121" => "train.densenet121",
        "train.mobilenetv2" => "train.mobilenetv2",
        "extract" => "extract",
        "fuse" => "fuse",
        "fit-svc" => "fit-svc",
        "evaluate" => "evaluate",
        _ => "pipeline",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_ignores_run_dir_but_not_semantics() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());

        let mut c = a.clone();
        c.fusion.variance_target = 0.99;
        assert_ne!(a.config_hash(), c.config_hash());
        let mut d = a.clone();
        d.seed = 43;
        assert_ne!(a.config_hash(), d.config_hash());
    }

    #[test]
    fn config_toml_roundtrip_and_defaults() {
        let text = r#"
            data_root = "/data/ct"
            seed = 7
            weights = "random"

            [svc]
            kernel = "linear"
            c = 2.5

            [fusion]
            variance_target = 0.9
        "#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.data_root, PathBuf::from("/data/ct"));
        assert_eq!(config.seed, 7);
        assert_eq!(config.weights, WeightsMode::Random);
        assert_eq!(config.svc.c, 2.5);
        assert_eq!(config.fusion.variance_target, 0.9);
        // Untouched sections keep the reference defaults.
        assert_eq!(config.train.learning_rate, 1e-4);
        assert_eq!(config.train.epochs, 20);
        assert_eq!(config.train.batch_size, 8);
        assert_eq!(config.augment.rotation_range, 10.0);
        assert_eq!(config.head.dense_width, 128);
        assert_eq!(config.split.train_frac, 0.85);

        let back: RunConfig = toml::from_str(&toml::to_string(&config).unwrap()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn gamma_auto_roundtrips_through_toml() {
        let config: RunConfig = toml::from_str("[svc]\ngamma = \"auto\"").unwrap();
        assert_eq!(config.svc.gamma, crate::svc::Gamma::default());
        let config: RunConfig = toml::from_str("[svc]\ngamma = 0.125").unwrap();
        assert_eq!(config.svc.gamma, crate::svc::Gamma::Value(0.125));
    }

    #[test]
    fn stage_hashes_chain_upstream_changes() {
        let a = RunConfig::default();
        let mut pipeline_a = Pipeline {
            manifest: RunManifest {
                config_hash: a.config_hash(),
                seed: a.seed,
                environment: EnvFingerprint::current(),
                stages: BTreeMap::new(),
                metrics_summary: BTreeMap::new(),
            },
            config: a,
        };
        let prepare_a = pipeline_a.prepare_hash();
        let fuse_a = pipeline_a.fuse_hash();
        let svc_a = pipeline_a.svc_hash();

        // Changing the variance target invalidates fuse and svc but not prepare.
        pipeline_a.config.fusion.variance_target = 0.80;
        assert_eq!(pipeline_a.prepare_hash(), prepare_a);
        assert_eq!(pipeline_a.extract_hash(), pipeline_a.extract_hash());
        assert_ne!(pipeline_a.fuse_hash(), fuse_a);
        assert_ne!(pipeline_a.svc_hash(), svc_a);

        // Changing the seed invalidates everything from prepare down.
        pipeline_a.config.fusion.variance_target = 0.95;
        pipeline_a.config.seed = 1234;
        assert_ne!(pipeline_a.prepare_hash(), prepare_a);
        assert_ne!(pipeline_a.svc_hash(), svc_a);
    }
}
