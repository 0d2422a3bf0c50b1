//! Fine-tune one frozen backbone's head on a small synthetic corpus and
//! inspect the parameter accounting and training history.
//!
//! ```sh
//! cargo run --release --example train_backbone -- mobilenetv2
//! ```

use hybridct::augment::AugmentationConfig;
use hybridct::backbone::{build_model, count_parameters, train, TrainConfig, WeightsSource};
use hybridct::dataset::{load_record, scan_dataset, split_dataset, LabelMapping, Split};
use hybridct::features::BackboneId;
use hybridct::nn::head::HeadConfig;
use hybridct::synth::generate_synthetic_dataset;

fn main() -> hybridct::Result<()> {
    let backbone: BackboneId = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "mobilenetv2".to_string())
        .parse()
        .map_err(hybridct::Error::Invalid)?;

    let root = std::env::temp_dir().join("hybridct-train-demo");
    generate_synthetic_dataset(&root, 12, 5)?;
    let dataset = scan_dataset(&root, &LabelMapping::default())?.manifest;
    let dataset = split_dataset(&dataset, 0.8, 0.15, 5)?;

    let mut model = build_model(backbone, HeadConfig::default(), &WeightsSource::Random, 5)?;
    let counts = count_parameters(&model);
    println!(
        "{backbone}: {} total parameters, {} trainable (head only), {} frozen, \
         reduction factor {:.1}x",
        counts.total, counts.trainable, counts.frozen, counts.reduction_factor
    );

    let train_records = dataset.records_in(Split::Train);
    let val_records = dataset.records_in(Split::Val);
    let loader = |r: &hybridct::dataset::ImageRecord| load_record(&dataset, r);
    let config = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let artifact = train(
        &mut model,
        &train_records,
        &val_records,
        &loader,
        &AugmentationConfig::default(),
        &config,
    )?;

    for (i, epoch) in artifact.history.epochs.iter().enumerate() {
        println!(
            "epoch {}: train loss {:.4} acc {:.2} | val loss {:.4} acc {:.2} | lr {:e}",
            i + 1,
            epoch.train_loss,
            epoch.train_acc,
            epoch.val_loss,
            epoch.val_acc,
            epoch.lr
        );
    }
    println!("best epoch: {}", artifact.history.best_epoch);
    Ok(())
}
