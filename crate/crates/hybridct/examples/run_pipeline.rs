//! Drive the whole pipeline through the library API on a synthetic corpus:
//! prepare -> train x3 -> extract -> fuse -> fit-svc -> evaluate.
//!
//! Equivalent to `hybridct run-all --config ...`; takes a few minutes on a
//! laptop because it pushes every image through all three backbones.
//!
//! ```sh
//! cargo run --release --example run_pipeline -- /tmp/hybridct-run
//! ```

use hybridct::backbone::TrainConfig;
use hybridct::pipeline::{Pipeline, RunConfig, SplitConfig, WeightsMode};
use hybridct::report::comparison_table;
use hybridct::synth::generate_synthetic_dataset;

fn main() -> hybridct::Result<()> {
    let base = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/hybridct-run".to_string());
    let base = std::path::PathBuf::from(base);
    let data_root = base.join("data");
    generate_synthetic_dataset(&data_root, 30, 7)?;

    let config = RunConfig {
        data_root,
        run_dir: base.join("runs/demo"),
        seed: 11,
        weights: WeightsMode::Random,
        split: SplitConfig {
            train_frac: 0.8,
            val_frac: 0.1,
            patient_regex: None,
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };

    let mut pipeline = Pipeline::open(config)?;
    let reports = pipeline.run_all(false)?;
    print!("{}", comparison_table(&reports));

    // A second invocation skips every stage and reproduces the manifest.
    let hash_before = pipeline.manifest.config_hash.clone();
    let reports_again = pipeline.run_all(false)?;
    assert_eq!(pipeline.manifest.config_hash, hash_before);
    assert_eq!(reports_again.len(), reports.len());
    println!("re-run skipped all stages (idempotent)");
    println!("artifacts under {}", pipeline.config.run_dir.display());
    Ok(())
}
