//! Standardize, reduce, and stack feature matrices, then round-trip the
//! fitted fusion artifact and a feature file.
//!
//! Runs on synthetic feature matrices so it finishes instantly; the full
//! pipeline feeds real penultimate-layer activations through the same code.

use std::collections::BTreeMap;

use hybridct::dataset::Split;
use hybridct::features::{
    read_features, write_features, BackboneId, FeatureMatrix, Provenance, Stage,
};
use hybridct::fusion::{load_fusion, save_fusion, select_k, FusionArtifact, FusionMode};

fn synthetic_features(id: BackboneId, n: usize, d: usize) -> FeatureMatrix {
    // Low-rank structure plus noise so PCA has something to find.
    let data = ndarray::Array2::from_shape_fn((n, d), |(i, j)| {
        let signal = ((i as f32 * 0.3).sin() + 1.0) * ((j % 5) as f32 + 1.0) * 0.2;
        let noise = (((i * 31 + j * 17) % 13) as f32 - 6.0) * 0.01;
        signal + noise
    });
    FeatureMatrix {
        data,
        stage: Stage::Raw,
        provenance: Provenance {
            backbones: vec![id],
            split: Split::Train,
            record_ids: (0..n).map(|i| format!("img{i:03}")).collect(),
        },
    }
}

fn main() -> hybridct::Result<()> {
    let mut train = BTreeMap::new();
    for (i, id) in BackboneId::ALL.into_iter().enumerate() {
        train.insert(id, synthetic_features(id, 40, 32 + 8 * i));
    }

    let fusion = FusionArtifact::fit(&train, 0.95, FusionMode::PerBackbone, "demo")?;
    for id in BackboneId::ALL {
        let pca = &fusion.pcas[&id];
        let variance: f64 = pca.explained_variance_ratio.iter().sum();
        println!(
            "{id}: kept {} of {} axes ({:.1}% variance)",
            pca.k(),
            pca.input_dim(),
            variance * 100.0
        );
    }
    let stacked = fusion.transform(&train)?;
    println!("stacked width: {} (= sum of per-backbone k)", stacked.dim());

    // select_k on a hand ratio vector.
    let k = select_k(&[0.6, 0.3, 0.08, 0.02], 0.95)?;
    println!("select_k([0.6, 0.3, 0.08, 0.02], 0.95) = {k}");

    // Artifact and feature-file round-trips are bit-exact.
    let dir = std::env::temp_dir().join("hybridct-fusion-demo");
    std::fs::create_dir_all(&dir).unwrap();
    save_fusion(&fusion, &dir)?;
    let reloaded = load_fusion(&dir)?;
    assert_eq!(reloaded.transform(&train)?.data, stacked.data);

    let feature_path = dir.join("stacked_train.hctf");
    write_features(&stacked, &feature_path, "demo")?;
    let (back, _) = read_features(&feature_path)?;
    assert_eq!(back, stacked);
    println!("fusion artifact and feature file round-tripped under {}", dir.display());
    Ok(())
}
