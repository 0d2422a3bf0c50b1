//! Property tests for the cross-module invariants: value ranges, partition
//! laws, metric identities, transform guarantees, and file round-trips.

use std::path::PathBuf;

use hybridct::augment::{apply_augmentation, sample_params, AugmentationConfig, FillMode};
use hybridct::backbone::sigmoid;
use hybridct::dataset::{
    load_image, read_manifest, split_dataset, write_manifest, DatasetManifest, ImageRecord,
    ImageTensor, Label, Split,
};
use hybridct::eval::{accuracy, class_metrics, weighted_average, ConfusionMatrix};
use hybridct::features::{
    read_features, write_features, BackboneId, FeatureMatrix, Provenance, Stage,
};
use hybridct::fusion::{apply_scaler, fit_pca, fit_scaler, select_k, stack_features, transform_pca};
use hybridct::rng::derive_rng;
use hybridct::svc::{fit_svc, Kernel, SVCConfig};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn feature_matrix(data: Array2<f32>, stage: Stage) -> FeatureMatrix {
    let ids = (0..data.nrows()).map(|i| format!("r{i}")).collect();
    FeatureMatrix {
        data,
        stage,
        provenance: Provenance {
            backbones: vec![BackboneId::Vgg16],
            split: Split::Train,
            record_ids: ids,
        },
    }
}

fn small_matrix() -> impl Strategy<Value = Array2<f32>> {
    (2usize..24, 1usize..9).prop_flat_map(|(n, d)| {
        proptest::collection::vec(-50.0f32..50.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigmoid_is_monotone_and_symmetric(a in -500.0f64..500.0, b in -500.0f64..500.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(sigmoid(lo) <= sigmoid(hi));
        prop_assert!((sigmoid(a) + sigmoid(-a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_equals_accuracy(tp in 0usize..500, fp in 0usize..500,
                                       fn_ in 0usize..500, tn in 0usize..500) {
        // The binary identity: support-weighted recall is exactly accuracy.
        prop_assume!(tp + fn_ > 0 && fp + tn > 0);
        let cm = ConfusionMatrix::new(tp, fp, fn_, tn);
        let (covid, noncovid) = class_metrics(&cm);
        let weighted = weighted_average(
            &[covid.recall.value, noncovid.recall.value],
            &[covid.support, noncovid.support],
        ).unwrap();
        prop_assert!((weighted - accuracy(&cm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scaler_standardizes_and_guards_constant_columns(data in small_matrix()) {
        let x = feature_matrix(data, Stage::Raw);
        let params = fit_scaler(&x).unwrap();
        let out = apply_scaler(&x, &params).unwrap();
        let refit = fit_scaler(&out).unwrap();
        for j in 0..out.dim() {
            if params.std[j] == 0.0 {
                prop_assert!(out.data.column(j).iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(refit.mean[j].abs() < 1e-4);
                prop_assert!((refit.std[j] - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn pca_invariants_hold(data in small_matrix(), target in 0.5f64..1.0) {
        let x = feature_matrix(data, Stage::Standardized);
        let params = match fit_pca(&x, target) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        // Orthonormal axes.
        let gram = params.components.dot(&params.components.t());
        for i in 0..params.k() {
            for j in 0..params.k() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - want).abs() < 1e-6);
            }
        }
        // Kept variance reaches the target unless everything is kept.
        let kept: f64 = params.explained_variance_ratio.iter().sum();
        prop_assert!(kept >= target - 1e-9 || params.k() == params.input_dim());
        // Ratios are non-increasing.
        prop_assert!(params.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        // The centering vector projects to the origin.
        let center = Array2::from_shape_vec(
            (1, params.center.len()),
            params.center.iter().map(|&v| v as f32).collect(),
        ).unwrap();
        let projected = transform_pca(&feature_matrix(center, Stage::Standardized), &params).unwrap();
        prop_assert!(projected.data.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn select_k_is_minimal(ratios_raw in proptest::collection::vec(0.0f64..1.0, 1..12),
                           target in 0.05f64..1.0) {
        let total: f64 = ratios_raw.iter().sum();
        prop_assume!(total > 1e-9);
        let mut ratios: Vec<f64> = ratios_raw.iter().map(|r| r / total).collect();
        ratios.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = select_k(&ratios, target).unwrap();
        let cumulative: Vec<f64> = ratios.iter().scan(0.0, |acc, r| { *acc += r; Some(*acc) }).collect();
        prop_assert!(cumulative[k - 1] >= target - 1e-9 || k == ratios.len());
        if k > 1 {
            prop_assert!(cumulative[k - 2] < target - 1e-9);
        }
    }

    #[test]
    fn stacking_rejects_any_row_permutation(rows in 3usize..12, swap in 0usize..64) {
        let a = feature_matrix(Array2::zeros((rows, 2)), Stage::Reduced);
        let mut b = FeatureMatrix {
            provenance: Provenance {
                backbones: vec![BackboneId::DenseNet121],
                ..a.provenance.clone()
            },
            ..feature_matrix(Array2::ones((rows, 3)), Stage::Reduced)
        };
        let i = swap % rows;
        let j = (swap / rows + 1 + i) % rows;
        prop_assume!(i != j);
        b.provenance.record_ids.swap(i, j);
        prop_assert!(stack_features(&[a, b]).is_err());
    }

    #[test]
    fn feature_files_roundtrip_bit_exact(data in small_matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hctf");
        let m = feature_matrix(data, Stage::Raw);
        write_features(&m, &path, "hash").unwrap();
        let (back, _) = read_features(&path).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn svc_respects_kkt_and_sign_rule(
        n_per_class in 2usize..10,
        gap in 0.5f64..4.0,
        c in 0.05f64..20.0,
    ) {
        // Two shifted point clouds; not necessarily separable at small gaps.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = derive_rng(99, "svc-prop", (n_per_class as u64) << 16 | (gap * 100.0) as u64);
        use rand::Rng as _;
        for i in 0..2 * n_per_class {
            let class1 = i % 2 == 0;
            let offset = if class1 { gap } else { -gap };
            rows.push([
                offset + rng.gen_range(-1.0..1.0),
                offset + rng.gen_range(-1.0..1.0),
            ]);
            labels.push(if class1 { Label::Covid } else { Label::NonCovid });
        }
        let data = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j] as f32);
        let x = feature_matrix(data, Stage::Stacked);
        let config = SVCConfig { kernel: Kernel::Rbf, c, ..SVCConfig::default() };
        let model = fit_svc(&x, &labels, &config).unwrap();

        for &coef in &model.dual_coef {
            prop_assert!(coef.abs() <= c + 1e-6);
        }
        let scores = model.decision_score(&x).unwrap();
        let predictions = model.predict(&x).unwrap();
        for (score, label) in scores.iter().zip(&predictions) {
            let by_sign = if *score > 0.0 { Label::Covid } else { Label::NonCovid };
            prop_assert_eq!(by_sign, *label);
        }
    }
}

proptest! {
    // Image-backed cases are I/O heavy; keep the counts small.
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn load_image_stays_in_unit_range(w in 1u32..64, h in 1u32..64, seed in 0u64..1000) {
        let mut rng = derive_rng(seed, "pixels", 0);
        use rand::Rng as _;
        let img = image::RgbImage::from_fn(w, h, |_, _| {
            image::Rgb([rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()])
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        img.save(&path).unwrap();

        let tensor = load_image(&path, "prop").unwrap();
        prop_assert_eq!(tensor.data.dim(), (224, 224, 3));
        prop_assert!(tensor.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn augmentation_preserves_shape_and_range(seed in 0u64..10_000) {
        let mut rng = derive_rng(seed, "aug-image", 0);
        use rand::Rng as _;
        let data = Array3::from_shape_fn((224, 224, 3), |_| rng.gen::<f32>());
        let image = ImageTensor { data, source: "prop".into() };
        let config = AugmentationConfig {
            fill_mode: match seed % 3 {
                0 => FillMode::Reflect,
                1 => FillMode::Nearest,
                _ => FillMode::Constant,
            },
            ..AugmentationConfig::default()
        };
        let mut param_rng = derive_rng(seed, "aug-params", 1);
        let params = sample_params(&config, &mut param_rng);
        prop_assert!(params.rotation_deg.abs() <= 10.0);

        let out = apply_augmentation(&image, &params);
        prop_assert_eq!(out.data.dim(), (224, 224, 3));
        prop_assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Zero-range config: exact identity.
        let identity = sample_params(&AugmentationConfig::identity(), &mut param_rng);
        let same = apply_augmentation(&image, &identity);
        prop_assert_eq!(same.data, image.data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_and_stratifies(
        n_covid in 4usize..300,
        n_non in 4usize..300,
        train_frac in 0.5f64..0.9,
        val_frac in 0.0f64..0.25,
        seed in 0u64..500,
    ) {
        let mut records = Vec::new();
        for i in 0..n_covid {
            records.push(ImageRecord {
                record_id: format!("COVID/{i:04}.png"),
                label: Label::Covid,
                split: None,
            });
        }
        for i in 0..n_non {
            records.push(ImageRecord {
                record_id: format!("non-COVID/{i:04}.png"),
                label: Label::NonCovid,
                split: None,
            });
        }
        records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let manifest = DatasetManifest {
            root: PathBuf::from("/data"),
            records,
            split: None,
        };
        let split = match split_dataset(&manifest, train_frac, val_frac, seed) {
            Ok(s) => s,
            Err(_) => return Ok(()), // class too small for the fractions
        };

        // Exhaustive and disjoint: every record has exactly one split.
        prop_assert!(split.records.iter().all(|r| r.split.is_some()));
        let counts = split.counts();
        let total: usize = counts.values().sum();
        prop_assert_eq!(total, n_covid + n_non);

        // Stratification: per-class proportion in each split within one
        // image of the global class proportion.
        let n = (n_covid + n_non) as f64;
        for split_kind in Split::ALL {
            let split_total: usize = Label::ALL
                .iter()
                .filter_map(|&l| counts.get(&(l, split_kind)))
                .sum();
            if split_total == 0 {
                continue;
            }
            for (label, class_n) in [(Label::Covid, n_covid), (Label::NonCovid, n_non)] {
                let in_split = *counts.get(&(label, split_kind)).unwrap_or(&0) as f64;
                let ideal = split_total as f64 * class_n as f64 / n;
                prop_assert!(
                    (in_split - ideal).abs() <= 1.0 + 1e-9,
                    "{label} in {split_kind}: {in_split} vs ideal {ideal:.2}"
                );
            }
        }

        // Deterministic: the same seed reproduces the same assignment, and
        // the manifest file serializes identically.
        let again = split_dataset(&manifest, train_frac, val_frac, seed).unwrap();
        prop_assert_eq!(&again, &split);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        write_manifest(&split, &pa).unwrap();
        write_manifest(&again, &pb).unwrap();
        prop_assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        prop_assert_eq!(read_manifest(&pa).unwrap(), split);
    }
}
