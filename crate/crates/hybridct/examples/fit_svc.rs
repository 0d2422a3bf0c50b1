//! Fit the support-vector classifier on two classic toy problems and read
//! off the margin geometry.

use hybridct::dataset::{Label, Split};
use hybridct::features::{BackboneId, FeatureMatrix, Provenance, Stage};
use hybridct::svc::{fit_svc, Gamma, Kernel, SVCConfig};
use ndarray::array;

fn stacked(data: ndarray::Array2<f32>) -> FeatureMatrix {
    let ids = (0..data.nrows()).map(|i| format!("p{i}")).collect();
    FeatureMatrix {
        data,
        stage: Stage::Stacked,
        provenance: Provenance {
            backbones: BackboneId::ALL.to_vec(),
            split: Split::Train,
            record_ids: ids,
        },
    }
}

fn main() -> hybridct::Result<()> {
    // Linearly separable clusters.
    let x = stacked(array![[0.0f32, 0.0], [0.0, 1.0], [3.0, 3.0], [3.0, 4.0]]);
    let y = vec![Label::NonCovid, Label::NonCovid, Label::Covid, Label::Covid];
    let config = SVCConfig {
        kernel: Kernel::Linear,
        tolerance: 1e-8,
        ..SVCConfig::default()
    };
    let model = fit_svc(&x, &y, &config)?;
    println!(
        "linear toy: {} support vectors, training predictions {:?}",
        model.n_support(),
        model.predict(&x)?
    );
    let probe = stacked(array![[1.5f32, 2.0], [3.0, 3.0], [0.0, 1.0]]);
    let scores = model.decision_score(&probe)?;
    println!("  margin midpoint score {:+.2e} (on the hyperplane)", scores[0]);
    println!("  support vectors score {:+.4} and {:+.4}", scores[1], scores[2]);

    // XOR needs the RBF kernel.
    let x = stacked(array![[0.0f32, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
    let y = vec![Label::NonCovid, Label::NonCovid, Label::Covid, Label::Covid];
    let config = SVCConfig {
        kernel: Kernel::Rbf,
        gamma: Gamma::Value(1.0),
        c: 10.0,
        ..SVCConfig::default()
    };
    let model = fit_svc(&x, &y, &config)?;
    println!(
        "xor with rbf: predictions {:?}, bias {:+.2e}",
        model.predict(&x)?,
        model.bias
    );
    Ok(())
}
