//! Generate the bundled synthetic two-class corpus and scan it back.
//!
//! ```sh
//! cargo run --example synth_dataset -- /tmp/hybridct-demo-data
//! ```

use hybridct::dataset::{scan_dataset, LabelMapping};
use hybridct::synth::generate_synthetic_dataset;

fn main() -> hybridct::Result<()> {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/hybridct-demo-data".to_string());
    let root = std::path::PathBuf::from(root);

    generate_synthetic_dataset(&root, 30, 42)?;
    println!("wrote 30 images per class under {}", root.display());

    let outcome = scan_dataset(&root, &LabelMapping::default())?;
    for (label, count) in outcome.manifest.label_counts() {
        println!("  {label}: {count} images");
    }
    Ok(())
}
