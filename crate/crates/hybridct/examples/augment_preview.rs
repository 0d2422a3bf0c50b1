//! Sample augmentation parameters and write before/after previews.
//!
//! ```sh
//! cargo run --example augment_preview -- out-dir
//! ```

use hybridct::augment::{apply_augmentation, sample_params, AugmentationConfig};
use hybridct::dataset::ImageTensor;
use hybridct::rng::derive_rng;

fn save(tensor: &ImageTensor, path: &std::path::Path) {
    let (h, w, _) = tensor.data.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (tensor.data[(y as usize, x as usize, c)] * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).unwrap();
}

fn main() -> hybridct::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/hybridct-augment".to_string());
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out).unwrap();

    // A checkerboard with a bright disc makes the warp easy to see.
    let data = ndarray::Array3::from_shape_fn((224, 224, 3), |(y, x, _)| {
        let checker = if (x / 28 + y / 28) % 2 == 0 { 0.35 } else { 0.65 };
        let (dx, dy) = (x as f64 - 112.0, y as f64 - 112.0);
        if dx * dx + dy * dy < 40.0 * 40.0 {
            0.95
        } else {
            checker
        }
    });
    let image = ImageTensor {
        data,
        source: "preview".into(),
    };
    save(&image, &out.join("original.png"));

    let config = AugmentationConfig::default();
    println!("config: {config:?}");
    for i in 0..4 {
        let mut rng = derive_rng(42, "preview", i);
        let params = sample_params(&config, &mut rng);
        println!(
            "sample {i}: rotation {:+.2} deg, shift ({:+.1}, {:+.1}) px, shear {:+.3}, \
             zoom {:.3}, brightness {:.3}",
            params.rotation_deg, params.dx, params.dy, params.shear, params.zoom, params.brightness
        );
        let augmented = apply_augmentation(&image, &params);
        save(&augmented, &out.join(format!("augmented_{i}.png")));
    }
    println!("previews written under {}", out.display());
    Ok(())
}
