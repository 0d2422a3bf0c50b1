//! Synthetic two-class image corpus for smoke tests and demos.
//!
//! Class "COVID" images carry a large bright ellipse on a dark background;
//! "non-COVID" images are dark with a few thin streaks. The classes differ
//! strongly in both mean intensity and structure, so any reasonable feature
//! extractor separates them.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

const SIDE: u32 = 96;

/// Write `per_class` PNGs for each class under `root/COVID` and
/// `root/non-COVID`.
pub fn generate_synthetic_dataset(root: &Path, per_class: usize, seed: u64) -> Result<()> {
    if per_class == 0 {
        return Err(Error::Invalid("per_class must be positive".into()));
    }
    let covid_dir = root.join("COVID");
    let non_dir = root.join("non-COVID");
    std::fs::create_dir_all(&covid_dir).map_err(Error::io(&covid_dir))?;
    std::fs::create_dir_all(&non_dir).map_err(Error::io(&non_dir))?;

    for i in 0..per_class {
        let mut rng = derive_rng(seed, "synth-covid", i as u64);
        let img = blob_image(&mut rng);
        let path = covid_dir.join(format!("covid_{i:03}.png"));
        img.save(&path)
            .map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;

        let mut rng = derive_rng(seed, "synth-noncovid", i as u64);
        let img = streak_image(&mut rng);
        let path = non_dir.join(format!("noncovid_{i:03}.png"));
        img.save(&path)
            .map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn to_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bright filled ellipse, dark noisy background.
fn blob_image<R: Rng>(rng: &mut R) -> image::GrayImage {
    let cx = rng.gen_range(0.38..0.62) * SIDE as f64;
    let cy = rng.gen_range(0.38..0.62) * SIDE as f64;
    let rx = rng.gen_range(0.26..0.38) * SIDE as f64;
    let ry = rng.gen_range(0.26..0.38) * SIDE as f64;
    let brightness = rng.gen_range(0.78..0.95);
    let noise: Vec<f64> = (0..(SIDE * SIDE) as usize)
        .map(|_| rng.gen_range(-0.03..0.03))
        .collect();

    image::GrayImage::from_fn(SIDE, SIDE, |x, y| {
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        let inside = dx * dx + dy * dy <= 1.0;
        let base = if inside { brightness } else { 0.12 };
        image::Luma([to_pixel(base + noise[(y * SIDE + x) as usize])])
    })
}

/// Dark background with thin dim streaks.
fn streak_image<R: Rng>(rng: &mut R) -> image::GrayImage {
    let n_lines = rng.gen_range(3..6);
    let lines: Vec<(f64, f64, f64)> = (0..n_lines)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let offset = rng.gen_range(0.15..0.85) * SIDE as f64;
            let intensity = rng.gen_range(0.28..0.42);
            (angle, offset, intensity)
        })
        .collect();
    let noise: Vec<f64> = (0..(SIDE * SIDE) as usize)
        .map(|_| rng.gen_range(-0.03..0.03))
        .collect();

    image::GrayImage::from_fn(SIDE, SIDE, |x, y| {
        let mut value = 0.08f64;
        for &(angle, offset, intensity) in &lines {
            // Signed distance to the line x sin(a) - y cos(a) = offset - S/2.
            let d = (x as f64) * angle.sin() - (y as f64) * angle.cos() - (offset - SIDE as f64 / 2.0);
            if d.abs() < 1.6 {
                value = value.max(intensity);
            }
        }
        image::Luma([to_pixel(value + noise[(y * SIDE + x) as usize])])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{scan_dataset, Label, LabelMapping};

    #[test]
    fn generated_corpus_scans_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), 5, 123).unwrap();
        let out = scan_dataset(dir.path(), &LabelMapping::default()).unwrap();
        let counts = out.manifest.label_counts();
        assert_eq!(counts[&Label::Covid], 5);
        assert_eq!(counts[&Label::NonCovid], 5);
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn classes_differ_in_mean_intensity() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), 4, 9).unwrap();
        let mean_of = |path: &Path| -> f64 {
            let img = image::open(path).unwrap().to_luma8();
            img.pixels().map(|p| p.0[0] as f64 / 255.0).sum::<f64>() / (img.len() as f64)
        };
        for i in 0..4 {
            let covid = mean_of(&dir.path().join(format!("COVID/covid_{i:03}.png")));
            let non = mean_of(&dir.path().join(format!("non-COVID/noncovid_{i:03}.png")));
            assert!(
                covid > non + 0.15,
                "classes not separated: covid {covid:.3} vs non {non:.3}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(a.path(), 2, 77).unwrap();
        generate_synthetic_dataset(b.path(), 2, 77).unwrap();
        let pa = std::fs::read(a.path().join("COVID/covid_000.png")).unwrap();
        let pb = std::fs::read(b.path().join("COVID/covid_000.png")).unwrap();
        assert_eq!(pa, pb);
    }
}
