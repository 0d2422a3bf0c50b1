//! Training-time image augmentation.
//!
//! One composed affine warp (rotate, shear, zoom about the image center,
//! then shift) with a configurable border fill, followed by multiplicative
//! brightness and a clip back to `[0, 1]`. Defaults match the training
//! configuration: ±10° rotation, 5% shifts, 0.1 shear, ±10% zoom,
//! brightness in [0.9, 1.1], reflected edges. Applied to TRAIN images only,
//! resampled every epoch; VAL and TEST are never augmented.

use ndarray::Array3;
use rand::Rng;

use crate::dataset::ImageTensor;
use crate::error::{Error, Result};

/// How samples outside the input image are filled during warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    /// Reflect about the image edge, duplicating the border sample.
    Reflect,
    /// Clamp to the nearest border sample.
    Nearest,
    /// Constant zero fill.
    Constant,
}

/// Sampling ranges for each transformation. Field names mirror the
/// conventional generator config keys (`rotation_range` etc.).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Maximum absolute rotation, degrees.
    pub rotation_range: f64,
    /// Maximum horizontal shift as a fraction of width.
    pub width_shift_range: f64,
    /// Maximum vertical shift as a fraction of height.
    pub height_shift_range: f64,
    /// Maximum absolute shear intensity.
    pub shear_range: f64,
    /// Maximum relative zoom; factor is sampled in `[1 - z, 1 + z]`.
    pub zoom_range: f64,
    /// Multiplicative brightness range `[lo, hi]`.
    pub brightness_range: [f64; 2],
    pub fill_mode: FillMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_range: 10.0,
            width_shift_range: 0.05,
            height_shift_range: 0.05,
            shear_range: 0.1,
            zoom_range: 0.10,
            brightness_range: [0.9, 1.1],
            fill_mode: FillMode::Reflect,
        }
    }
}

impl AugmentationConfig {
    /// A config that makes `apply_augmentation` the identity map.
    pub fn identity() -> Self {
        AugmentationConfig {
            rotation_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            brightness_range: [1.0, 1.0],
            fill_mode: FillMode::Reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_range < 0.0
            || self.width_shift_range < 0.0
            || self.height_shift_range < 0.0
            || self.shear_range < 0.0
            || self.zoom_range < 0.0
        {
            return Err(Error::Invalid("augmentation ranges must be non-negative".into()));
        }
        if self.brightness_range[0] > self.brightness_range[1] {
            return Err(Error::Invalid(format!(
                "brightness range lo {} > hi {}",
                self.brightness_range[0], self.brightness_range[1]
            )));
        }
        Ok(())
    }
}

/// One sampled realization of the configured ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Degrees, in `[-rotation_range, +rotation_range]`.
    pub rotation_deg: f64,
    /// Horizontal shift in pixels.
    pub dx: f64,
    /// Vertical shift in pixels.
    pub dy: f64,
    pub shear: f64,
    /// Zoom factor; 1.0 means no zoom.
    pub zoom: f64,
    pub brightness: f64,
    pub fill_mode: FillMode,
}

impl AugmentParams {
    /// Parameters that leave the image untouched.
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            dx: 0.0,
            dy: 0.0,
            shear: 0.0,
            zoom: 1.0,
            brightness: 1.0,
            fill_mode: FillMode::Reflect,
        }
    }

    fn has_geometry(&self) -> bool {
        self.rotation_deg != 0.0
            || self.dx != 0.0
            || self.dy != 0.0
            || self.shear != 0.0
            || self.zoom != 1.0
    }
}

fn sample_symmetric<R: Rng>(rng: &mut R, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

/// Draw one set of augmentation parameters. All samples are uniform within
/// their configured ranges and fully determined by `rng`.
pub fn sample_params<R: Rng>(config: &AugmentationConfig, rng: &mut R) -> AugmentParams {
    let (w, h) = (crate::dataset::IMAGE_SIDE as f64, crate::dataset::IMAGE_SIDE as f64);
    let rotation_deg = sample_symmetric(rng, config.rotation_range);
    let dx = sample_symmetric(rng, config.width_shift_range) * w;
    let dy = sample_symmetric(rng, config.height_shift_range) * h;
    let shear = sample_symmetric(rng, config.shear_range);
    let zoom = 1.0 + sample_symmetric(rng, config.zoom_range);
    let [lo, hi] = config.brightness_range;
    let brightness = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    AugmentParams {
        rotation_deg,
        dx,
        dy,
        shear,
        zoom,
        brightness,
        fill_mode: config.fill_mode,
    }
}

fn reflect_index(mut i: i64, n: i64) -> i64 {
    // (d c b a | a b c d | d c b a): reflect about the edge, keeping the
    // border sample duplicated.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i;
        }
    }
}

fn border_value(data: &Array3<f32>, y: i64, x: i64, c: usize, fill: FillMode) -> f32 {
    let (h, w, _) = data.dim();
    let (h, w) = (h as i64, w as i64);
    match fill {
        FillMode::Constant => {
            if y < 0 || y >= h || x < 0 || x >= w {
                0.0
            } else {
                data[(y as usize, x as usize, c)]
            }
        }
        FillMode::Nearest => data[(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize, c)],
        FillMode::Reflect => data[(reflect_index(y, h) as usize, reflect_index(x, w) as usize, c)],
    }
}

/// Warp `image` with the sampled affine parameters, scale brightness, and
/// clip to `[0, 1]`. Identity parameters return the input pixel-for-pixel.
pub fn apply_augmentation(image: &ImageTensor, params: &AugmentParams) -> ImageTensor {
    let mut out = if params.has_geometry() {
        warp_affine(&image.data, params)
    } else {
        image.data.clone()
    };
    if params.brightness != 1.0 {
        let b = params.brightness as f32;
        out.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    ImageTensor {
        data: out,
        source: image.source.clone(),
    }
}

/// Inverse-map each output pixel through the composed affine
/// (rotate -> shear -> zoom about the center, then shift) and sample the
/// input bilinearly.
fn warp_affine(data: &Array3<f32>, params: &AugmentParams) -> Array3<f32> {
    let (h, w, channels) = data.dim();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (s, z) = (params.shear, params.zoom);
    // Forward 2x2: M = Z * Sh * R, with Sh = [[1, s], [0, 1]].
    let m = [
        [z * (cos + s * sin), z * (s * cos - sin)],
        [z * sin, z * cos],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];

    let mut out = Array3::<f32>::zeros((h, w, channels));
    for oy in 0..h {
        for ox in 0..w {
            let rx = ox as f64 - cx - params.dx;
            let ry = oy as f64 - cy - params.dy;
            let ix = inv[0][0] * rx + inv[0][1] * ry + cx;
            let iy = inv[1][0] * rx + inv[1][1] * ry + cy;

            let x0 = ix.floor();
            let y0 = iy.floor();
            let fx = (ix - x0) as f32;
            let fy = (iy - y0) as f32;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..channels {
                let v00 = border_value(data, y0, x0, c, params.fill_mode);
                let v01 = border_value(data, y0, x0 + 1, c, params.fill_mode);
                let v10 = border_value(data, y0 + 1, x0, c, params.fill_mode);
                let v11 = border_value(data, y0 + 1, x0 + 1, c, params.fill_mode);
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out[(oy, ox, c)] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array3;

    fn constant_image(value: f32) -> ImageTensor {
        ImageTensor {
            data: Array3::from_elem((224, 224, 3), value),
            source: "test".into(),
        }
    }

    fn gradient_image() -> ImageTensor {
        let data = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 256) as f32 / 255.0
        });
        ImageTensor {
            data,
            source: "grad".into(),
        }
    }

    #[test]
    fn zero_range_config_samples_identity() {
        let config = AugmentationConfig::identity();
        let mut rng = derive_rng(1, "aug", 0);
        let params = sample_params(&config, &mut rng);
        assert_eq!(params, AugmentParams::identity());
    }

    #[test]
    fn default_config_samples_within_ranges() {
        let config = AugmentationConfig::default();
        for i in 0..200 {
            let mut rng = derive_rng(5, "aug", i);
            let p = sample_params(&config, &mut rng);
            assert!(p.rotation_deg.abs() <= 10.0);
            assert!(p.dx.abs() <= 0.05 * 224.0);
            assert!(p.dy.abs() <= 0.05 * 224.0);
            assert!(p.shear.abs() <= 0.1);
            assert!((0.9..=1.1).contains(&p.zoom));
            assert!((0.9..=1.1).contains(&p.brightness));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let config = AugmentationConfig::default();
        let a = sample_params(&config, &mut derive_rng(11, "aug", 42));
        let b = sample_params(&config, &mut derive_rng(11, "aug", 42));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_params_are_exact_identity() {
        let img = gradient_image();
        let out = apply_augmentation(&img, &AugmentParams::identity());
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn brightness_scales_and_clips() {
        let half = constant_image(0.5);
        let mut p = AugmentParams::identity();
        p.brightness = 1.1;
        let out = apply_augmentation(&half, &p);
        assert!(out.data.iter().all(|&v| (v - 0.55).abs() < 1e-6));

        let full = constant_image(1.0);
        let out = apply_augmentation(&full, &p);
        assert!(out.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn warp_preserves_shape_and_range() {
        let img = gradient_image();
        let config = AugmentationConfig::default();
        for i in 0..5 {
            let mut rng = derive_rng(3, "aug", i);
            let p = sample_params(&config, &mut rng);
            let out = apply_augmentation(&img, &p);
            assert_eq!(out.data.dim(), (224, 224, 3));
            assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pure_shift_moves_pixels() {
        // A shift by a whole pixel relocates content exactly (interior pixels).
        let mut data = Array3::<f32>::zeros((224, 224, 3));
        data[(100, 100, 0)] = 1.0;
        let img = ImageTensor { data, source: "dot".into() };
        let mut p = AugmentParams::identity();
        p.dx = 3.0;
        p.dy = -2.0;
        let out = apply_augmentation(&img, &p);
        assert_eq!(out.data[(98, 103, 0)], 1.0);
        assert_eq!(out.data[(100, 100, 0)], 0.0);
    }

    #[test]
    fn constant_fill_pads_with_zero() {
        let img = constant_image(1.0);
        let mut p = AugmentParams::identity();
        p.dx = 10.0;
        p.fill_mode = FillMode::Constant;
        let out = apply_augmentation(&img, &p);
        assert_eq!(out.data[(0, 0, 0)], 0.0);
        assert_eq!(out.data[(0, 223, 0)], 1.0);
    }

    #[test]
    fn reflect_fill_keeps_constant_images_constant() {
        let img = constant_image(0.7);
        let config = AugmentationConfig {
            brightness_range: [1.0, 1.0],
            ..AugmentationConfig::default()
        };
        let mut rng = derive_rng(9, "aug", 0);
        let p = sample_params(&config, &mut rng);
        let out = apply_augmentation(&img, &p);
        for v in out.data.iter() {
            assert!((v - 0.7).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let config = AugmentationConfig {
            brightness_range: [1.2, 0.8],
            ..AugmentationConfig::default()
        };
        assert!(config.validate().is_err());
        let config = AugmentationConfig {
            zoom_range: -0.1,
            ..AugmentationConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
