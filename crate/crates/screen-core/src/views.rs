//! Augmentation pipelines: labeled-data augmentation and the
//! two-global + one-local view generator for self-supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;

pub const GLOBAL_SIDE: usize = 224;
pub const LOCAL_SIDE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugOp {
    Resize,
    Crop,
    ColorJitter,
    Rotation,
    AutoContrast,
    Equalization,
    Blur,
}

/// Augmentation settings for one tier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TierPolicy {
    pub crop_scale_range: (f64, f64),
    pub rotation_limit_deg: f64,
    pub ops: Vec<AugOp>,
}

impl TierPolicy {
    pub fn none() -> Self {
        TierPolicy { crop_scale_range: (1.0, 1.0), rotation_limit_deg: 0.0, ops: vec![] }
    }
}

/// Three-tier policy: minimal global, extensive global, intensive local.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentPolicy {
    pub global_1: TierPolicy,
    pub global_2: TierPolicy,
    pub local: TierPolicy,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            global_1: TierPolicy {
                crop_scale_range: (0.5, 1.0),
                rotation_limit_deg: 0.0,
                ops: vec![AugOp::Resize, AugOp::Crop],
            },
            global_2: TierPolicy {
                crop_scale_range: (0.5, 1.0),
                rotation_limit_deg: 10.0,
                ops: vec![
                    AugOp::Resize,
                    AugOp::Crop,
                    AugOp::Rotation,
                    AugOp::AutoContrast,
                    AugOp::ColorJitter,
                ],
            },
            local: TierPolicy {
                crop_scale_range: (0.22, 0.48),
                rotation_limit_deg: 10.0,
                ops: vec![
                    AugOp::Resize,
                    AugOp::Crop,
                    AugOp::Rotation,
                    AugOp::ColorJitter,
                    AugOp::Equalization,
                    AugOp::Blur,
                ],
            },
        }
    }
}

impl AugmentPolicy {
    /// Tier op counts must grow monotonically.
    pub fn is_monotone(&self) -> bool {
        self.global_1.ops.len() <= self.global_2.ops.len()
            && self.global_2.ops.len() <= self.local.ops.len()
    }
}

/// The 2-global + 1-local crops of one source image.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub global_1: Grid,
    pub global_2: Grid,
    pub local_1: Grid,
    pub source_id: String,
    pub rng_seed: u64,
}

// -- individual ops ----------------------------------------------------

pub fn brightness_contrast(img: &Grid, brightness: f32, contrast: f32) -> Grid {
    let (h, w) = img.dims();
    Grid::from_fn(h, w, |r, c| {
        ((img.get(r, c) - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0)
    })
}

/// Linear stretch of the observed range to [0,1].
pub fn auto_contrast(img: &Grid) -> Grid {
    let (lo, hi) = img.min_max();
    if hi - lo < 1e-6 {
        return img.clone();
    }
    let (h, w) = img.dims();
    Grid::from_fn(h, w, |r, c| (img.get(r, c) - lo) / (hi - lo))
}

/// Histogram equalization over 256 bins.
pub fn equalize(img: &Grid) -> Grid {
    let (h, w) = img.dims();
    let n = h * w;
    let mut hist = [0usize; 256];
    for &v in img.as_slice() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let mut cdf = [0f32; 256];
    let mut acc = 0usize;
    for (i, &count) in hist.iter().enumerate() {
        acc += count;
        cdf[i] = acc as f32 / n as f32;
    }
    let cdf_min = cdf.iter().copied().find(|&v| v > 0.0).unwrap_or(0.0);
    let scale = if (1.0 - cdf_min).abs() < 1e-9 { 1.0 } else { 1.0 - cdf_min };
    Grid::from_fn(h, w, |r, c| {
        let bin = (img.get(r, c).clamp(0.0, 1.0) * 255.0).round() as usize;
        ((cdf[bin] - cdf_min) / scale).clamp(0.0, 1.0)
    })
}

/// Rotation about the image center with reflection padding.
pub fn rotate_reflect(img: &Grid, degrees: f64) -> Grid {
    let (h, w) = img.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    Grid::from_fn(h, w, |r, c| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        // inverse rotation
        let sy = cy + dy * cos - dx * sin;
        let sx = cx + dy * sin + dx * cos;
        bilinear_reflect(img, sy, sx)
    })
}

fn bilinear_reflect(img: &Grid, r: f64, c: f64) -> f32 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = (r - r0) as f32;
    let fc = (c - c0) as f32;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let top = img.sample_reflect(r0, c0) * (1.0 - fc) + img.sample_reflect(r0, c0 + 1) * fc;
    let bot =
        img.sample_reflect(r0 + 1, c0) * (1.0 - fc) + img.sample_reflect(r0 + 1, c0 + 1) * fc;
    (top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0)
}

/// Separable Gaussian blur with reflection at the borders.
pub fn gaussian_blur(img: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = img.dims();
    let horizontal = Grid::from_fn(h, w, |r, c| {
        let mut acc = 0.0f64;
        for (i, &k) in kernel.iter().enumerate() {
            let cc = c as isize + i as isize - radius;
            acc += k * img.sample_reflect(r as isize, cc) as f64;
        }
        acc as f32
    });
    Grid::from_fn(h, w, |r, c| {
        let mut acc = 0.0f64;
        for (i, &k) in kernel.iter().enumerate() {
            let rr = r as isize + i as isize - radius;
            acc += k * horizontal.sample_reflect(rr, c as isize) as f64;
        }
        (acc as f32).clamp(0.0, 1.0)
    })
}

/// Random crop covering an area fraction in `scale_range`, resized to
/// `out_side`. Returns the crop box so callers can check coverage.
fn random_resized_crop(
    img: &Grid,
    rng: &mut ChaCha20Rng,
    scale_range: (f64, f64),
    out_side: usize,
) -> (Grid, f64) {
    let (h, w) = img.dims();
    let area = (h * w) as f64;
    let frac = rng.gen_range(scale_range.0..=scale_range.1);
    let aspect = rng.gen_range(0.85f64..=1.18);
    let target = area * frac;
    let ch = ((target * aspect).sqrt().round() as usize).clamp(1, h);
    let cw = ((target / ch as f64).round() as usize).clamp(1, w);
    let r0 = rng.gen_range(0..=h - ch);
    let c0 = rng.gen_range(0..=w - cw);
    let crop = img.crop(r0, c0, r0 + ch - 1, c0 + cw - 1).expect("crop in bounds");
    let actual = (ch * cw) as f64 / area;
    (crop.resize_bilinear(out_side, out_side).expect("positive side"), actual)
}

fn apply_tier(img: &Grid, rng: &mut ChaCha20Rng, tier: &TierPolicy, out_side: usize) -> Grid {
    if tier.ops.is_empty() {
        return img.center_crop(out_side.min(img.height()), out_side.min(img.width())).unwrap();
    }
    let mut out = if tier.ops.contains(&AugOp::Crop) {
        random_resized_crop(img, rng, tier.crop_scale_range, out_side).0
    } else {
        img.resize_bilinear(out_side, out_side).unwrap()
    };
    if tier.ops.contains(&AugOp::Rotation) && rng.gen_bool(0.5) {
        let deg = rng.gen_range(-tier.rotation_limit_deg..=tier.rotation_limit_deg);
        out = rotate_reflect(&out, deg);
    }
    if tier.ops.contains(&AugOp::ColorJitter) && rng.gen_bool(0.8) {
        let b = rng.gen_range(-0.2f32..=0.2);
        let c = rng.gen_range(-0.2f32..=0.2);
        out = brightness_contrast(&out, b, c);
    }
    if tier.ops.contains(&AugOp::AutoContrast) && rng.gen_bool(0.3) {
        out = auto_contrast(&out);
    }
    if tier.ops.contains(&AugOp::Equalization) && rng.gen_bool(0.2) {
        out = equalize(&out);
    }
    if tier.ops.contains(&AugOp::Blur) && rng.gen_bool(0.5) {
        let sigma = rng.gen_range(0.1f64..=2.0);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Full labeled-data augmentation: 225x225 in, 224x224 out.
pub fn augment_labeled(image: &Grid, seed: u64) -> Grid {
    let tier = TierPolicy {
        crop_scale_range: (0.5, 1.0),
        rotation_limit_deg: 10.0,
        ops: vec![
            AugOp::Resize,
            AugOp::Crop,
            AugOp::ColorJitter,
            AugOp::Rotation,
            AugOp::AutoContrast,
            AugOp::Equalization,
            AugOp::Blur,
        ],
    };
    augment_with(image, seed, &tier, GLOBAL_SIDE)
}

/// Apply one tier with per-seed randomness.
pub fn augment_with(image: &Grid, seed: u64, tier: &TierPolicy, out_side: usize) -> Grid {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    apply_tier(image, &mut rng, tier, out_side)
}

/// Build the 2-global + 1-local view set under the default policy.
pub fn make_views(image: &Grid, source_id: &str, seed: u64) -> ViewSet {
    make_views_with(image, source_id, seed, &AugmentPolicy::default())
}

pub fn make_views_with(image: &Grid, source_id: &str, seed: u64, policy: &AugmentPolicy) -> ViewSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let global_1 = apply_tier(image, &mut rng, &policy.global_1, GLOBAL_SIDE);
    let global_2 = apply_tier(image, &mut rng, &policy.global_2, GLOBAL_SIDE);
    let local_1 = apply_tier(image, &mut rng, &policy.local, LOCAL_SIDE);
    ViewSet { global_1, global_2, local_1, source_id: source_id.to_string(), rng_seed: seed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Grid {
        Grid::from_fn(225, 225, |r, c| (r as f32 / 224.0) * 0.5 + (c as f32 / 224.0) * 0.5)
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = test_image();
        assert_eq!(augment_labeled(&img, 9), augment_labeled(&img, 9));
        assert_ne!(augment_labeled(&img, 9), augment_labeled(&img, 10));
    }

    #[test]
    fn empty_policy_is_center_crop() {
        let img = test_image();
        let out = augment_with(&img, 0, &TierPolicy::none(), 224);
        assert_eq!(out, img.center_crop(224, 224).unwrap());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = test_image();
        for seed in 0..200 {
            let out = augment_labeled(&img, seed);
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0, "seed {seed}: {lo}..{hi}");
            assert_eq!(out.dims(), (224, 224));
        }
    }

    #[test]
    fn view_set_has_contract_dims_and_is_deterministic() {
        let img = test_image();
        let a = make_views(&img, "s0", 5);
        let b = make_views(&img, "s0", 5);
        assert_eq!(a.global_1.dims(), (224, 224));
        assert_eq!(a.global_2.dims(), (224, 224));
        assert_eq!(a.local_1.dims(), (96, 96));
        assert_eq!(a.global_1, b.global_1);
        assert_eq!(a.global_2, b.global_2);
        assert_eq!(a.local_1, b.local_1);
    }

    #[test]
    fn local_crop_area_fraction_in_bounds() {
        let img = test_image();
        let policy = AugmentPolicy::default();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let (_, frac) = random_resized_crop(&img, &mut rng, policy.local.crop_scale_range, 96);
            assert!((0.2..=0.5).contains(&frac), "local fraction {frac}");
        }
    }

    #[test]
    fn global_crop_covers_at_least_half() {
        let img = test_image();
        let policy = AugmentPolicy::default();
        let mut rng = ChaCha20Rng::seed_from_u64(78);
        for _ in 0..1000 {
            let (_, frac) =
                random_resized_crop(&img, &mut rng, policy.global_1.crop_scale_range, 224);
            assert!(frac >= 0.49, "global fraction {frac}");
        }
    }

    #[test]
    fn default_policy_is_monotone() {
        assert!(AugmentPolicy::default().is_monotone());
    }

    #[test]
    fn equalize_and_auto_contrast_preserve_bounds() {
        let img = Grid::from_fn(64, 64, |r, c| 0.2 + 0.3 * ((r + c) % 7) as f32 / 6.0);
        for out in [equalize(&img), auto_contrast(&img)] {
            let (lo, hi) = out.min_max();
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }

    #[test]
    fn rotation_has_no_constant_border() {
        // constant-gradient image: any padding-introduced constant border
        // would show up as runs of equal values along the frame edge
        let img = Grid::from_fn(128, 128, |r, c| (r as f32 + c as f32) / 254.0);
        let rot = rotate_reflect(&img, 8.0);
        for edge in 0..4usize {
            let mut distinct = std::collections::HashSet::new();
            for i in 8..120 {
                let v = match edge {
                    0 => rot.get(0, i),
                    1 => rot.get(127, i),
                    2 => rot.get(i, 0),
                    _ => rot.get(i, 127),
                };
                distinct.insert(v.to_bits());
            }
            assert!(distinct.len() > 20, "edge {edge} looks constant");
        }
    }
}
