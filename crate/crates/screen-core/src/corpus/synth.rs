//! Deterministic synthetic corpus: two elliptical lung fields on a dark
//! background, optional planted bright-blob lesions, plus the matching
//! lung and lesion masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Grid};

/// Geometry of the two simulated lung fields, as fractions of the frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LungEllipses {
    pub left_center: (f64, f64),
    pub right_center: (f64, f64),
    pub semi_axes: (f64, f64),
}

impl Default for LungEllipses {
    fn default() -> Self {
        LungEllipses {
            left_center: (0.52, 0.30),
            right_center: (0.52, 0.70),
            semi_axes: (0.32, 0.16),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_tb: usize,
    pub image_size: usize,
    pub lesion_count_range: (usize, usize),
    /// Lesion radius range in pixels.
    pub lesion_radius_range: (f64, f64),
    pub lung_ellipse_params: LungEllipses,
    /// Standard deviation of additive Gaussian noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_normal: 100,
            n_tb: 100,
            image_size: 256,
            lesion_count_range: (1, 3),
            lesion_radius_range: (8.0, 16.0),
            lung_ellipse_params: LungEllipses::default(),
            noise_level: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::invalid("image_size must be >= 64"));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 || self.lesion_count_range.0 == 0 {
            return Err(Error::invalid("lesion_count_range must be nonempty and positive"));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(Error::invalid("lesion_radius_range must be nonempty and positive"));
        }
        if self.noise_level < 0.0 {
            return Err(Error::invalid("noise_level must be non-negative"));
        }
        Ok(())
    }
}

/// One generated sample: image, lung mask, lesion mask (tb only).
pub struct SynthSample {
    pub id: String,
    pub label: Label,
    pub image: Grid,
    pub lung_mask: BitGrid,
    pub lesion_mask: BitGrid,
}

fn inside_ellipse(r: f64, c: f64, center: (f64, f64), axes: (f64, f64)) -> bool {
    let dr = (r - center.0) / axes.0;
    let dc = (c - center.1) / axes.1;
    dr * dr + dc * dc <= 1.0
}

/// Deterministic per (config.seed, index); samples can be generated in any
/// order.
pub fn generate_sample(config: &SynthConfig, label: Label, index: usize) -> SynthSample {
    let n = config.image_size;
    let nf = n as f64;
    let ell = &config.lung_ellipse_params;
    let left = (ell.left_center.0 * nf, ell.left_center.1 * nf);
    let right = (ell.right_center.0 * nf, ell.right_center.1 * nf);
    let axes = (ell.semi_axes.0 * nf, ell.semi_axes.1 * nf);

    let id = match label {
        Label::Normal => format!("n{index:05}"),
        Label::Tb => format!("t{index:05}"),
    };
    let stream = match label {
        Label::Normal => index as u64,
        Label::Tb => (1u64 << 32) | index as u64,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(
        config.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let lung_mask = BitGrid::from_fn(n, n, |r, c| {
        let (rf, cf) = (r as f64, c as f64);
        inside_ellipse(rf, cf, left, axes) || inside_ellipse(rf, cf, right, axes)
    });

    // lesions: bright soft-edged disks planted inside a lung field
    let mut lesions: Vec<(f64, f64, f64)> = Vec::new();
    if label == Label::Tb {
        let count = rng.gen_range(config.lesion_count_range.0..=config.lesion_count_range.1);
        while lesions.len() < count {
            let center = if rng.gen_bool(0.5) { left } else { right };
            // sample inside the ellipse, margin keeps the full disk inside
            let radius = rng.gen_range(config.lesion_radius_range.0..=config.lesion_radius_range.1);
            let u: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let s: f64 = rng.gen_range(0.0f64..1.0).sqrt();
            let margin_r = (1.0 - radius / axes.0).max(0.0);
            let margin_c = (1.0 - radius / axes.1).max(0.0);
            let cr = center.0 + s * margin_r * axes.0 * u.sin();
            let cc = center.1 + s * margin_c * axes.1 * u.cos();
            lesions.push((cr, cc, radius));
        }
    }

    let mut lesion_mask = BitGrid::zeros(n, n);
    let mut image = Grid::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f64, c as f64);
            let mut v = 0.08 + 0.04 * (rf / nf); // dark background with mild gradient
            for center in [left, right] {
                let dr = (rf - center.0) / axes.0;
                let dc = (cf - center.1) / axes.1;
                let d2 = dr * dr + dc * dc;
                if d2 <= 1.0 {
                    // brighter toward the field center
                    v = 0.40 + 0.20 * (1.0 - d2);
                }
            }
            let mut in_lesion = false;
            for &(lr, lc, rad) in &lesions {
                let d = ((rf - lr).powi(2) + (cf - lc).powi(2)).sqrt();
                if d <= rad {
                    in_lesion = true;
                    // soft edge over the outer 30% of the radius
                    let edge = ((rad - d) / (0.3 * rad)).clamp(0.0, 1.0);
                    v += 0.35 * edge;
                }
            }
            if in_lesion && lung_mask.get(r, c) {
                lesion_mask.set(r, c, true);
            }
            let noise: f64 = rng.gen_range(-1.0..1.0) * config.noise_level * 1.732;
            image.set(r, c, ((v + noise).clamp(0.0, 1.0)) as f32);
        }
    }

    SynthSample { id, label, image, lung_mask, lesion_mask }
}

/// Generate the corpus under `out_dir` (images/, masks/, lesions/) and
/// return the manifest. Splits are left unassigned.
pub fn generate_synthetic_corpus(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["images", "masks", "lesions"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let mut entries = Vec::new();
    let jobs: Vec<(Label, usize)> = (0..config.n_normal)
        .map(|i| (Label::Normal, i))
        .chain((0..config.n_tb).map(|i| (Label::Tb, i)))
        .collect();
    for (label, index) in jobs {
        let sample = generate_sample(config, label, index);
        let image_rel = format!("images/{}.png", sample.id);
        let mask_rel = format!("masks/{}.png", sample.id);
        sample.image.save_png(&out_dir.join(&image_rel))?;
        sample.lung_mask.save_png(&out_dir.join(&mask_rel))?;
        if sample.label == Label::Tb {
            sample.lesion_mask.save_png(&out_dir.join(format!("lesions/{}.png", sample.id)))?;
        }
        entries.push(ManifestEntry {
            id: sample.id,
            image_path: image_rel,
            mask_path: Some(mask_rel),
            label: sample.label,
            split: None,
            provenance: "synthetic".into(),
        });
    }
    DatasetManifest::new(entries, config.seed)
}
