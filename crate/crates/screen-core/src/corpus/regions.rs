//! Mask-driven preprocessing: nearest-neighbor mask resize, connected
//! components, lung cropping and the segmentation quality gate.

use crate::corpus::LungMask;
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Grid};

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub area: usize,
    /// Inclusive bounding box (r0, c0, r1, c1).
    pub bbox: (usize, usize, usize, usize),
    /// Raster index of the first pixel encountered; tie-break key.
    pub seed_index: usize,
    pub pixels: Vec<(usize, usize)>,
}

/// Nearest-neighbor mask resize. Source index = round_ties_even(i * src/dst),
/// clamped, so integer upscales replicate pixels as blocks.
pub fn resize_mask_nearest(mask: &LungMask, target: (usize, usize)) -> Result<LungMask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let (sh, sw) = mask.bits.dims();
    if sh == 0 || sw == 0 {
        return Err(Error::DegenerateMask);
    }
    if (sh, sw) == (th, tw) {
        return Ok(LungMask { bits: mask.bits.clone(), source_dims: (th, tw) });
    }
    let map = |i: usize, src: usize, dst: usize| -> usize {
        let x = (i as f64 * src as f64 / dst as f64).round_ties_even() as usize;
        x.min(src - 1)
    };
    let bits = BitGrid::from_fn(th, tw, |r, c| mask.bits.get(map(r, sh, th), map(c, sw, tw)));
    Ok(LungMask { bits, source_dims: (th, tw) })
}

/// The one or two largest 8-connected foreground components, largest first.
/// Ties broken by the smaller top-left raster index.
pub fn two_largest_regions(mask: &LungMask) -> Result<Vec<Region>> {
    let mut regions = label_components(&mask.bits);
    if regions.is_empty() {
        return Err(Error::NoLungRegion);
    }
    regions.sort_by(|a, b| b.area.cmp(&a.area).then(a.seed_index.cmp(&b.seed_index)));
    regions.truncate(2);
    Ok(regions)
}

/// All 8-connected foreground components in raster order of discovery.
pub fn label_components(bits: &BitGrid) -> Vec<Region> {
    let (h, w) = bits.dims();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !bits.get(start / w, start % w) {
            continue;
        }
        let mut pixels = Vec::new();
        let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0usize, 0usize);
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if !seen[nidx] && bits.get(nr as usize, nc as usize) {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        pixels.sort_unstable();
        regions.push(Region { area: pixels.len(), bbox: (r0, c0, r1, c1), seed_index: start, pixels });
    }
    regions
}

/// Cut the union bounding box of the given regions from the image.
pub fn crop_to_lungs(image: &Grid, regions: &[Region]) -> Result<Grid> {
    if regions.is_empty() {
        return Err(Error::NoLungRegion);
    }
    let (h, w) = image.dims();
    let mut r0 = usize::MAX;
    let mut c0 = usize::MAX;
    let mut r1 = 0usize;
    let mut c1 = 0usize;
    for reg in regions {
        let (a, b, c, d) = reg.bbox;
        if c >= h || d >= w {
            return Err(Error::invalid("region outside image bounds"));
        }
        r0 = r0.min(a);
        c0 = c0.min(b);
        r1 = r1.max(c);
        c1 = c1.max(d);
    }
    image.crop(r0, c0, r1, c1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Reject { reason: String },
}

impl GateDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, GateDecision::Accept)
    }
}

pub const GATE_MIN_AREA_RATIO: f64 = 0.05;
pub const GATE_MAX_AREA_RATIO: f64 = 0.80;
pub const GATE_MAX_COMPONENT_RATIO: f64 = 10.0;

/// Automated surrogate for manual segmentation review. Total: never errors.
pub fn quality_gate(mask: &LungMask) -> GateDecision {
    let (h, w) = mask.bits.dims();
    if h == 0 || w == 0 {
        return GateDecision::Reject { reason: "empty mask".into() };
    }
    let regions = label_components(&mask.bits);
    if regions.len() < 2 {
        return GateDecision::Reject { reason: "single lung region".into() };
    }
    let fg: usize = regions.iter().map(|r| r.area).sum();
    let ratio = fg as f64 / (h * w) as f64;
    if !(GATE_MIN_AREA_RATIO..=GATE_MAX_AREA_RATIO).contains(&ratio) {
        return GateDecision::Reject { reason: "area ratio out of bounds".into() };
    }
    let mut areas: Vec<usize> = regions.iter().map(|r| r.area).collect();
    areas.sort_unstable_by(|a, b| b.cmp(a));
    if areas[0] as f64 > GATE_MAX_COMPONENT_RATIO * areas[1] as f64 {
        return GateDecision::Reject { reason: "lung size imbalance".into() };
    }
    GateDecision::Accept
}

/// Bilinear resize to side x side.
pub fn resize_image(image: &Grid, side: usize) -> Result<Grid> {
    if side == 0 {
        return Err(Error::invalid("side must be positive"));
    }
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::invalid("empty image"));
    }
    image.resize_bilinear(side, side)
}
