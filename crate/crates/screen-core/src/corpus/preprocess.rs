//! Corpus preprocessing: per image, resize the lung mask to the image,
//! gate the segmentation quality, crop to the two lung fields and resize
//! to the stored side. Lesion masks, when present, ride along through the
//! identical geometry so localization ground truth stays aligned.

use std::path::Path;

use crate::corpus::regions::{
    crop_to_lungs, quality_gate, resize_mask_nearest, two_largest_regions, GateDecision,
};
use crate::corpus::{DatasetManifest, LungMask, ManifestEntry};
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Grid};

/// Stored side length of preprocessed images.
pub const PREPROCESSED_SIDE: usize = 225;

/// One rejected manifest row and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct PreprocessOutcome {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
}

/// Nearest-neighbor resize of a binary mask to side x side, reusing the
/// lung-mask index mapping.
fn resize_bits_nearest(bits: &BitGrid, side: usize) -> Result<BitGrid> {
    let resized = resize_mask_nearest(&LungMask::new(bits.clone()), (side, side))?;
    Ok(resized.bits)
}

fn process_entry(entry: &ManifestEntry, in_root: &Path, out_root: &Path) -> Result<()> {
    let mask_rel = entry
        .mask_path
        .as_deref()
        .ok_or_else(|| Error::invalid("no lung mask"))?;
    let image = Grid::load_png(&in_root.join(&entry.image_path))?;
    let mask_bits = BitGrid::load_png(&in_root.join(mask_rel))?;
    let mask = resize_mask_nearest(&LungMask::new(mask_bits), image.dims())?;
    if let GateDecision::Reject { reason } = quality_gate(&mask) {
        return Err(Error::invalid(reason));
    }
    let regions = two_largest_regions(&mask)?;
    let cropped = crop_to_lungs(&image, &regions)?;
    let stored = cropped.resize_bilinear(PREPROCESSED_SIDE, PREPROCESSED_SIDE)?;
    stored.save_png(&out_root.join(&entry.image_path))?;

    // lung mask through the same crop + resize, for provenance
    let mut r0 = usize::MAX;
    let mut c0 = usize::MAX;
    let mut r1 = 0usize;
    let mut c1 = 0usize;
    for reg in &regions {
        r0 = r0.min(reg.bbox.0);
        c0 = c0.min(reg.bbox.1);
        r1 = r1.max(reg.bbox.2);
        c1 = c1.max(reg.bbox.3);
    }
    let mask_cropped = mask.bits.crop(r0, c0, r1, c1)?;
    resize_bits_nearest(&mask_cropped, PREPROCESSED_SIDE)?
        .save_png(&out_root.join(mask_rel))?;

    // lesion ground truth follows the exact same geometry when present
    let lesion_rel = format!("lesions/{}.png", entry.id);
    let lesion_path = in_root.join(&lesion_rel);
    if lesion_path.is_file() {
        let lesions = BitGrid::load_png(&lesion_path)?;
        let lesions = if lesions.dims() == image.dims() {
            lesions
        } else {
            let (h, w) = image.dims();
            let l = resize_mask_nearest(&LungMask::new(lesions), (h, w))?;
            l.bits
        };
        let cropped = lesions.crop(r0, c0, r1, c1)?;
        resize_bits_nearest(&cropped, PREPROCESSED_SIDE)?
            .save_png(&out_root.join(&lesion_rel))?;
    }
    Ok(())
}

/// Preprocess every manifest row from `in_root` into `out_root`. Row-level
/// failures are recorded and the run continues; it is an error only when
/// every row fails.
pub fn preprocess_corpus(
    manifest: &DatasetManifest,
    in_root: &Path,
    out_root: &Path,
) -> Result<PreprocessOutcome> {
    for sub in ["images", "masks", "lesions"] {
        let dir = out_root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    }
    let mut entries = Vec::new();
    let mut rejections = Vec::new();
    for entry in &manifest.entries {
        match process_entry(entry, in_root, out_root) {
            Ok(()) => entries.push(entry.clone()),
            Err(err) => rejections.push(Rejection {
                id: entry.id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid("preprocessing rejected every row"));
    }
    Ok(PreprocessOutcome { manifest: DatasetManifest::new(entries, manifest.seed)?, rejections })
}

/// The side report: one `id,reason` row per rejection.
pub fn write_rejection_report(path: &Path, rejections: &[Rejection]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["id", "reason"])?;
    for r in rejections {
        wtr.write_record([r.id.as_str(), r.reason.as_str()])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
