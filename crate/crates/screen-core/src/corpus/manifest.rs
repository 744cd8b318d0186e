//! Manifest records, CSV serialization and the split protocol.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::{Label, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: Label,
    pub split: Option<Split>,
    pub provenance: String,
}

pub type SplitCounts = BTreeMap<(String, String), usize>;

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, seed: u64) -> Result<Self> {
        let mut paths = HashSet::new();
        for e in &entries {
            if !paths.insert(e.image_path.clone()) {
                return Err(Error::Manifest(format!("duplicate path {}", e.image_path)));
            }
        }
        Ok(DatasetManifest { entries, seed })
    }

    /// Per-split, per-class tallies keyed by (split, label) strings.
    pub fn counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::new();
        for e in &self.entries {
            let split = e.split.map(|s| s.to_string()).unwrap_or_else(|| "unassigned".into());
            *counts.entry((split, e.label.to_string())).or_insert(0) += 1;
        }
        counts
    }

    pub fn of_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["id", "image_path", "mask_path", "label", "split", "provenance"])?;
        for e in &self.entries {
            wtr.write_record([
                e.id.as_str(),
                e.image_path.as_str(),
                e.mask_path.as_deref().unwrap_or(""),
                &e.label.to_string(),
                &e.split.map(|s| s.to_string()).unwrap_or_else(|| "unassigned".into()),
                e.provenance.as_str(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let expected = ["id", "image_path", "mask_path", "label", "split", "provenance"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest(format!("unexpected header {headers:?}")));
        }
        let mut entries = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").to_string();
            let mask = field(2);
            let split = field(4);
            entries.push(ManifestEntry {
                id: field(0),
                image_path: field(1),
                mask_path: if mask.is_empty() { None } else { Some(mask) },
                label: field(3).parse()?,
                split: if split == "unassigned" || split.is_empty() {
                    None
                } else {
                    Some(split.parse()?)
                },
                provenance: field(5),
            });
        }
        DatasetManifest::new(entries, seed)
    }
}

/// Stratified split: per class, 10% test; of the remainder, 10% labeled;
/// the rest in three near-equal unlabeled subsets. Floor rounding, with
/// the leftover going to the last unlabeled subset.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.label.to_string()).or_default().push(i);
    }
    let mut entries = manifest.entries.clone();
    for (class, mut indices) in by_class {
        if indices.len() < 10 {
            return Err(Error::InsufficientClassCount(format!(
                "class {class} has {} samples, need >= 10",
                indices.len()
            )));
        }
        // deterministic order before shuffling
        indices.sort_by(|&a, &b| entries[a].id.cmp(&entries[b].id));
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ class_tag(&class));
        indices.shuffle(&mut rng);

        let n = indices.len();
        let n_test = n / 10;
        let rest = n - n_test;
        let n_labeled = rest / 10;
        let n_unlabeled = rest - n_labeled;
        let per_subset = n_unlabeled / 3;

        let mut cursor = indices.into_iter();
        for idx in cursor.by_ref().take(n_test) {
            entries[idx].split = Some(Split::Test);
        }
        for idx in cursor.by_ref().take(n_labeled) {
            entries[idx].split = Some(Split::Labeled);
        }
        for subset in 0..2 {
            for idx in cursor.by_ref().take(per_subset) {
                entries[idx].split = Split::unlabeled_subset(subset);
            }
        }
        for idx in cursor {
            entries[idx].split = Split::unlabeled_subset(2);
        }
    }
    DatasetManifest::new(entries, seed)
}

fn class_tag(class: &str) -> u64 {
    class.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n_normal: usize, n_tb: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n_normal {
            entries.push(ManifestEntry {
                id: format!("n{i:05}"),
                image_path: format!("images/n{i:05}.png"),
                mask_path: None,
                label: Label::Normal,
                split: None,
                provenance: "test".into(),
            });
        }
        for i in 0..n_tb {
            entries.push(ManifestEntry {
                id: format!("t{i:05}"),
                image_path: format!("images/t{i:05}.png"),
                mask_path: None,
                label: Label::Tb,
                split: None,
                provenance: "test".into(),
            });
        }
        DatasetManifest::new(entries, 0).unwrap()
    }

    #[test]
    fn thousand_balanced_samples_split_100_90_270x3() {
        let split = split_dataset(&manifest(500, 500), 7).unwrap();
        let count = |s: Split| split.of_split(s).len();
        assert_eq!(count(Split::Test), 100);
        assert_eq!(count(Split::Labeled), 90);
        assert_eq!(count(Split::Unlabeled1), 270);
        assert_eq!(count(Split::Unlabeled2), 270);
        assert_eq!(count(Split::Unlabeled3), 270);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let m = manifest(50, 50);
        let a = split_dataset(&m, 42).unwrap();
        let b = split_dataset(&m, 42).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.split, y.split);
        }
        let c = split_dataset(&m, 43).unwrap();
        assert!(a.entries.iter().zip(&c.entries).any(|(x, y)| x.split != y.split));
    }

    #[test]
    fn split_preserves_class_ratio() {
        let split = split_dataset(&manifest(500, 500), 3).unwrap();
        for s in Split::ALL {
            let of = split.of_split(s);
            let tb = of.iter().filter(|e| e.label == Label::Tb).count();
            let normal = of.len() - tb;
            assert!(
                (tb as i64 - normal as i64).abs() <= 1,
                "split {s}: {tb} tb vs {normal} normal"
            );
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let split = split_dataset(&manifest(37, 41), 5).unwrap();
        let total: usize = Split::ALL.iter().map(|&s| split.of_split(s).len()).sum();
        assert_eq!(total, 78);
        assert!(split.entries.iter().all(|e| e.split.is_some()));
    }

    #[test]
    fn small_class_is_rejected() {
        let err = split_dataset(&manifest(9, 50), 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientClassCount(_)));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut m = manifest(2, 0);
        m.entries[1].image_path = m.entries[0].image_path.clone();
        assert!(DatasetManifest::new(m.entries, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = split_dataset(&manifest(10, 12), 1).unwrap();
        let path = dir.path().join("manifest.csv");
        m.write_csv(&path).unwrap();
        let back = DatasetManifest::read_csv(&path, 1).unwrap();
        assert_eq!(m.entries, back.entries);
    }
}
