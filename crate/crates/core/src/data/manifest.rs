//! Dataset manifests: train/test lists of image, label and optional FOV mask paths.
//!
//! A dataset directory holds `images/`, `labels/` and optionally `masks/`,
//! with files paired by their stem (`21_training.ppm` ↔ `21_training.pgm`).
//! DRIVE and CHASE_DB1 split the sorted stems in half (20/20 and 14/14 for
//! the full datasets). Any other dataset, STARE included, needs a
//! `manifest.json` with explicit lists.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_EXTENSIONS: &[&str] = &["pgm", "ppm", "pnm", "png"];

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    /// Sample identifier: the image file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_name: String,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Default split policy for a named dataset.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SplitRule {
    Halves,
    Explicit,
}

fn split_rule(dataset_name: &str) -> SplitRule {
    let key: String = dataset_name
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .collect::<String>()
        .to_ascii_lowercase();
    match key.as_str() {
        "drive" | "chasedb1" | "chase" => SplitRule::Halves,
        _ => SplitRule::Explicit,
    }
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "ambiguous stem {stem}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

impl Manifest {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text)
            .map_err(|e| Error::Dataset(format!("manifest json: {e}")))?;
        for e in m.train.iter_mut().chain(m.test.iter_mut()) {
            for p in [Some(&mut e.image), Some(&mut e.label), e.mask.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let train: HashSet<&Path> = self.train.iter().map(|e| e.image.as_path()).collect();
        if let Some(dup) = self.test.iter().find(|e| train.contains(e.image.as_path())) {
            return Err(Error::Dataset(format!(
                "{} appears in both train and test splits",
                dup.image.display()
            )));
        }
        Ok(())
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        serde_json::to_string_pretty(&value).expect("json value serializes")
    }

    /// SHA-256 over the canonical (compact, key-sorted) JSON form.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Builds the manifest for a dataset directory. An explicit
/// `manifest.json` in `root` takes precedence over the default split.
pub fn build_manifest(root: &Path, dataset_name: &str) -> Result<Manifest> {
    let explicit = root.join(MANIFEST_FILE);
    if explicit.is_file() {
        return Manifest::load(&explicit);
    }
    let images = list_stems(&root.join("images"))?;
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            root.join("images").display()
        )));
    }
    let labels = list_stems(&root.join("labels"))?;
    let masks_dir = root.join("masks");
    let masks = if masks_dir.is_dir() {
        list_stems(&masks_dir)?
    } else {
        BTreeMap::new()
    };

    let mut entries = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let label = labels.get(&stem).ok_or_else(|| {
            Error::Dataset(format!(
                "missing label file {}/{stem}.{{pgm,ppm,pnm,png}} for image {}",
                root.join("labels").display(),
                image.display()
            ))
        })?;
        entries.push(ManifestEntry {
            image,
            label: label.clone(),
            mask: masks.get(&stem).cloned(),
        });
    }

    match split_rule(dataset_name) {
        SplitRule::Halves => {
            let test = entries.split_off(entries.len() / 2);
            Ok(Manifest {
                dataset_name: dataset_name.to_string(),
                train: entries,
                test,
            })
        }
        SplitRule::Explicit => Err(Error::Dataset(format!(
            "dataset {dataset_name} has no default train/test split; provide {}",
            explicit.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_dataset(root: &Path, stems: &[String], with_masks: bool) {
        for dir in ["images", "labels", "masks"] {
            fs::create_dir_all(root.join(dir)).unwrap();
        }
        for s in stems {
            fs::write(root.join("images").join(format!("{s}.ppm")), b"").unwrap();
            fs::write(root.join("labels").join(format!("{s}.pgm")), b"").unwrap();
            if with_masks {
                fs::write(root.join("masks").join(format!("{s}.pgm")), b"").unwrap();
            }
        }
    }

    fn stems(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{i:02}")).collect()
    }

    #[test]
    fn drive_and_chase_default_splits() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), &stems(40), true);
        let m = build_manifest(dir.path(), "DRIVE").unwrap();
        assert_eq!((m.train.len(), m.test.len()), (20, 20));
        assert_eq!(m.train[0].id(), "01");
        assert_eq!(m.test[0].id(), "21");
        assert!(m.train[0].mask.is_some());

        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), &stems(28), false);
        let m = build_manifest(dir.path(), "CHASE_DB1").unwrap();
        assert_eq!((m.train.len(), m.test.len()), (14, 14));
        assert!(m.test[0].mask.is_none());
    }

    #[test]
    fn stare_requires_explicit_split() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), &stems(20), false);
        let err = build_manifest(dir.path(), "STARE").unwrap_err().to_string();
        assert!(err.contains("manifest.json"), "{err}");

        let m = Manifest {
            dataset_name: "STARE".into(),
            train: vec![ManifestEntry {
                image: "images/01.ppm".into(),
                label: "labels/01.pgm".into(),
                mask: None,
            }],
            test: vec![ManifestEntry {
                image: "images/02.ppm".into(),
                label: "labels/02.pgm".into(),
                mask: None,
            }],
        };
        fs::write(dir.path().join(MANIFEST_FILE), m.to_json()).unwrap();
        let loaded = build_manifest(dir.path(), "STARE").unwrap();
        assert_eq!(loaded.train[0].image, dir.path().join("images/01.ppm"));
    }

    #[test]
    fn missing_label_and_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), &stems(4), false);
        fs::remove_file(dir.path().join("labels/03.pgm")).unwrap();
        let err = build_manifest(dir.path(), "DRIVE").unwrap_err().to_string();
        assert!(err.contains("03.ppm") && err.contains("labels"), "{err}");

        let empty = tempfile::tempdir().unwrap();
        touch_dataset(empty.path(), &[], false);
        assert!(build_manifest(empty.path(), "DRIVE").is_err());
    }

    #[test]
    fn deterministic_and_hash_stable() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), &stems(6), false);
        let a = build_manifest(dir.path(), "drive").unwrap();
        let b = build_manifest(dir.path(), "drive").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let text = r#"{"dataset_name":"x","train":[{"image":"a.ppm","label":"a.pgm"}],
                       "test":[{"image":"a.ppm","label":"a.pgm"}]}"#;
        assert!(Manifest::from_json(text, Path::new("/")).is_err());
        let unknown = r#"{"dataset_name":"x","train":[],"test":[],"extra":1}"#;
        assert!(Manifest::from_json(unknown, Path::new("/")).is_err());
    }
}
