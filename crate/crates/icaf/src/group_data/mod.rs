//! The many-to-one group data model: several pixel-aligned views of one
//! physical sample share a single ground-truth mask. This module defines the
//! in-memory types, the on-disk dataset layout (`manifest.json` + one
//! directory of PNGs per group), labeled/unlabeled splits and a procedural
//! synthetic generator whose defect boundaries are only partially visible
//! per view — the property that makes cross-view fusion measurable.

mod synth;

pub use synth::generate_synthetic_dataset;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// One sample: K pixel-aligned views plus (for labeled groups) one shared
/// ground-truth mask of class indices.
#[derive(Clone, Debug)]
pub struct ViewGroup {
    pub group_id: String,
    /// K images, each (3, H, W), intensities in [0, 1].
    pub views: Vec<Array3<f32>>,
    /// (H, W) class indices, present iff the group is labeled.
    pub gt_mask: Option<Array2<u8>>,
    pub labeled: bool,
}

impl ViewGroup {
    pub fn k(&self) -> usize {
        self.views.len()
    }

    /// (H, W) of the views.
    pub fn size(&self) -> (usize, usize) {
        let d = self.views[0].dim();
        (d.1, d.2)
    }

    /// Drop the mask for use as an unlabeled training group.
    pub fn into_unlabeled(mut self) -> ViewGroup {
        self.gt_mask = None;
        self.labeled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::validation(format!(
                "group {}: no views",
                self.group_id
            )));
        }
        let d0 = self.views[0].dim();
        for (i, v) in self.views.iter().enumerate() {
            if v.dim() != d0 {
                return Err(Error::Format(format!(
                    "group {}: view {i} size {:?} != view 0 size {:?}",
                    self.group_id,
                    v.dim(),
                    d0
                )));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
                return Err(Error::Format(format!(
                    "group {}: view {i} has intensities outside [0,1]",
                    self.group_id
                )));
            }
        }
        if let Some(mask) = &self.gt_mask {
            if mask.dim() != (d0.1, d0.2) {
                return Err(Error::Format(format!(
                    "group {}: mask size {:?} != view size ({}, {})",
                    self.group_id,
                    mask.dim(),
                    d0.1,
                    d0.2
                )));
            }
        }
        if self.labeled && self.gt_mask.is_none() {
            return Err(Error::validation(format!(
                "group {}: labeled but no mask",
                self.group_id
            )));
        }
        Ok(())
    }
}

/// Parameters of the synthetic multi-view generator. Each group is one
/// latent scene (a crystal polygon with defect blobs) rendered once per
/// illumination angle; a defect-boundary pixel shows full edge contrast only
/// when its outward normal roughly faces the light.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub n_groups: usize,
    pub views_per_group: usize,
    /// (H, W)
    pub image_size: (usize, usize),
    pub n_classes: usize,
    /// One angle per view, degrees.
    pub illumination_angles: Vec<f64>,
    /// Angular window (degrees) within which a boundary pixel is lit.
    pub boundary_visibility_width: f64,
    /// Edge contrast of unlit boundary pixels (and the defect interior).
    pub defect_interior_contrast: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Defaults mirror the target acquisition setup: 12 views at 30° steps,
    /// three classes, 90° visibility window.
    pub fn new(n_groups: usize, image_size: (usize, usize), seed: u64) -> Self {
        GeneratorSpec {
            n_groups,
            views_per_group: 12,
            image_size,
            n_classes: 3,
            illumination_angles: (0..12).map(|k| k as f64 * 30.0).collect(),
            boundary_visibility_width: 90.0,
            defect_interior_contrast: 0.05,
            noise_std: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views_per_group != self.illumination_angles.len() {
            return Err(Error::validation(format!(
                "views_per_group {} != illumination angle count {}",
                self.views_per_group,
                self.illumination_angles.len()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::validation("n_classes must be at least 2"));
        }
        if self.image_size.0 < 32 || self.image_size.1 < 32 {
            return Err(Error::validation("image size must be at least 32x32"));
        }
        for (name, v) in [
            ("defect_interior_contrast", self.defect_interior_contrast),
            ("noise_std", self.noise_std),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} {v} outside [0,1]")));
            }
        }
        if !(1.0..=360.0).contains(&self.boundary_visibility_width) {
            return Err(Error::validation(
                "boundary_visibility_width must be in [1, 360] degrees",
            ));
        }
        if self.views_per_group > 0 {
            // Full boundary coverage needs the union of visibility windows to
            // close the circle: no angular gap may exceed the window width.
            let mut a: Vec<f64> = self
                .illumination_angles
                .iter()
                .map(|x| x.rem_euclid(360.0))
                .collect();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let mut max_gap: f64 = 0.0;
            for i in 0..a.len() {
                let next = if i + 1 == a.len() {
                    a[0] + 360.0
                } else {
                    a[i + 1]
                };
                max_gap = max_gap.max(next - a[i]);
            }
            if max_gap > self.boundary_visibility_width {
                return Err(Error::validation(format!(
                    "illumination angles leave a {max_gap:.1}° gap wider than \
                     the {:.1}° visibility window; some boundary orientations \
                     would never be lit",
                    self.boundary_visibility_width
                )));
            }
        }
        Ok(())
    }

    /// Content digest of the spec (hex sha256 of its canonical JSON).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// One group's files, relative to the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: String,
    pub labeled: bool,
    pub views: Vec<String>,
    pub mask: Option<String>,
}

/// The serialized body of `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub format_version: u32,
    pub generator_digest: String,
    pub generator_spec: GeneratorSpec,
    pub groups: Vec<GroupEntry>,
}

/// A dataset root plus its parsed manifest.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub file: ManifestFile,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.clone(),
                source: e,
            })?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported dataset format version {}",
                path.display(),
                file.format_version
            )));
        }
        let m = DatasetManifest {
            root: root.to_path_buf(),
            file,
        };
        m.check()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self.file).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Verify unique ids and that every listed file exists.
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for g in &self.file.groups {
            if !seen.insert(&g.id) {
                return Err(Error::Format(format!("duplicate group id {}", g.id)));
            }
            for rel in g.views.iter().chain(g.mask.iter()) {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::Format(format!(
                        "manifest lists missing file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.file.groups.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.file.groups.iter().map(|g| g.id.as_str())
    }

    pub fn entry(&self, group_id: &str) -> Result<&GroupEntry> {
        self.file
            .groups
            .iter()
            .find(|g| g.id == group_id)
            .ok_or_else(|| Error::validation(format!("unknown group id {group_id}")))
    }

    pub fn n_classes(&self) -> usize {
        self.file.generator_spec.n_classes
    }

    /// Content digest over the manifest body and every data file, in
    /// manifest order.
    pub fn dataset_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.file).expect("manifest serializes"));
        for g in &self.file.groups {
            for rel in g.views.iter().chain(g.mask.iter()) {
                let p = self.root.join(rel);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                h.update(&bytes);
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Image I/O
// ---------------------------------------------------------------------------

/// PNG round-trip helpers; images are (3, H, W) in [0,1], masks (H, W) bytes.
pub mod io {
    use super::*;

    pub fn save_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
        let (c, h, w) = img.dim();
        assert_eq!(c, 3, "save_rgb expects (3, H, W)");
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    buf.push((img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let im: image::RgbImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized");
        im.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
        let im = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let rgb = im.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Array3::<f32>::zeros((3, h, w));
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
            }
        }
        Ok(out)
    }

    pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
        let (h, w) = mask.dim();
        let buf: Vec<u8> = mask.iter().copied().collect();
        let im: image::GrayImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized");
        im.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_mask(path: &Path, n_classes: usize) -> Result<Array2<u8>> {
        let im = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let image::DynamicImage::ImageLuma8(gray) = im else {
            return Err(Error::Format(format!(
                "{}: mask must be an 8-bit grayscale PNG",
                path.display()
            )));
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut out = Array2::<u8>::zeros((h, w));
        for (x, y, p) in gray.enumerate_pixels() {
            let v = p.0[0];
            if (v as usize) >= n_classes {
                return Err(Error::Format(format!(
                    "{}: mask value {v} exceeds class count {n_classes}",
                    path.display()
                )));
            }
            out[[y as usize, x as usize]] = v;
        }
        Ok(out)
    }
}

/// Load one group's views (and mask, when listed) from disk.
pub fn load_group(manifest: &DatasetManifest, group_id: &str) -> Result<ViewGroup> {
    let entry = manifest.entry(group_id)?;
    let views = entry
        .views
        .iter()
        .map(|rel| io::load_rgb(&manifest.root.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    let gt_mask = entry
        .mask
        .as_ref()
        .map(|rel| io::load_mask(&manifest.root.join(rel), manifest.n_classes()))
        .transpose()?;
    let group = ViewGroup {
        group_id: group_id.to_string(),
        labeled: gt_mask.is_some(),
        views,
        gt_mask,
    };
    group.validate()?;
    Ok(group)
}

/// Deterministically split group ids into labeled and unlabeled sets.
/// The labeled count is round(ratio × total); both lists keep manifest order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    labeled_ratio: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::validation(format!(
            "labeled_ratio {labeled_ratio} outside (0, 1]"
        )));
    }
    let total = manifest.n_groups();
    let n_labeled = (labeled_ratio * total as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::validation(format!(
            "labeled_ratio {labeled_ratio} of {total} groups yields no labeled groups"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labeled_idx: Vec<usize> = order[..n_labeled].to_vec();
    let mut unlabeled_idx: Vec<usize> = order[n_labeled..].to_vec();
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    let id_of = |i: &usize| manifest.file.groups[*i].id.clone();
    Ok((
        labeled_idx.iter().map(id_of).collect(),
        unlabeled_idx.iter().map(id_of).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/nonexistent"),
            file: ManifestFile {
                format_version: FORMAT_VERSION,
                generator_digest: "x".into(),
                generator_spec: GeneratorSpec::new(n, (64, 64), 0),
                groups: (0..n)
                    .map(|i| GroupEntry {
                        id: format!("group_{i:04}"),
                        labeled: true,
                        views: vec![],
                        mask: None,
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn split_matches_published_partitions() {
        let m = fake_manifest(410);
        let (l, u) = split_dataset(&m, 0.005, 1).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(u.len(), 408);
        let (l, _) = split_dataset(&m, 0.5, 1).unwrap();
        assert_eq!(l.len(), 205);
        let (l, u) = split_dataset(&m, 1.0, 1).unwrap();
        assert_eq!(l.len(), 410);
        assert!(u.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let m = fake_manifest(50);
        let (l1, u1) = split_dataset(&m, 0.2, 7).unwrap();
        let (l2, u2) = split_dataset(&m, 0.2, 7).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(u1, u2);
        let (l3, _) = split_dataset(&m, 0.2, 8).unwrap();
        assert_ne!(l1, l3, "different seeds should draw different splits");
        let mut all: Vec<&String> = l1.iter().chain(u1.iter()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn split_rejects_degenerate_ratios() {
        let m = fake_manifest(10);
        assert!(split_dataset(&m, 0.0, 1).is_err());
        assert!(split_dataset(&m, 0.01, 1).is_err(), "rounds to zero labeled");
        assert!(split_dataset(&m, 1.5, 1).is_err());
    }

    #[test]
    fn spec_validation_catches_angle_gaps() {
        let mut spec = GeneratorSpec::new(1, (64, 64), 0);
        spec.validate().unwrap();
        // Two opposed views with a 90° window leave 180° gaps.
        spec.views_per_group = 2;
        spec.illumination_angles = vec![0.0, 180.0];
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("gap"));
        // Four views at 90° exactly close the circle.
        spec.views_per_group = 4;
        spec.illumination_angles = vec![0.0, 90.0, 180.0, 270.0];
        spec.validate().unwrap();
    }

    #[test]
    fn spec_validation_catches_mismatched_counts() {
        let mut spec = GeneratorSpec::new(1, (64, 64), 0);
        spec.views_per_group = 11;
        assert!(spec.validate().is_err());
        let mut spec = GeneratorSpec::new(1, (64, 64), 0);
        spec.n_classes = 1;
        assert!(spec.validate().is_err());
        let mut spec = GeneratorSpec::new(1, (64, 64), 0);
        spec.noise_std = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_digest_tracks_content() {
        let a = GeneratorSpec::new(2, (64, 64), 0);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn view_group_validation() {
        let good = ViewGroup {
            group_id: "g".into(),
            views: vec![Array3::zeros((3, 4, 4)); 2],
            gt_mask: Some(Array2::zeros((4, 4))),
            labeled: true,
        };
        good.validate().unwrap();
        let stripped = good.clone().into_unlabeled();
        assert!(stripped.gt_mask.is_none());
        stripped.validate().unwrap();

        let mut bad = good.clone();
        bad.views[1] = Array3::zeros((3, 4, 5));
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.gt_mask = Some(Array2::zeros((3, 4)));
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.views[0][[0, 0, 0]] = 1.5;
        assert!(bad.validate().is_err());
    }
}
