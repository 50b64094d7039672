//! Labeled synthetic evaluation sets: held-out normal phantoms plus perturbed
//! phantoms that carry their lesion masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{save_image, save_mask, synthesize_phantoms, write_split, BScanImage, Label, PhantomConfig, Split};
use crate::exec::Exec;
use crate::perturb::{perturb, PerturbConfig, PerturbMode};
use crate::roi::{extract_roi, RoiConfig, RoiMask};
use crate::seed::rng_for;
use crate::{Error, Mask, Result};

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub image: BScanImage,
    /// Lesion mask for perturbed cases, `None` for normals.
    pub lesion: Option<Mask>,
    pub mode: Option<PerturbMode>,
}

/// `n_normal` normals followed by `n_abnormal` perturbed phantoms, all from
/// distinct synthetic patients. Perturbations are confined to the extracted
/// ROI, or to the generator's band mask when extraction fails.
pub fn synthesize_test_set(
    phantom: &PhantomConfig,
    roi: &RoiConfig,
    perturbation: &PerturbConfig,
    n_normal: usize,
    n_abnormal: usize,
    seed: u64,
) -> Result<Vec<SyntheticCase>> {
    let phantoms = synthesize_phantoms(phantom, n_normal + n_abnormal, seed)?;
    let cases = Exec::default().map_range(phantoms.len(), |i| {
        let p = &phantoms[i];
        if i < n_normal {
            return Ok(SyntheticCase {
                image: p.image.clone(),
                lesion: None,
                mode: None,
            });
        }
        let x = &p.image.pixels;
        let mask = extract_roi(x, roi).unwrap_or_else(|_| RoiMask::new(p.band_mask.clone()));
        let mut rng = rng_for(seed, "test-perturb", &[i as u64]);
        let out = perturb(x, &mask, perturbation, &mut rng)?;
        let pid = p.image.patient_id.clone();
        let image = BScanImage::new(out.image, pid.clone(), Label::Abnormal)?
            .with_name(format!("{}-{}-0", Label::Abnormal.token(), pid));
        Ok(SyntheticCase {
            image,
            lesion: Some(out.lesion_mask),
            mode: Some(out.params.mode),
        })
    });
    cases.into_iter().collect()
}

/// Directory holding the lesion masks of `split` under `root`.
pub fn mask_dir(root: &Path, split: Split) -> PathBuf {
    root.join("masks").join(split.dir_name())
}

/// Flat `key: value` rendering of a serializable struct.
pub(crate) fn flat_text<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = String::new();
    if let Some(m) = v.as_object() {
        for (k, v) in m {
            let text = match v {
                serde_json::Value::Array(a) => a.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            writeln!(s, "{k}: {text}").expect("string write");
        }
    }
    s
}

/// Writes `cases` to `root/<split>/` and their lesion masks to
/// `root/masks/<split>/<name>.png`, plus `root/generation-<split>.txt`
/// recording the phantom config, counts and seed.
pub fn write_synthetic_split(
    root: &Path,
    split: Split,
    cases: &[SyntheticCase],
    phantom: &PhantomConfig,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let images: Vec<BScanImage> = cases.iter().map(|c| c.image.clone()).collect();
    let paths = write_split(root, split, &images)?;
    let abnormal = cases.iter().filter(|c| c.lesion.is_some()).count();
    if abnormal > 0 {
        let dir = mask_dir(root, split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (case, path) in cases.iter().zip(&paths) {
            if let Some(m) = &case.lesion {
                save_mask(&dir.join(path.file_name().expect("file name")), m)?;
            }
        }
    }
    let mut text = format!(
        "seed: {seed}\nsplit: {split}\nnormal: {}\nabnormal: {abnormal}\n",
        cases.len() - abnormal
    );
    text.push_str(&flat_text(phantom));
    let gen = root.join(format!("generation-{split}.txt"));
    fs::write(&gen, text).map_err(|e| Error::io(&gen, e))?;
    Ok(paths)
}

/// Saves a single image, creating parent directories.
pub fn save_image_at(path: &Path, img: &crate::Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_image(path, img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, read_mask};

    #[test]
    fn test_set_is_labeled_and_round_trips() {
        let pc = PhantomConfig::default();
        let cases = synthesize_test_set(&pc, &RoiConfig::default(), &PerturbConfig::default(), 3, 4, 11).unwrap();
        assert_eq!(cases.len(), 7);
        for c in &cases[..3] {
            assert!(c.lesion.is_none() && c.image.label == Label::Normal);
        }
        for c in &cases[3..] {
            let m = c.lesion.as_ref().unwrap();
            assert!(m.iter().any(|&b| b));
            assert_eq!(c.image.label, Label::Abnormal);
        }
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic_split(dir.path(), Split::Test, &cases, &pc, 11).unwrap();
        let idx = load_dataset(dir.path(), Split::Test, 64).unwrap();
        assert_eq!(idx.len(), 7);
        assert_eq!(idx.entries.iter().filter(|e| e.label == Label::Abnormal).count(), 4);
        let m = read_mask(&mask_dir(dir.path(), Split::Test).join(paths[5].file_name().unwrap()), None).unwrap();
        assert_eq!(&m, cases[5].lesion.as_ref().unwrap());
        let gen = fs::read_to_string(dir.path().join("generation-test.txt")).unwrap();
        assert!(gen.contains("seed: 11") && gen.contains("speckle_sigma: 0.05"));
    }
}
