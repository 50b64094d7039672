//! Dataset ingestion, synthetic phantoms and triplet assembly.
//!
//! On-disk layout is one directory per split (`root/{train,val,test}/...`).
//! Files are named `<LABEL>-<patientid>-<index>.<ext>`; a `manifest.tsv` in
//! the split directory (`path<TAB>patient_id<TAB>label` per line, paths
//! relative to the split directory) overrides the filename grammar.

mod phantom;
mod testset;
mod triplet;

pub use phantom::{
    generate_synthetic_dataset, row_profile, synthesize_phantoms, Phantom, PhantomConfig,
};
pub use testset::{mask_dir, save_image_at, synthesize_test_set, write_synthetic_split, SyntheticCase};
pub use triplet::{assemble_triplet, assemble_triplet_with_roi, sample_positive, PositiveMode, Role, TripletSample};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::{Error, Image, Mask, Result};

pub const MIN_SIDE: usize = 32;
pub const MANIFEST_NAME: &str = "manifest.tsv";
const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "tif", "tiff", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
    Unknown,
}

impl Label {
    /// Maps a filename label token. `NORMAL` is normal, `UNKNOWN` is unknown,
    /// and every other class token (CNV, DME, DRUSEN, ABNORMAL, ...) is a pathology.
    pub fn from_token(token: &str) -> Option<Label> {
        if token.is_empty() || !token.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return None;
        }
        Some(match token.to_ascii_lowercase().as_str() {
            "normal" | "0" => Label::Normal,
            "unknown" => Label::Unknown,
            _ => Label::Abnormal,
        })
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::Normal => "NORMAL",
            Label::Abnormal => "ABNORMAL",
            Label::Unknown => "UNKNOWN",
        }
    }

    pub fn is_anomalous(self) -> Option<bool> {
        match self {
            Label::Normal => Some(false),
            Label::Abnormal => Some(true),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A single grayscale B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct BScanImage {
    pub pixels: Image,
    pub patient_id: String,
    pub label: Label,
    /// Stable identifier used in score files (file stem for loaded images).
    pub name: String,
    pub source_path: Option<PathBuf>,
}

impl BScanImage {
    pub fn new(pixels: Image, patient_id: impl Into<String>, label: Label) -> Result<Self> {
        let patient_id = patient_id.into();
        let (h, w) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(BScanImage {
            name: patient_id.clone(),
            pixels,
            patient_id,
            label,
            source_path: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedEntry {
    pub path: PathBuf,
    pub reason: String,
}

/// Images of one split with their per-patient grouping.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub entries: Vec<BScanImage>,
    pub split: Split,
    groups: BTreeMap<String, Vec<usize>>,
    pub skipped: Vec<SkippedEntry>,
}

impl DatasetIndex {
    /// Builds the index; a training split must hold only normal scans with a
    /// non-empty patient id.
    pub fn new(entries: Vec<BScanImage>, split: Split) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if split == Split::Train {
                if e.label != Label::Normal {
                    return Err(Error::InvalidInput(format!(
                        "training split contains non-normal image `{}`",
                        e.name
                    )));
                }
                if e.patient_id.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "training image `{}` has no patient id",
                        e.name
                    )));
                }
            }
            groups.entry(e.patient_id.clone()).or_default().push(i);
        }
        Ok(DatasetIndex {
            entries,
            split,
            groups,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.groups
    }

    pub fn patient_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, patient_id: &str) -> &[usize] {
        self.groups.get(patient_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Filename grammar `<LABEL>-<patientid>-<index>.<ext>`.
///
/// Returns `(patient_id, label)`. The patient id is everything between the
/// first and the last dash; the trailing index must be numeric.
pub fn parse_file_name(file_name: &str) -> Option<(String, Label)> {
    let stem = match file_name.rsplit_once('.') {
        Some((stem, _)) => stem,
        None => file_name,
    };
    let (label, rest) = stem.split_once('-')?;
    let (patient, index) = rest.rsplit_once('-')?;
    if patient.is_empty() || index.is_empty() || !index.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((patient.to_string(), Label::from_token(label)?))
}

fn parse_manifest_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" => Some(Label::Abnormal),
        other => Label::from_token(other),
    }
}

/// Loads `root/<split>` at `resolution x resolution`.
///
/// Abnormal images found in a training split are skipped and reported, so the
/// returned training index is normal-only.
pub fn load_dataset(root: &Path, split: Split, resolution: usize) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    load_folder(&root.join(split.dir_name()), split, resolution)
}

/// Loads a single split directory.
pub fn load_folder(dir: &Path, split: Split, resolution: usize) -> Result<DatasetIndex> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let manifest = dir.join(MANIFEST_NAME);
    let mut skipped = Vec::new();
    let mut candidates: Vec<(PathBuf, String, Label)> = Vec::new();

    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed = match fields.as_slice() {
                [path, pid, label] if !pid.is_empty() => {
                    parse_manifest_label(label).map(|l| (dir.join(path), pid.to_string(), l))
                }
                _ => None,
            };
            match parsed {
                Some(c) => candidates.push(c),
                None => skipped.push(SkippedEntry {
                    path: manifest.clone(),
                    reason: format!("line {}: expected path<TAB>patient_id<TAB>label", lineno + 1),
                }),
            }
        }
        candidates.sort_by(|a, b| a.0.cmp(&b.0));
    } else {
        let mut paths: Vec<PathBuf> = WalkDir::new(dir)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| has_image_extension(p))
            .collect();
        paths.sort();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match parse_file_name(name) {
                Some((pid, label)) => candidates.push((path, pid, label)),
                None => skipped.push(SkippedEntry {
                    path: path.clone(),
                    reason: "file name does not match <LABEL>-<patientid>-<index>.<ext>".into(),
                }),
            }
        }
    }

    let mut entries = Vec::with_capacity(candidates.len());
    for (path, pid, label) in candidates {
        if split == Split::Train && label != Label::Normal {
            skipped.push(SkippedEntry {
                path,
                reason: format!("{} image in the training split", label.token()),
            });
            continue;
        }
        let pixels = read_gray(&path, resolution)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&pid)
            .to_string();
        let mut img = BScanImage::new(pixels, pid, label)?.with_name(name);
        img.source_path = Some(path);
        entries.push(img);
    }
    for s in &skipped {
        log::warn!("skipping {}: {}", s.path.display(), s.reason);
    }
    let mut index = DatasetIndex::new(entries, split)?;
    index.skipped = skipped;
    Ok(index)
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads any supported raster as 8-bit grayscale, bilinearly resized to a square
/// of side `resolution`, scaled to `[0, 1]`.
pub fn read_gray(path: &Path, resolution: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut gray = img.to_luma8();
    let side = resolution as u32;
    if gray.width() != side || gray.height() != side {
        gray = image::imageops::resize(&gray, side, side, FilterType::Triangle);
    }
    Ok(gray_to_image(&gray))
}

/// Reads a mask image; any nonzero pixel is foreground. No resampling is done
/// unless `resolution` differs, in which case nearest-neighbour is used.
pub fn read_mask(path: &Path, resolution: Option<usize>) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut gray = img.to_luma8();
    if let Some(r) = resolution {
        let side = r as u32;
        if gray.width() != side || gray.height() != side {
            gray = image::imageops::resize(&gray, side, side, FilterType::Nearest);
        }
    }
    let (w, h) = gray.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0] > 0
    }))
}

pub fn gray_to_image(gray: &GrayImage) -> Image {
    let (w, h) = gray.dimensions();
    Image::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0] as f32 / 255.0
    })
}

pub fn image_to_gray(img: &Image) -> GrayImage {
    let (h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        let v = img[[r as usize, c as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    image_to_gray(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([if mask[[r as usize, c as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// File name under the Kermany grammar for the `k`-th image of a patient.
pub fn file_name_for(label: Label, patient_id: &str, k: usize) -> String {
    format!("{}-{}-{}.png", label.token(), patient_id, k)
}

/// Writes `images` to `root/<split>/` using the filename grammar. Returns the
/// written paths in input order.
pub fn write_split(root: &Path, split: Split, images: &[BScanImage]) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let k = per_patient.entry(img.patient_id.as_str()).or_insert(0);
        let path = dir.join(file_name_for(img.label, &img.patient_id, *k));
        *k += 1;
        save_image(&path, &img.pixels)?;
        out.push(path);
    }
    Ok(out)
}
