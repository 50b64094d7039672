use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BScanImage, DatasetIndex, Label};
use crate::perturb::{perturb, PerturbConfig, PerturbParams};
use crate::roi::{extract_roi, RoiConfig, RoiMask};
use crate::{Error, Image, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    #[default]
    InterPatient,
    IntraPatient,
}

impl PositiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositiveMode::InterPatient => "inter_patient",
            PositiveMode::IntraPatient => "intra_patient",
        }
    }
}

impl std::str::FromStr for PositiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_patient" | "inter" => Ok(PositiveMode::InterPatient),
            "intra_patient" | "intra" => Ok(PositiveMode::IntraPatient),
            other => Err(Error::Config(format!("unknown positive mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Anchor,
    Positive,
    Negative,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Anchor, Role::Positive, Role::Negative];

    /// Whose pixels a given input is reconstructed toward.
    pub fn target(self) -> Role {
        match self {
            Role::Negative => Role::Anchor,
            r => r,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletSample {
    pub anchor: BScanImage,
    pub positive: BScanImage,
    pub negative: BScanImage,
    /// ROI of the anchor; the negative differs from the anchor only inside it.
    pub roi: RoiMask,
    pub lesion_mask: Mask,
    pub params: PerturbParams,
}

impl TripletSample {
    pub fn image(&self, role: Role) -> &BScanImage {
        match role {
            Role::Anchor => &self.anchor,
            Role::Positive => &self.positive,
            Role::Negative => &self.negative,
        }
    }

    pub fn input(&self, role: Role) -> &Image {
        &self.image(role).pixels
    }

    pub fn target(&self, role: Role) -> &Image {
        &self.image(role.target()).pixels
    }
}

/// Draws a positive partner for `index.entries[anchor]`, uniformly over the
/// eligible entries: other patients in inter-patient mode, other scans of the
/// same patient in intra-patient mode.
pub fn sample_positive<R: Rng + ?Sized>(
    index: &DatasetIndex,
    anchor: usize,
    mode: PositiveMode,
    rng: &mut R,
) -> Result<usize> {
    let a = index
        .entries
        .get(anchor)
        .ok_or_else(|| Error::InvalidInput(format!("anchor index {anchor} out of range")))?;
    let pid = a.patient_id.as_str();
    let eligible = |i: usize| {
        let e = &index.entries[i];
        e.label == Label::Normal
            && match mode {
                PositiveMode::InterPatient => e.patient_id != pid,
                PositiveMode::IntraPatient => e.patient_id == pid && i != anchor,
            }
    };
    let count = (0..index.len()).filter(|&i| eligible(i)).count();
    if count == 0 {
        let hint = match mode {
            PositiveMode::InterPatient => "add scans from a second patient or use --positive-mode intra_patient",
            PositiveMode::IntraPatient => "add more scans for this patient or use --positive-mode inter_patient",
        };
        return Err(Error::NoEligiblePositive {
            patient_id: pid.to_string(),
            mode: mode.as_str(),
            hint,
        });
    }
    let k = rng.random_range(0..count);
    Ok((0..index.len()).filter(|&i| eligible(i)).nth(k).expect("k < count"))
}

/// Builds a triplet for `index.entries[anchor]`, extracting its ROI first.
pub fn assemble_triplet<R: Rng + ?Sized>(
    index: &DatasetIndex,
    anchor: usize,
    mode: PositiveMode,
    roi_cfg: &RoiConfig,
    perturb_cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<TripletSample> {
    let a = index
        .entries
        .get(anchor)
        .ok_or_else(|| Error::InvalidInput(format!("anchor index {anchor} out of range")))?;
    let roi = extract_roi(&a.pixels, roi_cfg)?;
    assemble_triplet_with_roi(index, anchor, roi, mode, perturb_cfg, rng)
}

/// Same as [`assemble_triplet`] with a precomputed anchor ROI.
pub fn assemble_triplet_with_roi<R: Rng + ?Sized>(
    index: &DatasetIndex,
    anchor: usize,
    roi: RoiMask,
    mode: PositiveMode,
    perturb_cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<TripletSample> {
    let a = index
        .entries
        .get(anchor)
        .ok_or_else(|| Error::InvalidInput(format!("anchor index {anchor} out of range")))?;
    if a.label != Label::Normal {
        return Err(Error::InvalidInput(format!("anchor `{}` is not a normal scan", a.name)));
    }
    let p = sample_positive(index, anchor, mode, rng)?;
    let pert = perturb(&a.pixels, &roi, perturb_cfg, rng)?;
    let negative = BScanImage {
        pixels: pert.image,
        patient_id: a.patient_id.clone(),
        label: Label::Abnormal,
        name: format!("{}.neg", a.name),
        source_path: None,
    };
    Ok(TripletSample {
        anchor: a.clone(),
        positive: index.entries[p].clone(),
        negative,
        roi,
        lesion_mask: pert.lesion_mask,
        params: pert.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_phantoms, PhantomConfig, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_index(pids: &[&str]) -> DatasetIndex {
        let entries = pids
            .iter()
            .enumerate()
            .map(|(i, p)| {
                BScanImage::new(Image::from_elem((32, 32), i as f32 / 10.0), *p, Label::Normal)
                    .unwrap()
                    .with_name(format!("{p}-{i}"))
            })
            .collect();
        DatasetIndex::new(entries, Split::Train).unwrap()
    }

    #[test]
    fn inter_patient_never_returns_same_patient() {
        let idx = flat_index(&["a", "a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = sample_positive(&idx, 0, PositiveMode::InterPatient, &mut rng).unwrap();
            assert_eq!(idx.entries[p].patient_id, "b");
        }
    }

    #[test]
    fn single_image_patient_has_no_intra_positive() {
        let idx = flat_index(&["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_positive(&idx, 0, PositiveMode::IntraPatient, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NoEligiblePositive { .. }));
        let single = flat_index(&["a"]);
        assert!(sample_positive(&single, 0, PositiveMode::InterPatient, &mut rng).is_err());
    }

    #[test]
    fn intra_patient_draws_are_uniform() {
        let idx = flat_index(&["a", "a", "a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ones = (0..1000)
            .map(|_| sample_positive(&idx, 0, PositiveMode::IntraPatient, &mut rng).unwrap())
            .inspect(|&p| assert_ne!(p, 0))
            .filter(|&p| p == 1)
            .count();
        assert!((450..=550).contains(&ones), "{ones}");
    }

    #[test]
    fn negative_targets_the_anchor() {
        assert_eq!(Role::Negative.target(), Role::Anchor);
        assert_eq!(Role::Positive.target(), Role::Positive);
        assert_eq!(Role::Anchor.target(), Role::Anchor);
    }

    #[test]
    fn triplet_invariants_over_seeds() {
        let phantoms = synthesize_phantoms(&PhantomConfig::default(), 4, 3).unwrap();
        let idx = DatasetIndex::new(phantoms.into_iter().map(|p| p.image).collect(), Split::Train).unwrap();
        let roi_cfg = RoiConfig::default();
        let pcfg = PerturbConfig::default();
        for seed in 0..100u64 {
            let anchor = (seed % 4) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = assemble_triplet(&idx, anchor, PositiveMode::InterPatient, &roi_cfg, &pcfg, &mut rng).unwrap();
            assert_ne!(t.positive.patient_id, t.anchor.patient_id);
            assert!(std::ptr::eq(t.target(Role::Negative), &t.anchor.pixels));
            assert!(std::ptr::eq(t.target(Role::Positive), &t.positive.pixels));
            for ((r, c), &m) in t.roi.mask.indexed_iter() {
                if !m {
                    assert_eq!(t.negative.pixels[[r, c]].to_bits(), t.anchor.pixels[[r, c]].to_bits());
                }
            }
            assert_ne!(t.negative.pixels, t.anchor.pixels);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let again = assemble_triplet(&idx, anchor, PositiveMode::InterPatient, &roi_cfg, &pcfg, &mut rng).unwrap();
            assert_eq!(again.negative.pixels, t.negative.pixels);
            assert_eq!(again.positive.name, t.positive.name);
        }
    }
}
