//! Triplet training loop with asymmetric reconstruction targets.
//!
//! Every step draws a batch of normal anchors. Each anchor is expanded into a
//! triplet (anchor, positive from another patient, perturbed negative) and
//! three encode-quantize-decode passes are run: anchor toward itself,
//! positive toward itself and negative toward the anchor. Per-anchor
//! gradients are computed independently (in parallel when enabled) and
//! reduced in batch order.

mod checkpoint;
mod step;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_VERSION};

use crate::data::{DatasetIndex, Label, PositiveMode, Role};
use crate::exec::Exec;
use crate::loss::{LossParts, LossWeights, RandomConvPerceptual};
use crate::model::{ModelConfig, ModelParams, Vqgan};
use crate::nn::Adam;
use crate::perturb::PerturbConfig;
use crate::roi::{extract_rois, RoiConfig, RoiMask};
use crate::seed::rng_for;
use crate::{Error, Result};

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Plain L1 + perceptual reconstruction with the VQ terms.
    ReconOnly,
    ReconTriplet,
    /// ROI-weighted reconstruction, triplet and adversarial terms.
    #[default]
    Full,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::ReconOnly => "recon_only",
            Ablation::ReconTriplet => "recon_triplet",
            Ablation::Full => "full",
        }
    }

    pub fn uses_triplet(self) -> bool {
        self != Ablation::ReconOnly
    }

    pub fn uses_roi(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon_only" => Ok(Ablation::ReconOnly),
            "recon_triplet" => Ok(Ablation::ReconTriplet),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected recon_only, recon_triplet or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    pub positive_mode: PositiveMode,
    pub ablation: Ablation,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Learning-rate multiplier for the codebook entries.
    pub codebook_lr_scale: f64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Replace codebook entries unused over an epoch with fresh encoder outputs.
    pub reseed_dead_codes: bool,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub roi: RoiConfig,
    pub perturb: PerturbConfig,
}

impl TrainConfig {
    /// 64x64 CPU preset.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let r = model.input_resolution;
        TrainConfig {
            epochs: 10,
            learning_rate: 2e-3,
            batch_size: 8,
            warmup_steps: 200,
            seed: 0,
            positive_mode: PositiveMode::InterPatient,
            ablation: Ablation::Full,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            codebook_lr_scale: 10.0,
            checkpoint_every: 0,
            reseed_dead_codes: true,
            weights: LossWeights::default(),
            model,
            roi: RoiConfig::for_resolution(r),
            perturb: PerturbConfig::for_resolution(r),
        }
    }

    /// Published schedule at 256x256.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        let r = model.input_resolution;
        TrainConfig {
            epochs: 28,
            learning_rate: 1e-6,
            batch_size: 16,
            warmup_steps: 10_000,
            checkpoint_every: 5_000,
            model,
            roi: RoiConfig::for_resolution(r),
            perturb: PerturbConfig::for_resolution(r),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.codebook_lr_scale > 0.0 && self.codebook_lr_scale.is_finite()) {
            return Err(Error::Config(format!(
                "codebook_lr_scale must be positive, got {}",
                self.codebook_lr_scale
            )));
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.roi.validate()?;
        self.perturb.validate()?;
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit. Random streams are pure
/// functions of `(config.seed, step)`, so the step counter is the RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ModelParams,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    /// Code assignments since the last dead-code reseed.
    pub usage: Vec<u64>,
    pub history: Vec<StepLog>,
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub parts: LossParts,
    pub gan_d: f64,
    pub total: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tl_roi\tl_perc\tl_vq\tl_triplet\tl_gan_g\tl_gan_d\ttotal";

    pub fn to_tsv(&self) -> String {
        let p = &self.parts;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, p.pixel, p.perc, p.vq, p.triplet, p.gan, self.gan_d, self.total
        )
    }
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.parts;
        write!(
            f,
            "step {} pixel {:.6} perc {:.6} vq {:.6} triplet {:.6} gan_g {:.6} gan_d {:.6} total {:.6}",
            self.step, p.pixel, p.perc, p.vq, p.triplet, p.gan, self.gan_d, self.total
        )
    }
}

/// Which image fed a pass and which image it was reconstructed toward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAudit {
    pub role: Role,
    pub anchor: String,
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub log: StepLog,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
    pub gan_active: bool,
    pub audit: Vec<TargetAudit>,
}

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn param_hash(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Trainer {
    config: TrainConfig,
    model: Vqgan,
    index: DatasetIndex,
    rois: Vec<Option<RoiMask>>,
    by_name: HashMap<String, usize>,
    perceptual: RandomConvPerceptual,
    exec: Exec,
}

/// Seed of the frozen perceptual network; shared by every run so losses are
/// comparable across seeds.
pub const PERCEPTUAL_SEED: u64 = 0x5eed;

impl Trainer {
    /// Keeps the normal scans of `index` and extracts their ROIs once.
    pub fn new(index: &DatasetIndex, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let model = Vqgan::new(config.model.clone())?;
        let r = config.model.input_resolution;
        let mut entries = Vec::with_capacity(index.len());
        for e in &index.entries {
            if e.label != Label::Normal {
                warn!("skipping non-normal training scan `{}`", e.name);
                continue;
            }
            if e.dim() != (r, r) {
                return Err(Error::shape(format!("{r}x{r} image"), format!("{:?} for `{}`", e.dim(), e.name)));
            }
            entries.push(e.clone());
        }
        if entries.len() < 2 {
            return Err(Error::InvalidInput("training needs at least two normal scans".into()));
        }
        let index = DatasetIndex::new(entries, index.split)?;
        let images: Vec<_> = index.entries.iter().map(|e| &e.pixels).collect();
        let rois: Vec<Option<RoiMask>> = extract_rois(&images, &config.roi, exec)
            .into_iter()
            .zip(&index.entries)
            .map(|(r, e)| match r {
                Ok(m) => Some(m),
                Err(err) => {
                    warn!("no ROI for `{}`: {err}; it will not be used as an anchor", e.name);
                    None
                }
            })
            .collect();
        if rois.iter().all(Option::is_none) {
            return Err(Error::RoiFailed("no training scan produced a usable ROI".into()));
        }
        let by_name = index.entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        info!(
            "trainer: {} scans, {} with ROI, {} patients",
            index.len(),
            rois.iter().filter(|r| r.is_some()).count(),
            index.patient_count()
        );
        Ok(Trainer {
            config,
            model,
            index,
            rois,
            by_name,
            perceptual: RandomConvPerceptual::new(PERCEPTUAL_SEED),
            exec,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Vqgan {
        &self.model
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn roi(&self, i: usize) -> Option<&RoiMask> {
        self.rois.get(i).and_then(Option::as_ref)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.index.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// Fresh state: seeded initialization, then codebook entries set to
    /// encoder outputs of randomly chosen training scans.
    pub fn init_state(&self) -> TrainState {
        let cfg = &self.config;
        let mut params = self.model.init_params(cfg.seed);
        let mut rng = rng_for(cfg.seed, "codebook-init", &[]);
        let candidates = self.latent_candidates(&params, &mut rng);
        let m = cfg.model.codebook_size;
        let d = cfg.model.codebook_dim;
        let start = self.model.codebook_range().start;
        for k in 0..m {
            let c = &candidates[rng.random_range(0..candidates.len())];
            params.generator[start + k * d..start + (k + 1) * d].copy_from_slice(c);
        }
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let lr = cfg.learning_rate as f32;
        TrainState {
            config: cfg.clone(),
            step: 0,
            opt_generator: Adam::new(params.generator.len(), lr, b1, b2),
            opt_discriminator: Adam::new(params.discriminator.len(), lr, b1, b2),
            params,
            usage: vec![0; m],
            history: Vec::new(),
        }
    }

    /// Latent vectors of up to 16 random training scans.
    fn latent_candidates<R: Rng + ?Sized>(&self, params: &ModelParams, rng: &mut R) -> Vec<Vec<f32>> {
        let mut order: Vec<usize> = (0..self.index.len()).collect();
        order.shuffle(rng);
        order.truncate(16);
        let grids = self
            .exec
            .map(&order, |&i| self.model.encode(&self.index.entries[i].pixels, params).expect("checked resolution"));
        let mut out = Vec::new();
        for g in grids {
            let (h, w, _) = g.values.dim();
            for i in 0..h {
                for j in 0..w {
                    out.push(g.values.slice(ndarray::s![i, j, ..]).to_vec());
                }
            }
        }
        out
    }

    /// Anchor indices for the 0-based `step`: epoch-wise shuffles seeded by
    /// the epoch number, cut into consecutive batches.
    pub fn batch_for_step(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let b = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.index.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, "epoch-order", &[epoch]));
        let bs = self.config.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    /// `true` when the adversarial terms are active for the upcoming step.
    pub fn gan_active(&self, state: &TrainState) -> bool {
        self.config.ablation == Ablation::Full && state.step + 1 > self.config.warmup_steps
    }

    /// One optimization step over the batch scheduled for `state.step`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        let anchors = self.batch_for_step(state.step);
        self.train_step(state, &anchors)
    }

    /// One optimization step on the given anchors.
    pub fn train_step(&self, state: &mut TrainState, anchors: &[usize]) -> Result<StepReport> {
        if anchors.is_empty() {
            return Err(Error::EmptyBatch);
        }
        step::train_step(self, state, anchors)
    }

    fn end_of_epoch(&self, state: &mut TrainState) {
        if !self.config.reseed_dead_codes {
            return;
        }
        let epoch = state.step / self.steps_per_epoch();
        let mut rng = rng_for(self.config.seed, "codebook-reseed", &[epoch]);
        let candidates = self.latent_candidates(&state.params, &mut rng);
        let n = self.model.reseed_dead_codes(&mut state.params.generator, &state.usage, &candidates, &mut rng);
        if n > 0 {
            info!("epoch {epoch}: reseeded {n} unused codebook entries");
        }
        state.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Trains `state` until `total_steps()`, appending to `out/loss.tsv` and
    /// writing checkpoints under `out`. Returns the final checkpoint path.
    pub fn fit(&self, state: &mut TrainState, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("loss.tsv");
        let fresh = state.step == 0 || !log_path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        if fresh {
            writeln!(log, "{}", StepLog::HEADER).map_err(|e| Error::io(&log_path, e))?;
        }
        let total = self.total_steps();
        while state.step < total {
            let report = self.step(state)?;
            writeln!(log, "{}", report.log.to_tsv()).map_err(|e| Error::io(&log_path, e))?;
            if state.step % 25 == 0 || state.step == total {
                info!("{}", report.log);
            }
            if state.step % self.steps_per_epoch() == 0 {
                self.end_of_epoch(state);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < total {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                save_checkpoint(state, &out.join(format!("step-{:07}", state.step)))?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let final_path = out.join("final");
        save_checkpoint(state, &final_path)?;
        Ok(final_path)
    }

    /// Runs training without touching the filesystem.
    pub fn fit_in_memory(&self, state: &mut TrainState) -> Result<()> {
        let total = self.total_steps();
        while state.step < total {
            self.step(state)?;
            if state.step % self.steps_per_epoch() == 0 {
                self.end_of_epoch(state);
            }
        }
        Ok(())
    }
}

/// Trains a fresh model on `index` and writes checkpoints and the loss log
/// under `out`.
pub fn fit(index: &DatasetIndex, config: &TrainConfig, out: &Path, exec: Exec) -> Result<PathBuf> {
    let trainer = Trainer::new(index, config.clone(), exec)?;
    let mut state = trainer.init_state();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snapshot = out.join("train_config.json");
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&snapshot, json).map_err(|e| Error::io(&snapshot, e))?;
    trainer.fit(&mut state, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, PhantomConfig};

    fn dataset(n: usize) -> DatasetIndex {
        generate_synthetic_dataset(&PhantomConfig::for_resolution(64), n, 11).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 1,
            warmup_steps: 2,
            seed: 5,
            ..TrainConfig::desk()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        Trainer::new(&dataset(8), cfg, Exec::default()).unwrap()
    }

    #[test]
    fn epochs_zero_is_rejected() {
        let cfg = TrainConfig { epochs: 0, ..config() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Trainer::new(&dataset(4), cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn ablation_parses() {
        for a in [Ablation::ReconOnly, Ablation::ReconTriplet, Ablation::Full] {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("gan".parse::<Ablation>().is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = trainer(TrainConfig { batch_size: 3, ..config() });
        assert_eq!(t.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_for_step(s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_ne!(t.batch_for_step(0), t.batch_for_step(3));
    }

    #[test]
    fn warmup_gate_and_discriminator_freeze() {
        let t = trainer(config());
        let mut s = t.init_state();
        let h0 = param_hash(&s.params.discriminator);
        for _ in 0..2 {
            let r = t.step(&mut s).unwrap();
            assert!(!r.gan_active);
            assert_eq!(r.log.parts.gan, 0.0);
            assert_eq!(r.log.gan_d, 0.0);
            assert_eq!(param_hash(&s.params.discriminator), h0);
        }
        let r = t.step(&mut s).unwrap();
        assert!(r.gan_active && r.log.parts.gan > 0.0 && r.log.gan_d > 0.0);
        assert_ne!(param_hash(&s.params.discriminator), h0);
    }

    #[test]
    fn ablation_lattice() {
        for (ablation, triplet, gan) in [
            (Ablation::ReconOnly, false, false),
            (Ablation::ReconTriplet, true, false),
            (Ablation::Full, true, true),
        ] {
            let t = trainer(TrainConfig {
                ablation,
                warmup_steps: 0,
                ..config()
            });
            let mut s = t.init_state();
            let r = t.step(&mut s).unwrap();
            let p = r.log.parts;
            assert!(p.pixel > 0.0 && p.perc > 0.0 && p.vq > 0.0, "{ablation}");
            assert_eq!(p.triplet > 0.0, triplet, "{ablation}: {p:?}");
            assert_eq!(p.gan > 0.0, gan, "{ablation}");
            assert_eq!(r.log.gan_d > 0.0, gan, "{ablation}");
        }
    }

    #[test]
    fn negatives_are_reconstructed_toward_the_anchor() {
        let t = trainer(config());
        let mut s = t.init_state();
        for _ in 0..t.steps_per_epoch() {
            let r = t.step(&mut s).unwrap();
            assert_eq!(r.audit.len(), 3 * r.anchors_used);
            for a in &r.audit {
                match a.role {
                    Role::Anchor => assert!(a.input == a.anchor && a.target == a.anchor),
                    Role::Positive => assert!(a.target == a.input && a.input != a.anchor),
                    Role::Negative => assert!(a.target == a.anchor && a.input == format!("{}.neg", a.anchor)),
                }
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = |exec| {
            let t = Trainer::new(&dataset(8), config(), exec).unwrap();
            let mut s = t.init_state();
            (0..4).map(|_| t.step(&mut s).unwrap().log.total).collect::<Vec<_>>()
        };
        let a = run(Exec::Sequential);
        assert_eq!(a, run(Exec::Sequential));
        assert_eq!(a, run(Exec::Parallel));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer(config());
        let mut s = t.init_state();
        t.step(&mut s).unwrap();
        t.step(&mut s).unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&s, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, s);
        let a = t.step(&mut s).unwrap().log;
        let b = t.step(&mut loaded).unwrap().log;
        assert_eq!(a, b);
        assert_eq!(loaded.params, s.params);
    }

    #[test]
    fn checkpoint_guards() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer(config());
        let s = t.init_state();
        let path = dir.path().join("ck");
        save_checkpoint(&s, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let p = dir.path().join("corrupt");
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));

        let p = dir.path().join("short");
        fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));

        let mut v2 = bytes.clone();
        v2[8] = 2;
        let p = dir.path().join("v2");
        fs::write(&p, &v2).unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");

        let other = ModelConfig {
            codebook_size: 64,
            ..ModelConfig::desk()
        };
        assert!(load_checkpoint_for(&path, &other).is_err());
        assert!(load_checkpoint_for(&path, &ModelConfig::desk()).is_ok());
    }

    #[test]
    fn decoder_gradient_matches_differences() {
        let t = trainer(TrainConfig {
            ablation: Ablation::Full,
            ..config()
        });
        let s = t.init_state();
        let sample = t.triplet_for(0, 0, t.batch_for_step(0)[0]).unwrap();
        let w = t.config().weights;
        let loss = |p: &ModelParams| {
            let (parts, _) = t.triplet_losses(p, &sample, false).unwrap();
            crate::loss::total_loss(&parts, &w)
        };
        let g = t.triplet_gradient(&s.params, &sample, false).unwrap();
        let dec = t.model().decoder_range();
        let mut idx: Vec<usize> = dec.collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let h = 1e-3f32;
        for &i in idx.iter().take(6) {
            let mut p = s.params.clone();
            p.generator[i] += h;
            let up = loss(&p);
            p.generator[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h as f64);
            let an = g[i] as f64;
            assert!((fd - an).abs() <= 0.05 * an.abs(), "param {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn gradient_routing_of_the_vq_term() {
        let weights = LossWeights {
            lambda_l1: 0.0,
            lambda_perc: 0.0,
            lambda_triplet: 0.0,
            ..LossWeights::default()
        };
        let t = trainer(TrainConfig {
            ablation: Ablation::ReconOnly,
            weights,
            ..config()
        });
        let s = t.init_state();
        let sample = t.triplet_for(0, 0, t.batch_for_step(0)[0]).unwrap();
        let g = t.triplet_gradient(&s.params, &sample, false).unwrap();
        let nonzero = |r: std::ops::Range<usize>| g[r].iter().any(|&v| v != 0.0);
        let m = t.model();
        assert!(nonzero(m.encoder_range()));
        assert!(nonzero(m.codebook_range()));
        assert!(!nonzero(m.decoder_range()));

        let t = trainer(TrainConfig {
            ablation: Ablation::ReconOnly,
            weights: LossWeights { beta_commit: 0.0, ..weights },
            ..config()
        });
        let g = t.triplet_gradient(&s.params, &sample, false).unwrap();
        assert!(!g[m.encoder_range()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fit_writes_log_and_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = fit(&dataset(6), &TrainConfig { batch_size: 3, ..config() }, dir.path(), Exec::default()).unwrap();
        assert_eq!(path, dir.path().join("final"));
        let state = load_checkpoint(&path).unwrap();
        assert_eq!(state.step, 2);
        let log = fs::read_to_string(dir.path().join("loss.tsv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], StepLog::HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t"));
        assert!(dir.path().join("train_config.json").exists());
    }
}
