//! Subcommand adapters: parse, validate, call the library, write outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use log::{info, warn};
use retina_vq::config::RunConfig;
use retina_vq::data::{
    load_dataset, load_folder, read_gray, read_mask, save_image_at, save_mask, synthesize_test_set,
    write_synthetic_split, BScanImage, DatasetIndex, Split,
};
use retina_vq::eval::{compare_metrics as grid_of, detection_report, resolve_threshold, run_segmentation_eval, SegSample, ThresholdPolicy};
use retina_vq::exec::with_workers;
use retina_vq::perturb::perturb as perturb_image;
use retina_vq::roi::{extract_roi, RoiMask};
use retina_vq::score::{
    binarize_map, classify, error_map, save_heatmap, save_map_u16, score_images, Reconstructor, TrainedModel,
};
use retina_vq::seed::rng_for;
use retina_vq::train::{load_checkpoint, Trainer};
use retina_vq::{Exec, Image};

use crate::tsv::{join_labels, read_labels, read_scores, SCORE_HEADER};
use crate::{CliResult, Common, Failure};

const SNAPSHOT: &str = "run-config.txt";

fn seed_override(seed: Option<u64>) -> Vec<(String, String)> {
    seed.map(|s| vec![("seed".to_string(), s.to_string())]).unwrap_or_default()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Snapshot beside a file output: `<file>.config.txt`.
fn snapshot_beside(cfg: &RunConfig, file: &Path) -> CliResult {
    let mut name = file.as_os_str().to_owned();
    name.push(".config.txt");
    Ok(cfg.write_snapshot(Path::new(&name))?)
}

fn is_image(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    matches!(ext.as_deref(), Some("png" | "bmp" | "tif" | "tiff" | "jpg" | "jpeg"))
        && !name.ends_with(".roi.png")
        && !name.contains(".neg.")
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// Expands files and directories (non-recursive) into image paths.
fn image_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.is_file() && is_image(q))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Failure::from(anyhow::anyhow!("no such file or directory: {}", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("no input images"));
    }
    Ok(out)
}

/// Loads `dir`, or `dir/<split>` when that exists.
fn load_split(dir: &Path, split: Split, resolution: usize) -> CliResult<DatasetIndex> {
    let index = if dir.join(split.dir_name()).is_dir() {
        load_dataset(dir, split, resolution)?
    } else {
        load_folder(dir, split, resolution)?
    };
    for s in &index.skipped {
        warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    if index.is_empty() {
        return Err(Failure::from(anyhow::anyhow!("no usable images under {}", dir.display())));
    }
    Ok(index)
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    Ok(TrainedModel::from_checkpoint(path)?)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of normal phantoms.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Number of additional perturbed phantoms with lesion masks (not allowed for train).
    #[arg(long, default_value_t = 0)]
    pub abnormal: usize,
    /// Dataset root; images go to `<out>/<split>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[command(flatten)]
    pub common: Common,
}

pub fn synth(a: SynthArgs) -> CliResult {
    if a.split == Split::Train && a.abnormal > 0 {
        return Err(Failure::usage("--abnormal is not allowed for the train split"));
    }
    let cfg = a.common.resolve(&seed_override(a.seed))?;
    let t = &cfg.train;
    let cases = synthesize_test_set(&cfg.phantom, &t.roi, &t.perturb, a.n as usize, a.abnormal, t.seed)?;
    let paths = write_synthetic_split(&a.out, a.split, &cases, &cfg.phantom, t.seed)?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT))?;
    println!(
        "wrote {} images ({} normal, {} abnormal) to {}",
        paths.len(),
        a.n,
        a.abnormal,
        a.out.join(a.split.dir_name()).display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExtractRoiArgs {
    /// Image files or directories; images are resampled to the configured input resolution.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn extract_rois(a: ExtractRoiArgs) -> CliResult {
    let cfg = a.common.resolve(&[])?;
    let res = cfg.train.model.input_resolution;
    let paths = image_paths(&a.inputs)?;
    let results = with_workers(a.common.workers, |exec| {
        exec.map(&paths, |p| -> CliResult<(PathBuf, f64)> {
            let img = read_gray(p, res)?;
            let roi = extract_roi(&img, &cfg.train.roi)?;
            let out = p.with_file_name(format!("{}.roi.png", stem(p)));
            save_mask(&out, &roi.mask)?;
            Ok((out, roi.count() as f64 / roi.mask.len() as f64))
        })
    });
    let mut failed = 0;
    for (p, r) in paths.iter().zip(results) {
        match r {
            Ok((out, cov)) => println!("{}\tcoverage {:.3}", out.display(), cov),
            Err(f) => {
                failed += 1;
                eprintln!("error: {}: {}", p.display(), f.message);
            }
        }
    }
    if failed > 0 {
        return Err(Failure::from(anyhow::anyhow!("ROI extraction failed for {failed} of {} images", paths.len())));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    /// Input image.
    #[arg(long)]
    pub image: PathBuf,
    /// ROI mask (nonzero = retina); extracted from the image when absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output directory; defaults to the image's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

pub fn perturb(a: PerturbArgs) -> CliResult {
    let cfg = a.common.resolve(&seed_override(a.seed))?;
    let res = cfg.train.model.input_resolution;
    let img = read_gray(&a.image, res)?;
    let roi = match &a.mask {
        Some(m) => RoiMask::new(read_mask(m, Some(res))?),
        None => extract_roi(&img, &cfg.train.roi)?,
    };
    let mut rng = rng_for(cfg.train.seed, "cli-perturb", &[]);
    let out = perturb_image(&img, &roi, &cfg.train.perturb, &mut rng)?;
    let dir = a
        .out
        .clone()
        .or_else(|| a.image.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let name = stem(&a.image);
    let neg = dir.join(format!("{name}.neg.png"));
    save_image_at(&neg, &out.image)?;
    save_mask(&dir.join(format!("{name}.neg.lesion.png")), &out.lesion_mask)?;
    let side = format!(
        "source: {}\nseed: {}\n{}",
        a.image.display(),
        cfg.train.seed,
        out.params.to_text()
    );
    write_file(&dir.join(format!("{name}.neg.txt")), &side)?;
    snapshot_beside(&cfg, &neg)?;
    println!("{}", neg.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training images: a dataset root with `train/` or a folder of normal scans.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, the loss log and the config snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of epochs (same as `--set epochs=N`).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut extra = seed_override(a.seed);
    if let Some(e) = a.epochs {
        extra.push(("epochs".into(), e.to_string()));
    }
    let mut cfg = a.common.resolve(&extra)?;
    let state = match &a.resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.config != cfg.train {
                warn!("resuming with the configuration stored in {}", p.display());
            }
            cfg.train = s.config.clone();
            Some(s)
        }
        None => None,
    };
    let index = load_split(&a.data, Split::Train, cfg.train.model.input_resolution)?;
    create_dir(&a.out)?;
    cfg.write_snapshot(&a.out.join(SNAPSHOT))?;
    let final_path = with_workers(a.common.workers, |exec| -> CliResult<PathBuf> {
        let trainer = Trainer::new(&index, cfg.train.clone(), exec)?;
        let mut state = state.unwrap_or_else(|| trainer.init_state());
        info!(
            "training on {} images, {} steps ({} per epoch)",
            trainer.index().len(),
            trainer.total_steps(),
            trainer.steps_per_epoch()
        );
        Ok(trainer.fit(&mut state, &a.out)?)
    })?;
    println!("{}", final_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of images (or dataset root with `test/`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Decision threshold for `label_pred`; `NA` when absent.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write `id<TAB>label` for images whose label is known from the file name.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn score(a: ScoreArgs) -> CliResult {
    let cfg = a.common.resolve(&[])?;
    let model = load_model(&a.checkpoint)?;
    let index = load_split(&a.data, Split::Test, model.resolution())?;
    let items: Vec<(String, &Image)> = index.entries.iter().map(|e| (e.name.clone(), &e.pixels)).collect();
    let scores = with_workers(a.common.workers, |exec| score_images(&items, &model, exec))?;
    let mut text = format!("{SCORE_HEADER}\n");
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let pred = a.threshold.map(|t| classify(&values, t));
    for (i, s) in scores.iter().enumerate() {
        let p = pred.as_ref().map_or("NA".to_string(), |p| (p[i] as u8).to_string());
        text.push_str(&format!("{}\t{}\t{}\n", s.id, s.value, p));
    }
    write_file(&a.out, &text)?;
    if let Some(lp) = &a.labels_out {
        let mut l = String::from("id\tlabel\n");
        for e in &index.entries {
            if let Some(y) = e.label.is_anomalous() {
                l.push_str(&format!("{}\t{}\n", e.name, y as u8));
            }
        }
        write_file(lp, &l)?;
    }
    snapshot_beside(&cfg, &a.out)?;
    println!("scored {} images -> {}", scores.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the binarized mask to the extracted ROI.
    #[arg(long)]
    pub roi: bool,
    #[command(flatten)]
    pub common: Common,
}

pub fn localize(a: LocalizeArgs) -> CliResult {
    let cfg = a.common.resolve(&[])?;
    let model = load_model(&a.checkpoint)?;
    let res = model.resolution();
    let paths = image_paths(&a.inputs)?;
    create_dir(&a.out)?;
    let results = with_workers(a.common.workers, |exec| {
        exec.map(&paths, |p| -> CliResult<String> {
            let x = read_gray(p, res)?;
            let xh = model.reconstruct(&x)?;
            let map = error_map(&x, &xh, &cfg.map)?;
            let roi = if a.roi { Some(extract_roi(&x, &cfg.train.roi)?.mask) } else { None };
            let bin = binarize_map(&map, cfg.binarization, roi.as_ref())?;
            let name = stem(p);
            save_map_u16(&a.out.join(format!("{name}.map.png")), &map)?;
            save_heatmap(&a.out.join(format!("{name}.heat.png")), &map)?;
            save_mask(&a.out.join(format!("{name}.mask.png")), &bin.mask)?;
            Ok(format!(
                "{name}\tthreshold {:.4}{}",
                bin.threshold,
                if bin.degenerate { "\tdegenerate" } else { "" }
            ))
        })
    });
    for r in results {
        println!("{}", r?);
    }
    cfg.write_snapshot(&a.out.join(SNAPSHOT))?;
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
pub enum TaskArg {
    Detection,
    Segmentation,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Detection: test score TSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Detection: `id<TAB>label` for every scored id (test and validation).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Detection: validation score TSV to fit the Youden threshold on.
    #[arg(long, conflicts_with = "threshold")]
    pub fit_threshold: Option<PathBuf>,
    /// Detection: fixed threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Segmentation: checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Segmentation: images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Segmentation: ground-truth masks named `<image stem>.png`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Segmentation: restrict predictions to the extracted ROI.
    #[arg(long)]
    pub roi: bool,
    /// Directory for `report.csv` and `report.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| Failure::usage(format!("{flag} is required for this task")))
}

/// Images under `data` that have a mask in `gt`; the rest are skipped.
fn seg_samples(data: &Path, gt: &Path, with_roi: bool, cfg: &RunConfig, res: usize, exec: Exec) -> CliResult<Vec<SegSample>> {
    let index = load_split(data, Split::Test, res)?;
    let gt_dir = if gt.join(Split::Test.dir_name()).is_dir() { gt.join(Split::Test.dir_name()) } else { gt.to_path_buf() };
    let entries: Vec<&BScanImage> = index
        .entries
        .iter()
        .filter(|e| {
            let ok = gt_dir.join(format!("{}.png", e.name)).is_file();
            if !ok {
                warn!("no ground-truth mask for {}; skipped", e.name);
            }
            ok
        })
        .collect();
    if entries.is_empty() {
        return Err(Failure::from(anyhow::anyhow!("no image under {} has a mask in {}", data.display(), gt.display())));
    }
    exec.map(&entries, |e| -> CliResult<SegSample> {
        let gt = read_mask(&gt_dir.join(format!("{}.png", e.name)), Some(res))?;
        let roi = if with_roi { extract_roi(&e.pixels, &cfg.train.roi).ok().map(|r| r.mask) } else { None };
        Ok(SegSample {
            id: e.name.clone(),
            image: e.pixels.clone(),
            gt,
            roi,
        })
    })
    .into_iter()
    .collect()
}

fn write_report(out: &Option<PathBuf>, name: &str, csv: &str, text: &str, cfg: &RunConfig) -> CliResult {
    if let Some(dir) = out {
        write_file(&dir.join(format!("{name}.csv")), csv)?;
        write_file(&dir.join(format!("{name}.txt")), text)?;
        cfg.write_snapshot(&dir.join(SNAPSHOT))?;
    }
    print!("{text}");
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult {
    let cfg = a.common.resolve(&[])?;
    match a.task {
        TaskArg::Detection => {
            let scores = read_scores(need(&a.scores, "--scores")?)?;
            let labels = read_labels(need(&a.labels, "--labels")?)?;
            let (ts, tl) = join_labels(&scores, &labels, "test")?;
            let threshold = match (&a.fit_threshold, a.threshold) {
                (Some(v), _) => {
                    let (vs, vl) = join_labels(&read_scores(v)?, &labels, "validation")?;
                    resolve_threshold(ThresholdPolicy::Fit, &vs, &vl)?
                }
                (None, Some(t)) => resolve_threshold(ThresholdPolicy::Fixed(t), &[], &[])?,
                (None, None) => return Err(Failure::usage("detection needs --fit-threshold or --threshold")),
            };
            let report = detection_report(&ts, &tl, &threshold)?;
            write_report(&a.out, "report", &report.to_csv(), &report.to_text(), &cfg)
        }
        TaskArg::Segmentation => {
            let model = load_model(need(&a.checkpoint, "--checkpoint")?)?;
            let data = need(&a.data, "--data")?;
            let gt = need(&a.gt, "--gt")?;
            let report = with_workers(a.common.workers, |exec| -> CliResult<_> {
                let samples = seg_samples(data, gt, a.roi, &cfg, model.resolution(), exec)?;
                Ok(run_segmentation_eval(&model, &samples, &cfg.map, cfg.binarization, exec)?)
            })?;
            write_report(&a.out, "report", &report.to_csv(), &report.to_text(), &cfg)
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// `[name=]path` of a checkpoint. Repeatable; rows of the grid.
    #[arg(long, required = true)]
    pub checkpoint: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth masks named `<image stem>.png`.
    #[arg(long)]
    pub gt: PathBuf,
    /// Restrict predictions to the extracted ROI.
    #[arg(long)]
    pub roi: bool,
    /// Directory for `grid.csv` and `grid.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn compare_metrics(a: CompareArgs) -> CliResult {
    let cfg = a.common.resolve(&[])?;
    let mut models = Vec::new();
    for spec in &a.checkpoint {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => (stem(Path::new(spec)), PathBuf::from(spec)),
        };
        models.push((name, load_model(&path)?));
    }
    let res = models[0].1.resolution();
    if models.iter().any(|(_, m)| m.resolution() != res) {
        return Err(Failure::usage("all checkpoints must share one input resolution"));
    }
    let grid = with_workers(a.common.workers, |exec| -> CliResult<_> {
        let samples = seg_samples(&a.data, &a.gt, a.roi, &cfg, res, exec)?;
        let rows: Vec<(String, &dyn Reconstructor)> =
            models.iter().map(|(n, m)| (n.clone(), m as &dyn Reconstructor)).collect();
        Ok(grid_of(&rows, &samples, &cfg.map, cfg.binarization, exec)?)
    })?;
    write_report(&a.out, "grid", &grid.to_csv(), &grid.to_text(), &cfg)
}
