//! Detection and segmentation metrics and reports.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::exec::Exec;
use crate::score::{
    binarize_map, classify, error_map, image_score, select_threshold_youden, Binarization, MapConfig, MapMetric,
    Reconstructor, Threshold,
};
use crate::{Error, Image, Mask, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} labels"), format!("{b}")));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half, computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, kept integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, average (i + 1 + j) / 2
        let twice_avg = (i + 1 + j) as u128;
        let p = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += p * twice_avg;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Accuracy {
    pub f1: f64,
    pub accuracy: f64,
}

/// F1 with anomalous as the positive class (0 when undefined) and accuracy.
pub fn f1_accuracy(pred: &[bool], labels: &[bool]) -> Result<F1Accuracy> {
    check_len(pred.len(), labels.len())?;
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(F1Accuracy {
        f1: if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 },
        accuracy: if pred.is_empty() { 0.0 } else { (tp + tn) as f64 / pred.len() as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
}

/// Dice and IoU; both 1 when the masks are both empty.
pub fn dice_miou(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(Overlap { dice: 1.0, iou: 1.0 });
    }
    let union = p + g - inter;
    Ok(Overlap {
        dice: (2 * inter) as f64 / (p + g) as f64,
        iou: inter as f64 / union as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Segmentation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        })
    }
}

/// Per-sample values kept alongside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Metric name and value, in presentation order.
    pub metrics: Vec<(String, f64)>,
    pub n_samples: usize,
    pub config: String,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// `metric,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in &self.metrics {
            let _ = writeln!(s, "{name},{v}");
        }
        s
    }

    /// Aligned two-column text with the configuration snapshot.
    pub fn to_text(&self) -> String {
        let width = self.metrics.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut s = format!("task: {}\nsamples: {}\n", self.task, self.n_samples);
        for (name, v) in &self.metrics {
            let _ = writeln!(s, "{name:<width$}  {v:.4}");
        }
        if !self.config.is_empty() {
            s.push_str("\nconfig:\n");
            for line in self.config.lines() {
                let _ = writeln!(s, "  {line}");
            }
        }
        s
    }
}

/// How the decision threshold is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Youden-optimal on the validation scores.
    Fit,
    Fixed(f64),
}

/// F1, Acc, AUROC and t* on `test`, with the threshold from `threshold`.
pub fn detection_report(test_scores: &[f64], test_labels: &[bool], threshold: &Threshold) -> Result<EvalReport> {
    let pred = classify(test_scores, threshold.t_star);
    let fa = f1_accuracy(&pred, test_labels)?;
    let auc = auroc(test_scores, test_labels)?;
    Ok(EvalReport {
        task: Task::Detection,
        metrics: vec![
            ("F1".into(), fa.f1),
            ("Acc".into(), fa.accuracy),
            ("AUROC".into(), auc),
            ("t*".into(), threshold.t_star),
        ],
        n_samples: test_scores.len(),
        config: format!(
            "threshold_rule: score > t*\nthreshold_source: {}\nyouden_j: {}",
            if threshold.fitted_on.is_empty() { "given" } else { &threshold.fitted_on },
            threshold.j
        ),
        records: Vec::new(),
    })
}

/// Resolves `policy` against validation scores.
pub fn resolve_threshold(policy: ThresholdPolicy, val_scores: &[f64], val_labels: &[bool]) -> Result<Threshold> {
    match policy {
        ThresholdPolicy::Fixed(t) => Ok(Threshold {
            t_star: t,
            j: f64::NAN,
            fitted_on: String::new(),
        }),
        ThresholdPolicy::Fit => {
            let mut t = select_threshold_youden(val_scores, val_labels)?;
            t.fitted_on = format!("validation ({} images)", val_scores.len());
            Ok(t)
        }
    }
}

fn labelled_scores(index: &DatasetIndex, model: &dyn Reconstructor, exec: Exec) -> Result<(Vec<f64>, Vec<bool>, Vec<String>)> {
    let mut labels = Vec::with_capacity(index.len());
    for e in &index.entries {
        labels.push(
            e.label
                .is_anomalous()
                .ok_or_else(|| Error::InvalidInput(format!("`{}` has no normal/abnormal label", e.name)))?,
        );
    }
    let scores: Result<Vec<f64>> = exec
        .map(&index.entries, |e| image_score(&e.pixels, model))
        .into_iter()
        .collect();
    Ok((scores?, labels, index.entries.iter().map(|e| e.name.clone()).collect()))
}

/// Scores `val` and `test`, fixes the threshold and reports on `test`.
pub fn run_detection_eval(
    model: &dyn Reconstructor,
    val: &DatasetIndex,
    test: &DatasetIndex,
    policy: ThresholdPolicy,
    exec: Exec,
) -> Result<EvalReport> {
    let (vs, vl) = match policy {
        ThresholdPolicy::Fit => {
            let (s, l, _) = labelled_scores(val, model, exec)?;
            (s, l)
        }
        ThresholdPolicy::Fixed(_) => (Vec::new(), Vec::new()),
    };
    let threshold = resolve_threshold(policy, &vs, &vl)?;
    let (ts, tl, ids) = labelled_scores(test, model, exec)?;
    let mut report = detection_report(&ts, &tl, &threshold)?;
    let pred = classify(&ts, threshold.t_star);
    report.records = ids
        .into_iter()
        .zip(ts.iter().zip(&pred))
        .map(|(id, (&s, &p))| SampleRecord {
            id,
            values: vec![("score".into(), s), ("label_pred".into(), p as u8 as f64)],
        })
        .collect();
    Ok(report)
}

/// One image with its ground-truth lesion mask and optional ROI.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub gt: Mask,
    pub roi: Option<Mask>,
}

/// Predicted mask of one sample under a metric.
pub fn predict_mask(
    x: &Image,
    x_hat: &Image,
    roi: Option<&Mask>,
    map: &MapConfig,
    binarization: Binarization,
) -> Result<Mask> {
    let m = error_map(x, x_hat, map)?;
    Ok(binarize_map(&m, binarization, roi)?.mask)
}

fn segmentation_from_reconstructions(
    samples: &[SegSample],
    recons: &[Image],
    map: &MapConfig,
    binarization: Binarization,
    exec: Exec,
) -> Result<(Overlap, Vec<SampleRecord>)> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let per: Result<Vec<Overlap>> = exec
        .map(&idx, |&i| {
            let s = &samples[i];
            let pred = predict_mask(&s.image, &recons[i], s.roi.as_ref(), map, binarization)?;
            dice_miou(&pred, &s.gt)
        })
        .into_iter()
        .collect();
    let per = per?;
    let n = per.len().max(1) as f64;
    let mean = Overlap {
        dice: per.iter().map(|o| o.dice).sum::<f64>() / n,
        iou: per.iter().map(|o| o.iou).sum::<f64>() / n,
    };
    let records = samples
        .iter()
        .zip(&per)
        .map(|(s, o)| SampleRecord {
            id: s.id.clone(),
            values: vec![("dice".into(), o.dice), ("iou".into(), o.iou)],
        })
        .collect();
    Ok((mean, records))
}

fn reconstruct_all(samples: &[SegSample], model: &dyn Reconstructor, exec: Exec) -> Result<Vec<Image>> {
    exec.map(samples, |s| model.reconstruct(&s.image)).into_iter().collect()
}

/// Mean Dice and mIoU over `samples` (per-image means).
pub fn run_segmentation_eval(
    model: &dyn Reconstructor,
    samples: &[SegSample],
    map: &MapConfig,
    binarization: Binarization,
    exec: Exec,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("segmentation evaluation needs at least one image".into()));
    }
    let recons = reconstruct_all(samples, model, exec)?;
    let (mean, records) = segmentation_from_reconstructions(samples, &recons, map, binarization, exec)?;
    Ok(EvalReport {
        task: Task::Segmentation,
        metrics: vec![("Dice".into(), mean.dice), ("mIoU".into(), mean.iou)],
        n_samples: samples.len(),
        config: format!(
            "map_metric: {}\nalpha: {}\nbeta: {}\nbinarization: {binarization}\nroi_restricted: {}\nempty_vs_empty: dice=1, iou=1\naggregation: per-image mean",
            map.metric,
            map.alpha,
            map.beta,
            samples.iter().any(|s| s.roi.is_some())
        ),
        records,
    })
}

/// Rows are models, columns the four error metrics, cells mean Dice/mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrid {
    pub rows: Vec<(String, Vec<(MapMetric, Overlap)>)>,
}

impl MetricGrid {
    pub fn get(&self, row: &str, metric: MapMetric) -> Option<Overlap> {
        self.rows
            .iter()
            .find(|(n, _)| n == row)
            .and_then(|(_, cells)| cells.iter().find(|(m, _)| *m == metric).map(|&(_, o)| o))
    }

    fn header() -> Vec<String> {
        let mut h = vec!["model".to_string()];
        for m in MapMetric::ALL {
            h.push(format!("{} Dice", m.title()));
            h.push(format!("{} mIoU", m.title()));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::header().join(",");
        s.push('\n');
        for (name, cells) in &self.rows {
            s.push_str(name);
            for (_, o) in cells {
                let _ = write!(s, ",{},{}", o.dice, o.iou);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = Self::header();
        let name_w = self.rows.iter().map(|(n, _)| n.len()).chain([5]).max().unwrap_or(5);
        let mut s = format!("{:<name_w$}", header[0]);
        for h in &header[1..] {
            let _ = write!(s, "  {h:>13}");
        }
        s.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(s, "{name:<name_w$}");
            for (_, o) in cells {
                let _ = write!(s, "  {:>13.4}  {:>13.4}", o.dice, o.iou);
            }
            s.push('\n');
        }
        s
    }
}

/// Segmentation quality of every model under every error metric, with the
/// weights, SSIM settings and binarization of `base`.
pub fn compare_metrics(
    models: &[(String, &dyn Reconstructor)],
    samples: &[SegSample],
    base: &MapConfig,
    binarization: Binarization,
    exec: Exec,
) -> Result<MetricGrid> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("metric comparison needs at least one image".into()));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        let recons = reconstruct_all(samples, *model, exec)?;
        let mut cells = Vec::with_capacity(4);
        for metric in MapMetric::ALL {
            let cfg = MapConfig { metric, ..*base };
            let (mean, _) = segmentation_from_reconstructions(samples, &recons, &cfg, binarization, exec)?;
            cells.push((metric, mean));
        }
        rows.push((name.clone(), cells));
    }
    Ok(MetricGrid { rows })
}
