//! Score and label tables.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use retina_vq::data::Label;

pub const SCORE_HEADER: &str = "id\tscore\tlabel_pred";

fn rows(path: &Path) -> anyhow::Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').map(|c| c.trim().to_string()).collect::<Vec<_>>()))
        .filter(|(_, cols)| cols[0] != "id")
        .collect())
}

/// `(id, score)` pairs from a score table.
pub fn read_scores(path: &Path) -> anyhow::Result<Vec<(String, f64)>> {
    rows(path)?
        .into_iter()
        .map(|(n, cols)| {
            let v = cols
                .get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .with_context(|| format!("{}:{n}: expected `id<TAB>score`", path.display()))?;
            Ok((cols[0].clone(), v))
        })
        .collect()
}

fn parse_label(s: &str) -> Option<bool> {
    match s {
        "1" => Some(true),
        "0" => Some(false),
        other => Label::from_token(other).and_then(Label::is_anomalous),
    }
}

/// `id -> anomalous` from a `id<TAB>label` table; labels are `0`/`1` or
/// label tokens such as `NORMAL`, `CNV`.
pub fn read_labels(path: &Path) -> anyhow::Result<HashMap<String, bool>> {
    let mut out = HashMap::new();
    for (n, cols) in rows(path)? {
        let Some(l) = cols.get(1).and_then(|s| parse_label(s)) else {
            bail!("{}:{n}: expected `id<TAB>label` with label 0/1 or a class name", path.display());
        };
        out.insert(cols[0].clone(), l);
    }
    Ok(out)
}

/// Looks up the label of every scored id.
pub fn join_labels(scores: &[(String, f64)], labels: &HashMap<String, bool>, what: &str) -> anyhow::Result<(Vec<f64>, Vec<bool>)> {
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    for (id, v) in scores {
        let Some(&lab) = labels.get(id) else {
            bail!("no label for {what} id `{id}`");
        };
        s.push(*v);
        l.push(lab);
    }
    Ok((s, l))
}
