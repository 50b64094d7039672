//! Flat `key: value` run configuration.
//!
//! Every field of [`RunConfig`] is addressable by a flat key derived from its
//! position in the nested structs: group names (`train`, `weights`, `model`,
//! `perturb`, `gabor`) are dropped and the remaining path is joined with `_`,
//! so `train.model.codebook_size` is `codebook_size`,
//! `train.perturb.fluid_radius.max` is `fluid_radius_max` and
//! `train.roi.gabor.wavelengths` is `roi_wavelengths`.
//!
//! Values are written the way they read: numbers, `true`/`false`,
//! comma-separated lists (`channels: 8,16,32`), bare enum names
//! (`ablation: recon_only`) and `name:value` for enum variants that carry a
//! number (`binarization: percentile:97`, `roi_threshold: fixed:0.4`).
//!
//! Sources are layered defaults < file < `APP_*` environment < explicit
//! overrides. The environment variable for a key is `APP_` followed by the
//! key in upper case, e.g. `APP_LEARNING_RATE`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::data::PhantomConfig;
use crate::score::{Binarization, MapConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "APP_";

const DROPPED: [&str; 5] = ["train", "weights", "model", "perturb", "gabor"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub map: MapConfig,
    pub binarization: Binarization,
    pub phantom: PhantomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_train(TrainConfig::desk())
    }
}

struct Leaf {
    key: String,
    path: Vec<String>,
}

fn is_enum_object(m: &Map<String, Value>) -> bool {
    m.len() == 1 && !m.values().any(|v| v.is_object())
}

fn collect(v: &Value, path: &mut Vec<String>, out: &mut Vec<Leaf>) {
    match v {
        Value::Object(m) if !is_enum_object(m) => {
            for (k, child) in m {
                path.push(k.clone());
                collect(child, path, out);
                path.pop();
            }
        }
        _ => {
            let key = path
                .iter()
                .filter(|s| !DROPPED.contains(&s.as_str()))
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join("_");
            out.push(Leaf { key, path: path.clone() });
        }
    }
}

fn leaves() -> Vec<Leaf> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    collect(&v, &mut Vec::new(), &mut out);
    out
}

fn lookup<'a>(v: &'a Value, path: &[String]) -> &'a Value {
    path.iter().fold(v, |v, k| &v[k.as_str()])
}

fn lookup_mut<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |v, k| &mut v[k.as_str()])
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Object(m) => m.iter().map(|(k, v)| format!("{k}:{}", render(v))).collect(),
        other => other.to_string(),
    }
}

fn parse_number(text: &str, like: &Value) -> Option<Value> {
    if like.is_u64() {
        text.parse::<u64>().ok().map(Value::from)
    } else {
        text.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
    }
}

fn parse_scalar(text: &str) -> Value {
    if let Ok(u) = text.parse::<u64>() {
        return Value::from(u);
    }
    match text.parse::<f64>().ok().and_then(Number::from_f64) {
        Some(n) => Value::Number(n),
        None => Value::String(text.to_string()),
    }
}

/// Converts `text` into a JSON value shaped like the default `like`.
fn parse_value(key: &str, text: &str, like: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("invalid value `{text}` for `{key}`"));
    match like {
        Value::Bool(_) => match text {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(bad()),
        },
        Value::Number(_) => parse_number(text, like).ok_or_else(bad),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0u64));
            text.split(',')
                .map(|t| parse_number(t.trim(), &elem).ok_or_else(bad))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => Ok(match text.split_once(':') {
            Some((name, v)) => {
                let mut m = Map::new();
                m.insert(name.trim().to_string(), parse_scalar(v.trim()));
                Value::Object(m)
            }
            None => Value::String(text.to_string()),
        }),
    }
}

impl RunConfig {
    pub fn from_train(train: TrainConfig) -> Self {
        let size = train.model.input_resolution;
        RunConfig {
            train,
            map: MapConfig::default(),
            binarization: Binarization::default(),
            phantom: PhantomConfig::for_resolution(size),
        }
    }

    /// Every accepted key, in snapshot order.
    pub fn keys() -> Vec<String> {
        leaves().into_iter().map(|l| l.key).collect()
    }

    fn leaf(key: &str) -> Result<Leaf> {
        leaves()
            .into_iter()
            .find(|l| l.key == key)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let leaf = Self::leaf(key)?;
        let v = serde_json::to_value(self).expect("config serializes");
        Ok(render(lookup(&v, &leaf.path)))
    }

    pub fn set(&mut self, key: &str, text: &str) -> Result<()> {
        let leaf = Self::leaf(key)?;
        let mut v = serde_json::to_value(&*self).expect("config serializes");
        let slot = lookup_mut(&mut v, &leaf.path);
        *slot = parse_value(key, text.trim(), slot)?;
        *self = serde_json::from_value(v)
            .map_err(|e| Error::Config(format!("invalid value `{}` for `{key}`: {e}", text.trim())))?;
        Ok(())
    }

    /// Applies `key: value` lines. Blank lines and `#` comments are skipped;
    /// `origin` names the source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key: value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `APP_<KEY>` variables. Variables with the prefix that match
    /// no key are ignored with a warning.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let keys = Self::keys();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if keys.contains(&key) {
                self.set(&key, &value).map_err(|e| Error::Config(format!("{name}: {e}")))?;
            } else {
                log::warn!("ignoring {name}: no configuration key `{key}`");
            }
        }
        Ok(())
    }

    /// Full layering: `base`, then `file`, then the process environment,
    /// then `overrides` in order.
    pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_env(std::env::vars())?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        let m = &self.map;
        if !(m.alpha >= 0.0 && m.beta >= 0.0 && m.alpha + m.beta > 0.0) {
            return Err(Error::Config(format!(
                "map weights must be non-negative and not both zero, got alpha={} beta={}",
                m.alpha, m.beta
            )));
        }
        if m.ssim.window % 2 == 0 || m.ssim.sigma <= 0.0 {
            return Err(Error::Config("map_ssim_window must be odd and map_ssim_sigma positive".into()));
        }
        if let Binarization::Percentile(p) = self.binarization {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("binarization percentile must lie in [0, 100], got {p}")));
            }
        }
        Ok(())
    }

    /// Snapshot text that [`RunConfig::apply_text`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        for leaf in leaves() {
            writeln!(s, "{}: {}", leaf.key, render(lookup(&v, &leaf.path))).expect("string write");
        }
        s
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::Threshold;
    use crate::train::Ablation;

    #[test]
    fn keys_are_unique_and_flat() {
        let keys = RunConfig::keys();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
        for k in ["learning_rate", "codebook_size", "lambda_gan", "alpha_roi", "fluid_radius_max", "modes_both",
            "roi_wavelengths", "roi_intensity_gate", "codebook_lr_scale", "map_alpha", "map_ssim_window",
            "binarization", "phantom_speckle_sigma"]
        {
            assert!(keys.contains(&k.to_string()), "missing {k}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("ablation", "recon_triplet").unwrap();
        cfg.set("roi_threshold", "fixed:0.4").unwrap();
        cfg.set("binarization", "percentile:97.5").unwrap();
        cfg.set("channels", "4, 8, 16").unwrap();
        cfg.set("learning_rate", "0.1").unwrap();
        assert_eq!(cfg.train.ablation, Ablation::ReconTriplet);
        assert_eq!(cfg.train.roi.threshold, Threshold::Fixed(0.4));
        assert_eq!(cfg.train.model.channels, vec![4, 8, 16]);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "snapshot").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.get("binarization").unwrap(), "percentile:97.5");
    }

    #[test]
    fn file_env_and_override_layering() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepochs: 3\nseed: 5  # trailing\n\nbatch_size: 4\n", "c.txt").unwrap();
        cfg.apply_env(vec![
            ("APP_SEED".to_string(), "9".to_string()),
            ("HOME".to_string(), "/x".to_string()),
            ("APP_NOT_A_KEY".to_string(), "1".to_string()),
        ])
        .unwrap();
        cfg.set("epochs", "4").unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.seed, cfg.train.batch_size), (4, 9, 4));
    }

    #[test]
    fn bad_input_is_reported_with_location() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("epochs: 2\nepochs: -1\n", "c.txt").unwrap_err().to_string();
        assert!(e.contains("c.txt:2"), "{e}");
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("ablation", "everything").is_err());
        assert!(cfg.apply_text("just words", "c.txt").is_err());
        cfg.set("batch_size", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
