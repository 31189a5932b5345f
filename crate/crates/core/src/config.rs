//! `key=value` configuration files and the resolved run configuration.
//!
//! Keys are grouped by dotted prefixes (`model.d=64`, `diffusion.T=200`).
//! Precedence is flags > file > defaults: load the file with
//! [`Config::apply`], then apply the flag overrides the same way.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, DenoiserKind};
use crate::diffusion::{GuidanceConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::mbae::{ModelConfig, PositionMode};

/// Ordered `key=value` pairs. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Config(format!("{}:{line}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Fixed sequence length `L`.
    pub seq_len: usize,
    /// Users with fewer interactions are dropped before splitting; 0 disables.
    pub min_interactions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seq_len: 50,
            min_interactions: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub weight_decay: f64,
    /// Item mask probability.
    pub rho: f64,
    /// Behavior mask probability at masked item positions.
    pub sigma: f64,
    /// Gradient global-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Most recent prefix cuts per user used to build stage-2 latent pairs;
    /// 0 uses every cut.
    pub cuts_per_user: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let stage = |epochs| StageConfig {
            epochs,
            batch_size: 256,
            lr: 2e-3,
        };
        Self {
            seed: 0,
            stage1: stage(200),
            stage2: stage(200),
            stage3: stage(20),
            weight_decay: 0.01,
            rho: 0.2,
            sigma: 0.2,
            grad_clip: 1.0,
            cuts_per_user: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![10, 20] }
    }
}

/// Every tunable of a run, with defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&KeyValues::load(path)?)?;
        Ok(c)
    }

    /// Applies every entry; unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "data.seq_len" => self.data.seq_len = parse_value(k, v)?,
            "data.min_interactions" => self.data.min_interactions = parse_value(k, v)?,
            "model.d" => self.model.d = parse_value(k, v)?,
            "model.heads" => self.model.heads = parse_value(k, v)?,
            "model.layers" => self.model.layers = parse_value(k, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse_value(k, v)?,
            "model.dropout" => self.model.dropout = parse_value(k, v)?,
            "model.position" => self.model.position = PositionMode::parse(v)?,
            "model.behavior_in_input" => self.model.behavior_in_input = parse_value(k, v)?,
            "model.rope_base" => self.model.rope_base = parse_value(k, v)?,
            "diffusion.T" => self.schedule.steps = parse_value(k, v)?,
            "diffusion.beta_start" => self.schedule.beta_start = parse_value(k, v)?,
            "diffusion.beta_end" => self.schedule.beta_end = parse_value(k, v)?,
            "diffusion.omega" => self.guidance.omega = parse_value(k, v)?,
            "diffusion.null_prob" => self.guidance.null_prob = parse_value(k, v)?,
            "diffusion.stride" => self.guidance.stride = parse_value(k, v)?,
            "denoiser.kind" => self.denoiser.kind = DenoiserKind::parse(v)?,
            "denoiser.depth" => self.denoiser.depth = parse_value(k, v)?,
            "denoiser.m_s" => self.denoiser.shared_experts = parse_value(k, v)?,
            "denoiser.m_p" => self.denoiser.private_experts = parse_value(k, v)?,
            "denoiser.hidden" => self.denoiser.hidden = parse_value(k, v)?,
            "train.seed" => self.train.seed = parse_value(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(k, v)?,
            "train.rho" => self.train.rho = parse_value(k, v)?,
            "train.sigma" => self.train.sigma = parse_value(k, v)?,
            "train.grad_clip" => self.train.grad_clip = parse_value(k, v)?,
            "train.cuts_per_user" => self.train.cuts_per_user = parse_value(k, v)?,
            "eval.ks" => self.eval.ks = parse_list(k, v)?,
            _ => {
                let stage = match key.split_once('.') {
                    Some(("stage1", f)) => Some((&mut self.train.stage1, f)),
                    Some(("stage2", f)) => Some((&mut self.train.stage2, f)),
                    Some(("stage3", f)) => Some((&mut self.train.stage3, f)),
                    _ => None,
                };
                match stage {
                    Some((s, "epochs")) => s.epochs = parse_value(k, v)?,
                    Some((s, "batch_size")) => s.batch_size = parse_value(k, v)?,
                    Some((s, "lr")) => s.lr = parse_value(k, v)?,
                    _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Every effective key, suitable for writing back as a config file.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("data.seq_len", self.data.seq_len);
        kv.set("data.min_interactions", self.data.min_interactions);
        kv.set("model.d", self.model.d);
        kv.set("model.heads", self.model.heads);
        kv.set("model.layers", self.model.layers);
        kv.set("model.ffn_dim", self.model.ffn_dim);
        kv.set("model.dropout", self.model.dropout);
        kv.set("model.position", self.model.position.name());
        kv.set("model.behavior_in_input", self.model.behavior_in_input);
        kv.set("model.rope_base", self.model.rope_base);
        kv.set("diffusion.T", self.schedule.steps);
        kv.set("diffusion.beta_start", self.schedule.beta_start);
        kv.set("diffusion.beta_end", self.schedule.beta_end);
        kv.set("diffusion.omega", self.guidance.omega);
        kv.set("diffusion.null_prob", self.guidance.null_prob);
        kv.set("diffusion.stride", self.guidance.stride);
        kv.set("denoiser.kind", self.denoiser.kind.name());
        kv.set("denoiser.depth", self.denoiser.depth);
        kv.set("denoiser.m_s", self.denoiser.shared_experts);
        kv.set("denoiser.m_p", self.denoiser.private_experts);
        kv.set("denoiser.hidden", self.denoiser.hidden);
        kv.set("train.seed", self.train.seed);
        kv.set("train.weight_decay", self.train.weight_decay);
        kv.set("train.rho", self.train.rho);
        kv.set("train.sigma", self.train.sigma);
        kv.set("train.grad_clip", self.train.grad_clip);
        kv.set("train.cuts_per_user", self.train.cuts_per_user);
        for (name, s) in [
            ("stage1", &self.train.stage1),
            ("stage2", &self.train.stage2),
            ("stage3", &self.train.stage3),
        ] {
            kv.set(format!("{name}.epochs"), s.epochs);
            kv.set(format!("{name}.batch_size"), s.batch_size);
            kv.set(format!("{name}.lr"), s.lr);
        }
        let ks: Vec<String> = self.eval.ks.iter().map(ToString::to_string).collect();
        kv.set("eval.ks", ks.join(","));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.guidance.validate(self.schedule.steps)?;
        self.denoiser.validate()?;
        if self.data.seq_len < 2 {
            return Err(Error::Config("data.seq_len must be at least 2".into()));
        }
        let t = &self.train;
        if !(t.rho > 0.0 && t.rho <= 1.0) || !(t.sigma > 0.0 && t.sigma <= 1.0) {
            return Err(Error::Config("train.rho and train.sigma must lie in (0, 1]".into()));
        }
        for (name, s) in [("stage1", &t.stage1), ("stage2", &t.stage2), ("stage3", &t.stage3)] {
            if s.batch_size == 0 || !(s.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch_size and lr must be positive")));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must list positive cutoffs".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let kv = KeyValues::parse("# run\nmodel.d = 32\n\ndiffusion.T=50\n").unwrap();
        assert_eq!(kv.get("model.d"), Some("32"));
        assert_eq!(kv.get("diffusion.T"), Some("50"));
        assert_eq!(kv.len(), 2);
    }

    #[test]
    fn missing_equals_is_a_parse_error() {
        assert!(matches!(KeyValues::parse("a=1\nnope\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut c = Config::default();
        c.set("model.d", "32").unwrap();
        c.set("stage2.epochs", "7").unwrap();
        c.set("eval.ks", "5,10").unwrap();
        c.set("model.position", "rope").unwrap();
        let text = c.to_kv().to_text();
        let mut back = Config::default();
        back.apply(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn later_application_wins() {
        let mut c = Config::default();
        c.apply(&KeyValues::parse("train.seed=3").unwrap()).unwrap();
        c.apply(&KeyValues::parse("train.seed=9").unwrap()).unwrap();
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(Config::default().set("model.width", "3"), Err(Error::Config(_))));
        assert!(matches!(Config::default().set("stage4.epochs", "3"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }
}
