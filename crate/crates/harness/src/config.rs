//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; unknown
//! keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bat_core::data::{SplitMode, SynthKind, SynthSpec};
use bat_core::model::{BatConfig, FrameMode, InputMode};
use bat_core::objective::{AdamConfig, LossWeights};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: BatConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t0: f64,
    pub t_mult: f64,
    /// Scene cache; when unset, scenes come from the `synth_*` keys.
    pub data: Option<PathBuf>,
    pub split_seed: u64,
    pub split_fractions: [f64; 3],
    pub split_mode: SplitMode,
    pub subsample: f64,
    /// Evaluate the validation split every this many epochs; 0 disables it.
    pub val_every: usize,
    pub synth_kinds: Vec<SynthKind>,
    /// Scenes per synthetic kind.
    pub synth_scenes: usize,
    pub synth_agents: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: BatConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            lr: 1e-3,
            epochs: 12,
            batch_size: 256,
            t0: 3.0,
            t_mult: 2.0,
            data: None,
            split_seed: 0,
            split_fractions: [0.7, 0.1, 0.2],
            split_mode: SplitMode::ManeuverBased,
            subsample: 1.0,
            val_every: 1,
            synth_kinds: vec![SynthKind::LaneChange],
            synth_scenes: 500,
            synth_agents: 4,
            synth_noise: 0.1,
            synth_seed: 0,
        }
    }
}

/// Keys describing the network itself; a checkpoint's values win for these.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "behavior_hidden",
    "interaction_hidden",
    "position_hidden",
    "decoder_hidden",
    "input_embed",
    "behavior_embed",
    "attention_dim",
    "priority_hidden",
    "context_embed",
    "encoding_dim",
    "r",
    "t_h",
    "t_f",
    "dt",
    "rho_scale",
    "input_mode",
    "frame",
    "use_behavior",
    "use_interaction",
    "use_priority",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "behavior_hidden" => m.behavior_hidden = parse(key, value)?,
            "interaction_hidden" => m.interaction_hidden = parse(key, value)?,
            "position_hidden" => m.position_hidden = parse(key, value)?,
            "decoder_hidden" => m.decoder_hidden = parse(key, value)?,
            "input_embed" => m.input_embed = parse(key, value)?,
            "behavior_embed" => m.behavior_embed = parse(key, value)?,
            "attention_dim" => m.attention_dim = parse(key, value)?,
            "priority_hidden" => m.priority_hidden = parse(key, value)?,
            "context_embed" => m.context_embed = parse(key, value)?,
            "encoding_dim" => m.encoding_dim = parse(key, value)?,
            "r" => m.r = parse(key, value)?,
            "t_h" => m.t_h = parse(key, value)?,
            "t_f" => m.t_f = parse(key, value)?,
            "dt" => m.dt = parse(key, value)?,
            "rho_scale" => m.rho_scale = parse(key, value)?,
            "input_mode" => {
                m.input_mode = match value {
                    "polar" => InputMode::Polar,
                    "cartesian" => InputMode::Cartesian,
                    _ => return Err(HarnessError::Config(format!("bad input_mode `{value}`"))),
                }
            }
            "frame" => {
                m.frame_mode = match value {
                    "heading" => FrameMode::Heading,
                    "axis" => FrameMode::Axis,
                    _ => return Err(HarnessError::Config(format!("bad frame `{value}`"))),
                }
            }
            "use_behavior" => m.use_behavior = parse_bool(key, value)?,
            "use_interaction" => m.use_interaction = parse_bool(key, value)?,
            "use_priority" => m.use_priority = parse_bool(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "alpha_rmse" => self.loss.alpha_rmse = parse(key, value)?,
            "beta_ce" => self.loss.beta_ce = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "t0" => self.t0 = parse(key, value)?,
            "t_mult" => self.t_mult = parse(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "split_seed" => self.split_seed = parse(key, value)?,
            "train_fraction" => self.split_fractions[0] = parse(key, value)?,
            "val_fraction" => self.split_fractions[1] = parse(key, value)?,
            "test_fraction" => self.split_fractions[2] = parse(key, value)?,
            "split_mode" => {
                self.split_mode = match value {
                    "overall" => SplitMode::Overall,
                    "maneuver" => SplitMode::ManeuverBased,
                    _ => return Err(HarnessError::Config(format!("bad split_mode `{value}`"))),
                }
            }
            "subsample" => self.subsample = parse(key, value)?,
            "val_every" => self.val_every = parse(key, value)?,
            "synth_kinds" => {
                self.synth_kinds = value
                    .split(',')
                    .map(|s| SynthKind::parse(s.trim()).map_err(HarnessError::from))
                    .collect::<Result<_>>()?
            }
            "synth_scenes" => self.synth_scenes = parse(key, value)?,
            "synth_agents" => self.synth_agents = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "synth_seed" => self.synth_seed = parse(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("adam_eps", self.adam.eps)?;
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(HarnessError::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(self.t0 >= 1.0 && self.t_mult >= 1.0) {
            return Err(HarnessError::Config("t0 and t_mult must be >= 1".into()));
        }
        if !(self.loss.alpha_rmse >= 0.0 && self.loss.beta_ce >= 0.0) {
            return Err(HarnessError::Config("loss weights must be >= 0".into()));
        }
        if (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(HarnessError::Config(format!(
                "split fractions {:?} must lie in [0, 1] and sum to 1",
                self.split_fractions
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(HarnessError::Config("subsample must lie in (0, 1]".into()));
        }
        if self.synth_kinds.is_empty() {
            return Err(HarnessError::Config("synth_kinds must not be empty".into()));
        }
        if !(self.synth_noise >= 0.0 && self.synth_noise.is_finite()) {
            return Err(HarnessError::Config("synth_noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical text: every key in a fixed order. Parsing it back yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("behavior_hidden", m.behavior_hidden.to_string());
        put("interaction_hidden", m.interaction_hidden.to_string());
        put("position_hidden", m.position_hidden.to_string());
        put("decoder_hidden", m.decoder_hidden.to_string());
        put("input_embed", m.input_embed.to_string());
        put("behavior_embed", m.behavior_embed.to_string());
        put("attention_dim", m.attention_dim.to_string());
        put("priority_hidden", m.priority_hidden.to_string());
        put("context_embed", m.context_embed.to_string());
        put("encoding_dim", m.encoding_dim.to_string());
        put("r", m.r.to_string());
        put("t_h", m.t_h.to_string());
        put("t_f", m.t_f.to_string());
        put("dt", m.dt.to_string());
        put("rho_scale", m.rho_scale.to_string());
        put(
            "input_mode",
            match m.input_mode {
                InputMode::Polar => "polar",
                InputMode::Cartesian => "cartesian",
            }
            .into(),
        );
        put(
            "frame",
            match m.frame_mode {
                FrameMode::Heading => "heading",
                FrameMode::Axis => "axis",
            }
            .into(),
        );
        put("use_behavior", m.use_behavior.to_string());
        put("use_interaction", m.use_interaction.to_string());
        put("use_priority", m.use_priority.to_string());
        put("seed", m.seed.to_string());
        put("alpha_rmse", self.loss.alpha_rmse.to_string());
        put("beta_ce", self.loss.beta_ce.to_string());
        put("adam_beta1", self.adam.beta1.to_string());
        put("adam_beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("lr", self.lr.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("t0", self.t0.to_string());
        put("t_mult", self.t_mult.to_string());
        put(
            "data",
            self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("split_seed", self.split_seed.to_string());
        put("train_fraction", self.split_fractions[0].to_string());
        put("val_fraction", self.split_fractions[1].to_string());
        put("test_fraction", self.split_fractions[2].to_string());
        put(
            "split_mode",
            match self.split_mode {
                SplitMode::Overall => "overall",
                SplitMode::ManeuverBased => "maneuver",
            }
            .into(),
        );
        put("subsample", self.subsample.to_string());
        put("val_every", self.val_every.to_string());
        put(
            "synth_kinds",
            self.synth_kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
        );
        put("synth_scenes", self.synth_scenes.to_string());
        put("synth_agents", self.synth_agents.to_string());
        put("synth_noise", self.synth_noise.to_string());
        put("synth_seed", self.synth_seed.to_string());
        s
    }

    /// FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// `(key, self value, other value)` for every key that differs.
    pub fn diff(&self, other: &RunConfig) -> Vec<(String, String, String)> {
        let pairs = |c: &RunConfig| -> Vec<(String, String)> {
            c.to_text()
                .lines()
                .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
                .collect()
        };
        pairs(self)
            .into_iter()
            .zip(pairs(other))
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| (a.0, a.1, b.1))
            .collect()
    }

    /// Synthetic recipes for each configured kind, sharing horizons with the
    /// model.
    pub fn synth_specs(&self) -> Vec<SynthSpec> {
        self.synth_kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| SynthSpec {
                kind,
                n_scenes: self.synth_scenes,
                n_agents: self.synth_agents,
                noise: self.synth_noise,
                seed: self.synth_seed.wrapping_add(i as u64 * 0x9E37_79B9),
                t_h: self.model.t_h,
                t_f: self.model.t_f,
                dt: self.model.dt,
                capture_radius: 2.0 * 7.62_f64.max(self.model.r),
            })
            .collect()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["r=15.24", "input_mode=cartesian", "synth_kinds=lane_change,roundabout_arc", "data=x.bats"])
            .unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# experiment\n\nepochs = 3  # short\nlr=0.01\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let err = RunConfig::from_text("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `learning_rate`"), "{err}");
        assert!(err.to_string().contains("line 1"));
        assert!(RunConfig::from_text("epochs = many\n").is_err());
        assert!(RunConfig::from_text("no equals sign\n").is_err());
        assert!(RunConfig::from_text("lr = -1\n").is_err());
        assert!(RunConfig::from_text("t0 = 0.5\n").is_err());
        assert!(RunConfig::from_text("train_fraction = 0.9\n").is_err());
        assert!(RunConfig::from_text("use_behavior = maybe\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["epochs"]).is_err());
    }

    #[test]
    fn diff_names_changed_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.apply_overrides(&["lr=0.01", "r=0"]).unwrap();
        let d: Vec<String> = a.diff(&b).into_iter().map(|x| x.0).collect();
        assert_eq!(d, vec!["r".to_string(), "lr".to_string()]);
        assert_ne!(a.hash(), b.hash());
    }
}
