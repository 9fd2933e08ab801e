//! Runtime configuration: architecture switches, training hyperparameters and
//! evaluation settings, all addressable through a flat `key = value` config
//! file plus `--set key=value` command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which backbone features feed a decoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedLevel {
    /// The stride-4 concatenation of the first three pyramid levels.
    Low,
    /// The stride-16 top pyramid level.
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderStreams {
    Two,
    One,
}

/// Architecture variant switches. The defaults are the reference
/// configuration; the other settings exist for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_wl: bool,
    pub use_am: bool,
    pub re_ie_feed: FeedLevel,
    pub ne_de_feed: FeedLevel,
    /// Pyramid levels whose spatial cues feed the RE/IE heads.
    pub re_ie_spatial: Vec<usize>,
    /// Pyramid levels whose spatial cues feed the NE/DE heads.
    pub ne_de_spatial: Vec<usize>,
    pub decoder_streams: DecoderStreams,
    pub ne_de_share_second_stream: bool,
    pub generic_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_wl: true,
            use_am: true,
            re_ie_feed: FeedLevel::Low,
            ne_de_feed: FeedLevel::High,
            re_ie_spatial: vec![1, 2, 3],
            ne_de_spatial: vec![1, 2, 3, 4, 5],
            decoder_streams: DecoderStreams::Two,
            ne_de_share_second_stream: true,
            generic_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for set in [&self.re_ie_spatial, &self.ne_de_spatial] {
            for &k in set {
                if !(1..=5).contains(&k) {
                    return Err(Error::Config(format!(
                        "spatial cue level {k} out of range 1..=5"
                    )));
                }
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if &sorted != set {
                return Err(Error::Config(
                    "spatial cue levels must be sorted and unique".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Optimization settings. Defaults follow the reference recipe: SGD with
/// momentum 0.9, initial learning rate 1e-5 decayed per epoch by the poly
/// policy, 70 epochs at batch size 4 on 320x320 crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub crop: usize,
    pub lambda: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub alpha2: f64,
    pub gamma2: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-5,
            momentum: 0.9,
            epochs: 70,
            batch_size: 4,
            poly_power: 0.9,
            weight_decay: 0.0,
            seed: 7,
            crop: 320,
            lambda: 0.1,
            beta: 4.0,
            gamma1: 0.5,
            alpha2: 0.5,
            gamma2: 2.0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("poly_power", self.poly_power),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("alpha2", self.alpha2),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.lambda > 1.0 {
            return Err(Error::Config("lambda must be in [0, 1]".into()));
        }
        if self.alpha2 > 1.0 {
            return Err(Error::Config("alpha2 must be in [0, 1]".into()));
        }
        if self.gamma2 < 0.0 || !self.gamma2.is_finite() {
            return Err(Error::Config("gamma2 must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::Config("crop must be a positive multiple of 16".into()));
        }
        Ok(())
    }
}

/// Benchmark evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Match tolerance as a fraction of the image diagonal.
    pub max_dist_frac: f64,
    /// Number of evenly spaced thresholds, k/(n+1) for k in 1..=n.
    pub num_thresholds: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            max_dist_frac: 0.0075,
            num_thresholds: 99,
        }
    }
}

/// The full runtime configuration as seen by every command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected bool, got `{v}`"))),
    }
}

fn parse_levels(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: bad level list `{v}`")))
        })
        .collect()
}

fn levels_to_string(levels: &[usize]) -> String {
    if levels.is_empty() {
        "none".to_string()
    } else {
        levels
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! parse_num {
    ($key:expr, $v:expr, $ty:ty) => {
        $v.parse::<$ty>()
            .map_err(|_| Error::Config(format!("{}: bad value `{}`", $key, $v)))?
    };
}

impl Config {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "use_wl" => self.model.use_wl = parse_bool(key, v)?,
            "use_am" => self.model.use_am = parse_bool(key, v)?,
            "re_ie_feed" => self.model.re_ie_feed = Self::parse_feed(key, v)?,
            "ne_de_feed" => self.model.ne_de_feed = Self::parse_feed(key, v)?,
            "re_ie_spatial" => self.model.re_ie_spatial = parse_levels(key, v)?,
            "ne_de_spatial" => self.model.ne_de_spatial = parse_levels(key, v)?,
            "decoder_streams" => {
                self.model.decoder_streams = match v {
                    "two" | "2" => DecoderStreams::Two,
                    "one" | "1" => DecoderStreams::One,
                    _ => return Err(Error::Config(format!("{key}: expected one|two, got `{v}`"))),
                }
            }
            "ne_de_share_second_stream" => {
                self.model.ne_de_share_second_stream = parse_bool(key, v)?
            }
            "generic_mode" => self.model.generic_mode = parse_bool(key, v)?,
            "lr0" => self.train.lr0 = parse_num!(key, v, f64),
            "momentum" => self.train.momentum = parse_num!(key, v, f64),
            "epochs" => self.train.epochs = parse_num!(key, v, usize),
            "batch_size" => self.train.batch_size = parse_num!(key, v, usize),
            "poly_power" => self.train.poly_power = parse_num!(key, v, f64),
            "weight_decay" => self.train.weight_decay = parse_num!(key, v, f64),
            "seed" => self.train.seed = parse_num!(key, v, u64),
            "crop" => self.train.crop = parse_num!(key, v, usize),
            "lambda" => self.train.lambda = parse_num!(key, v, f64),
            "beta" => self.train.beta = parse_num!(key, v, f64),
            "gamma1" => self.train.gamma1 = parse_num!(key, v, f64),
            "alpha2" => self.train.alpha2 = parse_num!(key, v, f64),
            "gamma2" => self.train.gamma2 = parse_num!(key, v, f64),
            "checkpoint_every" => self.train.checkpoint_every = parse_num!(key, v, usize),
            "max_dist_frac" => self.eval.max_dist_frac = parse_num!(key, v, f64),
            "num_thresholds" => self.eval.num_thresholds = parse_num!(key, v, usize),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn parse_feed(key: &str, v: &str) -> Result<FeedLevel> {
        match v {
            "low" => Ok(FeedLevel::Low),
            "high" => Ok(FeedLevel::High),
            _ => Err(Error::Config(format!("{key}: expected low|high, got `{v}`"))),
        }
    }

    /// Parse a flat `key = value` config file. `#` starts a comment, blank
    /// lines are ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply repeated `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects key=value, got `{item}`"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// All settings as an ordered key -> value map; the source of truth for
    /// the startup echo, the config hash and checkpoint manifests.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("use_wl", m.use_wl.to_string());
        put("use_am", m.use_am.to_string());
        put(
            "re_ie_feed",
            match m.re_ie_feed {
                FeedLevel::Low => "low".into(),
                FeedLevel::High => "high".into(),
            },
        );
        put(
            "ne_de_feed",
            match m.ne_de_feed {
                FeedLevel::Low => "low".into(),
                FeedLevel::High => "high".into(),
            },
        );
        put("re_ie_spatial", levels_to_string(&m.re_ie_spatial));
        put("ne_de_spatial", levels_to_string(&m.ne_de_spatial));
        put(
            "decoder_streams",
            match m.decoder_streams {
                DecoderStreams::Two => "two".into(),
                DecoderStreams::One => "one".into(),
            },
        );
        put(
            "ne_de_share_second_stream",
            m.ne_de_share_second_stream.to_string(),
        );
        put("generic_mode", m.generic_mode.to_string());
        put("lr0", format!("{}", t.lr0));
        put("momentum", format!("{}", t.momentum));
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("poly_power", format!("{}", t.poly_power));
        put("weight_decay", format!("{}", t.weight_decay));
        put("seed", t.seed.to_string());
        put("crop", t.crop.to_string());
        put("lambda", format!("{}", t.lambda));
        put("beta", format!("{}", t.beta));
        put("gamma1", format!("{}", t.gamma1));
        put("alpha2", format!("{}", t.alpha2));
        put("gamma2", format!("{}", t.gamma2));
        put("checkpoint_every", t.checkpoint_every.to_string());
        put("max_dist_frac", format!("{}", e.max_dist_frac));
        put("num_thresholds", e.num_thresholds.to_string());
        out
    }

    /// Render the effective configuration as `key = value` lines; rerunnable
    /// as a config file.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.as_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short content hash of the effective configuration.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.echo().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::new();
        for b in &digest[..8] {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_configuration() {
        let c = Config::default();
        assert!(c.model.use_wl && c.model.use_am);
        assert_eq!(c.model.re_ie_feed, FeedLevel::Low);
        assert_eq!(c.model.ne_de_feed, FeedLevel::High);
        assert_eq!(c.model.re_ie_spatial, vec![1, 2, 3]);
        assert_eq!(c.model.ne_de_spatial, vec![1, 2, 3, 4, 5]);
        assert_eq!(c.model.decoder_streams, DecoderStreams::Two);
        assert!(c.model.ne_de_share_second_stream);
        assert!(!c.model.generic_mode);
        assert_eq!(c.train.lr0, 1e-5);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.epochs, 70);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.crop, 320);
        assert_eq!(c.train.lambda, 0.1);
        assert_eq!(c.train.beta, 4.0);
        assert_eq!(c.train.gamma1, 0.5);
        assert_eq!(c.train.alpha2, 0.5);
        assert_eq!(c.train.gamma2, 2.0);
        c.validate().unwrap();
    }

    #[test]
    fn set_and_echo_round_trip() {
        let mut c = Config::default();
        c.set("use_am", "false").unwrap();
        c.set("re_ie_spatial", "1,2,3,4,5").unwrap();
        c.set("lr0", "0.001").unwrap();
        let echo = c.echo();
        assert!(echo.contains("use_am = false"));
        assert!(echo.contains("re_ie_spatial = 1,2,3,4,5"));

        // Echo parses back to an identical configuration.
        let dir = std::env::temp_dir().join(format!("rindnet-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("echo.cfg");
        std::fs::write(&path, &echo).unwrap();
        let mut c2 = Config::default();
        c2.load_file(&path).unwrap();
        assert_eq!(c, c2);
        assert_eq!(c.hash(), c2.hash());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut c = Config::default();
        let err = c.set("nope", "1").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = Config::default();
        c.set("lambda", "1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("crop", "100").unwrap();
        assert!(c.validate().is_err());
    }
}
