//! Run configuration as a flat map of dotted keys (`position.mode`,
//! `train.epochs`, ...) plus the typed views the modules consume.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Decoder wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both branches, fused.
    Full,
    /// Position enhancement branch only.
    NoHb,
    /// Hybrid branch only.
    NoPeb,
}

/// Attention keys of the position enhancement branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Row LSTMs plus convolutions (position aware module).
    LearnedPam,
    /// Encoder features concatenated with sinusoidal column encodings.
    Sincos,
    /// Raw encoder features.
    None,
}

/// Which map the position branch aggregates into its glimpse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionValues {
    F,
    FHat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Dynamic,
    Add,
    Concat,
}

macro_rules! impl_str_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $s),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

impl_str_enum!(Variant { Full => "full", NoHb => "no_hb", NoPeb => "no_peb" });
impl_str_enum!(PositionMode { LearnedPam => "learned_pam", Sincos => "sincos", None => "none" });
impl_str_enum!(PositionValues { F => "F", FHat => "F_hat" });
impl_str_enum!(FusionMode { Dynamic => "dynamic", Add => "add", Concat => "concat" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Pooling window `[vertical, horizontal]` after each block; `[1, 1]`
    /// means no pooling.
    pub pool: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub height: usize,
    pub min_width: usize,
    pub max_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub position_mode: PositionMode,
    pub position_values: PositionValues,
    pub fusion_mode: FusionMode,
    /// Feature, query and glimpse width (128 in the reference setting).
    pub d_model: usize,
    /// Number of position embeddings, i.e. the decoding step limit.
    pub t_max: usize,
    pub encoder: EncoderConfig,
    pub input: InputConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            position_mode: PositionMode::LearnedPam,
            position_values: PositionValues::F,
            fusion_mode: FusionMode::Dynamic,
            d_model: 128,
            t_max: 36,
            encoder: EncoderConfig {
                channels: vec![16, 32, 64, 128],
                pool: vec![[2, 2], [2, 2], [1, 1], [1, 1]],
            },
            input: InputConfig {
                height: 16,
                min_width: 16,
                max_width: 64,
            },
        }
    }
}

impl ModelConfig {
    /// The image sizing of the full-scale setting: height 48, widths 48..160.
    pub fn reference_input() -> InputConfig {
        InputConfig {
            height: 48,
            min_width: 48,
            max_width: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::NoHb && self.position_mode == PositionMode::None {
            return Err(Error::Config(
                "variant no_hb needs a position branch; position.mode must not be none".into(),
            ));
        }
        if self.position_values == PositionValues::FHat && self.position_mode != PositionMode::LearnedPam {
            return Err(Error::Config("position.values F_hat requires position.mode learned_pam".into()));
        }
        if self.d_model == 0 || self.t_max < 2 {
            return Err(Error::Config("d_model must be ≥ 1 and t_max ≥ 2".into()));
        }
        if self.encoder.channels.is_empty() || self.encoder.channels.contains(&0) {
            return Err(Error::Config("encoder.channels must be non-empty and positive".into()));
        }
        if self.encoder.pool.len() != self.encoder.channels.len() {
            return Err(Error::Config(format!(
                "encoder.pool has {} entries for {} blocks",
                self.encoder.pool.len(),
                self.encoder.channels.len()
            )));
        }
        if self.encoder.pool.iter().flatten().any(|&p| p == 0) {
            return Err(Error::Config("encoder.pool windows must be ≥ 1".into()));
        }
        let i = &self.input;
        if i.height == 0 || i.min_width == 0 || i.min_width > i.max_width {
            return Err(Error::Config("input sizes must satisfy 0 < min_width ≤ max_width, height > 0".into()));
        }
        Ok(())
    }

    /// Uses the hybrid branch.
    pub fn has_hybrid(&self) -> bool {
        self.variant != Variant::NoHb
    }

    /// Uses the position enhancement branch.
    pub fn has_position(&self) -> bool {
        self.variant != Variant::NoPeb
    }

    /// Total vertical and horizontal downsampling of the encoder.
    pub fn stride(&self) -> (usize, usize) {
        self.encoder
            .pool
            .iter()
            .fold((1, 1), |(v, h), p| (v * p[0], h * p[1]))
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// `(epoch, lr)`: from 1-based `epoch` onwards the rate is `lr`.
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Cap on training samples re-decoded for `train_acc`; `None` = all.
    pub train_acc_samples: Option<usize>,
    /// Write wall-clock seconds into the metrics CSV (breaks byte-identical
    /// reruns; timings always go to the side file regardless).
    pub log_wall_time: bool,
    pub case_sensitive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            schedule: vec![(3, 1e-4), (4, 1e-5)],
            batch_size: 32,
            epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_norm: None,
            train_acc_samples: None,
            log_wall_time: false,
            case_sensitive: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map_or(self.base_lr, |&(_, lr)| lr)
    }
}

/// Flat dotted-key configuration; the serialized form of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, Value>,
}

impl Default for FlatConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let entries = [
            ("seed", json!(0)),
            ("model.variant", json!(m.variant.as_str())),
            ("model.d_model", json!(m.d_model)),
            ("position.mode", json!(m.position_mode.as_str())),
            ("position.values", json!(m.position_values.as_str())),
            ("position.t_max", json!(m.t_max)),
            ("fusion.mode", json!(m.fusion_mode.as_str())),
            ("encoder.blocks", json!(m.encoder.channels.len())),
            ("encoder.channels", json!(m.encoder.channels)),
            ("encoder.pool", json!(m.encoder.pool)),
            ("input.height", json!(m.input.height)),
            ("input.min_width", json!(m.input.min_width)),
            ("input.max_width", json!(m.input.max_width)),
            ("train.base_lr", json!(t.base_lr)),
            ("train.schedule", json!(t.schedule)),
            ("train.batch_size", json!(t.batch_size)),
            ("train.epochs", json!(t.epochs)),
            ("train.beta1", json!(t.beta1)),
            ("train.beta2", json!(t.beta2)),
            ("train.eps", json!(t.eps)),
            ("train.clip_norm", Value::Null),
            ("train.train_acc_samples", Value::Null),
            ("train.log_wall_time", json!(false)),
            ("eval.case_sensitive", json!(false)),
            ("data.val_fraction", json!(0.1)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { entries }
    }
}

impl FlatConfig {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    /// Sets a known key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Sets a key from command-line text: JSON if it parses, else a string.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key, value)
    }

    /// Overlays every key of a JSON object onto `self`.
    pub fn merge_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object of dotted keys".into()));
        };
        for (k, v) in map {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_json(text)?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, Value> = self.entries.clone().into_iter().collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("JSON values serialize");
        s.push('\n');
        s
    }

    fn typed<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.entries.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))
    }

    fn parsed<T: FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        self.typed::<String>(key)?.parse()
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn val_fraction(&self) -> Result<f64> {
        let f: f64 = self.typed("data.val_fraction")?;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config("data.val_fraction must lie in [0, 1)".into()));
        }
        Ok(f)
    }

    pub fn case_sensitive(&self) -> Result<bool> {
        self.typed("eval.case_sensitive")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let channels: Vec<usize> = self.typed("encoder.channels")?;
        let blocks: usize = self.typed("encoder.blocks")?;
        if blocks != channels.len() {
            return Err(Error::Config(format!(
                "encoder.blocks = {blocks} but encoder.channels lists {}",
                channels.len()
            )));
        }
        let cfg = ModelConfig {
            variant: self.parsed("model.variant")?,
            position_mode: self.parsed("position.mode")?,
            position_values: self.parsed("position.values")?,
            fusion_mode: self.parsed("fusion.mode")?,
            d_model: self.typed("model.d_model")?,
            t_max: self.typed("position.t_max")?,
            encoder: EncoderConfig {
                channels,
                pool: self.typed("encoder.pool")?,
            },
            input: InputConfig {
                height: self.typed("input.height")?,
                min_width: self.typed("input.min_width")?,
                max_width: self.typed("input.max_width")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            base_lr: self.typed("train.base_lr")?,
            schedule: self.typed("train.schedule")?,
            batch_size: self.typed("train.batch_size")?,
            epochs: self.typed("train.epochs")?,
            beta1: self.typed("train.beta1")?,
            beta2: self.typed("train.beta2")?,
            eps: self.typed("train.eps")?,
            seed: self.seed()?,
            clip_norm: self.typed("train.clip_norm")?,
            train_acc_samples: self.typed("train.train_acc_samples")?,
            log_wall_time: self.typed("train.log_wall_time")?,
            case_sensitive: self.case_sensitive()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the typed model settings back into the flat keys.
    pub fn set_model_config(&mut self, m: &ModelConfig) -> Result<()> {
        self.set("model.variant", json!(m.variant.as_str()))?;
        self.set("model.d_model", json!(m.d_model))?;
        self.set("position.mode", json!(m.position_mode.as_str()))?;
        self.set("position.values", json!(m.position_values.as_str()))?;
        self.set("position.t_max", json!(m.t_max))?;
        self.set("fusion.mode", json!(m.fusion_mode.as_str()))?;
        self.set("encoder.blocks", json!(m.encoder.channels.len()))?;
        self.set("encoder.channels", json!(m.encoder.channels))?;
        self.set("encoder.pool", json!(m.encoder.pool))?;
        self.set("input.height", json!(m.input.height))?;
        self.set("input.min_width", json!(m.input.min_width))?;
        self.set("input.max_width", json!(m.input.max_width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let c = FlatConfig::default();
        let back = FlatConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.model_config().unwrap(), ModelConfig::default());
        assert_eq!(back.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_key_and_bad_enum_are_config_errors() {
        let mut c = FlatConfig::default();
        assert!(matches!(c.set("nope", json!(1)), Err(Error::Config(_))));
        c.set_str("model.variant", "bogus").unwrap();
        assert!(matches!(c.model_config(), Err(Error::Config(_))));
    }

    #[test]
    fn no_hb_without_position_branch_is_rejected() {
        let mut c = FlatConfig::default();
        c.set_str("model.variant", "no_hb").unwrap();
        c.set_str("position.mode", "none").unwrap();
        assert!(matches!(c.model_config(), Err(Error::Config(_))));
        // no_peb ignores position.mode
        c.set_str("model.variant", "no_peb").unwrap();
        assert!(c.model_config().is_ok());
    }

    #[test]
    fn schedule_lookup() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(1), 1e-3);
        assert_eq!(t.lr_at(2), 1e-3);
        assert_eq!(t.lr_at(3), 1e-4);
        assert_eq!(t.lr_at(4), 1e-5);
        assert_eq!(t.lr_at(5), 1e-5);
        let bad = TrainConfig {
            schedule: vec![(4, 1e-4), (3, 1e-5)],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn set_str_parses_json_or_falls_back_to_string() {
        let mut c = FlatConfig::default();
        c.set_str("encoder.channels", "[8,16]").unwrap();
        c.set_str("encoder.blocks", "2").unwrap();
        c.set_str("encoder.pool", "[[2,2],[2,2]]").unwrap();
        c.set_str("position.values", "F_hat").unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.encoder.channels, vec![8, 16]);
        assert_eq!(m.position_values, PositionValues::FHat);
        assert_eq!(m.stride(), (4, 4));
    }
}
