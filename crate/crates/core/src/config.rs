//! The run configuration tree: presets, TOML files and `--a.b=value` overrides.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, Source};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Margin, MarginEntry, MarginSchedule};
use crate::metrics::{ExtractorConfig, PplConfig};
use crate::model::NetworkConfig;
use crate::normalization::NormScheme;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Generated and real samples per FID estimate.
    pub fid_samples: usize,
    pub ppl: PplConfig,
    pub extractor: ExtractorConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fid_samples: 1000,
            ppl: PplConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub checkpoint: String,
    pub bind: String,
    /// Largest accepted decoded request image payload, in bytes.
    pub max_image_bytes: usize,
    /// Directory of stored attribute vectors (`*.json`); empty for none.
    pub attributes_dir: String,
    /// CORS origin allowed to call the API.
    pub allowed_origin: String,
    pub max_lambda: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            bind: "127.0.0.1:8080".into(),
            max_image_bytes: 4 << 20,
            attributes_dir: String::new(),
            allowed_origin: "*".into(),
            max_lambda: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: NetworkConfig,
    pub norm: NormScheme,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub metrics: MetricsConfig,
    pub serve: ServeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Preset::CelebahqPaper.config()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    CelebahqPaper,
    LsunPaper,
    DeskSynthetic,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::CelebahqPaper, Preset::LsunPaper, Preset::DeskSynthetic];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CelebahqPaper => "celebahq-paper",
            Preset::LsunPaper => "lsun-paper",
            Preset::DeskSynthetic => "desk-synthetic",
        }
    }

    pub fn config(self) -> Config {
        match self {
            Preset::CelebahqPaper => paper_config(
                vec![2_400_000, 2_400_000, 2_400_000, 2_400_000, 4_800_000, 5_640_000, 7_260_000],
                0.2,
                20_040_000,
            ),
            Preset::LsunPaper => paper_config(
                vec![2_400_000, 2_400_000, 2_400_000, 2_400_000, 5_600_000, 6_200_000, 5_900_000],
                0.6,
                21_400_000,
            ),
            Preset::DeskSynthetic => desk_config(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config("preset", format!("unknown preset `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

fn paper_config(phase_samples: Vec<u64>, early_margin: f64, pretrain_end: u64) -> Config {
    let mut data = DatasetSpec::default();
    data.source = Source::Directory;
    Config {
        seed: 0,
        model: NetworkConfig::new(512, 256),
        norm: NormScheme::balanced(),
        train: TrainConfig {
            phase_samples,
            batch_schedule: vec![128, 128, 128, 128, 64, 32, 16],
            margin_schedule: MarginSchedule {
                entries: vec![
                    MarginEntry {
                        threshold: 13_000_000,
                        min_level: 4,
                        m_gap: Margin(early_margin),
                    },
                    MarginEntry {
                        threshold: pretrain_end,
                        min_level: 6,
                        m_gap: Margin(0.4),
                    },
                ],
            },
            ..TrainConfig::default()
        },
        data,
        metrics: MetricsConfig {
            fid_samples: 50_000,
            ..MetricsConfig::default()
        },
        serve: ServeConfig::default(),
    }
}

fn desk_config() -> Config {
    let mut model = NetworkConfig::new(32, 32);
    model.channel_schedule = vec![32, 32, 32, 16];
    Config {
        seed: 0,
        model,
        norm: NormScheme::balanced(),
        train: TrainConfig {
            sample_scale: 1e-3,
            phase_samples: vec![2_400_000; 4],
            batch_schedule: vec![16; 4],
            ema_decay: 0.99,
            margin_schedule: MarginSchedule {
                // Without the bound the encoder wins within the first few
                // hundred samples at this budget, so it is on from the start.
                entries: vec![MarginEntry {
                    threshold: 0,
                    min_level: 0,
                    m_gap: Margin(0.2),
                }],
            },
            // KL is summed over the latent dims, so the code-reconstruction weight is
            // scaled by the latent size to keep the same balance against it.
            loss: LossWeights {
                lambda_x: 10.0,
                lambda_z: 320.0,
            },
            metric_every: 400,
            ..TrainConfig::default()
        },
        data: DatasetSpec::default(),
        metrics: MetricsConfig {
            ppl: PplConfig {
                pairs: 200,
                ..PplConfig::default()
            },
            ..MetricsConfig::default()
        },
        serve: ServeConfig::default(),
    }
}

fn describe(e: impl std::fmt::Display) -> String {
    e.to_string().trim().replace('\n', " ")
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(name.parse::<Preset>()?.config())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.norm.validate()?;
        self.train.validate(self.model.levels())?;
        self.data.validate()?;
        if self.data.source == Source::Synthetic && self.model.image_channels != 3 {
            return Err(Error::config("model.image_channels", "synthetic data is RGB"));
        }
        if self.metrics.fid_samples < 2 {
            return Err(Error::config("metrics.fid_samples", "must be >= 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", describe(e)))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config("config", describe(e)))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config converts to a TOML tree")
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        value.try_into().map_err(|e: toml::de::Error| {
            let msg = describe(&e);
            let key = msg
                .split('`')
                .nth(1)
                .filter(|k| !k.contains(' '))
                .unwrap_or("config")
                .to_string();
            Error::config(key, msg)
        })
    }

    /// Every addressable key, dotted, in schema order. Tables are listed
    /// alongside their leaves so whole sub-trees can be replaced.
    pub fn keys() -> Vec<String> {
        let mut out = Vec::new();
        collect_keys(&Preset::DeskSynthetic.config().to_value(), "", &mut out);
        out
    }

    /// Leaf keys with their values rendered as TOML.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten_into(&self.to_value(), "", &mut out);
        out
    }

    /// Applies `key=value`; the value is parsed as a TOML literal and falls
    /// back to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let tree = self.to_value();
        let mut probe = tree.clone();
        lookup_mut(&mut probe, key)?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"));
        let attempts = parsed
            .into_iter()
            .chain(std::iter::once(toml::Value::String(raw.to_string())));
        let mut last = None;
        for candidate in attempts {
            let mut next = tree.clone();
            *lookup_mut(&mut next, key)? = candidate;
            match Self::from_value(next) {
                Ok(cfg) => {
                    *self = cfg;
                    return Ok(());
                }
                Err(e) => last = Some(e),
            }
        }
        let reason = match last {
            Some(Error::Config { reason, .. }) => reason,
            Some(other) => other.to_string(),
            None => "invalid value".into(),
        };
        Err(Error::config(key, reason))
    }

    /// Applies a list of `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Config) -> Vec<String> {
        let a = self.flatten();
        let b = other.flatten();
        let mut keys: Vec<String> = a.iter().chain(&b).map(|(k, _)| k.clone()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| {
                let va = a.iter().find(|(x, _)| x == k).map(|(_, v)| v);
                let vb = b.iter().find(|(x, _)| x == k).map(|(_, v)| v);
                va != vb
            })
            .collect()
    }
}

fn lookup_mut<'a>(tree: &'a mut toml::Value, key: &str) -> Result<&'a mut toml::Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
    }
    Ok(node)
}

fn collect_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(key.clone());
            collect_keys(child, &key, out);
        }
    }
}

fn flatten_into(v: &toml::Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(child, &key, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::MarginOverride;

    #[test]
    fn presets_validate_except_missing_paths() {
        assert!(Preset::DeskSynthetic.config().validate().is_ok());
        for p in [Preset::CelebahqPaper, Preset::LsunPaper] {
            match p.config().validate() {
                Err(Error::Config { key, .. }) => assert_eq!(key, "data.path"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn paper_schedules_sum_to_stated_totals() {
        let c = Preset::CelebahqPaper.config().train;
        assert_eq!(c.phase_samples[..6].iter().sum::<u64>(), 20_040_000);
        let l = Preset::LsunPaper.config().train;
        assert_eq!(l.phase_samples[..6].iter().sum::<u64>(), 21_400_000);
    }

    #[test]
    fn toml_roundtrip() {
        for p in Preset::ALL {
            let c = p.config();
            let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn overrides_parse_typed_values() {
        let mut c = Preset::DeskSynthetic.config();
        c.apply_overrides(&["seed=7", "train.margin=inf", "norm.spectral=false", "data.path=/tmp/x"])
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.margin, MarginOverride::Fixed(Margin::DISABLED));
        assert_eq!(c.norm.spectral, crate::normalization::Sites::None);
        assert_eq!(c.data.path, "/tmp/x");
        c.set("train.margin", "0.3").unwrap();
        assert_eq!(c.train.margin, MarginOverride::Fixed(Margin(0.3)));
    }

    #[test]
    fn unknown_or_bad_keys_are_named() {
        let mut c = Preset::DeskSynthetic.config();
        match c.set("train.nope", "1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.nope"),
            other => panic!("{other:?}"),
        }
        match c.set("train.ema_decay", "fast") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.ema_decay"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn keys_cover_nested_leaves() {
        let keys = Config::keys();
        for k in ["seed", "model.latent_dim", "train.optimizer.beta2", "norm.spectral", "serve.bind"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }

    #[test]
    fn diff_lists_changed_leaves() {
        let a = Preset::DeskSynthetic.config();
        let mut b = a.clone();
        b.norm = NormScheme::none();
        let d = a.diff(&b);
        assert_eq!(d, vec!["norm.spectral".to_string()]);
    }
}
