//! Run configuration: network, training, corpus and path settings under one
//! flat key space (`network.channels`, `train.lr_max`, `paths.trial_list`).

use std::path::{Path, PathBuf};

use maccif_core::experiment::HeldOut;
use maccif_core::training::{SyntheticSpec, TrainConfig};
use maccif_core::{Error, NetworkConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Large,
}

impl Preset {
    fn parse(v: &str) -> Result<Self> {
        match v {
            "desk" => Ok(Self::Desk),
            "large" => Ok(Self::Large),
            _ => Err(Error::Config(format!("preset: expected desk or large, got '{v}'"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub trial_list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Synthetic training corpus (`--synthetic`).
    pub corpus: SyntheticSpec,
    /// Held-out synthetic evaluation set.
    pub eval: HeldOut,
    pub paths: Paths,
}

const CORPUS_KEYS: [&str; 6] = ["speakers", "utts_per_speaker", "frames", "noise_scale", "jitter", "seed"];
const EVAL_KEYS: [&str; 4] = ["utts_per_speaker", "target_trials", "nontarget_trials", "seed"];
const PATH_KEYS: [&str; 4] = ["corpus_dir", "feature_cache", "checkpoint_dir", "trial_list"];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (network, train) = match p {
            Preset::Desk => (NetworkConfig::desk(), TrainConfig::desk()),
            Preset::Large => (NetworkConfig::large(), TrainConfig::large()),
        };
        Self {
            preset: p,
            network,
            train,
            corpus: SyntheticSpec::desk(0),
            eval: HeldOut::default(),
            paths: Paths::default(),
        }
    }

    /// Builds from `key=value` pairs in order. A `preset` anywhere resets
    /// everything first, so it never clobbers explicit keys.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let preset = match pairs.iter().rev().find(|(k, _)| *k == "preset") {
            Some((_, v)) => Preset::parse(v)?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs.into_iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one qualified key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key '{key}'"));
        let (section, name) = key.split_once('.').ok_or_else(unknown)?;
        match section {
            "network" => self.network.set(name, value),
            "train" => self.train.set(name, value),
            "corpus" => {
                let c = &mut self.corpus;
                match name {
                    "speakers" => c.speakers = num(key, value)?,
                    "utts_per_speaker" => c.utts_per_speaker = num(key, value)?,
                    "frames" => c.frames = num(key, value)?,
                    "noise_scale" => c.noise_scale = num(key, value)?,
                    "jitter" => c.jitter = num(key, value)?,
                    "seed" => c.seed = num(key, value)?,
                    _ => return Err(unknown()),
                }
                Ok(())
            }
            "eval" => {
                let e = &mut self.eval;
                match name {
                    "utts_per_speaker" => e.utts_per_speaker = num(key, value)?,
                    "target_trials" => e.target_trials = num(key, value)?,
                    "nontarget_trials" => e.nontarget_trials = num(key, value)?,
                    "seed" => e.seed = num(key, value)?,
                    _ => return Err(unknown()),
                }
                Ok(())
            }
            "paths" => {
                let slot = match name {
                    "corpus_dir" => &mut self.paths.corpus_dir,
                    "feature_cache" => &mut self.paths.feature_cache,
                    "checkpoint_dir" => &mut self.paths.checkpoint_dir,
                    "trial_list" => &mut self.paths.trial_list,
                    _ => return Err(unknown()),
                };
                *slot = (!value.is_empty()).then(|| PathBuf::from(value));
                Ok(())
            }
            _ => Err(unknown()),
        }
        .map_err(|e| match e {
            // the core setters name the bare key
            Error::Config(msg) if !msg.contains(key) => Error::Config(format!("{key}: {msg}")),
            e => e,
        })
    }

    /// `--seed` drives both the model/optimizer stream and the synthetic corpus.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.corpus.seed = seed;
    }

    /// Every setting as qualified `key=value` text; feeding these back through
    /// [`RunConfig::from_pairs`] reproduces the config exactly.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("preset".to_string(), self.preset.name().to_string())];
        out.extend(self.network.entries().into_iter().map(|(k, v)| (format!("network.{k}"), v)));
        out.extend(self.train.entries().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        let c = &self.corpus;
        let corpus = [
            c.speakers.to_string(),
            c.utts_per_speaker.to_string(),
            c.frames.to_string(),
            c.noise_scale.to_string(),
            c.jitter.to_string(),
            c.seed.to_string(),
        ];
        out.extend(CORPUS_KEYS.iter().zip(corpus).map(|(k, v)| (format!("corpus.{k}"), v)));
        let e = &self.eval;
        let eval = [
            e.utts_per_speaker.to_string(),
            e.target_trials.to_string(),
            e.nontarget_trials.to_string(),
            e.seed.to_string(),
        ];
        out.extend(EVAL_KEYS.iter().zip(eval).map(|(k, v)| (format!("eval.{k}"), v)));
        let p = &self.paths;
        let paths = [&p.corpus_dir, &p.feature_cache, &p.checkpoint_dir, &p.trial_list];
        out.extend(PATH_KEYS.iter().zip(paths).map(|(k, v)| {
            let v = v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            (format!("paths.{k}"), v)
        }));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }

    /// Parses a TOML file. Keys may be written qualified at the top level
    /// (`"network.channels" = 128`) or inside `[network]`-style tables.
    pub fn parse_toml(text: &str) -> Result<Vec<(String, String)>> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        let mut pairs = Vec::new();
        for (k, v) in table {
            match v {
                toml::Value::Table(section) => {
                    for (name, v) in section {
                        let key = format!("{k}.{name}");
                        let v = scalar(&key, v)?;
                        pairs.push((key, v));
                    }
                }
                v => {
                    let v = scalar(&k, v)?;
                    pairs.push((k, v));
                }
            }
        }
        Ok(pairs)
    }

    /// Config file (if any) then `key=value` overrides, in that order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse_toml(&text)?
            }
            None => Vec::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{o}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

fn scalar(key: &str, v: toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(Error::Config(format!("{key}: expected a string, number or boolean"))),
    }
}
