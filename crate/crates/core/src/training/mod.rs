//! Adam with decoupled weight decay under a triangular2 cyclical rate,
//! the synthetic speaker corpus and the training loop.

mod adam;
mod corpus;
mod schedule;
mod trainer;

pub use adam::{adam_step, Adam, AdamHyper, Moments};
pub use corpus::{load_wav_corpus, make_synthetic_corpus, Dataset, SyntheticCorpus, SyntheticSpec, Utterance};
pub use schedule::triangular2_lr;
pub use trainer::{batch_tensor, train, train_step, StepLoss, TraceLine, TrainOutputs, TrainReport};

use crate::architecture::config::parse_value;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_len_iters: u64,
    pub cycles: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Frames per training crop (300 = 3 s).
    pub crop_frames: usize,
    pub log_every: u64,
}

impl TrainConfig {
    /// VoxCeleb-scale recipe: four 130k-iteration cycles at batch 64.
    pub fn large() -> Self {
        Self {
            lr_min: 1e-8,
            lr_max: 1e-3,
            cycle_len_iters: 130_000,
            cycles: 4,
            batch_size: 64,
            weight_decay: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            crop_frames: 300,
            log_every: 10,
        }
    }

    /// Two 500-iteration cycles at batch 16 on short crops.
    pub fn desk() -> Self {
        Self {
            cycle_len_iters: 500,
            cycles: 2,
            batch_size: 16,
            crop_frames: 32,
            ..Self::large()
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.cycle_len_iters * self.cycles
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // written positively so NaN fails too
        let ordered = self.lr_min >= 0.0 && self.lr_min < self.lr_max;
        if !ordered {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycle_len_iters == 0 || self.cycles == 0 || self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("cycle length, cycles, batch size and crop must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "lr_min",
        "lr_max",
        "cycle_len_iters",
        "cycles",
        "batch_size",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "seed",
        "crop_frames",
        "log_every",
    ];

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_min", self.lr_min.to_string()),
            ("lr_max", self.lr_max.to_string()),
            ("cycle_len_iters", self.cycle_len_iters.to_string()),
            ("cycles", self.cycles.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("crop_frames", self.crop_frames.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "lr_max" => self.lr_max = parse_value(key, value)?,
            "cycle_len_iters" => self.cycle_len_iters = parse_value(key, value)?,
            "cycles" => self.cycles = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "crop_frames" => self.crop_frames = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown training key '{other}'"))),
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
