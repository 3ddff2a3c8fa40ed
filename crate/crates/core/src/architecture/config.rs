use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Kernel size and dilation of one SE-Res2Block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kernel: usize,
    pub dilation: usize,
}

/// Which frame map feeds the Transformer encoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInput {
    /// Initial conv output plus every block output.
    BlockSum,
    /// Output of the initial conv layer only.
    InitialConv,
}

impl fmt::Display for EncoderInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderInput::BlockSum => "block_sum",
            EncoderInput::InitialConv => "initial_conv",
        })
    }
}

impl FromStr for EncoderInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_sum" => Ok(EncoderInput::BlockSum),
            "initial_conv" => Ok(EncoderInput::InitialConv),
            other => Err(Error::Config(format!(
                "encoder_input must be block_sum or initial_conv, got '{other}'"
            ))),
        }
    }
}

/// Topology and objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Width `C` of every frame layer.
    pub channels: usize,
    pub initial_kernel: usize,
    pub blocks: Vec<BlockSpec>,
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    /// Disabling the encoder yields the plain SE-Res2Block system.
    pub use_encoder: bool,
    pub encoder_heads: usize,
    pub encoder_ffn_dim: usize,
    pub encoder_layers: usize,
    pub encoder_input: EncoderInput,
    pub positional_encoding: bool,
    /// Width `C'` of the pooling input after MFA.
    pub mfa_channels: usize,
    pub pooling_heads: usize,
    pub pooling_bottleneck: usize,
    pub embedding_dim: usize,
    pub num_speakers: usize,
    pub penalty_lambda: f64,
    pub penalty_rho: f64,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl NetworkConfig {
    /// Full-width topology.
    pub fn large() -> Self {
        Self {
            input_dim: 80,
            channels: 512,
            initial_kernel: 5,
            blocks: vec![
                BlockSpec { kernel: 3, dilation: 2 },
                BlockSpec { kernel: 3, dilation: 3 },
                BlockSpec { kernel: 3, dilation: 4 },
            ],
            res2_scale: 8,
            se_bottleneck: 128,
            use_encoder: true,
            encoder_heads: 8,
            encoder_ffn_dim: 2048,
            encoder_layers: 1,
            encoder_input: EncoderInput::BlockSum,
            positional_encoding: false,
            mfa_channels: 1536,
            pooling_heads: 2,
            pooling_bottleneck: 128,
            embedding_dim: 192,
            num_speakers: 1211,
            penalty_lambda: 1.0,
            penalty_rho: 1.0,
            aam_margin: 0.2,
            aam_scale: 30.0,
        }
    }

    /// Reduced width for CPU-scale runs on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            channels: 128,
            se_bottleneck: 32,
            encoder_ffn_dim: 256,
            mfa_channels: 384,
            pooling_bottleneck: 32,
            embedding_dim: 64,
            num_speakers: 8,
            ..Self::large()
        }
    }

    /// Encoder removed and single-head pooling (the ECAPA-style baseline).
    pub fn ablate_to_baseline(mut self) -> Self {
        self.use_encoder = false;
        self.pooling_heads = 1;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.encoder_heads
    }

    /// Number of `C`-wide maps concatenated by MFA.
    pub fn mfa_inputs(&self) -> usize {
        self.blocks.len() + usize::from(self.use_encoder)
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.pooling_heads * self.mfa_channels
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("channels", self.channels),
            ("res2_scale", self.res2_scale),
            ("se_bottleneck", self.se_bottleneck),
            ("encoder_heads", self.encoder_heads),
            ("encoder_ffn_dim", self.encoder_ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("mfa_channels", self.mfa_channels),
            ("pooling_heads", self.pooling_heads),
            ("pooling_bottleneck", self.pooling_bottleneck),
            ("embedding_dim", self.embedding_dim),
            ("num_speakers", self.num_speakers),
            ("blocks", self.blocks.len()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.channels.is_multiple_of(self.encoder_heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by encoder_heads {}",
                self.channels, self.encoder_heads
            )));
        }
        if !self.channels.is_multiple_of(self.res2_scale) {
            return Err(Error::Config(format!(
                "channels {} not divisible by res2_scale {}",
                self.channels, self.res2_scale
            )));
        }
        if self.initial_kernel.is_multiple_of(2) || self.blocks.iter().any(|b| b.kernel % 2 == 0 || b.dilation == 0) {
            return Err(Error::Config("kernels must be odd and dilations positive".into()));
        }
        if self.positional_encoding && !self.channels.is_multiple_of(2) {
            return Err(Error::Config("sinusoidal positions need an even channel count".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.aam_margin) {
            return Err(Error::Config(format!("aam_margin {} outside [0, pi/2)", self.aam_margin)));
        }
        if self.aam_scale <= 0.0 {
            return Err(Error::Config("aam_scale must be positive".into()));
        }
        if self.penalty_lambda < 0.0 || self.penalty_rho < 0.0 {
            return Err(Error::Config("penalty_lambda and penalty_rho must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parses one config value, naming the key on failure.
pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 21] = [
        "input_dim",
        "channels",
        "initial_kernel",
        "blocks",
        "res2_scale",
        "se_bottleneck",
        "use_encoder",
        "encoder_heads",
        "encoder_ffn_dim",
        "encoder_layers",
        "encoder_input",
        "positional_encoding",
        "mfa_channels",
        "pooling_heads",
        "pooling_bottleneck",
        "embedding_dim",
        "num_speakers",
        "penalty_lambda",
        "penalty_rho",
        "aam_margin",
        "aam_scale",
    ];

    /// Every field as `key=value` text; floats use round-trip formatting.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("channels", self.channels.to_string()),
            ("initial_kernel", self.initial_kernel.to_string()),
            ("blocks", format_blocks(&self.blocks)),
            ("res2_scale", self.res2_scale.to_string()),
            ("se_bottleneck", self.se_bottleneck.to_string()),
            ("use_encoder", self.use_encoder.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("encoder_ffn_dim", self.encoder_ffn_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("encoder_input", self.encoder_input.to_string()),
            ("positional_encoding", self.positional_encoding.to_string()),
            ("mfa_channels", self.mfa_channels.to_string()),
            ("pooling_heads", self.pooling_heads.to_string()),
            ("pooling_bottleneck", self.pooling_bottleneck.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("penalty_lambda", self.penalty_lambda.to_string()),
            ("penalty_rho", self.penalty_rho.to_string()),
            ("aam_margin", self.aam_margin.to_string()),
            ("aam_scale", self.aam_scale.to_string()),
        ]
    }

    /// Sets one field from text; unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_dim" => self.input_dim = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "initial_kernel" => self.initial_kernel = parse_value(key, value)?,
            "blocks" => self.blocks = parse_blocks(value)?,
            "res2_scale" => self.res2_scale = parse_value(key, value)?,
            "se_bottleneck" => self.se_bottleneck = parse_value(key, value)?,
            "use_encoder" => self.use_encoder = parse_value(key, value)?,
            "encoder_heads" => self.encoder_heads = parse_value(key, value)?,
            "encoder_ffn_dim" => self.encoder_ffn_dim = parse_value(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_value(key, value)?,
            "encoder_input" => self.encoder_input = value.trim().parse()?,
            "positional_encoding" => self.positional_encoding = parse_value(key, value)?,
            "mfa_channels" => self.mfa_channels = parse_value(key, value)?,
            "pooling_heads" => self.pooling_heads = parse_value(key, value)?,
            "pooling_bottleneck" => self.pooling_bottleneck = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "num_speakers" => self.num_speakers = parse_value(key, value)?,
            "penalty_lambda" => self.penalty_lambda = parse_value(key, value)?,
            "penalty_rho" => self.penalty_rho = parse_value(key, value)?,
            "aam_margin" => self.aam_margin = parse_value(key, value)?,
            "aam_scale" => self.aam_scale = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown network key '{other}'"))),
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::large()
    }
}

pub(crate) fn format_blocks(blocks: &[BlockSpec]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}:{}", b.kernel, b.dilation))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `"3:2,3:3,3:4"` into kernel/dilation pairs.
pub(crate) fn parse_blocks(text: &str) -> Result<Vec<BlockSpec>> {
    text.split(',')
        .map(|item| {
            let (k, d) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("block '{item}' is not kernel:dilation")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("block '{item}' is not kernel:dilation")))
            };
            Ok(BlockSpec {
                kernel: parse(k)?,
                dilation: parse(d)?,
            })
        })
        .collect()
}
