use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderInput, NetworkConfig};
use super::layers::{
    aggregate_branches, dense_residual_input, sinusoidal_positions, BatchNorm1d, Builder, Conv1d, EncoderLayer,
    Linear, SeRes2Block,
};
use super::params::{ForwardCtx, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::objective::ClassifierHead;
use crate::pooling::{self, AttentionHead, HeadVars};

/// Frame-level topology, pooling heads and embedding layer.
#[derive(Debug, Clone)]
pub struct Network {
    pub initial: Conv1d,
    pub initial_bn: BatchNorm1d,
    pub blocks: Vec<SeRes2Block>,
    pub encoders: Vec<EncoderLayer>,
    pub mfa: Conv1d,
    pub heads: Vec<AttentionHead>,
    pub embedding: Linear,
    use_encoder: bool,
    encoder_input: EncoderInput,
    positional_encoding: bool,
}

/// Intermediate maps of one frame-level pass, all `[B, ·, T]`.
pub struct FrameLevel {
    pub initial: Var,
    pub block_outputs: Vec<Var>,
    pub encoder_output: Option<Var>,
    /// Pooling input `H` after MFA and the dense reduction.
    pub pooling_input: Var,
}

pub struct EmbeddingOutput {
    pub embedding: Var,
    pub pooled: Var,
    pub attention: Vec<Var>,
}

impl Network {
    pub fn build<R: rand::Rng>(cfg: &NetworkConfig, b: &mut Builder<'_, R>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let initial = Conv1d::new(b, "initial", cfg.input_dim, c, cfg.initial_kernel, 1);
        let initial_bn = BatchNorm1d::new(b, "initial_bn", c);
        let blocks = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                SeRes2Block::new(
                    b,
                    &format!("block{i}"),
                    c,
                    cfg.res2_scale,
                    spec.kernel,
                    spec.dilation,
                    cfg.se_bottleneck,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoders = if cfg.use_encoder {
            (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(b, &format!("encoder{i}"), c, cfg.encoder_heads, cfg.encoder_ffn_dim))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mfa = Conv1d::new(b, "mfa", cfg.mfa_inputs() * c, cfg.mfa_channels, 1, 1);
        let heads = (0..cfg.pooling_heads)
            .map(|i| AttentionHead::new(b, &format!("pool_head{i}"), cfg.mfa_channels, cfg.pooling_bottleneck))
            .collect();
        let embedding = Linear::new(b, "embedding", cfg.pooled_dim(), cfg.embedding_dim);
        Ok(Self {
            initial,
            initial_bn,
            blocks,
            encoders,
            mfa,
            heads,
            embedding,
            use_encoder: cfg.use_encoder,
            encoder_input: cfg.encoder_input,
            positional_encoding: cfg.positional_encoding,
        })
    }

    /// `[B, 80, T]` features to the pooling input `[B, C', T]`.
    pub fn forward_frame_level(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<FrameLevel> {
        let h = self.initial.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let initial = self.initial_bn.forward(ctx, h)?;

        let mut layer_outputs = vec![initial];
        for block in &self.blocks {
            let input = dense_residual_input(ctx.tape, &layer_outputs)?;
            layer_outputs.push(block.forward(ctx, input)?);
        }
        let block_outputs = layer_outputs[1..].to_vec();

        let encoder_output = if self.use_encoder {
            let source = match self.encoder_input {
                EncoderInput::BlockSum => dense_residual_input(ctx.tape, &layer_outputs)?,
                EncoderInput::InitialConv => initial,
            };
            Some(self.encode(ctx, source)?)
        } else {
            None
        };

        let (&last, earlier) = block_outputs
            .split_last()
            .ok_or_else(|| Error::Config("at least one SE-Res2Block is required".into()))?;
        let mut parts = earlier.to_vec();
        match encoder_output {
            Some(enc) => parts.push(aggregate_branches(ctx.tape, last, enc)?),
            None => parts.push(last),
        }
        let aggregated = ctx.tape.concat(&parts, 1)?;
        let reduced = self.mfa.forward(ctx, aggregated)?;
        let pooling_input = ctx.tape.relu(reduced);
        Ok(FrameLevel {
            initial,
            block_outputs,
            encoder_output,
            pooling_input,
        })
    }

    /// Encoder stack over a `[B, C, T]` map, returned as `[B, C, T]`.
    fn encode(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let mut h = ctx.tape.permute(x, &[0, 2, 1])?;
        if self.positional_encoding {
            let s = ctx.tape.shape(h).to_vec();
            let table = ctx.tape.constant(sinusoidal_positions(s[1], s[2]));
            h = ctx.tape.add(h, table)?;
        }
        for layer in &self.encoders {
            h = layer.forward(ctx, h)?.output;
        }
        ctx.tape.permute(h, &[0, 2, 1])
    }

    pub fn bind_heads(&self, ctx: &mut ForwardCtx<'_>) -> Vec<HeadVars> {
        self.heads.iter().map(|h| h.bind(ctx)).collect()
    }

    /// Features to embeddings `[B, E]`, keeping the attention matrices for the penalty.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<EmbeddingOutput> {
        let frames = self.forward_frame_level(ctx, x)?;
        let heads = self.bind_heads(ctx);
        let pooled = pooling::pool(ctx.tape, frames.pooling_input, &heads)?;
        let embedding = self.embedding.forward(ctx, pooled.stats)?;
        Ok(EmbeddingOutput {
            embedding,
            pooled: pooled.stats,
            attention: pooled.attention,
        })
    }
}

/// Network, classifier and every parameter they own.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub network: Network,
    pub classifier: ClassifierHead,
    pub params: ParamStore,
    pub seed: u64,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = Builder::new(&mut params, &mut rng);
        let network = Network::build(&config, &mut builder)?;
        let classifier = ClassifierHead::new(&mut builder, &config);
        Ok(Self {
            config,
            network,
            classifier,
            params,
            seed,
        })
    }
}
