//! Finite-difference verification of every differentiable component.
//!
//! Each case builds a scalar by projecting an operation's output onto a
//! fixed random tensor, differentiates it on the tape, and compares against
//! central differences over every input and parameter coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::architecture::layers::{
    aggregate_branches, dense_residual_input, BatchNorm1d, Builder, Conv1d, EncoderLayer, LayerNorm, Linear, Res2Conv,
    SeBlock, SeRes2Block,
};
use crate::architecture::{BlockSpec, ForwardCtx, Mode, Model, NetworkConfig, ParamStore};
use crate::error::Result;
use crate::numerics::{finite_diff_grad, max_relative_error, worst_of, Tape, Tensor, Var, FD_EPS};
use crate::objective;
use crate::pooling::{self, AttentionHead};

/// Acceptance threshold on the coordinatewise relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

type Forward<'f> = dyn Fn(&mut ForwardCtx<'_>, &[Var]) -> Result<Var> + 'f;

/// Loss `Σ out ⊙ R` for a fixed pseudo-random `R` derived from the output shape.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let weights = Tensor::uniform(&shape, 1.0, &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

fn evaluate(store: &ParamStore, inputs: &[Tensor], forward: &Forward<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
    let out = forward(&mut ctx, &vars)?;
    let loss = project(ctx.tape, out)?;
    Ok(ctx.tape.value(loss).item())
}

/// Tape gradient against central differences for every input and trainable parameter.
pub fn check(name: &str, store: &ParamStore, inputs: &[Tensor], forward: &Forward<'_>) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
    let out = forward(&mut ctx, &vars)?;
    let loss = project(ctx.tape, out)?;
    let bindings = ctx.finish();
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (i, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get(var).expect("input requires grad");
        let numeric = finite_diff_grad(
            |probe| {
                let mut perturbed = inputs.to_vec();
                perturbed[i] = probe.clone();
                evaluate(store, &perturbed, forward).expect("forward succeeded once")
            },
            input,
            FD_EPS,
        );
        worst = worst_of(worst, max_relative_error(analytic, &numeric));
        coordinates += input.numel();
    }
    for (id, analytic) in bindings.param_grads(store, &grads) {
        let numeric = finite_diff_grad(
            |probe| {
                let mut perturbed = store.clone();
                perturbed.set(id, probe.clone());
                evaluate(&perturbed, inputs, forward).expect("forward succeeded once")
            },
            store.get(id),
            FD_EPS,
        );
        worst = worst_of(worst, max_relative_error(&analytic, &numeric));
        coordinates += analytic.numel();
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coordinates,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng).map(|v| v.abs() + 0.5)
}

/// Runs every case with all dimensions at most `max_dim` (clamped to `[4, 8]`).
pub fn gradient_suite(seed: u64, max_dim: usize) -> Result<Vec<GradCheck>> {
    let d = max_dim.clamp(4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let empty = ParamStore::new();
    let (b, c, t) = (2, d, d.min(6));

    macro_rules! case {
        ($name:expr, $store:expr, $inputs:expr, $f:expr) => {
            out.push(check($name, $store, &$inputs, &$f)?);
        };
    }

    // primitives
    let xs = [randn(&mut rng, &[b, c, t]), randn(&mut rng, &[1, c, 1])];
    case!("add (broadcast)", &empty, xs, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.add(v[0], v[1]));
    case!("sub (broadcast)", &empty, xs, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.sub(v[1], v[0]));
    case!("mul (broadcast)", &empty, xs, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.mul(v[0], v[1]));
    let ds = [randn(&mut rng, &[b, c, t]), positive(&mut rng, &[b, c, 1])];
    case!("div (broadcast)", &empty, ds, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.div(v[0], v[1]));
    let x1 = [randn(&mut rng, &[c, t])];
    case!("scale/add_scalar", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let s = ctx.tape.scale(v[0], -1.7);
        Ok(ctx.tape.add_scalar(s, 0.3))
    });
    case!("relu", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.relu(v[0])));
    case!("tanh", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.tanh(v[0])));
    case!("sigmoid", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.sigmoid(v[0])));
    case!("exp", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.exp(v[0])));
    case!("square", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.square(v[0])));
    case!("clamp", &empty, x1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.clamp(v[0], -0.5, 0.5)));
    let p1 = [positive(&mut rng, &[c, t])];
    case!("log", &empty, p1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.log(v[0])));
    case!("sqrt", &empty, p1, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(ctx.tape.sqrt(v[0])));
    let x3 = [randn(&mut rng, &[b, c, t])];
    case!("sum_axes", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.sum_axes(v[0], &[0, 2]));
    case!("mean_over_time", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.mean_over_time(v[0]));
    case!("permute", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.permute(v[0], &[2, 0, 1]));
    case!("slice", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.slice(v[0], 1, 1, c - 2));
    case!("softmax", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.softmax(v[0], 2));
    case!("softmax (middle axis)", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.softmax(v[0], 1));
    case!("log_softmax", &empty, x3, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.log_softmax(v[0], 1));
    let cat = [randn(&mut rng, &[b, c, t]), randn(&mut rng, &[b, 3, t])];
    case!("concat_channels", &empty, cat, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.concat_channels(v[0], v[1]));
    let mm = [randn(&mut rng, &[b, t, c]), randn(&mut rng, &[c, 3])];
    case!("matmul (shared rhs)", &empty, mm, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.matmul(v[0], v[1]));
    let bmm = [randn(&mut rng, &[b, t, c]), randn(&mut rng, &[b, c, 3])];
    case!("matmul (batched)", &empty, bmm, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ctx.tape.matmul(v[0], v[1]));
    for (k, dil) in [(1, 1), (3, 1), (3, 2), (5, 1)] {
        let conv = [randn(&mut rng, &[b, 3, t]), randn(&mut rng, &[4, 3, k]), randn(&mut rng, &[4])];
        case!(&format!("conv1d k={k} d={dil}"), &empty, conv, move |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
            ctx.tape.conv1d(v[0], v[1], v[2], dil)
        });
    }

    // layers
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut builder = Builder::new(&mut store, &mut init);
    let linear = Linear::new(&mut builder, "linear", c, 3);
    let pooled_proj = Linear::new(&mut builder, "pooled_proj", 4 * c, 3);
    let conv = Conv1d::new(&mut builder, "conv", c, c, 3, 2);
    let bn = BatchNorm1d::new(&mut builder, "bn", c);
    let ln = LayerNorm::new(&mut builder, "ln", c);
    let se = SeBlock::new(&mut builder, "se", c, 2);
    let res2_1 = Res2Conv::new(&mut builder, "res2_s1", c, 1, 3, 2)?;
    let res2_2 = Res2Conv::new(&mut builder, "res2_s2", c, 2, 3, 2)?;
    let res2_4 = Res2Conv::new(&mut builder, "res2_s4", c, 4, 3, 3)?;
    let block = SeRes2Block::new(&mut builder, "block", c, 2, 3, 2, 2)?;
    let encoder = EncoderLayer::new(&mut builder, "encoder", c, 2, 6)?;
    let heads: Vec<AttentionHead> = (0..2)
        .map(|i| AttentionHead::new(&mut builder, &format!("head{i}"), c, 3))
        .collect();
    let s = &store;
    let map = [randn(&mut rng, &[b, c, t])];
    let rows = [randn(&mut rng, &[b, t, c])];
    // keep BN away from degenerate statistics and the pooled std away from its floor
    let shifted = [randn(&mut rng, &[b, c, t]).map(|v| 2.0 * v + 0.3)];

    case!("linear", s, rows, |ctx: &mut ForwardCtx<'_>, v: &[Var]| linear.forward(ctx, v[0]));
    case!("conv1d layer", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| conv.forward(ctx, v[0]));
    case!("batchnorm1d (train)", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| bn.forward(ctx, v[0]));
    case!("layernorm", s, rows, |ctx: &mut ForwardCtx<'_>, v: &[Var]| ln.forward(ctx, v[0]));
    case!("se_block", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| se.forward(ctx, v[0]));
    case!("res2 s=1", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| res2_1.forward(ctx, v[0]));
    case!("res2 s=2", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| res2_2.forward(ctx, v[0]));
    case!("res2 s=4", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| res2_4.forward(ctx, v[0]));
    case!("se_res2block", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| block.forward(ctx, v[0]));
    case!("encoder_layer", s, rows, |ctx: &mut ForwardCtx<'_>, v: &[Var]| Ok(encoder.forward(ctx, v[0])?.output));
    let three = [randn(&mut rng, &[b, c, t]), randn(&mut rng, &[b, c, t]), randn(&mut rng, &[b, c, t])];
    case!("dense_residual_input", &empty, three, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        dense_residual_input(ctx.tape, v)
    });
    case!("aggregate_branches", &empty, three, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        aggregate_branches(ctx.tape, v[0], v[1])
    });

    // pooling chain
    case!("attention_scores", s, map, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let head = heads[0].bind(ctx);
        pooling::attention_scores(ctx.tape, v[0], &head)
    });
    case!("weighted_stats", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let head = heads[0].bind(ctx);
        let a = pooling::attention_scores(ctx.tape, v[0], &head)?;
        let (mu, sigma) = pooling::weighted_stats(ctx.tape, v[0], a)?;
        ctx.tape.concat(&[mu, sigma], 1)
    });
    case!("pool (2 heads)", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let bound: Vec<_> = heads.iter().map(|h| h.bind(ctx)).collect();
        Ok(pooling::pool(ctx.tape, v[0], &bound)?.stats)
    });
    case!("diversity_penalty", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let bound: Vec<_> = heads.iter().map(|h| h.bind(ctx)).collect();
        let pooled = pooling::pool(ctx.tape, v[0], &bound)?;
        pooling::diversity_penalty(ctx.tape, &pooled.attention, 1.0, 1.0)
    });

    // objective
    let emb = [randn(&mut rng, &[b, c]), randn(&mut rng, &[5, c])];
    case!("aam_logits", &empty, emb, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        objective::aam_logits(ctx.tape, v[0], v[1], &[1, 4], 0.2, 30.0)
    });
    case!("aam cross-entropy", &empty, emb, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let logits = objective::aam_logits(ctx.tape, v[0], v[1], &[1, 4], 0.2, 30.0)?;
        objective::cross_entropy(ctx.tape, logits, &[1, 4])
    });
    case!("total_loss through pooling", s, shifted, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let bound: Vec<_> = heads.iter().map(|h| h.bind(ctx)).collect();
        let pooled = pooling::pool(ctx.tape, v[0], &bound)?;
        let penalty = pooling::diversity_penalty(ctx.tape, &pooled.attention, 1.0, 1.0)?;
        let cls = pooled_proj.forward(ctx, pooled.stats)?;
        let parts = objective::total_loss(ctx.tape, cls, &[0, 2], penalty)?;
        Ok(parts.total)
    });

    // whole model
    let cfg = tiny_config(d);
    let model = Model::new(cfg.clone(), seed)?;
    let feats = [randn(&mut rng, &[b, cfg.input_dim, t])];
    case!("frame-level forward", &model.params, feats, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        Ok(model.network.forward_frame_level(ctx, v[0])?.pooling_input)
    });
    case!("full model loss", &model.params, feats, |ctx: &mut ForwardCtx<'_>, v: &[Var]| {
        let out = model.network.forward(ctx, v[0])?;
        let penalty =
            pooling::diversity_penalty(ctx.tape, &out.attention, cfg.penalty_lambda, cfg.penalty_rho)?;
        let targets = [0, 2];
        let logits = model.classifier.logits(ctx, out.embedding, &targets)?;
        Ok(objective::total_loss(ctx.tape, logits, &targets, penalty)?.total)
    });
    let _ = rng.random::<u8>();
    Ok(out)
}

/// Smallest topology exercising every component: all widths at most `d`.
pub fn tiny_config(d: usize) -> NetworkConfig {
    NetworkConfig {
        input_dim: d,
        channels: 4,
        initial_kernel: 5,
        blocks: vec![BlockSpec { kernel: 3, dilation: 2 }, BlockSpec { kernel: 3, dilation: 3 }],
        res2_scale: 2,
        se_bottleneck: 2,
        encoder_heads: 2,
        encoder_ffn_dim: 6,
        mfa_channels: d.min(6),
        pooling_heads: 2,
        pooling_bottleneck: 3,
        embedding_dim: 4,
        num_speakers: 3,
        ..NetworkConfig::large()
    }
}
