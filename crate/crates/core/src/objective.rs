//! Additive angular margin softmax and the total training objective.

use rand::Rng;

use crate::architecture::layers::Builder;
use crate::architecture::params::{ForwardCtx, ParamId};
use crate::architecture::NetworkConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `1 − cos²θ` is floored here before the square root; the floor's
/// gradient is zero, keeping `d sinθ / d cosθ` bounded at alignment.
pub const SIN_SQ_FLOOR: f64 = 1e-20;

/// Cosine classifier over training speakers, weights `[S, E]`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub margin: f64,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &NetworkConfig) -> Self {
        let weight = b.scoped("classifier", |b| {
            b.uniform("weight", &[cfg.num_speakers, cfg.embedding_dim], cfg.embedding_dim)
        });
        Self {
            weight,
            margin: cfg.aam_margin,
            scale: cfg.aam_scale,
        }
    }

    pub fn logits(&self, ctx: &mut ForwardCtx<'_>, embedding: Var, targets: &[usize]) -> Result<Var> {
        let w = ctx.param(self.weight);
        aam_logits(ctx.tape, embedding, w, targets, self.margin, self.scale)
    }
}

/// Rows of `x` scaled to unit L2 norm; zero rows are an error.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var, what: &str) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("l2_normalize_rows", "rank", 2, shape.len()));
    }
    let width = shape[1];
    if let Some(row) = tape
        .value(x)
        .data()
        .chunks(width)
        .position(|r| r.iter().all(|&v| v == 0.0))
    {
        return Err(Error::Numeric(format!("{what} row {row} has zero norm")));
    }
    let sq = tape.square(x);
    let norm_sq = tape.sum_axes(sq, &[1])?;
    let norm = tape.sqrt(norm_sq);
    tape.div(x, norm)
}

/// Cosine similarities `[B, S]` between embeddings `[B, E]` and class rows `[S, E]`.
pub fn cosine_matrix(tape: &mut Tape, embedding: Var, weight: Var) -> Result<Var> {
    let e = l2_normalize_rows(tape, embedding, "embedding")?;
    let w = l2_normalize_rows(tape, weight, "class weight")?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(e, wt)?;
    Ok(tape.clamp(cos, -1.0, 1.0))
}

/// `s · cosθ_j` for every class.
pub fn cosine_logits(tape: &mut Tape, embedding: Var, weight: Var, scale: f64) -> Result<Var> {
    let cos = cosine_matrix(tape, embedding, weight)?;
    Ok(tape.scale(cos, scale))
}

fn one_hot(batch: usize, classes: usize, targets: &[usize]) -> Result<Tensor> {
    if targets.len() != batch {
        return Err(Error::dim("one_hot", "batch", batch, targets.len()));
    }
    let mut data = vec![0.0; batch * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::dim("one_hot", "target", format!("< {classes}"), t));
        }
        data[i * classes + t] = 1.0;
    }
    Tensor::new(&[batch, classes], data)
}

/// AAM logits: `s·cos(θ_target + m)` for the target class, `s·cosθ_j` elsewhere.
pub fn aam_logits(
    tape: &mut Tape,
    embedding: Var,
    weight: Var,
    targets: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let cos = cosine_matrix(tape, embedding, weight)?;
    let (batch, classes) = (tape.shape(cos)[0], tape.shape(cos)[1]);
    let mask = tape.constant(one_hot(batch, classes, targets)?);
    // cos(θ + m) = cosθ·cos m − sinθ·sin m
    let cos_sq = tape.square(cos);
    let sin_sq = tape.neg(cos_sq);
    let sin_sq = tape.add_scalar(sin_sq, 1.0);
    let sin_sq = tape.clamp_min(sin_sq, SIN_SQ_FLOOR);
    let sin = tape.sqrt(sin_sq);
    let a = tape.scale(cos, margin.cos());
    let b = tape.scale(sin, margin.sin());
    let cos_margin = tape.sub(a, b)?;
    let shift = tape.sub(cos_margin, cos)?;
    let shift = tape.mul(shift, mask)?;
    let adjusted = tape.add(cos, shift)?;
    Ok(tape.scale(adjusted, scale))
}

/// Mean cross-entropy of `softmax(logits)` against integer targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("cross_entropy", "rank", 2, shape.len()));
    }
    let mask = tape.constant(one_hot(shape[0], shape[1], targets)?);
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / shape[0] as f64))
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cross_entropy: Var,
    pub penalty: Var,
    pub total: Var,
}

/// Batch cross-entropy plus the (already batch-averaged) diversity penalty.
pub fn total_loss(tape: &mut Tape, logits: Var, targets: &[usize], penalty: Var) -> Result<LossParts> {
    let ce = cross_entropy(tape, logits, targets)?;
    let total = tape.add(ce, penalty)?;
    Ok(LossParts {
        cross_entropy: ce,
        penalty,
        total,
    })
}
