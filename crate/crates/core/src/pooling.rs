//! Multi-head channel- and context-dependent attentive statistics pooling.
//!
//! Each head scores every (frame, channel) pair of the pooling input `H`
//! through a tanh bottleneck, normalizes the scores over time separately
//! for each channel, and produces an attention-weighted mean and standard
//! deviation per channel. Head outputs are concatenated as all means
//! followed by all deviations. A hinge penalty on the pairwise squared
//! Frobenius distance between attention matrices pushes heads apart.
//!
//! Frame maps are batched `[B, C', T]`; attention matrices are `[B, T, C']`.

use rand::Rng;

use crate::architecture::layers::Builder;
use crate::architecture::params::{ForwardCtx, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Floor applied to the weighted variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Tape handles for one head's `W1 [R, C']`, `b1 [R]`, `W2 [C', R]`, `b2 [C']`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Stored parameters of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AttentionHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize, bottleneck: usize) -> Self {
        b.scoped(name, |b| Self {
            w1: b.uniform("w1", &[bottleneck, channels], channels),
            b1: b.uniform("b1", &[bottleneck], channels),
            w2: b.uniform("w2", &[channels, bottleneck], bottleneck),
            b2: b.uniform("b2", &[channels], bottleneck),
        })
    }

    pub fn bind(&self, ctx: &mut ForwardCtx<'_>) -> HeadVars {
        HeadVars {
            w1: ctx.param(self.w1),
            b1: ctx.param(self.b1),
            w2: ctx.param(self.w2),
            b2: ctx.param(self.b2),
        }
    }
}

/// Pooled statistics `[B, 2·I·C']` and the attention matrix of every head.
pub struct Pooled {
    pub stats: Var,
    pub attention: Vec<Var>,
}

fn check_frame_map(tape: &Tape, h: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(h) {
        [b, c, t] => Ok((b, c, t)),
        ref other => Err(Error::dim("pooling", "rank", 3, other.len())),
    }
}

fn row_bias(tape: &mut Tape, bias: Var) -> Result<Var> {
    let n = tape.shape(bias)[0];
    tape.reshape(bias, &[1, 1, n])
}

/// Attention weights `A = softmax_time(W2 · tanh(W1 · Hᵀ + b1) + b2)ᵀ`, shaped `[B, T, C']`.
///
/// Every column (fixed batch item and channel) sums to one over time.
pub fn attention_scores(tape: &mut Tape, h: Var, head: &HeadVars) -> Result<Var> {
    let (_, c, _) = check_frame_map(tape, h)?;
    let w1_shape = tape.shape(head.w1).to_vec();
    if w1_shape.len() != 2 || w1_shape[1] != c {
        return Err(Error::dim("attention_scores", "w1 columns", c, format!("{w1_shape:?}")));
    }
    let frames = tape.permute(h, &[0, 2, 1])?;
    let w1t = tape.transpose(head.w1)?;
    let hidden = tape.matmul(frames, w1t)?;
    let b1 = row_bias(tape, head.b1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.tanh(hidden);
    let w2t = tape.transpose(head.w2)?;
    let scores = tape.matmul(hidden, w2t)?;
    let b2 = row_bias(tape, head.b2)?;
    let scores = tape.add(scores, b2)?;
    tape.softmax(scores, 1)
}

/// Attention-weighted per-channel mean and floored standard deviation, each `[B, C']`.
pub fn weighted_stats(tape: &mut Tape, h: Var, attention: Var) -> Result<(Var, Var)> {
    let (b, c, t) = check_frame_map(tape, h)?;
    if tape.shape(attention) != [b, t, c] {
        return Err(Error::dim(
            "weighted_stats",
            "attention",
            format!("{:?}", [b, t, c]),
            format!("{:?}", tape.shape(attention)),
        ));
    }
    let frames = tape.permute(h, &[0, 2, 1])?;
    let weighted = tape.mul(attention, frames)?;
    let mean = tape.sum_axes(weighted, &[1])?;
    let mean = tape.reshape(mean, &[b, c])?;
    let weighted_sq = tape.mul(weighted, frames)?;
    let second = tape.sum_axes(weighted_sq, &[1])?;
    let second = tape.reshape(second, &[b, c])?;
    let mean_sq = tape.square(mean);
    let var = tape.sub(second, mean_sq)?;
    let var = tape.clamp_min(var, VARIANCE_FLOOR);
    let std = tape.sqrt(var);
    Ok((mean, std))
}

/// Single-head attentive statistics `[μ; σ]`.
pub fn single_head_pool(tape: &mut Tape, h: Var, head: &HeadVars) -> Result<Var> {
    let attention = attention_scores(tape, h, head)?;
    let (mean, std) = weighted_stats(tape, h, attention)?;
    tape.concat(&[mean, std], 1)
}

/// `S = [μ¹; …; μᴵ; σ¹; …; σᴵ]` over every head.
pub fn pool(tape: &mut Tape, h: Var, heads: &[HeadVars]) -> Result<Pooled> {
    if heads.is_empty() {
        return Err(Error::Config("pooling needs at least one head".into()));
    }
    let mut attention = Vec::with_capacity(heads.len());
    let mut means = Vec::with_capacity(heads.len());
    let mut stds = Vec::with_capacity(heads.len());
    for head in heads {
        let a = attention_scores(tape, h, head)?;
        let (mean, std) = weighted_stats(tape, h, a)?;
        attention.push(a);
        means.push(mean);
        stds.push(std);
    }
    means.extend(stds);
    let stats = tape.concat(&means, 1)?;
    Ok(Pooled { stats, attention })
}

/// Per-utterance squared Frobenius distance between two attention matrices, `[B, 1, 1]`.
pub fn frobenius_sq(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    tape.sum_axes(sq, &[1, 2])
}

/// `P = ρ Σ_{i<j} max(λ − ‖Aⁱ − Aʲ‖²_F, 0)`, averaged over the batch, as a `[1]` scalar.
///
/// At the hinge kink the subgradient is zero.
pub fn diversity_penalty(tape: &mut Tape, attention: &[Var], lambda: f64, rho: f64) -> Result<Var> {
    let shape = match attention.first() {
        Some(&a) => tape.shape(a).to_vec(),
        None => return Err(Error::Config("penalty needs at least one attention matrix".into())),
    };
    if let Some(&bad) = attention.iter().find(|&&a| tape.shape(a) != shape.as_slice()) {
        return Err(Error::dim(
            "diversity_penalty",
            "attention",
            format!("{shape:?}"),
            format!("{:?}", tape.shape(bad)),
        ));
    }
    let mut distances = Vec::new();
    for i in 0..attention.len() {
        for j in i + 1..attention.len() {
            distances.push(frobenius_sq(tape, attention[i], attention[j])?);
        }
    }
    hinge_penalty(tape, &distances, lambda, rho)
}

/// `ρ Σ max(λ − d, 0)` over per-utterance pairwise distances `[B, 1, 1]`, batch-averaged.
pub fn hinge_penalty(tape: &mut Tape, distances: &[Var], lambda: f64, rho: f64) -> Result<Var> {
    let mut hinges = Vec::with_capacity(distances.len());
    for &dist in distances {
        let margin = tape.neg(dist);
        let margin = tape.add_scalar(margin, lambda);
        let hinge = tape.relu(margin);
        hinges.push(tape.scale(hinge, rho));
    }
    let Some((&first, rest)) = hinges.split_first() else {
        return Ok(tape.constant(Tensor::zeros(&[1])));
    };
    let mut total = first;
    for &h in rest {
        total = tape.add(total, h)?;
    }
    Ok(tape.mean_all(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn constant_head(tape: &mut Tape, c: usize, r: usize, w1: f64, b1: f64, w2: f64, b2: f64) -> HeadVars {
        HeadVars {
            w1: tape.constant(Tensor::full(&[r, c], w1)),
            b1: tape.constant(Tensor::full(&[r], b1)),
            w2: tape.constant(Tensor::full(&[c, r], w2)),
            b2: tape.constant(Tensor::full(&[c], b2)),
        }
    }

    #[test]
    fn zero_output_weights_give_uniform_attention() {
        let mut tape = Tape::new();
        let h = tape.constant(tensor(&[1, 2, 5], &[0.3, -1.0, 2.0, 0.5, 0.1, 4.0, 3.0, -2.0, 0.0, 1.0]));
        let head = constant_head(&mut tape, 2, 3, 0.7, 0.1, 0.0, 0.0);
        let a = attention_scores(&mut tape, h, &head).unwrap();
        assert_eq!(tape.shape(a), &[1, 5, 2]);
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_frames_one_channel_matches_hand_evaluation() {
        // C' = 1, R = 1, T = 2: score_t = w2·tanh(w1·h_t + b1) + b2
        let mut tape = Tape::new();
        let h = tape.constant(tensor(&[1, 1, 2], &[0.5, -1.0]));
        let head = HeadVars {
            w1: tape.constant(tensor(&[1, 1], &[2.0])),
            b1: tape.constant(tensor(&[1], &[0.1])),
            w2: tape.constant(tensor(&[1, 1], &[1.5])),
            b2: tape.constant(tensor(&[1], &[-0.3])),
        };
        let a = attention_scores(&mut tape, h, &head).unwrap();
        let s0 = 1.5 * (2.0f64 * 0.5 + 0.1).tanh() - 0.3;
        let s1 = 1.5 * (-2.0f64 + 0.1).tanh() - 0.3;
        let a0 = s0.exp() / (s0.exp() + s1.exp());
        let got = tape.value(a).data();
        assert!((got[0] - a0).abs() < 1e-15);
        assert!((got[1] - (1.0 - a0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_attention_moments() {
        let mut tape = Tape::new();
        let h = tape.constant(tensor(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let a = tape.constant(Tensor::full(&[1, 4, 1], 0.25));
        let (mu, sigma) = weighted_stats(&mut tape, h, a).unwrap();
        assert_eq!(tape.value(mu).item(), 2.5);
        assert!((tape.value(sigma).item() - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_frames_hit_the_variance_floor() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[1, 3, 4], 0.7));
        let a = tape.constant(Tensor::full(&[1, 4, 3], 0.25));
        let (_, sigma) = weighted_stats(&mut tape, h, a).unwrap();
        for &s in tape.value(sigma).data() {
            assert!((s - VARIANCE_FLOOR.sqrt()).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn one_hot_attention_picks_a_frame() {
        let mut tape = Tape::new();
        let h = tape.constant(tensor(&[1, 2, 3], &[1.0, 5.0, 3.0, -2.0, 7.0, 0.5]));
        let mut onehot = vec![0.0; 6];
        onehot[2] = 1.0; // t = 1, c = 0
        onehot[3] = 1.0; // t = 1, c = 1
        let a = tape.constant(tensor(&[1, 3, 2], &onehot));
        let (mu, sigma) = weighted_stats(&mut tape, h, a).unwrap();
        assert_eq!(tape.value(mu).data(), &[5.0, 7.0]);
        for &s in tape.value(sigma).data() {
            assert!((s - 1e-4).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_layout_and_identical_heads() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[1, 4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let head = constant_head(&mut tape, 4, 2, 0.3, -0.1, 0.5, 0.2);
        let pooled = pool(&mut tape, h, &[head, head]).unwrap();
        assert_eq!(tape.shape(pooled.stats), &[1, 16]);
        let s = tape.value(pooled.stats).data();
        assert_eq!(&s[0..4], &s[4..8]);
        assert_eq!(&s[8..12], &s[12..16]);
        let p = diversity_penalty(&mut tape, &pooled.attention, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(p).item(), 1.0);
    }

    #[test]
    fn hinge_over_given_pairwise_distances() {
        // {0.25, 0.5, 2.0} breaks the triangle inequality on square roots, so it is
        // fed as distances rather than realised as matrices.
        let mut tape = Tape::new();
        let dists: Vec<Var> = [0.25, 0.5, 2.0]
            .iter()
            .map(|&d| tape.constant(Tensor::full(&[1, 1, 1], d)))
            .collect();
        let p = hinge_penalty(&mut tape, &dists, 1.0, 2.0).unwrap();
        assert_eq!(tape.value(p).item(), 2.5);
    }

    #[test]
    fn saturated_hinge_is_zero() {
        let mut tape = Tape::new();
        let a1 = tape.constant(tensor(&[1, 2, 1], &[1.0, 0.0]));
        let a2 = tape.constant(tensor(&[1, 2, 1], &[0.0, 1.0]));
        let p = diversity_penalty(&mut tape, &[a1, a2], 1.0, 1.0).unwrap();
        assert_eq!(tape.value(p).item(), 0.0);
        let single = diversity_penalty(&mut tape, &[a1], 1.0, 1.0).unwrap();
        assert_eq!(tape.value(single).item(), 0.0);
    }
}
