//! Frame-level building blocks. Frame maps are `[B, C, T]` on the tape.

use rand::Rng;

use super::params::{init_uniform, ForwardCtx, Mode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let value = init_uniform(shape, fan_in, self.rng);
        let name = self.full_name(name);
        self.store.add(name, value)
    }

    pub fn with_value(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.add_buffer(name, value)
    }
}

/// Affine map over the last axis: `x · W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.uniform("weight", &[d_in, d_out], d_in),
            bias: b.uniform("bias", &[d_out], d_in),
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (w, bias) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.matmul(x, w)?;
        let rank = ctx.tape.shape(y).len();
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = ctx.tape.shape(bias)[0];
        let bias = ctx.tape.reshape(bias, &bshape)?;
        ctx.tape.add(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        b.scoped(name, |b| Self {
            weight: b.uniform("weight", &[c_out, c_in, kernel], c_in * kernel),
            bias: b.uniform("bias", &[c_out], c_in * kernel),
            dilation,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.conv1d(x, w, b, self.dilation)
    }
}

/// Per-channel normalization over batch and time of a `[B, C, T]` map.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.with_value("gamma", Tensor::ones(&[channels])),
            beta: b.with_value("beta", Tensor::zeros(&[channels])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("batchnorm1d", "rank", 3, shape.len()));
        }
        let c = shape[1];
        let stat_shape = [1, c, 1];
        let (mean, var) = match ctx.mode() {
            Mode::Train => {
                let mean = ctx.tape.mean_axes(x, &[0, 2])?;
                let centered = ctx.tape.sub(x, mean)?;
                let sq = ctx.tape.square(centered);
                let var = ctx.tape.mean_axes(sq, &[0, 2])?;
                self.record_running(ctx, mean, var, shape[0] * shape[2]);
                (mean, var)
            }
            Mode::Eval => {
                let m = ctx.param(self.running_mean);
                let v = ctx.param(self.running_var);
                (ctx.tape.reshape(m, &stat_shape)?, ctx.tape.reshape(v, &stat_shape)?)
            }
        };
        let centered = ctx.tape.sub(x, mean)?;
        let var_eps = ctx.tape.add_scalar(var, BN_EPS);
        let std = ctx.tape.sqrt(var_eps);
        let normed = ctx.tape.div(centered, std)?;
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let gamma = ctx.tape.reshape(gamma, &stat_shape)?;
        let beta = ctx.tape.reshape(beta, &stat_shape)?;
        let scaled = ctx.tape.mul(normed, gamma)?;
        ctx.tape.add(scaled, beta)
    }

    fn record_running(&self, ctx: &mut ForwardCtx<'_>, mean: Var, var: Var, count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let blend = |old: &Tensor, new: &[f64], factor: f64| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n * factor)
                .collect();
            Tensor::new(old.shape(), data).expect("running stat shape")
        };
        let store = ctx.store();
        let new_mean = blend(store.get(self.running_mean), ctx.tape.value(mean).data(), 1.0);
        let new_var = blend(store.get(self.running_var), ctx.tape.value(var).data(), unbias);
        ctx.update_buffer(self.running_mean, new_mean);
        ctx.update_buffer(self.running_var, new_var);
    }
}

/// Normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.with_value("gamma", Tensor::ones(&[dim])),
            beta: b.with_value("beta", Tensor::zeros(&[dim])),
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let last = shape.len() - 1;
        let mean = ctx.tape.mean_axes(x, &[last])?;
        let centered = ctx.tape.sub(x, mean)?;
        let sq = ctx.tape.square(centered);
        let var = ctx.tape.mean_axes(sq, &[last])?;
        let var_eps = ctx.tape.add_scalar(var, LN_EPS);
        let std = ctx.tape.sqrt(var_eps);
        let normed = ctx.tape.div(centered, std)?;
        let mut pshape = vec![1; shape.len()];
        pshape[last] = shape[last];
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let gamma = ctx.tape.reshape(gamma, &pshape)?;
        let beta = ctx.tape.reshape(beta, &pshape)?;
        let scaled = ctx.tape.mul(normed, gamma)?;
        ctx.tape.add(scaled, beta)
    }
}

/// Squeeze-excitation: per-channel gates from the time-averaged map.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize, bottleneck: usize) -> Self {
        b.scoped(name, |b| Self {
            squeeze: Linear::new(b, "squeeze", channels, bottleneck),
            excite: Linear::new(b, "excite", bottleneck, channels),
        })
    }

    /// Gates in (0, 1), shaped `[B, C]`.
    pub fn gates(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let z = ctx.tape.mean_over_time(x)?;
        let hidden = self.squeeze.forward(ctx, z)?;
        let hidden = ctx.tape.relu(hidden);
        let e = self.excite.forward(ctx, hidden)?;
        Ok(ctx.tape.sigmoid(e))
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let gates = self.gates(ctx, x)?;
        let gates = ctx.tape.reshape(gates, &[shape[0], shape[1], 1])?;
        ctx.tape.mul(x, gates)
    }
}

/// Hierarchical multi-scale dilated convolution over channel groups.
#[derive(Debug, Clone)]
pub struct Res2Conv {
    pub scale: usize,
    /// One conv per group after the first, or a single full-width conv when `scale == 1`.
    pub convs: Vec<Conv1d>,
}

impl Res2Conv {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if scale == 0 || !channels.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "res2 scale {scale} does not divide {channels} channels"
            )));
        }
        let width = channels / scale;
        Ok(b.scoped(name, |b| {
            let convs = if scale == 1 {
                vec![Conv1d::new(b, "conv0", channels, channels, kernel, dilation)]
            } else {
                (1..scale)
                    .map(|i| Conv1d::new(b, &format!("conv{i}"), width, width, kernel, dilation))
                    .collect()
            };
            Self { scale, convs }
        }))
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        if self.scale == 1 {
            return self.convs[0].forward(ctx, x);
        }
        let channels = ctx.tape.shape(x)[1];
        if !channels.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "res2 scale {} does not divide {channels} channels",
                self.scale
            )));
        }
        let width = channels / self.scale;
        let mut outputs = Vec::with_capacity(self.scale);
        let mut prev = ctx.tape.slice(x, 1, 0, width)?;
        outputs.push(prev);
        for (i, conv) in self.convs.iter().enumerate() {
            let group = ctx.tape.slice(x, 1, (i + 1) * width, width)?;
            let input = ctx.tape.add(group, prev)?;
            prev = conv.forward(ctx, input)?;
            outputs.push(prev);
        }
        ctx.tape.concat(&outputs, 1)
    }
}

/// 1×1 conv, Res2 dilated conv, 1×1 conv (each followed by ReLU and BN), then SE.
///
/// The block has no internal skip connection; callers feed it the dense
/// residual sum of all earlier layer outputs.
#[derive(Debug, Clone)]
pub struct SeRes2Block {
    pub conv_in: Conv1d,
    pub bn_in: BatchNorm1d,
    pub res2: Res2Conv,
    pub bn_mid: BatchNorm1d,
    pub conv_out: Conv1d,
    pub bn_out: BatchNorm1d,
    pub se: SeBlock,
}

impl SeRes2Block {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        se_bottleneck: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv_in: Conv1d::new(b, "conv_in", channels, channels, 1, 1),
                bn_in: BatchNorm1d::new(b, "bn_in", channels),
                res2: Res2Conv::new(b, "res2", channels, scale, kernel, dilation)?,
                bn_mid: BatchNorm1d::new(b, "bn_mid", channels),
                conv_out: Conv1d::new(b, "conv_out", channels, channels, 1, 1),
                bn_out: BatchNorm1d::new(b, "bn_out", channels),
                se: SeBlock::new(b, "se", channels, se_bottleneck),
            })
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let h = self.conv_in.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.bn_in.forward(ctx, h)?;
        let h = self.res2.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.bn_mid.forward(ctx, h)?;
        let h = self.conv_out.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.bn_out.forward(ctx, h)?;
        self.se.forward(ctx, h)
    }
}

/// Elementwise sum of every earlier output, added in index order.
pub fn dense_residual_input(tape: &mut Tape, outputs: &[Var]) -> Result<Var> {
    let (&first, rest) = outputs
        .split_first()
        .ok_or_else(|| Error::dim("dense_residual_input", "inputs", ">= 1", 0))?;
    let shape = tape.shape(first).to_vec();
    let mut acc = first;
    for &next in rest {
        if tape.shape(next) != shape.as_slice() {
            return Err(Error::dim(
                "dense_residual_input",
                "shape",
                format!("{shape:?}"),
                format!("{:?}", tape.shape(next)),
            ));
        }
        acc = tape.add(acc, next)?;
    }
    Ok(acc)
}

/// Channel concatenation of the SE-Res2Block branch (first) and the encoder branch.
pub fn aggregate_branches(tape: &mut Tape, se_out: Var, enc_out: Var) -> Result<Var> {
    let (a, b) = (tape.shape(se_out).to_vec(), tape.shape(enc_out).to_vec());
    if a != b {
        return Err(Error::dim("aggregate_branches", "shape", format!("{a:?}"), format!("{b:?}")));
    }
    tape.concat_channels(se_out, enc_out)
}

/// Multi-head self-attention plus feed-forward, each with residual and post layer norm.
/// Operates on `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
}

/// Outputs of one encoder layer; `attention` is `[B·heads, T, T]` with rows summing to one.
pub struct EncoderOutput {
    pub output: Var,
    pub attention: Var,
    pub values: Var,
}

impl EncoderLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(b.scoped(name, |b| Self {
            heads,
            query: Linear::new(b, "query", channels, channels),
            key: Linear::new(b, "key", channels, channels),
            value: Linear::new(b, "value", channels, channels),
            output: Linear::new(b, "output", channels, channels),
            norm_attn: LayerNorm::new(b, "norm_attn", channels),
            ffn_in: Linear::new(b, "ffn_in", channels, ffn_dim),
            ffn_out: Linear::new(b, "ffn_out", ffn_dim, channels),
            norm_ffn: LayerNorm::new(b, "norm_ffn", channels),
        }))
    }

    /// `[B, T, C] -> [B·h, T, d_k]`
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (batch, t, c) = (s[0], s[1], s[2]);
        let dk = c / self.heads;
        let x = tape.reshape(x, &[batch, t, self.heads, dk])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * self.heads, t, dk])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (t, dk) = (s[1], s[2]);
        let x = tape.reshape(x, &[batch, self.heads, t, dk])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch, t, self.heads * dk])
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<EncoderOutput> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("encoder_layer", "rank", 3, shape.len()));
        }
        let (batch, c) = (shape[0], shape[2]);
        if c % self.heads != 0 {
            return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.heads)));
        }
        let dk = c / self.heads;
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let q = self.split_heads(ctx.tape, q)?;
        let k = self.split_heads(ctx.tape, k)?;
        let values = self.split_heads(ctx.tape, v)?;
        let kt = ctx.tape.transpose(k)?;
        let scores = ctx.tape.matmul(q, kt)?;
        let scores = ctx.tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attention = ctx.tape.softmax(scores, 2)?;
        let context = ctx.tape.matmul(attention, values)?;
        let context = self.merge_heads(ctx.tape, context, batch)?;
        let attended = self.output.forward(ctx, context)?;
        let h = ctx.tape.add(x, attended)?;
        let h = self.norm_attn.forward(ctx, h)?;
        let f = self.ffn_in.forward(ctx, h)?;
        let f = ctx.tape.relu(f);
        let f = self.ffn_out.forward(ctx, f)?;
        let out = ctx.tape.add(h, f)?;
        let output = self.norm_ffn.forward(ctx, out)?;
        Ok(EncoderOutput {
            output,
            attention,
            values,
        })
    }
}

/// Sinusoidal position table `[1, T, C]`.
pub fn sinusoidal_positions(t: usize, channels: usize) -> Tensor {
    let mut data = vec![0.0; t * channels];
    for pos in 0..t {
        for i in (0..channels).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / channels as f64);
            data[pos * channels + i] = angle.sin();
            if i + 1 < channels {
                data[pos * channels + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[1, t, channels], data).expect("position table shape")
}
