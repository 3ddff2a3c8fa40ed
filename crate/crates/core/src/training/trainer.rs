use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{triangular2_lr, Adam, Dataset, TrainConfig};
use crate::architecture::{save_model, ForwardCtx, Mode, Model};
use crate::error::{Error, Result};
use crate::features::random_crop;
use crate::numerics::{Tape, Tensor};
use crate::objective;
use crate::pooling;

/// One `iter<TAB>lr<TAB>loss<TAB>penalty` line; values use round-trip formatting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceLine {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub penalty: f64,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.iter, self.lr, self.loss, self.penalty)
    }
}

/// Where the loop reports progress.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub trace: Option<&'a mut dyn Write>,
    /// Receives `cycle<N>.ckpt` at every cycle boundary.
    pub checkpoint_dir: Option<PathBuf>,
    /// Extra `key=value` lines for checkpoint headers.
    pub echo: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    pub penalties: Vec<f64>,
    pub trace: Vec<TraceLine>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean loss over the last `n` iterations.
    pub fn final_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub penalty: f64,
}

/// Stacks equally long `[80, T]` feature maps into `[B, 80, T]`.
pub fn batch_tensor(maps: &[&Tensor]) -> Result<Tensor> {
    let shape = maps.first().ok_or_else(|| Error::Data("empty batch".into()))?.shape().to_vec();
    let mut data = Vec::with_capacity(maps.len() * shape.iter().product::<usize>());
    for m in maps {
        if m.shape() != shape.as_slice() {
            return Err(Error::dim("batch", "feature map", format!("{shape:?}"), format!("{:?}", m.shape())));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(&[maps.len(), shape[0], shape[1]], data)
}

/// Forward, backward and one Adam update on a prepared batch.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: Tensor, targets: &[usize], lr: f64) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.params, Mode::Train);
    let x = ctx.tape.constant(batch);
    let out = model.network.forward(&mut ctx, x)?;
    let cfg = &model.config;
    let penalty = pooling::diversity_penalty(ctx.tape, &out.attention, cfg.penalty_lambda, cfg.penalty_rho)?;
    let logits = model.classifier.logits(&mut ctx, out.embedding, targets)?;
    let parts = objective::total_loss(ctx.tape, logits, targets, penalty)?;
    let mut bindings = ctx.finish();
    let loss = tape.value(parts.total).item();
    if !loss.is_finite() {
        let origin = tape.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::Numeric(format!("non-finite loss {loss}; first non-finite tensor: {origin}")));
    }
    let penalty = tape.value(parts.penalty).item();
    let grads = tape.backward(parts.total)?;
    let param_grads = bindings.param_grads(&model.params, &grads);
    if let Some((id, _)) = param_grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for parameter '{}'",
            model.params.name(*id)
        )));
    }
    adam.step(&mut model.params, &param_grads, lr);
    bindings.apply_buffer_updates(&mut model.params);
    Ok(StepLoss { loss, penalty })
}

/// Runs `cycles · cycle_len_iters` iterations of seeded uniform batch sampling,
/// random cropping and Adam steps on the scheduled rate.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, out: &mut TrainOutputs<'_>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.feature_dim() != model.config.input_dim {
        return Err(Error::dim("train", "feature dim", model.config.input_dim, data.feature_dim()));
    }
    if data.num_speakers > model.config.num_speakers {
        return Err(Error::Config(format!(
            "dataset has {} speakers but the classifier only {}",
            data.num_speakers, model.config.num_speakers
        )));
    }
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam(), cfg.weight_decay);
    let mut report = TrainReport::default();
    for iter in 0..cfg.total_iters() {
        let lr = triangular2_lr(iter, cfg);
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let u = &data.utterances[rng.random_range(0..data.len())];
            crops.push(random_crop(&u.feats, cfg.crop_frames, &mut rng).coeffs);
            targets.push(u.speaker);
        }
        let batch = batch_tensor(&crops.iter().collect::<Vec<_>>())?;
        let step = train_step(model, &mut adam, batch, &targets, lr)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("iteration {iter}: {msg}")),
                other => other,
            })?;
        report.losses.push(step.loss);
        report.penalties.push(step.penalty);
        if iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters() {
            let line = TraceLine {
                iter,
                lr,
                loss: step.loss,
                penalty: step.penalty,
            };
            log::debug!("{line}");
            if let Some(w) = out.trace.as_mut() {
                writeln!(w, "{line}")?;
            }
            report.trace.push(line);
        }
        if (iter + 1) % cfg.cycle_len_iters == 0 {
            if let Some(dir) = &out.checkpoint_dir {
                let path = dir.join(format!("cycle{}.ckpt", (iter + 1) / cfg.cycle_len_iters));
                let mut echo = out.echo.clone();
                echo.extend(cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
                save_model(&path, model, iter + 1, &echo)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(w) = out.trace.as_mut() {
        w.flush()?;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
