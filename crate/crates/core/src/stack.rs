//! The T-block refinement stack: residual block chaining, Q-step projected
//! gradient ascent after each block, trajectory recording, and the windowed
//! cumulative objective.
//!
//! Every forward pass, training or inference, goes through the same tape
//! builder; inference simply binds all parameters as constants, so the two
//! paths cannot drift apart. Gradient ascent inside the rollout uses the
//! closed-form direction subgraph, which keeps the whole pipeline first-order
//! differentiable through the ascent steps.

use std::ops::Range;
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::autodiff::checkpoint;
use crate::autodiff::complex::{bind_matrix, cadd, cscale, ctranspose, extract, ComplexVar};
use crate::autodiff::{Tape, TensorData, Var};
use crate::baselines::mmse_beamformer;
use crate::channel::{rng_for, ChannelSample, DOMAIN_INIT};
use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;
use crate::objectives::{ascent_dir_on_tape, mse_on_tape, sum_rate_on_tape, Beamformer};
use crate::scalar::{real, Real};
use crate::transformer::{block_forward_on_tape, BlockParams, BlockVars, ModelConfig};

/// The full refinement model: shared config plus per-block parameters.
#[derive(Clone, Debug)]
pub struct L2oModel<T> {
    pub cfg: ModelConfig,
    pub blocks: Vec<BlockParams<T>>,
}

impl<T: Real> L2oModel<T> {
    /// Random initialization; block `t` draws from the `(seed, INIT, t)` stream.
    pub fn new_random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.t)
            .map(|t| {
                let mut rng = rng_for(seed, DOMAIN_INIT, t as u64);
                BlockParams::init(&cfg, &mut rng)
            })
            .collect();
        Ok(L2oModel { cfg, blocks })
    }

    /// Named tensors of the whole model, `block{t}.` prefixed, canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &TensorData<T>)> {
        let mut out = Vec::new();
        for (t, block) in self.blocks.iter().enumerate() {
            for (name, tensor) in block.visit() {
                out.push((format!("block{t}.{name}"), tensor));
            }
        }
        out
    }

    /// Writes the model into the shared checkpoint format; `extra` carries
    /// run-level metadata next to the architecture config.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let hp = json!({ "model": self.cfg, "extra": extra });
        checkpoint::save(path, &hp, &self.named_tensors())
    }

    /// Loads a model plus the stored metadata blob.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (hp, tensors) = checkpoint::load::<T>(path)?;
        let cfg: ModelConfig = serde_json::from_value(hp["model"].clone())
            .map_err(|e| Error::Checkpoint { detail: format!("model config: {e}") })?;
        cfg.validate()?;
        let mut blocks: Vec<BlockParams<T>> =
            (0..cfg.t).map(|_| BlockParams::zeros(&cfg)).collect();
        let mut it = tensors.into_iter();
        for (t, block) in blocks.iter_mut().enumerate() {
            for (name, slot) in block.visit_mut() {
                let (got, tensor) = it.next().ok_or_else(|| Error::Checkpoint {
                    detail: format!("missing tensor block{t}.{name}"),
                })?;
                let expected = format!("block{t}.{name}");
                if got != expected {
                    return Err(Error::Checkpoint {
                        detail: format!("tensor order mismatch: got {got}, expected {expected}"),
                    });
                }
                if tensor.shape != slot.shape {
                    return Err(Error::Checkpoint {
                        detail: format!(
                            "shape mismatch for {expected}: {:?} vs {:?}",
                            tensor.shape, slot.shape
                        ),
                    });
                }
                *slot = tensor;
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint { detail: "trailing tensors in checkpoint".into() });
        }
        let extra = hp.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((L2oModel { cfg, blocks }, extra))
    }
}

/// Q projected-ascent steps on the tape. `h_true` is the constant channel
/// (K x N), `w` the current beamformer (N x K). After each ascent step the
/// iterate is rescaled onto the power sphere when it leaves the ball (the
/// projection can be disabled for the unprojected literal update).
pub fn pga_on_tape<T: Real>(
    tape: &Tape<T>,
    h_true: ComplexVar,
    w: ComplexVar,
    power: T,
    q: usize,
    eta: T,
    projection: bool,
) -> Result<ComplexVar> {
    let mut cur = w;
    let sqrt_p = power.sqrt();
    for _ in 0..q {
        let dir = ascent_dir_on_tape(tape, h_true, cur)?;
        cur = cadd(tape, cur, cscale(tape, dir, eta))?;
        if projection {
            let stacked = tape.concat(0, &[cur.re, cur.im])?;
            let norm = tape.l2_norm(stacked);
            if tape.scalar_value(norm) > sqrt_p {
                let coef = tape.scalar_mul(tape.reciprocal(norm), sqrt_p);
                cur = ComplexVar {
                    re: tape.scale_by(cur.re, coef)?,
                    im: tape.scale_by(cur.im, coef)?,
                };
            }
        }
    }
    Ok(cur)
}

/// Standalone semi-amortized refinement of a beamformer (Q ascent steps).
pub fn pga_refine<T: Real>(
    h: &ChannelSample<T>,
    w0: &Beamformer<T>,
    q: usize,
    eta_w: T,
    projection: bool,
) -> Result<Beamformer<T>> {
    let tape = Tape::new();
    let hv = bind_matrix(&tape, &h.h_norm);
    let wv = bind_matrix(&tape, &w0.w);
    let out = pga_on_tape(&tape, hv, wv, w0.power_budget, q, eta_w, projection)?;
    Ok(Beamformer::new(extract(&tape, out), w0.power_budget))
}

/// Tape handles of one rollout step.
pub struct StepVars {
    /// Channel feature H^(t), K x N.
    pub h: ComplexVar,
    /// Refined beamformer W^(t), N x K.
    pub w: ComplexVar,
    /// Sum rate R(H, W^(t)) against the true channel.
    pub rate: Var,
}

fn attach_step(e: Error, step: usize) -> Error {
    match e {
        Error::DegenerateOutput { norm, .. } => Error::DegenerateOutput { step, norm },
        other => other,
    }
}

/// Unrolls blocks 1..=`upto` from (H^(0), W^(0)) on the tape, recording every
/// step including step 0. `detach_at` cuts the graph right before that
/// (1-based) block, which is how the sliding window freezes its prefix even
/// if prefix parameters were bound as trainable.
#[allow(clippy::too_many_arguments)]
pub fn rollout_on_tape<T: Real>(
    tape: &Tape<T>,
    blocks: &[BlockVars],
    cfg: &ModelConfig,
    sample: &ChannelSample<T>,
    w0: &Beamformer<T>,
    upto: usize,
    detach_at: Option<usize>,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<Vec<StepVars>> {
    if upto > blocks.len() {
        return Err(Error::Contract {
            detail: format!("rollout upto {upto} exceeds bound blocks {}", blocks.len()),
        });
    }
    let power = real::<T>(sample.cfg.power);
    let eta = real::<T>(cfg.eta_w);
    let h_true = bind_matrix(tape, &sample.h_norm);
    let w0v = bind_matrix(tape, &w0.w);
    let rate0 = sum_rate_on_tape(tape, h_true, w0v)?;
    let mut steps = vec![StepVars { h: h_true, w: w0v, rate: rate0 }];
    let mut h_cur = h_true;
    let mut w_cur = w0v; // N x K
    for t in 0..upto {
        if detach_at == Some(t + 1) {
            h_cur = ComplexVar { re: tape.detach(h_cur.re), im: tape.detach(h_cur.im) };
            w_cur = ComplexVar { re: tape.detach(w_cur.re), im: tape.detach(w_cur.im) };
        }
        let w_kn = ctranspose(tape, w_cur)?;
        let (h_next, w_block) = block_forward_on_tape(
            tape,
            &blocks[t],
            cfg,
            power,
            h_cur,
            w_kn,
            dropout_rng.as_deref_mut(),
        )
        .map_err(|e| attach_step(e, t + 1))?;
        let w_nk = ctranspose(tape, w_block)?;
        let w_ref = pga_on_tape(tape, h_true, w_nk, power, cfg.q, eta, cfg.pga_projection)?;
        let rate = sum_rate_on_tape(tape, h_true, w_ref)?;
        steps.push(StepVars { h: h_next, w: w_ref, rate });
        h_cur = h_next;
        w_cur = w_ref;
    }
    Ok(steps)
}

/// One recorded refinement step.
#[derive(Clone, Debug)]
pub struct TrajectoryStep<T> {
    pub h: ComplexMatrix<T>,
    pub w: Beamformer<T>,
    pub sum_rate: T,
}

/// Records of t = 0..=upto; step 0 holds the true channel and its MMSE
/// beamformer.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub steps: Vec<TrajectoryStep<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn rates(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.sum_rate).collect()
    }

    pub fn final_rate(&self) -> T {
        self.steps.last().expect("trajectory has step 0").sum_rate
    }
}

/// Inference rollout: binds all parameters as constants and extracts the
/// trajectory. `upto = 0` evaluates just the MMSE initialization.
pub fn rollout<T: Real>(
    sample: &ChannelSample<T>,
    model: &L2oModel<T>,
    upto: usize,
) -> Result<Trajectory<T>> {
    let power = real::<T>(sample.cfg.power);
    let w0 = mmse_beamformer(sample, power)?;
    let tape = Tape::new();
    let bound: Vec<BlockVars> =
        model.blocks[..upto].iter().map(|b| b.bind(&tape, false)).collect();
    let steps = rollout_on_tape(&tape, &bound, &model.cfg, sample, &w0, upto, None, None)?;
    let steps = steps
        .into_iter()
        .map(|s| TrajectoryStep {
            h: extract(&tape, s.h),
            w: Beamformer::new(extract(&tape, s.w), power),
            sum_rate: tape.scalar_value(s.rate),
        })
        .collect();
    Ok(Trajectory { steps })
}

/// Training window `[t_s, t_e]`, 1-based inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub t_s: usize,
    pub t_e: usize,
}

/// The windowed cumulative objective: mean over the batch of
/// `sum_{t = t_s}^{t_e} R_sum(H, W^(t))`, with blocks before `t_s` cut out of
/// the gradient. Returns a scalar node (to be maximized).
pub fn cumulative_objective_on_tape<T: Real>(
    tape: &Tape<T>,
    blocks: &[BlockVars],
    cfg: &ModelConfig,
    batch: &[ChannelSample<T>],
    window: Window,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract { detail: "cumulative objective over an empty batch".into() });
    }
    if window.t_s < 1 || window.t_s > window.t_e || window.t_e > blocks.len() {
        return Err(Error::Contract {
            detail: format!("window [{}, {}] invalid for {} blocks", window.t_s, window.t_e, blocks.len()),
        });
    }
    let mut acc: Option<Var> = None;
    for sample in batch {
        let power = real::<T>(sample.cfg.power);
        let w0 = mmse_beamformer(sample, power)?;
        let steps = rollout_on_tape(
            tape,
            blocks,
            cfg,
            sample,
            &w0,
            window.t_e,
            Some(window.t_s),
            dropout_rng.as_deref_mut(),
        )?;
        for t in window.t_s..=window.t_e {
            acc = Some(match acc {
                Some(a) => tape.add(a, steps[t].rate)?,
                None => steps[t].rate,
            });
        }
    }
    let total = acc.expect("non-empty batch and window");
    Ok(tape.scalar_mul(total, T::one() / real::<T>(batch.len() as f64)))
}

/// What the trainer minimizes on one sample.
#[derive(Clone, Copy, Debug)]
pub enum LossKind<T> {
    /// Negated windowed cumulative rate.
    Window(Window),
    /// First-block curriculum blend `alpha*gamma*MSE - (1-alpha)*R`.
    Curriculum { alpha: T, gamma: T },
}

/// Per-sample loss value and gradients for the trainable blocks, in canonical
/// parameter order.
pub struct SampleGrad<T> {
    pub loss: T,
    pub grads: Vec<Vec<T>>,
}

/// Builds, evaluates, and differentiates the per-sample loss on its own tape.
/// `trainable` selects the 0-based block range whose parameters receive
/// gradients; everything earlier is both bound constant and detached.
pub fn sample_loss_and_grads<T: Real>(
    model: &L2oModel<T>,
    sample: &ChannelSample<T>,
    kind: &LossKind<T>,
    trainable: Range<usize>,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<SampleGrad<T>> {
    let (upto, window) = match kind {
        LossKind::Window(w) => (w.t_e, *w),
        LossKind::Curriculum { .. } => (1, Window { t_s: 1, t_e: 1 }),
    };
    let tape = Tape::new();
    let bound: Vec<BlockVars> = model.blocks[..upto]
        .iter()
        .enumerate()
        .map(|(i, b)| b.bind(&tape, trainable.contains(&i)))
        .collect();
    let power = real::<T>(sample.cfg.power);
    let w0 = mmse_beamformer(sample, power)?;
    let steps = rollout_on_tape(
        &tape,
        &bound,
        &model.cfg,
        sample,
        &w0,
        upto,
        Some(window.t_s),
        dropout_rng,
    )?;
    let loss = match kind {
        LossKind::Window(w) => {
            let mut acc: Option<Var> = None;
            for t in w.t_s..=w.t_e {
                acc = Some(match acc {
                    Some(a) => tape.add(a, steps[t].rate)?,
                    None => steps[t].rate,
                });
            }
            tape.scalar_mul(acc.expect("window is non-empty"), -T::one())
        }
        LossKind::Curriculum { alpha, gamma } => {
            if *alpha < T::zero() || *alpha > T::one() {
                return Err(Error::Contract { detail: format!("alpha must lie in [0,1], got {alpha}") });
            }
            let h_true = steps[0].h;
            let mse = mse_on_tape(&tape, h_true, steps[1].w)?;
            let a = tape.scalar_mul(mse, *alpha * *gamma);
            let b = tape.scalar_mul(steps[1].rate, -(T::one() - *alpha));
            tape.add(a, b)?
        }
    };
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::Numerical {
            detail: format!("non-finite loss {loss_value} on sample (seed {}, index {})", sample.seed, sample.index),
        });
    }
    let param_vars: Vec<Var> = trainable.clone().flat_map(|i| bound[i].param_vars()).collect();
    let mut grads = tape.backward(loss)?;
    let out = param_vars.iter().map(|v| grads.take_or_zeros(*v)).collect();
    Ok(SampleGrad { loss: loss_value, grads: out })
}
