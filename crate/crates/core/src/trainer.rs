//! Training loop: curriculum phase on block 1, sliding-window phase over the
//! remaining blocks, cosine learning-rate decay, periodic on-the-fly testing,
//! and checkpointing at every window transition.
//!
//! An epoch is one optimizer step on one freshly sampled batch; channel
//! streams, dropout masks, and test batches all derive from the run seed, so
//! a run is reproducible bit-for-bit from `(config, seed)`. Batch gradients
//! fan out across workers per sample and are reduced in fixed sample order,
//! which keeps results independent of the worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::adam::{adam_step, AdamConfig, AdamState};
use crate::channel::{
    derive_seed, make_batch, rng_for, Batch, NormalizationMode, SystemConfig, DOMAIN_DROPOUT,
};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use crate::stack::{rollout, L2oModel, LossKind, Trajectory, Window};
use crate::transformer::ModelConfig;

pub const TAG_TRAIN_BATCH: u32 = 1;
pub const TAG_TEST_BATCH: u32 = 2;
pub const TAG_DROPOUT: u32 = 3;
pub const TAG_SWEEP_BATCH: u32 = 4;

/// Curriculum weight schedule: alpha steps down by `step` every `period`
/// epochs, reaching zero at `t_alpha`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    #[serde(default = "default_alpha_step")]
    pub step: f64,
    #[serde(default = "default_alpha_period")]
    pub period: usize,
    #[serde(default = "default_t_alpha")]
    pub t_alpha: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_alpha_step() -> f64 {
    0.01
}
fn default_alpha_period() -> usize {
    5
}
fn default_t_alpha() -> usize {
    500
}
fn default_gamma() -> f64 {
    20.0
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            step: default_alpha_step(),
            period: default_alpha_period(),
            t_alpha: default_t_alpha(),
            gamma: default_gamma(),
        }
    }
}

impl CurriculumSchedule {
    /// `max(0, 1 - step * floor(epoch / period))` up to `t_alpha`, 0 after.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch > self.t_alpha {
            return 0.0;
        }
        (1.0 - self.step * (epoch / self.period) as f64).max(0.0)
    }
}

/// Sliding-window state sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    pub t_s: Vec<usize>,
    pub t_e: Vec<usize>,
    pub state: usize,
    pub terminal: bool,
}

impl WindowSchedule {
    pub fn new(t_s: Vec<usize>, t_e: Vec<usize>) -> Result<Self> {
        if t_s.is_empty() || t_s.len() != t_e.len() {
            return Err(Error::Config {
                field: "window".into(),
                detail: "t_s and t_e must be non-empty and equally long".into(),
            });
        }
        for i in 0..t_s.len() {
            if t_s[i] < 1 || t_s[i] > t_e[i] {
                return Err(Error::Config {
                    field: "window".into(),
                    detail: format!("state {i}: need 1 <= t_s <= t_e, got ({}, {})", t_s[i], t_e[i]),
                });
            }
            if i > 0 && t_e[i] < t_e[i - 1] {
                return Err(Error::Config {
                    field: "window".into(),
                    detail: "t_e must be non-decreasing".into(),
                });
            }
        }
        Ok(WindowSchedule { t_s, t_e, state: 0, terminal: false })
    }

    /// Grow-then-slide schedule of width `window` over `depth` blocks; for
    /// depth 7 and width 3 this is t_s = [1,1,1,2,3,4,5], t_e = [1,...,7].
    pub fn for_depth(depth: usize, window: usize) -> Result<Self> {
        if depth == 0 || window == 0 {
            return Err(Error::Config {
                field: "window".into(),
                detail: "depth and window width must be >= 1".into(),
            });
        }
        let t_e: Vec<usize> = (1..=depth).collect();
        let t_s: Vec<usize> = (1..=depth).map(|te| te.saturating_sub(window - 1).max(1)).collect();
        Self::new(t_s, t_e)
    }

    /// Single-state schedule covering all blocks (the end-to-end ablation).
    pub fn end_to_end(depth: usize) -> Result<Self> {
        Self::new(vec![1], vec![depth])
    }

    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    pub fn current(&self) -> Window {
        Window { t_s: self.t_s[self.state], t_e: self.t_e[self.state] }
    }

    /// Moves to the next state; at the last state this is a no-op that sets
    /// the terminal flag and returns false.
    pub fn advance(&mut self) -> bool {
        if self.state + 1 >= self.len() {
            self.terminal = true;
            false
        } else {
            self.state += 1;
            true
        }
    }
}

/// Optimization-loop configuration (Algorithm-1 control state).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_batch_train")]
    pub batch_train: usize,
    #[serde(default = "default_batch_test")]
    pub batch_test: usize,
    #[serde(default = "default_t_test")]
    pub t_test: usize,
    pub total_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub no_cl: bool,
    #[serde(default)]
    pub no_pga: bool,
    #[serde(default)]
    pub end_to_end: bool,
    #[serde(default)]
    pub curriculum: CurriculumSchedule,
    /// Sliding-window width used to derive the default state sequence.
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    /// Explicit state sequences; both must be given to override the default.
    #[serde(default)]
    pub window_t_s: Option<Vec<usize>>,
    #[serde(default)]
    pub window_t_e: Option<Vec<usize>>,
    /// Epoch budget per window state; defaults to an equal split of the
    /// post-curriculum epochs.
    #[serde(default)]
    pub epochs_per_state: Option<Vec<usize>>,
    #[serde(default)]
    pub normalization: NormalizationMode,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_lr_start() -> f64 {
    2e-4
}
fn default_lr_end() -> f64 {
    5e-5
}
fn default_batch_train() -> usize {
    64
}
fn default_batch_test() -> usize {
    500
}
fn default_t_test() -> usize {
    50
}
fn default_window_size() -> usize {
    3
}

impl TrainConfig {
    /// Cosine decay `lr_end + (lr_start - lr_end)(1 + cos(pi * e / E)) / 2`,
    /// clamped into `[lr_end, lr_start]`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.total_epochs as f64;
        let raw = self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos());
        raw.clamp(self.lr_end.min(self.lr_start), self.lr_start.max(self.lr_end))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config { field: "total_epochs".into(), detail: "must be >= 1".into() });
        }
        if self.batch_train == 0 || self.batch_test == 0 {
            return Err(Error::Config { field: "batch".into(), detail: "batch sizes must be >= 1".into() });
        }
        if self.t_test == 0 {
            return Err(Error::Config { field: "t_test".into(), detail: "must be >= 1".into() });
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config { field: "lr".into(), detail: "learning rates must be positive".into() });
        }
        Ok(())
    }
}

/// Everything one run needs: system, architecture, optimization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.system.k != self.model.l || self.system.n != self.model.l {
            return Err(Error::Config {
                field: "model.l".into(),
                detail: format!(
                    "token pipeline requires K = N = L (system {}x{}, model l = {})",
                    self.system.k, self.system.n, self.model.l
                ),
            });
        }
        Ok(())
    }

    /// The architecture actually trained, with ablation flags applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model;
        if self.train.no_pga {
            m.q = 0;
        }
        m
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub t_s: usize,
    pub t_e: usize,
    pub alpha: f64,
    pub lr: f64,
    pub train_objective: f64,
    pub test_mean_rate: Option<f64>,
    pub test_std_rate: Option<f64>,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,phase,t_s,t_e,alpha,lr,train_objective,test_mean_rate,test_std_rate,wallclock_s";

/// Renders the metrics log; float formatting is Rust's shortest round-trip,
/// so identical runs produce byte-identical bodies.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase,
            r.t_s,
            r.t_e,
            r.alpha,
            r.lr,
            r.train_objective,
            opt(r.test_mean_rate),
            opt(r.test_std_rate),
            r.wallclock_s
        ));
    }
    out
}

/// Forward-only evaluation of a (possibly partial) model over a batch.
#[derive(Clone, Debug)]
pub struct EvalReport<T> {
    pub mean_rate: T,
    pub std_rate: T,
    /// Mean rate after each step t = 0..=T (index 0 is the MMSE rate).
    pub per_step_mean: Vec<T>,
    pub per_sample_seconds: f64,
    pub final_rates: Vec<T>,
}

/// Rolls the whole model forward (no gradients) over every sample.
pub fn evaluate<T: Real>(model: &L2oModel<T>, batch: &Batch<T>) -> Result<EvalReport<T>> {
    if batch.samples.is_empty() {
        return Err(Error::Contract { detail: "evaluate needs a non-empty batch".into() });
    }
    let upto = model.blocks.len();
    let start = Instant::now();
    let trajectories: Vec<Trajectory<T>> = batch
        .samples
        .par_iter()
        .map(|s| rollout(s, model, upto))
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let n = trajectories.len();
    let mut per_step_mean = vec![T::zero(); upto + 1];
    for traj in &trajectories {
        for (t, step) in traj.steps.iter().enumerate() {
            per_step_mean[t] = per_step_mean[t] + step.sum_rate;
        }
    }
    let inv = T::one() / real::<T>(n as f64);
    for v in per_step_mean.iter_mut() {
        *v = *v * inv;
    }
    let final_rates: Vec<T> = trajectories.iter().map(|t| t.final_rate()).collect();
    let mean = per_step_mean[upto];
    let mut var = T::zero();
    for r in &final_rates {
        let d = *r - mean;
        var = var + d * d;
    }
    var = var * inv;
    Ok(EvalReport {
        mean_rate: mean,
        std_rate: var.sqrt(),
        per_step_mean,
        per_sample_seconds: elapsed / n as f64,
        final_rates,
    })
}

/// Result of a training run.
pub struct TrainOutcome<T> {
    pub model: L2oModel<T>,
    pub metrics: Vec<MetricsRow>,
    pub metrics_csv: String,
    /// Checkpoints written at window transitions (with their entry epochs).
    pub transition_checkpoints: Vec<(usize, PathBuf)>,
    pub final_checkpoint: Option<PathBuf>,
    pub final_test_mean_rate: Option<f64>,
}

enum Phase<T> {
    Curriculum { alpha: T },
    Window,
}

/// Runs Algorithm 1. With `out_dir` set, writes transition checkpoints, the
/// final `model.ckpt`, and `metrics.csv` there.
pub fn train<T: Real>(run: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    run.validate()?;
    let cfg = run.effective_model();
    let tc = &run.train;
    let seed = tc.seed;
    let gamma = real::<T>(tc.curriculum.gamma);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut model = L2oModel::<T>::new_random(cfg, seed)?;
    let depth = cfg.t;

    // Window schedule: explicit override, end-to-end single state, or the
    // grow-then-slide default.
    let mut schedule = if tc.end_to_end {
        WindowSchedule::end_to_end(depth)?
    } else {
        match (&tc.window_t_s, &tc.window_t_e) {
            (Some(ts), Some(te)) => WindowSchedule::new(ts.clone(), te.clone())?,
            (None, None) => WindowSchedule::for_depth(depth, tc.window_size)?,
            _ => {
                return Err(Error::Config {
                    field: "window_t_s/window_t_e".into(),
                    detail: "override requires both sequences".into(),
                })
            }
        }
    };
    for &te in &schedule.t_e {
        if te > depth {
            return Err(Error::Config {
                field: "window_t_e".into(),
                detail: format!("state end {te} exceeds depth {depth}"),
            });
        }
    }

    // Epoch budget per window state.
    let curriculum_epochs = if tc.end_to_end { 0 } else { tc.curriculum.t_alpha.min(tc.total_epochs) };
    let post_epochs = tc.total_epochs - curriculum_epochs;
    let state_budgets: Vec<usize> = match &tc.epochs_per_state {
        Some(v) => {
            if v.len() != schedule.len() {
                return Err(Error::Config {
                    field: "epochs_per_state".into(),
                    detail: format!("{} entries for {} states", v.len(), schedule.len()),
                });
            }
            v.clone()
        }
        None => {
            let n = schedule.len();
            let base = post_epochs / n;
            let rem = post_epochs % n;
            (0..n).map(|i| base + usize::from(i < rem)).collect()
        }
    };
    let mut state_ends = Vec::with_capacity(state_budgets.len());
    let mut acc = curriculum_epochs;
    for b in &state_budgets {
        acc += b;
        state_ends.push(acc);
    }

    let n_tensors = if depth > 0 { model.blocks[0].visit().len() } else { 0 };
    let mut adam_states: Vec<Option<AdamState<T>>> = (0..depth).map(|_| None).collect();
    let adam_cfg = AdamConfig { clip_norm: None, ..AdamConfig::default() };
    let clip = tc.clip_norm.unwrap_or(1.0);

    let mut metrics: Vec<MetricsRow> = Vec::with_capacity(tc.total_epochs);
    let mut transition_checkpoints: Vec<(usize, PathBuf)> = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut entered_window_phase = false;
    let mut final_test: Option<f64> = None;
    let start = Instant::now();

    let checkpoint_extra = |epoch: usize, window: Window| {
        json!({
            "run": run,
            "epoch": epoch,
            "window": [window.t_s, window.t_e],
        })
    };

    for epoch in 1..=tc.total_epochs {
        let lr = tc.lr_at(epoch);
        // Phase selection and window bookkeeping.
        let (phase, window, trainable) = if !tc.end_to_end && epoch <= curriculum_epochs {
            let alpha = if tc.no_cl { T::zero() } else { real::<T>(tc.curriculum.alpha_at(epoch)) };
            (Phase::Curriculum { alpha }, Window { t_s: 1, t_e: 1 }, 0..1usize)
        } else {
            // Advance to the state owning this epoch.
            let mut transitioned = !entered_window_phase;
            while schedule.state < schedule.len() - 1 && epoch > state_ends[schedule.state] {
                schedule.advance();
                transitioned = true;
            }
            if transitioned {
                entered_window_phase = true;
                if let Some(dir) = out_dir {
                    let path = dir.join(format!(
                        "transition_epoch{epoch:06}_state{}.ckpt",
                        schedule.state
                    ));
                    model.save(&path, checkpoint_extra(epoch, schedule.current()))?;
                    transition_checkpoints.push((epoch, path.clone()));
                    last_checkpoint = Some(path);
                }
            }
            let w = schedule.current();
            (Phase::Window, w, (w.t_s - 1)..w.t_e)
        };

        if depth == 0 {
            return Err(Error::Config { field: "model.t".into(), detail: "cannot train zero blocks".into() });
        }

        // Fresh batch, per-sample gradients in parallel, fixed-order reduce.
        let batch_seed = derive_seed(seed, TAG_TRAIN_BATCH, epoch as u64);
        let batch: Batch<T> = make_batch(&run.system, tc.normalization, batch_seed, tc.batch_train);
        let kind = match phase {
            Phase::Curriculum { alpha } => LossKind::Curriculum { alpha, gamma },
            Phase::Window => LossKind::Window(window),
        };
        let dropout_seed = derive_seed(seed, TAG_DROPOUT, epoch as u64);
        let per_sample: Vec<crate::stack::SampleGrad<T>> = batch
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if cfg.dropout_p > 0.0 {
                    let mut rng = rng_for(dropout_seed, DOMAIN_DROPOUT, i as u64);
                    crate::stack::sample_loss_and_grads(&model, s, &kind, trainable.clone(), Some(&mut rng))
                } else {
                    crate::stack::sample_loss_and_grads(&model, s, &kind, trainable.clone(), None)
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| annotate_abort(e, epoch, window, &last_checkpoint))?;

        let inv_n = 1.0 / batch.samples.len() as f64;
        let mut loss_mean = 0.0;
        let n_trainable = trainable.len();
        let mut mean_grads: Vec<Vec<T>> = per_sample[0].grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        for sg in &per_sample {
            loss_mean += sg.loss.to_f64().unwrap() * inv_n;
            for (acc, g) in mean_grads.iter_mut().zip(sg.grads.iter()) {
                for (a, &x) in acc.iter_mut().zip(g.iter()) {
                    *a = *a + x;
                }
            }
        }
        let inv_n_t = real::<T>(inv_n);
        for g in mean_grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * inv_n_t;
            }
        }
        if !loss_mean.is_finite() {
            return Err(annotate_abort(
                Error::Numerical { detail: format!("non-finite mean loss {loss_mean}") },
                epoch,
                window,
                &last_checkpoint,
            ));
        }

        // Global clip over the whole trainable set, then per-block Adam.
        let mut norm_sq = T::zero();
        for g in &mean_grads {
            for &x in g {
                norm_sq = norm_sq + x * x;
            }
        }
        let gnorm = norm_sq.sqrt();
        let clip_t = real::<T>(clip);
        if gnorm > clip_t {
            let scale = clip_t / gnorm;
            for g in mean_grads.iter_mut() {
                for x in g.iter_mut() {
                    *x = *x * scale;
                }
            }
        }
        debug_assert_eq!(mean_grads.len(), n_trainable * n_tensors);
        for (bi, block_idx) in trainable.clone().enumerate() {
            for (ti, (_, tensor)) in model.blocks[block_idx].visit_mut().into_iter().enumerate() {
                tensor.grad = Some(std::mem::take(&mut mean_grads[bi * n_tensors + ti]));
            }
            let state = adam_states[block_idx].get_or_insert_with(|| {
                let lens: Vec<usize> =
                    model.blocks[block_idx].visit().iter().map(|(_, t)| t.numel()).collect();
                AdamState::new(&lens)
            });
            let mut refs: Vec<&mut crate::autodiff::TensorData<T>> = Vec::with_capacity(n_tensors);
            for (_, tensor) in model.blocks[block_idx].visit_mut() {
                refs.push(tensor);
            }
            adam_step(&adam_cfg, state, real::<T>(lr), &mut refs)
                .map_err(|e| annotate_abort(e, epoch, window, &last_checkpoint))?;
            for (_, tensor) in model.blocks[block_idx].visit_mut() {
                tensor.grad = None;
            }
        }
        if !model.blocks[trainable.clone().next().unwrap()].all_finite() {
            return Err(annotate_abort(
                Error::Numerical { detail: "non-finite parameters after optimizer step".into() },
                epoch,
                window,
                &last_checkpoint,
            ));
        }

        // Periodic on-the-fly testing on a fresh batch.
        let (test_mean, test_std) = if epoch % tc.t_test == 0 {
            let test_seed = derive_seed(seed, TAG_TEST_BATCH, epoch as u64);
            let test_batch: Batch<T> =
                make_batch(&run.system, tc.normalization, test_seed, tc.batch_test);
            let report = evaluate(&model, &test_batch)?;
            let mean = report.mean_rate.to_f64().unwrap();
            final_test = Some(mean);
            (Some(mean), Some(report.std_rate.to_f64().unwrap()))
        } else {
            (None, None)
        };

        let alpha_log = match phase {
            Phase::Curriculum { alpha } => alpha.to_f64().unwrap(),
            Phase::Window => 0.0,
        };
        metrics.push(MetricsRow {
            epoch,
            phase: match phase {
                Phase::Curriculum { .. } => "curriculum",
                Phase::Window => "window",
            },
            t_s: window.t_s,
            t_e: window.t_e,
            alpha: alpha_log,
            lr,
            train_objective: loss_mean,
            test_mean_rate: test_mean,
            test_std_rate: test_std,
            wallclock_s: if tc.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        });
    }

    let csv = metrics_to_csv(&metrics);
    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let path = dir.join("model.ckpt");
        model.save(&path, checkpoint_extra(tc.total_epochs, schedule.current()))?;
        final_checkpoint = Some(path);
        std::fs::write(dir.join("metrics.csv"), &csv)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        metrics_csv: csv,
        transition_checkpoints,
        final_checkpoint,
        final_test_mean_rate: final_test,
    })
}

fn annotate_abort(e: Error, epoch: usize, window: Window, last_checkpoint: &Option<PathBuf>) -> Error {
    match e {
        Error::Numerical { detail } => Error::Numerical {
            detail: format!(
                "{detail} (epoch {epoch}, window [{}, {}], last good checkpoint: {})",
                window.t_s,
                window.t_e,
                last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
            ),
        },
        other => other,
    }
}
