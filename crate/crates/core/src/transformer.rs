//! One Transformer block: token construction from (H, W), dual-sequence
//! embedding, multi-head self-attention, residual merges, output MLPs, and
//! power-normalized reconstruction.
//!
//! Token geometry (K = N = L): the block input is the channel feature H and
//! the beamformer feature W, both held as L x L complex matrices in
//! users-as-rows layout. The user-level sequence S stacks
//! [Re H; Im H; Re W; Im W] as 4L rows of dimension L; the antenna-level
//! sequence T stacks the transposes the same way. Both raw sequences are
//! added back to the attention output (the cross-sequence term can be
//! disabled through `cross_token_residual` for ablation).

use rand_chacha::ChaCha20Rng;

use crate::autodiff::complex::{bind_matrix, extract, ComplexVar};
use crate::autodiff::{Tape, TensorData, Var};
use crate::channel::uniform_f64;
use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;
use crate::objectives::Beamformer;
use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};

/// Architecture and refinement hyperparameters shared by all blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// System size; the token pipeline requires K = N = L.
    pub l: usize,
    /// Embedding dimension M.
    pub m: usize,
    /// Attention head count E.
    pub e: usize,
    /// Per-head dimension D_e.
    pub d_e: usize,
    /// Dropout probability inside every MLP.
    #[serde(default)]
    pub dropout_p: f64,
    /// Number of Transformer blocks T.
    pub t: usize,
    /// Gradient-ascent steps Q after each block.
    pub q: usize,
    /// Gradient-ascent step size.
    pub eta_w: f64,
    /// Add the transposed-sequence tokens in the first residual merge.
    #[serde(default = "default_true")]
    pub cross_token_residual: bool,
    /// Rescale onto the power sphere after each ascent step.
    #[serde(default = "default_true")]
    pub pga_projection: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Concatenated attention width D = 2 * D_e * E.
    pub fn d(&self) -> usize {
        2 * self.d_e * self.e
    }

    /// Token sequence length 4L.
    pub fn seq_len(&self) -> usize {
        4 * self.l
    }

    /// Desk-scale defaults: M = 4L, E = 4, D_e = M / E.
    pub fn desk(l: usize, t: usize, q: usize) -> Self {
        let m = 4 * l;
        let e = 4;
        ModelConfig {
            l,
            m,
            e,
            d_e: m / e,
            dropout_p: 0.0,
            t,
            q,
            eta_w: 1e-2,
            cross_token_residual: true,
            pga_projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Config { field: "l".into(), detail: "system size must be >= 2".into() });
        }
        if self.m < self.l {
            return Err(Error::Config { field: "m".into(), detail: "embedding dim must be >= l".into() });
        }
        if self.e == 0 || self.d_e == 0 {
            return Err(Error::Config { field: "e/d_e".into(), detail: "head geometry must be positive".into() });
        }
        if !(self.dropout_p >= 0.0 && self.dropout_p < 1.0) {
            return Err(Error::Config { field: "dropout_p".into(), detail: "must lie in [0, 1)".into() });
        }
        if !(self.eta_w > 0.0) {
            return Err(Error::Config { field: "eta_w".into(), detail: "ascent step must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: TensorData<T>,
    pub b: TensorData<T>,
}

#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub gain: TensorData<T>,
    pub bias: TensorData<T>,
}

#[derive(Clone, Debug)]
pub struct QkvProj<T> {
    pub q: TensorData<T>,
    pub k: TensorData<T>,
    pub v: TensorData<T>,
}

/// FC -> TN -> GELU -> dropout, applied once per MLP.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc: Linear<T>,
    pub tn: Norm<T>,
}

/// All learnable parameters of one block.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub fc_s: Linear<T>,
    pub tn_s: Norm<T>,
    pub fc_t: Linear<T>,
    pub tn_t: Norm<T>,
    pub heads_s: Vec<QkvProj<T>>,
    pub heads_t: Vec<QkvProj<T>>,
    pub mlp_sa: Mlp<T>,
    pub tn_h: Norm<T>,
    pub tn_w: Norm<T>,
    pub mlp_h: Mlp<T>,
    pub mlp_w: Mlp<T>,
}

fn uniform_tensor<T: Real>(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> TensorData<T> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| real::<T>((uniform_f64(rng) * 2.0 - 1.0) * scale)).collect();
    TensorData { shape, data, grad: None }
}

fn init_linear<T: Real>(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Linear<T> {
    Linear {
        w: uniform_tensor(rng, vec![fan_in, fan_out], fan_in),
        b: TensorData::zeros(vec![fan_out]),
    }
}

fn init_norm<T: Real>(dim: usize) -> Norm<T> {
    Norm {
        gain: TensorData { shape: vec![dim], data: vec![T::one(); dim], grad: None },
        bias: TensorData::zeros(vec![dim]),
    }
}

fn init_mlp<T: Real>(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Mlp<T> {
    Mlp { fc: init_linear(rng, fan_in, fan_out), tn: init_norm(fan_out) }
}

impl<T: Real> BlockParams<T> {
    /// Random initialization: FC/projection weights uniform with scale
    /// 1/sqrt(fan-in), TN gains 1, biases 0. Draw order equals field order.
    ///
    /// The three MLP output norms start with zero gain, so every MLP branch
    /// vanishes at initialization and the block reduces to its residual
    /// connections. Without that, the untrained attention path dwarfs the
    /// beamformer tokens (unit-variance TN output against O(sqrt(P/NK))
    /// entries) and training has to first unlearn the noise it injects.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let (l, m, d_e, d) = (cfg.l, cfg.m, cfg.d_e, cfg.d());
        let head = |rng: &mut ChaCha20Rng| QkvProj {
            q: uniform_tensor(rng, vec![m, d_e], m),
            k: uniform_tensor(rng, vec![m, d_e], m),
            v: uniform_tensor(rng, vec![m, d_e], m),
        };
        let zero_gain = |mut mlp: Mlp<T>| {
            mlp.tn.gain.data.iter_mut().for_each(|x| *x = T::zero());
            mlp
        };
        BlockParams {
            fc_s: init_linear(rng, l, m),
            tn_s: init_norm(m),
            fc_t: init_linear(rng, l, m),
            tn_t: init_norm(m),
            heads_s: (0..cfg.e).map(|_| head(rng)).collect(),
            heads_t: (0..cfg.e).map(|_| head(rng)).collect(),
            mlp_sa: zero_gain(init_mlp(rng, d, l)),
            tn_h: init_norm(l),
            tn_w: init_norm(l),
            mlp_h: zero_gain(init_mlp(rng, l, l)),
            mlp_w: zero_gain(init_mlp(rng, l, l)),
        }
    }

    /// Every parameter tensor set to zero (used by shape tests).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (l, m, d_e, d) = (cfg.l, cfg.m, cfg.d_e, cfg.d());
        let zl = |i: usize, o: usize| Linear::<T> {
            w: TensorData::zeros(vec![i, o]),
            b: TensorData::zeros(vec![o]),
        };
        let zn = |dim: usize| Norm::<T> {
            gain: TensorData::zeros(vec![dim]),
            bias: TensorData::zeros(vec![dim]),
        };
        let zh = || QkvProj::<T> {
            q: TensorData::zeros(vec![m, d_e]),
            k: TensorData::zeros(vec![m, d_e]),
            v: TensorData::zeros(vec![m, d_e]),
        };
        BlockParams {
            fc_s: zl(l, m),
            tn_s: zn(m),
            fc_t: zl(l, m),
            tn_t: zn(m),
            heads_s: (0..cfg.e).map(|_| zh()).collect(),
            heads_t: (0..cfg.e).map(|_| zh()).collect(),
            mlp_sa: Mlp { fc: zl(d, l), tn: zn(l) },
            tn_h: zn(l),
            tn_w: zn(l),
            mlp_h: Mlp { fc: zl(l, l), tn: zn(l) },
            mlp_w: Mlp { fc: zl(l, l), tn: zn(l) },
        }
    }

    /// Named tensors in canonical order (matches [`BlockVars::param_vars`]).
    pub fn visit(&self) -> Vec<(String, &TensorData<T>)> {
        let mut out: Vec<(String, &TensorData<T>)> = vec![
            ("fc_s.w".into(), &self.fc_s.w),
            ("fc_s.b".into(), &self.fc_s.b),
            ("tn_s.gain".into(), &self.tn_s.gain),
            ("tn_s.bias".into(), &self.tn_s.bias),
            ("fc_t.w".into(), &self.fc_t.w),
            ("fc_t.b".into(), &self.fc_t.b),
            ("tn_t.gain".into(), &self.tn_t.gain),
            ("tn_t.bias".into(), &self.tn_t.bias),
        ];
        for (i, h) in self.heads_s.iter().enumerate() {
            out.push((format!("heads_s.{i}.q"), &h.q));
            out.push((format!("heads_s.{i}.k"), &h.k));
            out.push((format!("heads_s.{i}.v"), &h.v));
        }
        for (i, h) in self.heads_t.iter().enumerate() {
            out.push((format!("heads_t.{i}.q"), &h.q));
            out.push((format!("heads_t.{i}.k"), &h.k));
            out.push((format!("heads_t.{i}.v"), &h.v));
        }
        out.extend([
            ("mlp_sa.fc.w".to_string(), &self.mlp_sa.fc.w),
            ("mlp_sa.fc.b".to_string(), &self.mlp_sa.fc.b),
            ("mlp_sa.tn.gain".to_string(), &self.mlp_sa.tn.gain),
            ("mlp_sa.tn.bias".to_string(), &self.mlp_sa.tn.bias),
            ("tn_h.gain".to_string(), &self.tn_h.gain),
            ("tn_h.bias".to_string(), &self.tn_h.bias),
            ("tn_w.gain".to_string(), &self.tn_w.gain),
            ("tn_w.bias".to_string(), &self.tn_w.bias),
            ("mlp_h.fc.w".to_string(), &self.mlp_h.fc.w),
            ("mlp_h.fc.b".to_string(), &self.mlp_h.fc.b),
            ("mlp_h.tn.gain".to_string(), &self.mlp_h.tn.gain),
            ("mlp_h.tn.bias".to_string(), &self.mlp_h.tn.bias),
            ("mlp_w.fc.w".to_string(), &self.mlp_w.fc.w),
            ("mlp_w.fc.b".to_string(), &self.mlp_w.fc.b),
            ("mlp_w.tn.gain".to_string(), &self.mlp_w.tn.gain),
            ("mlp_w.tn.bias".to_string(), &self.mlp_w.tn.bias),
        ]);
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut TensorData<T>)> {
        let mut out: Vec<(String, &mut TensorData<T>)> = vec![
            ("fc_s.w".into(), &mut self.fc_s.w),
            ("fc_s.b".into(), &mut self.fc_s.b),
            ("tn_s.gain".into(), &mut self.tn_s.gain),
            ("tn_s.bias".into(), &mut self.tn_s.bias),
            ("fc_t.w".into(), &mut self.fc_t.w),
            ("fc_t.b".into(), &mut self.fc_t.b),
            ("tn_t.gain".into(), &mut self.tn_t.gain),
            ("tn_t.bias".into(), &mut self.tn_t.bias),
        ];
        for (i, h) in self.heads_s.iter_mut().enumerate() {
            out.push((format!("heads_s.{i}.q"), &mut h.q));
            out.push((format!("heads_s.{i}.k"), &mut h.k));
            out.push((format!("heads_s.{i}.v"), &mut h.v));
        }
        for (i, h) in self.heads_t.iter_mut().enumerate() {
            out.push((format!("heads_t.{i}.q"), &mut h.q));
            out.push((format!("heads_t.{i}.k"), &mut h.k));
            out.push((format!("heads_t.{i}.v"), &mut h.v));
        }
        out.push(("mlp_sa.fc.w".to_string(), &mut self.mlp_sa.fc.w));
        out.push(("mlp_sa.fc.b".to_string(), &mut self.mlp_sa.fc.b));
        out.push(("mlp_sa.tn.gain".to_string(), &mut self.mlp_sa.tn.gain));
        out.push(("mlp_sa.tn.bias".to_string(), &mut self.mlp_sa.tn.bias));
        out.push(("tn_h.gain".to_string(), &mut self.tn_h.gain));
        out.push(("tn_h.bias".to_string(), &mut self.tn_h.bias));
        out.push(("tn_w.gain".to_string(), &mut self.tn_w.gain));
        out.push(("tn_w.bias".to_string(), &mut self.tn_w.bias));
        out.push(("mlp_h.fc.w".to_string(), &mut self.mlp_h.fc.w));
        out.push(("mlp_h.fc.b".to_string(), &mut self.mlp_h.fc.b));
        out.push(("mlp_h.tn.gain".to_string(), &mut self.mlp_h.tn.gain));
        out.push(("mlp_h.tn.bias".to_string(), &mut self.mlp_h.tn.bias));
        out.push(("mlp_w.fc.w".to_string(), &mut self.mlp_w.fc.w));
        out.push(("mlp_w.fc.b".to_string(), &mut self.mlp_w.fc.b));
        out.push(("mlp_w.tn.gain".to_string(), &mut self.mlp_w.tn.gain));
        out.push(("mlp_w.tn.bias".to_string(), &mut self.mlp_w.tn.bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Binds all tensors onto a tape, trainable or frozen.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BlockVars {
        let lin = |l: &Linear<T>| LinearV { w: tape.leaf(&l.w, trainable), b: tape.leaf(&l.b, trainable) };
        let nrm = |n: &Norm<T>| NormV {
            gain: tape.leaf(&n.gain, trainable),
            bias: tape.leaf(&n.bias, trainable),
        };
        let qkv = |h: &QkvProj<T>| QkvV {
            q: tape.leaf(&h.q, trainable),
            k: tape.leaf(&h.k, trainable),
            v: tape.leaf(&h.v, trainable),
        };
        let mlp = |m: &Mlp<T>| MlpV { fc: lin(&m.fc), tn: nrm(&m.tn) };
        BlockVars {
            fc_s: lin(&self.fc_s),
            tn_s: nrm(&self.tn_s),
            fc_t: lin(&self.fc_t),
            tn_t: nrm(&self.tn_t),
            heads_s: self.heads_s.iter().map(qkv).collect(),
            heads_t: self.heads_t.iter().map(qkv).collect(),
            mlp_sa: mlp(&self.mlp_sa),
            tn_h: nrm(&self.tn_h),
            tn_w: nrm(&self.tn_w),
            mlp_h: mlp(&self.mlp_h),
            mlp_w: mlp(&self.mlp_w),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearV {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormV {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct QkvV {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpV {
    pub fc: LinearV,
    pub tn: NormV,
}

/// Tape handles of one bound block, mirroring [`BlockParams`].
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub fc_s: LinearV,
    pub tn_s: NormV,
    pub fc_t: LinearV,
    pub tn_t: NormV,
    pub heads_s: Vec<QkvV>,
    pub heads_t: Vec<QkvV>,
    pub mlp_sa: MlpV,
    pub tn_h: NormV,
    pub tn_w: NormV,
    pub mlp_h: MlpV,
    pub mlp_w: MlpV,
}

impl BlockVars {
    /// Vars in the same canonical order as [`BlockParams::visit`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.fc_s.w,
            self.fc_s.b,
            self.tn_s.gain,
            self.tn_s.bias,
            self.fc_t.w,
            self.fc_t.b,
            self.tn_t.gain,
            self.tn_t.bias,
        ];
        for h in &self.heads_s {
            out.extend([h.q, h.k, h.v]);
        }
        for h in &self.heads_t {
            out.extend([h.q, h.k, h.v]);
        }
        out.extend([
            self.mlp_sa.fc.w,
            self.mlp_sa.fc.b,
            self.mlp_sa.tn.gain,
            self.mlp_sa.tn.bias,
            self.tn_h.gain,
            self.tn_h.bias,
            self.tn_w.gain,
            self.tn_w.bias,
            self.mlp_h.fc.w,
            self.mlp_h.fc.b,
            self.mlp_h.tn.gain,
            self.mlp_h.tn.bias,
            self.mlp_w.fc.w,
            self.mlp_w.fc.b,
            self.mlp_w.tn.gain,
            self.mlp_w.tn.bias,
        ]);
        out
    }
}

/// The two raw token sequences, tokens as rows (4L x L each).
#[derive(Clone, Debug)]
pub struct TokenBundle<T> {
    pub s: TensorData<T>,
    pub t: TensorData<T>,
}

fn require_square<T: Real>(h: &ComplexMatrix<T>, w: &ComplexMatrix<T>) -> Result<usize> {
    let l = h.rows();
    if h.cols() != l || w.rows() != l || w.cols() != l {
        return Err(Error::UnsupportedShape {
            detail: format!(
                "token pipeline requires K = N = L, got H {}x{}, W {}x{}",
                h.rows(),
                h.cols(),
                w.rows(),
                w.cols()
            ),
        });
    }
    Ok(l)
}

/// Builds the user-level sequence S = [Re H; Im H; Re W; Im W] and the
/// antenna-level sequence T from the transposes; both inputs are L x L in
/// users-as-rows layout.
pub fn build_tokens<T: Real>(
    h_in: &ComplexMatrix<T>,
    w_in: &ComplexMatrix<T>,
) -> Result<TokenBundle<T>> {
    let l = require_square(h_in, w_in)?;
    let mut s = Vec::with_capacity(4 * l * l);
    let mut t = Vec::with_capacity(4 * l * l);
    let push_mat = |buf: &mut Vec<T>, m: &ComplexMatrix<T>, imag: bool, transpose: bool| {
        for i in 0..l {
            for j in 0..l {
                let c = if transpose { m.get(j, i) } else { m.get(i, j) };
                buf.push(if imag { c.im } else { c.re });
            }
        }
    };
    for (m, imag) in [(h_in, false), (h_in, true), (w_in, false), (w_in, true)] {
        push_mat(&mut s, m, imag, false);
    }
    for (m, imag) in [(h_in, false), (h_in, true), (w_in, false), (w_in, true)] {
        push_mat(&mut t, m, imag, true);
    }
    Ok(TokenBundle {
        s: TensorData::new(vec![4 * l, l], s)?,
        t: TensorData::new(vec![4 * l, l], t)?,
    })
}

/// Reconstructs (H, W) from a user-level sequence (the inverse of the S part
/// of [`build_tokens`]).
pub fn tokens_to_matrices<T: Real>(s: &TensorData<T>) -> Result<(ComplexMatrix<T>, ComplexMatrix<T>)> {
    if s.shape.len() != 2 || s.shape[0] % 4 != 0 || s.shape[0] / 4 != s.shape[1] {
        return Err(Error::UnsupportedShape {
            detail: format!("expected a 4L x L sequence, got {:?}", s.shape),
        });
    }
    let l = s.shape[1];
    let at = |block: usize, i: usize, j: usize| s.data[(block * l + i) * l + j];
    let h = ComplexMatrix::from_fn(l, l, |i, j| num_complex::Complex::new(at(0, i, j), at(1, i, j)));
    let w = ComplexMatrix::from_fn(l, l, |i, j| num_complex::Complex::new(at(2, i, j), at(3, i, j)));
    Ok((h, w))
}

fn build_tokens_on_tape<T: Real>(tape: &Tape<T>, h: ComplexVar, w: ComplexVar) -> Result<(Var, Var)> {
    let s = tape.concat(0, &[h.re, h.im, w.re, w.im])?;
    let t = tape.concat(
        0,
        &[
            tape.transpose(h.re)?,
            tape.transpose(h.im)?,
            tape.transpose(w.re)?,
            tape.transpose(w.im)?,
        ],
    )?;
    Ok((s, t))
}

fn linear_fwd<T: Real>(tape: &Tape<T>, x: Var, lin: &LinearV) -> Result<Var> {
    tape.add_row_broadcast(tape.matmul(x, lin.w)?, lin.b)
}

fn embed_one<T: Real>(tape: &Tape<T>, x: Var, fc: &LinearV, tn: &NormV) -> Result<Var> {
    tape.token_norm(linear_fwd(tape, x, fc)?, tn.gain, tn.bias)
}

fn mlp_fwd<T: Real>(
    tape: &Tape<T>,
    x: Var,
    mlp: &MlpV,
    dropout_p: f64,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let a = linear_fwd(tape, x, &mlp.fc)?;
    let n = tape.token_norm(a, mlp.tn.gain, mlp.tn.bias)?;
    let g = tape.gelu(n);
    if dropout_p > 0.0 {
        let rng = rng.as_deref_mut().ok_or_else(|| Error::Contract {
            detail: "dropout_p > 0 requires a dropout rng".into(),
        })?;
        Ok(tape.dropout(g, dropout_p, rng))
    } else {
        Ok(g)
    }
}

/// Embeds both sequences: FC to dimension M, then token normalization.
/// No positional encoding is added anywhere in the block.
pub fn embed_on_tape<T: Real>(
    tape: &Tape<T>,
    s: Var,
    t: Var,
    vars: &BlockVars,
) -> Result<(Var, Var)> {
    Ok((
        embed_one(tape, s, &vars.fc_s, &vars.tn_s)?,
        embed_one(tape, t, &vars.fc_t, &vars.tn_t)?,
    ))
}

/// Multi-head self-attention over both embedded sequences.
///
/// Returns the concatenated head outputs Y (4L x D) and Y_c = MLP_sa(Y)
/// (4L x L). The attention-times-value product uses the order-invariant
/// matmul so the core stays permutation-equivariant at the bit level.
pub fn mhsa_on_tape<T: Real>(
    tape: &Tape<T>,
    s_bar: Var,
    t_bar: Var,
    vars: &BlockVars,
    cfg: &ModelConfig,
    dropout_rng: &mut Option<&mut ChaCha20Rng>,
) -> Result<(Var, Var)> {
    let scale = real::<T>(1.0 / (cfg.d_e as f64).sqrt());
    let mut parts = Vec::with_capacity(2 * cfg.e);
    for (seq, heads) in [(s_bar, &vars.heads_s), (t_bar, &vars.heads_t)] {
        for head in heads.iter() {
            let q = tape.matmul(seq, head.q)?;
            let k = tape.matmul(seq, head.k)?;
            let v = tape.matmul(seq, head.v)?;
            let logits = tape.scalar_mul(tape.matmul(q, tape.transpose(k)?)?, scale);
            let attn = tape.row_softmax(logits)?;
            parts.push(tape.matmul_exact(attn, v)?);
        }
    }
    let y = tape.concat(1, &parts)?;
    let y_c = mlp_fwd(tape, y, &vars.mlp_sa, cfg.dropout_p, dropout_rng)?;
    Ok((y, y_c))
}

/// Full block forward on the tape. `h` and `w` are L x L (users-as-rows);
/// returns the refined channel feature and the power-normalized beamformer
/// feature in the same layout.
pub fn block_forward_on_tape<T: Real>(
    tape: &Tape<T>,
    vars: &BlockVars,
    cfg: &ModelConfig,
    power: T,
    h: ComplexVar,
    w: ComplexVar,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(ComplexVar, ComplexVar)> {
    let l = cfg.l;
    let shape = tape.shape(h.re);
    if shape != [l, l] || tape.shape(w.re) != [l, l] {
        return Err(Error::UnsupportedShape {
            detail: format!("block expects L x L inputs with L = {l}, got {shape:?}"),
        });
    }
    let (two_l, four_l) = (2 * l, 4 * l);
    let (s, t) = build_tokens_on_tape(tape, h, w)?;
    let (s_bar, t_bar) = embed_on_tape(tape, s, t, vars)?;
    let (_y, y_c) = mhsa_on_tape(tape, s_bar, t_bar, vars, cfg, &mut dropout_rng)?;

    // First residual merge: attention output plus the raw sequences.
    let merge = |range: (usize, usize)| -> Result<Var> {
        let yc = tape.slice(y_c, 0, range.0, range.1)?;
        let ss = tape.slice(s, 0, range.0, range.1)?;
        let mut acc = tape.add(yc, ss)?;
        if cfg.cross_token_residual {
            let tt = tape.slice(t, 0, range.0, range.1)?;
            acc = tape.add(acc, tt)?;
        }
        Ok(acc)
    };
    let y_h_sa = merge((0, two_l))?;
    let y_w_sa = merge((two_l, four_l))?;

    // Output stage: TN, dedicated MLP, second residual.
    let yh_bar = tape.token_norm(y_h_sa, vars.tn_h.gain, vars.tn_h.bias)?;
    let yw_bar = tape.token_norm(y_w_sa, vars.tn_w.gain, vars.tn_w.bias)?;
    let h_path = mlp_fwd(tape, yh_bar, &vars.mlp_h, cfg.dropout_p, &mut dropout_rng)?;
    let w_path = mlp_fwd(tape, yw_bar, &vars.mlp_w, cfg.dropout_p, &mut dropout_rng)?;
    let y_h_out = tape.add(h_path, y_h_sa)?;
    let y_w_out = tape.add(w_path, y_w_sa)?;

    let h_out = ComplexVar {
        re: tape.slice(y_h_out, 0, 0, l)?,
        im: tape.slice(y_h_out, 0, l, two_l)?,
    };
    let w_tilde = ComplexVar {
        re: tape.slice(y_w_out, 0, 0, l)?,
        im: tape.slice(y_w_out, 0, l, two_l)?,
    };

    // Power normalization onto the sphere ||W||_F^2 = P.
    let stacked = tape.concat(0, &[w_tilde.re, w_tilde.im])?;
    let norm = tape.l2_norm(stacked);
    let norm_val = tape.scalar_value(norm).to_f64().unwrap();
    if !(norm_val >= 1e-12) {
        return Err(Error::DegenerateOutput { step: 0, norm: norm_val });
    }
    let coef = tape.scalar_mul(tape.reciprocal(norm), power.sqrt());
    let w_out = ComplexVar {
        re: tape.scale_by(w_tilde.re, coef)?,
        im: tape.scale_by(w_tilde.im, coef)?,
    };
    Ok((h_out, w_out))
}

/// Standalone block application on matrices. `w_in` is in the block's
/// users-as-rows layout; the returned beamformer is antennas-as-rows.
pub fn block_forward<T: Real>(
    h_in: &ComplexMatrix<T>,
    w_in: &ComplexMatrix<T>,
    params: &BlockParams<T>,
    cfg: &ModelConfig,
    power: T,
) -> Result<(ComplexMatrix<T>, Beamformer<T>)> {
    require_square(h_in, w_in)?;
    let tape = Tape::new();
    let hv = bind_matrix(&tape, h_in);
    let wv = bind_matrix(&tape, w_in);
    let vars = params.bind(&tape, false);
    let (ho, wo) = block_forward_on_tape(&tape, &vars, cfg, power, hv, wv, None)?;
    let h_out = extract(&tape, ho);
    let w_out = extract(&tape, wo);
    Ok((h_out, Beamformer::new(w_out.transpose(), power)))
}
