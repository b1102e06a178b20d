//! Classical beamformers: MRT, linear MMSE, and iterative WMMSE.
//!
//! All three operate on the normalized channel (unit effective noise). The
//! WMMSE recipe is the standard three-step sum-rate solver: per-user MMSE
//! receive scalar, rate weight, then a regularized transmit update whose
//! Lagrange multiplier is found by bisection so the power constraint holds
//! with equality. It is initialized at the MMSE beamformer so the learned
//! pipeline and the strong baseline start from the same point.

use num_complex::Complex;

use crate::channel::ChannelSample;
use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;
use crate::objectives::{sum_rate_matrices, Beamformer};
use crate::scalar::{real, Real};

/// Convergence report of one WMMSE run.
#[derive(Clone, Debug)]
pub struct WmmseReport<T> {
    /// Number of full (u, v, W) iterations performed.
    pub iterations: usize,
    /// Sum rate of the initial beamformer followed by one entry per iteration.
    pub objective_trace: Vec<T>,
    pub converged: bool,
    pub beamformer: Beamformer<T>,
}

/// Linear MMSE beamformer: column k is the regularized-inverse direction
/// `(sigma^2 I + (P/K) sum_i h_i h_i^H)^{-1} h_k`, normalized to norm
/// `sqrt(P/K)`.
///
/// The inverse is formed on the raw channel with the physical noise variance;
/// that keeps the regularization balance of the formula independent of the
/// channel normalization mode (on the sigma-normalized channel it is the same
/// direction as a unit regularizer). Columns are then rescaled, so only the
/// direction matters.
pub fn mmse_beamformer<T: Real>(h: &ChannelSample<T>, p: T) -> Result<Beamformer<T>> {
    let hn = &h.h_raw;
    let (k, n) = (hn.rows(), hn.cols());
    let ht = hn.transpose();
    let sigma2 = real::<T>(h.cfg.sigma2);
    let pk = p / real::<T>(k as f64);
    let mut cov = ht.matmul(&hn.conj())?.scale(pk);
    for i in 0..n {
        let d = cov.get(i, i);
        cov.set(i, i, Complex::new(d.re + sigma2, d.im));
    }
    let x = cov.solve_hpd(&ht)?;
    let scale = pk.sqrt();
    let mut w = ComplexMatrix::zeros(n, k);
    for col in 0..k {
        let mut norm_sq = T::zero();
        for i in 0..n {
            norm_sq = norm_sq + x.get(i, col).norm_sqr();
        }
        let norm = norm_sq.sqrt();
        for i in 0..n {
            w.set(i, col, x.get(i, col) * (scale / norm));
        }
    }
    Ok(Beamformer::new(w, p))
}

/// Maximum ratio transmission: column k proportional to the user's channel.
pub fn mrt_beamformer<T: Real>(h: &ChannelSample<T>, p: T) -> Beamformer<T> {
    let hn = &h.h_norm;
    let (k, n) = (hn.rows(), hn.cols());
    let scale = (p / real::<T>(k as f64)).sqrt();
    let mut w = ComplexMatrix::zeros(n, k);
    for col in 0..k {
        let mut norm_sq = T::zero();
        for j in 0..n {
            norm_sq = norm_sq + hn.get(col, j).norm_sqr();
        }
        if norm_sq == T::zero() {
            eprintln!("mrt_beamformer: channel row {col} is zero; emitting zero column");
            continue;
        }
        let norm = norm_sq.sqrt();
        for j in 0..n {
            w.set(j, col, hn.get(col, j) * (scale / norm));
        }
    }
    Beamformer::new(w, p)
}

/// WMMSE from the MMSE initialization.
pub fn wmmse<T: Real>(h: &ChannelSample<T>, p: T, max_iters: usize, tol: T) -> Result<WmmseReport<T>> {
    let init = mmse_beamformer(h, p)?;
    wmmse_from(h, init, max_iters, tol)
}

/// WMMSE from an explicit initial beamformer.
pub fn wmmse_from<T: Real>(
    h: &ChannelSample<T>,
    init: Beamformer<T>,
    max_iters: usize,
    tol: T,
) -> Result<WmmseReport<T>> {
    if max_iters == 0 {
        return Err(Error::Contract { detail: "wmmse needs max_iters >= 1".into() });
    }
    if !(tol > T::zero()) {
        return Err(Error::Contract { detail: "wmmse needs tol > 0".into() });
    }
    let hn = &h.h_norm;
    let (k, n) = (hn.rows(), hn.cols());
    let hconj = hn.conj();
    let ht = hn.transpose();
    let p = init.power_budget;
    let mut w = init.w;
    let mut trace = vec![sum_rate_matrices(hn, &w)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let a = hconj.matmul(&w)?;
        let mut s = vec![T::zero(); k]; // v_k |u_k|^2
        let mut coef = vec![Complex::new(T::zero(), T::zero()); k]; // v_k u_k
        for uk in 0..k {
            let mut rowsum = T::zero();
            for i in 0..k {
                rowsum = rowsum + a.get(uk, i).norm_sqr();
            }
            let akk = a.get(uk, uk);
            let u = akk / (T::one() + rowsum);
            let e = T::one() - (u.conj() * akk).re;
            let v = T::one() / e;
            s[uk] = v * u.norm_sqr();
            coef[uk] = u * v;
        }
        let cov = hn.scale_rows(&s)?.transpose().matmul(&hconj)?;
        let rhs = ComplexMatrix::from_fn(n, k, |i, j| ht.get(i, j) * coef[j]);

        let solve_mu = |mu: T| -> Option<(ComplexMatrix<T>, T)> {
            let mut m = cov.clone();
            for i in 0..n {
                let d = m.get(i, i);
                m.set(i, i, Complex::new(d.re + mu, d.im));
            }
            m.solve_hpd(&rhs).ok().map(|x| {
                let pw = x.frob_norm_sq();
                (x, pw)
            })
        };

        w = match solve_mu(T::zero()) {
            Some((x, pw)) if pw <= p => x,
            unconstrained => {
                // Grow the bracket geometrically until the power drops below
                // the budget, then bisect for 60 steps.
                let mut hi = T::one();
                let mut hi_sol;
                let mut grow = 0;
                loop {
                    match solve_mu(hi) {
                        Some((x, pw)) if pw <= p => {
                            hi_sol = Some(x);
                            break;
                        }
                        _ => {
                            hi = hi * real::<T>(4.0);
                            grow += 1;
                            if grow > 200 {
                                return Err(Error::Numerical {
                                    detail: format!(
                                        "wmmse power bisection bracket failed at iteration {iterations} (mu grew past {hi}, budget {p})"
                                    ),
                                });
                            }
                        }
                    }
                }
                let _ = unconstrained;
                let mut lo = T::zero();
                for _ in 0..60 {
                    let mid = (lo + hi) * real::<T>(0.5);
                    match solve_mu(mid) {
                        Some((x, pw)) if pw <= p => {
                            hi = mid;
                            hi_sol = Some(x);
                        }
                        _ => lo = mid,
                    }
                }
                hi_sol.expect("bracket upper end always feasible")
            }
        };

        let rate = sum_rate_matrices(hn, &w);
        let prev = *trace.last().expect("trace is never empty");
        trace.push(rate);
        if (rate - prev).abs() < tol {
            converged = true;
            break;
        }
    }

    Ok(WmmseReport {
        iterations,
        objective_trace: trace,
        converged,
        beamformer: Beamformer::new(w, p),
    })
}
