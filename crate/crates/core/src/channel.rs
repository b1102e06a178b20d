//! Gaussian channel sampling, SNR bookkeeping, and batch management.
//!
//! Sampling is reproducible from `(seed, index)` pairs through a fixed
//! counter-based construction, documented here so other implementations can
//! regenerate identical streams:
//!
//! * the ChaCha20 key is 32 bytes: bytes 0..8 hold the u64 seed
//!   little-endian, bytes 8..12 a u32 domain tag (1 = channel entries,
//!   2 = parameter init, 3 = dropout masks), bytes 16..24 the u64 stream
//!   index little-endian, all other bytes zero;
//! * standard normals come from Box-Muller: with `a`, `b` two consecutive
//!   `next_u64` draws, `u1 = ((a >> 11) + 1) * 2^-53` (in (0,1]) and
//!   `u2 = (b >> 11) * 2^-53`, the pair is
//!   `sqrt(-2 ln u1) * (cos(2*pi*u2), sin(2*pi*u2))`;
//! * matrix entries are drawn row-major, one normal pair per entry
//!   (real part first), always in f64 before casting to the working scalar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;
use crate::scalar::{real, Real};

pub const DOMAIN_CHANNEL: u32 = 1;
pub const DOMAIN_INIT: u32 = 2;
pub const DOMAIN_DROPOUT: u32 = 3;

/// ChaCha20 generator for the documented `(seed, domain, index)` construction.
pub fn rng_for(seed: u64, domain: u32, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// SplitMix64-style mix for deriving per-epoch stream seeds from a run seed.
pub fn derive_seed(seed: u64, tag: u32, counter: u64) -> u64 {
    let mut z = seed ^ (tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ counter.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard-normal pair via Box-Muller (see module docs for the exact
/// bit-level recipe).
pub fn standard_normal_pair(rng: &mut ChaCha20Rng) -> (f64, f64) {
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

/// Uniform draw in [0, 1) from the same generator family.
pub fn uniform_f64(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// How the raw channel is normalized before entering the objectives.
///
/// The standard-deviation mode divides by sigma, which makes the unit-noise
/// sum-rate formula the true achievable rate; the variance mode divides by
/// sigma^2 and reproduces the paper's literal definition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    StdDev,
    Variance,
}

/// System geometry and power/noise bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// User count K.
    pub k: usize,
    /// Antenna count N.
    pub n: usize,
    /// Total transmit power budget P.
    pub power: f64,
    /// Channel gain variance sigma_H^2.
    pub sigma_h2: f64,
    /// Noise variance sigma^2 (identical across users).
    pub sigma2: f64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::Config { field: "k/n".into(), detail: "must be >= 1".into() });
        }
        for (name, v) in [("power", self.power), ("sigma_h2", self.sigma_h2), ("sigma2", self.sigma2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config { field: name.into(), detail: format!("must be positive, got {v}") });
            }
        }
        Ok(())
    }

    /// SNR in dB: 10 log10(sigma_H^2 P / sigma^2).
    pub fn snr_db(&self) -> f64 {
        10.0 * (self.sigma_h2 * self.power / self.sigma2).log10()
    }

    /// Builds a config with sigma^2 chosen to hit the requested SNR.
    pub fn from_snr(k: usize, n: usize, power: f64, sigma_h2: f64, snr_db: f64) -> Self {
        let sigma2 = sigma_h2 * power / 10f64.powf(snr_db / 10.0);
        SystemConfig { k, n, power, sigma_h2, sigma2 }
    }

    /// Per-entry complex variance of the raw channel, sigma_H^2/(NK).
    pub fn entry_variance(&self) -> f64 {
        self.sigma_h2 / (self.n as f64 * self.k as f64)
    }

    fn norm_factor(&self, mode: NormalizationMode) -> f64 {
        match mode {
            NormalizationMode::StdDev => 1.0 / self.sigma2.sqrt(),
            NormalizationMode::Variance => 1.0 / self.sigma2,
        }
    }
}

/// One channel realization plus its normalized form.
#[derive(Clone, Debug)]
pub struct ChannelSample<T> {
    pub cfg: SystemConfig,
    pub mode: NormalizationMode,
    /// Raw K x N channel, entries CN(0, sigma_H^2/(NK)).
    pub h_raw: ComplexMatrix<T>,
    /// Normalized channel used by every objective and beamformer.
    pub h_norm: ComplexMatrix<T>,
    pub seed: u64,
    pub index: u64,
}

impl<T: Real> ChannelSample<T> {
    /// Builds a sample around an explicitly provided raw channel.
    pub fn from_raw(cfg: SystemConfig, mode: NormalizationMode, h_raw: ComplexMatrix<T>) -> Self {
        let f = real::<T>(cfg.norm_factor(mode));
        let h_norm = h_raw.scale(f);
        ChannelSample { cfg, mode, h_raw, h_norm, seed: 0, index: 0 }
    }
}

/// A set of channel samples drawn from one seeded stream.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub samples: Vec<ChannelSample<T>>,
}

impl<T> Batch<T> {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// Draws one channel realization from the `(seed, index)` stream.
pub fn sample_channel<T: Real>(
    cfg: &SystemConfig,
    mode: NormalizationMode,
    seed: u64,
    index: u64,
) -> ChannelSample<T> {
    let mut rng = rng_for(seed, DOMAIN_CHANNEL, index);
    let std = (cfg.entry_variance() / 2.0).sqrt();
    let mut data = Vec::with_capacity(cfg.k * cfg.n);
    for _ in 0..cfg.k * cfg.n {
        let (zr, zi) = standard_normal_pair(&mut rng);
        data.push(Complex::new(real::<T>(zr * std), real::<T>(zi * std)));
    }
    let h_raw = ComplexMatrix::new(cfg.k, cfg.n, data).expect("constructed with matching length");
    let f = real::<T>(cfg.norm_factor(mode));
    let h_norm = h_raw.scale(f);
    ChannelSample { cfg: *cfg, mode, h_raw, h_norm, seed, index }
}

/// Draws `n` independent samples; sample `i` uses stream index `i`.
pub fn make_batch<T: Real>(
    cfg: &SystemConfig,
    mode: NormalizationMode,
    seed: u64,
    n: usize,
) -> Batch<T> {
    Batch { samples: (0..n as u64).map(|i| sample_channel(cfg, mode, seed, i)).collect() }
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    k: usize,
    n: usize,
    sigma2: f64,
    sigma_h2: f64,
    power: f64,
    seed: u64,
    count: usize,
    normalization: NormalizationMode,
}

/// Writes a batch: one line of JSON header, then `count*K*N` interleaved
/// (re, im) float64 little-endian pairs of the raw channels, samples in order.
pub fn save_batch<T: Real>(path: &Path, batch: &Batch<T>) -> Result<()> {
    if batch.samples.is_empty() {
        return Err(Error::Contract { detail: "refusing to save an empty batch".into() });
    }
    let first = &batch.samples[0];
    let header = BatchHeader {
        k: first.cfg.k,
        n: first.cfg.n,
        sigma2: first.cfg.sigma2,
        sigma_h2: first.cfg.sigma_h2,
        power: first.cfg.power,
        seed: first.seed,
        count: batch.samples.len(),
        normalization: first.mode,
    };
    let mut w = BufWriter::new(File::create(path)?);
    let mut hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::Parse { detail: format!("header encode: {e}"), offset: 0 })?;
    hjson.push(b'\n');
    w.write_all(&hjson)?;
    for s in &batch.samples {
        for c in s.h_raw.data() {
            w.write_all(&c.re.to_f64().unwrap().to_le_bytes())?;
            w.write_all(&c.im.to_f64().unwrap().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a batch saved by [`save_batch`]; the normalized channels are
/// recomputed from the stored raw entries and header fields.
pub fn load_batch<T: Real>(path: &Path) -> Result<Batch<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Parse {
                detail: "file ended before header newline".into(),
                offset: header_line.len() as u64,
            });
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > 1 << 16 {
            return Err(Error::Parse { detail: "header exceeds 64 KiB".into(), offset: header_line.len() as u64 });
        }
    }
    let header: BatchHeader = serde_json::from_slice(&header_line)
        .map_err(|e| Error::Parse { detail: format!("header json: {e}"), offset: 0 })?;
    if header.count == 0 {
        return Err(Error::Contract { detail: "batch file declares zero samples".into() });
    }
    let cfg = SystemConfig {
        k: header.k,
        n: header.n,
        power: header.power,
        sigma_h2: header.sigma_h2,
        sigma2: header.sigma2,
    };
    cfg.validate().map_err(|e| Error::Parse {
        detail: format!("invalid header config: {e}"),
        offset: 0,
    })?;
    let mut offset = header_line.len() as u64 + 1;
    let mut samples = Vec::with_capacity(header.count);
    let mut buf = [0u8; 8];
    for idx in 0..header.count {
        let mut data = Vec::with_capacity(cfg.k * cfg.n);
        for _ in 0..cfg.k * cfg.n {
            let re = read_f64(&mut r, &mut buf, &mut offset)?;
            let im = read_f64(&mut r, &mut buf, &mut offset)?;
            data.push(Complex::new(real::<T>(re), real::<T>(im)));
        }
        let h_raw = ComplexMatrix::new(cfg.k, cfg.n, data)?;
        let mut s = ChannelSample::from_raw(cfg, header.normalization, h_raw);
        s.seed = header.seed;
        s.index = idx as u64;
        samples.push(s);
    }
    Ok(Batch { samples })
}

fn read_f64(r: &mut impl Read, buf: &mut [u8; 8], offset: &mut u64) -> Result<f64> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        detail: format!("unexpected end of payload: {e}"),
        offset: *offset,
    })?;
    *offset += 8;
    Ok(f64::from_le_bytes(*buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SystemConfig {
        SystemConfig::from_snr(4, 6, 1.0, 1.0, 10.0)
    }

    #[test]
    fn snr_round_trips() {
        let c = cfg();
        assert!((c.snr_db() - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn same_seed_is_bit_identical_distinct_seeds_differ() {
        let c = cfg();
        let a: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 42, 7);
        let b: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 42, 7);
        for (x, y) in a.h_raw.data().iter().zip(b.h_raw.data().iter()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
        let d: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 43, 7);
        assert!(a.h_raw.data().iter().zip(d.h_raw.data().iter()).any(|(x, y)| x != y));
        let e: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 42, 8);
        assert!(a.h_raw.data().iter().zip(e.h_raw.data().iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn empirical_entry_variance_matches_model() {
        let c = cfg();
        let target = c.entry_variance();
        let mut acc = 0.0;
        let mut count = 0usize;
        let draws = 100_000 / (c.k * c.n) + 1;
        for i in 0..draws {
            let s: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 5, i as u64);
            for e in s.h_raw.data() {
                acc += e.re * e.re + e.im * e.im;
                count += 1;
            }
        }
        let est = acc / count as f64;
        assert!(
            est >= 0.97 * target && est <= 1.03 * target,
            "empirical {est} vs target {target}"
        );
    }

    #[test]
    fn mean_frobenius_square_is_sigma_h2() {
        let c = cfg();
        let mut acc = 0.0;
        let reps = 2000;
        for i in 0..reps {
            let s: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 6, i);
            acc += s.h_raw.frob_norm_sq();
        }
        let est = acc / reps as f64;
        assert!((est - c.sigma_h2).abs() / c.sigma_h2 <= 0.05, "estimate {est}");
    }

    #[test]
    fn normalization_modes_scale_as_documented() {
        // h_norm is h_raw scaled elementwise by the mode's constant factor.
        let c = cfg();
        let s: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 9, 0);
        let f_std = 1.0 / c.sigma2.sqrt();
        for (raw, norm) in s.h_raw.data().iter().zip(s.h_norm.data().iter()) {
            assert_eq!((raw.re * f_std).to_bits(), norm.re.to_bits());
            assert_eq!((raw.im * f_std).to_bits(), norm.im.to_bits());
        }
        let v: ChannelSample<f64> = sample_channel(&c, NormalizationMode::Variance, 9, 0);
        let f_var = 1.0 / c.sigma2;
        for (raw, norm) in v.h_raw.data().iter().zip(v.h_norm.data().iter()) {
            assert_eq!((raw.re * f_var).to_bits(), norm.re.to_bits());
        }
    }

    #[test]
    fn kolmogorov_smirnov_on_real_parts() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let c = cfg();
        let std = (c.entry_variance() / 2.0).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut xs: Vec<f64> = Vec::with_capacity(10_000);
        let mut i = 0;
        while xs.len() < 10_000 {
            let s: ChannelSample<f64> = sample_channel(&c, NormalizationMode::StdDev, 77, i);
            xs.extend(s.h_raw.data().iter().map(|e| e.re));
            i += 1;
        }
        xs.truncate(10_000);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = normal.cdf(x);
            let hi = (i + 1) as f64 / n - cdf;
            let lo = cdf - i as f64 / n;
            d = d.max(hi.max(lo));
        }
        // Critical value at significance 0.01 for large n.
        let crit = 1.628 / n.sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn batch_sizes_match_request() {
        let c = cfg();
        for n in [1usize, 64, 500] {
            let b: Batch<f64> = make_batch(&c, NormalizationMode::StdDev, 1, n);
            assert_eq!(b.size(), n);
        }
    }

    #[test]
    fn batch_round_trip_is_bit_exact() {
        let c = cfg();
        let b: Batch<f64> = make_batch(&c, NormalizationMode::StdDev, 123, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        save_batch(&path, &b).unwrap();
        let loaded: Batch<f64> = load_batch(&path).unwrap();
        assert_eq!(loaded.size(), 5);
        for (a, l) in b.samples.iter().zip(loaded.samples.iter()) {
            assert_eq!(a.seed, l.seed);
            assert_eq!(a.index, l.index);
            for (x, y) in a.h_raw.data().iter().zip(l.h_raw.data().iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
            for (x, y) in a.h_norm.data().iter().zip(l.h_norm.data().iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
            }
        }
    }

    #[test]
    fn truncated_batch_file_reports_offset() {
        let c = cfg();
        let b: Batch<f64> = make_batch(&c, NormalizationMode::StdDev, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        save_batch(&path, &b).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 11]).unwrap();
        match load_batch::<f64>(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_batch_is_rejected_on_both_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let empty: Batch<f64> = Batch { samples: vec![] };
        assert!(matches!(save_batch(&path, &empty), Err(Error::Contract { .. })));
        std::fs::write(
            &path,
            b"{\"k\":2,\"n\":2,\"sigma2\":0.1,\"sigma_h2\":1.0,\"power\":1.0,\"seed\":0,\"count\":0,\"normalization\":\"std_dev\"}\n",
        )
        .unwrap();
        assert!(matches!(load_batch::<f64>(&path), Err(Error::Contract { .. })));
    }
}
