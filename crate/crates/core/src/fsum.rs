//! Order-invariant exact floating-point accumulation.
//!
//! [`ExactSum`] accumulates IEEE doubles into a fixed-point superaccumulator:
//! an array of signed 64-bit chunks, each covering a 32-bit window of the
//! f64 exponent range. Adding a value touches three chunks with plain integer
//! adds, so the running state depends only on the multiset of addends, never
//! on their order; [`ExactSum::total`] rounds the exact fixed-point value to
//! nearest-even once. The attention core uses this for the two reductions
//! that run across the token axis (softmax normalizers and the
//! attention-times-value contraction), which is what makes token permutation
//! equivariance hold at the bit level.
//!
//! Capacity: each add deposits less than 2^32 per chunk, so sums of up to
//! 2^30 finite doubles are exact without intermediate carry propagation.

use std::marker::PhantomData;

use crate::scalar::Real;

const CHUNKS: usize = 66; // exponent 0..=2046 in 32-bit windows, plus spill

/// Exact accumulator over reals (converted through f64, which is lossless
/// for f32 and f64).
#[derive(Clone, Debug)]
pub struct ExactSum<T> {
    chunks: [i64; CHUNKS],
    _marker: PhantomData<T>,
}

impl<T: Real> ExactSum<T> {
    pub fn new() -> Self {
        ExactSum { chunks: [0; CHUNKS], _marker: PhantomData }
    }

    /// Clears the accumulator for reuse.
    pub fn reset(&mut self) {
        self.chunks = [0; CHUNKS];
    }

    #[inline(always)]
    pub fn add(&mut self, x: T) {
        self.add_f64(x.to_f64().expect("scalar converts to f64"));
    }

    #[inline(always)]
    fn add_f64(&mut self, x: f64) {
        let bits = x.to_bits();
        let e = ((bits >> 52) & 0x7FF) as usize;
        debug_assert!(e != 0x7FF, "non-finite input to exact sum");
        let frac = bits & 0x000F_FFFF_FFFF_FFFF;
        // Denormals have exponent field 0 and no implicit bit but the same
        // scale as exponent 1. Branchless select keeps the hot loop flat.
        let normal = (e != 0) as u64;
        let mant = frac | (normal << 52);
        let e_eff = e + (normal ^ 1) as usize;
        // idx <= 63 by construction; the min lets the compiler drop the
        // bounds checks on the three chunk updates.
        let idx = (e_eff >> 5).min(63);
        let sh = (e_eff & 31) as u32;
        let c0 = ((mant << sh) as u32) as i64;
        let c1 = ((mant >> (32 - sh)) as u32) as i64;
        let c2 = ((mant >> 1) >> (63 - sh)) as i64;
        // Sign as a +/-1 multiplier instead of a data-dependent branch.
        let s = 1 - 2 * ((bits >> 63) as i64);
        self.chunks[idx] += s * c0;
        self.chunks[idx + 1] += s * c1;
        self.chunks[idx + 2] += s * c2;
    }

    /// Correctly rounded (nearest-even) value of the exact sum.
    pub fn total(&self) -> T {
        T::from_f64(self.total_f64()).expect("f64 converts to the scalar")
    }

    fn total_f64(&self) -> f64 {
        // Canonicalize into base-2^32 digits plus a final carry; the digit at
        // index i carries weight 2^(32 i - 1075).
        let mut digits = [0u32; CHUNKS];
        let mut carry: i64 = 0;
        for i in 0..CHUNKS {
            let v = self.chunks[i] + carry;
            let low = v & 0xFFFF_FFFF;
            carry = (v - low) >> 32;
            digits[i] = low as u32;
        }
        let negative = carry < 0;
        if negative {
            debug_assert_eq!(carry, -1, "exact sum exceeded the f64 exponent range");
            let mut borrow: i64 = 0;
            for d in digits.iter_mut() {
                let v = -(*d as i64) - borrow;
                if v < 0 {
                    *d = (v + (1i64 << 32)) as u32;
                    borrow = 1;
                } else {
                    *d = v as u32;
                    borrow = 0;
                }
            }
        } else {
            debug_assert_eq!(carry, 0, "exact sum exceeded the f64 exponent range");
        }
        let mut hi = CHUNKS;
        while hi > 0 && digits[hi - 1] == 0 {
            hi -= 1;
        }
        if hi == 0 {
            return 0.0;
        }
        let lead = 32 - digits[hi - 1].leading_zeros() as usize;
        let pos = (hi - 1) * 32 + lead - 1; // global index of the MSB
        // A 96-bit window holding the top three digits covers mantissa,
        // guard, and the highest sticky bits in one shot.
        let dig = |i: isize| -> u128 {
            if i >= 0 {
                digits[i as usize] as u128
            } else {
                0
            }
        };
        let h = hi as isize - 1;
        let window = (dig(h) << 64) | (dig(h - 1) << 32) | dig(h - 2);
        let msb_in_window = 64 + lead - 1; // position of `pos` inside the window
        let mant_shift = msb_in_window as i32 - 52;
        let mant = if mant_shift >= 0 {
            (window >> mant_shift) as u64
        } else {
            (window << (-mant_shift)) as u64
        };
        let guard = mant_shift >= 1 && (window >> (mant_shift - 1)) & 1 == 1;
        let mut sticky = if mant_shift >= 2 {
            window & ((1u128 << (mant_shift - 1)) - 1) != 0
        } else {
            false
        };
        if !sticky {
            for d in digits[..(h - 2).max(0) as usize].iter() {
                if *d != 0 {
                    sticky = true;
                    break;
                }
            }
        }
        let mut mant = mant;
        let mut pos = pos as i32;
        if guard && (sticky || (mant & 1) == 1) {
            mant += 1;
            if mant == (1 << 53) {
                mant >>= 1;
                pos += 1;
            }
        }
        // mant * 2^(pos - 52 - 1075), scaled in two exact power-of-two steps
        // so exponents below the normal range do not overflow the reciprocal
        // (results down to the normal range round exactly; totals in the
        // subnormal tail may be double-rounded, far below anything this
        // pipeline produces).
        let k = pos - 52 - 1075;
        let k1 = k.clamp(-1022, 1023);
        let k2 = k - k1;
        debug_assert!((-1022..=1023).contains(&k2));
        let pow2 = |e: i32| f64::from_bits(((e + 1023) as u64) << 52);
        let val = (mant as f64) * pow2(k1) * pow2(k2);
        if negative {
            -val
        } else {
            val
        }
    }
}

impl<T: Real> Default for ExactSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Correctly rounded sum of a slice, independent of element order.
pub fn exact_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = ExactSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.total()
}

/// Dot product whose accumulation is order-invariant.
///
/// Each product is rounded once (bit-identical under a simultaneous
/// permutation of both slices); the rounded products are then summed exactly.
pub fn exact_dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = ExactSum::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc.add(x * y);
    }
    acc.total()
}
