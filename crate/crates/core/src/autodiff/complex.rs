//! Complex-valued helpers over real tape nodes.
//!
//! Complex tensors live on the tape as separate real/imaginary parts, which is
//! how the sum rate and the Transformer block are differentiated: every
//! complex operation decomposes into real primitives with exact VJPs.

use num_complex::Complex;

use super::{Tape, Var};
use crate::error::Result;
use crate::numerics::ComplexMatrix;
use crate::scalar::Real;

/// A complex matrix on the tape: real and imaginary parts share a shape.
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

/// Binds a complex matrix as a pair of constant nodes.
pub fn bind_matrix<T: Real>(tape: &Tape<T>, m: &ComplexMatrix<T>) -> ComplexVar {
    let shape = vec![m.rows(), m.cols()];
    let re: Vec<T> = m.data().iter().map(|c| c.re).collect();
    let im: Vec<T> = m.data().iter().map(|c| c.im).collect();
    ComplexVar { re: tape.constant(shape.clone(), re), im: tape.constant(shape, im) }
}

/// Reads a complex node back into a matrix.
pub fn extract<T: Real>(tape: &Tape<T>, v: ComplexVar) -> ComplexMatrix<T> {
    let shape = tape.shape(v.re);
    let re = tape.value(v.re);
    let im = tape.value(v.im);
    let data: Vec<Complex<T>> =
        re.iter().zip(im.iter()).map(|(&r, &i)| Complex::new(r, i)).collect();
    ComplexMatrix::new(shape[0], shape[1], data).expect("tape shapes are consistent")
}

pub fn cadd<T: Real>(tape: &Tape<T>, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
    Ok(ComplexVar { re: tape.add(a.re, b.re)?, im: tape.add(a.im, b.im)? })
}

pub fn csub<T: Real>(tape: &Tape<T>, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
    Ok(ComplexVar { re: tape.sub(a.re, b.re)?, im: tape.sub(a.im, b.im)? })
}

pub fn cscale<T: Real>(tape: &Tape<T>, a: ComplexVar, s: T) -> ComplexVar {
    ComplexVar { re: tape.scalar_mul(a.re, s), im: tape.scalar_mul(a.im, s) }
}

/// Plain (unconjugated) transpose.
pub fn ctranspose<T: Real>(tape: &Tape<T>, a: ComplexVar) -> Result<ComplexVar> {
    Ok(ComplexVar { re: tape.transpose(a.re)?, im: tape.transpose(a.im)? })
}

/// `a * b` through the real decomposition.
pub fn cmatmul<T: Real>(tape: &Tape<T>, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
    let rr = tape.matmul(a.re, b.re)?;
    let ii = tape.matmul(a.im, b.im)?;
    let ri = tape.matmul(a.re, b.im)?;
    let ir = tape.matmul(a.im, b.re)?;
    Ok(ComplexVar { re: tape.sub(rr, ii)?, im: tape.add(ri, ir)? })
}

/// `conj(a) * b` through the real decomposition.
pub fn cmatmul_conj_left<T: Real>(tape: &Tape<T>, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
    let rr = tape.matmul(a.re, b.re)?;
    let ii = tape.matmul(a.im, b.im)?;
    let ri = tape.matmul(a.re, b.im)?;
    let ir = tape.matmul(a.im, b.re)?;
    Ok(ComplexVar { re: tape.add(rr, ii)?, im: tape.sub(ri, ir)? })
}

/// Squared Frobenius norm as a scalar node.
pub fn cfrob_sq<T: Real>(tape: &Tape<T>, a: ComplexVar) -> Result<Var> {
    let r2 = tape.square(a.re);
    let i2 = tape.square(a.im);
    tape.add(tape.sum(r2), tape.sum(i2))
}

/// Squared modulus per entry: `re^2 + im^2`.
pub fn cmod_sq<T: Real>(tape: &Tape<T>, a: ComplexVar) -> Result<Var> {
    tape.add(tape.square(a.re), tape.square(a.im))
}
