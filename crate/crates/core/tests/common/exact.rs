//! Arbitrary-precision fixed-point evaluation of the zero-order-hold maps.

use num_bigint::BigInt;
use num_traits::{Float, One, Signed, ToPrimitive, Zero};

const FRAC_BITS: u64 = 400;

/// Exact binary value of a finite double as `m · 2^e`.
fn decompose(x: f64) -> (BigInt, i64) {
    let (mant, exp, sign) = x.integer_decode();
    (BigInt::from(sign as i64) * BigInt::from(mant), exp as i64)
}

fn shift(v: BigInt, by: i64) -> BigInt {
    if by >= 0 {
        v << by as usize
    } else {
        v >> (-by) as usize
    }
}

/// Fixed-point `exp(x)` for `x ≥ 0`, scaled by `2^FRAC_BITS`.
fn exp_nonneg(x: &BigInt) -> BigInt {
    let one = BigInt::one() << FRAC_BITS as usize;
    let mut sum = one.clone();
    let mut term = one;
    let mut k = 1u32;
    loop {
        term = ((term * x) >> FRAC_BITS as usize) / k;
        if term.is_zero() {
            return sum;
        }
        sum += &term;
        k += 1;
    }
}

fn to_f64(v: &BigInt) -> f64 {
    let bits = v.bits() as i64;
    let drop = (bits - 62).max(0);
    let top = shift(v.abs(), -drop).to_f64().unwrap();
    let mag = top * 2f64.powi((drop - FRAC_BITS as i64) as i32);
    if v.is_negative() {
        -mag
    } else {
        mag
    }
}

/// `(exp(ΔA), expm1(ΔA)/A)` where the product `ΔA` is formed exactly.
pub fn zoh_exact(a: f64, delta: f64) -> (f64, f64) {
    let (ma, ea) = decompose(a);
    let (md, ed) = decompose(delta);
    let x = shift(ma * md, ea + ed + FRAC_BITS as i64);
    let one = BigInt::one() << FRAC_BITS as usize;
    let e = if x.is_negative() {
        // exp(-|x|) = 1 / exp(|x|)
        (BigInt::one() << (2 * FRAC_BITS) as usize) / exp_nonneg(&x.abs())
    } else {
        exp_nonneg(&x)
    };
    let em1 = &e - one;
    (to_f64(&e), to_f64(&em1) / a)
}
