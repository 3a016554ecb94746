//! Exact-rational helpers shared by all modules: logarithms in base 2,
//! dyadic rounding of real powers, and layer denominator bands.

use num_bigint::{BigInt, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;

pub fn qi(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

pub fn qr(n: i64, d: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(d))
}

/// 2^e as an exact rational, e may be negative.
pub fn pow2(e: i64) -> Q {
    let one = BigInt::one();
    if e >= 0 {
        Q::from_integer(one << (e as usize))
    } else {
        Q::new(one.clone(), one << ((-e) as usize))
    }
}

/// floor(log2 x) for x > 0, exact.
pub fn floor_log2(x: &Q) -> i64 {
    assert!(x.is_positive(), "floor_log2 needs a positive argument");
    let nb = x.numer().bits() as i64;
    let db = x.denom().bits() as i64;
    let s = nb - db; // x in [2^{s-1}, 2^{s+1})
    // decide between s-1 and s by testing x >= 2^s
    let ge = if s >= 0 {
        *x.numer() >= (x.denom() << (s as usize))
    } else {
        (x.numer() << ((-s) as usize)) >= *x.denom()
    };
    if ge {
        s
    } else {
        s - 1
    }
}

/// log2 x as f64, relative error ~1e-15 even for values with huge exponents.
pub fn log2q(x: &Q) -> f64 {
    let e = floor_log2(x);
    // m = x * 2^{-e} in [1, 2); extract 64 fractional bits
    let (scaled_num, den) = if e >= 0 {
        (x.numer() << 64usize, x.denom() << (e as usize))
    } else {
        (x.numer() << (64 + (-e) as usize), x.denom().clone())
    };
    let t = scaled_num / den; // floor(m * 2^64)
    let m = t.to_f64().expect("mantissa fits f64") / 18446744073709551616.0;
    e as f64 + m.log2()
}

/// Direction for dyadic rounding.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Round {
    Down,
    Up,
}

/// 2^l as a dyadic rational with a 48-bit mantissa, rounded in `dir`.
pub fn exp2_dyadic(l: f64, dir: Round) -> Q {
    let e = l.floor();
    let frac = l - e;
    let m = frac.exp2() * 281474976710656.0; // * 2^48
    let mant = match dir {
        Round::Down => m.floor(),
        Round::Up => m.ceil(),
    };
    let mant = BigInt::from(mant as u128);
    Q::from_integer(mant) * pow2(e as i64 - 48)
}

/// r^expo for rational r > 0, rounded outward per `dir` with a relative
/// safety margin ~2^{-38} to absorb the f64 log/exp error.
pub fn pow_q(r: &Q, expo: f64, dir: Round) -> Q {
    let l = expo * log2q(r);
    let slack = l.abs() * 1e-12 + 3.7e-12; // ~2^{-38}
    let l = match dir {
        Round::Up => l + slack,
        Round::Down => l - slack,
    };
    exp2_dyadic(l, dir)
}

/// Smallest and largest integers q with 2^k <= q^2 < 2^{k+1} (the layer-k
/// denominator band of the quadratic-radius system).
pub fn layer_denoms(k: u32) -> (BigInt, BigInt) {
    let lo_target = BigInt::one() << (k as usize);
    let hi_target: BigInt = (BigInt::one() << ((k + 1) as usize)) - 1;
    let qlo = (&lo_target - BigInt::one()).sqrt() + 1;
    let qhi = hi_target.sqrt();
    (qlo, qhi)
}

/// Render a rational as "num/den" (denominator always present).
pub fn q_to_str(x: &Q) -> String {
    format!("{}/{}", x.numer(), x.denom())
}

pub fn q_from_str(s: &str) -> Option<Q> {
    let (n, d) = s.split_once('/')?;
    let n: BigInt = n.parse().ok()?;
    let d: BigInt = d.parse().ok()?;
    if d.is_zero() {
        return None;
    }
    Some(Q::new(n, d))
}

/// Truncate x*2^j to an integer (cube index along one axis), exact.
pub fn scale_floor(x: &Q, j: u32) -> BigInt {
    let scaled = x * pow2(j as i64);
    scaled.floor().to_integer()
}

pub fn big_sign(x: &BigInt) -> i32 {
    match x.sign() {
        Sign::Minus => -1,
        Sign::NoSign => 0,
        Sign::Plus => 1,
    }
}

/// gcd convenience on BigInt.
pub fn gcd(a: &BigInt, b: &BigInt) -> BigInt {
    a.gcd(b)
}
