//! Exact Farey / Stern-Brocot machinery on big rationals: simplest fraction
//! in an interval, best approximations under a denominator cap, and ordered
//! enumeration of reduced fractions in an interval.
//!
//! These answer "which rationals with denominator in a given band lie in this
//! interval" without enumerating a truncated system, which is what makes the
//! deep-scale avoidance checks of the Cantor construction tractable.

use crate::numeric::Q;
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

/// Simplest (minimal-denominator) fraction in the closed interval [lo, hi].
/// Ties on denominator cannot occur except den = 1, where the smallest
/// integer in range is returned.
pub fn simplest_between(lo: &Q, hi: &Q) -> Q {
    assert!(lo <= hi);
    let ceil_lo = lo.ceil();
    if ceil_lo <= hi.floor() {
        return ceil_lo;
    }
    let a = lo.floor();
    // invert the fractional parts; interval flips
    let inner = simplest_between(
        &(Q::one() / (hi - &a)),
        &(Q::one() / (lo - &a)),
    );
    a + Q::one() / inner
}

/// Best rational approximations to x with denominator <= n:
/// (largest fraction <= x, smallest fraction >= x). If den(x) <= n both
/// equal x. n >= 1 required.
pub fn best_bounds(x: &Q, n: &BigInt) -> (Q, Q) {
    assert!(*n >= BigInt::one());
    if x.denom() <= n {
        return (x.clone(), x.clone());
    }
    // continued-fraction walk with convergents (p,q), stop before q > n
    let mut num = x.numer().clone();
    let mut den = x.denom().clone();
    let (mut p2, mut q2) = (BigInt::zero(), BigInt::one()); // k-2
    let (mut p1, mut q1) = (BigInt::one(), BigInt::zero()); // k-1
    loop {
        let a = num.div_floor(&den);
        let r = &num - &a * &den;
        let p = &a * &p1 + &p2;
        let q = &a * &q1 + &q2;
        if q > *n {
            // deepest usable semiconvergent against (p1,q1)
            let t = (n - &q2).div_floor(&q1);
            let (cp, cq) = if t.is_positive() {
                (&t * &p1 + &p2, &t * &q1 + &q2)
            } else {
                (p2.clone(), q2.clone())
            };
            let conv = Q::new(p1, q1);
            let cand = Q::new(cp, cq);
            return if conv <= *x {
                (conv, cand)
            } else {
                (cand, conv)
            };
        }
        if r.is_zero() {
            // exact hit within the cap (den(x) <= n handled above, but the
            // walk can land here when x's reduced denominator <= n)
            let v = Q::new(p, q);
            return (v.clone(), v);
        }
        p2 = p1;
        q2 = q1;
        p1 = p;
        q1 = q;
        num = den;
        den = r;
    }
}

/// Modular inverse of a mod m (m >= 1, gcd(a, m) = 1).
fn mod_inv(a: &BigInt, m: &BigInt) -> BigInt {
    if m.is_one() {
        return BigInt::zero();
    }
    let e = a.extended_gcd(m);
    debug_assert!(e.gcd.is_one());
    e.x.mod_floor(m)
}

/// Successor of the reduced fraction a/b in the Farey sequence of order n
/// (b <= n required). Returns None at or beyond 1/1.
pub fn farey_next(a: &BigInt, b: &BigInt, n: &BigInt) -> Option<(BigInt, BigInt)> {
    if a >= b {
        return None;
    }
    // consecutive Farey neighbours satisfy b*c - a*d = 1, with d maximal <= n
    let inv = mod_inv(a, b); // a*inv ≡ 1 (mod b)
    // want a*d ≡ -1 (mod b) → d ≡ -inv (mod b), d in (n-b, n]
    let d0 = (-&inv).mod_floor(b);
    let k = (n - &d0).div_floor(b);
    let d = &d0 + &k * b;
    debug_assert!(&d <= n && &d > &(n - b));
    let c = (BigInt::one() + a * &d) / b;
    Some((c, d))
}

/// Reduced fractions u/v in [lo, hi] with v <= n, ascending. `cap` bounds the
/// output length (internal invariant; exceeding it panics loudly rather than
/// silently truncating).
pub fn enumerate_in(lo: &Q, hi: &Q, n: &BigInt, cap: usize) -> Vec<Q> {
    let mut out = Vec::new();
    if lo > hi || *n < BigInt::one() {
        return out;
    }
    let lo = lo.clone().max(Q::zero());
    let hi = hi.clone().min(Q::one());
    if lo > hi {
        return out;
    }
    let (_, mut cur) = best_bounds(&lo, n);
    while cur <= hi {
        out.push(cur.clone());
        assert!(out.len() <= cap, "farey enumeration exceeded cap {cap}");
        match farey_next(cur.numer(), cur.denom(), n) {
            Some((c, d)) => cur = Q::new(c, d),
            None => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{qi, qr};

    fn brute_farey(lo: &Q, hi: &Q, n: u64) -> Vec<Q> {
        let mut v = Vec::new();
        for den in 1..=n {
            for num in 0..=den {
                if num.gcd(&den) == 1 {
                    let f = qr(num as i64, den as i64);
                    if &f >= lo && &f <= hi && !v.contains(&f) {
                        v.push(f);
                    }
                }
            }
        }
        v.sort();
        v
    }

    #[test]
    fn simplest_known_cases() {
        assert_eq!(simplest_between(&qr(1, 3), &qr(1, 2)), qr(1, 2));
        assert_eq!(simplest_between(&qr(2, 7), &qr(3, 7)), qr(1, 3));
        assert_eq!(simplest_between(&qr(15, 100), &qr(18, 100)), qr(1, 6));
        assert_eq!(simplest_between(&qi(0), &qi(1)), qi(0));
    }

    #[test]
    fn best_bounds_vs_brute() {
        let xs = [qr(355, 1130), qr(17, 39), qr(1, 1000), qr(999, 1000)];
        for x in &xs {
            for n in [1u64, 2, 3, 5, 10, 25] {
                let nb = BigInt::from(n);
                let (lo, hi) = best_bounds(x, &nb);
                let all = brute_farey(&qi(0), &qi(1), n);
                let blo = all.iter().filter(|f| *f <= x).max().unwrap();
                let bhi = all.iter().filter(|f| *f >= x).min().unwrap();
                assert_eq!(&lo, blo, "x={x} n={n}");
                assert_eq!(&hi, bhi, "x={x} n={n}");
            }
        }
    }

    #[test]
    fn enumerate_matches_brute() {
        let cases = [
            (qr(1, 5), qr(2, 5), 12u64),
            (qr(0, 1), qr(1, 10), 9),
            (qr(3, 7), qr(4, 7), 20),
        ];
        for (lo, hi, n) in cases {
            let got = enumerate_in(&lo, &hi, &BigInt::from(n), 10_000);
            let want = brute_farey(&lo, &hi, n);
            assert_eq!(got, want, "lo={lo} hi={hi} n={n}");
        }
    }

    #[test]
    fn farey_next_walks_full_sequence() {
        // F_5 from 0/1 to 1/1
        let n = BigInt::from(5u8);
        let mut cur = (BigInt::zero(), BigInt::one());
        let mut seq = vec![Q::new(cur.0.clone(), cur.1.clone())];
        while let Some(nx) = farey_next(&cur.0, &cur.1, &n) {
            seq.push(Q::new(nx.0.clone(), nx.1.clone()));
            cur = nx;
        }
        let want = brute_farey(&qi(0), &qi(1), 5);
        assert_eq!(seq, want);
    }
}
