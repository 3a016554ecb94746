//! The four approximation systems (rational, dyadic, inhomogeneous, Poisson),
//! irreducible subsystems, and dyadic radius layers.
//!
//! Rational and dyadic families are index-addressable closed forms rather
//! than materialized vectors: gen_rational(3000) has ~4.5M pairs and scans
//! only ever touch narrow layers of it.

use crate::errors::{LabError, Result};
use crate::numeric::{layer_denoms, pow2, q_from_str, q_to_str, Q};
use crate::rates::ContinuedFraction;
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;

/// One coordinate: exact rational, or a high-precision surrogate (a rational
/// certified within 2^{-64} of the intended real). Comparison is by value.
#[derive(Clone, Debug)]
pub enum Coord {
    Exact(Q),
    Approx(Q),
}

impl Coord {
    pub fn value(&self) -> &Q {
        match self {
            Coord::Exact(q) | Coord::Approx(q) => q,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Coord::Exact(_))
    }
}

impl PartialEq for Coord {
    fn eq(&self, other: &Self) -> bool {
        self.value() == other.value()
    }
}
impl Eq for Coord {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Point {
    pub coords: Vec<Coord>,
}

impl Point {
    pub fn exact(vals: Vec<Q>) -> Self {
        Point {
            coords: vals.into_iter().map(Coord::Exact).collect(),
        }
    }

    pub fn approx(vals: Vec<Q>) -> Self {
        Point {
            coords: vals.into_iter().map(Coord::Approx).collect(),
        }
    }

    pub fn exact1(v: Q) -> Self {
        Point::exact(vec![v])
    }

    pub fn values(&self) -> Vec<Q> {
        self.coords.iter().map(|c| c.value().clone()).collect()
    }

    pub fn dim(&self) -> u32 {
        self.coords.len() as u32
    }

    pub fn in_unit_cube(&self) -> bool {
        self.coords
            .iter()
            .all(|c| !c.value().is_negative() && *c.value() <= Q::one())
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .coords
            .iter()
            .map(|c| match c {
                Coord::Exact(q) => q_to_str(q),
                Coord::Approx(q) => format!("~{}", q_to_str(q)),
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxPair {
    pub center: Point,
    pub radius: Q,
    pub index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Rational,
    Dyadic,
    Inhomogeneous,
    Poisson,
    Custom,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SystemKind::Rational => "rational",
            SystemKind::Dyadic => "dyadic",
            SystemKind::Inhomogeneous => "inhomogeneous",
            SystemKind::Poisson => "poisson",
            SystemKind::Custom => "custom",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug)]
enum PairStore {
    Explicit(Vec<(Point, Q)>),
    /// (p/q, 1/q^2), q = 1..q_max, p = 0..q-1
    Rational { q_max: u64 },
    /// (k 2^{-j}, 2^{-j}/32), j = 1..j_max, k in {0..2^j-1}^d lexicographic
    Dyadic { j_max: u32, d: u32 },
}

#[derive(Clone, Debug)]
pub struct System {
    pub kind: SystemKind,
    pub d: u32,
    /// generation parameters (q_max / j_max / n_max / seed / r_min as strings)
    pub meta: Vec<(String, String)>,
    store: PairStore,
}

impl System {
    pub fn custom(d: u32, pairs: Vec<(Point, Q)>) -> Self {
        for w in pairs.windows(2) {
            assert!(w[0].1 >= w[1].1, "radii must be non-increasing");
        }
        for (c, r) in &pairs {
            assert!(r.is_positive() && *r <= Q::one());
            assert!(c.in_unit_cube());
        }
        System {
            kind: SystemKind::Custom,
            d,
            meta: vec![],
            store: PairStore::Explicit(pairs),
        }
    }

    pub fn len(&self) -> u64 {
        match &self.store {
            PairStore::Explicit(v) => v.len() as u64,
            PairStore::Rational { q_max } => q_max * (q_max + 1) / 2,
            PairStore::Dyadic { j_max, d } => {
                (1..=*j_max).map(|j| 1u64 << (d * j)).sum()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Random access by ordinal.
    pub fn pair(&self, i: u64) -> ApproxPair {
        match &self.store {
            PairStore::Explicit(v) => {
                let (c, r) = &v[i as usize];
                ApproxPair {
                    center: c.clone(),
                    radius: r.clone(),
                    index: i,
                }
            }
            PairStore::Rational { q_max } => {
                let (q, p) = rational_unrank(i);
                debug_assert!(q <= *q_max);
                ApproxPair {
                    center: Point::exact1(Q::new(BigInt::from(p), BigInt::from(q))),
                    radius: Q::new(BigInt::one(), BigInt::from(q * q)),
                    index: i,
                }
            }
            PairStore::Dyadic { j_max, d } => {
                let (j, k) = dyadic_unrank(i, *j_max, *d);
                let center = Point::exact(
                    k.iter()
                        .map(|ki| Q::new(BigInt::from(*ki), BigInt::one() << (j as usize)))
                        .collect(),
                );
                ApproxPair {
                    center,
                    radius: pow2(-(j as i64) - 5),
                    index: i,
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ApproxPair> + '_ {
        (0..self.len()).map(move |i| self.pair(i))
    }

    /// Smallest radius present (the truncation floor the data can support).
    pub fn min_radius(&self) -> Q {
        if self.is_empty() {
            return Q::one();
        }
        self.pair(self.len() - 1).radius.clone()
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
    }

    pub(crate) fn rational_q_max(&self) -> Option<u64> {
        match &self.store {
            PairStore::Rational { q_max } => Some(*q_max),
            _ => None,
        }
    }

    pub(crate) fn dyadic_j_max(&self) -> Option<u32> {
        match &self.store {
            PairStore::Dyadic { j_max, .. } => Some(*j_max),
            _ => None,
        }
    }

}

/// ordinal -> (q, p) for the rational ordering (q ascending, p ascending).
fn rational_unrank(i: u64) -> (u64, u64) {
    // largest q with q(q-1)/2 <= i
    let mut q = ((1.0 + (1.0 + 8.0 * i as f64).sqrt()) / 2.0) as u64;
    while q * (q - 1) / 2 > i {
        q -= 1;
    }
    while (q + 1) * q / 2 <= i {
        q += 1;
    }
    (q, i - q * (q - 1) / 2)
}

pub(crate) fn rational_rank(q: u64, p: u64) -> u64 {
    q * (q - 1) / 2 + p
}

/// ordinal -> (j, k-vector) for the dyadic ordering.
fn dyadic_unrank(i: u64, j_max: u32, d: u32) -> (u32, Vec<u64>) {
    let mut off = 0u64;
    for j in 1..=j_max {
        let block = 1u64 << (d * j);
        if i < off + block {
            let mut rem = i - off;
            let mut k = vec![0u64; d as usize];
            for c in (0..d as usize).rev() {
                k[c] = rem & ((1 << j) - 1);
                rem >>= j;
            }
            return (j, k);
        }
        off += block;
    }
    panic!("ordinal out of range");
}

// ---------------------------------------------------------------------------
// generators
// ---------------------------------------------------------------------------

pub fn gen_rational(q_max: u64) -> System {
    assert!(q_max >= 1);
    System {
        kind: SystemKind::Rational,
        d: 1,
        meta: vec![("q_max".into(), q_max.to_string())],
        store: PairStore::Rational { q_max },
    }
}

pub fn gen_dyadic(j_max: u32, d: u32) -> System {
    assert!(j_max >= 1 && d >= 1);
    System {
        kind: SystemKind::Dyadic,
        d,
        meta: vec![
            ("j_max".into(), j_max.to_string()),
            ("d".into(), d.to_string()),
        ],
        store: PairStore::Dyadic { j_max, d },
    }
}

/// ({n alpha}, 1/n) for n = 1..n_max. Centers are exact-rational surrogates
/// from a deep convergent p/q; certified within n_max/q^2 <= 2^{-64}.
pub fn gen_inhomogeneous(alpha: &ContinuedFraction, n_max: u64) -> Result<System> {
    let (p, q) = alpha.last_convergent();
    let err_ok = {
        // need n_max / q^2 <= 2^{-64}
        let lhs = BigInt::from(n_max) << 64usize;
        &lhs <= &(&q * &q)
    };
    if !err_ok || q <= BigInt::from(n_max) {
        return Err(LabError::InsufficientPrecision(format!(
            "convergent denominator {q} too small for n_max={n_max}"
        )));
    }
    let pm = p.mod_floor(&q);
    let mut pairs = Vec::with_capacity(n_max as usize);
    let mut acc = BigInt::zero();
    for n in 1..=n_max {
        acc += &pm;
        if acc >= q {
            acc -= &q;
        }
        let center = Q::new(acc.clone(), q.clone());
        pairs.push((Point::approx(vec![center]), Q::new(BigInt::one(), BigInt::from(n))));
    }
    Ok(System {
        kind: SystemKind::Inhomogeneous,
        d: 1,
        meta: vec![("n_max".into(), n_max.to_string())],
        store: PairStore::Explicit(pairs),
    })
}

/// Poisson(lambda) by decomposition into chunks small enough for the
/// inverse-transform loop (exp(-chunk) stays representable).
pub(crate) fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    assert!(lambda >= 0.0 && lambda < 1e8, "intensity out of range");
    let mut total = 0u64;
    let mut remaining = lambda;
    while remaining > 0.0 {
        let chunk = remaining.min(500.0);
        remaining -= chunk;
        let p0 = (-chunk).exp();
        let mut k = 0u64;
        let mut prod = p0;
        let mut acc = p0;
        let u: f64 = rng.gen();
        while u > acc && prod > 0.0 {
            k += 1;
            prod *= chunk / k as f64;
            acc += prod;
        }
        total += k;
    }
    total
}

fn unit_u64(rng: &mut ChaCha8Rng) -> Q {
    let k: u64 = rng.gen();
    Q::new(BigInt::from(k), BigInt::one() << 64usize)
}

/// A realization of the point process with intensity dx dy / y^2 on
/// [0,1]^d x [r_min, 1): count ~ Poisson(1/r_min - 1), x uniform, y by
/// inverse CDF. Deterministic per seed; pairs sorted by radius descending.
pub fn gen_poisson(seed: u64, r_min: f64, d: u32) -> System {
    assert!(r_min > 0.0 && r_min < 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rmin_q = Q::from_float(r_min).expect("r_min finite");
    let lambda_q = Q::one() / &rmin_q - Q::one();
    let lambda = 1.0 / r_min - 1.0;
    let n = sample_poisson(&mut rng, lambda);
    let mut pairs: Vec<(Point, Q)> = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let xs: Vec<Q> = (0..d).map(|_| unit_u64(&mut rng)).collect();
        let u = unit_u64(&mut rng);
        // y = 1 / (1/r_min - u * lambda), exact rational arithmetic
        let y = Q::one() / (Q::one() / &rmin_q - u * &lambda_q);
        pairs.push((Point::approx(xs), y));
    }
    pairs.sort_by(|a, b| b.1.cmp(&a.1));
    System {
        kind: SystemKind::Poisson,
        d,
        meta: vec![
            ("seed".into(), seed.to_string()),
            ("r_min".into(), r_min.to_string()),
        ],
        store: PairStore::Explicit(pairs),
    }
}

// ---------------------------------------------------------------------------
// irreducible subsystem and layers
// ---------------------------------------------------------------------------

/// Ordered sublist of a System keeping the first occurrence per center value;
/// stores back-references (original pair ordinals).
#[derive(Clone, Debug)]
pub struct IrreducibleSystem {
    pub indices: Vec<u64>,
    closed_form: bool,
}

impl IrreducibleSystem {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pair(&self, sys: &System, i: usize) -> ApproxPair {
        sys.pair(self.indices[i])
    }

    pub fn is_closed_form(&self) -> bool {
        self.closed_form
    }
}

/// First-occurrence dedup by exact center value.
pub fn irreducible(sys: &System) -> IrreducibleSystem {
    assert!(!sys.is_empty(), "irreducible of empty system");
    match &sys.store {
        PairStore::Rational { q_max } => {
            let mut idx = Vec::new();
            for q in 1..=*q_max {
                for p in 0..q {
                    if q == 1 || p.gcd(&q) == 1 {
                        idx.push(rational_rank(q, p));
                    }
                }
            }
            IrreducibleSystem {
                indices: idx,
                closed_form: true,
            }
        }
        PairStore::Dyadic { j_max, d } => {
            let mut idx = Vec::new();
            for j in 1..=*j_max {
                let block = 1u64 << (d * j);
                for rem in 0..block {
                    let keep = if j == 1 {
                        true
                    } else {
                        // some coordinate odd
                        let mut r = rem;
                        let mut odd = false;
                        for _ in 0..*d {
                            if (r & ((1 << j) - 1)) & 1 == 1 {
                                odd = true;
                            }
                            r >>= j;
                        }
                        odd
                    };
                    if keep {
                        let mut off = 0u64;
                        for jj in 1..j {
                            off += 1u64 << (d * jj);
                        }
                        idx.push(off + rem);
                    }
                }
            }
            IrreducibleSystem {
                indices: idx,
                closed_form: true,
            }
        }
        PairStore::Explicit(_) => irreducible_generic(sys),
    }
}

/// Generic hash-dedup route (also used to cross-validate the closed forms).
pub fn irreducible_generic(sys: &System) -> IrreducibleSystem {
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut idx = Vec::new();
    for i in 0..sys.len() {
        let p = sys.pair(i);
        let key = p
            .center
            .coords
            .iter()
            .map(|c| q_to_str(c.value()))
            .collect::<Vec<_>>()
            .join("|");
        if seen.insert(key, ()).is_none() {
            idx.push(i);
        }
    }
    IrreducibleSystem {
        indices: idx,
        closed_form: false,
    }
}

/// Original-system ordinals of the irreducible pairs with radius in
/// (2^{-(j+1)}, 2^{-j}].
pub fn t_layer(sys: &System, irr: &IrreducibleSystem, j: u32) -> Vec<u64> {
    match &sys.store {
        PairStore::Rational { q_max } => {
            // 1/q^2 in (2^{-(j+1)}, 2^{-j}] <=> 2^j <= q^2 < 2^{j+1}
            let (qlo, qhi) = layer_denoms(j);
            let qlo = qlo.to_u64().unwrap_or(u64::MAX);
            let qhi = qhi.to_u64().unwrap_or(u64::MAX).min(*q_max);
            let mut out = Vec::new();
            for q in qlo..=qhi {
                if qlo > qhi {
                    break;
                }
                for p in 0..q {
                    if q == 1 || p.gcd(&q) == 1 {
                        out.push(rational_rank(q, p));
                    }
                }
            }
            out
        }
        PairStore::Dyadic { j_max, d } => {
            // radius 2^{-i-5} in the layer <=> i = j - 5 (empty otherwise)
            if j < 6 || j - 5 > *j_max {
                return Vec::new();
            }
            let i = j - 5;
            let block = 1u64 << (d * i);
            let mut off = 0u64;
            for jj in 1..i {
                off += 1u64 << (d * jj);
            }
            (0..block)
                .filter(|rem| {
                    if i == 1 {
                        return true;
                    }
                    let mut r = *rem;
                    for _ in 0..*d {
                        if (r & ((1 << i) - 1)) & 1 == 1 {
                            return true;
                        }
                        r >>= i;
                    }
                    false
                })
                .map(|rem| off + rem)
                .collect()
        }
        PairStore::Explicit(_) => {
            let lo = pow2(-(j as i64) - 1);
            let hi = pow2(-(j as i64));
            irr.indices
                .iter()
                .copied()
                .filter(|&i| {
                    let r = &sys.pair(i).radius;
                    *r > lo && *r <= hi
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// serialization: header line then one pair per line
// ---------------------------------------------------------------------------

pub fn to_text(sys: &System) -> String {
    let mut out = String::new();
    let meta: Vec<String> = sys.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    out.push_str(&format!("system kind={} d={} {}\n", sys.kind, sys.d, meta.join(" ")));
    for p in sys.iter() {
        out.push_str(&format!("{} {}\n", p.center, q_to_str(&p.radius)));
    }
    out
}

pub fn from_text(text: &str) -> Result<System> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Config("empty system text".into()))?;
    let mut kind = None;
    let mut d = 1u32;
    let mut meta = Vec::new();
    for tok in header.split_whitespace().skip(1) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("bad header token {tok}")))?;
        match k {
            "kind" => {
                kind = Some(match v {
                    "rational" => SystemKind::Rational,
                    "dyadic" => SystemKind::Dyadic,
                    "inhomogeneous" => SystemKind::Inhomogeneous,
                    "poisson" => SystemKind::Poisson,
                    "custom" => SystemKind::Custom,
                    _ => return Err(LabError::Config(format!("unknown kind {v}"))),
                })
            }
            "d" => d = v.parse().map_err(|_| LabError::Config("bad d".into()))?,
            _ => meta.push((k.to_string(), v.to_string())),
        }
    }
    let kind = kind.ok_or_else(|| LabError::Config("missing kind".into()))?;
    // closed-form kinds rebuild from parameters; others parse pair lines
    let find = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    match kind {
        SystemKind::Rational => {
            let q_max = find("q_max")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| LabError::Config("missing q_max".into()))?;
            Ok(gen_rational(q_max))
        }
        SystemKind::Dyadic => {
            let j_max = find("j_max")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| LabError::Config("missing j_max".into()))?;
            Ok(gen_dyadic(j_max, d))
        }
        _ => {
            let mut pairs = Vec::new();
            for line in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != d as usize + 1 {
                    return Err(LabError::Config(format!("bad pair line: {line}")));
                }
                let mut coords = Vec::new();
                for t in &toks[..d as usize] {
                    let (approx, s) = match t.strip_prefix('~') {
                        Some(s) => (true, s),
                        None => (false, *t),
                    };
                    let q = q_from_str(s)
                        .ok_or_else(|| LabError::Config(format!("bad coordinate {t}")))?;
                    coords.push(if approx { Coord::Approx(q) } else { Coord::Exact(q) });
                }
                let r = q_from_str(toks[d as usize])
                    .ok_or_else(|| LabError::Config(format!("bad radius {line}")))?;
                pairs.push((Point { coords }, r));
            }
            Ok(System {
                kind,
                d,
                meta,
                store: PairStore::Explicit(pairs),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{qi, qr};

    #[test]
    fn rational_enumeration_forced() {
        let s = gen_rational(2);
        let got: Vec<(Q, Q)> = s.iter().map(|p| (p.center.values()[0].clone(), p.radius)).collect();
        assert_eq!(
            got,
            vec![
                (qi(0), qi(1)),
                (qi(0), qr(1, 4)),
                (qr(1, 2), qr(1, 4))
            ]
        );
        assert_eq!(gen_rational(1).len(), 1);
        // closed-form count: sum q <= 100 = 5050, checked against enumeration
        let s100 = gen_rational(100);
        assert_eq!(s100.len(), 5050);
        assert_eq!(s100.iter().count(), 5050);
    }

    #[test]
    fn dyadic_counts_and_first_pairs() {
        let s = gen_dyadic(1, 1);
        let got: Vec<(Q, Q)> = s.iter().map(|p| (p.center.values()[0].clone(), p.radius)).collect();
        assert_eq!(got, vec![(qi(0), qr(1, 64)), (qr(1, 2), qr(1, 64))]);
        assert_eq!(gen_dyadic(3, 1).len(), 14);
        assert_eq!(gen_dyadic(2, 2).len(), 20);
    }

    #[test]
    fn radii_non_increasing_everywhere() {
        for sys in [gen_rational(30), gen_dyadic(5, 1), gen_dyadic(3, 2)] {
            let mut prev = Q::one() + Q::one();
            for p in sys.iter() {
                assert!(p.radius <= prev);
                prev = p.radius;
            }
        }
    }

    #[test]
    fn irreducible_rational_is_coprime_filter() {
        let sys = gen_rational(40);
        let irr = irreducible(&sys);
        let gen = irreducible_generic(&sys);
        assert_eq!(irr.indices, gen.indices);
        // center 1/2 kept once, as (1,2) not (2,4)
        let half = qr(1, 2);
        let kept: Vec<_> = irr
            .indices
            .iter()
            .map(|&i| sys.pair(i))
            .filter(|p| p.center.values()[0] == half)
            .collect();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].radius, qr(1, 4));
    }

    #[test]
    fn irreducible_idempotent_and_dyadic_odd_rule() {
        let sys = gen_dyadic(5, 1);
        let irr = irreducible(&sys);
        let gen = irreducible_generic(&sys);
        assert_eq!(irr.indices, gen.indices);
        for (pos, &i) in irr.indices.iter().enumerate() {
            let p = sys.pair(i);
            let v = &p.center.values()[0];
            // generation-1 representatives or odd numerator at its generation
            let num = v.numer();
            let ok = p.radius == qr(1, 64) || num.is_odd();
            assert!(ok, "pos {pos}: {v}");
        }
        // idempotence: dedup of an already-deduped explicit list is identity
        let pairs: Vec<(Point, Q)> = irr
            .indices
            .iter()
            .map(|&i| {
                let p = sys.pair(i);
                (p.center, p.radius)
            })
            .collect();
        let custom = System::custom(1, pairs);
        let again = irreducible(&custom);
        assert_eq!(again.len() as u64, custom.len());
    }

    #[test]
    fn t_layer_partition_and_boundaries() {
        let sys = gen_rational(100);
        let irr = irreducible(&sys);
        let mut seen = Vec::new();
        for j in 0..=14u32 {
            seen.extend(t_layer(&sys, &irr, j));
        }
        seen.sort_unstable();
        let mut want = irr.indices.clone();
        want.sort_unstable();
        assert_eq!(seen, want, "layers partition the irreducible system");
        // (1/2, 1/4): layer 2 exactly (weak right inequality)
        let i_half = rational_rank(2, 1);
        assert!(t_layer(&sys, &irr, 2).contains(&i_half));
        assert!(!t_layer(&sys, &irr, 1).contains(&i_half));
        assert!(!t_layer(&sys, &irr, 3).contains(&i_half));
        // defining inequality for all q <= 1000
        let big = gen_rational(1000);
        let birr = irreducible(&big);
        for j in 0..=19u32 {
            for &i in &t_layer(&big, &birr, j) {
                let r = big.pair(i).radius;
                assert!(r > pow2(-(j as i64) - 1) && r <= pow2(-(j as i64)));
            }
        }
    }

    #[test]
    fn dyadic_layers_match_explicit_route() {
        let sys = gen_dyadic(6, 1);
        let irr = irreducible(&sys);
        // explicit route: reconstruct as a custom system and compare per layer
        let pairs: Vec<(Point, Q)> = irr
            .indices
            .iter()
            .map(|&i| {
                let p = sys.pair(i);
                (p.center, p.radius)
            })
            .collect();
        let custom = System::custom(1, pairs);
        let cirr = irreducible(&custom);
        for j in 0..=12u32 {
            let a: Vec<Q> = t_layer(&sys, &irr, j)
                .iter()
                .map(|&i| sys.pair(i).center.values()[0].clone())
                .collect();
            let b: Vec<Q> = t_layer(&custom, &cirr, j)
                .iter()
                .map(|&i| custom.pair(i).center.values()[0].clone())
                .collect();
            assert_eq!(a, b, "layer {j}");
        }
    }

    #[test]
    fn poisson_determinism_and_mass() {
        let a = gen_poisson(7, 0.5, 1);
        let b = gen_poisson(7, 0.5, 1);
        assert_eq!(to_text(&a), to_text(&b));
        // mean count over seeds for radius in [a,b]: 1/a - 1/b
        let (lo, hi) = (pow2(-8), pow2(-4));
        let mut total = 0u64;
        let seeds = 1000;
        for seed in 0..seeds {
            let s = gen_poisson(seed, 1.0 / 512.0, 1);
            total += s
                .iter()
                .filter(|p| p.radius >= lo && p.radius <= hi)
                .count() as u64;
        }
        let mean = total as f64 / seeds as f64;
        let expect = 256.0 - 16.0;
        assert!(
            (mean - expect).abs() < 0.05 * expect,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn inhomogeneous_radii_and_identity_irreducible() {
        // golden ratio - 1 = [0; 1, 1, 1, ...]
        let alpha = ContinuedFraction::from_quotients(
            BigInt::zero(),
            vec![BigInt::one(); 100],
        );
        let sys = gen_inhomogeneous(&alpha, 3).unwrap();
        let radii: Vec<Q> = sys.iter().map(|p| p.radius).collect();
        assert_eq!(radii, vec![qi(1), qr(1, 2), qr(1, 3)]);
        let irr = irreducible(&sys);
        assert_eq!(irr.len() as u64, sys.len());
        // first center ~ 0.618
        let c = sys.pair(0).center.values()[0].clone();
        let f = c.numer().to_f64().unwrap() / c.denom().to_f64().unwrap();
        assert!((f - 0.6180339887).abs() < 1e-9);
        // insufficient precision detected
        let shallow = ContinuedFraction::from_quotients(BigInt::zero(), vec![BigInt::one(); 5]);
        assert!(gen_inhomogeneous(&shallow, 100).is_err());
    }

    #[test]
    fn text_roundtrip_bit_exact() {
        for sys in [gen_rational(12), gen_dyadic(3, 2), gen_poisson(3, 0.1, 1)] {
            let t = to_text(&sys);
            let back = from_text(&t).unwrap();
            assert_eq!(to_text(&back), t);
        }
    }
}
