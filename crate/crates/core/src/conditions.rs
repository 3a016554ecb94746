//! The hypothesis layer: weak redundancy profiles (C1), the pointwise
//! avoidance property P(V, delta), the Q / Q-tilde cube counts with their
//! decay bound, the three-distance gap report, and the Monte-Carlo
//! probability floor for the Poisson system.

use crate::errors::{LabError, Result};
use crate::farey::{best_bounds, farey_next};
use crate::geometry::{gamma, DyadicCube, GaugeFunction, RedundancyProfile};
use crate::numeric::{pow2, pow_q, Q, Round};
use crate::rates::ContinuedFraction;
use crate::systems::{t_layer, IrreducibleSystem, Point, System, SystemKind};
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};

// ---------------------------------------------------------------------------
// C1: redundancy profiles
// ---------------------------------------------------------------------------

/// Per-layer disjoint-family counts. d = 1 is exact: the layer's balls are
/// closed intervals, and the minimal number of disjoint families equals the
/// maximum overlap depth (interval graphs are perfect), computed by an
/// endpoint sweep. d >= 2 falls back to a first-fit greedy upper bound and
/// the profile is flagged inexact. Empty layers inherit the previous layer's
/// value (via the profile's lookup rules); the map is made non-decreasing by
/// a cumulative max.
pub fn c1_profile(sys: &System, irr: &IrreducibleSystem, j_max: u32) -> RedundancyProfile {
    let d = sys.d;
    let mut raw = BTreeMap::new();
    for j in 0..=j_max {
        let layer = t_layer(sys, irr, j);
        if layer.is_empty() {
            continue;
        }
        let n = if d == 1 {
            max_overlap_1d(sys, &layer)
        } else {
            greedy_family_bound(sys, &layer)
        };
        raw.insert(j, n);
    }
    let mut n = BTreeMap::new();
    let mut cur = 0u64;
    for (&j, &v) in &raw {
        cur = cur.max(v);
        n.insert(j, cur);
    }
    RedundancyProfile {
        d,
        n,
        raw,
        exact: d == 1,
        extend_last: true,
    }
}

/// Maximum overlap depth of closed intervals [c-r, c+r]: sweep endpoints,
/// opening events before closing events at equal coordinates (closed
/// intervals touching at a point do overlap).
fn max_overlap_1d(sys: &System, layer: &[u64]) -> u64 {
    // event kind 0 = open, 1 = close
    let mut events: Vec<(Q, u8)> = Vec::with_capacity(2 * layer.len());
    for &i in layer {
        let p = sys.pair(i);
        let c = &p.center.values()[0];
        events.push((c - &p.radius, 0));
        events.push((c + &p.radius, 1));
    }
    events.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut depth = 0i64;
    let mut best = 0i64;
    for (_, kind) in events {
        if kind == 0 {
            depth += 1;
            best = best.max(depth);
        } else {
            depth -= 1;
        }
    }
    best.max(1) as u64
}

/// First-fit family count for d >= 2 (upper bound on the minimal number of
/// pairwise-disjoint families).
fn greedy_family_bound(sys: &System, layer: &[u64]) -> u64 {
    let balls: Vec<(Vec<Q>, Q)> = layer
        .iter()
        .map(|&i| {
            let p = sys.pair(i);
            (p.center.values(), p.radius)
        })
        .collect();
    let mut families: Vec<Vec<usize>> = Vec::new();
    for (i, (c, r)) in balls.iter().enumerate() {
        let slot = families.iter().position(|fam| {
            fam.iter().all(|&m| {
                let (mc, mr) = &balls[m];
                crate::geometry::linf_dist(c, mc) > r + mr
            })
        });
        match slot {
            Some(s) => families[s].push(i),
            None => families.push(vec![i]),
        }
    }
    families.len().max(1) as u64
}

// ---------------------------------------------------------------------------
// P(V, delta)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct PCheckParams {
    /// widens the witness radius window to [2^{-g-1-witness_slack}, 2^{-g});
    /// 0 is the textbook window, dyadic systems need 4 (their layer-g pairs
    /// have radius 2^{-g-5})
    pub witness_slack: u32,
    /// the additive slack on the scanned-window upper end, default 4
    pub window_slack: u32,
}

impl Default for PCheckParams {
    fn default() -> Self {
        PCheckParams {
            witness_slack: 0,
            window_slack: 4,
        }
    }
}

/// Parameters for systems whose pair radii are a fixed factor below the
/// dyadic layer scale.
pub fn dyadic_p_params() -> PCheckParams {
    PCheckParams {
        witness_slack: 4,
        window_slack: 4,
    }
}

#[derive(Clone, Debug)]
pub struct PWitness {
    pub cube: DyadicCube,
    pub center: Point,
    pub radius: Q,
    pub delta: f64,
    /// half-open window [w_lo, w_hi) on -log2 r_p actually scanned
    pub window: (u32, u32),
}

/// Does some system pair (x, r) with x in V and r in the witness window have
/// no OTHER system center inside B(x, r^delta) across the scanned radius
/// window? Centers equal to x by value do not count as violations (set
/// equality). Returns the first working witness in system order.
pub fn check_p(
    v: &DyadicCube,
    delta: f64,
    sys: &System,
    irr: &IrreducibleSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    params: PCheckParams,
) -> Result<(bool, Option<PWitness>)> {
    assert!(delta > 1.0);
    let g = v.g();
    let w_lo = if g == 0 {
        0
    } else {
        gamma(profile, phi, g).gamma
    };
    let w_hi = (delta * (g as f64 + 1.0)).floor() as u32 + params.window_slack;
    if sys.min_radius() > pow2(-(w_hi as i64)) {
        return Err(LabError::TruncationTooShallow(format!(
            "P-window on cube {v} needs radii down to 2^-{w_hi}"
        )));
    }
    // explicit backends scan a precomputed window pair list
    let window_pairs = match sys.kind {
        SystemKind::Rational | SystemKind::Dyadic => None,
        _ => Some(explicit_window(sys, irr, w_lo, w_hi)),
    };
    let q_cap = sys.rational_q_max().map(BigInt::from);
    for (center, radius) in witness_candidates(sys, irr, v, params.witness_slack)? {
        let rho = pow_q(&radius, delta, Round::Up);
        let vals = center.values();
        let hit = match sys.kind {
            SystemKind::Rational => rational_violator(q_cap.as_ref(), &vals[0], &rho, w_lo, w_hi)?,
            SystemKind::Dyadic => dyadic_violator(sys.dyadic_j_max(), &vals, &rho, w_lo, w_hi),
            _ => explicit_violator(window_pairs.as_ref().unwrap(), &vals, &rho),
        };
        if !hit {
            return Ok((
                true,
                Some(PWitness {
                    cube: v.clone(),
                    center,
                    radius,
                    delta,
                    window: (w_lo, w_hi),
                }),
            ));
        }
    }
    Ok((false, None))
}

/// ceil(sqrt(2^e)) as the smallest q with q^2 >= 2^e.
fn ceil_sqrt_pow2(e: u32) -> BigInt {
    let m = BigInt::one() << (e as usize);
    let r = (&m - BigInt::one()).sqrt();
    &r + BigInt::one()
}

/// floor(sqrt(2^e - 1)) as the largest q with q^2 < 2^e.
fn floor_sqrt_pow2_minus1(e: u32) -> BigInt {
    ((BigInt::one() << (e as usize)) - BigInt::one()).sqrt()
}

/// Ascending walk over reduced fractions in [lo, hi] (or [lo, hi) when
/// closed_hi is false) with denominator <= n, clipped to [0, 1]. The visitor
/// returns true to stop early.
fn for_each_fraction_in(
    lo: &Q,
    hi: &Q,
    closed_hi: bool,
    n: &BigInt,
    cap: usize,
    visit: &mut dyn FnMut(&Q) -> bool,
) -> Result<()> {
    if *n < BigInt::one() {
        return Ok(());
    }
    let lo = lo.clone().max(Q::zero());
    let hi = hi.clone().min(Q::one());
    if hi < lo || (!closed_hi && hi == lo) {
        return Ok(());
    }
    let (_, mut cur) = best_bounds(&lo, n);
    let mut steps = 0usize;
    while cur <= hi && (closed_hi || cur < hi) {
        if visit(&cur) {
            return Ok(());
        }
        steps += 1;
        if steps > cap {
            return Err(LabError::PreconditionViolated(format!(
                "fraction walk exceeded {cap} steps"
            )));
        }
        match farey_next(cur.numer(), cur.denom(), n) {
            Some((c, d)) => cur = Q::new(c, d),
            None => break,
        }
    }
    Ok(())
}

/// Witness candidates in V: system pairs with center in V and radius in
/// [2^{-g-1-w}, 2^{-g}), in system order.
fn witness_candidates(
    sys: &System,
    irr: &IrreducibleSystem,
    v: &DyadicCube,
    w: u32,
) -> Result<Vec<(Point, Q)>> {
    let g = v.g();
    let mut out: Vec<(Point, Q)> = Vec::new();
    match sys.kind {
        SystemKind::Rational => {
            let q_cap = sys.rational_q_max().map(BigInt::from);
            out = rational_witnesses(v, w, q_cap.as_ref())?;
        }
        SystemKind::Dyadic => {
            out = dyadic_witnesses(v, w, sys.dyadic_j_max());
        }
        _ => {
            let r_hi = pow2(-(g as i64)); // exclusive
            let r_lo = pow2(-(g as i64) - 1 - w as i64); // inclusive
            for pos in 0..irr.len() {
                let p = irr.pair(sys, pos);
                if p.radius >= r_lo && p.radius < r_hi && v.contains(&p.center.values()) {
                    out.push((p.center, p.radius));
                }
            }
        }
    }
    Ok(out)
}

/// Rational witness pairs in V: reduced p/q with p/q in V and
/// 2^g < q^2 <= 2^{g+1+w}, in (q, p) order. `q_cap = None` is untruncated.
fn rational_witnesses(v: &DyadicCube, w: u32, q_cap: Option<&BigInt>) -> Result<Vec<(Point, Q)>> {
    let g = v.g();
    let mut out: Vec<(Point, Q)> = Vec::new();
    let qlo = {
        let t = (BigInt::one() << (g as usize)).sqrt();
        // smallest q with q^2 > 2^g
        if &t * &t > (BigInt::one() << (g as usize)) {
            t
        } else {
            t + 1
        }
    };
    let mut qhi = (BigInt::one() << ((g + 1 + w) as usize)).sqrt();
    if let Some(qm) = q_cap {
        qhi = qhi.min(qm.clone());
    }
    if qlo > qhi {
        return Ok(out);
    }
    let mut found: Vec<(BigInt, BigInt)> = Vec::new();
    let cap = 1usize << (w.min(20) + 8);
    for_each_fraction_in(&v.lo(0), &v.hi(0), false, &qhi, cap, &mut |f| {
        if *f.denom() >= qlo && !f.is_one() {
            found.push((f.denom().clone(), f.numer().clone()));
        }
        false
    })?;
    found.sort();
    for (q, p) in found {
        out.push((
            Point::exact1(Q::new(p, q.clone())),
            Q::new(BigInt::one(), &q * &q),
        ));
    }
    Ok(out)
}

/// Dyadic witness pairs in V: irreducible grid points at generations
/// g-4 <= i <= g-4+w (radius 2^{-i-5} in [2^{-g-1-w}, 2^{-g})).
fn dyadic_witnesses(v: &DyadicCube, w: u32, i_cap: Option<u32>) -> Vec<(Point, Q)> {
    let g = v.g();
    let mut out: Vec<(Point, Q)> = Vec::new();
    let ilo = (g as i64 - 4).max(1);
    let mut ihi = g as i64 - 4 + w as i64;
    if let Some(c) = i_cap {
        ihi = ihi.min(c as i64);
    }
    for i in ilo..=ihi {
        let i = i as u32;
        let mut axes: Vec<Vec<BigInt>> = Vec::new();
        for t in 0..v.d as usize {
            axes.push(grid_points_in(&v.lo(t), &v.hi(t), false, i));
        }
        let mut combo = vec![BigInt::zero(); v.d as usize];
        collect_grid_combos(&axes, 0, &mut combo, &mut |ks| {
            let irreducible = i == 1 || ks.iter().any(|m| m.is_odd());
            if irreducible {
                let center: Vec<Q> = ks
                    .iter()
                    .map(|m| Q::new(m.clone(), BigInt::one() << (i as usize)))
                    .collect();
                out.push((Point::exact(center), pow2(-(i as i64) - 5)));
            }
        });
    }
    out
}

/// Grid numerators m with m 2^{-i} in [lo, hi) (or closed), clamped to
/// [0, 2^i - 1].
fn grid_points_in(lo: &Q, hi: &Q, closed_hi: bool, i: u32) -> Vec<BigInt> {
    let scale = pow2(i as i64);
    let mut m = (lo * &scale).ceil().to_integer();
    let top = (BigInt::one() << (i as usize)) - BigInt::one();
    if m.is_negative() {
        m = BigInt::zero();
    }
    let mut out = Vec::new();
    loop {
        if m > top {
            break;
        }
        let val = Q::new(m.clone(), BigInt::one() << (i as usize));
        if val > *hi || (!closed_hi && val >= *hi) {
            break;
        }
        if val >= *lo {
            out.push(m.clone());
        }
        m += 1;
    }
    out
}

fn collect_grid_combos(
    axes: &[Vec<BigInt>],
    t: usize,
    combo: &mut Vec<BigInt>,
    f: &mut dyn FnMut(&[BigInt]),
) {
    if t == axes.len() {
        f(combo);
        return;
    }
    for m in &axes[t] {
        combo[t] = m.clone();
        collect_grid_combos(axes, t + 1, combo, f);
    }
}

/// Any rational center u/v != x with v in the window band inside the closed
/// ball [x - rho, x + rho]? Reduced fractions in [0, 1) with v <= q_cap are
/// exactly the irreducible centers, so a Farey walk over the ball decides it
/// without enumerating the layer. `q_cap = None` means untruncated.
fn rational_violator(q_cap: Option<&BigInt>, x: &Q, rho: &Q, w_lo: u32, w_hi: u32) -> Result<bool> {
    let vlo = ceil_sqrt_pow2(w_lo);
    let mut vhi = floor_sqrt_pow2_minus1(w_hi);
    if let Some(qm) = q_cap {
        vhi = vhi.min(qm.clone());
    }
    if vlo > vhi {
        return Ok(false);
    }
    // any u/v != x has |x - u/v| >= 1/(den(x) * v); rule the whole band out
    // in O(1) when even the deepest v cannot reach the ball
    if rho * Q::from_integer(x.denom() * &vhi) < Q::one() {
        return Ok(false);
    }
    let mut hit = false;
    for_each_fraction_in(
        &(x - rho),
        &(x + rho),
        true,
        &vhi,
        5_000_000,
        &mut |f| {
            if f != x && !f.is_one() && *f.denom() >= vlo {
                hit = true;
                return true;
            }
            false
        },
    )?;
    Ok(hit)
}

/// Same question for the dyadic system: per window layer k the centers are
/// the generation k-5 grid (irreducible: some odd coordinate).
fn dyadic_violator(i_cap: Option<u32>, x: &[Q], rho: &Q, w_lo: u32, w_hi: u32) -> bool {
    for k in w_lo..w_hi {
        let i = k as i64 - 5;
        if i < 1 || i_cap.map_or(false, |c| i > c as i64) {
            continue;
        }
        let i = i as u32;
        let axes: Vec<Vec<BigInt>> = x
            .iter()
            .map(|xt| grid_points_in(&(xt - rho), &(xt + rho), true, i))
            .collect();
        let mut found = false;
        let mut combo = vec![BigInt::zero(); x.len()];
        collect_grid_combos(&axes, 0, &mut combo, &mut |ks| {
            if found {
                return;
            }
            let irreducible = i == 1 || ks.iter().any(|m| m.is_odd());
            if !irreducible {
                return;
            }
            let differs = ks
                .iter()
                .zip(x)
                .any(|(m, xt)| Q::new(m.clone(), BigInt::one() << (i as usize)) != *xt);
            if differs {
                found = true;
            }
        });
        if found {
            return true;
        }
    }
    false
}

/// Irreducible centers with radius in (2^{-w_hi}, 2^{-w_lo}].
fn explicit_window(sys: &System, irr: &IrreducibleSystem, w_lo: u32, w_hi: u32) -> Vec<Vec<Q>> {
    let r_max = pow2(-(w_lo as i64));
    let r_min = pow2(-(w_hi as i64));
    (0..irr.len())
        .filter_map(|pos| {
            let p = irr.pair(sys, pos);
            if p.radius > r_min && p.radius <= r_max {
                Some(p.center.values())
            } else {
                None
            }
        })
        .collect()
}

fn explicit_violator(window: &[Vec<Q>], x: &[Q], rho: &Q) -> bool {
    for c in window {
        let inside = c
            .iter()
            .zip(x)
            .all(|(ci, xi)| (ci - xi).abs() <= *rho);
        if inside && c != x {
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Q and Q-tilde counts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct QCount {
    pub count: u64,
    pub total: u64,
    pub members: Vec<DyadicCube>,
    pub witnesses: Vec<PWitness>,
}

impl QCount {
    pub fn kappa_hat(&self) -> f64 {
        self.count as f64 / self.total as f64
    }
}

/// Exact scan of all generation-j subcubes of U for P(V, delta).
#[allow(clippy::too_many_arguments)]
pub fn count_q(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: &System,
    irr: &IrreducibleSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    params: PCheckParams,
) -> Result<QCount> {
    assert!(j >= u.g());
    let cubes = u.cubes_within(j);
    let total = cubes.len() as u64;
    let mut members = Vec::new();
    let mut witnesses = Vec::new();
    for v in cubes {
        let (ok, w) = check_p(&v, delta, sys, irr, profile, phi, params)?;
        if ok {
            members.push(v);
            witnesses.push(w.unwrap());
        }
    }
    Ok(QCount {
        count: members.len() as u64,
        total,
        members,
        witnesses,
    })
}

/// Exact count of generation-j subcubes of U meeting some contracted ball
/// B(y_p, r_p^delta) over the layers g(U)..gamma(j). Empty when
/// gamma(j) < g(U).
pub fn count_qtilde(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: &System,
    irr: &IrreducibleSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
) -> Result<u64> {
    assert!(j >= u.g() && j >= 1);
    let g = u.g();
    let gam = gamma(profile, phi, j).gamma;
    if gam < g {
        return Ok(0);
    }
    let shift = (j - g) as usize;
    let mut marked: HashSet<u128> = HashSet::new();
    for k in g..=gam {
        match sys.kind {
            SystemKind::Rational => {
                let (qlo, mut qhi) = crate::numeric::layer_denoms(k);
                if let Some(qm) = sys.rational_q_max() {
                    qhi = qhi.min(BigInt::from(qm));
                }
                if qlo > qhi {
                    continue;
                }
                // widest contracted ball in the layer
                let infl = pow_q(&pow2(-(k as i64)), delta, Round::Up);
                let lo = u.lo(0) - &infl;
                let hi = u.hi(0) + &infl;
                let mut centers: Vec<Q> = Vec::new();
                for_each_fraction_in(&lo, &hi, true, &qhi, 50_000_000, &mut |f| {
                    if *f.denom() >= qlo && !f.is_one() {
                        centers.push(f.clone());
                    }
                    false
                })?;
                for c in centers {
                    let r = Q::new(BigInt::one(), c.denom() * c.denom());
                    let rho = pow_q(&r, delta, Round::Up);
                    mark_ball(u, j, shift, &[c], &rho, &mut marked);
                }
            }
            _ => {
                for idx in t_layer(sys, irr, k) {
                    let p = sys.pair(idx);
                    let rho = pow_q(&p.radius, delta, Round::Up);
                    mark_ball(u, j, shift, &p.center.values(), &rho, &mut marked);
                }
            }
        }
    }
    Ok(marked.len() as u64)
}

/// Mark the generation-j subcubes of U meeting the closed L-infinity ball.
fn mark_ball(u: &DyadicCube, j: u32, shift: usize, c: &[Q], rho: &Q, marked: &mut HashSet<u128>) {
    let d = u.d as usize;
    let steps = BigInt::one() << shift;
    let mut ranges: Vec<(u128, u128)> = Vec::with_capacity(d);
    for t in 0..d {
        let base = &u.k[t] << shift;
        let a = &c[t] - rho;
        let b = &c[t] + rho;
        let scale = pow2(j as i64);
        // first cube [m 2^{-j}, (m+1) 2^{-j}) meeting [a, b]
        let mut m_min = (&a * &scale).floor().to_integer();
        if Q::new(&m_min + 1, BigInt::one() << (j as usize)) <= a {
            m_min += 1;
        }
        let m_max = (&b * &scale).floor().to_integer();
        let lo = m_min.max(base.clone());
        let hi = m_max.min(&base + &steps - BigInt::one());
        if lo > hi {
            return;
        }
        let off_lo = (&lo - &base).to_u128().unwrap();
        let off_hi = (&hi - &base).to_u128().unwrap();
        ranges.push((off_lo, off_hi));
    }
    // cartesian product of per-axis offset ranges, linearized base-2^shift
    let mut idx = vec![0u128; d];
    for t in 0..d {
        idx[t] = ranges[t].0;
    }
    loop {
        let mut lin: u128 = 0;
        for t in 0..d {
            lin = (lin << shift) | idx[t];
        }
        marked.insert(lin);
        // increment the multi-index
        let mut t = d;
        loop {
            if t == 0 {
                return;
            }
            t -= 1;
            if idx[t] < ranges[t].1 {
                idx[t] += 1;
                for s in (t + 1)..d {
                    idx[s] = ranges[s].0;
                }
                break;
            }
            if t == 0 {
                return;
            }
            idx[t] = ranges[t].0;
        }
    }
}

// ---------------------------------------------------------------------------
// closed-form systems (no truncation)
// ---------------------------------------------------------------------------

/// The two closed-form center/radius stores extended to all depths: every
/// reduced p/q in [0, 1) with radius 1/q^2, or every irreducible dyadic grid
/// point k 2^{-i} with radius 2^{-i-5}. Nested-cube constructions need
/// windows far below any finite truncation, and both stores answer window
/// queries exactly at any depth through the same Farey/grid walks as the
/// truncated backends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosedSystem {
    Rational,
    Dyadic { d: u32 },
}

impl ClosedSystem {
    pub fn d(&self) -> u32 {
        match self {
            ClosedSystem::Rational => 1,
            ClosedSystem::Dyadic { d } => *d,
        }
    }

    pub fn p_params(&self) -> PCheckParams {
        match self {
            ClosedSystem::Rational => PCheckParams::default(),
            ClosedSystem::Dyadic { .. } => dyadic_p_params(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ClosedSystem::Rational => "rational",
            ClosedSystem::Dyadic { .. } => "dyadic",
        }
    }
}

/// check_p against a closed-form store; no truncation floor exists, so the
/// scanned window is always fully covered.
pub fn check_p_closed(
    v: &DyadicCube,
    delta: f64,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    params: PCheckParams,
) -> Result<(bool, Option<PWitness>)> {
    assert!(delta > 1.0);
    let g = v.g();
    let w_lo = if g == 0 {
        0
    } else {
        gamma(profile, phi, g).gamma
    };
    let w_hi = (delta * (g as f64 + 1.0)).floor() as u32 + params.window_slack;
    let cands = match sys {
        ClosedSystem::Rational => rational_witnesses(v, params.witness_slack, None)?,
        ClosedSystem::Dyadic { .. } => dyadic_witnesses(v, params.witness_slack, None),
    };
    for (center, radius) in cands {
        let rho = pow_q(&radius, delta, Round::Up);
        let vals = center.values();
        let hit = match sys {
            ClosedSystem::Rational => rational_violator(None, &vals[0], &rho, w_lo, w_hi)?,
            ClosedSystem::Dyadic { .. } => dyadic_violator(None, &vals, &rho, w_lo, w_hi),
        };
        if !hit {
            return Ok((
                true,
                Some(PWitness {
                    cube: v.clone(),
                    center,
                    radius,
                    delta,
                    window: (w_lo, w_hi),
                }),
            ));
        }
    }
    Ok((false, None))
}

/// count_q against a closed-form store.
pub fn count_q_closed(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    params: PCheckParams,
) -> Result<QCount> {
    assert!(j >= u.g());
    let cubes = u.cubes_within(j);
    let total = cubes.len() as u64;
    let mut members = Vec::new();
    let mut witnesses = Vec::new();
    for v in cubes {
        let (ok, w) = check_p_closed(&v, delta, sys, profile, phi, params)?;
        if ok {
            members.push(v);
            witnesses.push(w.unwrap());
        }
    }
    Ok(QCount {
        count: members.len() as u64,
        total,
        members,
        witnesses,
    })
}

/// Linear offset of a generation-j subcube of U in the encoding used by the
/// Q-tilde marking (base 2^{j-g(U)} per axis).
pub fn cube_window_offset(u: &DyadicCube, v: &DyadicCube) -> u128 {
    let shift = (v.g() - u.g()) as usize;
    let mut lin: u128 = 0;
    for t in 0..u.d as usize {
        let base = &u.k[t] << shift;
        let off = (&v.k[t] - &base).to_u128().expect("subcube offset fits");
        lin = (lin << shift) | off;
    }
    lin
}

/// The marked offsets of generation-j subcubes of U meeting some contracted
/// ball B(y_p, r_p^delta) over the layers g(U)..gamma(j), against a
/// closed-form store.
pub fn qtilde_marks_closed(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
) -> Result<HashSet<u128>> {
    assert!(j >= u.g() && j >= 1);
    let g = u.g();
    let gam = gamma(profile, phi, j).gamma;
    let mut marked: HashSet<u128> = HashSet::new();
    if gam < g {
        return Ok(marked);
    }
    let shift = (j - g) as usize;
    for k in g..=gam {
        match sys {
            ClosedSystem::Rational => {
                let (qlo, qhi) = crate::numeric::layer_denoms(k);
                if qlo > qhi {
                    continue;
                }
                let infl = pow_q(&pow2(-(k as i64)), delta, Round::Up);
                let lo = u.lo(0) - &infl;
                let hi = u.hi(0) + &infl;
                let mut centers: Vec<Q> = Vec::new();
                for_each_fraction_in(&lo, &hi, true, &qhi, 50_000_000, &mut |f| {
                    if *f.denom() >= qlo && !f.is_one() {
                        centers.push(f.clone());
                    }
                    false
                })?;
                for c in centers {
                    let r = Q::new(BigInt::one(), c.denom() * c.denom());
                    let rho = pow_q(&r, delta, Round::Up);
                    mark_ball(u, j, shift, &[c], &rho, &mut marked);
                }
            }
            ClosedSystem::Dyadic { d } => {
                let i = k as i64 - 5;
                if i < 1 {
                    continue;
                }
                let i = i as u32;
                let rho = pow_q(&pow2(-(i as i64) - 5), delta, Round::Up);
                let axes: Vec<Vec<BigInt>> = (0..d as usize)
                    .map(|t| grid_points_in(&(u.lo(t) - &rho), &(u.hi(t) + &rho), true, i))
                    .collect();
                let mut combo = vec![BigInt::zero(); d as usize];
                let mut centers: Vec<Vec<Q>> = Vec::new();
                collect_grid_combos(&axes, 0, &mut combo, &mut |ks| {
                    let irreducible = i == 1 || ks.iter().any(|m| m.is_odd());
                    if irreducible {
                        centers.push(
                            ks.iter()
                                .map(|m| Q::new(m.clone(), BigInt::one() << (i as usize)))
                                .collect(),
                        );
                    }
                });
                for c in centers {
                    mark_ball(u, j, shift, &c, &rho, &mut marked);
                }
            }
        }
    }
    Ok(marked)
}

pub fn count_qtilde_closed(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
) -> Result<u64> {
    Ok(qtilde_marks_closed(u, j, delta, sys, profile, phi)?.len() as u64)
}

/// First closed-form center (other than `exclude`) whose ball of radius
/// r_p^expo * 2^shift_log2 meets the cube V, over system layers
/// k_lo..=k_hi (radius r_p in (2^{-k-1}, 2^{-k}]). Exact per-candidate test;
/// returns the center and its system radius.
pub fn closed_ball_hit(
    sys: ClosedSystem,
    v: &DyadicCube,
    k_lo: u32,
    k_hi: u32,
    expo: f64,
    shift_log2: i64,
    exclude: Option<&[Q]>,
) -> Result<Option<(Vec<Q>, Q)>> {
    if k_lo > k_hi {
        return Ok(None);
    }
    let scale = pow2(shift_log2);
    match sys {
        ClosedSystem::Rational => {
            let vlo = ceil_sqrt_pow2(k_lo);
            let n = floor_sqrt_pow2_minus1(k_hi + 1);
            if vlo > n {
                return Ok(None);
            }
            // one walk over V inflated by the coarsest layer's ball covers
            // every layer in the band; the exact per-candidate test filters
            let infl = pow_q(&pow2(-(k_lo as i64)), expo, Round::Up) * &scale;
            let lo = v.lo(0) - &infl;
            let hi = v.hi(0) + &infl;
            let mut found: Option<(Vec<Q>, Q)> = None;
            for_each_fraction_in(&lo, &hi, true, &n, 1_000_000, &mut |f| {
                if *f.denom() < vlo || f.is_one() {
                    return false;
                }
                if let Some(ex) = exclude {
                    if ex[0] == *f {
                        return false;
                    }
                }
                let r = Q::new(BigInt::one(), f.denom() * f.denom());
                let rho = pow_q(&r, expo, Round::Up) * &scale;
                if f + &rho >= v.lo(0) && f - &rho < v.hi(0) {
                    found = Some((vec![f.clone()], r));
                    return true;
                }
                false
            })?;
            Ok(found)
        }
        ClosedSystem::Dyadic { d } => {
            for k in k_lo..=k_hi {
                let i = k as i64 - 5;
                if i < 1 {
                    continue;
                }
                let i = i as u32;
                let r = pow2(-(i as i64) - 5);
                let rho = pow_q(&r, expo, Round::Up) * &scale;
                let axes: Vec<Vec<BigInt>> = (0..d as usize)
                    .map(|t| grid_points_in(&(v.lo(t) - &rho), &(v.hi(t) + &rho), true, i))
                    .collect();
                let mut combo = vec![BigInt::zero(); d as usize];
                let mut found: Option<Vec<Q>> = None;
                collect_grid_combos(&axes, 0, &mut combo, &mut |ks| {
                    if found.is_some() {
                        return;
                    }
                    let irreducible = i == 1 || ks.iter().any(|m| m.is_odd());
                    if !irreducible {
                        return;
                    }
                    let c: Vec<Q> = ks
                        .iter()
                        .map(|m| Q::new(m.clone(), BigInt::one() << (i as usize)))
                        .collect();
                    if let Some(ex) = exclude {
                        if c == ex {
                            return;
                        }
                    }
                    let meets = (0..d as usize)
                        .all(|t| &c[t] + &rho >= v.lo(t) && &c[t] - &rho < v.hi(t));
                    if meets {
                        found = Some(c);
                    }
                });
                if let Some(c) = found {
                    return Ok(Some((c, r)));
                }
            }
            Ok(None)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lemma1Report {
    pub qtilde: u64,
    /// #Qtilde / 2^{d(j - g)}
    pub lhs: f64,
    /// 2^{-d j phi(2^{-j})}
    pub term1: f64,
    /// sum over g(U) <= k <= j/delta of 2^{-d k (delta - 1 - psi(2^{-k}))}
    pub term2: f64,
}

/// The covering-decay bound on the proportion of contaminated subcubes.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_check(
    u: &DyadicCube,
    j: u32,
    delta: f64,
    sys: &System,
    irr: &IrreducibleSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
) -> Result<Lemma1Report> {
    let qtilde = count_qtilde(u, j, delta, sys, irr, profile, phi)?;
    let d = sys.d as f64;
    let g = u.g();
    let lhs = qtilde as f64 / 2f64.powf(d * (j - g) as f64);
    let term1 = 2f64.powf(-d * j as f64 * phi.eval_scale(j as f64));
    let k_hi = (j as f64 / delta).floor() as u32;
    let mut term2 = 0.0;
    for k in g.max(1)..=k_hi.max(g.max(1)) {
        if k > k_hi {
            break;
        }
        let psi = profile.psi(k);
        term2 += 2f64.powf(-d * k as f64 * (delta - 1.0 - psi));
    }
    Ok(Lemma1Report {
        qtilde,
        lhs,
        term1,
        term2,
    })
}

#[derive(Clone, Debug)]
pub struct C2Row {
    pub j: u32,
    pub q: u64,
    pub qtilde: u64,
    pub kappa_hat: f64,
}

#[derive(Clone, Debug)]
pub struct C2Report {
    pub u: DyadicCube,
    pub delta: f64,
    pub rows: Vec<C2Row>,
    pub note: String,
}

/// Q / Q-tilde sweep over a generation range.
#[allow(clippy::too_many_arguments)]
pub fn c2_sweep(
    u: &DyadicCube,
    delta: f64,
    j_lo: u32,
    j_hi: u32,
    sys: &System,
    irr: &IrreducibleSystem,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    params: PCheckParams,
) -> Result<C2Report> {
    let mut rows = Vec::new();
    for j in j_lo..=j_hi {
        let qc = count_q(u, j, delta, sys, irr, profile, phi, params)?;
        let qt = count_qtilde(u, j, delta, sys, irr, profile, phi)?;
        rows.push(C2Row {
            j,
            q: qc.count,
            qtilde: qt,
            kappa_hat: qc.kappa_hat(),
        });
    }
    let note = format!(
        "truncation floor -log2 r = {:.1}",
        -crate::numeric::log2q(&sys.min_radius())
    );
    Ok(C2Report {
        u: u.clone(),
        delta,
        rows,
        note,
    })
}

// ---------------------------------------------------------------------------
// three-distance theorem
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GapReport {
    /// the N+1 gap lengths, left to right
    pub gaps: Vec<Q>,
    /// distinct exact gap values, ascending
    pub distinct: Vec<Q>,
    pub max_gap: Q,
    /// distinct classes after clustering at tolerance 2^{-40}
    pub clustered: usize,
}

/// Gaps of {alpha}, {2 alpha}, ..., {N alpha} in [0, 1] with 0 and 1 as
/// boundaries. alpha is replaced by its deepest convergent p/q, which is
/// exact as long as q is much larger than N: the rational surrogate obeys
/// the three-length structure exactly for N < q, and its gaps differ from
/// the true ones by less than 2N/q.
pub fn three_distance(alpha: &ContinuedFraction, n: u64) -> Result<GapReport> {
    assert!(n >= 1);
    let (p, q) = alpha.last_convergent();
    // clustering tolerance 2^{-40} needs 2N/q <= 2^{-41}
    if &BigInt::from(n) * (BigInt::one() << 42usize) > q {
        return Err(LabError::InsufficientPrecision(format!(
            "convergent denominator {q} too small for N={n}"
        )));
    }
    let pm = p.mod_floor(&q);
    let mut residues: Vec<BigInt> = Vec::with_capacity(n as usize);
    let mut acc = BigInt::zero();
    for _ in 0..n {
        acc += &pm;
        if acc >= q {
            acc -= &q;
        }
        residues.push(acc.clone());
    }
    residues.sort_unstable();
    let mut gaps = Vec::with_capacity(n as usize + 1);
    let mut prev = BigInt::zero();
    for r in &residues {
        gaps.push(Q::new(r - &prev, q.clone()));
        prev = r.clone();
    }
    gaps.push(Q::new(&q - &prev, q.clone()));
    let mut sorted = gaps.clone();
    sorted.sort();
    let mut distinct: Vec<Q> = Vec::new();
    for gp in &sorted {
        if distinct.last() != Some(gp) {
            distinct.push(gp.clone());
        }
    }
    let tol = pow2(-40);
    let mut clustered = 0usize;
    let mut last: Option<Q> = None;
    for gp in &sorted {
        if match &last {
            None => true,
            Some(l) => gp - l > tol,
        } {
            clustered += 1;
        }
        last = Some(gp.clone());
    }
    let max_gap = sorted.last().unwrap().clone();
    Ok(GapReport {
        gaps,
        distinct,
        max_gap,
        clustered,
    })
}

// ---------------------------------------------------------------------------
// Poisson probability floor (Monte Carlo)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PoissonMcReport {
    /// estimate of the per-cube event probability p_j(delta)
    pub estimate: f64,
    pub ci95: (f64, f64),
    /// analytic floor exp(-1 - 16 * 2^delta), plus its log for the regimes
    /// where it underflows
    pub kappa1: f64,
    pub kappa1_log: f64,
    /// frequency of exactly one strip point (target e^{-1})
    pub n1_freq: f64,
    pub mean_n: f64,
    pub var_n: f64,
    pub trials: u64,
}

/// Per-trial simulation of the event for one generation-j cube V: exactly
/// one point (X1, Y1) in the strip V x (2^{-j-1}, 2^{-j}], and no point of
/// the surrounding strip V x [2^{-h}, 2^{-gamma}] inside B(X1, Y1^delta).
/// Instead of sampling the surrounding strip (whose no-collision event is
/// far too rare to observe), each trial contributes the conditional
/// no-collision probability exp(-lambda) given Y1, with the collision mass
/// taken for the full ball width 2 Y1^delta. That is a conservative bound on
/// the conditional probability (the true mass uses the ball clipped to V,
/// which is smaller when X1 sits within Y1^delta of the cube edge), so the
/// estimate is a lower bound on the event probability; unlike the exact
/// edge-dependent value it does not pick up a 2^{-j} boundary term, which is
/// what makes the estimate comparable across generations.
pub fn poisson_c2_mc(delta: f64, j: u32, trials: u64, seed: u64) -> PoissonMcReport {
    assert!(delta > 1.0 && trials >= 100);
    let profile = RedundancyProfile::constant(1, 1);
    let phi = crate::geometry::default_gauge();
    let gam = gamma(&profile, &phi, j).gamma;
    let h = (delta * (j as f64 + 1.0)).floor() + 4.0;
    // surrounding-strip intensity per unit of normalized length:
    // l_tilde = 2^{h-j} - 1 - 2^{gamma-j}
    let l_tilde = 2f64.powf(h - j as f64) - 1.0 - 2f64.powf(gam as f64 - j as f64);
    let side = 2f64.powi(-(j as i32));
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut n_ones = 0u64;
    let mut n_sum = 0.0f64;
    let mut n_sq = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t);
        let n_v = crate::systems::sample_poisson(&mut rng, 1.0);
        n_sum += n_v as f64;
        n_sq += (n_v * n_v) as f64;
        let mut contrib = 0.0;
        if n_v == 1 {
            n_ones += 1;
            let u2: f64 = rand::Rng::gen(&mut rng);
            // inverse CDF of y on (2^{-j-1}, 2^{-j}] under dy/y^2
            let y1 = side / (2.0 - u2);
            let rho = y1.powf(delta);
            let lambda = l_tilde * (2.0 * rho / side);
            contrib = (-lambda).exp();
        }
        sum += contrib;
        sum_sq += contrib * contrib;
    }
    let nt = trials as f64;
    let estimate = sum / nt;
    let var = (sum_sq / nt - estimate * estimate).max(0.0);
    let half = 1.96 * (var / nt).sqrt();
    let mean_n = n_sum / nt;
    let kappa1_log = -1.0 - 16.0 * 2f64.powf(delta);
    PoissonMcReport {
        estimate,
        ci95: (estimate - half, estimate + half),
        kappa1: kappa1_log.exp(),
        kappa1_log,
        n1_freq: n_ones as f64 / nt,
        mean_n,
        var_n: n_sq / nt - mean_n * mean_n,
        trials,
    }
}
