//! Nested Cantor construction with mass: seed cube selection, split-level
//! search, annulus-contracted descendants, and the measure-scaling and
//! dimension-certificate checks on the finished tree.
//!
//! Every geometric assertion (nesting, separation, the rate sandwich on the
//! contracted child, avoidance of foreign system balls) is re-checked with
//! exact rational arithmetic at build time; nothing is assumed from the
//! admission inequalities alone.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{One, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditions::{
    closed_ball_hit, count_q_closed, cube_window_offset, qtilde_marks_closed, ClosedSystem,
    PCheckParams, PWitness,
};
use crate::errors::{LabError, Result};
use crate::geometry::{
    cube_at, gamma, largest_interval_within, linf_dist, DyadicCube, GaugeFunction,
    RedundancyProfile,
};
use crate::numeric::{log2q, pow2, pow_q, q_to_str, Q, Round};
use crate::rates::{FSpec, RateBundle};

// ---------------------------------------------------------------------------
// regions and parameters
// ---------------------------------------------------------------------------

/// Axis-aligned box with rational corners, the search domain for seeds.
#[derive(Clone, Debug)]
pub struct Region {
    pub lo: Vec<Q>,
    pub hi: Vec<Q>,
}

impl Region {
    pub fn new(lo: Vec<Q>, hi: Vec<Q>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b));
        Region { lo, hi }
    }

    pub fn interval(lo: Q, hi: Q) -> Self {
        Region::new(vec![lo], vec![hi])
    }

    pub fn unit(d: u32) -> Self {
        Region::new(
            vec![Q::zero(); d as usize],
            vec![Q::one(); d as usize],
        )
    }

    pub fn d(&self) -> u32 {
        self.lo.len() as u32
    }

    pub fn center(&self) -> Vec<Q> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (a + b) / crate::numeric::qi(2))
            .collect()
    }

    pub fn contains_cube(&self, c: &DyadicCube) -> bool {
        (0..self.lo.len()).all(|t| c.lo(t) >= self.lo[t] && c.hi(t) <= self.hi[t])
    }

    fn widest(&self) -> Q {
        (0..self.lo.len())
            .map(|t| &self.hi[t] - &self.lo[t])
            .max()
            .unwrap()
    }

    fn split(&self) -> (Region, Region) {
        let t = (0..self.lo.len())
            .max_by(|&a, &b| {
                (&self.hi[a] - &self.lo[a])
                    .cmp(&(&self.hi[b] - &self.lo[b]))
            })
            .unwrap();
        let mid = (&self.lo[t] + &self.hi[t]) / crate::numeric::qi(2);
        let mut a = self.clone();
        let mut b = self.clone();
        a.hi[t] = mid.clone();
        b.lo[t] = mid;
        (a, b)
    }
}

/// Knobs of the tree construction. kappa = 2^{-kappa_pow}, so the selection
/// divisor 2^{d+1}/kappa stays a power of two and child masses stay dyadic
/// multiples of the parent mass.
#[derive(Clone, Debug)]
pub struct TreeParams {
    pub gauge: GaugeFunction,
    pub kappa_pow: u32,
    /// split-level search window: j in [g(U) + t_min, g(U) + t_max]
    pub t_min: u32,
    pub t_max: u32,
    /// hard cap on the seed cube generation
    pub g0_cap: u32,
    /// gate on the asymptotic power budgets instead of recording them
    pub strict: bool,
    pub check: PCheckParams,
}

impl TreeParams {
    pub fn for_system(sys: ClosedSystem) -> Self {
        match sys {
            ClosedSystem::Rational => TreeParams {
                gauge: GaugeFunction::inv_sqrt_log(0.42),
                kappa_pow: 2,
                t_min: 6,
                t_max: 12,
                g0_cap: 220,
                strict: false,
                check: PCheckParams::default(),
            },
            ClosedSystem::Dyadic { .. } => TreeParams {
                gauge: GaugeFunction::inv_sqrt_log(0.42),
                kappa_pow: 1,
                t_min: 4,
                t_max: 12,
                g0_cap: 64,
                strict: false,
                check: crate::conditions::dyadic_p_params(),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// seed selection
// ---------------------------------------------------------------------------

/// The localized setup around the near-minimizer of the rate target: the
/// certified infimum, the point y_eps, the band cube Omega_eps, the seed cube
/// U_0, and the constants every later check is measured against.
#[derive(Clone, Debug)]
pub struct SeedRegion {
    pub d: u32,
    pub eps: f64,
    pub y_eps: Vec<Q>,
    pub omega_eps: Region,
    pub u0: DyadicCube,
    /// certified lower bound for inf f on the working region
    pub inf_f: f64,
    pub f_y_eps: f64,
    /// h = d / inf f
    pub h: f64,
    /// ceiling for every split exponent delta(U) in the tree
    pub h_cap: f64,
    /// dimension certificate target (h - eps) / (1 + eps (2d/h^2 + 1)/f(y))
    pub h_eps: f64,
    /// recorded floor for delta(U) - 3 d phi(|U|) > 1
    pub alpha: f64,
    pub notes: Vec<String>,
}

/// Certified bracket of inf f over the region by branch-and-bound bisection;
/// returns (lower bound, upper bound, box attaining the upper bound).
fn refine_min(
    f: &RateBundle,
    omega: &Region,
    tol: f64,
    width_floor_log2: i64,
) -> Result<(f64, f64, Region)> {
    let floor_w = pow2(width_floor_log2);
    let mut boxes: Vec<(Region, f64, f64)> = Vec::new();
    let b = f.bounds(&omega.lo[0], &omega.hi[0])?;
    boxes.push((omega.clone(), b.0, b.1));
    for _ in 0..20_000 {
        let best_ub = boxes.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
        let (bi, _) = boxes
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
            .unwrap();
        let global_lb = boxes[bi].1;
        if best_ub - global_lb <= tol {
            break;
        }
        if boxes[bi].0.widest() < floor_w {
            return Err(LabError::NoSeed(format!(
                "infimum bracket stuck at [{global_lb:.6}, {best_ub:.6}] at width floor 2^{width_floor_log2}"
            )));
        }
        let (r1, r2) = boxes[bi].0.split();
        let b1 = f.bounds(&r1.lo[0], &r1.hi[0])?;
        let b2 = f.bounds(&r2.lo[0], &r2.hi[0])?;
        boxes.swap_remove(bi);
        boxes.push((r1, b1.0, b1.1));
        boxes.push((r2, b2.0, b2.1));
        let cut = boxes.iter().map(|x| x.2).fold(f64::INFINITY, f64::min) + tol;
        boxes.retain(|x| x.1 <= cut);
    }
    let global_lb = boxes.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let best = boxes
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .unwrap();
    Ok((global_lb, best.2, best.0.clone()))
}

/// When inf f = 1 the localized statement is vacuous at the minimizer; find
/// a sub-box with certified f-range inside (1 + eps/2, 1 + 7eps/8) and work
/// there instead. The band sits in the upper half of (1, 1 + eps) because
/// the contraction floor needs f - 1 to dominate the gauge at reachable
/// generations.
fn shrink_above_one(f: &RateBundle, omega: &Region, eps: f64) -> Result<Region> {
    let band_lo = 1.0 + eps / 2.0;
    let band_hi = 1.0 + 0.875 * eps;
    let mut boxes = vec![omega.clone()];
    for _ in 0..48 {
        let mut next: Vec<Region> = Vec::new();
        for b in &boxes {
            let (r1, r2) = b.split();
            for r in [r1, r2] {
                let (lb, ub) = f.bounds(&r.lo[0], &r.hi[0])?;
                if lb > band_lo && ub < band_hi {
                    return Ok(r);
                }
                // keep only boxes that still straddle the target band
                if lb < band_hi && ub > band_lo {
                    next.push(r);
                }
            }
        }
        if next.is_empty() || next.len() > 4096 {
            break;
        }
        boxes = next;
    }
    Err(LabError::NoSeed(format!(
        "no sub-box with rate certified inside ({band_lo:.3}, {band_hi:.3})"
    )))
}

/// Locate y_eps, Omega_eps and the seed cube U_0. Every "small enough"
/// threshold of the construction becomes an explicit gate here; when no
/// generation up to the cap passes all gates this is a hard NoSeed with the
/// tightest cube and the blocking gates named.
pub fn seed_region(
    f: &RateBundle,
    omega: &Region,
    eps: f64,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    params: &TreeParams,
) -> Result<SeedRegion> {
    assert!(eps > 0.0 && eps < 1.0);
    let d = sys.d();
    assert_eq!(omega.d(), d);
    if d > 1 && !matches!(f.spec, FSpec::Const(_)) {
        return Err(LabError::Config(
            "non-constant rate targets are one-dimensional".into(),
        ));
    }
    let df = d as f64;
    let phi = &params.gauge;
    let width_floor = -(params.g0_cap as i64 + 8);
    let mut notes: Vec<String> = Vec::new();

    let (mut lb, mut ub, mut best) = refine_min(f, omega, eps / 4.0, width_floor)?;
    if lb <= 1.0 + 1e-9 {
        let shr = shrink_above_one(f, omega, eps)?;
        notes.push(format!(
            "infimum 1 on the full region; shrunk to [{}, {}]",
            q_to_str(&shr.lo[0]),
            q_to_str(&shr.hi[0])
        ));
        let r = refine_min(f, &shr, eps / 4.0, width_floor)?;
        lb = r.0;
        ub = r.1;
        best = r.2;
    }
    let inf_f = lb;
    let h = df / inf_f;
    if eps >= h {
        return Err(LabError::NoSeed(format!("eps {eps} >= h {h:.4}")));
    }
    // y_eps: center of the box attaining the upper bracket; certified
    // d/f(y_eps) in [h - eps/2, h] once the box's sup clears the ceiling
    let y_ceiling = df / (h - eps / 2.0);
    let mut guard = 0u32;
    while ub > y_ceiling {
        let (r1, r2) = best.split();
        let b1 = f.bounds(&r1.lo[0], &r1.hi[0])?;
        let b2 = f.bounds(&r2.lo[0], &r2.hi[0])?;
        if b1.0 <= b2.0 {
            best = r1;
            ub = b1.1;
        } else {
            best = r2;
            ub = b2.1;
        }
        guard += 1;
        if guard > 4 * params.g0_cap {
            return Err(LabError::NoSeed(format!(
                "cannot certify f(y_eps) <= {y_ceiling:.6} near the minimizer"
            )));
        }
    }
    // Anchor y_eps at the golden-section point of the certified box, not its
    // center. The box center is often a low-denominator rational (1/2, 1/5,
    // ...) and the seed cube around such a point falls inside its Farey gap:
    // any other fraction p/q with q <= Q is at distance >= 1/(q0 Q), which
    // dwarfs the cube side once the seed generation is moderate, so no
    // subcube would ever hold a witness. A golden-section point inherits the
    // badly-approximable gap structure of the golden ratio. The convergent
    // must be deep enough that its own denominator (~2^166 at depth 240)
    // exceeds every reachable seed scale, or its gap starves the cube the
    // same way.
    let golden = crate::rates::golden_cf(240).value();
    let y_eps: Vec<Q> = (0..d as usize)
        .map(|i| &best.lo[i] + (&best.hi[i] - &best.lo[i]) * &golden)
        .collect();
    let f_y_eps = f.eval(&y_eps[0])?;
    let omega_eps = best.clone();
    let h_cap = f_y_eps + eps * (2.0 * df / (h * h) + 1.0);
    let h_eps = (h - eps) / (1.0 + eps * (2.0 * df / (h * h) + 1.0) / f_y_eps);
    let c_k = (d + 1 + params.kappa_pow) as f64;

    let mut tightest: Option<(u32, Vec<&'static str>)> = None;
    for g in 1..=params.g0_cap {
        let u0 = cube_at(&y_eps, g)?;
        if !omega_eps.contains_cube(&u0) {
            continue;
        }
        let (flb, fub) = f.bounds(&u0.lo(0), &u0.hi(0))?;
        let pg = phi.eval_scale(g as f64);
        let ps = profile.psi(g);
        let mut why: Vec<&'static str> = Vec::new();
        // the root split must afford the selection divisor 2^{d+1}/kappa
        if df * g as f64 * pg + 1e-9 < c_k {
            why.push("root kappa budget");
        }
        // every split exponent in the subtree stays below the ceiling
        if fub + 2.0 * df * (pg + ps) > h_cap + 1e-12 {
            why.push("delta ceiling");
        }
        // contraction floor: delta(U) - 3 d phi stays above some alpha > 1
        // down the whole depth range (probed at doubling generations)
        let mut margin = f64::INFINITY;
        for k in 0..=6u32 {
            let gk = (g as u64) << k;
            let m = flb + 2.0 * df * profile.psi(gk.min(u32::MAX as u64) as u32)
                - df * phi.eval_scale(gk as f64)
                - 1.0;
            margin = margin.min(m);
        }
        if margin <= 1e-6 {
            why.push("contraction floor");
        }
        if params.strict && 3.0 * df * (pg + ps) > eps {
            why.push("strict slot budget");
        }
        if why.is_empty() {
            return Ok(SeedRegion {
                d,
                eps,
                y_eps,
                omega_eps,
                u0,
                inf_f,
                f_y_eps,
                h,
                h_cap,
                h_eps,
                alpha: 1.0 + margin / 2.0,
                notes,
            });
        }
        tightest = Some((g, why));
    }
    let detail = match tightest {
        Some((g, why)) => format!("tightest cube at generation {g}, blocked by: {}", why.join(", ")),
        None => "no cube around y_eps fits inside Omega_eps".into(),
    };
    Err(LabError::NoSeed(format!(
        "no admissible seed up to generation {}; {}",
        params.g0_cap, detail
    )))
}

// ---------------------------------------------------------------------------
// split exponent and level search
// ---------------------------------------------------------------------------

/// delta(U) = f(x(U)) + 2d(phi + psi)(|U|), the midpoint of the admissible
/// band. Hard errors when the band breaks the recorded contraction floor or
/// the seed ceiling.
pub fn delta_of_cube(
    u: &DyadicCube,
    f: &RateBundle,
    profile: &RedundancyProfile,
    phi: &GaugeFunction,
    seed: &SeedRegion,
) -> Result<f64> {
    let df = seed.d as f64;
    let g = u.g();
    let c = u.center();
    let fv = f.eval(&c[0])?;
    let pg = phi.eval_scale(g as f64);
    let ps = profile.psi(g);
    let delta = fv + 2.0 * df * (pg + ps);
    if delta - 3.0 * df * pg < seed.alpha - 1e-12 {
        return Err(LabError::BandViolation(format!(
            "{u}: delta {delta:.6} - 3d phi {:.6} below alpha {:.6}",
            3.0 * df * pg,
            seed.alpha
        )));
    }
    if delta > seed.h_cap + 1e-9 {
        return Err(LabError::BandViolation(format!(
            "{u}: delta {delta:.6} above ceiling {:.6}",
            seed.h_cap
        )));
    }
    Ok(delta)
}

/// ceil(2^{a-b}) for the power-of-two selection counts.
fn ceil_pow2_sub(a: u32, b: u32) -> u64 {
    if a >= b {
        1u64 << (a - b)
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct LevelSelection {
    pub j: u32,
    pub m: usize,
    pub q_count: u64,
    pub q_total: u64,
    pub qtilde_count: u64,
    pub selected: Vec<(DyadicCube, PWitness)>,
    pub notes: Vec<String>,
}

/// Smallest admissible split level j for the cube U with exponent delta and
/// mass mu(U). Admission requires, at desk scale:
///   - enough witnessed generation-j cubes after the contracted-ball discard
///     (at least (kappa/2) 2^{d(j-g)}),
///   - a greedy 2^{-j}-separated subfamily of the required size
///     (kappa/2^{d+1}) 2^{d(j-g)},
///   - the child-mass projection: mu(U)/m must not exceed the scaling bound
///     |V|^{d/delta - 3d phi(|V|)} at ANY child generation the annulus step
///     can produce.
/// The asymptotic power budgets (2^{d+1}/kappa and 2^{d g(U)} below
/// 2^{d j phi}) gate only in strict mode and are recorded otherwise.
pub fn find_level(
    u: &DyadicCube,
    delta: f64,
    mass: &Q,
    sys: ClosedSystem,
    profile: &RedundancyProfile,
    params: &TreeParams,
) -> Result<LevelSelection> {
    let d = sys.d();
    let df = d as f64;
    let g = u.g();
    let phi = &params.gauge;
    let c_k = (d + 1 + params.kappa_pow) as f64;
    let lm = log2q(mass);
    let t_start = if params.strict {
        params.t_min.max(g)
    } else {
        params.t_min
    };
    let mut last_reason = String::from("search window empty");
    for t in t_start..=params.t_max {
        let j = g + t;
        let dt = d * t;
        let need = ceil_pow2_sub(dt, params.kappa_pow + 1);
        let m = ceil_pow2_sub(dt, params.kappa_pow + d + 1);
        let pj = df * j as f64 * phi.eval_scale(j as f64);
        let budget_ok = c_k <= pj + 1e-9 && (d * g) as f64 <= pj + 1e-9;
        if params.strict && !budget_ok {
            last_reason = format!("power budget at j={j}: c_kappa {c_k} or dg {} vs {pj:.2}", d * g);
            continue;
        }
        let l_child = lm - (m as f64).log2();
        let gv_lo = (delta * j as f64).floor() as u32;
        let gv_hi = (delta * (j as f64 + 1.0)).floor() as u32 + 4;
        let rhs = (gv_lo..=gv_hi)
            .map(|gv| -(gv as f64) * (df / delta - 3.0 * df * phi.eval_scale(gv as f64)))
            .fold(f64::INFINITY, f64::min);
        if l_child > rhs + 1e-9 {
            last_reason = format!(
                "mass projection at j={j}: child log2 mass {l_child:.2} vs bound {rhs:.2}"
            );
            continue;
        }
        let qc = count_q_closed(u, j, delta, sys, profile, phi, params.check)?;
        let marks = qtilde_marks_closed(u, j, delta, sys, profile, phi)?;
        let avail: Vec<usize> = (0..qc.members.len())
            .filter(|&i| !marks.contains(&cube_window_offset(u, &qc.members[i])))
            .collect();
        if (avail.len() as u64) < need {
            last_reason = format!(
                "j={j}: {} witnessed cubes after discard, need {need}",
                avail.len()
            );
            continue;
        }
        let side = pow2(-(j as i64));
        let mut sel: Vec<usize> = Vec::new();
        for &i in &avail {
            if sel.len() == m as usize {
                break;
            }
            if sel
                .iter()
                .all(|&s| qc.members[s].distance(&qc.members[i]) >= side)
            {
                sel.push(i);
            }
        }
        if sel.len() < m as usize {
            last_reason = format!("j={j}: only {} separated cubes, need {m}", sel.len());
            continue;
        }
        let mut notes = Vec::new();
        if !budget_ok {
            notes.push(format!("power budget waived at j={j} (desk scale)"));
        }
        return Ok(LevelSelection {
            j,
            m: m as usize,
            q_count: qc.count,
            q_total: qc.total,
            qtilde_count: marks.len() as u64,
            selected: sel
                .into_iter()
                .map(|i| (qc.members[i].clone(), qc.witnesses[i].clone()))
                .collect(),
            notes,
        });
    }
    Err(LabError::LevelNotFound(format!(
        "cube {u}: no admissible level for j in [{}, {}]; last obstruction: {last_reason}",
        g + t_start,
        g + params.t_max
    )))
}

// ---------------------------------------------------------------------------
// annulus contraction
// ---------------------------------------------------------------------------

/// The shell B(x, r^delta) minus B(x, r^{delta + eps_slot}) with exact dyadic
/// bracketing radii: outer <= r^delta, inner >= r^{delta + eps_slot}, so any
/// cube placed between them sits inside the true annulus.
#[derive(Clone, Debug)]
pub struct AnnulusSpec {
    pub center: Vec<Q>,
    pub r: Q,
    pub delta: f64,
    pub eps_slot: f64,
    pub outer: Q,
    pub inner: Q,
}

impl AnnulusSpec {
    pub fn new(center: Vec<Q>, r: Q, delta: f64, eps_slot: f64) -> Result<Self> {
        assert!(delta > 1.0);
        assert!(eps_slot > 0.0);
        assert!(r > Q::zero() && r < Q::one());
        let outer = pow_q(&r, delta, Round::Down);
        let inner = pow_q(&r, delta + eps_slot, Round::Up);
        if inner >= outer {
            return Err(LabError::AnnulusTooThin(format!(
                "hole exponent {:.4} fills the shell at r = {}",
                delta + eps_slot,
                q_to_str(&r)
            )));
        }
        Ok(AnnulusSpec {
            center,
            r,
            delta,
            eps_slot,
            outer,
            inner,
        })
    }
}

fn cube_point_dist(c: &DyadicCube, x: &[Q]) -> Q {
    let mut best = Q::zero();
    for t in 0..c.d as usize {
        let a = (c.lo(t) - &x[t]).max(&x[t] - c.hi(t));
        if a > best {
            best = a;
        }
    }
    best
}

fn cube_corners(c: &DyadicCube) -> Vec<Vec<Q>> {
    let d = c.d as usize;
    (0..1usize << d)
        .map(|mask| {
            (0..d)
                .map(|t| if (mask >> t) & 1 == 1 { c.hi(t) } else { c.lo(t) })
                .collect()
        })
        .collect()
}

/// Largest dyadic cube with closure inside the box, its index per axis
/// steered toward the target point; None when no axis admits one.
fn largest_cube_in_box(lo: &[Q], hi: &[Q], toward: &[Q]) -> Option<DyadicCube> {
    let d = lo.len() as u32;
    let mut jmax = 0u32;
    for t in 0..lo.len() {
        let (j, _) = largest_interval_within(&lo[t], &hi[t])?;
        jmax = jmax.max(j);
    }
    let scale = pow2(jmax as i64);
    let top = (BigInt::one() << jmax as usize) - BigInt::one();
    let mut k = Vec::with_capacity(lo.len());
    for t in 0..lo.len() {
        let kmin = (lo[t].clone().max(Q::zero()) * &scale)
            .ceil()
            .to_integer()
            .max(BigInt::from(0));
        let kmax = ((hi[t].clone().min(Q::one()) * &scale) - Q::one())
            .floor()
            .to_integer()
            .min(top.clone());
        if kmin > kmax {
            return None;
        }
        let want = (&toward[t] * &scale).floor().to_integer();
        k.push(want.max(kmin).min(kmax));
    }
    Some(DyadicCube::new(d, jmax, k))
}

/// The contracted descendant V of the selected cube: the largest dyadic cube
/// in (one-sided slabs of) the annulus around the witness, intersected with
/// the selected cube, then the child of it closest to the witness center.
/// Exact post-checks: generation sandwich
/// floor(-log2 r^delta) <= g(V) <= floor(-log2 r^delta) + 4 and the rate
/// sandwich r^{delta + phi(2^{-j})} <= |corner - x| <= r^delta on every
/// corner of V.
pub fn contracted_descendant(
    vt: &DyadicCube,
    witness: &PWitness,
    phi: &GaugeFunction,
) -> Result<(DyadicCube, AnnulusSpec)> {
    let d = vt.d as usize;
    let j = vt.g();
    let slot = phi.eval_scale(j as f64);
    let x = witness.center.values();
    let ann = AnnulusSpec::new(x.clone(), witness.radius.clone(), witness.delta, slot)?;
    let base = (witness.delta * -log2q(&witness.radius) + 1e-9).floor() as u32;

    let mut best: Option<(DyadicCube, Q)> = None;
    for axis in 0..d {
        for sign in [1i32, -1] {
            let mut lo = Vec::with_capacity(d);
            let mut hi = Vec::with_capacity(d);
            for t in 0..d {
                if t == axis {
                    if sign > 0 {
                        lo.push(&x[t] + &ann.inner);
                        hi.push(&x[t] + &ann.outer);
                    } else {
                        lo.push(&x[t] - &ann.outer);
                        hi.push(&x[t] - &ann.inner);
                    }
                } else {
                    lo.push(&x[t] - &ann.outer);
                    hi.push(&x[t] + &ann.outer);
                }
            }
            let mut ok = true;
            for t in 0..d {
                if lo[t] < vt.lo(t) {
                    lo[t] = vt.lo(t);
                }
                if hi[t] > vt.hi(t) {
                    hi[t] = vt.hi(t);
                }
                if lo[t] >= hi[t] {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            if let Some(w) = largest_cube_in_box(&lo, &hi, &x) {
                let dist = cube_point_dist(&w, &x);
                let better = match &best {
                    None => true,
                    Some((bw, bd)) => {
                        w.g() < bw.g()
                            || (w.g() == bw.g()
                                && (dist < *bd || (dist == *bd && w.k < bw.k)))
                    }
                };
                if better {
                    best = Some((w, dist));
                }
            }
        }
    }
    let (w, _) = best.ok_or_else(|| {
        LabError::AnnulusTooThin(format!(
            "no dyadic cube fits in the shell [r^{:.4}, r^{:.4}] inside {vt}",
            witness.delta + slot,
            witness.delta
        ))
    })?;
    if w.g() > base + 3 {
        return Err(LabError::AnnulusTooThin(format!(
            "largest shell cube has generation {} > {} + 3",
            w.g(),
            base
        )));
    }
    let mut v: Option<DyadicCube> = None;
    let mut vd: Option<Q> = None;
    for ch in w.children() {
        let dist = cube_point_dist(&ch, &x);
        if vd.as_ref().map_or(true, |b| dist < *b) {
            v = Some(ch);
            vd = Some(dist);
        }
    }
    let v = v.unwrap();
    let gv = v.g();
    if gv < base || gv > base + 4 {
        return Err(LabError::AnnulusTooThin(format!(
            "contracted child generation {gv} outside [{base}, {}]",
            base + 4
        )));
    }
    for corner in cube_corners(&v) {
        let dist = linf_dist(&corner, &x);
        if dist < ann.inner || dist > ann.outer {
            return Err(LabError::PreconditionViolated(format!(
                "rate sandwich broken at a corner of {v}"
            )));
        }
    }
    Ok((v, ann))
}

// ---------------------------------------------------------------------------
// the tree
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CantorNode {
    pub cube: DyadicCube,
    /// index into the previous generation
    pub parent: Option<usize>,
    /// split exponent delta(U) of the parent at creation time
    pub delta_used: f64,
    pub witness: Option<PWitness>,
    /// the selected generation-j(U) cube this node was contracted inside
    pub intermediate: Option<DyadicCube>,
    /// exact mass, mu(parent) / #children
    pub mass: Q,
    /// delta of THIS cube, set once it is split
    pub delta: Option<f64>,
    /// split level j of this cube, set once it is split
    pub level_j: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct CantorTree {
    pub f: RateBundle,
    pub sys: ClosedSystem,
    pub profile: RedundancyProfile,
    pub params: TreeParams,
    pub seed: SeedRegion,
    pub eps: f64,
    pub generations: Vec<Vec<CantorNode>>,
    /// running sup of split exponents actually used
    pub delta_eps: f64,
    /// why growth stopped early, when it did
    pub stop: Option<String>,
}

impl CantorTree {
    pub fn new(
        f: RateBundle,
        omega: &Region,
        eps: f64,
        sys: ClosedSystem,
        profile: RedundancyProfile,
        params: TreeParams,
    ) -> Result<Self> {
        let seed = seed_region(&f, omega, eps, sys, &profile, &params)?;
        let root = CantorNode {
            cube: seed.u0.clone(),
            parent: None,
            delta_used: seed.f_y_eps,
            witness: None,
            intermediate: None,
            mass: Q::one(),
            delta: None,
            level_j: None,
        };
        let delta_eps = seed.f_y_eps;
        Ok(CantorTree {
            f,
            sys,
            profile,
            params,
            seed,
            eps,
            generations: vec![vec![root]],
            delta_eps,
            stop: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.generations.len() - 1
    }

    pub fn d(&self) -> u32 {
        self.sys.d()
    }

    /// One full construction step on the deepest generation. Splits every
    /// cube or fails; failures leave the tree unchanged.
    pub fn extend_generation(&mut self) -> Result<()> {
        let gen_idx = self.generations.len() - 1;
        let phi = self.params.gauge.clone();
        let cur = self.generations[gen_idx].clone();
        let mut next: Vec<CantorNode> = Vec::new();
        let mut meta: Vec<(f64, u32)> = Vec::new();
        for (idx, node) in cur.iter().enumerate() {
            let delta = delta_of_cube(&node.cube, &self.f, &self.profile, &phi, &self.seed)?;
            let level = find_level(
                &node.cube,
                delta,
                &node.mass,
                self.sys,
                &self.profile,
                &self.params,
            )?;
            let m = level.selected.len();
            let child_mass = &node.mass / crate::numeric::qi(m as i64);
            let gres = gamma(&self.profile, &phi, level.j);
            let avoid_expo = delta + gres.theta * self.seed.h_cap / 2.0;
            for (vt, w) in &level.selected {
                let (v, _ann) = contracted_descendant(vt, w, &phi)?;
                debug_assert!(vt.contains_cube(&v));
                // exact avoidance re-check of every system ball with radius
                // between the parent scale and the child scale
                if let Some((c, r)) = closed_ball_hit(
                    self.sys,
                    &v,
                    node.cube.g(),
                    v.g(),
                    avoid_expo,
                    -4,
                    Some(&w.center.values()),
                )? {
                    return Err(LabError::PreconditionViolated(format!(
                        "avoidance broken at {v}: center {} radius {} reaches it",
                        q_to_str(&c[0]),
                        q_to_str(&r)
                    )));
                }
                // the coarse-layer exclusion behind the contracted-ball
                // discard, re-checked on the child directly
                if gres.gamma >= node.cube.g() {
                    if let Some((c, r)) = closed_ball_hit(
                        self.sys,
                        &v,
                        node.cube.g(),
                        gres.gamma,
                        delta,
                        0,
                        Some(&w.center.values()),
                    )? {
                        return Err(LabError::PreconditionViolated(format!(
                            "contracted-ball discard broken at {v}: center {} radius {}",
                            q_to_str(&c[0]),
                            q_to_str(&r)
                        )));
                    }
                }
                next.push(CantorNode {
                    cube: v,
                    parent: Some(idx),
                    delta_used: delta,
                    witness: Some(w.clone()),
                    intermediate: Some(vt.clone()),
                    mass: child_mass.clone(),
                    delta: None,
                    level_j: None,
                });
            }
            meta.push((delta, level.j));
        }
        for (i, (delta, j)) in meta.iter().enumerate() {
            self.generations[gen_idx][i].delta = Some(*delta);
            self.generations[gen_idx][i].level_j = Some(*j);
            if *delta > self.delta_eps {
                self.delta_eps = *delta;
            }
        }
        self.generations.push(next);
        Ok(())
    }

    /// Extend until the target depth or the first obstruction; reports the
    /// depth actually reached and records why growth stopped.
    pub fn grow(&mut self, target_depth: usize) -> usize {
        while self.depth() < target_depth {
            match self.extend_generation() {
                Ok(()) => {}
                Err(e) => {
                    self.stop = Some(e.to_string());
                    break;
                }
            }
        }
        self.depth()
    }
}

// ---------------------------------------------------------------------------
// verification and certificates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub nodes_checked: usize,
    /// min over nodes of (scaling bound - log2 mass); >= 0 when the per-node
    /// inequality mu(V) <= |V|^{d/delta(U) - 3d phi(|V|)} holds everywhere
    pub worst_node_margin_log2: f64,
    pub ancestors_checked: usize,
    /// log2 of the measured global constant in
    /// mu(B) <= C' |B|^{d/delta_eps - 4d phi(|B|)}
    pub cprime_log2: f64,
    pub mass_total: Q,
}

/// Exact per-node scaling check plus the measured global constant over every
/// dyadic ancestor (generation <= gen_cap) of the deepest generation.
pub fn verify_scaling(tree: &CantorTree, gen_cap: u32) -> Result<ScalingReport> {
    let df = tree.sys.d() as f64;
    let phi = &tree.params.gauge;
    let mut worst = f64::INFINITY;
    let mut nodes = 0usize;
    let mut bad: Vec<String> = Vec::new();
    for gen in tree.generations.iter().skip(1) {
        for node in gen {
            let gv = node.cube.g() as f64;
            let rhs = -gv * (df / node.delta_used - 3.0 * df * phi.eval_scale(gv));
            let lhs = log2q(&node.mass);
            let margin = rhs - lhs;
            nodes += 1;
            if margin < worst {
                worst = margin;
            }
            if margin < -1e-9 {
                bad.push(format!(
                    "{}: log2 mass {:.4} above bound {:.4}",
                    node.cube, lhs, rhs
                ));
            }
        }
    }
    if !bad.is_empty() {
        return Err(LabError::ScalingViolation(bad.join("; ")));
    }
    let leaves = tree.generations.last().unwrap();
    let mass_total: Q = leaves.iter().map(|n| n.mass.clone()).fold(Q::zero(), |a, b| a + b);
    if tree.depth() >= 1 && mass_total != Q::one() {
        return Err(LabError::ScalingViolation(format!(
            "total leaf mass {} != 1",
            q_to_str(&mass_total)
        )));
    }
    let mut acc: BTreeMap<(u32, Vec<BigInt>), Q> = BTreeMap::new();
    for leaf in leaves {
        let gl = leaf.cube.g();
        for gb in 0..=gen_cap.min(gl) {
            let shift = (gl - gb) as usize;
            let key: Vec<BigInt> = leaf.cube.k.iter().map(|ki| ki >> shift).collect();
            let e = acc.entry((gb, key)).or_insert_with(Q::zero);
            *e += &leaf.mass;
        }
    }
    let de = tree.delta_eps;
    let mut cmax = f64::NEG_INFINITY;
    for ((gb, _), mu) in &acc {
        let gbe = (*gb).max(1) as f64;
        let x = df / de - 4.0 * df * phi.eval_scale(gbe);
        let v = log2q(mu) + (*gb as f64) * x;
        if v > cmax {
            cmax = v;
        }
    }
    Ok(ScalingReport {
        nodes_checked: nodes,
        worst_node_margin_log2: worst,
        ancestors_checked: acc.len(),
        cprime_log2: cmax,
        mass_total,
    })
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub eps: f64,
    pub h: f64,
    /// the dimension value the certificate claims
    pub h_eps: f64,
    pub delta_eps: f64,
    /// d / delta_eps, the mass-distribution floor the tree actually backs
    pub dim_floor: f64,
    /// min over deepest cubes of log mu(V) / log |V|
    pub min_local_exponent: f64,
    /// min over deepest cubes of local exponent - (d/delta_eps - 4d phi(|V|))
    pub exponent_floor_margin: f64,
    pub depth: usize,
    /// h_eps < d/delta_eps and the exponent floor holds on every deep cube
    pub consistent: bool,
}

pub fn dimension_certificate(tree: &CantorTree) -> Result<Certificate> {
    if tree.depth() < 1 {
        return Err(LabError::PreconditionViolated(
            "dimension certificate needs depth >= 1".into(),
        ));
    }
    let df = tree.sys.d() as f64;
    let de = tree.delta_eps;
    let phi = &tree.params.gauge;
    let leaves = tree.generations.last().unwrap();
    let mut min_local = f64::INFINITY;
    let mut margin = f64::INFINITY;
    for leaf in leaves {
        let gv = leaf.cube.g() as f64;
        let local = -log2q(&leaf.mass) / gv;
        let floor = df / de - 4.0 * df * phi.eval_scale(gv);
        min_local = min_local.min(local);
        margin = margin.min(local - floor);
    }
    let consistent = tree.seed.h_eps < df / de + 1e-9 && margin >= -1e-9;
    Ok(Certificate {
        eps: tree.eps,
        h: tree.seed.h,
        h_eps: tree.seed.h_eps,
        delta_eps: de,
        dim_floor: df / de,
        min_local_exponent: min_local,
        exponent_floor_margin: margin,
        depth: tree.depth(),
        consistent,
    })
}

#[derive(Clone, Debug)]
pub struct SamplePoint {
    pub point: Vec<Q>,
    pub f_value: f64,
    /// split exponents delta(U_n) along the branch, root first
    pub deltas: Vec<f64>,
}

/// Mass-proportional random descent to the deepest generation; deterministic
/// in the stream seed. Children of one parent carry equal mass, so the
/// descent is uniform among siblings.
pub fn sample_points(tree: &CantorTree, count: usize, seed: u64) -> Result<Vec<SamplePoint>> {
    if tree.depth() < 2 {
        return Err(LabError::PreconditionViolated(
            "sampling needs depth >= 2".into(),
        ));
    }
    let mut children: Vec<Vec<Vec<usize>>> = Vec::new();
    for gi in 0..tree.depth() {
        children.push(vec![Vec::new(); tree.generations[gi].len()]);
        for (ci, node) in tree.generations[gi + 1].iter().enumerate() {
            children[gi][node.parent.unwrap()].push(ci);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ni = 0usize;
        let mut deltas = Vec::with_capacity(tree.depth());
        for gi in 0..tree.depth() {
            deltas.push(tree.generations[gi][ni].delta.expect("split node"));
            let ch = &children[gi][ni];
            ni = ch[rng.gen_range(0..ch.len())];
        }
        let leaf = &tree.generations[tree.depth()][ni];
        let c = leaf.cube.center();
        out.push(SamplePoint {
            f_value: tree.f.eval(&c[0])?,
            point: c,
            deltas,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------

pub fn generation_csv(tree: &CantorTree) -> String {
    let mut s = String::from("generation,nodes,g_min,g_max,level_j,delta_split,mass_total\n");
    for (gi, gen) in tree.generations.iter().enumerate() {
        let g_min = gen.iter().map(|n| n.cube.g()).min().unwrap_or(0);
        let g_max = gen.iter().map(|n| n.cube.g()).max().unwrap_or(0);
        let lj = gen
            .iter()
            .filter_map(|n| n.level_j)
            .map(|j| j.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let ds = gen
            .iter()
            .filter_map(|n| n.delta)
            .map(|d| format!("{d:.6}"))
            .collect::<Vec<_>>()
            .join(" ");
        let mass: Q = gen.iter().map(|n| n.mass.clone()).fold(Q::zero(), |a, b| a + b);
        s.push_str(&format!(
            "{gi},{},{g_min},{g_max},{lj},{ds},{}\n",
            gen.len(),
            q_to_str(&mass)
        ));
    }
    s
}

pub fn tree_json(tree: &CantorTree) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{{\"system\":\"{}\",\"eps\":{},\"delta_eps\":{},\"h_eps\":{},\"depth\":{},",
        tree.sys.label(),
        tree.eps,
        tree.delta_eps,
        tree.seed.h_eps,
        tree.depth()
    ));
    s.push_str("\"generations\":[");
    for (gi, gen) in tree.generations.iter().enumerate() {
        if gi > 0 {
            s.push(',');
        }
        s.push('[');
        for (ni, node) in gen.iter().enumerate() {
            if ni > 0 {
                s.push(',');
            }
            let ks: Vec<String> = node.cube.k.iter().map(|k| format!("\"{k}\"")).collect();
            s.push_str(&format!(
                "{{\"g\":{},\"k\":[{}],\"mass\":\"{}\",\"delta_used\":{}}}",
                node.cube.g(),
                ks.join(","),
                q_to_str(&node.mass),
                node.delta_used
            ));
        }
        s.push(']');
    }
    s.push_str("]}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{qi, qr};
    use crate::rates::target_rate;
    use num_traits::{Signed, ToPrimitive, Zero};

    fn rational_profile() -> RedundancyProfile {
        RedundancyProfile::constant(1, 4)
    }

    #[test]
    fn seed_const_rate_basics() {
        let f = target_rate(FSpec::Const(2.0));
        let params = TreeParams::for_system(ClosedSystem::Rational);
        let seed = seed_region(
            &f,
            &Region::unit(1),
            0.2,
            ClosedSystem::Rational,
            &rational_profile(),
            &params,
        )
        .unwrap();
        assert!((seed.h - 0.5).abs() < 1e-12);
        // (h - eps) / (1 + eps (2/h^2 + 1) / f(y))
        let want = 0.3 / (1.0 + 0.2 * 9.0 / 2.0);
        assert!((seed.h_eps - want).abs() < 1e-12);
        assert!(seed.omega_eps.contains_cube(&seed.u0));
        // root kappa budget: d g phi(g) >= d + 1 + kappa_pow = 4
        let g0 = seed.u0.g() as f64;
        assert!(g0 * params.gauge.eval_scale(g0) >= 4.0 - 1e-9);
        assert!(seed.alpha > 1.0);
    }

    #[test]
    fn seed_one_plus_x_hugs_the_minimizer() {
        let f = target_rate(FSpec::OnePlusX);
        let params = TreeParams::for_system(ClosedSystem::Rational);
        let seed = seed_region(
            &f,
            &Region::interval(qr(1, 5), qr(4, 5)),
            0.2,
            ClosedSystem::Rational,
            &rational_profile(),
            &params,
        )
        .unwrap();
        assert!((seed.inf_f - 1.2).abs() < 0.05 + 1e-12);
        assert!(seed.inf_f <= 1.2 + 1e-12);
        assert!(seed.y_eps[0] < qr(1, 4));
        // encad on the band cube: f within [d/h, d/(h - eps)]
        let (lb, ub) = f
            .bounds(&seed.omega_eps.lo[0], &seed.omega_eps.hi[0])
            .unwrap();
        assert!(lb >= seed.inf_f - 1e-12);
        assert!(ub <= 1.0 / (seed.h - 0.2) + 1e-12);
    }

    #[test]
    fn seed_shrinks_when_infimum_is_one() {
        let f = target_rate(FSpec::TwoSinPiX);
        let params = TreeParams::for_system(ClosedSystem::Rational);
        let seed = seed_region(
            &f,
            &Region::interval(qr(1, 6), qr(5, 6)),
            0.4,
            ClosedSystem::Rational,
            &rational_profile(),
            &params,
        )
        .unwrap();
        // after the shrink, inf f in (1, 1 + eps) so h in (1/(1+eps), 1)
        assert!(seed.h > 1.0 / 1.4 - 1e-12 && seed.h < 1.0);
        assert!(!seed.notes.is_empty());
    }

    #[test]
    fn seed_fails_hard_when_gates_cannot_close() {
        // the slow gauge cannot push 2(phi + psi) below the eps = 0.05
        // ceiling for a rate near 1.2 within the generation cap
        let f = target_rate(FSpec::OnePlusX);
        let params = TreeParams::for_system(ClosedSystem::Rational);
        let err = seed_region(
            &f,
            &Region::interval(qr(1, 5), qr(4, 5)),
            0.05,
            ClosedSystem::Rational,
            &rational_profile(),
            &params,
        )
        .unwrap_err();
        assert!(matches!(err, LabError::NoSeed(_)));
        assert!(err.to_string().contains("delta ceiling"));
    }

    #[test]
    fn delta_midpoint_matches_hand_values() {
        // f = 2, phi = j^{-1/2}, psi = 0, j = 16: delta = 2 + 2/4 = 2.5
        let f = target_rate(FSpec::Const(2.0));
        let seed = SeedRegion {
            d: 1,
            eps: 0.2,
            y_eps: vec![qr(1, 2)],
            omega_eps: Region::unit(1),
            u0: DyadicCube::unit(1),
            inf_f: 2.0,
            f_y_eps: 2.0,
            h: 0.5,
            h_cap: 4.0,
            h_eps: 0.15,
            alpha: 1.01,
            notes: vec![],
        };
        let u = cube_at(&[qr(1, 3)], 16).unwrap();
        let d = delta_of_cube(
            &u,
            &f,
            &RedundancyProfile::constant(1, 1),
            &GaugeFunction::inv_sqrt(1.0),
            &seed,
        )
        .unwrap();
        assert!((d - 2.5).abs() < 1e-12);
        // rational profile N = 4 at j = 25: delta - f = 2(1/5 + 2/25) = 0.56
        let u = cube_at(&[qr(1, 3)], 25).unwrap();
        let d = delta_of_cube(
            &u,
            &f,
            &RedundancyProfile::constant(1, 4),
            &GaugeFunction::inv_sqrt(1.0),
            &seed,
        )
        .unwrap();
        assert!((d - 2.0 - 0.56).abs() < 1e-12);
    }

    #[test]
    fn find_level_dyadic_example() {
        // dyadic store, U of generation 4, delta = 2, kappa = 1/2: a valid
        // level exists at j <= 12 and the selection is 2^{-j}-separated
        let sys = ClosedSystem::Dyadic { d: 1 };
        let params = TreeParams::for_system(sys);
        let u = cube_at(&[qr(1, 3)], 4).unwrap();
        let profile = RedundancyProfile::constant(1, 1);
        let level = find_level(&u, 2.0, &Q::one(), sys, &profile, &params).unwrap();
        assert!(level.j <= 12);
        assert_eq!(level.m, level.selected.len());
        let side = pow2(-(level.j as i64));
        for a in 0..level.selected.len() {
            for b in (a + 1)..level.selected.len() {
                assert!(level.selected[a].0.distance(&level.selected[b].0) >= side);
            }
        }
        for (vt, w) in &level.selected {
            assert!(u.contains_cube(vt));
            assert!(vt.contains(&w.center.values()));
        }
    }

    #[test]
    fn find_level_reports_honest_obstruction() {
        // a mass too heavy for any admissible child generation cannot split
        let sys = ClosedSystem::Rational;
        let mut params = TreeParams::for_system(sys);
        params.gauge = GaugeFunction::inv_sqrt(1.0); // fast gauge: projection binds
        let u = cube_at(&[qr(1, 3)], 30).unwrap();
        let err = find_level(&u, 2.0, &Q::one(), sys, &rational_profile(), &params).unwrap_err();
        assert!(matches!(err, LabError::LevelNotFound(_)));
        assert!(err.to_string().contains("mass projection"));
    }

    #[test]
    fn contracted_descendant_exact_geometry() {
        // x = 1/2, r = 2^{-8}, delta = 2, slot = 1/4: outer just under
        // 2^{-16} (outward rounding), inner just under 2^{-18}; the largest
        // shell interval lands at generation 17 or 18 and the child one
        // deeper, inside the sandwich [16, 20]
        let vt = cube_at(&[qr(1, 2)], 8).unwrap();
        let w = PWitness {
            cube: vt.clone(),
            center: crate::systems::Point::exact1(qr(1, 2)),
            radius: pow2(-8),
            delta: 2.0,
            window: (0, 20),
        };
        // gauge with phi(2^{-8}) = 1/4
        let phi = GaugeFunction::inv_sqrt(0.25 * 8f64.sqrt());
        let (v, ann) = contracted_descendant(&vt, &w, &phi).unwrap();
        assert!(ann.outer <= pow2(-16) && ann.outer > pow2(-17));
        assert!(ann.inner >= pow2(-18) && ann.inner < pow2(-17));
        assert!(v.g() == 18 || v.g() == 19);
        assert!(v.g() >= 16 && v.g() <= 20);
        assert_eq!(v.lo(0), qr(1, 2) + pow2(-17));
        // exact rate sandwich on both corners
        for c in [v.lo(0), v.hi(0)] {
            let dist = (c - qr(1, 2)).abs();
            assert!(dist >= ann.inner && dist <= ann.outer);
        }
    }

    #[test]
    fn toy_uniform_tree_scales_with_equality() {
        // binary splitting with delta = d = 1 and phi = 0: mu(V) = |V|
        let f = target_rate(FSpec::Const(2.0));
        let seed = SeedRegion {
            d: 1,
            eps: 0.5,
            y_eps: vec![qr(1, 2)],
            omega_eps: Region::unit(1),
            u0: DyadicCube::unit(1),
            inf_f: 2.0,
            f_y_eps: 2.0,
            h: 0.5,
            h_cap: 4.0,
            h_eps: 0.1,
            alpha: 1.0,
            notes: vec![],
        };
        let mut params = TreeParams::for_system(ClosedSystem::Rational);
        params.gauge = GaugeFunction::inv_sqrt(0.0);
        let mut tree = CantorTree {
            f,
            sys: ClosedSystem::Rational,
            profile: RedundancyProfile::constant(1, 1),
            params,
            seed,
            eps: 0.5,
            generations: vec![vec![CantorNode {
                cube: DyadicCube::unit(1),
                parent: None,
                delta_used: 1.0,
                witness: None,
                intermediate: None,
                mass: Q::one(),
                delta: None,
                level_j: None,
            }]],
            delta_eps: 1.0,
            stop: None,
        };
        for _ in 0..3 {
            let gi = tree.generations.len() - 1;
            let mut next = Vec::new();
            for (idx, node) in tree.generations[gi].clone().iter().enumerate() {
                for ch in node.cube.children() {
                    next.push(CantorNode {
                        cube: ch,
                        parent: Some(idx),
                        delta_used: 1.0,
                        witness: None,
                        intermediate: None,
                        mass: &node.mass / qi(2),
                        delta: Some(1.0),
                        level_j: None,
                    });
                }
            }
            for n in tree.generations[gi].iter_mut() {
                n.delta = Some(1.0);
            }
            tree.generations.push(next);
        }
        let rep = verify_scaling(&tree, 3).unwrap();
        assert!(rep.worst_node_margin_log2.abs() < 1e-9);
        assert_eq!(rep.mass_total, Q::one());
        // equality also pins the global constant at 1
        assert!(rep.cprime_log2.abs() < 1e-9);
        // tampering with one mass must trip the exact check
        tree.generations[3][0].mass = qr(1, 4);
        let err = verify_scaling(&tree, 3).unwrap_err();
        assert!(matches!(err, LabError::ScalingViolation(_)));
    }

    #[test]
    fn rational_tree_builds_and_certifies() {
        let f = target_rate(FSpec::Const(2.0));
        let sys = ClosedSystem::Rational;
        let params = TreeParams::for_system(sys);
        let mut tree = CantorTree::new(
            f,
            &Region::unit(1),
            0.2,
            sys,
            rational_profile(),
            params,
        )
        .unwrap();
        // the root split succeeds; the next level stops honestly, because a
        // child hugs its witness p/q and every other fraction with
        // denominator v is repelled to distance >= 1/(q v), which dwarfs the
        // annulus radius r^delta for delta > 1. Witnesses for the child's
        // own split only appear at levels j' >= (2 - 1/delta) g(V), far past
        // the scan window.
        let depth = tree.grow(2);
        assert_eq!(depth, 1, "stop: {:?}", tree.stop);
        assert!(tree.stop.as_ref().unwrap().contains("witnessed"));
        // nesting, band sandwich, and exact masses
        for gi in 1..=depth {
            let mass: Q = tree.generations[gi]
                .iter()
                .map(|n| n.mass.clone())
                .fold(Q::zero(), |a, b| a + b);
            assert_eq!(mass, Q::one());
            for node in &tree.generations[gi] {
                let parent = &tree.generations[gi - 1][node.parent.unwrap()];
                let vt = node.intermediate.as_ref().unwrap();
                assert!(parent.cube.contains_cube(vt));
                assert!(vt.contains_cube(&node.cube));
                let j = parent.level_j.unwrap();
                assert_eq!(vt.g(), j);
                // generation sandwich from the annulus step
                let r = &node.witness.as_ref().unwrap().radius;
                let base = (node.delta_used * -log2q(r) + 1e-9).floor() as u32;
                assert!(node.cube.g() >= base && node.cube.g() <= base + 4);
            }
        }
        // siblings under one intermediate-level selection stay separated
        let gen1 = &tree.generations[1];
        for a in 0..gen1.len() {
            for b in (a + 1)..gen1.len() {
                if gen1[a].parent == gen1[b].parent {
                    let j = tree.generations[0][gen1[a].parent.unwrap()]
                        .level_j
                        .unwrap();
                    let d = gen1[a]
                        .intermediate
                        .as_ref()
                        .unwrap()
                        .distance(gen1[b].intermediate.as_ref().unwrap());
                    assert!(d >= pow2(-(j as i64)));
                }
            }
        }
        let rep = verify_scaling(&tree, tree.generations[1][0].cube.g()).unwrap();
        assert!(rep.worst_node_margin_log2 >= -1e-9);
        let cert = dimension_certificate(&tree).unwrap();
        assert!(cert.consistent, "{cert:?}");
        assert!(cert.h_eps < cert.dim_floor + 1e-9);
        let csv = generation_csv(&tree);
        assert_eq!(csv.lines().count(), depth + 2);
        assert!(tree_json(&tree).starts_with("{\"system\":\"rational\""));
    }

    #[test]
    fn dyadic_tree_extends_twice() {
        // unlike fractions, dyadic grids refine through every point, so the
        // tree keeps extending below depth 1
        let f = target_rate(FSpec::Const(2.0));
        let sys = ClosedSystem::Dyadic { d: 1 };
        let params = TreeParams::for_system(sys);
        let mut tree = CantorTree::new(
            f,
            &Region::unit(1),
            0.3,
            sys,
            RedundancyProfile::constant(1, 1),
            params,
        )
        .unwrap();
        let depth = tree.grow(2);
        assert_eq!(depth, 2, "stop: {:?}", tree.stop);
        let root = &tree.generations[0][0];
        let j = root.level_j.unwrap();
        assert!(j <= root.cube.g() + tree.params.t_max);
        for node in &tree.generations[1] {
            assert!(root.cube.contains_cube(&node.cube));
            // dyadic witnesses are grid points; the child must avoid its own
            // witness center by at least the annulus hole
            let w = node.witness.as_ref().unwrap();
            let dist = cube_point_dist(&node.cube, &w.center.values());
            assert!(dist.to_f64().unwrap() > 0.0);
        }
        let rep = verify_scaling(&tree, tree.generations[1][0].cube.g()).unwrap();
        assert!(rep.worst_node_margin_log2 >= -1e-9);
        assert_eq!(rep.mass_total, Q::one());
        // deterministic sampling descends the actual branches
        let s1 = sample_points(&tree, 5, 7).unwrap();
        let s2 = sample_points(&tree, 5, 7).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.point, b.point);
            assert_eq!(a.deltas.len(), 2);
            assert!((a.f_value - 2.0).abs() < 1e-12);
        }
    }
}
