//! Dimension estimators layered over the construction: box counting as the
//! empirical surrogate, the covering-sum convergence test for the upper
//! bound, and exact local mass exponents of built trees. All theorem-level
//! claims go through the mass-distribution route (local exponents); box
//! counting is a sanity overlay only.

use std::collections::HashSet;

use num_bigint::BigInt;
use num_traits::Zero;

use crate::cantor::CantorTree;
use crate::errors::{LabError, Result};
use crate::geometry::{DyadicCube, RedundancyProfile};
use crate::numeric::{log2q, Q};

// ---------------------------------------------------------------------------
// box counting
// ---------------------------------------------------------------------------

/// Occupied-cube counts per generation with a least-squares slope fit on
/// (j, log2 N(j)). Saturated generations (every point in its own cube) are
/// excluded from the fit and listed.
#[derive(Debug, Clone)]
pub struct BoxCountReport {
    pub counts: Vec<(u32, u64)>,
    pub slope: f64,
    pub residual: f64,
    pub j_lo: u32,
    pub j_hi: u32,
    pub excluded: Vec<u32>,
}

fn point_box_index(x: &Q, j: u32) -> BigInt {
    // floor(x 2^j), clamped so x = 1 lands in the last cube
    let k = (x.numer() << j) / x.denom();
    let cap = (BigInt::from(1) << j) - 1;
    if k > cap {
        cap
    } else if k.sign() == num_bigint::Sign::Minus {
        BigInt::zero()
    } else {
        k
    }
}

fn fit_counts(
    counts: Vec<(u32, u64)>,
    excluded: Vec<u32>,
    j_lo: u32,
    j_hi: u32,
) -> Result<BoxCountReport> {
    let usable: Vec<(f64, f64)> = counts
        .iter()
        .filter(|(j, _)| !excluded.contains(j))
        .map(|(j, n)| (*j as f64, (*n as f64).log2()))
        .collect();
    if usable.len() < 3 {
        return Err(LabError::RangeTooNarrow(format!(
            "{} usable generations in [{j_lo}, {j_hi}], need 3",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|p| p.0).sum();
    let sy: f64 = usable.iter().map(|p| p.1).sum();
    let sxx: f64 = usable.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = usable.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let icept = (sy - slope * sx) / n;
    let residual = (usable
        .iter()
        .map(|p| {
            let e = p.1 - (slope * p.0 + icept);
            e * e
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(BoxCountReport {
        counts,
        slope,
        residual,
        j_lo,
        j_hi,
        excluded,
    })
}

/// Count occupied generation-j grid cubes for a finite point set on each
/// j in [j_lo, j_hi] and fit the growth exponent.
pub fn box_counting(points: &[Vec<Q>], j_lo: u32, j_hi: u32) -> Result<BoxCountReport> {
    assert!(j_lo >= 1 && j_hi > j_lo);
    assert!(!points.is_empty());
    let mut counts = Vec::new();
    let mut excluded = Vec::new();
    for j in j_lo..=j_hi {
        let mut seen: HashSet<Vec<BigInt>> = HashSet::new();
        for p in points {
            seen.insert(p.iter().map(|x| point_box_index(x, j)).collect());
        }
        let n = seen.len() as u64;
        counts.push((j, n));
        if n == points.len() as u64 && n > 1 {
            excluded.push(j);
        }
    }
    fit_counts(counts, excluded, j_lo, j_hi)
}

/// Box counting over a cube family (typically the deepest generation of a
/// tree). Generations finer than some cube in the family are excluded.
pub fn box_counting_cubes(cubes: &[DyadicCube], j_lo: u32, j_hi: u32) -> Result<BoxCountReport> {
    assert!(j_lo >= 1 && j_hi > j_lo);
    assert!(!cubes.is_empty());
    let d = cubes[0].d as usize;
    let mut counts = Vec::new();
    let mut excluded = Vec::new();
    for j in j_lo..=j_hi {
        if cubes.iter().any(|c| c.g() < j) {
            excluded.push(j);
            counts.push((j, 0));
            continue;
        }
        let mut seen: HashSet<Vec<BigInt>> = HashSet::new();
        for c in cubes {
            let shift = c.g() - j;
            seen.insert((0..d).map(|t| &c.k[t] >> shift).collect());
        }
        counts.push((j, seen.len() as u64));
    }
    fit_counts(counts, excluded, j_lo, j_hi)
}

pub fn box_count_csv(rep: &BoxCountReport) -> String {
    let mut s = String::from("j,n,used\n");
    for (j, n) in &rep.counts {
        s.push_str(&format!(
            "{j},{n},{}\n",
            if rep.excluded.contains(j) { 0 } else { 1 }
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// covering-sum convergence test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Converging,
    Diverging,
    Inconclusive,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Converging => "converging",
            Verdict::Diverging => "diverging",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoveringSum {
    /// (j, N_j 2^{j(d - s delta)})
    pub terms: Vec<(u32, f64)>,
    pub partial_sums: Vec<f64>,
    pub verdict: Verdict,
}

/// Partial sums of N_j 2^{j(d - s delta)} with a ratio-test verdict on the
/// tail: converging when the last five terms decay geometrically (every
/// ratio < 0.95), diverging when they all grow.
pub fn covering_sum(
    profile: &RedundancyProfile,
    delta: f64,
    s: f64,
    j_start: u32,
    j_max: u32,
) -> CoveringSum {
    assert!(j_start >= 1 && j_max >= j_start);
    let d = profile.d as f64;
    let expo = d - s * delta;
    let mut terms = Vec::new();
    let mut partial_sums = Vec::new();
    let mut acc = 0.0f64;
    for j in j_start..=j_max {
        let n = profile.n_at(j).unwrap_or(1) as f64;
        let term = n * (expo * j as f64).exp2();
        acc += term;
        terms.push((j, term));
        partial_sums.push(acc);
    }
    let verdict = if terms.len() < 5 {
        Verdict::Inconclusive
    } else {
        let tail = &terms[terms.len() - 5..];
        let ratios: Vec<f64> = tail.windows(2).map(|w| w[1].1 / w[0].1).collect();
        if ratios.iter().all(|r| *r < 0.95) {
            Verdict::Converging
        } else if ratios.iter().all(|r| *r > 1.0 + 1e-12) {
            Verdict::Diverging
        } else {
            Verdict::Inconclusive
        }
    };
    CoveringSum {
        terms,
        partial_sums,
        verdict,
    }
}

pub fn covering_csv(cs: &CoveringSum) -> String {
    let mut s = String::from("j,term,partial_sum\n");
    for ((j, t), p) in cs.terms.iter().zip(&cs.partial_sums) {
        s.push_str(&format!("{j},{t:.12e},{p:.12e}\n"));
    }
    s
}

// ---------------------------------------------------------------------------
// local mass exponents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LocalExponents {
    /// log mu(V) / log |V| per deepest-generation node
    pub exponents: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    /// ten equal-width bins over [min, max]
    pub histogram: Vec<((f64, f64), usize)>,
}

/// Exact local exponents of the tree measure over the deepest generation.
/// For a tree that passed the scaling check each exponent is at least
/// d/delta_eps - 4 d phi(|V|).
pub fn local_exponents(tree: &CantorTree) -> Result<LocalExponents> {
    if tree.depth() == 0 {
        return Err(LabError::PreconditionViolated(
            "local exponents need tree depth >= 1".into(),
        ));
    }
    let deepest = tree.generations.last().unwrap();
    let mut exponents: Vec<f64> = Vec::with_capacity(deepest.len());
    for node in deepest {
        let g = node.cube.g() as f64;
        exponents.push(log2q(&node.mass) / -g);
    }
    let min = exponents.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = exponents.iter().sum::<f64>() / exponents.len() as f64;
    let bins = 10usize;
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let mut histogram: Vec<((f64, f64), usize)> = (0..bins)
        .map(|i| ((min + i as f64 * width, min + (i + 1) as f64 * width), 0))
        .collect();
    for e in &exponents {
        let mut i = ((e - min) / width) as usize;
        if i >= bins {
            i = bins - 1;
        }
        histogram[i].1 += 1;
    }
    Ok(LocalExponents {
        exponents,
        min,
        mean,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cantor::{CantorNode, CantorTree, Region, SeedRegion, TreeParams};
    use crate::conditions::ClosedSystem;
    use crate::geometry::GaugeFunction;
    use crate::numeric::{qi, qr};
    use crate::rates::{target_rate, FSpec};
    use num_traits::One;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_points_fill_the_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let den: i64 = 1 << 20;
        let pts: Vec<Vec<Q>> = (0..10_000)
            .map(|_| vec![qr(rng.gen_range(0..den), den)])
            .collect();
        let rep = box_counting(&pts, 4, 10).unwrap();
        assert!(rep.slope >= 0.9 && rep.slope <= 1.0, "slope {}", rep.slope);
        // counts never decrease with the generation
        for w in rep.counts.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn middle_thirds_endpoints_slope() {
        // level-8 intervals: base-3 digits in {0, 2}
        let den: i64 = 3i64.pow(8);
        let mut pts = Vec::new();
        for mask in 0..256u32 {
            let mut a: i64 = 0;
            for b in 0..8 {
                a = 3 * a + if mask & (1 << b) != 0 { 2 } else { 0 };
            }
            pts.push(vec![qr(a, den)]);
            pts.push(vec![qr(a + 1, den)]);
        }
        let rep = box_counting(&pts, 4, 10).unwrap();
        assert!(
            rep.slope >= 0.58 && rep.slope <= 0.68,
            "slope {}",
            rep.slope
        );
    }

    #[test]
    fn single_point_has_slope_zero() {
        let rep = box_counting(&[vec![qr(1, 3)]], 4, 10).unwrap();
        assert!(rep.slope.abs() < 1e-12);
        assert!(rep.excluded.is_empty());
    }

    #[test]
    fn narrow_range_is_an_error() {
        let err = box_counting(&[vec![qr(1, 3)], vec![qr(2, 3)]], 4, 5).unwrap_err();
        assert!(matches!(err, LabError::RangeTooNarrow(_)));
    }

    #[test]
    fn covering_sum_geometric_oracles() {
        // N = 4, d = 1, delta = 2: terms 4 2^{j(1 - 2s)}
        let profile = RedundancyProfile::constant(1, 4);
        let cs = covering_sum(&profile, 2.0, 0.6, 1, 40);
        assert_eq!(cs.verdict, Verdict::Converging);
        let (j, t) = cs.terms[9];
        assert!((t - 4.0 * (-0.2 * j as f64).exp2()).abs() < 1e-9);
        // closed form for the full geometric sum as a cross-check
        let r: f64 = (-0.2f64).exp2();
        let want = 4.0 * r * (1.0 - r.powi(40)) / (1.0 - r);
        assert!((cs.partial_sums.last().unwrap() - want).abs() < 1e-6);

        let cs = covering_sum(&profile, 2.0, 0.4, 1, 40);
        assert_eq!(cs.verdict, Verdict::Diverging);

        // boundary s = d/delta with N = 1: constant terms
        let flat = RedundancyProfile::constant(1, 1);
        let cs = covering_sum(&flat, 2.0, 0.5, 1, 40);
        assert_eq!(cs.verdict, Verdict::Inconclusive);
        assert!(cs.terms.iter().all(|(_, t)| (*t - 1.0).abs() < 1e-12));
    }

    fn toy_tree() -> CantorTree {
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
            f: target_rate(FSpec::Const(2.0)),
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
            tree.generations.push(next);
        }
        tree
    }

    #[test]
    fn lebesgue_toy_tree_has_unit_exponents() {
        let tree = toy_tree();
        let le = local_exponents(&tree).unwrap();
        assert!(le.exponents.iter().all(|e| (e - 1.0).abs() < 1e-12));
        assert!((le.min - 1.0).abs() < 1e-12);
        assert!((le.mean - 1.0).abs() < 1e-12);
        assert_eq!(le.histogram.iter().map(|h| h.1).sum::<usize>(), 8);
    }

    #[test]
    fn built_tree_exponents_respect_the_floor() {
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
        assert_eq!(tree.grow(2), 2);
        let le = local_exponents(&tree).unwrap();
        let phi = &tree.params.gauge;
        let g = tree.generations.last().unwrap()[0].cube.g();
        let floor = 1.0 / tree.delta_eps - 4.0 * phi.eval_scale(g as f64);
        assert!(le.min >= floor - 1e-9, "min {} floor {}", le.min, floor);
        // consistency of the two estimators on the deepest cube family
        let cubes: Vec<DyadicCube> = tree
            .generations
            .last()
            .unwrap()
            .iter()
            .map(|n| n.cube.clone())
            .collect();
        let rep = box_counting_cubes(&cubes, 2, 12).unwrap();
        assert!(rep.slope >= le.min - 0.1);
    }
}
