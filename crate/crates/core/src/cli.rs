//! Experiment runner. A flat key=value config file selects one experiment
//! and all of its parameters; outputs are plot-ready CSV tables plus a JSON
//! manifest carrying the canonical config text, its hash, the crate version
//! and the seed, so a manifest alone suffices to re-run. All randomness
//! derives from the single `seed` key and re-running a config byte-
//! reproduces every output file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_bigint::BigInt;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::cantor::{
    dimension_certificate, generation_csv, sample_points, tree_json, verify_scaling, CantorTree,
    Region, TreeParams,
};
use crate::conditions::{
    c1_profile, c2_sweep, check_p, dyadic_p_params, poisson_c2_mc, three_distance, PCheckParams,
};
use crate::conditions::ClosedSystem;
use crate::dimension::{covering_csv, covering_sum};
use crate::errors::{LabError, Result};
use crate::geometry::{cube_at, default_gauge, DyadicCube, RedundancyProfile};
use crate::numeric::{q_to_str, Q};
use crate::rates::{
    delta_empirical, delta_from_cf, golden_cf, q_to_f64, target_rate,
    ContinuedFraction, FSpec,
};
use crate::systems::{gen_dyadic, gen_inhomogeneous, gen_poisson, gen_rational, irreducible, System};

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

/// Everything an experiment needs, in one flat record. Unset keys take the
/// defaults below; `to_text` always writes every key so the round trip
/// parse(to_text(c)) == c is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    /// rational | dyadic | inhomogeneous | poisson
    pub system_kind: String,
    pub q_max: u64,
    pub j_max: u32,
    pub dim: u32,
    pub n_max: u64,
    /// "golden", "sqrt2" or a CF literal "[0; 1, 2, ...]"
    pub alpha: String,
    pub seed: u64,
    pub trials: u64,
    pub delta: f64,
    pub delta_list: Vec<f64>,
    pub s_list: Vec<f64>,
    pub eps_list: Vec<f64>,
    /// rate target: const:<v> | one-plus-x | alpha-over-x:<a> | two-sin-pi-x
    /// | piecewise:<lo>,<hi>,<body>;...
    pub f: String,
    pub omega_lo: Q,
    pub omega_hi: Q,
    pub j_lo: u32,
    pub j_hi: u32,
    pub depth: usize,
    pub point: Q,
    pub gen: u32,
    pub count: usize,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: String::new(),
            system_kind: "rational".into(),
            q_max: 3000,
            j_max: 14,
            dim: 1,
            n_max: 500,
            alpha: "golden".into(),
            seed: 1,
            trials: 10_000,
            delta: 2.0,
            delta_list: vec![],
            s_list: vec![],
            eps_list: vec![],
            f: "const:2".into(),
            omega_lo: Q::from_integer(BigInt::from(0)),
            omega_hi: Q::one(),
            j_lo: 4,
            j_hi: 12,
            depth: 3,
            point: Q::new(BigInt::one(), BigInt::from(3)),
            gen: 8,
            count: 20,
            out_dir: "out".into(),
        }
    }
}

fn fmt_f64_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| LabError::Config(format!("bad number {t}")))
        })
        .collect()
}

fn parse_rational(s: &str) -> Result<Q> {
    let s = s.trim();
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let num: BigInt = n
        .parse()
        .map_err(|_| LabError::Config(format!("bad rational {s}")))?;
    let den: BigInt = d
        .parse()
        .map_err(|_| LabError::Config(format!("bad rational {s}")))?;
    if den == BigInt::from(0) {
        return Err(LabError::Config(format!("zero denominator in {s}")));
    }
    Ok(Q::new(num, den))
}

impl ExperimentConfig {
    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = {}", self.experiment);
        let _ = writeln!(s, "system.kind = {}", self.system_kind);
        let _ = writeln!(s, "system.q_max = {}", self.q_max);
        let _ = writeln!(s, "system.j_max = {}", self.j_max);
        let _ = writeln!(s, "system.dim = {}", self.dim);
        let _ = writeln!(s, "system.n_max = {}", self.n_max);
        let _ = writeln!(s, "system.alpha = {}", self.alpha);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "delta.list = {}", fmt_f64_list(&self.delta_list));
        let _ = writeln!(s, "s.list = {}", fmt_f64_list(&self.s_list));
        let _ = writeln!(s, "eps.list = {}", fmt_f64_list(&self.eps_list));
        let _ = writeln!(s, "f = {}", self.f);
        let _ = writeln!(s, "omega.lo = {}", q_to_str(&self.omega_lo));
        let _ = writeln!(s, "omega.hi = {}", q_to_str(&self.omega_hi));
        let _ = writeln!(s, "j.lo = {}", self.j_lo);
        let _ = writeln!(s, "j.hi = {}", self.j_hi);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "point = {}", q_to_str(&self.point));
        let _ = writeln!(s, "gen = {}", self.gen);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "out.dir = {}", self.out_dir);
        s
    }

    /// Parse the flat key=value format; '#' starts a comment, unknown keys
    /// are errors with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim();
            let val = val.trim();
            let bad = |what: &str| LabError::Config(format!("line {}: bad {what}: {val}", ln + 1));
            match key {
                "experiment" => cfg.experiment = val.into(),
                "system.kind" => cfg.system_kind = val.into(),
                "system.q_max" => cfg.q_max = val.parse().map_err(|_| bad("integer"))?,
                "system.j_max" => cfg.j_max = val.parse().map_err(|_| bad("integer"))?,
                "system.dim" => cfg.dim = val.parse().map_err(|_| bad("integer"))?,
                "system.n_max" => cfg.n_max = val.parse().map_err(|_| bad("integer"))?,
                "system.alpha" => cfg.alpha = val.into(),
                "seed" => cfg.seed = val.parse().map_err(|_| bad("integer"))?,
                "trials" => cfg.trials = val.parse().map_err(|_| bad("integer"))?,
                "delta" => cfg.delta = val.parse().map_err(|_| bad("number"))?,
                "delta.list" => cfg.delta_list = parse_f64_list(val)?,
                "s.list" => cfg.s_list = parse_f64_list(val)?,
                "eps.list" => cfg.eps_list = parse_f64_list(val)?,
                "f" => cfg.f = val.into(),
                "omega.lo" => cfg.omega_lo = parse_rational(val)?,
                "omega.hi" => cfg.omega_hi = parse_rational(val)?,
                "j.lo" => cfg.j_lo = val.parse().map_err(|_| bad("integer"))?,
                "j.hi" => cfg.j_hi = val.parse().map_err(|_| bad("integer"))?,
                "depth" => cfg.depth = val.parse().map_err(|_| bad("integer"))?,
                "point" => cfg.point = parse_rational(val)?,
                "gen" => cfg.gen = val.parse().map_err(|_| bad("integer"))?,
                "count" => cfg.count = val.parse().map_err(|_| bad("integer"))?,
                "out.dir" => cfg.out_dir = val.into(),
                _ => {
                    return Err(LabError::Config(format!(
                        "line {}: unknown key {key}",
                        ln + 1
                    )))
                }
            }
        }
        if cfg.experiment.is_empty() {
            return Err(LabError::Config("missing key: experiment".into()));
        }
        Ok(cfg)
    }

    pub fn parse_f(&self) -> Result<FSpec> {
        parse_fspec(&self.f)
    }

    fn alpha_cf(&self) -> Result<ContinuedFraction> {
        match self.alpha.as_str() {
            "golden" => Ok(golden_cf(80)),
            "sqrt2" => Ok(crate::rates::sqrt2_cf(80)),
            s if s.starts_with('[') => ContinuedFraction::parse(s),
            s => Err(LabError::Config(format!("bad system.alpha: {s}"))),
        }
    }

    fn build_system(&self) -> Result<System> {
        match self.system_kind.as_str() {
            "rational" => Ok(gen_rational(self.q_max)),
            "dyadic" => Ok(gen_dyadic(self.j_max, self.dim)),
            "inhomogeneous" => gen_inhomogeneous(&self.alpha_cf()?, self.n_max),
            "poisson" => Ok(gen_poisson(self.seed, 2f64.powi(-(self.j_max as i32)), self.dim)),
            s => Err(LabError::Config(format!("unknown system.kind: {s}"))),
        }
    }

    fn closed_system(&self) -> Result<ClosedSystem> {
        match self.system_kind.as_str() {
            "rational" => Ok(ClosedSystem::Rational),
            "dyadic" => Ok(ClosedSystem::Dyadic { d: self.dim }),
            s => Err(LabError::Config(format!(
                "trees need a closed system (rational or dyadic), got {s}"
            ))),
        }
    }

    fn p_params(&self) -> PCheckParams {
        if self.system_kind == "dyadic" || self.system_kind == "poisson" {
            dyadic_p_params()
        } else {
            PCheckParams::default()
        }
    }
}

fn parse_fspec(s: &str) -> Result<FSpec> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("piecewise:") {
        let mut pieces = Vec::new();
        for part in rest.split(';') {
            let fields: Vec<&str> = part.splitn(3, ',').collect();
            if fields.len() != 3 {
                return Err(LabError::Config(format!("bad piecewise piece: {part}")));
            }
            let lo = parse_rational(fields[0])?;
            let hi = parse_rational(fields[1])?;
            pieces.push((lo, hi, parse_fspec(fields[2])?));
        }
        return Ok(FSpec::Piecewise(pieces));
    }
    if let Some(v) = s.strip_prefix("const:") {
        return Ok(FSpec::Const(v.trim().parse().map_err(|_| {
            LabError::Config(format!("bad const rate: {v}"))
        })?));
    }
    if let Some(v) = s.strip_prefix("alpha-over-x:") {
        return Ok(FSpec::AlphaOverX(v.trim().parse().map_err(|_| {
            LabError::Config(format!("bad alpha-over-x rate: {v}"))
        })?));
    }
    match s {
        "one-plus-x" => Ok(FSpec::OnePlusX),
        "two-sin-pi-x" => Ok(FSpec::TwoSinPiX),
        _ => Err(LabError::Config(format!("unknown rate target: {s}"))),
    }
}

// ---------------------------------------------------------------------------
// runner
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    /// files written, relative to out.dir
    pub outputs: Vec<String>,
    /// machine-readable result summary (also embedded in the manifest)
    pub summary: Value,
}

fn fnv64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in data {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Sink<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Sink<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Sink {
            dir,
            written: Vec::new(),
        })
    }
    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        fs::write(self.dir.join(name), content)?;
        self.written.push(name.to_string());
        Ok(())
    }
}

/// Execute one experiment; writes CSV artifacts plus manifest.json into
/// cfg.out_dir and returns the written paths with a summary.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = Path::new(&cfg.out_dir).to_path_buf();
    let mut sink = Sink::new(&dir)?;
    let summary = match cfg.experiment.as_str() {
        "c1" => run_c1(cfg, &mut sink)?,
        "c2" => run_c2(cfg, &mut sink)?,
        "p" => run_p(cfg, &mut sink)?,
        "threedist" => run_threedist(cfg, &mut sink)?,
        "poisson-mc" => run_poisson_mc(cfg, &mut sink)?,
        "rate" => run_rate(cfg, &mut sink)?,
        "jb" => run_tree_family(cfg, &mut sink, true)?,
        "localized" => run_tree_family(cfg, &mut sink, false)?,
        "cover" => run_cover(cfg, &mut sink)?,
        e => return Err(LabError::Config(format!("unknown experiment: {e}"))),
    };
    let config_text = cfg.to_text();
    let manifest = json!({
        "experiment": cfg.experiment,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": config_text,
        "config_hash": format!("{:016x}", fnv64(config_text.as_bytes())),
        "outputs": sink.written,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    sink.write("manifest.json", &text)?;
    Ok(RunOutcome {
        outputs: sink.written,
        summary,
    })
}

fn run_c1(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let sys = cfg.build_system()?;
    let irr = irreducible(&sys);
    let profile = c1_profile(&sys, &irr, cfg.j_hi);
    let mut csv = String::from("j,n_j,psi\n");
    let mut max_n = 0u64;
    for j in 1..=cfg.j_hi {
        let n = profile.n_at(j).unwrap_or(1);
        max_n = max_n.max(n);
        let _ = writeln!(csv, "{j},{n},{}", profile.psi(j));
    }
    sink.write("c1_profile.csv", &csv)?;
    Ok(json!({
        "max_n": max_n,
        "psi_at_j_hi": profile.psi(cfg.j_hi),
        "exact": profile.exact,
        "layers": profile.max_layer(),
    }))
}

fn run_c2(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let sys = cfg.build_system()?;
    let irr = irreducible(&sys);
    let profile = c1_profile(&sys, &irr, cfg.j_hi);
    let phi = default_gauge();
    let u = DyadicCube::unit(cfg.dim);
    let mut csv = String::from("delta,j,q,qtilde,kappa_hat\n");
    let mut min_kappa = f64::INFINITY;
    let deltas = if cfg.delta_list.is_empty() {
        vec![cfg.delta]
    } else {
        cfg.delta_list.clone()
    };
    let mut rows = Vec::new();
    for delta in &deltas {
        let rep = c2_sweep(
            &u,
            *delta,
            cfg.j_lo,
            cfg.j_hi,
            &sys,
            &irr,
            &profile,
            &phi,
            cfg.p_params(),
        )?;
        for r in &rep.rows {
            min_kappa = min_kappa.min(r.kappa_hat);
            let _ = writeln!(csv, "{delta},{},{},{},{}", r.j, r.q, r.qtilde, r.kappa_hat);
            rows.push(json!({"delta": delta, "j": r.j, "q": r.q, "qtilde": r.qtilde,
                             "kappa_hat": r.kappa_hat}));
        }
    }
    sink.write("c2_sweep.csv", &csv)?;
    Ok(json!({ "min_kappa_hat": min_kappa, "rows": rows }))
}

fn run_p(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let sys = cfg.build_system()?;
    let irr = irreducible(&sys);
    let profile = c1_profile(&sys, &irr, cfg.j_hi.max(cfg.gen));
    let phi = default_gauge();
    let v = cube_at(&vec![cfg.point.clone(); cfg.dim as usize], cfg.gen)?;
    let (ok, wit) = check_p(&v, cfg.delta, &sys, &irr, &profile, &phi, cfg.p_params())?;
    let mut csv = String::from("holds,center,radius,window_lo,window_hi\n");
    let summary = match &wit {
        Some(w) => {
            let c = w
                .center
                .values()
                .iter()
                .map(q_to_str)
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                ok as u8,
                c,
                q_to_str(&w.radius),
                w.window.0,
                w.window.1
            );
            json!({ "holds": ok, "center": c, "radius": q_to_str(&w.radius) })
        }
        None => {
            let _ = writeln!(csv, "{},,,,", ok as u8);
            json!({ "holds": ok })
        }
    };
    sink.write("p_check.csv", &csv)?;
    Ok(summary)
}

fn run_threedist(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("case,n,clustered,max_gap,bound,within_bound\n");
    let mut worst_classes = 0usize;
    let mut all_within = true;
    for case in 0..cfg.count.max(1) {
        // partial quotients capped at 2: then q_{k+1} <= 3 q_k, the regime
        // where the largest gap obeys the 3/(N+1) bound for every N
        let quots: Vec<BigInt> = (0..80).map(|_| BigInt::from(rng.gen_range(1..=2u8))).collect();
        let alpha = ContinuedFraction::from_quotients(BigInt::from(0), quots);
        let n = rng.gen_range(10..=cfg.n_max.min(500));
        let rep = three_distance(&alpha, n)?;
        let bound = Q::new(BigInt::from(3), BigInt::from(n + 1));
        let within = rep.max_gap <= bound;
        all_within &= within;
        worst_classes = worst_classes.max(rep.clustered);
        let _ = writeln!(
            csv,
            "{case},{n},{},{},{},{}",
            rep.clustered,
            q_to_f64(&rep.max_gap),
            q_to_f64(&bound),
            within as u8
        );
    }
    sink.write("three_distance.csv", &csv)?;
    Ok(json!({ "worst_classes": worst_classes, "all_within_bound": all_within }))
}

fn run_poisson_mc(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let mut csv = String::from("j,estimate,ci_lo,ci_hi,kappa1,kappa1_log,n1_freq,mean_n,var_n\n");
    let mut rows = Vec::new();
    for j in [cfg.j_lo, cfg.j_hi] {
        let rep = poisson_c2_mc(cfg.delta, j, cfg.trials, cfg.seed);
        let _ = writeln!(
            csv,
            "{j},{},{},{},{},{},{},{},{}",
            rep.estimate,
            rep.ci95.0,
            rep.ci95.1,
            rep.kappa1,
            rep.kappa1_log,
            rep.n1_freq,
            rep.mean_n,
            rep.var_n
        );
        rows.push(json!({"j": j, "estimate": rep.estimate, "kappa1": rep.kappa1,
                         "n1_freq": rep.n1_freq, "mean_n": rep.mean_n, "var_n": rep.var_n}));
    }
    sink.write("poisson_mc.csv", &csv)?;
    Ok(json!({ "rows": rows }))
}

/// A continued fraction of approximation rate `delta` whose rate-carrying
/// convergents sit above q = 100: a Fibonacci head lifts the denominators
/// out of the small-q regime (where per-convergent exponents are inflated
/// for every number), then the usual quotient rule a_{k+1} ~ q_k^{2 delta-2}
/// drives the tail. Bit growth is capped so exact scans stay cheap.
fn anchored_rate_cf(delta: f64) -> ContinuedFraction {
    let mut a = vec![BigInt::one(); 12];
    let mut cf = ContinuedFraction::from_quotients(BigInt::from(0), a.clone());
    while a.len() < 150 {
        let l = crate::numeric::log2q(&Q::from_integer(cf.q.last().unwrap().clone()));
        if l * (2.0 * delta - 1.0) > 300.0 {
            break;
        }
        let bits = (2.0 * delta - 2.0) * l;
        let next = if bits <= 0.0 {
            BigInt::one()
        } else {
            let v = crate::numeric::exp2_dyadic(bits, crate::numeric::Round::Down)
                + Q::new(BigInt::one(), BigInt::from(2));
            v.floor().to_integer().max(BigInt::one())
        };
        a.push(next);
        cf = ContinuedFraction::from_quotients(BigInt::from(0), a.clone());
    }
    cf
}

fn run_rate(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sys = gen_rational(cfg.q_max);
    // drop pairs with q < 20 from the scan: their exponents are inflated
    // for every real number and say nothing about the tail rate
    let head = Q::new(BigInt::one(), BigInt::from(400));
    let mut csv = String::from("case,target,from_cf,empirical,abs_diff\n");
    let mut max_diff = 0.0f64;
    for case in 0..cfg.count.max(1) {
        let target: f64 = rng.gen_range(1.0..=3.0);
        let cf = anchored_rate_cf(target);
        let from_cf = delta_from_cf(&cf, 0.5).estimate;
        let emp = delta_empirical(&cf.value(), &sys, &head).estimate;
        let diff = (from_cf - emp).abs();
        max_diff = max_diff.max(diff);
        let _ = writeln!(csv, "{case},{target},{from_cf},{emp},{diff}");
    }
    let golden = golden_cf(60);
    let golden_emp = delta_empirical(&golden.value(), &sys, &head).estimate;
    let _ = writeln!(
        csv,
        "golden,1,{},{golden_emp},",
        delta_from_cf(&golden, 0.5).estimate
    );
    sink.write("rates.csv", &csv)?;
    Ok(json!({ "max_abs_diff": max_diff, "golden_empirical": golden_emp }))
}

/// Shared body of `jb` (constant rate target, certificate vs d/delta) and
/// `localized` (general f, certificate vs d/inf f). Per-eps failures are
/// recorded, not fatal; the run errors only when no eps yields a tree.
fn run_tree_family(cfg: &ExperimentConfig, sink: &mut Sink, jb: bool) -> Result<Value> {
    let spec = if jb {
        FSpec::Const(cfg.delta)
    } else {
        cfg.parse_f()?
    };
    let sys = cfg.closed_system()?;
    let omega = Region::interval(cfg.omega_lo.clone(), cfg.omega_hi.clone());
    let profile = match sys {
        ClosedSystem::Rational => RedundancyProfile::constant(1, 4),
        ClosedSystem::Dyadic { d } => RedundancyProfile::constant(d, 1),
    };
    let eps_list = if cfg.eps_list.is_empty() {
        vec![0.2]
    } else {
        cfg.eps_list.clone()
    };
    let mut csv = String::from(
        "eps,status,g0,depth,h,h_eps,delta_eps,dim_floor,min_local_exponent,consistent,cprime_log2,stop\n",
    );
    let mut rows = Vec::new();
    let mut last_err: Option<LabError> = None;
    let mut built_any = false;
    for (i, &eps) in eps_list.iter().enumerate() {
        let params = TreeParams::for_system(sys);
        let mut tree = match CantorTree::new(
            target_rate(spec.clone()),
            &omega,
            eps,
            sys,
            profile.clone(),
            params,
        ) {
            Ok(t) => t,
            Err(e) => {
                let _ = writeln!(csv, "{eps},\"{e}\",,,,,,,,,,");
                rows.push(json!({ "eps": eps, "status": e.to_string() }));
                last_err = Some(e);
                continue;
            }
        };
        let depth = tree.grow(cfg.depth);
        if depth == 0 {
            let msg = tree.stop.clone().unwrap_or_default();
            let _ = writeln!(csv, "{eps},\"{msg}\",,0,,,,,,,,");
            rows.push(json!({ "eps": eps, "status": msg, "depth": 0 }));
            last_err = Some(LabError::LevelNotFound(msg));
            continue;
        }
        built_any = true;
        let deep_g = tree.generations.last().unwrap()[0].cube.g();
        let scaling = verify_scaling(&tree, deep_g)?;
        let cert = dimension_certificate(&tree)?;
        let stop = tree.stop.clone().unwrap_or_default();
        let _ = writeln!(
            csv,
            "{eps},ok,{},{depth},{},{},{},{},{},{},{},\"{stop}\"",
            tree.seed.u0.g(),
            cert.h,
            cert.h_eps,
            cert.delta_eps,
            cert.dim_floor,
            cert.min_local_exponent,
            cert.consistent as u8,
            scaling.cprime_log2
        );
        sink.write(&format!("tree_{i}.json"), &tree_json(&tree))?;
        sink.write(&format!("generations_{i}.csv"), &generation_csv(&tree))?;
        // first-split cube bounds: localization evidence
        let mut cubes_csv = String::from("generation,lo,hi\n");
        for gi in 0..=depth {
            for node in &tree.generations[gi] {
                let _ = writeln!(
                    cubes_csv,
                    "{gi},{},{}",
                    q_to_f64(&node.cube.lo(0)),
                    q_to_f64(&node.cube.hi(0))
                );
            }
        }
        sink.write(&format!("cubes_{i}.csv"), &cubes_csv)?;
        let mut samples = Vec::new();
        if !jb {
            match sample_points(&tree, cfg.count, cfg.seed) {
                Ok(pts) => {
                    let rate_sys = gen_rational(cfg.q_max);
                    let mut scsv = String::from("x,f,empirical\n");
                    for p in &pts {
                        let est = delta_empirical(&p.point[0], &rate_sys, &Q::one());
                        let _ = writeln!(
                            scsv,
                            "{},{},{}",
                            q_to_f64(&p.point[0]),
                            p.f_value,
                            est.estimate
                        );
                        samples.push(json!({ "x": q_to_f64(&p.point[0]), "f": p.f_value,
                                             "empirical": est.estimate }));
                    }
                    sink.write(&format!("samples_{i}.csv"), &scsv)?;
                }
                Err(e) => {
                    samples.push(json!({ "error": e.to_string() }));
                }
            }
        }
        let f1: Vec<Value> = tree.generations[1]
            .iter()
            .map(|n| json!([q_to_f64(&n.cube.lo(0)), q_to_f64(&n.cube.hi(0))]))
            .collect();
        rows.push(json!({
            "eps": eps, "status": "ok", "g0": tree.seed.u0.g(), "depth": depth,
            "h": cert.h, "h_eps": cert.h_eps, "delta_eps": cert.delta_eps,
            "dim_floor": cert.dim_floor, "min_local_exponent": cert.min_local_exponent,
            "consistent": cert.consistent, "cprime_log2": scaling.cprime_log2,
            "worst_node_margin_log2": scaling.worst_node_margin_log2,
            "mass_is_one": scaling.mass_total == Q::one(),
            "stop": stop, "first_split": f1, "samples": samples,
            "y_eps": q_to_f64(&tree.seed.y_eps[0]),
        }));
    }
    sink.write("certificates.csv", &csv)?;
    if !built_any {
        return Err(last_err.unwrap_or_else(|| LabError::Config("empty eps list".into())));
    }
    Ok(json!({ "rows": rows }))
}

fn run_cover(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Value> {
    let sys = cfg.build_system()?;
    let irr = irreducible(&sys);
    let profile = c1_profile(&sys, &irr, cfg.j_hi);
    let deltas = if cfg.delta_list.is_empty() {
        vec![cfg.delta]
    } else {
        cfg.delta_list.clone()
    };
    let mut csv = String::from("delta,s,verdict,last_term,partial_sum\n");
    let mut rows = Vec::new();
    for delta in &deltas {
        let s_grid = if cfg.s_list.is_empty() {
            vec![1.0 / delta - 0.1, 1.0 / delta + 0.1]
        } else {
            cfg.s_list.clone()
        };
        for s in &s_grid {
            let cs = covering_sum(&profile, *delta, *s, 1, 60);
            let _ = writeln!(
                csv,
                "{delta},{s},{},{:e},{:e}",
                cs.verdict.label(),
                cs.terms.last().unwrap().1,
                cs.partial_sums.last().unwrap()
            );
            rows.push(json!({ "delta": delta, "s": s, "verdict": cs.verdict.label() }));
            sink.write(
                &format!("cover_{delta}_{s}.csv").replace('.', "_").replace("_csv", ".csv"),
                &covering_csv(&cs),
            )?;
        }
    }
    sink.write("cover_verdicts.csv", &csv)?;
    Ok(json!({ "rows": rows }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "jb".into();
        cfg.eps_list = vec![0.2, 0.1, 0.05];
        cfg.delta = 2.0;
        cfg.omega_lo = parse_rational("1/5").unwrap();
        cfg.omega_hi = parse_rational("4/5").unwrap();
        cfg.f = "piecewise:1/5,2/5,one-plus-x;2/5,4/5,const:1.3".into();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn config_rejects_unknown_keys_with_line_numbers() {
        let err = ExperimentConfig::parse("experiment = c1\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn fspec_strings_cover_all_targets() {
        assert!(matches!(parse_fspec("const:2").unwrap(), FSpec::Const(_)));
        assert!(matches!(parse_fspec("one-plus-x").unwrap(), FSpec::OnePlusX));
        assert!(matches!(
            parse_fspec("alpha-over-x:1.5").unwrap(),
            FSpec::AlphaOverX(_)
        ));
        assert!(matches!(
            parse_fspec("two-sin-pi-x").unwrap(),
            FSpec::TwoSinPiX
        ));
        let pw = parse_fspec("piecewise:0,1/2,const:2;1/2,1,one-plus-x").unwrap();
        match pw {
            FSpec::Piecewise(p) => assert_eq!(p.len(), 2),
            _ => panic!("expected piecewise"),
        }
        assert!(parse_fspec("cubic").is_err());
    }

    #[test]
    fn c1_run_is_byte_reproducible() {
        let tmp = std::env::temp_dir().join("limsup-lab-cli-c1");
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "c1".into();
        cfg.system_kind = "dyadic".into();
        cfg.j_max = 8;
        cfg.j_hi = 8;
        cfg.out_dir = tmp.to_str().unwrap().into();
        run(&cfg).unwrap();
        let first = fs::read(tmp.join("c1_profile.csv")).unwrap();
        let m1 = fs::read(tmp.join("manifest.json")).unwrap();
        run(&cfg).unwrap();
        assert_eq!(first, fs::read(tmp.join("c1_profile.csv")).unwrap());
        assert_eq!(m1, fs::read(tmp.join("manifest.json")).unwrap());
        let manifest: Value = serde_json::from_slice(&m1).unwrap();
        // the manifest embeds the full canonical config: re-run from it alone
        let cfg2 = ExperimentConfig::parse(manifest["config"].as_str().unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn unknown_experiment_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = "nope".into();
        cfg.out_dir = std::env::temp_dir()
            .join("limsup-lab-cli-bad")
            .to_str()
            .unwrap()
            .into();
        let err = run(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
