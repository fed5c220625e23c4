//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; numeric arguments after
//! `--` select criteria. With `ACCEPTANCE_STRICT=1` the process exits
//! non-zero when any selected criterion fails.

use std::time::{Duration, Instant};

use cftp_core::coupling::{
    check_contraction, coincidence_probability, random_subsets, subsets_up_to, ContractionMode, FieldDraw,
    GrandCoupling, Joint, OptimalCoupling, PairwiseRatioCoupling,
};
use cftp_core::dynamics::{Dynamics, Exclusion, Schedule, SetConfig};
use cftp_core::exactgibbs::{check_dobrushin, check_high_noise, gamma, Limits};
use cftp_core::experiments::{cmd_coupling_diag, cmd_sample, cmd_tails, ExperimentConfig};
use cftp_core::lattice::ball;
use cftp_core::randomness::RandomField;
use cftp_core::schedules::{simulate_stage, GrowingPlan};
use cftp_core::{BoundaryCondition, Error, Region, Spec, Symbol, SymbolSet, Vertex};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

/// Uniform stream for fixture generation.
struct Stream {
    field: RandomField,
    k: u64,
}

impl Stream {
    fn new(seed: u64) -> Self {
        Stream {
            field: RandomField::new(seed),
            k: 0,
        }
    }

    fn next(&mut self) -> f64 {
        self.k += 1;
        self.field.uniform(&Vertex::origin(1), self.k, 0, 0)
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.next() * n as f64) as usize).min(n - 1)
    }
}

fn c1_coincidence() -> Outcome {
    let mut rng = Stream::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 2 + rng.below(4);
        let q = 2 + rng.below(5);
        let pmfs: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mut p: Vec<f64> = (0..q).map(|_| if rng.next() < 0.2 { 0.0 } else { rng.next() }).collect();
                if p.iter().all(|x| *x == 0.0) {
                    p[rng.below(q)] = 1.0;
                }
                let s: f64 = p.iter().sum();
                p.iter().map(|x| x / s).collect()
            })
            .collect();
        let sum_min: f64 = (0..q)
            .map(|a| pmfs.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min))
            .sum();
        let c = OptimalCoupling::from_pmfs(&pmfs).unwrap();
        let joint = Joint::exact(&c, 1 << 20).unwrap();
        let all: Vec<usize> = (0..k).collect();
        let est = coincidence_probability(&joint, c.region(), &all).unwrap();
        worst = worst.max((est.value - sum_min).abs());
    }
    outcome(worst <= 1e-12, format!("max |coincidence - sum min| = {worst:.2e} over 50 families"))
}

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text).unwrap()
}

fn c2_remark_family() -> Outcome {
    let cfg = parse("[model]\nname = ising\nbeta = 0.1\ndim = 1\n[diag]\npmfs = 0,1,1,1;1,0,1,1;1,1,0,1;1,1,1,0\n");
    let (report, _) = cmd_coupling_diag(&cfg).unwrap();
    let fam = report.pmf_family.unwrap();
    let third = 1.0 / 3.0;
    let tv_ok = (0..4).all(|i| (0..4).all(|j| i == j || fam.pairwise_tv[i][j] == third));
    let pass = tv_ok && fam.sum_min == 0.0 && fam.worst_pair_disagreement >= 0.5;
    outcome(
        pass,
        format!(
            "pairwise TV all 1/3: {tv_ok}; sum min = {}; worst pair disagreement = {:.4}",
            fam.sum_min, fam.worst_pair_disagreement
        ),
    )
}

fn c3_hardcore_gamma() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut flips = true;
    for d in [2usize, 3] {
        let v = Region::singleton(Vertex::origin(d));
        for lambda in [0.1, 0.2, 0.5] {
            let g = gamma(&Spec::hardcore(lambda, d).unwrap(), &v, &v).unwrap();
            worst = worst.max((g - 1.0 / (1.0 + lambda)).abs());
        }
        let lc = 1.0 / (2.0 * d as f64 - 1.0);
        let below = check_high_noise(&Spec::hardcore(lc - 1e-6, d).unwrap()).unwrap().pass;
        let above = check_high_noise(&Spec::hardcore(lc + 1e-6, d).unwrap()).unwrap().pass;
        flips &= below && !above;
    }
    outcome(
        worst <= 1e-15 && flips,
        format!("max |gamma - 1/(1+lambda)| = {worst:.2e}; high-noise flips at 1/(2d-1): {flips}"),
    )
}

fn c4_dobrushin() -> Outcome {
    let d = 2usize;
    let mut worst: f64 = 0.0;
    for lambda in [0.1, 0.3] {
        let v = check_dobrushin(&Spec::hardcore(lambda, d).unwrap()).unwrap();
        worst = worst.max((v.value - 2.0 * d as f64 * lambda / (1.0 + lambda)).abs());
    }
    let lc = 1.0 / (2.0 * d as f64 - 1.0);
    let below = check_dobrushin(&Spec::hardcore(lc - 1e-6, d).unwrap()).unwrap().pass;
    let above = check_dobrushin(&Spec::hardcore(lc + 1e-6, d).unwrap()).unwrap().pass;
    let flips = below && !above;
    outcome(
        worst <= 1e-12 && flips,
        format!("max |sum - 2d lambda/(1+lambda)| = {worst:.2e}; verdict flips at 1/3: {flips}"),
    )
}

fn torus_fit(model: &str, seed: u64) -> Outcome {
    let cfg = parse(&format!("{model}\n[run]\nseed = {seed}\nreplicas = 100000\n"));
    let r = cmd_sample(&cfg).unwrap();
    let fit = r.fit.unwrap();
    outcome(
        fit.tv_pass && fit.chi_pass && r.censored == 0,
        format!(
            "{} states, {} draws: TV = {:.4} (< {}), chi-square p = {:.3e} (> {}), censored {}",
            fit.states,
            fit.draws,
            fit.tv,
            fit.tv_threshold,
            fit.chi_square.p_value,
            fit.significance,
            r.censored
        ),
    )
}

fn c5_ising_torus() -> Outcome {
    torus_fit("[model]\nname = ising\nbeta = 0.15\ndim = 2\n[substrate]\nkind = torus:3x3", 5)
}

fn c6_hardcore_torus() -> Outcome {
    torus_fit("[model]\nname = hardcore\nlambda = 0.2\ndim = 2\n[substrate]\nkind = torus:4x4", 6)
}

fn c7_potts_tail() -> Outcome {
    let cfg = parse(
        "[model]\nname = potts\nq = 3\nbeta = 0\ndim = 2\n[substrate]\nkind = window\n\
         [schedule]\nkind = single-site\nexclusion = box\n[run]\nseed = 7\nreplicas = 10000\n",
    );
    let t = cmd_tails(&cfg).unwrap().table;
    let beta_u = 0.5 * 0.5f64.powi(8);
    let target = (1.0 - beta_u).ln();
    let (s, se) = (t.geometric_slope.unwrap(), t.geometric_se.unwrap());
    outcome(
        (s - target).abs() <= 3.0 * se && t.censored == 0,
        format!("slope {s:.6} vs log(1 - beta_u) = {target:.6}, 3 sigma = {:.6}", 3.0 * se),
    )
}

fn c8_ising_tail() -> Outcome {
    let cfg = parse(
        "[model]\nname = ising\nbeta = 0.1\ndim = 2\n[substrate]\nkind = window\n\
         [run]\nseed = 8\nreplicas = 100000\nhorizon_cap = 65536\n[stats]\ntail_floor = 0.001\n",
    );
    let t = cmd_tails(&cfg).unwrap().table;
    let (s, res) = (t.slope.unwrap_or(f64::NAN), t.residual.unwrap_or(f64::NAN));
    outcome(
        s < 0.0 && res < 0.15,
        format!("slope {s:.5}, RMS log-survival residual {res:.4} (< 0.15), censored {}", t.censored),
    )
}

fn c9_contraction() -> Outcome {
    let spec = Spec::ising(0.05, 2).unwrap();
    let v = ball(1, 2);
    let c = OptimalCoupling::new(&spec, &v, &v, &Limits::default()).unwrap();
    let field = RandomField::new(9);
    let joint = Joint::auto(&c, field.clone(), 20_000).unwrap();
    let nb = c.boundary().len();
    let mut sets = subsets_up_to(nb, 3);
    sets.extend(random_subsets(nb, 200, 4, &field.substream(1)));
    let r = check_contraction(&joint, &ContractionMode::TauA { sets: sets.clone() }, 3.0).unwrap();
    outcome(
        r.pass && joint.members().len() == 4096,
        format!(
            "{} boundary conditions x {} sets ({}): worst slack {:.4}, epsilon {:.3}",
            joint.members().len(),
            sets.len(),
            if joint.is_exact() { "exact joint" } else { "Monte Carlo, 20000 draws, z = 3" },
            r.worst_slack,
            r.epsilon
        ),
    )
}

fn c10_pairwise() -> Outcome {
    let spec = Spec::ising(0.1, 2).unwrap();
    let v = ball(3, 2);
    let u = Region::singleton(Vertex::origin(2));
    let bv = v.boundary();
    let tau = BoundaryCondition::constant(bv.clone(), 0);
    let tau2 = BoundaryCondition::constant(bv, 1);
    let c = PairwiseRatioCoupling::new(&spec, &v, &u, &tau, &tau2, &Limits::default()).unwrap();
    let tv = c.u_tv().unwrap();
    let field = RandomField::new(10);
    let n = 100_000u64;
    let origin = Vertex::origin(2);
    let mut violations = 0u64;
    let mut differ = 0u64;
    for t in 0..n {
        let (b_equal, _, u_equal) = c.sample_events(&FieldDraw::new(&field, origin, t));
        if b_equal && !u_equal {
            violations += 1;
        }
        if !u_equal {
            differ += 1;
        }
    }
    let p = differ as f64 / n as f64;
    let se = (p.max(tv) * (1.0 - p.max(tv)) / n as f64).sqrt();
    outcome(
        violations == 0 && p >= tv - 3.0 * se,
        format!("{violations} pathwise violations in {n} draws; P(differ on U) = {p:.5} vs TV {tv:.5} - 3 sigma"),
    )
}

fn random_spec(rng: &mut Stream, d: usize) -> Spec {
    match rng.below(6) {
        0 => Spec::ising(0.05 + 0.6 * rng.next(), d),
        1 => Spec::potts(3, 0.8 * rng.next(), d),
        2 => Spec::hardcore(0.1 + 2.0 * rng.next(), d),
        3 => Spec::coloring(3 + rng.below(2), d),
        4 => Spec::widom_rowlinson(2, 0.2 + rng.next(), d),
        _ => Spec::beach(0.3 + rng.next(), d),
    }
    .unwrap()
}

fn single_site(spec: &Spec, ex: Exclusion) -> Schedule {
    cftp_core::schedules::single_site_schedule(spec, ex).unwrap()
}

fn c11_soundness() -> Outcome {
    let mut rng = Stream::new(11);
    let mut checked = 0u64;
    let mut failures = Vec::new();
    let mut widening_pairs = 0;
    for case in 0..500u64 {
        let d = 1 + rng.below(2);
        let spec = random_spec(&mut rng, d);
        let ex = if rng.next() < 0.5 { Exclusion::L1Ball } else { Exclusion::Box };
        let sched = single_site(&spec, ex);
        let field = RandomField::new(1000 + case);
        let dy = Dynamics::new(&spec, &sched, &field).unwrap();
        let win = ball(2, d);
        let target = ball(1, d);
        let feasible = spec.feasible_symbols();
        let mut sc = SetConfig::full(win.clone(), &spec);
        let mut product: u64 = (feasible.len() as u64).pow(win.len() as u32);
        for s in sc.sets.iter_mut() {
            if product <= 1 << 12 && rng.next() < 0.5 {
                continue;
            }
            let vals: Vec<Symbol> = feasible.iter().collect();
            *s = SymbolSet::singleton(vals[rng.below(vals.len())]);
            product /= feasible.len() as u64;
        }
        let n = (1..400u32)
            .find(|n| target.iter().any(|x| dy.update_set(x, *n).is_some()))
            .unwrap();
        let slow = dy.brute_force_sets(&sc, &target, n, 1 << 16).unwrap();
        match dy.step_sets(&sc, &target, n) {
            Ok((fast, _)) => {
                for (a, b) in slow.sets.iter().zip(&fast.sets) {
                    checked += 1;
                    if !a.is_subset_of(b) {
                        failures.push(format!("case {case}: {}", spec.name()));
                    }
                }
            }
            Err(Error::InfeasibleBoundary) => {
                if slow.sets.iter().any(|s| !s.is_empty()) {
                    failures.push(format!("case {case}: infeasible but images exist"));
                }
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    for case in 0..40u64 {
        let spec = match case % 3 {
            0 => Spec::ising(0.05 + 0.1 * rng.next(), 2),
            1 => Spec::potts(3, 0.1 * rng.next(), 2),
            _ => Spec::hardcore(0.05 + 0.2 * rng.next(), 2),
        }
        .unwrap();
        let sched = single_site(&spec, Exclusion::L1Ball);
        let field = RandomField::new(5000 + case);
        let origin = Vertex::origin(2);
        let narrow = Dynamics::new(&spec, &sched, &field).unwrap().with_exhaustion_limit(2);
        let full = Dynamics::new(&spec, &sched, &field).unwrap();
        if let (Ok(a), Ok(b)) = (full.cftp_value(&origin, 1 << 12), narrow.cftp_value(&origin, 512)) {
            widening_pairs += 1;
            if a.value != b.value {
                failures.push(format!("widening case {case}: values differ"));
            }
        }
    }
    outcome(
        failures.is_empty() && widening_pairs > 0,
        format!(
            "500 windows, {checked} site sets contain every image, {widening_pairs} widening pairs agree; failures: {:?}",
            failures
        ),
    )
}

fn c12_growing() -> Outcome {
    let spec = Spec::potts(3, 0.0, 2).unwrap();
    let lim = Limits::default();
    let plan = GrowingPlan::build(&spec, 0.25, 0.1, 2, 4, &lim).unwrap();
    let ells: Vec<u64> = plan.stages.iter().map(|s| s.ell).collect();
    // δ = 1/4, d = 2: ℓ_{n+1} > 32 (ℓ_1 + ... + ℓ_n).
    let oracle = (1..ells.len()).all(|n| ells[n] > 32 * ells[..n].iter().sum::<u64>());
    let growth = plan.satisfies_growth() && oracle && ells.len() == 4;
    let first = GrowingPlan::build(&spec, 0.25, 0.1, 2, 1, &lim).unwrap();
    let sched = first.schedule(&spec, &lim, Exclusion::L1Ball).unwrap();
    let trial = simulate_stage(&spec, &first, &sched, 1, 20_000, 12).unwrap();
    outcome(
        growth && trial.pass,
        format!(
            "ells {ells:?} satisfy growth: {growth}; stage 1 success {}/{} vs bound {:.3e} - 3 sigma",
            trial.successes, trial.trials, trial.bound
        ),
    )
}

const CRITERIA: &[(u32, &str, Check, u64)] = &[
    (1, "optimal coupling coincidence", c1_coincidence, 1),
    (2, "four-law fixture", c2_remark_family, 1),
    (3, "hard-core single-site gamma", c3_hardcore_gamma, 1),
    (4, "hard-core Dobrushin sum", c4_dobrushin, 1),
    (5, "exactness, Ising 3x3 torus", c5_ising_torus, 600),
    (6, "exactness, hard-core 4x4 torus", c6_hardcore_torus, 600),
    (7, "geometric tail, Potts beta = 0", c7_potts_tail, 120),
    (8, "log-linear tail, Ising beta = 0.1", c8_ising_tail, 900),
    (9, "contraction sweep", c9_contraction, 1800),
    (10, "pairwise ratio coupling", c10_pairwise, 300),
    (11, "set propagation soundness", c11_soundness, 300),
    (12, "growing schedule", c12_growing, 120),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for &(id, name, check, budget) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {failed} failing");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
