use proptest::prelude::*;

use cftp_core::coupling::{
    coincidence_probability, kappa, lambda_psi, lambda_tau_a, FieldDraw, GrandCoupling, Joint, OptimalCoupling, Psi,
};
use cftp_core::dynamics::{chosen, Exclusion};
use cftp_core::exactgibbs::{
    check_dobrushin, check_high_noise, conditional_dist, gamma, marginal, torus_gibbs, tv_distance, Limits,
};
use cftp_core::lattice::ball;
use cftp_core::randomness::RandomField;
use cftp_core::schedules::{fixed_schedule, CouplingKind};
use cftp_core::{BoundaryCondition, Region, Spec, Symbol, SymbolSet, Torus, Vertex};

fn spec_strategy(d: usize) -> impl Strategy<Value = Spec> {
    prop_oneof![
        (0.0..1.0f64).prop_map(move |b| Spec::ising(b, d).unwrap()),
        (0.0..0.8f64).prop_map(move |b| Spec::potts(3, b, d).unwrap()),
        (0.05..3.0f64).prop_map(move |l| Spec::hardcore(l, d).unwrap()),
        (0.1..2.0f64).prop_map(move |l| Spec::widom_rowlinson(2, l, d).unwrap()),
        Just(Spec::coloring(3, d).unwrap()),
    ]
}

fn pmf_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 2usize..5).prop_flat_map(|(q, k)| {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, q), k).prop_map(|rows| {
            rows.into_iter()
                .map(|mut r| {
                    if r.iter().sum::<f64>() == 0.0 {
                        r[0] = 1.0;
                    }
                    let s: f64 = r.iter().sum();
                    r.iter().map(|x| x / s).collect()
                })
                .collect()
        })
    })
}

/// Marginal at the origin of the segment `[-n, n]` with boundary values at
/// `-n-1` and `n+1`, by forward and backward messages.
fn chain_marginal(spec: &Spec, n: i32, left: Symbol, right: Symbol) -> Vec<f64> {
    let q = spec.q();
    let w = |s: usize| spec.vertex_weight(s as Symbol);
    let e = |a: usize, b: usize| spec.edge_weight(a as Symbol, b as Symbol);
    let pass = |from: Symbol| {
        let mut m: Vec<f64> = (0..q).map(|x| w(x) * e(from as usize, x)).collect();
        for _ in 0..n {
            m = (0..q).map(|y| (0..q).map(|x| m[x] * e(x, y)).sum::<f64>() * w(y)).collect();
        }
        m
    };
    let (l, r) = (pass(left), pass(right));
    let un: Vec<f64> = (0..q).map(|a| if w(a) > 0.0 { l[a] * r[a] / w(a) } else { 0.0 }).collect();
    let z: f64 = un.iter().sum();
    un.iter().map(|x| x / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conditional_laws_are_normalized(spec in spec_strategy(2), seed in 0u64..1000) {
        let v = ball(1, 2);
        let bv = v.boundary();
        let f = RandomField::new(seed);
        let vals: Vec<Symbol> = bv.iter().map(|x| {
            let feas: Vec<Symbol> = spec.feasible_symbols().iter().collect();
            feas[(f.uniform(x, 0, 0, 0) * feas.len() as f64) as usize % feas.len()]
        }).collect();
        let tau = BoundaryCondition::new(bv, vals).unwrap();
        if let Ok(p) = conditional_dist(&spec, &v, &tau) {
            prop_assert!((p.total() - 1.0).abs() < 1e-12);
            prop_assert!(p.probs().iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn one_dimensional_marginals_match_transfer_matrices(
        spec in spec_strategy(1), n in 0i32..4, l in 0u8..3, r in 0u8..3,
    ) {
        let q = spec.q() as u8;
        let (l, r) = ((l % q) as Symbol, (r % q) as Symbol);
        let v = ball(n as u32, 1);
        let tau = BoundaryCondition::new(v.boundary(), vec![l, r]).unwrap();
        let oracle = chain_marginal(&spec, n, l, r);
        if oracle.iter().any(|x| x.is_nan()) {
            prop_assert!(conditional_dist(&spec, &v, &tau).is_err());
        } else {
            let p = marginal(&conditional_dist(&spec, &v, &tau).unwrap(), &Region::singleton(Vertex::origin(1))).unwrap();
            for (cfg, x) in p.iter() {
                prop_assert!((x - oracle[cfg[0] as usize]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ring_law_matches_transfer_matrix(beta in 0.0..1.5f64, len in 3u32..8) {
        let spec = Spec::ising(beta, 1).unwrap();
        let law = torus_gibbs(&spec, &Torus::new(&[len]).unwrap()).unwrap();
        // Ising ring: Z = (e^b + 1)^n + (e^b - 1)^n with edge weights e^b on equal spins.
        let eb = spec.edge_weight(0, 0) / spec.edge_weight(0, 1);
        let z = (eb + 1.0).powi(len as i32) + (eb - 1.0).powi(len as i32);
        let all_equal = vec![0 as Symbol; len as usize];
        prop_assert!((law.prob_of(&all_equal) - eb.powi(len as i32) / z).abs() < 1e-12);
    }

    #[test]
    fn gamma_shrinks_as_u_grows(spec in spec_strategy(1)) {
        let v = ball(1, 1);
        let g0 = gamma(&spec, &v, &ball(0, 1)).unwrap();
        let g1 = gamma(&spec, &v, &v).unwrap();
        prop_assert!(g1 <= g0 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&g0));
    }

    #[test]
    fn high_noise_implies_dobrushin(spec in spec_strategy(2)) {
        if check_high_noise(&spec).unwrap().pass {
            prop_assert!(check_dobrushin(&spec).unwrap().pass);
        }
    }

    #[test]
    fn tv_is_the_largest_event_difference(pmfs in pmf_strategy()) {
        let (p, q) = (&pmfs[0], &pmfs[1]);
        let k = p.len();
        let best = (0u32..1 << k)
            .map(|m| (0..k).filter(|i| m >> i & 1 == 1).map(|i| p[i] - q[i]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let a = cftp_core::exactgibbs::Pmf::single_site(p).unwrap();
        let b = cftp_core::exactgibbs::Pmf::single_site(q).unwrap();
        prop_assert!((tv_distance(&a, &b).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn optimal_coupling_has_exact_marginals(pmfs in pmf_strategy()) {
        let c = OptimalCoupling::from_pmfs(&pmfs).unwrap();
        let joint = Joint::exact(&c, 1 << 20).unwrap();
        let q = pmfs[0].len();
        for (t, p) in pmfs.iter().enumerate() {
            for a in 0..q {
                let m = joint.expect(|out| (out[t][0] as usize == a) as u8 as f64).value;
                prop_assert!((m - p[a]).abs() < 1e-12);
            }
        }
        let all: Vec<usize> = (0..pmfs.len()).collect();
        let sum_min: f64 = (0..q).map(|a| pmfs.iter().map(|p| p[a]).fold(1.0, f64::min)).sum();
        let co = coincidence_probability(&joint, c.region(), &all).unwrap().value;
        prop_assert!((co - sum_min).abs() < 1e-12);
    }

    #[test]
    fn coupling_is_a_function_of_the_draw(seed in 0u64..10_000, t in 0u64..1000) {
        let spec = Spec::ising(0.3, 2).unwrap();
        let v = Region::singleton(Vertex::origin(2));
        let c = OptimalCoupling::new(&spec, &v, &v, &Limits::default()).unwrap();
        let f = RandomField::new(seed);
        let d = FieldDraw::new(&f, Vertex::origin(2), t);
        let tau = c.members().unwrap()[(seed % 16) as usize].clone();
        prop_assert_eq!(c.sample(&tau, &d).unwrap(), c.sample(&tau, &d).unwrap());
    }

    #[test]
    fn exclusion_keeps_chosen_blocks_apart(seed in 0u64..10_000, n in 1u32..50) {
        let spec = Spec::ising(0.0, 2).unwrap();
        let b = ball(1, 2);
        let s = fixed_schedule(&spec, &b, &CouplingKind::Product, &Limits::default(), Exclusion::L1Ball).unwrap();
        let f = RandomField::new(seed);
        let r = s.stage(n).unwrap().r();
        let picked: Vec<Vertex> = (0..900)
            .map(|i| Vertex::new(&[i % 30, i / 30]))
            .filter(|u| chosen(&f, &s, u, n))
            .collect();
        for (i, a) in picked.iter().enumerate() {
            for c in &picked[i + 1..] {
                prop_assert!(a.l1(c) > r);
            }
        }
    }

    #[test]
    fn uniforms_are_in_range_and_stable(seed: u64, x in -50i32..50, t in 0u64..1 << 40) {
        let f = RandomField::new(seed);
        let v = Vertex::new(&[x, -x]);
        let u = f.uniform(&v, t, 3, 1);
        prop_assert!((0.0..1.0).contains(&u));
        prop_assert_eq!(u, RandomField::new(seed).uniform(&v, t, 3, 1));
    }
}

#[test]
fn diagnostics_relations_on_a_small_block() {
    let spec = Spec::ising(0.4, 1).unwrap();
    let v = ball(1, 1);
    let c = OptimalCoupling::new(&spec, &v, &v, &Limits::default()).unwrap();
    let joint = Joint::exact(&c, 1 << 20).unwrap();
    let nb = c.boundary().len();
    let k = kappa(&joint).value;
    for t in 0..joint.members().len() {
        let all: Vec<usize> = (0..nb).collect();
        let full = lambda_tau_a(&joint, t, &all).unwrap().value;
        assert!((full - (1.0 - k)).abs() < 1e-12);
        let one = lambda_tau_a(&joint, t, &[0]).unwrap().value;
        assert!(one <= full + 1e-12);
        let tau = &joint.members()[t];
        let eta: Vec<SymbolSet> = tau
            .iter()
            .enumerate()
            .map(|(b, s)| if b == 0 { SymbolSet::full(spec.q()) } else { SymbolSet::singleton(*s) })
            .collect();
        let psi = lambda_psi(&joint, &Psi::Indicator, &eta).unwrap().value;
        assert!((psi - one).abs() < 1e-12);
    }
}

#[test]
fn three_and_four_law_fixtures() {
    for k in [3usize, 4] {
        let pmfs: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|a| if a == i { 0.0 } else { 1.0 / (k - 1) as f64 }).collect())
            .collect();
        let c = OptimalCoupling::from_pmfs(&pmfs).unwrap();
        assert_eq!(c.gamma(), 0.0);
        let joint = Joint::exact(&c, 1 << 20).unwrap();
        let all: Vec<usize> = (0..k).collect();
        assert_eq!(coincidence_probability(&joint, c.region(), &all).unwrap().value, 0.0);
        let a = cftp_core::exactgibbs::Pmf::single_site(&pmfs[0]).unwrap();
        let b = cftp_core::exactgibbs::Pmf::single_site(&pmfs[1]).unwrap();
        let tv = tv_distance(&a, &b).unwrap();
        assert!((tv - 1.0 / (k - 1) as f64).abs() < 1e-15);
    }
}
