use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use selective_iv::inference::{conditional_pvalue, Tail};
use selective_iv::randomization::truncated_std_normal;
use selective_iv::sim::{ks_distance, ks_two_sample};
use selective_iv::sisvive::{kkt_residual, solve_with_omega};
use selective_iv::{Grams, InstrumentSet, IvData, NaiveStatistic, TuningParams};

fn data(seed: u64, n: usize, l: usize, alpha0: f64) -> IvData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = &z * DVector::from_element(l, 0.7) + &xi;
    let mut alpha = DVector::zeros(l);
    alpha[0] = alpha0;
    let y = &d + &z * alpha + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) + 0.5 * xi;
    IvData::new(y, d, z).unwrap()
}

fn permuted(data: &IvData, perm: &[usize]) -> IvData {
    let z = DMatrix::from_fn(data.n(), perm.len(), |i, c| data.z()[(i, perm[c])]);
    IvData::new(data.y().clone(), data.d().clone(), z).unwrap()
}

fn omega_draw(seed: u64, p: usize, sd: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pvalues_lie_in_unit_interval_and_are_order_free(
        mut xs in prop::collection::vec(-5.0f64..5.0, 1..60),
        obs in -6.0f64..6.0,
    ) {
        for tail in [Tail::Right, Tail::Left, Tail::TwoSided] {
            let p = conditional_pvalue(&xs, obs, tail).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let mut rev = xs.clone();
            rev.reverse();
            prop_assert_eq!(p, conditional_pvalue(&rev, obs, tail).unwrap());
        }
        xs.sort_by(f64::total_cmp);
        let r = conditional_pvalue(&xs, obs, Tail::Right).unwrap();
        let r_higher = conditional_pvalue(&xs, obs + 1.0, Tail::Right).unwrap();
        prop_assert!(r_higher <= r);
    }

    #[test]
    fn ks_distances_are_bounded(xs in prop::collection::vec(0.0f64..1.0, 1..80), ys in prop::collection::vec(0.0f64..1.0, 1..80)) {
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        prop_assert!((0.0..=1.0).contains(&d));
        let d2 = ks_two_sample(&xs, &ys);
        prop_assert!((0.0..=1.0).contains(&d2));
        prop_assert!((d2 - ks_two_sample(&ys, &xs)).abs() < 1e-12);
        prop_assert_eq!(ks_two_sample(&xs, &xs), 0.0);
    }

    #[test]
    fn truncated_normal_stays_in_bounds(seed in any::<u64>(), a in -8.0f64..8.0, w in 1e-3f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x = truncated_std_normal(&mut rng, a, a + w);
            prop_assert!(x >= a && x <= a + w, "{} not in [{}, {}]", x, a, a + w);
        }
    }

    #[test]
    fn instrument_sets_partition_indices(idx in prop::collection::vec(0usize..12, 0..12)) {
        let s = InstrumentSet::new(idx.clone(), 12).unwrap();
        let comp = s.complement(12);
        prop_assert_eq!(s.len() + comp.len(), 12);
        prop_assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&j| s.contains(j)));
        prop_assert!(comp.iter().all(|&j| !s.contains(j)));
    }

    #[test]
    fn naive_intervals_are_ordered_around_the_estimate(seed in 0u64..1000, level in 0.5f64..0.99) {
        let d = data(seed, 120, 5, 2.0);
        let g = Grams::from_data(&d);
        let r = g.restrict(&InstrumentSet::new(vec![0], 5).unwrap()).unwrap();
        let est = r.tsls_estimate().unwrap();
        for stat in [NaiveStatistic::Tsls, NaiveStatistic::Ar] {
            let ci = r.naive_interval(level, stat).unwrap();
            prop_assert!(ci.length() >= 0.0);
            if stat == NaiveStatistic::Tsls {
                prop_assert!(ci.contains(est));
            }
        }
        let wider = r.naive_interval(level.max(0.99), NaiveStatistic::Tsls).unwrap();
        prop_assert!(wider.length() + 1e-12 >= r.naive_interval(level, NaiveStatistic::Tsls).unwrap().length());
    }

    #[test]
    fn tsls_is_invariant_to_rescaling_the_grams(seed in 0u64..1000, c in 0.01f64..100.0) {
        let g = Grams::from_data(&data(seed, 100, 4, 1.0));
        let gc = g.scaled(c);
        let e = InstrumentSet::new(vec![0], 4).unwrap();
        let (a, b) = (g.restrict(&e).unwrap(), gc.restrict(&e).unwrap());
        let (ba, bb) = (a.tsls_estimate().unwrap(), b.tsls_estimate().unwrap());
        prop_assert!((ba - bb).abs() < 1e-9 * (1.0 + ba.abs()));
        prop_assert!((a.tsls_statistic(0.3).unwrap() - b.tsls_statistic(0.3).unwrap()).abs() < 1e-8);
        prop_assert!((a.ar_statistic(0.3) - b.ar_statistic(0.3)).abs() < 1e-8 * (1.0 + a.ar_statistic(0.3)));
    }

    #[test]
    fn statistics_do_not_depend_on_instrument_order(seed in 0u64..1000, rot in 1usize..5) {
        let l = 5;
        let d = data(seed, 100, l, 1.5);
        let perm: Vec<usize> = (0..l).map(|i| (i + rot) % l).collect();
        let dp = permuted(&d, &perm);
        // original instrument 0 sits where perm maps to it
        let pos0 = perm.iter().position(|&j| j == 0).unwrap();
        let a = Grams::from_data(&d);
        let b = Grams::from_data(&dp);
        let ra = a.restrict(&InstrumentSet::new(vec![0], l).unwrap()).unwrap();
        let rb = b.restrict(&InstrumentSet::new(vec![pos0], l).unwrap()).unwrap();
        prop_assert!((ra.tsls_estimate().unwrap() - rb.tsls_estimate().unwrap()).abs() < 1e-9);
        prop_assert!((ra.ar_statistic(1.0) - rb.ar_statistic(1.0)).abs() < 1e-8);
    }

    #[test]
    fn selection_is_scale_equivariant(seed in 0u64..500, c in 0.1f64..10.0) {
        let g = Grams::from_data(&data(seed, 150, 4, 3.0));
        let tuning = TuningParams::new(60.0, 0.5).unwrap();
        let omega = omega_draw(seed, 5, 5.0);
        let a = solve_with_omega(&g, &tuning, &omega).unwrap();
        let omega_c: Vec<f64> = omega.iter().map(|w| w * c).collect();
        let b = solve_with_omega(&g.scaled(c), &tuning.scaled(c), &omega_c).unwrap();
        prop_assert_eq!(&a.set, &b.set);
        prop_assert_eq!(&a.signs, &b.signs);
        prop_assert!((a.beta_hat - b.beta_hat).abs() < 1e-6 * (1.0 + a.beta_hat.abs()));
        prop_assert!(kkt_residual(&g, &a) < 1e-6 * tuning.lambda);
    }

    #[test]
    fn selection_solution_satisfies_kkt(seed in 0u64..500, lambda in 1.0f64..400.0) {
        let g = Grams::from_data(&data(seed, 120, 5, 2.5));
        let tuning = TuningParams::new(lambda, 0.01).unwrap();
        let sel = solve_with_omega(&g, &tuning, &omega_draw(seed + 1, 6, 10.0)).unwrap();
        prop_assert!(kkt_residual(&g, &sel) < 1e-6 * lambda);
        prop_assert!(sel.u_hat.iter().all(|u| u.abs() <= 1.0 + 1e-9));
        for (&j, &s) in sel.set.indices().iter().zip(&sel.signs) {
            prop_assert!((sel.alpha_hat[j] * s as f64) > 0.0);
            prop_assert!((sel.u_hat[j] - s as f64).abs() < 1e-9);
        }
    }
}
