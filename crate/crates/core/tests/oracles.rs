//! Statistics and data generation checked against direct dense-matrix
//! computations that do not go through the gram summaries.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use selective_iv::sim::{generate, replication_rng, SimConfig};
use selective_iv::summary::{reconstruct_grams, SummaryData};
use selective_iv::{Grams, InstrumentSet, IvData, NaiveStatistic};

fn projector(x: &DMatrix<f64>) -> DMatrix<f64> {
    if x.ncols() == 0 {
        return DMatrix::zeros(x.nrows(), x.nrows());
    }
    let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
    x * xtx_inv * x.transpose()
}

fn columns(z: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), idx.len(), |i, c| z[(i, idx[c])])
}

fn random_data(seed: u64, n: usize, l: usize) -> IvData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = &z * DVector::from_element(l, 0.6) + &xi;
    let mut alpha = DVector::zeros(l);
    alpha[0] = 1.5;
    let y = &d * 0.7 + &z * alpha + 0.5 * xi + e;
    IvData::new(y, d, z).unwrap()
}

#[test]
fn tsls_matches_two_stage_regression() {
    let data = random_data(1, 150, 5);
    let g = Grams::from_data(&data);
    for set in [vec![], vec![0], vec![0, 3]] {
        let e = InstrumentSet::new(set.clone(), 5).unwrap();
        let r = g.restrict(&e).unwrap();
        // second stage of Y on [Z_E, D] with instruments Z
        let mut x = columns(data.z(), &set);
        x = x.insert_column(set.len(), 0.0);
        x.set_column(set.len(), data.d());
        let pz = projector(data.z());
        let coef = (x.transpose() * &pz * &x).try_inverse().unwrap() * x.transpose() * &pz * data.y();
        let beta = coef[set.len()];
        assert!((r.tsls_estimate().unwrap() - beta).abs() < 1e-9, "E = {set:?}");
    }
}

#[test]
fn tsls_statistic_matches_dense_formula() {
    let data = random_data(2, 120, 4);
    let (n, l) = (120.0, 4usize);
    let g = Grams::from_data(&data);
    let set = vec![1];
    let r = g.restrict(&InstrumentSet::new(set.clone(), l).unwrap()).unwrap();
    let m = projector(data.z()) - projector(&columns(data.z(), &set));
    let resid = DMatrix::identity(120, 120) - projector(data.z());
    let (y, d) = (data.y(), data.d());
    for beta0 in [-1.0, 0.0, 0.7, 2.5] {
        let u = y - d * beta0;
        let s11 = u.dot(&(&resid * &u)) / n;
        let dmd = d.dot(&(&m * d));
        let t = (d.dot(&(&m * y)) - beta0 * dmd) / (s11 * dmd).sqrt();
        assert!((r.tsls_statistic(beta0).unwrap() - t).abs() < 1e-9);
    }
}

#[test]
fn ar_statistic_matches_dense_formula() {
    let data = random_data(3, 100, 6);
    let (n, l) = (100.0, 6usize);
    let g = Grams::from_data(&data);
    let set = vec![0, 4];
    let r = g.restrict(&InstrumentSet::new(set.clone(), l).unwrap()).unwrap();
    let m = projector(data.z()) - projector(&columns(data.z(), &set));
    let resid = DMatrix::identity(100, 100) - projector(data.z());
    for beta0 in [-0.5, 0.7, 3.0] {
        let u = data.y() - data.d() * beta0;
        let num = u.dot(&(&m * &u)) / (l - set.len()) as f64;
        let den = u.dot(&(&resid * &u)) / (n - l as f64);
        assert!((r.ar_statistic(beta0) - num / den).abs() < 1e-9 * (1.0 + num / den));
    }
    assert_eq!(r.ar_df(), (4.0, 94.0));
}

#[test]
fn naive_ar_interval_endpoints_sit_on_the_critical_value() {
    let data = random_data(4, 300, 5);
    let g = Grams::from_data(&data);
    let r = g.restrict(&InstrumentSet::new(vec![0], 5).unwrap()).unwrap();
    let ci = r.naive_interval(0.95, NaiveStatistic::Ar).unwrap();
    assert!(!ci.unbounded);
    let crit = {
        use statrs::distribution::{ContinuousCDF, FisherSnedecor};
        let (a, b) = r.ar_df();
        FisherSnedecor::new(a, b).unwrap().inverse_cdf(0.95)
    };
    for end in [ci.lower, ci.upper] {
        assert!((r.ar_statistic(end) - crit).abs() < 1e-6 * crit);
    }
    assert!(ci.contains(r.tsls_estimate().unwrap()));
}

#[test]
fn centered_data_yield_centered_grams() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = DMatrix::from_fn(80, 3, |_, _| 4.0 + rng.sample::<f64, _>(StandardNormal));
    let d = DVector::from_fn(80, |i, _| z[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(80, |i, _| 10.0 + d[i] + rng.sample::<f64, _>(StandardNormal));
    let data = IvData::new(y.clone(), d.clone(), z.clone()).unwrap();
    let g = Grams::from_data(&data);
    let yc = y.add_scalar(-y.mean());
    assert!((g.yty() - yc.dot(&yc)).abs() < 1e-8 * g.yty());
    let mut zc = z.clone();
    for mut c in zc.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    assert!((g.ztz() - zc.transpose() * &zc).amax() < 1e-8);
}

#[test]
fn generated_data_reproduce_first_stage_and_error_correlation() {
    let cfg = SimConfig {
        n: 20_000,
        l: 4,
        n_invalid: 1,
        gamma_valid: 0.5,
        gamma_invalid: 1.0,
        rho: 0.6,
        ..SimConfig::default()
    };
    let (data, params) = generate(&cfg, &mut replication_rng(9, 0)).unwrap();
    let z = data.z();
    let ztz_inv = (z.transpose() * z).try_inverse().unwrap();
    let gamma_hat = &ztz_inv * z.transpose() * data.d();
    let xi = data.d() - z * &gamma_hat;
    for (gh, g) in gamma_hat.iter().zip(&params.gamma) {
        assert!((gh - g).abs() < 0.03, "{gh} vs {g}");
    }
    let alpha = DVector::from_vec(params.alpha.clone());
    let delta = data.y() - data.d() * params.beta - z * alpha;
    let n = cfg.n as f64;
    let corr = delta.dot(&xi) / (delta.norm() * xi.norm());
    assert!((corr - 0.6).abs() < 0.03, "{corr}");
    assert!((xi.norm_squared() / n - 1.0).abs() < 0.05);
    assert!((delta.norm_squared() / n - 1.0).abs() < 0.05);
}

#[test]
fn summary_round_trip_recovers_ratio_estimates() {
    let data = random_data(6, 400, 5);
    let s = SummaryData::from_individual(&data).unwrap();
    // per-instrument Wald ratios from marginal regressions
    for j in 0..5 {
        let zj = data.z().column(j);
        let zz = zj.dot(&zj);
        let by = zj.dot(data.y()) / zz;
        let bd = zj.dot(data.d()) / zz;
        assert!((s.beta_outcome[j] - by).abs() < 1e-10);
        assert!((s.beta_exposure[j] - bd).abs() < 1e-10);
    }
    let gs = reconstruct_grams(&s);
    assert!(!gs.inconsistent_scale());
    let g = gs.to_grams(1.0).unwrap();
    for j in 0..5 {
        let ratio = g.zty()[j] / g.ztd()[j];
        assert!((ratio - s.beta_outcome[j] / s.beta_exposure[j]).abs() < 1e-10);
    }
}
