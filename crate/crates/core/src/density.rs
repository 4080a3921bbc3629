//! Conditional laws of the test statistics given the selection event.
//!
//! Each law is a Gaussian base density for the statistic `t`, reweighted by
//! the randomization density evaluated at the reconstructed randomization
//!
//! ```text
//! omega(t, alpha, beta, u) = K1 t + K2 (alpha; beta) + lambda (u; 0) - K3
//! ```
//!
//! and restricted to the event `B` (fixed signs on `alpha_E`, zeros off `E`,
//! `|u_{-E}| <= 1`). `K3` absorbs the part of the score that is held fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::InstrumentSet;
use crate::error::{Error, Result};
use crate::grams::{Grams, Restricted};
use crate::randomization::RandomizationSpec;
use crate::sisvive::{ridge_hessian, SelectionResult};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Relative eigenvalue cutoff for the support of the AR intermediate.
const EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    /// Standardized TSLS statistic (null-imposed variance).
    TslsStat,
    /// TSLS estimator (plug-in variance).
    TslsEst,
    /// Anderson–Rubin intermediate `Z'(I - P_{Z_E})(Y - D beta0)`.
    ArIntermediate,
}

impl std::str::FromStr for DensityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "tsls-stat" | "tsls" => Ok(Self::TslsStat),
            "tsls-est" => Ok(Self::TslsEst),
            "ar" | "ar-intermediate" => Ok(Self::ArIntermediate),
            other => Err(Error::InvalidInput(format!("unknown statistic `{other}`"))),
        }
    }
}

impl DensityKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TslsStat => "tsls-stat",
            Self::TslsEst => "tsls-est",
            Self::ArIntermediate => "ar",
        }
    }

    /// Classical counterpart used for the naive interval.
    pub fn naive_statistic(&self) -> crate::grams::NaiveStatistic {
        match self {
            Self::ArIntermediate => crate::grams::NaiveStatistic::Ar,
            _ => crate::grams::NaiveStatistic::Tsls,
        }
    }
}

/// Point in the sampling space. For the AR law `t` holds coordinates in the
/// eigenbasis of the intermediate's covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub t: Vec<f64>,
    pub beta: f64,
    pub alpha_e: Vec<f64>,
    pub u_inactive: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DensitySpec {
    kind: DensityKind,
    beta0: f64,
    mu_t: Vec<f64>,
    /// Diagonal variances of `t` (in reduced coordinates for AR).
    var_t: Vec<f64>,
    /// Eigenbasis of `Z'(I - P_{Z_E})Z` restricted to its range (AR only).
    basis: Option<DMatrix<f64>>,
    /// `V' (Z'Z)^{-1} V` for mapping reduced coordinates to the AR statistic.
    ar_form: Option<DMatrix<f64>>,
    ar_resid_term: f64,
    k1: DMatrix<f64>,
    k2: DMatrix<f64>,
    k3: DVector<f64>,
    /// `lambda (s_E; 0) - K3` with `s_E` scattered onto `E`.
    offset: DVector<f64>,
    log_jacobian: f64,
    set: InstrumentSet,
    inactive: Vec<usize>,
    signs: Vec<f64>,
    lambda: f64,
    epsilon: f64,
    rand: RandomizationSpec,
    t_obs: Vec<f64>,
    stat_obs: f64,
    log_norm_t: f64,
}

/// Builds the conditional law at null value `beta0`.
pub fn build_density(
    grams: &Grams,
    sel: &SelectionResult,
    beta0: f64,
    kind: DensityKind,
    rand: &RandomizationSpec,
) -> Result<DensitySpec> {
    let l = grams.n_instruments();
    let p = l + 1;
    if sel.n_instruments() != l || rand.dim() != p {
        return Err(Error::InvalidInput("selection, randomization and data dimensions disagree".into()));
    }
    if !beta0.is_finite() {
        return Err(Error::InvalidInput("beta0 must be finite".into()));
    }
    let r = grams.restrict(&sel.set)?;
    let dpd = r.dpd()?;
    let score = grams.score();
    let mut zpd_full = DVector::zeros(p);
    zpd_full.rows_mut(0, l).copy_from(r.zpd());
    zpd_full[l] = dpd;

    let (mu_t, var_t, k1, t_obs, stat_obs, basis, ar_form, ar_resid_term) = match kind {
        DensityKind::TslsStat => {
            let s11 = r.sigma_hat(beta0)[(0, 0)];
            check_variance(s11)?;
            let cross = &zpd_full * (s11 / dpd).sqrt();
            let t = r.tsls_statistic(beta0)?;
            (vec![0.0], vec![1.0], DMatrix::from_columns(&[-cross]), vec![t], t, None, None, 0.0)
        }
        DensityKind::TslsEst => {
            let s11 = r.sigma_hat_plugin()?[(0, 0)];
            check_variance(s11)?;
            let t = r.tsls_estimate()?;
            (
                vec![beta0],
                vec![s11 / dpd],
                DMatrix::from_columns(&[-&zpd_full]),
                vec![t],
                t,
                None,
                None,
                0.0,
            )
        }
        DensityKind::ArIntermediate => {
            let s11 = r.sigma_hat(beta0)[(0, 0)];
            check_variance(s11)?;
            let (v, eig) = range_eigenbasis(&r)?;
            let k = eig.len();
            let mut k1 = DMatrix::zeros(p, k);
            k1.view_mut((0, 0), (l, k)).copy_from(&(-&v));
            for c in 0..k {
                k1[(l, c)] = -r.zpd().dot(&v.column(c)) / eig[c];
            }
            let s_obs = v.transpose() * r.ar_intermediate(beta0);
            let form = v.transpose() * grams.ztz_inverse() * &v;
            let resid_term = r.ar_denominator(beta0);
            let stat = r.ar_statistic(beta0);
            (
                vec![0.0; k],
                eig.iter().map(|e| s11 * e).collect(),
                k1,
                s_obs.iter().copied().collect(),
                stat,
                Some(v),
                Some(form),
                resid_term,
            )
        }
    };

    let t_vec = DVector::from_column_slice(&t_obs);
    let k3 = &score + &k1 * &t_vec;
    let k2 = ridge_hessian(grams, sel.tuning.epsilon);
    let signs = sel.signs_f64();
    let mut offset = -&k3;
    for (&j, &s) in sel.set.indices().iter().zip(&signs) {
        offset[j] += sel.tuning.lambda * s;
    }
    let log_jacobian = log_jacobian(&k2, &sel.set, l, sel.tuning.lambda)?;
    let log_norm_t = var_t.iter().map(|v| -0.5 * (LN_2PI + v.ln())).sum();

    Ok(DensitySpec {
        kind,
        beta0,
        mu_t,
        var_t,
        basis,
        ar_form,
        ar_resid_term,
        k1,
        k2,
        k3,
        offset,
        log_jacobian,
        set: sel.set.clone(),
        inactive: sel.set.complement(l),
        signs,
        lambda: sel.tuning.lambda,
        epsilon: sel.tuning.epsilon,
        rand: rand.clone(),
        t_obs,
        stat_obs,
        log_norm_t,
    })
}

fn check_variance(s11: f64) -> Result<()> {
    if !(s11.is_finite() && s11 > 0.0) {
        return Err(Error::NegativeVariance(s11));
    }
    Ok(())
}

/// Eigenvectors of `Z'(I - P_{Z_E})Z` with non-negligible eigenvalues.
fn range_eigenbasis(r: &Restricted<'_>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = r.m();
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > EIGEN_TOL * max)
        .collect();
    let expected = r.inactive().len();
    if keep.len() != expected {
        return Err(Error::InvalidInput(format!(
            "instrument covariance has rank {} after partialling out E, expected {expected}",
            keep.len()
        )));
    }
    let v = eig.eigenvectors.select_columns(&keep);
    let vals = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok((v, vals))
}

/// `log det(K2 on (Z_E, D)) + (L - |E|) log lambda`.
pub fn log_jacobian(k2: &DMatrix<f64>, set: &InstrumentSet, l: usize, lambda: f64) -> Result<f64> {
    let idx: Vec<usize> = set.indices().iter().copied().chain([l]).collect();
    let block = k2.select_rows(&idx).select_columns(&idx);
    let chol = block
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("Jacobian block is not positive definite".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(log_det + (l - set.len()) as f64 * lambda.ln())
}

impl DensitySpec {
    pub fn kind(&self) -> DensityKind {
        self.kind
    }
    pub fn beta0(&self) -> f64 {
        self.beta0
    }
    pub fn mu_t(&self) -> &[f64] {
        &self.mu_t
    }
    pub fn var_t(&self) -> &[f64] {
        &self.var_t
    }
    pub fn t_dim(&self) -> usize {
        self.var_t.len()
    }
    pub fn k1(&self) -> &DMatrix<f64> {
        &self.k1
    }
    pub fn k2(&self) -> &DMatrix<f64> {
        &self.k2
    }
    pub fn k3(&self) -> &DVector<f64> {
        &self.k3
    }
    pub fn log_jacobian(&self) -> f64 {
        self.log_jacobian
    }
    pub fn set(&self) -> &InstrumentSet {
        &self.set
    }
    pub fn inactive(&self) -> &[usize] {
        &self.inactive
    }
    pub fn signs(&self) -> &[f64] {
        &self.signs
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn randomization(&self) -> &RandomizationSpec {
        &self.rand
    }
    /// Observed value of the sampled quantity (reduced coordinates for AR).
    pub fn t_obs(&self) -> &[f64] {
        &self.t_obs
    }
    /// Observed value of the test statistic.
    pub fn observed_statistic(&self) -> f64 {
        self.stat_obs
    }
    /// Eigenbasis used for the AR intermediate.
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }
    pub fn n_instruments(&self) -> usize {
        self.k2.nrows() - 1
    }

    /// The sampler's starting point: observed statistic and the solution of
    /// the selection program.
    pub fn initial_state(&self, sel: &SelectionResult) -> SamplerState {
        SamplerState {
            t: self.t_obs.clone(),
            beta: sel.beta_hat,
            alpha_e: self.set.indices().iter().map(|&j| sel.alpha_hat[j]).collect(),
            u_inactive: self.inactive.iter().map(|&j| sel.u_hat[j]).collect(),
        }
    }

    /// `K1 t + K2 (alpha; beta) + lambda (u; 0) - K3`.
    pub fn omega(&self, state: &SamplerState) -> DVector<f64> {
        let l = self.n_instruments();
        let mut w = self.offset.clone();
        for (c, &tc) in state.t.iter().enumerate() {
            w.axpy(tc, &self.k1.column(c), 1.0);
        }
        for (&j, &a) in self.set.indices().iter().zip(&state.alpha_e) {
            w.axpy(a, &self.k2.column(j), 1.0);
        }
        w.axpy(state.beta, &self.k2.column(l), 1.0);
        for (&j, &u) in self.inactive.iter().zip(&state.u_inactive) {
            w[j] += self.lambda * u;
        }
        w
    }

    pub fn in_box(&self, state: &SamplerState) -> bool {
        state.alpha_e.len() == self.signs.len()
            && state.u_inactive.len() == self.inactive.len()
            && state
                .alpha_e
                .iter()
                .zip(&self.signs)
                .all(|(a, s)| a * s > 0.0)
            && state.u_inactive.iter().all(|u| u.abs() <= 1.0)
    }

    /// Log of the Gaussian base density of `t`.
    pub fn log_base(&self, t: &[f64]) -> f64 {
        self.log_norm_t
            + t.iter()
                .zip(&self.mu_t)
                .zip(&self.var_t)
                .map(|((x, m), v)| -0.5 * (x - m) * (x - m) / v)
                .sum::<f64>()
    }

    pub fn log_g(&self, omega: &DVector<f64>) -> f64 {
        self.rand.log_density(omega.as_slice())
    }

    /// Unnormalized log conditional density; `-inf` outside `B`.
    pub fn log_density(&self, state: &SamplerState) -> f64 {
        if state.t.len() != self.t_dim() || !self.in_box(state) {
            return f64::NEG_INFINITY;
        }
        self.log_base(&state.t) + self.log_g(&self.omega(state)) + self.log_jacobian
    }

    /// Test statistic implied by a sampled `t`.
    pub fn statistic(&self, t: &[f64]) -> f64 {
        match self.kind {
            DensityKind::TslsStat | DensityKind::TslsEst => t[0],
            DensityKind::ArIntermediate => {
                let s = DVector::from_column_slice(t);
                let form = self.ar_form.as_ref().expect("AR spec carries its form");
                s.dot(&(form * &s)) / self.t_dim() as f64 / self.ar_resid_term
            }
        }
    }

    /// AR statistic from a full-length intermediate `Z'(I - P_{Z_E})(Y - D beta0)`.
    pub fn ar_statistic_from_intermediate(&self, grams: &Grams, t_tilde: &DVector<f64>) -> f64 {
        let df1 = (self.n_instruments() - self.set.len()) as f64;
        let resid = if self.kind == DensityKind::ArIntermediate {
            self.ar_resid_term
        } else {
            grams.resid_quadratic(self.beta0) / (grams.n() - self.n_instruments() as f64)
        };
        t_tilde.dot(&grams.solve_ztz(t_tilde)) / df1 / resid
    }

    /// Centres `Delta` of the inactive-subgradient intervals: the
    /// randomization on `-E` equals `Delta + lambda u_{-E}`.
    pub fn inactive_centres(&self, omega: &DVector<f64>, state: &SamplerState) -> Vec<f64> {
        self.inactive
            .iter()
            .zip(&state.u_inactive)
            .map(|(&j, &u)| omega[j] - self.lambda * u)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IvData;
    use crate::randomization::Family;
    use crate::sisvive::{solve_randomized_sisvive, TuningParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(seed: u64) -> (Grams, SelectionResult, RandomizationSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, l) = (300, 5);
        let z = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &z * DVector::from_element(l, 0.6) + &xi;
        let mut alpha = DVector::zeros(l);
        alpha[1] = 3.0;
        let y = &d + &z * alpha + &xi * 0.5 + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = Grams::from_data(&IvData::new(y, d, z).unwrap());
        let rand = RandomizationSpec::default_for(&g, Family::Gaussian, seed);
        let sel = solve_randomized_sisvive(&g, &TuningParams::default_for(n as f64), &rand).unwrap();
        (g, sel, rand)
    }

    #[test]
    fn initial_state_reproduces_drawn_randomization() {
        let (g, sel, rand) = setup(1);
        for kind in [DensityKind::TslsStat, DensityKind::TslsEst, DensityKind::ArIntermediate] {
            let spec = build_density(&g, &sel, 0.7, kind, &rand).unwrap();
            let st = spec.initial_state(&sel);
            let w = spec.omega(&st);
            let drawn = DVector::from_column_slice(&sel.omega);
            assert!((&w - &drawn).amax() < 1e-6 * sel.tuning.lambda, "{kind:?}");
            assert!(spec.log_density(&st).is_finite());
        }
    }

    #[test]
    fn sign_violation_is_excluded() {
        let (g, sel, rand) = setup(2);
        assert!(!sel.set.is_empty());
        let spec = build_density(&g, &sel, 1.0, DensityKind::TslsStat, &rand).unwrap();
        let mut st = spec.initial_state(&sel);
        st.alpha_e[0] = -st.alpha_e[0];
        assert_eq!(spec.log_density(&st), f64::NEG_INFINITY);
        let mut st = spec.initial_state(&sel);
        if let Some(u) = st.u_inactive.first_mut() {
            *u = 1.5;
            assert_eq!(spec.log_density(&st), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn doubling_lambda_shifts_jacobian() {
        let (g, sel, _) = setup(3);
        let l = g.n_instruments();
        let k2 = ridge_hessian(&g, 0.01);
        let a = log_jacobian(&k2, &sel.set, l, 5.0).unwrap();
        let b = log_jacobian(&k2, &sel.set, l, 10.0).unwrap();
        let expected = (l - sel.set.len()) as f64 * 2f64.ln();
        assert!((b - a - expected).abs() < 1e-12);
    }

    #[test]
    fn ar_statistic_from_observed_intermediate_matches_direct() {
        let (g, sel, rand) = setup(4);
        let beta0 = 0.9;
        let spec = build_density(&g, &sel, beta0, DensityKind::ArIntermediate, &rand).unwrap();
        let r = g.restrict(&sel.set).unwrap();
        let direct = r.ar_statistic(beta0);
        let from_full = spec.ar_statistic_from_intermediate(&g, &r.ar_intermediate(beta0));
        let from_reduced = spec.statistic(spec.t_obs());
        assert!((from_full - direct).abs() < 1e-9 * direct.max(1.0));
        assert!((from_reduced - direct).abs() < 1e-9 * direct.max(1.0));
        assert_eq!(spec.t_dim(), g.n_instruments() - sel.set.len());
        assert_eq!(spec.ar_statistic_from_intermediate(&g, &DVector::zeros(g.n_instruments())), 0.0);
    }

    #[test]
    fn conditioned_statistic_is_constant() {
        // S - Sigma_ST Sigma_T^{-1} t must equal K3 whatever t is.
        let (g, sel, rand) = setup(5);
        let spec = build_density(&g, &sel, 0.2, DensityKind::TslsStat, &rand).unwrap();
        let s_obs = g.score();
        let recon = spec.k3() - spec.k1() * DVector::from_column_slice(spec.t_obs());
        assert!((&recon - &s_obs).amax() < 1e-8 * s_obs.amax());
    }
}
