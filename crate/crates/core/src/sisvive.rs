//! Randomized sisVIVE selection of invalid instruments.
//!
//! The program is solved in the parametrization `x = (alpha; beta)` with the
//! instrument block first:
//!
//! ```text
//! minimize  1/2 x' (H + eps I) x - (S + omega)' x + lambda * |alpha|_1
//! H = [[Z'Z, Z'D], [D'Z, D'P_Z D]],   S = (Z'Y; D'P_Z Y)
//! ```
//!
//! which only needs Gram quantities, so individual-level and summary inputs
//! share this code.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InstrumentSet;
use crate::error::{Error, Result};
use crate::grams::Grams;
use crate::randomization::{Family, RandomizationSpec};

/// Coefficients with magnitude below this are treated as exactly zero.
pub const ACTIVE_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 50_000;
pub const COEF_TOL: f64 = 1e-10;
/// Sweeps between attempts to finish the solve exactly on the current support.
const POLISH_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningParams {
    pub lambda: f64,
    pub epsilon: f64,
}

impl TuningParams {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { lambda, epsilon })
    }

    /// `lambda = 2.01 sqrt(n log n)`, `epsilon = 0.01`.
    pub fn default_for(n: f64) -> Self {
        Self {
            lambda: default_lambda(n),
            epsilon: 0.01,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda: self.lambda * c,
            epsilon: self.epsilon * c,
        }
    }
}

pub fn default_lambda(n: f64) -> f64 {
    2.01 * (n * n.ln()).sqrt()
}

/// Default per-coordinate randomization standard deviations
/// `0.5 * sd(P_Z [Z D])_j * sd(P_Z Y) * sqrt(n / (n - 1))`, with `sd` the
/// sample standard deviation of a (centered) column.
pub fn default_omega_scale(grams: &Grams) -> Vec<f64> {
    let n = grams.n();
    let l = grams.n_instruments();
    let sd = |ss: f64| (ss.max(0.0) / (n - 1.0)).sqrt();
    let factor = 0.5 * sd(grams.ypzy()) * (n / (n - 1.0)).sqrt();
    let mut scale: Vec<f64> = (0..l).map(|j| factor * sd(grams.ztz()[(j, j)])).collect();
    scale.push(factor * sd(grams.dpzd()));
    // A perfectly fitted outcome would give zero spread; keep the density proper.
    let floor = (scale.iter().cloned().fold(0.0, f64::max) * 1e-12).max(f64::MIN_POSITIVE);
    for s in &mut scale {
        if !(*s > floor) {
            *s = floor;
        }
    }
    scale
}

impl RandomizationSpec {
    pub fn default_for(grams: &Grams, family: Family, seed: u64) -> Self {
        Self {
            family,
            scale: default_omega_scale(grams),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Instruments selected as invalid.
    pub set: InstrumentSet,
    /// Signs of `alpha_hat` on `set`, in index order.
    pub signs: Vec<i8>,
    pub alpha_hat: Vec<f64>,
    pub beta_hat: f64,
    /// Subgradient of `|alpha|_1` at the solution.
    pub u_hat: Vec<f64>,
    pub omega: Vec<f64>,
    pub tuning: TuningParams,
    pub sweeps: usize,
}

impl SelectionResult {
    pub fn n_instruments(&self) -> usize {
        self.alpha_hat.len()
    }

    /// Solution vector `(alpha; beta)`.
    pub fn solution(&self) -> DVector<f64> {
        let mut x = DVector::from_vec(self.alpha_hat.clone());
        x = x.push(self.beta_hat);
        x
    }

    pub fn signs_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| s as f64).collect()
    }
}

/// `H + eps I`.
pub fn ridge_hessian(grams: &Grams, epsilon: f64) -> DMatrix<f64> {
    let mut k2 = grams.hessian();
    for i in 0..k2.nrows() {
        k2[(i, i)] += epsilon;
    }
    k2
}

/// Objective value (without the constant `Y' P_Z Y / 2`).
pub fn objective(grams: &Grams, tuning: &TuningParams, omega: &[f64], x: &DVector<f64>) -> f64 {
    let l = grams.n_instruments();
    let k2 = ridge_hessian(grams, tuning.epsilon);
    let b = grams.score() + DVector::from_column_slice(omega);
    0.5 * x.dot(&(&k2 * x)) - b.dot(x) + tuning.lambda * x.rows(0, l).abs().sum()
}

/// Max-norm of `-S + (H + eps I) x + lambda (u; 0) - omega`.
pub fn kkt_residual(grams: &Grams, result: &SelectionResult) -> f64 {
    let l = grams.n_instruments();
    let k2 = ridge_hessian(grams, result.tuning.epsilon);
    let mut r = &k2 * result.solution() - grams.score() - DVector::from_column_slice(&result.omega);
    for j in 0..l {
        r[j] += result.tuning.lambda * result.u_hat[j];
    }
    r.amax()
}

/// Draws `omega` from `rand` (seeded by `rand.seed`) and solves.
pub fn solve_randomized_sisvive(
    grams: &Grams,
    tuning: &TuningParams,
    rand: &RandomizationSpec,
) -> Result<SelectionResult> {
    let l = grams.n_instruments();
    if rand.dim() != l + 1 {
        return Err(Error::InvalidInput(format!(
            "randomization has dimension {}, expected L + 1 = {}",
            rand.dim(),
            l + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rand.seed);
    let omega = rand.draw(&mut rng);
    solve_with_omega(grams, tuning, &omega)
}

/// Solves the program for a given realization of `omega`.
pub fn solve_with_omega(grams: &Grams, tuning: &TuningParams, omega: &[f64]) -> Result<SelectionResult> {
    let l = grams.n_instruments();
    let p = l + 1;
    if omega.len() != p {
        return Err(Error::InvalidInput(format!(
            "omega has length {}, expected {}",
            omega.len(),
            p
        )));
    }
    if omega.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("omega must be finite".into()));
    }
    TuningParams::new(tuning.lambda, tuning.epsilon)?;
    let lambda = tuning.lambda;
    let k2 = ridge_hessian(grams, tuning.epsilon);
    let b = grams.score() + DVector::from_column_slice(omega);
    let diag: Vec<f64> = (0..p).map(|j| k2[(j, j)]).collect();

    let mut x = DVector::<f64>::zeros(p);
    // gradient of the smooth part: K2 x - b
    let mut grad = -&b;
    let mut last_change = f64::INFINITY;

    for sweep in 1..=MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let r = diag[j] * x[j] - grad[j];
            let new = if j < l { soft_threshold(r, lambda) / diag[j] } else { r / diag[j] };
            let delta = new - x[j];
            if delta != 0.0 {
                grad.axpy(delta, &k2.column(j), 1.0);
                x[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        last_change = max_change;
        let scale = x.amax().max(1.0);
        if max_change <= COEF_TOL * scale {
            return Ok(finish(grams, tuning, omega, &k2, &b, x, sweep));
        }
        if sweep % POLISH_EVERY == 0 {
            if let Some(exact) = polish(&k2, &b, lambda, &x, l) {
                return Ok(finish(grams, tuning, omega, &k2, &b, exact, sweep));
            }
        }
    }
    Err(Error::NoConvergence {
        sweeps: MAX_SWEEPS,
        last_change,
    })
}

fn soft_threshold(r: f64, lambda: f64) -> f64 {
    if r > lambda {
        r - lambda
    } else if r < -lambda {
        r + lambda
    } else {
        0.0
    }
}

/// Solves the stationarity equations on the support and sign pattern of `x`;
/// returns the exact minimizer if the resulting point satisfies every KKT
/// condition.
fn polish(k2: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, x: &DVector<f64>, l: usize) -> Option<DVector<f64>> {
    let active: Vec<usize> = (0..l).filter(|&j| x[j].abs() > ACTIVE_TOL).chain([l]).collect();
    let k_aa = k2.select_rows(&active).select_columns(&active);
    let mut rhs = DVector::zeros(active.len());
    for (i, &j) in active.iter().enumerate() {
        rhs[i] = b[j] - if j < l { lambda * x[j].signum() } else { 0.0 };
    }
    let sol = k_aa.cholesky()?.solve(&rhs);
    let mut out = DVector::zeros(l + 1);
    for (i, &j) in active.iter().enumerate() {
        if j < l && (sol[i].signum() != x[j].signum() || sol[i].abs() <= ACTIVE_TOL) {
            return None;
        }
        out[j] = sol[i];
    }
    let slack = b - k2 * &out;
    let ok = (0..l)
        .filter(|&j| out[j] == 0.0)
        .all(|j| slack[j].abs() <= lambda * (1.0 + 1e-12));
    ok.then_some(out)
}

fn finish(
    grams: &Grams,
    tuning: &TuningParams,
    omega: &[f64],
    k2: &DMatrix<f64>,
    b: &DVector<f64>,
    mut x: DVector<f64>,
    sweeps: usize,
) -> SelectionResult {
    let l = grams.n_instruments();
    for j in 0..l {
        if x[j].abs() <= ACTIVE_TOL {
            x[j] = 0.0;
        }
    }
    let slack = b - k2 * &x;
    let mut active = Vec::new();
    let mut signs = Vec::new();
    let mut u = vec![0.0; l];
    for j in 0..l {
        if x[j] != 0.0 {
            active.push(j);
            let s = x[j].signum();
            signs.push(s as i8);
            u[j] = s;
        } else {
            u[j] = (slack[j] / tuning.lambda).clamp(-1.0, 1.0);
        }
    }
    SelectionResult {
        set: InstrumentSet::new(active, l).expect("indices in range"),
        signs,
        alpha_hat: x.rows(0, l).iter().copied().collect(),
        beta_hat: x[l],
        u_hat: u,
        omega: omega.to_vec(),
        tuning: *tuning,
        sweeps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IvData;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn instance(seed: u64, n: usize, l: usize) -> Grams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &z * DVector::from_element(l, 0.5) + &noise;
        let mut alpha = DVector::zeros(l);
        alpha[0] = 2.0;
        let y = &d + &z * alpha + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Grams::from_data(&IvData::new(y, d, z).unwrap())
    }

    #[test]
    fn huge_lambda_selects_nothing() {
        let g = instance(1, 60, 4);
        let tuning = TuningParams::new(default_lambda(60.0) * 1e12, 0.01).unwrap();
        let res = solve_with_omega(&g, &tuning, &[0.0; 5]).unwrap();
        assert!(res.set.is_empty());
        let ridge = g.dpzy() / (g.dpzd() + 0.01);
        assert!((res.beta_hat - ridge).abs() < 1e-10 * ridge.abs().max(1.0));
    }

    #[test]
    fn kkt_holds_at_default_tuning() {
        for seed in 0..10 {
            let g = instance(seed, 200, 6);
            let tuning = TuningParams::default_for(200.0);
            let rand = RandomizationSpec::default_for(&g, Family::Gaussian, seed);
            let res = solve_randomized_sisvive(&g, &tuning, &rand).unwrap();
            assert!(kkt_residual(&g, &res) < 1e-6 * tuning.lambda);
            for (k, &j) in res.set.indices().iter().enumerate() {
                assert_eq!(res.alpha_hat[j].signum() as i8, res.signs[k]);
                assert_eq!(res.u_hat[j], res.signs[k] as f64);
            }
            assert!(res.u_hat.iter().all(|u| u.abs() <= 1.0));
        }
    }

    #[test]
    fn perturbing_active_coordinate_moves_residual_by_diagonal() {
        let g = instance(3, 200, 5);
        let tuning = TuningParams::new(20.0, 0.01).unwrap();
        let res = solve_with_omega(&g, &tuning, &[0.0; 6]).unwrap();
        let j = *res.set.indices().first().expect("instrument 0 is strongly invalid");
        let mut moved = res.clone();
        moved.alpha_hat[j] += 0.01;
        let expected = 0.01 * (g.ztz()[(j, j)] + 0.01);
        let grown = kkt_residual(&g, &moved);
        // the j-th coordinate dominates when Z'Z_jj is the largest column entry
        assert!(grown >= expected * 0.999 - kkt_residual(&g, &res));
        let k2 = ridge_hessian(&g, 0.01);
        assert!(grown <= k2.column(j).amax() * 0.01 * 1.001);
    }

    #[test]
    fn result_is_deterministic_in_seed() {
        let g = instance(5, 100, 4);
        let tuning = TuningParams::default_for(100.0);
        let rand = RandomizationSpec::default_for(&g, Family::Laplace, 77);
        let a = solve_randomized_sisvive(&g, &tuning, &rand).unwrap();
        let b = solve_randomized_sisvive(&g, &tuning, &rand).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_omega_length() {
        let g = instance(6, 50, 3);
        let tuning = TuningParams::default_for(50.0);
        assert!(solve_with_omega(&g, &tuning, &[0.0; 3]).is_err());
        assert!(TuningParams::new(-1.0, 0.01).is_err());
        assert!(TuningParams::new(1.0, 0.0).is_err());
    }

    #[test]
    fn default_scale_tracks_gram_scaling() {
        let g = instance(8, 80, 3);
        let s1 = default_omega_scale(&g);
        let s10 = default_omega_scale(&g.scaled(10.0));
        for (a, b) in s1.iter().zip(&s10) {
            assert!((b / a - 10.0).abs() < 1e-10);
        }
    }
}
