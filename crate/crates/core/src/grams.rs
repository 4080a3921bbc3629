//! Cross-product ("Gram") summaries shared by the individual-level and
//! summary-statistics paths.
//!
//! Everything downstream of data loading (selection, conditional densities,
//! sampling, interval inversion) reads only the quantities stored here, so the
//! two input modes run through one code path.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::data::{InstrumentSet, IvData, ProjectionCache};
use crate::error::{Error, Result};

/// Relative threshold for a degenerate TSLS denominator.
pub const DEGENERATE_DENOM_TOL: f64 = 1e-10;

/// Number of grid points in the Anderson–Rubin interval scan.
pub const AR_GRID_POINTS: usize = 2001;
/// Half-width of the Anderson–Rubin scan, in naive TSLS standard errors.
pub const AR_GRID_HALF_WIDTH_SE: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct Grams {
    n: f64,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    ztd: DVector<f64>,
    yty: f64,
    dtd: f64,
    /// `[Y D]' P_{Z^perp} [Y D]`, not normalized.
    resid: Matrix2<f64>,
    /// Divisor turning `resid` into the reduced-form covariance estimate.
    resid_divisor: f64,
    ztz_chol: Cholesky<f64, Dyn>,
}

impl Grams {
    /// Assembles grams from raw parts. `resid` is the residual cross-product
    /// of `(Y, D)` after projecting out `Z`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n: f64,
        ztz: DMatrix<f64>,
        zty: DVector<f64>,
        ztd: DVector<f64>,
        yty: f64,
        dtd: f64,
        resid: Matrix2<f64>,
        resid_divisor: f64,
    ) -> Result<Self> {
        let l = ztz.nrows();
        if ztz.ncols() != l || zty.len() != l || ztd.len() != l {
            return Err(Error::InvalidInput("gram dimensions disagree".into()));
        }
        if !(n > l as f64) {
            return Err(Error::InvalidInput(format!("need n > L (n = {n}, L = {l})")));
        }
        let ztz_chol = Cholesky::new(ztz.clone())
            .ok_or_else(|| Error::InvalidInput("Z'Z is not positive definite".into()))?;
        Ok(Self {
            n,
            ztz,
            zty,
            ztd,
            yty,
            dtd,
            resid,
            resid_divisor,
            ztz_chol,
        })
    }

    pub fn from_data(data: &IvData) -> Self {
        let cache = ProjectionCache::new(data);
        let (y, d) = (data.y(), data.d());
        let ryy = cache.residual_form(y, y);
        let ryd = cache.residual_form(y, d);
        let rdd = cache.residual_form(d, d);
        Self::from_parts(
            data.n() as f64,
            cache.ztz().clone(),
            cache.zty().clone(),
            cache.ztd().clone(),
            cache.yty(),
            cache.dtd(),
            Matrix2::new(ryy, ryd, ryd, rdd),
            data.n() as f64,
        )
        .expect("IvData invariants guarantee valid grams")
    }

    /// Every cross-product multiplied by `c` (sample size unchanged).
    pub fn scaled(&self, c: f64) -> Self {
        Self::from_parts(
            self.n,
            &self.ztz * c,
            &self.zty * c,
            &self.ztd * c,
            self.yty * c,
            self.dtd * c,
            self.resid * c,
            self.resid_divisor,
        )
        .expect("positive rescaling keeps grams valid")
    }

    pub fn n(&self) -> f64 {
        self.n
    }
    pub fn n_instruments(&self) -> usize {
        self.ztz.nrows()
    }
    pub fn ztz(&self) -> &DMatrix<f64> {
        &self.ztz
    }
    pub fn zty(&self) -> &DVector<f64> {
        &self.zty
    }
    pub fn ztd(&self) -> &DVector<f64> {
        &self.ztd
    }
    pub fn yty(&self) -> f64 {
        self.yty
    }
    pub fn dtd(&self) -> f64 {
        self.dtd
    }
    pub fn resid(&self) -> &Matrix2<f64> {
        &self.resid
    }
    pub fn resid_divisor(&self) -> f64 {
        self.resid_divisor
    }

    /// `(Z'Z)^{-1} v`.
    pub fn solve_ztz(&self, v: &DVector<f64>) -> DVector<f64> {
        self.ztz_chol.solve(v)
    }

    pub fn ztz_inverse(&self) -> DMatrix<f64> {
        self.ztz_chol.inverse()
    }

    /// `D' P_Z D`.
    pub fn dpzd(&self) -> f64 {
        self.ztd.dot(&self.solve_ztz(&self.ztd))
    }

    /// `D' P_Z Y`.
    pub fn dpzy(&self) -> f64 {
        self.ztd.dot(&self.solve_ztz(&self.zty))
    }

    /// `Y' P_Z Y`.
    pub fn ypzy(&self) -> f64 {
        self.zty.dot(&self.solve_ztz(&self.zty))
    }

    /// Sisvive Hessian `[[Z'Z, Z'D], [D'Z, D'P_Z D]]` (Z block first).
    pub fn hessian(&self) -> DMatrix<f64> {
        let l = self.n_instruments();
        let mut h = DMatrix::zeros(l + 1, l + 1);
        h.view_mut((0, 0), (l, l)).copy_from(&self.ztz);
        h.view_mut((0, l), (l, 1)).copy_from(&self.ztd);
        h.view_mut((l, 0), (1, l)).copy_from(&self.ztd.transpose());
        h[(l, l)] = self.dpzd();
        h
    }

    /// Score `(Z'Y; D' P_Z Y)`.
    pub fn score(&self) -> DVector<f64> {
        let l = self.n_instruments();
        let mut s = DVector::zeros(l + 1);
        s.rows_mut(0, l).copy_from(&self.zty);
        s[l] = self.dpzy();
        s
    }

    /// Reduced-form covariance estimate `resid / divisor`.
    pub fn omega_hat(&self) -> Matrix2<f64> {
        self.resid / self.resid_divisor
    }

    /// `(Y - D b)' P_{Z^perp} (Y - D b)`.
    pub fn resid_quadratic(&self, b: f64) -> f64 {
        self.resid[(0, 0)] - 2.0 * b * self.resid[(0, 1)] + b * b * self.resid[(1, 1)]
    }

    /// Structural covariance estimate at exposure effect `b`: the reduced-form
    /// estimate mapped through `[[1, -b], [0, 1]]`.
    pub fn sigma_hat(&self, b: f64) -> Matrix2<f64> {
        let a = Matrix2::new(1.0, -b, 0.0, 1.0);
        a * self.omega_hat() * a.transpose()
    }

    /// Quantities that depend on the selected set `E`.
    pub fn restrict(&self, set: &InstrumentSet) -> Result<Restricted<'_>> {
        Restricted::new(self, set)
    }
}

/// Gram quantities after partialling out the instruments in `E`.
#[derive(Debug, Clone)]
pub struct Restricted<'a> {
    grams: &'a Grams,
    set: InstrumentSet,
    inactive: Vec<usize>,
    /// `Z'(I - P_{Z_E}) Z`.
    m: DMatrix<f64>,
    /// `Z'(I - P_{Z_E}) D`, equal to `Z'(P_Z - P_{Z_E}) D`.
    zpd: DVector<f64>,
    /// `Z'(I - P_{Z_E}) Y`.
    zpy: DVector<f64>,
    dpd: f64,
    dpy: f64,
    ypy: f64,
}

impl<'a> Restricted<'a> {
    fn new(grams: &'a Grams, set: &InstrumentSet) -> Result<Self> {
        let l = grams.n_instruments();
        if let Some(&j) = set.indices().last() {
            if j >= l {
                return Err(Error::InvalidInput(format!("instrument {j} out of range")));
            }
        }
        if set.len() >= l {
            return Err(Error::AllInvalid(l));
        }
        let idx = set.indices();
        let (m, zpd, zpy) = if idx.is_empty() {
            (grams.ztz.clone(), grams.ztd.clone(), grams.zty.clone())
        } else {
            let g = grams.ztz.select_rows(idx).select_columns(idx);
            let chol = Cholesky::new(g)
                .ok_or_else(|| Error::InvalidInput("Z_E'Z_E not positive definite".into()))?;
            let b = grams.ztz.select_columns(idx);
            let bt = b.transpose();
            let m = &grams.ztz - &b * chol.solve(&bt);
            let zpd = &grams.ztd - &b * chol.solve(&grams.ztd.select_rows(idx));
            let zpy = &grams.zty - &b * chol.solve(&grams.zty.select_rows(idx));
            (m, zpd, zpy)
        };
        let ainv_zpd = grams.solve_ztz(&zpd);
        let dpd = zpd.dot(&ainv_zpd);
        let dpy = zpy.dot(&ainv_zpd);
        let ypy = zpy.dot(&grams.solve_ztz(&zpy));
        Ok(Self {
            grams,
            set: set.clone(),
            inactive: set.complement(l),
            m,
            zpd,
            zpy,
            dpd,
            dpy,
            ypy,
        })
    }

    pub fn grams(&self) -> &Grams {
        self.grams
    }
    pub fn set(&self) -> &InstrumentSet {
        &self.set
    }
    pub fn inactive(&self) -> &[usize] {
        &self.inactive
    }
    /// `Z'(I - P_{Z_E}) Z`.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }
    /// `Z'(P_Z - P_{Z_E}) D`.
    pub fn zpd(&self) -> &DVector<f64> {
        &self.zpd
    }
    /// `Z'(I - P_{Z_E}) Y`.
    pub fn zpy(&self) -> &DVector<f64> {
        &self.zpy
    }
    /// `D'(P_Z - P_{Z_E}) D` without the degeneracy check.
    pub fn dpd_raw(&self) -> f64 {
        self.dpd
    }

    /// `D'(P_Z - P_{Z_E}) D`, checked against the relative tolerance.
    pub fn dpd(&self) -> Result<f64> {
        let threshold = DEGENERATE_DENOM_TOL * self.grams.dtd;
        if self.dpd < threshold || self.dpd <= 0.0 {
            return Err(Error::DegenerateDenominator {
                value: self.dpd,
                threshold,
            });
        }
        Ok(self.dpd)
    }

    /// `D'(P_Z - P_{Z_E}) Y`.
    pub fn dpy(&self) -> f64 {
        self.dpy
    }

    pub fn tsls_estimate(&self) -> Result<f64> {
        Ok(self.dpy / self.dpd()?)
    }

    /// Null-imposed structural covariance estimate.
    pub fn sigma_hat(&self, beta0: f64) -> Matrix2<f64> {
        self.grams.sigma_hat(beta0)
    }

    /// Plug-in covariance estimate at the TSLS estimate.
    pub fn sigma_hat_plugin(&self) -> Result<Matrix2<f64>> {
        Ok(self.grams.sigma_hat(self.tsls_estimate()?))
    }

    /// TSLS statistic for `H0: beta = beta0` with null-imposed variance.
    pub fn tsls_statistic(&self, beta0: f64) -> Result<f64> {
        let dpd = self.dpd()?;
        let s11 = self.sigma_hat(beta0)[(0, 0)];
        Ok((self.dpy - beta0 * dpd) / (s11.sqrt() * dpd.sqrt()))
    }

    /// `Z'(I - P_{Z_E})(Y - D beta0)`, the Anderson–Rubin sampling target.
    pub fn ar_intermediate(&self, beta0: f64) -> DVector<f64> {
        &self.zpy - &self.zpd * beta0
    }

    /// `(Y - D beta0)' (P_Z - P_{Z_E}) (Y - D beta0)`.
    pub fn ar_numerator_form(&self, beta0: f64) -> f64 {
        (self.ypy - 2.0 * beta0 * self.dpy + beta0 * beta0 * self.dpd).max(0.0)
    }

    /// `(Y - D beta0)' P_{Z^perp} (Y - D beta0) / (n - L)`.
    pub fn ar_denominator(&self, beta0: f64) -> f64 {
        let l = self.grams.n_instruments() as f64;
        self.grams.resid_quadratic(beta0) / (self.grams.n - l)
    }

    pub fn ar_df(&self) -> (f64, f64) {
        let l = self.grams.n_instruments();
        ((l - self.set.len()) as f64, self.grams.n - l as f64)
    }

    pub fn ar_statistic(&self, beta0: f64) -> f64 {
        let (df1, _) = self.ar_df();
        self.ar_numerator_form(beta0) / df1 / self.ar_denominator(beta0)
    }

    /// Naive standard error of the TSLS estimate (plug-in variance).
    pub fn tsls_se(&self) -> Result<f64> {
        let dpd = self.dpd()?;
        Ok((self.sigma_hat_plugin()?[(0, 0)] / dpd).sqrt())
    }

    pub fn naive_interval(&self, level: f64, statistic: NaiveStatistic) -> Result<NaiveInterval> {
        check_level(level)?;
        match statistic {
            NaiveStatistic::Tsls => {
                let est = self.tsls_estimate()?;
                let z = std_normal().inverse_cdf(0.5 + level / 2.0);
                let half = z * self.tsls_se()?;
                Ok(NaiveInterval {
                    lower: est - half,
                    upper: est + half,
                    unbounded: false,
                    disconnected: false,
                })
            }
            NaiveStatistic::Ar => self.naive_ar_interval(level),
        }
    }

    fn naive_ar_interval(&self, level: f64) -> Result<NaiveInterval> {
        let est = self.tsls_estimate()?;
        let se = self.tsls_se()?;
        let (df1, df2) = self.ar_df();
        let crit = FisherSnedecor::new(df1, df2)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .inverse_cdf(level);
        let excess = |b: f64| self.ar_statistic(b) - crit;

        let half = AR_GRID_HALF_WIDTH_SE * se.max(f64::EPSILON);
        let grid: Vec<f64> = (0..AR_GRID_POINTS)
            .map(|i| est - half + 2.0 * half * i as f64 / (AR_GRID_POINTS - 1) as f64)
            .collect();
        let vals: Vec<f64> = grid.iter().map(|&b| excess(b)).collect();
        let accepted: Vec<bool> = vals.iter().map(|&v| v <= 0.0).collect();

        let runs = accepted.windows(2).filter(|w| w[0] && !w[1]).count()
            + usize::from(*accepted.last().unwrap());
        if runs == 0 {
            // Empty acceptance region on the grid: degenerate interval at the
            // minimizer of the statistic.
            let (imin, _) = vals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            return Ok(NaiveInterval {
                lower: grid[imin],
                upper: grid[imin],
                unbounded: false,
                disconnected: false,
            });
        }
        let first = accepted.iter().position(|&a| a).unwrap();
        let last = accepted.iter().rposition(|&a| a).unwrap();
        let unbounded = first == 0 || last == AR_GRID_POINTS - 1;
        let lower = if first == 0 {
            grid[0]
        } else {
            bisect_root(&excess, grid[first - 1], grid[first], 60)
        };
        let upper = if last == AR_GRID_POINTS - 1 {
            grid[last]
        } else {
            bisect_root(&excess, grid[last], grid[last + 1], 60)
        };
        Ok(NaiveInterval {
            lower,
            upper,
            unbounded,
            disconnected: runs > 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveStatistic {
    Tsls,
    Ar,
}

/// Classical interval treating `E` as fixed. For the AR statistic this is the
/// convex hull of the acceptance region.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NaiveInterval {
    pub lower: f64,
    pub upper: f64,
    pub unbounded: bool,
    pub disconnected: bool,
}

impl NaiveInterval {
    pub fn contains(&self, b: f64) -> bool {
        self.lower <= b && b <= self.upper
    }
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

pub(crate) fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

/// Bisection for a sign change of `f` on `[a, b]`.
pub(crate) fn bisect_root<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let mut fa = f(a);
    for _ in 0..iters {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if (fm <= 0.0) == (fa <= 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> IvData {
        let z = DMatrix::from_row_slice(
            8,
            3,
            &[
                1.0, 0.2, -0.3, 0.5, 1.1, 0.4, -1.2, 0.3, 0.9, 0.7, -0.8, 0.1, 0.0, 0.6, -1.5, 1.4,
                -0.2, 0.3, -0.9, -1.0, 0.8, 0.4, 0.5, -0.6,
            ],
        );
        let d = &z * DVector::from_vec(vec![1.0, 0.7, 0.4])
            + DVector::from_vec(vec![0.1, -0.2, 0.05, 0.3, -0.1, 0.2, -0.25, 0.0]);
        let y = &d * 0.8
            + &z * DVector::from_vec(vec![0.0, 0.0, 1.5])
            + DVector::from_vec(vec![0.2, 0.1, -0.3, 0.05, 0.15, -0.1, 0.0, 0.25]);
        IvData::new(y, d, z).unwrap()
    }

    #[test]
    fn tsls_statistic_vanishes_at_estimate() {
        let data = toy();
        let g = Grams::from_data(&data);
        let set = InstrumentSet::new(vec![2], 3).unwrap();
        let r = g.restrict(&set).unwrap();
        let est = r.tsls_estimate().unwrap();
        assert!(r.tsls_statistic(est).unwrap().abs() < 1e-12);
    }

    #[test]
    fn all_invalid_is_an_error() {
        let data = toy();
        let g = Grams::from_data(&data);
        let set = InstrumentSet::new(vec![0, 1, 2], 3).unwrap();
        assert!(matches!(g.restrict(&set).unwrap_err(), Error::AllInvalid(3)));
    }

    #[test]
    fn scaling_leaves_ratios_unchanged() {
        let data = toy();
        let g = Grams::from_data(&data);
        let g10 = g.scaled(10.0);
        let set = InstrumentSet::new(vec![1], 3).unwrap();
        let a = g.restrict(&set).unwrap();
        let b = g10.restrict(&set).unwrap();
        assert!((a.tsls_estimate().unwrap() - b.tsls_estimate().unwrap()).abs() < 1e-12);
        assert!((a.ar_statistic(0.3) - b.ar_statistic(0.3)).abs() < 1e-9);
        assert!((a.tsls_statistic(0.3).unwrap() - b.tsls_statistic(0.3).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sigma_hat_is_symmetric_psd() {
        let data = toy();
        let g = Grams::from_data(&data);
        for b in [-3.0, 0.0, 0.8, 10.0] {
            let s = g.sigma_hat(b);
            assert!((s[(0, 1)] - s[(1, 0)]).abs() < 1e-12);
            let eig = s.symmetric_eigenvalues();
            assert!(eig.iter().all(|&v| v > -1e-12));
        }
    }

    #[test]
    fn naive_tsls_interval_centered_on_estimate() {
        let data = toy();
        let g = Grams::from_data(&data);
        let r = g.restrict(&InstrumentSet::new(vec![2], 3).unwrap()).unwrap();
        let ci = r.naive_interval(0.95, NaiveStatistic::Tsls).unwrap();
        let est = r.tsls_estimate().unwrap();
        assert!(((ci.lower + ci.upper) / 2.0 - est).abs() < 1e-12);
        assert!(ci.length() > 0.0);
        assert!(r.naive_interval(1.0, NaiveStatistic::Tsls).is_err());
    }

    #[test]
    fn ar_acceptance_region_matches_critical_value() {
        let data = toy();
        let g = Grams::from_data(&data);
        let r = g.restrict(&InstrumentSet::new(vec![2], 3).unwrap()).unwrap();
        let ci = r.naive_interval(0.9, NaiveStatistic::Ar).unwrap();
        let (df1, df2) = r.ar_df();
        let crit = FisherSnedecor::new(df1, df2).unwrap().inverse_cdf(0.9);
        if !ci.unbounded {
            assert!((r.ar_statistic(ci.lower) - crit).abs() < 1e-6);
            assert!((r.ar_statistic(ci.upper) - crit).abs() < 1e-6);
        }
        let mid = 0.5 * (ci.lower + ci.upper);
        if !ci.disconnected {
            assert!(r.ar_statistic(mid) <= crit + 1e-9);
        }
    }
}
