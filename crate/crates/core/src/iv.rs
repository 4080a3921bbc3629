//! Classical (pre-selection) TSLS and Anderson–Rubin quantities on
//! individual-level data, computed from thin-QR projections.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::data::{InstrumentSet, IvData, ProjectionCache};
use crate::error::{Error, Result};
use crate::grams::{Grams, NaiveInterval, NaiveStatistic, DEGENERATE_DENOM_TOL};

/// Projection-based view of one dataset and one candidate invalid set `E`.
pub struct IvModel<'a> {
    data: &'a IvData,
    cache: ProjectionCache,
    qe: DMatrix<f64>,
    set: InstrumentSet,
}

impl<'a> IvModel<'a> {
    pub fn new(data: &'a IvData, set: &InstrumentSet) -> Result<Self> {
        let l = data.n_instruments();
        if set.indices().iter().any(|&j| j >= l) {
            return Err(Error::InvalidInput("instrument index out of range".into()));
        }
        if set.len() >= l {
            return Err(Error::AllInvalid(l));
        }
        let cache = ProjectionCache::new(data);
        let qe = cache.subset_basis(data, set);
        Ok(Self {
            data,
            cache,
            qe,
            set: set.clone(),
        })
    }

    /// `a' (P_Z - P_{Z_E}) b`.
    fn diff_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let full = self.cache.form(a, b);
        let sub = (self.qe.transpose() * a).dot(&(self.qe.transpose() * b));
        full - sub
    }

    fn denominator(&self) -> Result<f64> {
        let d = self.data.d();
        let value = self.diff_form(d, d);
        let threshold = DEGENERATE_DENOM_TOL * d.dot(d);
        if value < threshold || value <= 0.0 {
            return Err(Error::DegenerateDenominator { value, threshold });
        }
        Ok(value)
    }

    pub fn tsls_estimate(&self) -> Result<f64> {
        let den = self.denominator()?;
        Ok(self.diff_form(self.data.d(), self.data.y()) / den)
    }

    /// `(1/n) [Y - D b, D]' P_{Z^perp} [Y - D b, D]`.
    pub fn sigma_hat(&self, beta0: f64) -> Matrix2<f64> {
        let r = self.data.y() - self.data.d() * beta0;
        let d = self.data.d();
        let n = self.data.n() as f64;
        let s11 = self.cache.residual_form(&r, &r) / n;
        let s12 = self.cache.residual_form(&r, d) / n;
        let s22 = self.cache.residual_form(d, d) / n;
        Matrix2::new(s11, s12, s12, s22)
    }

    pub fn sigma_hat_plugin(&self) -> Result<Matrix2<f64>> {
        Ok(self.sigma_hat(self.tsls_estimate()?))
    }

    pub fn tsls_statistic(&self, beta0: f64) -> Result<f64> {
        let den = self.denominator()?;
        let r = self.data.y() - self.data.d() * beta0;
        let num = self.diff_form(self.data.d(), &r);
        Ok(num / (self.sigma_hat(beta0)[(0, 0)].sqrt() * den.sqrt()))
    }

    pub fn ar_statistic(&self, beta0: f64) -> f64 {
        let l = self.data.n_instruments();
        let n = self.data.n() as f64;
        let r = self.data.y() - self.data.d() * beta0;
        let num = self.diff_form(&r, &r) / (l - self.set.len()) as f64;
        let den = self.cache.residual_form(&r, &r) / (n - l as f64);
        num / den
    }

    pub fn naive_interval(&self, level: f64, statistic: NaiveStatistic) -> Result<NaiveInterval> {
        let grams = Grams::from_data(self.data);
        grams.restrict(&self.set)?.naive_interval(level, statistic)
    }
}

pub fn tsls_estimate(data: &IvData, set: &InstrumentSet) -> Result<f64> {
    IvModel::new(data, set)?.tsls_estimate()
}

pub fn sigma_hat(data: &IvData, beta0: f64) -> Matrix2<f64> {
    let cache = ProjectionCache::new(data);
    let r = data.y() - data.d() * beta0;
    let d = data.d();
    let n = data.n() as f64;
    let s11 = cache.residual_form(&r, &r) / n;
    let s12 = cache.residual_form(&r, d) / n;
    let s22 = cache.residual_form(d, d) / n;
    Matrix2::new(s11, s12, s12, s22)
}

pub fn sigma_hat_plugin(data: &IvData, set: &InstrumentSet) -> Result<Matrix2<f64>> {
    IvModel::new(data, set)?.sigma_hat_plugin()
}

pub fn tsls_statistic(data: &IvData, set: &InstrumentSet, beta0: f64) -> Result<f64> {
    IvModel::new(data, set)?.tsls_statistic(beta0)
}

pub fn ar_statistic(data: &IvData, set: &InstrumentSet, beta0: f64) -> Result<f64> {
    Ok(IvModel::new(data, set)?.ar_statistic(beta0))
}

pub fn naive_interval(
    data: &IvData,
    set: &InstrumentSet,
    level: f64,
    statistic: NaiveStatistic,
) -> Result<NaiveInterval> {
    IvModel::new(data, set)?.naive_interval(level, statistic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_instrument() {
        let z = DMatrix::from_column_slice(5, 1, &[1.0, -2.0, 0.5, 3.0, -1.0]);
        let d = z.column(0).into_owned();
        let y = &d * 2.0;
        let data = IvData::new(y, d, z).unwrap();
        let set = InstrumentSet::empty();
        assert!((tsls_estimate(&data, &set).unwrap() - 2.0).abs() < 1e-12);
        let ci = naive_interval(&data, &set, 0.95, NaiveStatistic::Tsls).unwrap();
        assert!((ci.lower - 2.0).abs() < 1e-6 && (ci.upper - 2.0).abs() < 1e-6);
    }

    #[test]
    fn perfect_fit_gives_zero_residual_variance() {
        // n = L + 1 with Y exactly linear in Z
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 1.5]);
        let y = &z * DVector::from_vec(vec![0.7, -1.2]);
        let d = &z * DVector::from_vec(vec![1.0, 0.3]);
        let data = IvData::new(y, d, z).unwrap();
        let s = sigma_hat(&data, 0.4);
        assert!(s[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominator_detected() {
        // D explained entirely by the instrument placed in E
        let z = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, -1.0, 0.1, 2.0, -0.7, 0.5, 1.0, -2.5, -0.2]);
        let d = z.column(0).into_owned();
        let y = z.column(1) * 1.0;
        let data = IvData::new(y, d, z).unwrap();
        let set = InstrumentSet::new(vec![0], 2).unwrap();
        assert!(matches!(
            tsls_estimate(&data, &set).unwrap_err(),
            Error::DegenerateDenominator { .. }
        ));
    }

    #[test]
    fn ar_zero_when_residual_orthogonal_to_instruments() {
        let z = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let d = DVector::from_vec(vec![1.0, -1.0, 2.0, -2.0]);
        // Y - D = (1, 1, -1, -1), orthogonal to Z
        let y = &d + DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let data = IvData::new(y, d, z).unwrap();
        let stat = ar_statistic(&data, &InstrumentSet::empty(), 1.0).unwrap();
        assert!(stat.abs() < 1e-12);
    }
}
