//! GWAS-style summary statistics: per-instrument marginal regressions of the
//! outcome and the exposure. With mutually uncorrelated, centered instruments
//! they determine every Gram quantity up to one unknown positive factor `c`,
//! and the whole analysis is invariant to that factor.
//!
//! With `k_j = (n - 1) se_j^2 + b_j^2` for the outcome regression on
//! instrument `j`, `Y'Y = k_j Z_j'Z_j` for every `j`. Fixing `Z_1'Z_1 = 1`:
//!
//! ```text
//! Z_j'Z_j = k_1 / k_j,   Z_j'Y = b_{j,Y} k_1 / k_j,   Z_j'D = b_{j,D} k_1 / k_j,
//! Y'Y = k_1,             D'D = k^D_j k_1 / k_j  (averaged over j)
//! ```

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::data::IvData;
use crate::error::{Error, Result};
use crate::grams::Grams;
use crate::inference::InferenceResult;
use crate::pipeline::{analyze_grams, design_scale, lambda_sensitivity, LambdaRow, PipelineOptions};
use crate::sisvive::SelectionResult;

/// Relative spread of the per-instrument `D'D` implications above which the
/// diagonal-design assumption is reported as doubtful.
pub const SCALE_SPREAD_WARN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryData {
    pub snp: Vec<String>,
    pub beta_outcome: Vec<f64>,
    pub se_outcome: Vec<f64>,
    pub beta_exposure: Vec<f64>,
    pub se_exposure: Vec<f64>,
    /// Effective sample size (the mean of the two cohorts when they differ).
    pub n_eff: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    snp: String,
    beta_exposure: f64,
    se_exposure: f64,
    beta_outcome: f64,
    se_outcome: f64,
}

impl SummaryData {
    pub fn new(
        snp: Vec<String>,
        beta_outcome: Vec<f64>,
        se_outcome: Vec<f64>,
        beta_exposure: Vec<f64>,
        se_exposure: Vec<f64>,
        n_eff: f64,
    ) -> Result<Self> {
        let l = beta_outcome.len();
        if [snp.len(), se_outcome.len(), beta_exposure.len(), se_exposure.len()]
            .iter()
            .any(|&m| m != l)
        {
            return Err(Error::InvalidInput("summary columns have different lengths".into()));
        }
        if l < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 instruments, got {l}")));
        }
        if !(n_eff.is_finite() && n_eff > l as f64) {
            return Err(Error::InvalidInput(format!("need n_eff > L (n_eff = {n_eff}, L = {l})")));
        }
        for (j, (&sy, &sd)) in se_outcome.iter().zip(&se_exposure).enumerate() {
            if !(sy.is_finite() && sy > 0.0 && sd.is_finite() && sd > 0.0) {
                return Err(Error::InvalidInput(format!("standard errors must be positive (row {})", j + 1)));
            }
        }
        if beta_outcome.iter().chain(&beta_exposure).any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(Self {
            snp,
            beta_outcome,
            se_outcome,
            beta_exposure,
            se_exposure,
            n_eff,
        })
    }

    /// Reads `snp,beta_exposure,se_exposure,beta_outcome,se_outcome`.
    pub fn from_csv_reader<R: Read>(reader: R, n_eff: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Self::new(
            rows.iter().map(|r| r.snp.clone()).collect(),
            rows.iter().map(|r| r.beta_outcome).collect(),
            rows.iter().map(|r| r.se_outcome).collect(),
            rows.iter().map(|r| r.beta_exposure).collect(),
            rows.iter().map(|r| r.se_exposure).collect(),
            n_eff,
        )
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P, n_eff: f64) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, n_eff)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for j in 0..self.n_instruments() {
            w.serialize(Row {
                snp: self.snp[j].clone(),
                beta_exposure: self.beta_exposure[j],
                se_exposure: self.se_exposure[j],
                beta_outcome: self.beta_outcome[j],
                se_outcome: self.se_outcome[j],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn n_instruments(&self) -> usize {
        self.beta_outcome.len()
    }

    /// Marginal regressions of centered `Y` and `D` on each instrument, with
    /// residual variance `(V'V - b^2 Z_j'Z_j) / (n - 1)`.
    pub fn from_individual(data: &IvData) -> Result<Self> {
        let n = data.n() as f64;
        let z = data.z();
        let marginal = |v: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
            let vtv = v.norm_squared();
            z.column_iter()
                .map(|c| {
                    let ss = c.norm_squared();
                    let b = c.dot(v) / ss;
                    let resid = (vtv - b * b * ss).max(0.0);
                    (b, (resid / ((n - 1.0) * ss)).sqrt())
                })
                .unzip()
        };
        let (by, sy) = marginal(data.y());
        let (bd, sd) = marginal(data.d());
        let snp = (1..=data.n_instruments()).map(|j| format!("z{j}")).collect();
        Self::new(snp, by, sy, bd, sd, n)
    }
}

/// Gram quantities recovered from summary statistics, normalized so that
/// `Z_1'Z_1 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub ztz_diag: Vec<f64>,
    pub zty: Vec<f64>,
    pub ztd: Vec<f64>,
    pub yty: f64,
    pub dtd: f64,
    pub n_eff: f64,
    /// `(max - min) / mean` of the per-instrument `D'D` implications.
    pub dtd_spread: f64,
}

pub fn reconstruct_grams(s: &SummaryData) -> GramSummary {
    let n = s.n_eff;
    let k = |b: f64, se: f64| (n - 1.0) * se * se + b * b;
    let ky: Vec<f64> = s.beta_outcome.iter().zip(&s.se_outcome).map(|(&b, &e)| k(b, e)).collect();
    let kd: Vec<f64> = s.beta_exposure.iter().zip(&s.se_exposure).map(|(&b, &e)| k(b, e)).collect();
    let ztz: Vec<f64> = ky.iter().map(|kj| ky[0] / kj).collect();
    let dtd_each: Vec<f64> = kd.iter().zip(&ztz).map(|(kd, zz)| kd * zz).collect();
    let l = ztz.len() as f64;
    let dtd = dtd_each.iter().sum::<f64>() / l;
    let (lo, hi) = dtd_each
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let dtd_spread = (hi - lo) / dtd;
    if dtd_spread > SCALE_SPREAD_WARN {
        log::warn!(
            "inconsistent scale: exposure-side D'D implications spread by {:.1}% (instruments may be correlated or uncentered)",
            100.0 * dtd_spread
        );
    }
    GramSummary {
        zty: s.beta_outcome.iter().zip(&ztz).map(|(b, zz)| b * zz).collect(),
        ztd: s.beta_exposure.iter().zip(&ztz).map(|(b, zz)| b * zz).collect(),
        ztz_diag: ztz,
        yty: ky[0],
        dtd,
        n_eff: n,
        dtd_spread,
    }
}

impl GramSummary {
    pub fn n_instruments(&self) -> usize {
        self.ztz_diag.len()
    }

    pub fn inconsistent_scale(&self) -> bool {
        self.dtd_spread > SCALE_SPREAD_WARN
    }

    /// Residual cross-products of `Y` and `D` after all instruments (the
    /// cross term is set to zero) and their divisor `n - L + 1`.
    fn residuals(&self) -> Result<(f64, f64, f64)> {
        let explained = |v: &[f64]| -> f64 { v.iter().zip(&self.ztz_diag).map(|(a, zz)| a * a / zz).sum() };
        let ryy = self.yty - explained(&self.zty);
        let rdd = self.dtd - explained(&self.ztd);
        for r in [ryy, rdd] {
            if !(r > 0.0) {
                return Err(Error::NegativeVariance(r));
            }
        }
        Ok((ryy, rdd, self.n_eff - self.n_instruments() as f64 + 1.0))
    }

    /// Reduced-form covariance `diag(s^2_YZ, s^2_DZ)` (times `c`).
    pub fn omega_hat(&self) -> Result<Matrix2<f64>> {
        let (ryy, rdd, div) = self.residuals()?;
        Ok(Matrix2::new(ryy / div, 0.0, 0.0, rdd / div))
    }

    /// Grams with every cross-product multiplied by `c`.
    pub fn to_grams(&self, c: f64) -> Result<Grams> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidInput(format!("scale factor must be positive, got {c}")));
        }
        let (ryy, rdd, div) = self.residuals()?;
        Grams::from_parts(
            self.n_eff,
            DMatrix::from_diagonal(&DVector::from_iterator(
                self.n_instruments(),
                self.ztz_diag.iter().map(|v| v * c),
            )),
            DVector::from_iterator(self.n_instruments(), self.zty.iter().map(|v| v * c)),
            DVector::from_iterator(self.n_instruments(), self.ztd.iter().map(|v| v * c)),
            self.yty * c,
            self.dtd * c,
            Matrix2::new(ryy * c, 0.0, 0.0, rdd * c),
            div,
        )
    }
}

/// Structural covariance `A Omega A'` with `A = [[1, -b], [0, 1]]` at `b = beta_tsls`.
pub fn summary_sigma_hat(g: &GramSummary, beta_tsls: f64) -> Result<Matrix2<f64>> {
    let a = Matrix2::new(1.0, -beta_tsls, 0.0, 1.0);
    Ok(a * g.omega_hat()? * a.transpose())
}

/// Full analysis from summary statistics with cross-products multiplied by
/// `c`. The penalty, ridge and randomization scale are given in
/// standardized-design units and converted with the design scale, so the
/// result does not depend on `c`.
pub fn summary_pipeline(s: &SummaryData, opts: &PipelineOptions, c: f64) -> Result<InferenceResult> {
    let grams = reconstruct_grams(s).to_grams(c)?;
    analyze_grams(&grams, opts, design_scale(&grams))
}

/// Selection only, on the summary path.
pub fn summary_select(s: &SummaryData, opts: &PipelineOptions) -> Result<SelectionResult> {
    let grams = reconstruct_grams(s).to_grams(1.0)?;
    crate::pipeline::select(&grams, opts, design_scale(&grams))
}

/// Lambda sensitivity table on the summary path.
pub fn summary_lambda_sensitivity(
    s: &SummaryData,
    opts: &PipelineOptions,
    lambdas: Option<&[f64]>,
) -> Result<Vec<LambdaRow>> {
    let grams = reconstruct_grams(s).to_grams(1.0)?;
    lambda_sensitivity(&grams, opts, design_scale(&grams), lambdas)
}
