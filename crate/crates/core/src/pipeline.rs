//! End-to-end analysis: default tuning, randomized selection, inference, and
//! the lambda sensitivity grid. Shared by the individual-level and summary
//! entry points.

use serde::{Deserialize, Serialize};

use crate::data::IvData;
use crate::error::{Error, ErrorClass, Result};
use crate::grams::{Grams, NaiveInterval};
use crate::inference::{analyze_selection, selective_interval, AnalysisOptions, InferenceResult, SelectiveInterval};
use crate::randomization::{Family, RandomizationSpec};
use crate::sisvive::{default_lambda, default_omega_scale, solve_randomized_sisvive, SelectionResult, TuningParams};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const LAMBDA_GRID_POINTS: usize = 15;
/// The grid spans `[lambda0 / f, lambda0 * f]` on a log scale.
pub const LAMBDA_GRID_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Penalty in units where `Z'Z ~ n I`; `None` uses `2.01 sqrt(n log n)`.
    pub lambda: Option<f64>,
    /// Ridge term in the same units; `None` uses 0.01.
    pub epsilon: Option<f64>,
    pub family: Family,
    /// Multiplier on the default per-coordinate randomization scale.
    pub omega_multiplier: f64,
    /// Seeds both the randomization draw and the sampler.
    pub seed: u64,
    pub analysis: AnalysisOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            epsilon: None,
            family: Family::Gaussian,
            omega_multiplier: 1.0,
            seed: 1,
            analysis: AnalysisOptions::default(),
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_multiplier.is_finite() && self.omega_multiplier > 0.0) {
            return Err(Error::InvalidInput(format!(
                "omega scale multiplier must be positive, got {}",
                self.omega_multiplier
            )));
        }
        self.analysis.sampler.validate()?;
        TuningParams::new(self.lambda.unwrap_or(1.0), self.epsilon.unwrap_or(DEFAULT_EPSILON))?;
        Ok(())
    }

    /// Tuning on the scale of `grams`: nominal values multiplied by `kappa`.
    pub fn tuning(&self, grams: &Grams, kappa: f64) -> Result<TuningParams> {
        let lambda = self.lambda.unwrap_or_else(|| default_lambda(grams.n()));
        TuningParams::new(lambda * kappa, self.epsilon.unwrap_or(DEFAULT_EPSILON) * kappa)
    }

    pub fn randomization(&self, grams: &Grams) -> Result<RandomizationSpec> {
        let scale = default_omega_scale(grams).iter().map(|s| s * self.omega_multiplier).collect();
        RandomizationSpec::new(self.family, scale, self.seed)
    }

    fn analysis_seeded(&self) -> AnalysisOptions {
        let mut a = self.analysis.clone();
        a.sampler.seed = self.seed;
        a
    }
}

/// Scale of `Z'Z` relative to the standardized design `Z'Z ~ n I`.
pub fn design_scale(grams: &Grams) -> f64 {
    grams.ztz().diagonal().mean() / grams.n()
}

/// Runs only the randomized selection step.
pub fn select(grams: &Grams, opts: &PipelineOptions, kappa: f64) -> Result<SelectionResult> {
    opts.validate()?;
    let tuning = opts.tuning(grams, kappa)?;
    solve_randomized_sisvive(grams, &tuning, &opts.randomization(grams)?)
}

/// Selection followed by the conditional test and interval.
pub fn analyze_grams(grams: &Grams, opts: &PipelineOptions, kappa: f64) -> Result<InferenceResult> {
    let sel = select(grams, opts, kappa)?;
    analyze_selection(grams, &sel, &opts.randomization(grams)?, &opts.analysis_seeded())
}

/// Individual-level analysis. Tuning values are used as given.
pub fn analyze_data(data: &IvData, opts: &PipelineOptions) -> Result<InferenceResult> {
    analyze_grams(&Grams::from_data(data), opts, 1.0)
}

/// One row of the lambda sensitivity table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaRow {
    /// Nominal penalty (standardized units).
    pub lambda: f64,
    pub selected: Vec<usize>,
    pub beta_tsls: f64,
    /// Absent when the conditional interval failed; see `error`.
    pub conditional: Option<SelectiveInterval>,
    pub naive: NaiveInterval,
    pub error: Option<String>,
}

/// Log-spaced penalties around `lambda0`.
pub fn lambda_grid(lambda0: f64) -> Vec<f64> {
    let (lo, hi) = ((lambda0 / LAMBDA_GRID_FACTOR).ln(), (lambda0 * LAMBDA_GRID_FACTOR).ln());
    let last = (LAMBDA_GRID_POINTS - 1) as f64;
    (0..LAMBDA_GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / last).exp())
        .collect()
}

/// Repeats selection and interval construction over `lambdas` (the default
/// grid when `None`). Rows selecting half or more of the instruments are
/// dropped. A sampler failure on one row is recorded in that row.
pub fn lambda_sensitivity(
    grams: &Grams,
    opts: &PipelineOptions,
    kappa: f64,
    lambdas: Option<&[f64]>,
) -> Result<Vec<LambdaRow>> {
    let l = grams.n_instruments();
    let grid = match lambdas {
        Some(g) => g.to_vec(),
        None => lambda_grid(opts.lambda.unwrap_or_else(|| default_lambda(grams.n()))),
    };
    let rand = opts.randomization(grams)?;
    let analysis = opts.analysis_seeded();
    let mut rows = Vec::new();
    for lambda in grid {
        let o = PipelineOptions {
            lambda: Some(lambda),
            ..opts.clone()
        };
        let sel = select(grams, &o, kappa)?;
        if 2 * sel.set.len() >= l {
            log::info!("lambda {lambda:.4}: |E| = {} >= L/2, dropped", sel.set.len());
            continue;
        }
        let restricted = grams.restrict(&sel.set)?;
        let beta_tsls = restricted.tsls_estimate()?;
        let naive = restricted.naive_interval(analysis.level, analysis.kind.naive_statistic())?;
        let (conditional, error) =
            match selective_interval(grams, &sel, &rand, analysis.kind, analysis.level, &analysis.sampler) {
                Ok(ci) => (Some(ci), None),
                Err(e) if e.class() == ErrorClass::Sampler => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
        rows.push(LambdaRow {
            lambda,
            selected: sel.set.indices().to_vec(),
            beta_tsls,
            conditional,
            naive,
            error,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, replication_rng, SimConfig};

    #[test]
    fn grid_is_log_spaced_around_centre() {
        let g = lambda_grid(100.0);
        assert_eq!(g.len(), LAMBDA_GRID_POINTS);
        assert!((g[7] - 100.0).abs() < 1e-9);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn design_scale_is_near_one_for_standard_normal_instruments() {
        let (data, _) = generate(&SimConfig::default(), &mut replication_rng(5, 0)).unwrap();
        let k = design_scale(&Grams::from_data(&data));
        assert!((k - 1.0).abs() < 0.1, "{k}");
    }

    #[test]
    fn rejects_bad_multiplier() {
        let opts = PipelineOptions {
            omega_multiplier: 0.0,
            ..Default::default()
        };
        assert!(opts.validate().is_err());
    }
}
