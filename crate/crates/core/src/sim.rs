//! Synthetic data from the linear structural model and replication studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{IvData, ModelParams};
use crate::error::{Error, Result};
use crate::grams::Grams;
use crate::inference::{conditional_test, selective_interval};
use crate::pipeline::{select, PipelineOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub l: usize,
    /// Number of invalid instruments; they occupy the first indices.
    pub n_invalid: usize,
    pub beta_star: f64,
    pub alpha_invalid: f64,
    pub gamma_valid: f64,
    pub gamma_invalid: f64,
    /// Error correlation (both error variances are one).
    pub rho: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            l: 10,
            n_invalid: 3,
            beta_star: 1.0,
            alpha_invalid: 7.0,
            gamma_valid: 2.5,
            gamma_invalid: 2.5,
            rho: 0.8,
            replications: 300,
            seed: 20_190_401,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_invalid >= self.l {
            return Err(Error::InvalidInput("need n_invalid < L".into()));
        }
        if self.n <= self.l + 1 {
            return Err(Error::InvalidInput("need n > L + 1".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidInput("need |rho| < 1".into()));
        }
        Ok(())
    }

    /// Same design with every instrument strength set to `r`.
    pub fn with_strength(&self, r: f64) -> Self {
        Self {
            gamma_valid: r,
            gamma_invalid: r,
            ..self.clone()
        }
    }

    /// Configuration at grid value `x` along `axis`.
    pub fn along(&self, axis: Axis, x: f64) -> Self {
        match axis {
            Axis::Strength => self.with_strength(x),
            Axis::InvalidRatio => Self {
                gamma_invalid: x * self.gamma_valid,
                ..self.clone()
            },
        }
    }

    pub fn params(&self) -> ModelParams {
        let alpha = (0..self.l)
            .map(|j| if j < self.n_invalid { self.alpha_invalid } else { 0.0 })
            .collect();
        let gamma = (0..self.l)
            .map(|j| if j < self.n_invalid { self.gamma_invalid } else { self.gamma_valid })
            .collect();
        ModelParams::new(
            self.beta_star,
            alpha,
            gamma,
            [[1.0, self.rho], [self.rho, 1.0]],
        )
        .expect("validated configuration")
    }
}

/// What a study grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Common strength `r` of every instrument.
    Strength,
    /// Invalid-instrument strength as a multiple of `gamma_valid`.
    InvalidRatio,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strength" | "r" => Ok(Self::Strength),
            "invalid-ratio" | "ratio" => Ok(Self::InvalidRatio),
            other => Err(Error::InvalidInput(format!("unknown study axis `{other}`"))),
        }
    }
}

/// Per-replication RNG: one ChaCha stream per replication index.
pub fn replication_rng(master_seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep);
    rng
}

/// Draws `Z ~ N(0, I)`, correlated Normal errors, and builds `(Y, D)`.
pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(IvData, ModelParams)> {
    cfg.validate()?;
    let params = cfg.params();
    let (n, l) = (cfg.n, cfg.l);
    let z = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rho = cfg.rho;
    let tail = (1.0 - rho * rho).sqrt();
    let mut delta = DVector::zeros(n);
    let mut xi = DVector::zeros(n);
    for i in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        delta[i] = e1;
        xi[i] = rho * e1 + tail * e2;
    }
    let gamma = DVector::from_vec(params.gamma.clone());
    let alpha = DVector::from_vec(params.alpha.clone());
    let d = &z * gamma + xi;
    let y = &d * params.beta + &z * alpha + delta;
    Ok((IvData::new(y, d, z)?, params))
}

/// Replaces `Z` by `sqrt(n)` times an orthonormal basis of its centered
/// column space, so that `Z'Z = n I` exactly (up to rounding).
pub fn orthogonalize_instruments(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let mut zc = z.clone();
    for mut col in zc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    zc.qr().q() * n.sqrt()
}

/// Like [`generate`] but with exactly orthogonal instrument columns.
pub fn generate_orthogonal<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(IvData, ModelParams)> {
    let (raw, params) = generate(cfg, rng)?;
    let z = orthogonalize_instruments(raw.z());
    // rebuild outcome and exposure on the new instruments, reusing the errors
    let gamma = DVector::from_vec(params.gamma.clone());
    let alpha = DVector::from_vec(params.alpha.clone());
    let xi = raw.d() - raw.z() * &gamma;
    let delta = raw.y() - raw.d() * params.beta - raw.z() * &alpha;
    let d = &z * gamma + xi;
    let y = &d * params.beta + &z * alpha + delta;
    Ok((IvData::new(y, d, z)?, params))
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic KS critical value `c(a) / sqrt(n_eff)` for significance `a`.
pub fn ks_critical(level: f64, n_eff: f64) -> f64 {
    (-0.5 * (level / 2.0).ln()).sqrt() / n_eff.sqrt()
}

/// First-stage F below this marks a replication as weak-instrument.
pub const WEAK_F: f64 = 10.0;

/// Data and seeds for replication `rep`: the data come from the replication
/// stream, and the analysis seed is the next word of the same stream.
pub fn replication(cfg: &SimConfig, rep: u64) -> Result<(IvData, ModelParams, u64)> {
    let mut rng = replication_rng(cfg.seed, rep);
    let (data, params) = generate(cfg, &mut rng)?;
    Ok((data, params, rng.next_u64()))
}

/// Outcome of one replication of a study.
#[derive(Debug, Clone, PartialEq)]
pub enum RepOutcome<T> {
    Done {
        value: T,
        /// Selected set contains every invalid instrument.
        superset: bool,
        weak: bool,
    },
    /// Replication excluded; holds the error kind.
    Failed(&'static str),
}

fn first_stage_f(grams: &Grams, set: &crate::data::InstrumentSet) -> Result<f64> {
    let r = grams.restrict(set)?;
    let k = (grams.n_instruments() - set.len()) as f64;
    Ok(r.dpd_raw() / k / grams.omega_hat()[(1, 1)])
}

/// Runs `f` on the selection of every replication, in parallel.
fn run_reps<T: Send, F>(cfg: &SimConfig, opts: &PipelineOptions, f: F) -> Result<Vec<RepOutcome<T>>>
where
    F: Fn(&Grams, &crate::sisvive::SelectionResult, &PipelineOptions, &ModelParams) -> Result<T> + Sync,
{
    cfg.validate()?;
    opts.validate()?;
    (0..cfg.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let (data, params, seed) = replication(cfg, rep)?;
            let grams = Grams::from_data(&data);
            let o = PipelineOptions {
                seed,
                analysis: crate::inference::AnalysisOptions {
                    sampler: opts.analysis.sampler.with_seed(seed),
                    ..opts.analysis.clone()
                },
                ..opts.clone()
            };
            let attempt = select(&grams, &o, 1.0).and_then(|sel| {
                let superset = sel.set.is_superset_of(&params.invalid_set());
                let weak = first_stage_f(&grams, &sel.set)? < WEAK_F;
                f(&grams, &sel, &o, &params).map(|value| RepOutcome::Done { value, superset, weak })
            });
            match attempt {
                Ok(v) => Ok(v),
                Err(e) if e.class() != crate::error::ErrorClass::Input => {
                    log::debug!("replication {rep} excluded: {e}");
                    Ok(RepOutcome::Failed(e.kind()))
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcdfRow {
    /// Grid value (strength or ratio).
    pub r: f64,
    pub ks: f64,
    /// KS distance over replications whose selection contains all invalid instruments.
    pub ks_superset: f64,
    pub n_ok: usize,
    pub n_superset: usize,
    pub failed: usize,
    pub weak_fraction: f64,
    /// Sorted conditional p-values (all successful replications).
    pub pvalues: Vec<f64>,
}

/// Conditional p-values under the true null across replications, per grid value.
pub fn ecdf_study(cfg: &SimConfig, opts: &PipelineOptions, axis: Axis, r_grid: &[f64]) -> Result<Vec<EcdfRow>> {
    r_grid
        .iter()
        .map(|&r| {
            let c = cfg.along(axis, r);
            let beta0 = c.beta_star;
            let reps = run_reps(&c, opts, |grams, sel, o, _| {
                let rand = o.randomization(grams)?;
                let a = &o.analysis;
                Ok(conditional_test(grams, sel, &rand, a.kind, beta0, a.tail, &a.sampler)?.0.pvalue)
            })?;
            let (mut all, mut sup, mut failed, mut weak) = (Vec::new(), Vec::new(), 0usize, 0usize);
            for rep in reps {
                match rep {
                    RepOutcome::Done { value, superset, weak: w } => {
                        all.push(value);
                        if superset {
                            sup.push(value);
                        }
                        weak += usize::from(w);
                    }
                    RepOutcome::Failed(_) => failed += 1,
                }
            }
            all.sort_by(f64::total_cmp);
            let uniform = |x: f64| x.clamp(0.0, 1.0);
            let ks_of = |v: &[f64]| if v.is_empty() { f64::NAN } else { ks_distance(v, uniform) };
            Ok(EcdfRow {
                r,
                ks: ks_of(&all),
                ks_superset: ks_of(&sup),
                n_ok: all.len(),
                n_superset: sup.len(),
                failed,
                weak_fraction: weak as f64 / all.len().max(1) as f64,
                pvalues: all,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Conditional,
    Naive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageRow {
    /// Grid value (strength or ratio).
    pub r: f64,
    pub method: Method,
    pub coverage: f64,
    /// Monte Carlo standard error of `coverage`.
    pub coverage_se: f64,
    pub mean_length: f64,
    pub coverage_superset: f64,
    pub n_ok: usize,
    pub n_superset: usize,
    pub failed: usize,
    pub weak_fraction: f64,
    pub unbounded: usize,
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    covers: bool,
    length: f64,
    unbounded: bool,
}

/// Coverage and mean length of the conditional and naive intervals, per grid value.
/// Replications are paired: both methods use the same data and selection, and
/// a replication that fails for either method is excluded from both.
pub fn coverage_study(cfg: &SimConfig, opts: &PipelineOptions, axis: Axis, r_grid: &[f64]) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::new();
    for &r in r_grid {
        let c = cfg.along(axis, r);
        let reps = run_reps(&c, opts, |grams, sel, o, params| {
            let rand = o.randomization(grams)?;
            let a = &o.analysis;
            let ci = selective_interval(grams, sel, &rand, a.kind, a.level, &a.sampler)?;
            let naive = grams.restrict(&sel.set)?.naive_interval(a.level, a.kind.naive_statistic())?;
            let b = params.beta;
            Ok([
                Interval { covers: ci.contains(b), length: ci.length(), unbounded: ci.unbounded },
                Interval { covers: naive.contains(b), length: naive.length(), unbounded: naive.unbounded },
            ])
        })?;
        let failed = reps.iter().filter(|x| matches!(x, RepOutcome::Failed(_))).count();
        let done: Vec<_> = reps
            .into_iter()
            .filter_map(|x| match x {
                RepOutcome::Done { value, superset, weak } => Some((value, superset, weak)),
                RepOutcome::Failed(_) => None,
            })
            .collect();
        let n_ok = done.len();
        let weak_fraction = done.iter().filter(|d| d.2).count() as f64 / n_ok.max(1) as f64;
        let n_superset = done.iter().filter(|d| d.1).count();
        for (m, method) in [Method::Conditional, Method::Naive].into_iter().enumerate() {
            let cover = |sel: &dyn Fn(&(_, bool, bool)) -> bool| -> f64 {
                let v: Vec<_> = done.iter().filter(|d| sel(d)).collect();
                v.iter().filter(|d| d.0[m].covers).count() as f64 / v.len() as f64
            };
            let coverage = cover(&|_| true);
            let finite: Vec<f64> = done.iter().map(|d| d.0[m]).filter(|i| !i.unbounded).map(|i| i.length).collect();
            rows.push(CoverageRow {
                r,
                method,
                coverage,
                coverage_se: (coverage * (1.0 - coverage) / n_ok as f64).sqrt(),
                mean_length: finite.iter().sum::<f64>() / finite.len() as f64,
                coverage_superset: cover(&|d| d.1),
                n_ok,
                n_superset,
                failed,
                weak_fraction,
                unbounded: done.iter().filter(|d| d.0[m].unbounded).count(),
            });
        }
    }
    Ok(rows)
}

/// Writes study rows as CSV (one row per record).
pub fn write_rows_csv<W: std::io::Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// ECDF table without the p-value vectors.
pub fn write_ecdf_csv<W: std::io::Write>(writer: W, rows: &[EcdfRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["r", "ks", "ks_superset", "n_ok", "n_superset", "failed", "weak_fraction"])?;
    for r in rows {
        w.write_record([
            r.r.to_string(),
            r.ks.to_string(),
            r.ks_superset.to_string(),
            r.n_ok.to_string(),
            r.n_superset.to_string(),
            r.failed.to_string(),
            r.weak_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format ECDF curves: `r,pvalue,ecdf`.
pub fn write_ecdf_curves_csv<W: std::io::Write>(writer: W, rows: &[EcdfRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["r", "pvalue", "ecdf"])?;
    for row in rows {
        let n = row.pvalues.len() as f64;
        for (i, p) in row.pvalues.iter().enumerate() {
            w.write_record([row.r.to_string(), p.to_string(), ((i + 1) as f64 / n).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
