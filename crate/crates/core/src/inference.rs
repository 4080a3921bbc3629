//! Conditional p-values and selective confidence intervals.
//!
//! Intervals reuse one chain sampled at a reference value `beta_r` and
//! reweight it to other null values. Before reweighting, each sampled state is
//! translated in its `(alpha_E, beta)` coordinates so that the reconstructed
//! randomization changes as little as possible between the two nulls. The
//! translation has unit Jacobian, so the self-normalized estimate remains a
//! valid importance-sampling estimate of the same pivot; it just keeps the
//! weights from collapsing when the randomization is small relative to the
//! score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::density::{build_density, DensityKind, DensitySpec, SamplerState};
use crate::error::{Error, Result};
use crate::grams::{check_level, Grams, NaiveInterval, NaiveStatistic};
use crate::randomization::RandomizationSpec;
use crate::sampler::{run_chain, Diagnostics, SamplerConfig, Trace};
use crate::sisvive::SelectionResult;

/// Largest normalized importance weight tolerated.
pub const MAX_WEIGHT: f64 = 0.99;
/// Additional reference chains allowed after weight degeneration.
pub const MAX_EXTRA_REFERENCES: usize = 64;
pub const PIVOT_TOL: f64 = 0.005;
pub const MAX_BISECTION_STEPS: usize = 40;
pub const MAX_EXPANSIONS: usize = 20;
const BRACKET_INFLATION: f64 = 4.0;
/// Grid points per scan of the AR acceptance region.
const AR_SCAN_POINTS: usize = 81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    #[default]
    Right,
    Left,
    TwoSided,
}

impl std::str::FromStr for Tail {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "right" | "greater" => Ok(Tail::Right),
            "left" | "less" => Ok(Tail::Left),
            "two-sided" | "two_sided" | "both" => Ok(Tail::TwoSided),
            other => Err(Error::InvalidInput(format!("unknown tail `{other}`"))),
        }
    }
}

/// Empirical tail frequency of `observed` among `samples`.
pub fn conditional_pvalue(samples: &[f64], observed: f64, tail: Tail) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty sample trace".into()));
    }
    let n = samples.len() as f64;
    let right = samples.iter().filter(|&&t| t >= observed).count() as f64 / n;
    let left = samples.iter().filter(|&&t| t <= observed).count() as f64 / n;
    Ok(match tail {
        Tail::Right => right,
        Tail::Left => left,
        Tail::TwoSided => (2.0 * right.min(left)).min(1.0),
    })
}

/// A chain sampled at one null value, kept for reweighting.
#[derive(Debug, Clone)]
pub struct ReferenceChain {
    pub spec: DensitySpec,
    pub trace: Trace,
}

impl ReferenceChain {
    pub fn run(
        grams: &Grams,
        sel: &SelectionResult,
        rand: &RandomizationSpec,
        kind: DensityKind,
        beta_ref: f64,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        let spec = build_density(grams, sel, beta_ref, kind, rand)?;
        let trace = run_chain(&spec, cfg, spec.initial_state(sel))?;
        Ok(Self { spec, trace })
    }

    pub fn beta_ref(&self) -> f64 {
        self.spec.beta0()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotEstimate {
    /// Weighted probability that the statistic is at most its observed value.
    pub pivot: f64,
    /// Weighted probability that the statistic is at least its observed value.
    pub upper: f64,
    /// Kish effective sample size divided by the number of samples.
    pub ess_fraction: f64,
    pub max_weight: f64,
}

/// Importance-sampling estimate of the pivot at `beta0` from a reference
/// chain.
pub fn pivot_at(grams: &Grams, sel: &SelectionResult, reference: &ReferenceChain, beta0: f64) -> Result<PivotEstimate> {
    let spec_r = &reference.spec;
    let spec_0 = build_density(grams, sel, beta0, spec_r.kind(), spec_r.randomization())?;
    let obs = spec_0.observed_statistic();
    let transport = Transport::new(spec_r, &spec_0);

    let trace = &reference.trace;
    let mut log_w = Vec::with_capacity(trace.len());
    let mut stats = Vec::with_capacity(trace.len());
    for (state, omega_r) in trace.states.iter().zip(&trace.omegas) {
        match transport.apply(&spec_0, state, omega_r) {
            Some((t_state, omega_0)) => {
                let lw = spec_0.log_base(&t_state.t) - spec_r.log_base(&state.t) + spec_0.log_g(&omega_0)
                    - spec_r.log_g(omega_r);
                log_w.push(lw);
            }
            None => log_w.push(f64::NEG_INFINITY),
        }
        stats.push(spec_0.statistic(&state.t));
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_lw.is_finite() {
        return Err(Error::DegenerateWeights {
            beta0,
            max_weight: 1.0,
        });
    }
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let max_weight = 1.0 / total;
    if max_weight > MAX_WEIGHT {
        return Err(Error::DegenerateWeights { beta0, max_weight });
    }
    let below: f64 = w.iter().zip(&stats).filter(|(_, &s)| s <= obs).map(|(x, _)| x).sum();
    let above: f64 = w.iter().zip(&stats).filter(|(_, &s)| s >= obs).map(|(x, _)| x).sum();
    Ok(PivotEstimate {
        pivot: below / total,
        upper: above / total,
        ess_fraction: total * total / sum_sq / w.len() as f64,
        max_weight,
    })
}

/// Translation of `(alpha_E, beta)` that cancels, in least squares, the change
/// `(K1_0 - K1_r) t - (K3_0 - K3_r)` of the reconstructed randomization.
struct Transport {
    /// Change of randomization: `d_k1 t - d_k3`.
    d_k1: DMatrix<f64>,
    d_k3: DVector<f64>,
    /// Shift of the active coordinates: `shift_t t + shift_0`.
    shift_t: DMatrix<f64>,
    shift_0: DVector<f64>,
    /// Columns of `K2` for `(alpha_E, beta)`.
    k2_active: DMatrix<f64>,
}

impl Transport {
    fn new(spec_r: &DensitySpec, spec_0: &DensitySpec) -> Self {
        let l = spec_r.n_instruments();
        let active: Vec<usize> = spec_r.set().indices().iter().copied().chain([l]).collect();
        let k2_active = spec_r.k2().select_columns(&active);
        let d_k1 = spec_0.k1() - spec_r.k1();
        let d_k3 = spec_0.k3() - spec_r.k3();
        // least-squares solve of K2_A delta = -(d_k1 t - d_k3)
        let svd = k2_active.clone().svd(true, true);
        let shift_t = -svd.solve(&d_k1, 1e-12).expect("SVD computed with U and V");
        let shift_0 = svd.solve(&d_k3, 1e-12).expect("SVD computed with U and V");
        Self {
            d_k1,
            d_k3,
            shift_t,
            shift_0,
            k2_active,
        }
    }

    /// Transported state and its randomization under the new null, or `None`
    /// if the translation leaves the sign constraints.
    fn apply(&self, spec_0: &DensitySpec, state: &SamplerState, omega_r: &DVector<f64>) -> Option<(SamplerState, DVector<f64>)> {
        let t = DVector::from_column_slice(&state.t);
        let delta = &self.shift_t * &t + &self.shift_0;
        let omega = omega_r + &self.d_k1 * &t - &self.d_k3 + &self.k2_active * &delta;
        let m = state.alpha_e.len();
        let alpha_e: Vec<f64> = (0..m).map(|i| state.alpha_e[i] + delta[i]).collect();
        if alpha_e.iter().zip(spec_0.signs()).any(|(a, s)| a * s <= 0.0) {
            return None;
        }
        Some((
            SamplerState {
                t: state.t.clone(),
                beta: state.beta + delta[m],
                alpha_e,
                u_inactive: state.u_inactive.clone(),
            },
            omega,
        ))
    }
}

/// Result of a conditional test at one null value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub beta0: f64,
    pub observed: f64,
    pub pvalue: f64,
    pub tail: Tail,
    pub n_samples: usize,
    pub diagnostics: Diagnostics,
}

/// Conditional p-value from a chain run directly at `beta0`.
pub fn conditional_test(
    grams: &Grams,
    sel: &SelectionResult,
    rand: &RandomizationSpec,
    kind: DensityKind,
    beta0: f64,
    tail: Tail,
    cfg: &SamplerConfig,
) -> Result<(TestResult, Trace)> {
    let chain = ReferenceChain::run(grams, sel, rand, kind, beta0, cfg)?;
    let observed = chain.spec.observed_statistic();
    let pvalue = conditional_pvalue(&chain.trace.stats, observed, tail)?;
    Ok((
        TestResult {
            beta0,
            observed,
            pvalue,
            tail,
            n_samples: chain.trace.len(),
            diagnostics: chain.trace.diagnostics.clone(),
        },
        chain.trace,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectiveInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// The scan hit its outer limit on at least one side (AR only).
    pub unbounded: bool,
    /// The accepted set has gaps; the interval is its hull (AR only).
    pub disconnected: bool,
    pub reference_beta: f64,
    pub references_used: usize,
    /// Smallest effective-sample fraction among the evaluated pivots.
    pub min_ess_fraction: f64,
    pub diagnostics: Diagnostics,
}

impl SelectiveInterval {
    pub fn contains(&self, b: f64) -> bool {
        self.lower <= b && b <= self.upper
    }
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Pool of reference chains with retry on weight degeneration.
struct ReferencePool<'a> {
    grams: &'a Grams,
    sel: &'a SelectionResult,
    rand: &'a RandomizationSpec,
    kind: DensityKind,
    cfg: SamplerConfig,
    refs: Vec<ReferenceChain>,
    min_ess: f64,
}

impl<'a> ReferencePool<'a> {
    fn pivot(&mut self, beta0: f64) -> Result<PivotEstimate> {
        let nearest = self
            .refs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.beta_ref() - beta0).abs().total_cmp(&(b.1.beta_ref() - beta0).abs()))
            .map(|(i, _)| i)
            .expect("pool starts with one chain");
        match pivot_at(self.grams, self.sel, &self.refs[nearest], beta0) {
            Ok(p) => {
                self.min_ess = self.min_ess.min(p.ess_fraction);
                Ok(p)
            }
            Err(Error::DegenerateWeights { .. }) if self.refs.len() <= MAX_EXTRA_REFERENCES => {
                let seed = self.cfg.seed.wrapping_add(self.refs.len() as u64);
                let chain = ReferenceChain::run(self.grams, self.sel, self.rand, self.kind, beta0, &self.cfg.with_seed(seed))?;
                self.refs.push(chain);
                let p = pivot_at(self.grams, self.sel, self.refs.last().unwrap(), beta0)?;
                self.min_ess = self.min_ess.min(p.ess_fraction);
                Ok(p)
            }
            Err(e) => Err(e),
        }
    }
}

/// Selective confidence interval by inverting the conditional pivot.
pub fn selective_interval(
    grams: &Grams,
    sel: &SelectionResult,
    rand: &RandomizationSpec,
    kind: DensityKind,
    level: f64,
    cfg: &SamplerConfig,
) -> Result<SelectiveInterval> {
    check_level(level)?;
    let restricted = grams.restrict(&sel.set)?;
    let beta_ref = restricted.tsls_estimate()?;
    let naive = restricted.naive_interval(level, NaiveStatistic::Tsls)?;
    let first = ReferenceChain::run(grams, sel, rand, kind, beta_ref, cfg)?;
    let diagnostics = first.trace.diagnostics.clone();
    let mut pool = ReferencePool {
        grams,
        sel,
        rand,
        kind,
        cfg: cfg.clone(),
        refs: vec![first],
        min_ess: 1.0,
    };
    let half = (0.5 * naive.length()).max(f64::EPSILON * beta_ref.abs().max(1.0));
    let (lower, upper, unbounded, disconnected) = match kind {
        DensityKind::TslsStat | DensityKind::TslsEst => {
            let (lo, hi) = invert_pivot(&mut pool, beta_ref, half, level)?;
            (lo, hi, false, false)
        }
        DensityKind::ArIntermediate => ar_region(&mut pool, beta_ref, half, level)?,
    };
    Ok(SelectiveInterval {
        lower,
        upper,
        level,
        unbounded,
        disconnected,
        reference_beta: beta_ref,
        references_used: pool.refs.len(),
        min_ess_fraction: pool.min_ess,
        diagnostics,
    })
}

/// Finds `beta_L`, `beta_U` with pivot `1 - a/2` and `a/2` (pivot decreasing).
fn invert_pivot(pool: &mut ReferencePool<'_>, centre: f64, half: f64, level: f64) -> Result<(f64, f64)> {
    let alpha = 1.0 - level;
    let (hi_target, lo_target) = (1.0 - alpha / 2.0, alpha / 2.0);
    let mut width = BRACKET_INFLATION * half;
    let mut expansions = 0;
    let (mut a, mut b, mut pa, mut pb);
    loop {
        a = centre - width;
        b = centre + width;
        pa = pool.pivot(a)?.pivot;
        pb = pool.pivot(b)?.pivot;
        if pa >= hi_target && pb <= lo_target {
            break;
        }
        if expansions == MAX_EXPANSIONS {
            return Err(Error::BracketNotFound {
                expansions,
                lower_pivot: pa,
                upper_pivot: pb,
            });
        }
        width *= 2.0;
        expansions += 1;
    }
    let lower = bisect_pivot(pool, a, b, hi_target)?;
    let upper = bisect_pivot(pool, a, b, lo_target)?;
    Ok((lower.min(upper), upper.max(lower)))
}

/// Bisection for `pivot(beta) = target` on a decreasing pivot.
fn bisect_pivot(pool: &mut ReferencePool<'_>, mut a: f64, mut b: f64, target: f64) -> Result<f64> {
    let mut mid = 0.5 * (a + b);
    for _ in 0..MAX_BISECTION_STEPS {
        mid = 0.5 * (a + b);
        let p = pool.pivot(mid)?.pivot;
        if (p - target).abs() <= PIVOT_TOL {
            return Ok(mid);
        }
        if p > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(mid)
}

/// Acceptance region `{beta0 : P(T_AR >= obs) >= 1 - level}` by grid scan,
/// expanded until both ends are rejected, then refined at sign changes.
fn ar_region(pool: &mut ReferencePool<'_>, centre: f64, half: f64, level: f64) -> Result<(f64, f64, bool, bool)> {
    let alpha = 1.0 - level;
    let mut width = BRACKET_INFLATION * half;
    let mut expansions = 0;
    let (grid, accepted, pvals) = loop {
        let grid: Vec<f64> = (0..AR_SCAN_POINTS)
            .map(|i| centre - width + 2.0 * width * i as f64 / (AR_SCAN_POINTS - 1) as f64)
            .collect();
        let mut pvals = Vec::with_capacity(grid.len());
        for &b in &grid {
            pvals.push(pool.pivot(b)?.upper);
        }
        let accepted: Vec<bool> = pvals.iter().map(|&p| p >= alpha).collect();
        let edge = accepted[0] || accepted[AR_SCAN_POINTS - 1];
        if !edge || expansions == MAX_EXPANSIONS {
            break (grid, accepted, pvals);
        }
        width *= 2.0;
        expansions += 1;
    };
    let unbounded = accepted[0] || accepted[AR_SCAN_POINTS - 1];
    let runs = accepted.windows(2).filter(|w| w[0] && !w[1]).count() + usize::from(accepted[AR_SCAN_POINTS - 1]);
    let Some(first) = accepted.iter().position(|&a| a) else {
        // nothing accepted: report the point with the largest p-value
        let best = (0..grid.len()).max_by(|&i, &j| pvals[i].total_cmp(&pvals[j])).unwrap();
        return Ok((grid[best], grid[best], false, false));
    };
    let last = accepted.iter().rposition(|&a| a).unwrap();
    let refine = |pool: &mut ReferencePool<'_>, mut rej: f64, mut acc: f64| -> Result<f64> {
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (rej + acc);
            let p = pool.pivot(mid)?.upper;
            if (p - alpha).abs() <= PIVOT_TOL {
                return Ok(mid);
            }
            if p >= alpha {
                acc = mid;
            } else {
                rej = mid;
            }
        }
        Ok(0.5 * (rej + acc))
    };
    let lower = if first == 0 { grid[0] } else { refine(pool, grid[first - 1], grid[first])? };
    let upper = if last == AR_SCAN_POINTS - 1 {
        grid[last]
    } else {
        refine(pool, grid[last + 1], grid[last])?
    };
    Ok((lower, upper, unbounded, runs > 1))
}

/// Everything produced by one analysis of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    pub statistic: DensityKind,
    pub beta0: f64,
    pub observed: f64,
    pub pvalue: f64,
    pub tail: Tail,
    pub beta_tsls: f64,
    pub ci: SelectiveInterval,
    pub naive: NaiveInterval,
    pub naive_pvalue: f64,
    pub selection: SelectionResult,
    pub n_samples: usize,
    pub test_diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub kind: DensityKind,
    pub beta0: f64,
    pub level: f64,
    pub tail: Tail,
    pub sampler: SamplerConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            kind: DensityKind::TslsStat,
            beta0: 0.0,
            level: 0.95,
            tail: Tail::Right,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Test at `opts.beta0` and interval, both conditional on a given selection.
pub fn analyze_selection(
    grams: &Grams,
    sel: &SelectionResult,
    rand: &RandomizationSpec,
    opts: &AnalysisOptions,
) -> Result<InferenceResult> {
    let restricted = grams.restrict(&sel.set)?;
    let beta_tsls = restricted.tsls_estimate()?;
    let naive = restricted.naive_interval(opts.level, opts.kind.naive_statistic())?;
    let (test, _) = conditional_test(grams, sel, rand, opts.kind, opts.beta0, opts.tail, &opts.sampler)?;
    let ci = selective_interval(grams, sel, rand, opts.kind, opts.level, &opts.sampler.with_seed(opts.sampler.seed.wrapping_add(1_000)))?;
    let naive_pvalue = naive_pvalue(grams, sel, opts.kind, opts.beta0, opts.tail)?;
    Ok(InferenceResult {
        statistic: opts.kind,
        beta0: opts.beta0,
        observed: test.observed,
        pvalue: test.pvalue,
        tail: opts.tail,
        beta_tsls,
        ci,
        naive,
        naive_pvalue,
        selection: sel.clone(),
        n_samples: test.n_samples,
        test_diagnostics: test.diagnostics,
    })
}

/// Classical p-value treating `E` as fixed.
pub fn naive_pvalue(grams: &Grams, sel: &SelectionResult, kind: DensityKind, beta0: f64, tail: Tail) -> Result<f64> {
    let r = grams.restrict(&sel.set)?;
    let normal = crate::grams::std_normal();
    Ok(match kind {
        DensityKind::ArIntermediate => {
            let (df1, df2) = r.ar_df();
            let f = FisherSnedecor::new(df1, df2).map_err(|e| Error::InvalidInput(e.to_string()))?;
            f.sf(r.ar_statistic(beta0))
        }
        DensityKind::TslsStat | DensityKind::TslsEst => {
            let z = match kind {
                DensityKind::TslsStat => r.tsls_statistic(beta0)?,
                _ => (r.tsls_estimate()? - beta0) / r.tsls_se()?,
            };
            match tail {
                Tail::Right => normal.sf(z),
                Tail::Left => normal.cdf(z),
                Tail::TwoSided => (2.0 * normal.sf(z.abs())).min(1.0),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_extremes_and_symmetry() {
        let xs: Vec<f64> = (0..1001).map(|i| i as f64 / 1000.0).collect();
        assert_eq!(conditional_pvalue(&xs, -1.0, Tail::Right).unwrap(), 1.0);
        assert_eq!(conditional_pvalue(&xs, 2.0, Tail::Right).unwrap(), 0.0);
        let two = conditional_pvalue(&xs, 0.5, Tail::TwoSided).unwrap();
        assert!((two - 1.0).abs() <= 2.0 / xs.len() as f64);
        assert!(conditional_pvalue(&[], 0.0, Tail::Right).is_err());
    }

    #[test]
    fn pvalue_ignores_order() {
        let xs = vec![0.3, -1.2, 2.2, 0.9, 0.1, -0.4];
        let mut ys = xs.clone();
        ys.reverse();
        for tail in [Tail::Right, Tail::Left, Tail::TwoSided] {
            assert_eq!(
                conditional_pvalue(&xs, 0.2, tail).unwrap(),
                conditional_pvalue(&ys, 0.2, tail).unwrap()
            );
        }
    }

    #[test]
    fn tail_parsing() {
        assert_eq!("two-sided".parse::<Tail>().unwrap(), Tail::TwoSided);
        assert!("sideways".parse::<Tail>().is_err());
    }
}
