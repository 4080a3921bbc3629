//! Metropolis-within-Gibbs sampler over `(t, beta, alpha_E, u_{-E})`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{DensitySpec, SamplerState};
use crate::error::{Error, Result};

/// Iterations between full recomputations of the cached randomization.
const REFRESH_EVERY: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub burnin: usize,
    pub samples: usize,
    /// Random-walk scale for `t`; chosen from the local curvature if unset.
    pub step_t: Option<f64>,
    /// Multiplier on the per-coordinate proposal scales of `(beta, alpha_E)`.
    pub step_coef: Option<f64>,
    /// Also run the randomization-preserving move on `t` (see [`run_chain`]).
    pub shear: bool,
    pub step_shear: Option<f64>,
    pub target_accept: f64,
    pub adapt_window: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burnin: 5000,
            samples: 10_000,
            step_t: None,
            step_coef: None,
            shear: true,
            step_shear: None,
            target_accept: 0.3,
            adapt_window: 200,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.adapt_window == 0 {
            return Err(Error::InvalidInput("sample count and adaptation window must be positive".into()));
        }
        for s in [self.step_t, self.step_coef, self.step_shear].into_iter().flatten() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidInput(format!("step sizes must be positive, got {s}")));
            }
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidInput("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub accept_t: f64,
    pub accept_coef: f64,
    pub accept_shear: f64,
    /// Fraction of coefficient proposals that would have left the sign box
    /// without reflection (reported for information; reflection keeps every
    /// proposal inside).
    pub box_rejections: f64,
    pub step_t: f64,
    pub step_coef: f64,
    pub step_shear: f64,
}

/// Post-burn-in output of one chain.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Test statistic at every kept state.
    pub stats: Vec<f64>,
    pub states: Vec<SamplerState>,
    /// Reconstructed randomization at every kept state.
    pub omegas: Vec<DVector<f64>>,
    pub accept_t: Vec<bool>,
    pub accept_coef: Vec<bool>,
    pub diagnostics: Diagnostics,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Writes `iter,t,accept_t,accept_coef`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "t", "accept_t", "accept_coef"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                format!("{}", self.stats[i]),
                u8::from(self.accept_t[i]).to_string(),
                u8::from(self.accept_coef[i]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mutable chain position with its cached randomization and log-density terms.
struct Position {
    state: SamplerState,
    omega: DVector<f64>,
    log_g: f64,
    log_base: f64,
}

impl Position {
    fn new(spec: &DensitySpec, state: SamplerState) -> Self {
        let omega = spec.omega(&state);
        Self {
            log_g: spec.log_g(&omega),
            log_base: spec.log_base(&state.t),
            omega,
            state,
        }
    }

    fn refresh(&mut self, spec: &DensitySpec) {
        self.omega = spec.omega(&self.state);
        self.log_g = spec.log_g(&self.omega);
        self.log_base = spec.log_base(&self.state.t);
    }
}

/// Proposal scales from a Gaussian approximation of `g` around the chain.
fn natural_scales(spec: &DensitySpec) -> (f64, Vec<f64>) {
    let scale = &spec.randomization().scale;
    let precision = |col: nalgebra::DVectorView<'_, f64>| -> f64 {
        col.iter().zip(scale).map(|(k, s)| (k / s) * (k / s)).sum()
    };
    let k = spec.t_dim();
    let mut min_sd = f64::INFINITY;
    for c in 0..k {
        let prec = precision(spec.k1().column(c)) + 1.0 / spec.var_t()[c];
        min_sd = min_sd.min(1.0 / prec.sqrt());
    }
    let step_t = 2.4 / (k as f64).sqrt() * min_sd;
    let l = spec.n_instruments();
    let mut coef = vec![1.0 / precision(spec.k2().column(l)).sqrt()];
    for &j in spec.set().indices() {
        coef.push(1.0 / precision(spec.k2().column(j)).sqrt());
    }
    (step_t, coef)
}

/// Linear maps carrying `(alpha_E, beta)` and `u_{-E}` along with a change of
/// `t` so that the reconstructed randomization stays fixed.
struct Shear {
    coef: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl Shear {
    fn new(spec: &DensitySpec) -> Option<Self> {
        let l = spec.n_instruments();
        let active: Vec<usize> = spec.set().indices().iter().copied().chain([l]).collect();
        let inactive = spec.inactive();
        let k2_aa = spec.k2().select_rows(&active).select_columns(&active);
        let k1_a = spec.k1().select_rows(&active);
        let coef = -k2_aa.cholesky()?.solve(&k1_a);
        let k1_i = spec.k1().select_rows(inactive);
        let k2_ia = spec.k2().select_rows(inactive).select_columns(&active);
        let u = -(k1_i + k2_ia * &coef) / spec.lambda();
        Some(Self { coef, u })
    }
}

/// Acceptance counters for one block.
#[derive(Default)]
struct Counter {
    window: usize,
    total: usize,
    kept: usize,
}

impl Counter {
    fn record(&mut self, accepted: bool, burn: bool) {
        let a = usize::from(accepted);
        self.window += a;
        self.total += a;
        if !burn {
            self.kept += a;
        }
    }

    /// Multiplies `step` by `exp(rate - target)` and resets the window.
    fn adapt(&mut self, step: &mut f64, window: usize, target: f64) {
        *step *= (self.window as f64 / window as f64 - target).exp();
        self.window = 0;
    }
}

/// Runs one chain from `init`.
///
/// Each iteration updates `t` by a Gaussian random walk, `(beta, alpha_E)`
/// by a reflected random walk, and `u_{-E}` by an exact truncated draw.
/// With `cfg.shear` set, a further random-walk move on `t` carries the
/// optimization variables along the linear direction that keeps the
/// reconstructed randomization fixed; it is a unit-Jacobian shear, so it is
/// accepted with the ratio of the Gaussian base density inside `B`. Without
/// it, `t` can only move as far as the current optimization variables allow,
/// which makes the chain mix slowly when the randomization is small.
pub fn run_chain(spec: &DensitySpec, cfg: &SamplerConfig, init: SamplerState) -> Result<Trace> {
    cfg.validate()?;
    if !spec.log_density(&init).is_finite() {
        return Err(Error::InvalidInput("initial state lies outside the selection event".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (auto_t, coef_scales) = natural_scales(spec);
    let k = spec.t_dim() as f64;
    let mut step_t = cfg.step_t.unwrap_or(auto_t);
    let mut step_coef = cfg.step_coef.unwrap_or(2.4 / (coef_scales.len() as f64).sqrt());
    let base_sd = spec.var_t().iter().cloned().fold(f64::INFINITY, f64::min).sqrt();
    let mut step_shear = cfg.step_shear.unwrap_or(2.4 / k.sqrt() * base_sd);
    let shear = if cfg.shear { Shear::new(spec) } else { None };
    let mut pos = Position::new(spec, init);

    let total = cfg.burnin + cfg.samples;
    let mut trace = Trace {
        stats: Vec::with_capacity(cfg.samples),
        states: Vec::with_capacity(cfg.samples),
        omegas: Vec::with_capacity(cfg.samples),
        accept_t: Vec::with_capacity(cfg.samples),
        accept_coef: Vec::with_capacity(cfg.samples),
        diagnostics: Diagnostics::default(),
    };
    let (mut ct, mut cc, mut cs) = (Counter::default(), Counter::default(), Counter::default());
    let mut reflected = 0usize;

    for iter in 0..total {
        let burn = iter < cfg.burnin;
        let prop = propose_t(&pos, spec, step_t, &mut rng);
        let acc_t = accept(&mut pos, Some(prop), &mut rng);
        let (prop, refl) = propose_coef(&pos, spec, step_coef, &coef_scales, &mut rng);
        let acc_c = accept(&mut pos, Some(prop), &mut rng);
        update_u(&mut pos, spec, &mut rng);
        if let Some(sh) = &shear {
            let prop = propose_shear(&pos, spec, sh, step_shear, &mut rng);
            cs.record(accept(&mut pos, prop, &mut rng), burn);
        }
        if (iter + 1) % REFRESH_EVERY == 0 {
            pos.refresh(spec);
        }
        ct.record(acc_t, burn);
        cc.record(acc_c, burn);
        reflected += usize::from(refl);

        if burn {
            if (iter + 1) % cfg.adapt_window == 0 {
                ct.adapt(&mut step_t, cfg.adapt_window, cfg.target_accept);
                cc.adapt(&mut step_coef, cfg.adapt_window, cfg.target_accept);
                if shear.is_some() {
                    cs.adapt(&mut step_shear, cfg.adapt_window, cfg.target_accept);
                }
            }
        } else {
            trace.stats.push(spec.statistic(&pos.state.t));
            trace.states.push(pos.state.clone());
            trace.omegas.push(pos.omega.clone());
            trace.accept_t.push(acc_t);
            trace.accept_coef.push(acc_c);
        }
    }
    if ct.total == 0 {
        return Err(Error::StuckChain { block: "t" });
    }
    if cc.total == 0 {
        return Err(Error::StuckChain { block: "coef" });
    }
    let s = cfg.samples as f64;
    trace.diagnostics = Diagnostics {
        accept_t: ct.kept as f64 / s,
        accept_coef: cc.kept as f64 / s,
        accept_shear: cs.kept as f64 / s,
        box_rejections: reflected as f64 / total as f64,
        step_t,
        step_coef,
        step_shear,
    };
    Ok(trace)
}

fn metropolis<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// A proposed position and the log acceptance ratio of moving there.
struct Proposal {
    to: Position,
    log_ratio: f64,
}

fn accept<R: Rng + ?Sized>(pos: &mut Position, prop: Option<Proposal>, rng: &mut R) -> bool {
    match prop {
        Some(p) if metropolis(p.log_ratio, rng) => {
            *pos = p.to;
            true
        }
        _ => false,
    }
}

/// Gaussian random walk on `t`, accepted by the ratio of the full density.
fn propose_t<R: Rng + ?Sized>(pos: &Position, spec: &DensitySpec, step: f64, rng: &mut R) -> Proposal {
    let k = spec.t_dim();
    let dt: Vec<f64> = (0..k).map(|_| step * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut state = pos.state.clone();
    for (t, d) in state.t.iter_mut().zip(&dt) {
        *t += d;
    }
    let mut omega = pos.omega.clone();
    for (c, &d) in dt.iter().enumerate() {
        omega.axpy(d, &spec.k1().column(c), 1.0);
    }
    let log_g = spec.log_g(&omega);
    let log_base = spec.log_base(&state.t);
    let log_ratio = (log_base - pos.log_base) + (log_g - pos.log_g);
    Proposal {
        to: Position {
            state,
            omega,
            log_g,
            log_base,
        },
        log_ratio,
    }
}

/// Joint move of `(beta, alpha_E)` with sign-preserving reflection on
/// `alpha_E`; accepted by the randomization-density ratio. Also reports
/// whether any coordinate was reflected.
fn propose_coef<R: Rng + ?Sized>(
    pos: &Position,
    spec: &DensitySpec,
    step: f64,
    scales: &[f64],
    rng: &mut R,
) -> (Proposal, bool) {
    let family = spec.randomization().family;
    let l = spec.n_instruments();
    let mut state = pos.state.clone();
    state.beta += step * scales[0] * family.standard_draw(rng);
    let mut reflected = false;
    for ((a, &s), &sc) in state.alpha_e.iter_mut().zip(spec.signs()).zip(&scales[1..]) {
        let moved = a.abs() + step * sc * family.standard_draw(rng);
        reflected |= moved < 0.0;
        // an exact zero would leave the open orthant
        *a = s * moved.abs().max(f64::MIN_POSITIVE);
    }
    let mut omega = pos.omega.clone();
    omega.axpy(state.beta - pos.state.beta, &spec.k2().column(l), 1.0);
    for ((&j, &a_new), &a_old) in spec.set().indices().iter().zip(&state.alpha_e).zip(&pos.state.alpha_e) {
        omega.axpy(a_new - a_old, &spec.k2().column(j), 1.0);
    }
    let log_g = spec.log_g(&omega);
    let prop = Proposal {
        log_ratio: log_g - pos.log_g,
        to: Position {
            state,
            omega,
            log_g,
            log_base: pos.log_base,
        },
    };
    (prop, reflected)
}

/// Random walk on `t` along the randomization-preserving shear. `None` when
/// the move leaves the sign orthant or the subgradient box.
fn propose_shear<R: Rng + ?Sized>(pos: &Position, spec: &DensitySpec, shear: &Shear, step: f64, rng: &mut R) -> Option<Proposal> {
    let k = spec.t_dim();
    let dt = DVector::from_fn(k, |_, _| step * rng.sample::<f64, _>(StandardNormal));
    let d_coef = &shear.coef * &dt;
    let d_u = &shear.u * &dt;
    let m = pos.state.alpha_e.len();
    let mut state = pos.state.clone();
    for (t, d) in state.t.iter_mut().zip(dt.iter()) {
        *t += d;
    }
    for (a, d) in state.alpha_e.iter_mut().zip(d_coef.iter()) {
        *a += d;
    }
    state.beta += d_coef[m];
    for (u, d) in state.u_inactive.iter_mut().zip(d_u.iter()) {
        *u += d;
    }
    if state.alpha_e.iter().zip(spec.signs()).any(|(a, s)| a * s <= 0.0) || state.u_inactive.iter().any(|u| u.abs() > 1.0) {
        return None;
    }
    let log_base = spec.log_base(&state.t);
    Some(Proposal {
        log_ratio: log_base - pos.log_base,
        to: Position {
            state,
            omega: pos.omega.clone(),
            log_g: pos.log_g,
            log_base,
        },
    })
}

/// Exact conditional draw of `u_{-E}` from the truncated randomization law.
fn update_u<R: Rng + ?Sized>(pos: &mut Position, spec: &DensitySpec, rng: &mut R) {
    let lambda = spec.lambda();
    let rand = spec.randomization();
    let centres = spec.inactive_centres(&pos.omega, &pos.state);
    for ((&j, u), delta) in spec.inactive().iter().zip(pos.state.u_inactive.iter_mut()).zip(centres) {
        let v = rand.draw_truncated(rng, j, delta - lambda, delta + lambda);
        *u = ((v - delta) / lambda).clamp(-1.0, 1.0);
        pos.omega[j] = delta + lambda * *u;
    }
    pos.log_g = spec.log_g(&pos.omega);
}
