//! Randomization density `g` (independent per coordinate) and the
//! truncated draws used by the sampler.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grams::std_normal;
use statrs::distribution::ContinuousCDF;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Laplace,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "laplace" | "laplacian" => Ok(Family::Laplace),
            other => Err(Error::InvalidInput(format!("unknown randomization family `{other}`"))),
        }
    }
}

/// Product density over `L + 1` coordinates; `scale` holds per-coordinate
/// standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationSpec {
    pub family: Family,
    pub scale: Vec<f64>,
    pub seed: u64,
}

impl RandomizationSpec {
    pub fn new(family: Family, scale: Vec<f64>, seed: u64) -> Result<Self> {
        if scale.is_empty() || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput(
                "randomization scale must be finite and strictly positive".into(),
            ));
        }
        Ok(Self { family, scale, seed })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Same family and seed, every scale multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            family: self.family,
            scale: self.scale.iter().map(|s| s * c).collect(),
            seed: self.seed,
        }
    }

    pub fn log_density_coord(&self, j: usize, w: f64) -> f64 {
        let s = self.scale[j];
        match self.family {
            Family::Gaussian => {
                let x = w / s;
                -0.5 * x * x - s.ln() - LN_SQRT_2PI
            }
            Family::Laplace => {
                let b = s / std::f64::consts::SQRT_2;
                -w.abs() / b - (2.0 * b).ln()
            }
        }
    }

    pub fn log_density(&self, omega: &[f64]) -> f64 {
        omega
            .iter()
            .enumerate()
            .map(|(j, &w)| self.log_density_coord(j, w))
            .sum()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.scale[j] * self.family.standard_draw(rng))
            .collect()
    }

    /// Draw of coordinate `j` restricted to `[lo, hi]`.
    pub fn draw_truncated<R: Rng + ?Sized>(&self, rng: &mut R, j: usize, lo: f64, hi: f64) -> f64 {
        let s = self.scale[j];
        match self.family {
            Family::Gaussian => s * truncated_std_normal(rng, lo / s, hi / s),
            Family::Laplace => {
                let b = s / std::f64::consts::SQRT_2;
                b * truncated_std_laplace(rng, lo / b, hi / b)
            }
        }
    }
}

impl Family {
    /// Draw with zero mean and unit variance.
    pub fn standard_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => StandardNormal.sample(rng),
            Family::Laplace => {
                let e: f64 = Exp1.sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * e / std::f64::consts::SQRT_2
            }
        }
    }
}

/// Upper tail `P(Z > x)` of the standard normal.
fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal restricted to `[a, b]`, `a < b`.
pub fn truncated_std_normal<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    if b <= 0.0 {
        return -truncated_std_normal(rng, -b, -a);
    }
    if a < 0.0 {
        // interval straddles the mode
        let mass = std_normal().cdf(b) - std_normal().cdf(a);
        if mass > 0.25 {
            loop {
                let z: f64 = StandardNormal.sample(rng);
                if z >= a && z <= b {
                    return z;
                }
            }
        }
        let u: f64 = rng.random();
        let p = std_normal().cdf(a) + u * mass;
        return std_normal().inverse_cdf(p).clamp(a, b);
    }
    // 0 <= a < b
    if a > 3.0 {
        let width = b - a;
        let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
        if width < 1.0 / alpha {
            // short interval deep in the tail: uniform proposal
            loop {
                let z = a + width * rng.random::<f64>();
                if rng.random::<f64>().ln() <= 0.5 * (a * a - z * z) {
                    return z;
                }
            }
        }
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = a + e / alpha;
            if z > b {
                continue;
            }
            if rng.random::<f64>().ln() <= -0.5 * (z - alpha) * (z - alpha) {
                return z;
            }
        }
    }
    let sa = normal_sf(a);
    let sb = normal_sf(b);
    let u: f64 = rng.random();
    let q = sa - u * (sa - sb);
    (-std_normal().inverse_cdf(q)).clamp(a, b)
}

/// Unit-scale Laplace (density `exp(-|x|)/2`) restricted to `[a, b]`.
pub fn truncated_std_laplace<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    if b <= 0.0 {
        return -truncated_std_laplace(rng, -b, -a);
    }
    let u: f64 = rng.random();
    if a >= 0.0 {
        // truncated exponential on [a, b]
        let w = b - a;
        return (a - (-u * (-(-w).exp_m1())).ln_1p()).clamp(a, b);
    }
    let cdf = |x: f64| if x < 0.0 { 0.5 * x.exp() } else { 1.0 - 0.5 * (-x).exp() };
    let (fa, fb) = (cdf(a), cdf(b));
    let p = fa + u * (fb - fa);
    let x = if p < 0.5 { (2.0 * p).ln() } else { -(2.0 * (1.0 - p)).ln() };
    x.clamp(a, b)
}
