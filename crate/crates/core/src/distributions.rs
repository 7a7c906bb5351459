//! Output distributions: Student's t with three degrees of freedom and the
//! Gaussian, each in location/scale form.
//!
//! Training minimizes the negative log-likelihood of the scaled target,
//! `−log f((y − μ)/σ) + log σ`; the `log σ` term is the Jacobian of the
//! location/scale transform and keeps σ from drifting to infinity.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(π·√3 / 2)`, the t(3) NLL at the mode for unit scale.
const T3_LOG_NORMALIZER: f64 = 1.000_888_849_623_509_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    StudentT3,
    Gaussian,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::StudentT3 => "student_t3",
            Family::Gaussian => "gaussian",
        }
    }

    /// Density of the standardized variable.
    pub fn pdf(self, z: f64) -> f64 {
        match self {
            Family::StudentT3 => t3_pdf(z),
            Family::Gaussian => (-0.5 * z * z).exp() / (2.0 * PI).sqrt(),
        }
    }

    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Family::StudentT3 => t3_cdf(z),
            Family::Gaussian => 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2),
        }
    }

    /// Inverse CDF of the standardized variable, `0 < p < 1`.
    pub fn standard_quantile(self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
        }
        Ok(match self {
            Family::StudentT3 => t3_quantile(p),
            Family::Gaussian => probit(p),
        })
    }

    /// Per-element NLL of `y` under `(mu, sigma)`.
    pub fn nll(self, y: f64, mu: f64, sigma: f64) -> f64 {
        let z = (y - mu) / sigma;
        let standardized = match self {
            Family::StudentT3 => T3_LOG_NORMALIZER + 2.0 * ln_1p_sq_over3(z),
            Family::Gaussian => 0.5 * z * z + 0.5 * LN_2PI,
        };
        standardized + sigma.ln()
    }

    /// `(∂nll/∂μ, ∂nll/∂σ)`.
    pub fn nll_grad(self, y: f64, mu: f64, sigma: f64) -> (f64, f64) {
        let z = (y - mu) / sigma;
        let dz = match self {
            // d/dz 2·ln(1 + z²/3) = 4z / (3 + z²)
            Family::StudentT3 => {
                if z.abs() > 1e150 {
                    4.0 / (3.0 / z + z)
                } else {
                    4.0 * z / (3.0 + z * z)
                }
            }
            Family::Gaussian => z,
        };
        (-dz / sigma, (1.0 - dz * z) / sigma)
    }
}

fn ln_1p_sq_over3(z: f64) -> f64 {
    if z.abs() > 1e150 {
        2.0 * z.abs().ln() - 3f64.ln()
    } else {
        (z * z / 3.0).ln_1p()
    }
}

/// Standard Student's t(3) density, `2 / (π·√3·(1 + y²/3)²)`.
pub fn t3_pdf(y: f64) -> f64 {
    let q = 1.0 + y * y / 3.0;
    2.0 / (PI * 3f64.sqrt() * q * q)
}

/// Closed-form t(3) CDF: `1/2 + (u/(1 + u²) + atan u)/π` with `u = y/√3`.
pub fn t3_cdf(y: f64) -> f64 {
    let u = y / 3f64.sqrt();
    if u.abs() > 1e150 {
        return if u > 0.0 { 1.0 } else { 0.0 };
    }
    0.5 + (u / (1.0 + u * u) + u.atan()) / PI
}

/// t(3) inverse CDF by bracketed bisection on [`t3_cdf`].
pub fn t3_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    if p == 0.5 {
        return 0.0;
    }
    // Solve in the upper half and reflect; the CDF is flat-ish in the tails
    // so bisection on the tail probability keeps relative accuracy.
    let (upper, sign) = if p > 0.5 { (1.0 - p, 1.0) } else { (p, -1.0) };
    let tail = |y: f64| 1.0 - t3_cdf(y);
    let mut hi = 1.0;
    while tail(hi) > upper {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > upper {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    sign * 0.5 * (lo + hi)
}

/// Standard normal inverse CDF: Acklam's rational approximation polished
/// with one Halley step against `erfc`.
pub fn probit(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let low = 0.02425;
    let x = if p < low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Per-step location/scale forecasts of one distribution family.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub family: Family,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ForecastDistribution {
    pub fn new(family: Family, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape(
                "forecast_distribution",
                format!("{} locations vs {} scales", mu.len(), sigma.len()),
            ));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
        }
        Ok(ForecastDistribution { family, mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `μ + σ·Q(p)` per step.
    pub fn quantile(&self, p: f64) -> Result<Vec<f64>> {
        let q = self.family.standard_quantile(p)?;
        Ok(self.mu.iter().zip(&self.sigma).map(|(m, s)| m + s * q).collect())
    }

    /// One inverse-CDF draw per step.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m + s * standard_sample(self.family, rng))
            .collect()
    }
}

/// Inverse-CDF draw of the standardized variable.
pub fn standard_sample<R: Rng + ?Sized>(family: Family, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return match family {
                Family::StudentT3 => t3_quantile(u),
                Family::Gaussian => probit(u),
            };
        }
    }
}

/// Mean NLL over all elements; see [`nll`].
pub fn t3_nll(g: &mut Graph, y: &[f64], mu: Var, sigma: Var) -> Result<Var> {
    g.nll(Family::StudentT3, y, mu, sigma, None)
}

pub fn gaussian_nll(g: &mut Graph, y: &[f64], mu: Var, sigma: Var) -> Result<Var> {
    g.nll(Family::Gaussian, y, mu, sigma, None)
}

/// Mean NLL over the elements where `mask` is nonzero (all when `None`).
pub fn nll(
    g: &mut Graph,
    family: Family,
    y: &[f64],
    mu: Var,
    sigma: Var,
    mask: Option<&[f64]>,
) -> Result<Var> {
    g.nll(family, y, mu, sigma, mask)
}
