//! Gaussian estimate of the α-quantile of per-batch risks.
//!
//! Given risks `r_1..r_k` measured on the current batch and on batches drawn
//! from memory, the risk distribution across environments is modelled as a
//! normal with the sample mean `μ` and unbiased sample variance `σ²`. The
//! quantile term is
//!
//! ```text
//! L_G = μ + s · Φ⁻¹(α)      s = σ² (ScaleMode::Variance, default)
//!                           s = σ  (ScaleMode::StdDev)
//! ```
//!
//! `L_G` is differentiated through the risks: `∇θ L_G = Σ_i w_i ∇θ r_i`,
//! with the `w_i` from [`quantile_risk_weights`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Standard normal CDF via the complementary error function.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

// Acklam's rational approximation to the normal quantile (relative error
// about 1.15e-9), polished below with Halley steps against `phi`.
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
const P_LOW: f64 = 0.024_25;

fn acklam_lower(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Quantile for `p <= 0.5`, where `phi` is evaluated in its accurate tail.
fn lower_quantile(p: f64) -> f64 {
    let mut x = acklam_lower(p);
    for _ in 0..2 {
        let e = phi(x) - p;
        let u = e / normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Inverse standard normal CDF on the open interval (0, 1).
///
/// Upper-half arguments are reflected, so `phi_inverse(1 - a)` is exactly
/// `-phi_inverse(a)` whenever `1 - a` is representable.
pub fn phi_inverse(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Probability(alpha));
    }
    Ok(if alpha == 0.5 {
        0.0
    } else if alpha < 0.5 {
        lower_quantile(alpha)
    } else {
        -lower_quantile(1.0 - alpha)
    })
}

/// Which spread statistic multiplies `Φ⁻¹(α)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `μ + σ² Φ⁻¹(α)`, the form the trainer uses by default.
    #[default]
    Variance,
    /// `μ + σ Φ⁻¹(α)`, the textbook Gaussian quantile.
    StdDev,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Variance => "paper",
            ScaleMode::StdDev => "std",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "variance" => Ok(ScaleMode::Variance),
            "std" | "stddev" => Ok(ScaleMode::StdDev),
            other => Err(Error::Config(format!("unknown scale mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskQuantileEstimate {
    pub risks: Vec<f64>,
    pub mu: f64,
    /// Unbiased (k - 1 denominator).
    pub sigma_sq: f64,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    /// Φ⁻¹(α).
    pub z: f64,
    pub l_g: f64,
}

pub fn estimate_quantile(
    risks: &[f64],
    alpha: f64,
    scale_mode: ScaleMode,
) -> Result<RiskQuantileEstimate> {
    let k = risks.len();
    if k < 2 {
        return Err(Error::TooFewRisks(k));
    }
    if !risks.iter().all(|r| r.is_finite()) {
        return Err(Error::NonFinite("risks"));
    }
    if let Some(&r) = risks.iter().find(|&&r| r < 0.0) {
        return Err(Error::NegativeRisk(r));
    }
    let z = phi_inverse(alpha)?;
    // Accumulated as offsets from the first risk so equal risks give back
    // exactly that value.
    let r0 = risks[0];
    let mu = r0 + risks.iter().map(|r| r - r0).sum::<f64>() / k as f64;
    let sigma_sq = risks.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / (k - 1) as f64;
    let scale = match scale_mode {
        ScaleMode::Variance => sigma_sq,
        ScaleMode::StdDev => sigma_sq.sqrt(),
    };
    Ok(RiskQuantileEstimate {
        risks: risks.to_vec(),
        mu,
        sigma_sq,
        alpha,
        scale_mode,
        z,
        l_g: mu + scale * z,
    })
}

/// `∂L_G/∂r_i` for every risk in the estimate.
///
/// The standard-deviation path has no derivative at `σ² = 0`; its
/// contribution is taken as 0 there.
pub fn quantile_risk_weights(est: &RiskQuantileEstimate) -> Vec<f64> {
    let k = est.risks.len() as f64;
    let base = 1.0 / k;
    match est.scale_mode {
        ScaleMode::Variance => est
            .risks
            .iter()
            .map(|r| base + est.z * 2.0 * (r - est.mu) / (k - 1.0))
            .collect(),
        ScaleMode::StdDev => {
            let sigma = est.sigma_sq.sqrt();
            est.risks
                .iter()
                .map(|r| {
                    if sigma > 0.0 {
                        base + est.z * (r - est.mu) / ((k - 1.0) * sigma)
                    } else {
                        base
                    }
                })
                .collect()
        }
    }
}
