//! Problem parameters, derived scalars, regimes and closed-form thresholds.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::quad;

/// Dimension `n` and exponent `alpha` of `u_t = Δu + |u|^α u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub n: u32,
    pub alpha: f64,
}

impl ProblemParams {
    pub fn new(n: u32, alpha: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidParams(format!("dimension must be >= 1, got {n}")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParams(format!("alpha must be positive, got {alpha}")));
        }
        Ok(ProblemParams { n, alpha })
    }

    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    /// `N <= 2` or `(N-2) α < 4`.
    pub fn subcritical(&self) -> bool {
        self.n <= 2 || (self.nf() - 2.0) * self.alpha < 4.0
    }

    pub fn require_subcritical(&self) -> Result<()> {
        if self.subcritical() {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "need (N-2)·alpha < 4, got N = {}, alpha = {}",
                self.n, self.alpha
            )))
        }
    }

    pub fn constants(&self) -> DerivedConstants {
        derive_constants(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    BetaNeg,
    BetaZero,
    BetaPos,
    DimTwo,
    DimOne,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::BetaNeg => "BetaNeg",
            Regime::BetaZero => "BetaZero",
            Regime::BetaPos => "BetaPos",
            Regime::DimTwo => "DimTwo",
            Regime::DimOne => "DimOne",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub b_window: f64,
    pub regime: Regime,
    pub mu_frd1: f64,
    pub mu_frd8: f64,
}

pub fn regime_of(p: ProblemParams) -> Regime {
    match p.n {
        1 => Regime::DimOne,
        2 => Regime::DimTwo,
        _ => {
            let x = (p.nf() - 2.0) * p.alpha;
            if (x - 2.0).abs() <= 1e-12 * 2.0 {
                Regime::BetaZero
            } else if x > 2.0 {
                Regime::BetaPos
            } else {
                Regime::BetaNeg
            }
        }
    }
}

pub fn derive_constants(p: ProblemParams) -> DerivedConstants {
    let a = p.alpha;
    let n = p.nf();
    let lambda1 = 1.0 / a;
    let lambda2 = 1.0 / a - (n - 2.0) / 2.0;
    let regime = regime_of(p);
    let beta = if regime == Regime::BetaZero { 0.0 } else { (2.0 / a) * (n - 2.0 - 2.0 / a) };
    let gamma = 2.0 / a - (n - 4.0) / 2.0;
    DerivedConstants {
        beta,
        gamma,
        lambda1,
        lambda2,
        b_window: 1.0 / (4.0 * gamma + 8.0),
        regime,
        mu_frd1: 2.0 * (2.0 * (a + 2.0) * beta.abs()).powf(1.0 / a),
        mu_frd8: 2f64.powf(1.0 + 4.0 / a),
    }
}

/// `|x|^α`, with the common integer exponents special-cased.
#[inline]
pub fn abs_pow(x: f64, alpha: f64) -> f64 {
    let ax = x.abs();
    if alpha == 1.0 {
        ax
    } else if alpha == 2.0 {
        ax * ax
    } else if alpha == 3.0 {
        ax * ax * ax
    } else {
        ax.powf(alpha)
    }
}

/// `μ₀` from its Gamma-function closed form.
pub fn mu_zero_closed_form(p: ProblemParams) -> Result<f64> {
    check_integrable(p)?;
    let a = p.alpha;
    let h = p.nf() / 2.0;
    let log = ln_gamma(h) + (2.0 / a) * std::f64::consts::LN_2 - a.ln() / a - ln_gamma(h - 1.0 / a);
    Ok(log.exp())
}

fn check_integrable(p: ProblemParams) -> Result<()> {
    let bound = 2.0 / p.nf();
    if p.alpha <= bound * (1.0 + 1e-12) {
        return Err(Error::NonIntegrable { alpha: p.alpha, bound });
    }
    Ok(())
}

/// `μ₀` with `1/μ₀ = α^{1/α} 2^{-2/α} π^{-N/2} ∫ e^{-|y|²}|y|^{-2/α} dy`, the
/// radial integral evaluated by adaptive quadrature and checked against the
/// closed form.
pub fn mu_zero(p: ProblemParams) -> Result<f64> {
    check_integrable(p)?;
    let a = p.alpha;
    let n = p.nf();
    // ρ = x^k makes the radial integrand x^{k(N-2/α)-1} e^{-x^{2k}} bounded at 0.
    let e = n - 2.0 / a;
    let k = (1.0 / e).ceil().max(2.0);
    let upper = 7f64.powf(1.0 / k);
    let r = quad::integrate(
        |x: f64| {
            if x == 0.0 {
                return if k * e - 1.0 == 0.0 { k } else { 0.0 };
            }
            k * x.powf(k * e - 1.0) * (-x.powf(2.0 * k)).exp()
        },
        0.0,
        upper,
        1e-14,
        1e-14,
    );
    let sphere = 2.0 * std::f64::consts::PI.powf(n / 2.0) / gamma(n / 2.0);
    let inv = a.powf(1.0 / a) * 2f64.powf(-2.0 / a) * std::f64::consts::PI.powf(-n / 2.0) * sphere * r.value;
    let mu0 = 1.0 / inv;
    let closed = mu_zero_closed_form(p)?;
    if ((mu0 - closed) / closed).abs() > 1e-10 {
        return Err(Error::RootFindDiverged(format!(
            "mu0 quadrature {mu0} disagrees with closed form {closed}"
        )));
    }
    Ok(mu0)
}

/// `∫₀¹ (1 − z^{α+2})^{-1/2} dz`, by quadrature after `z = 1 − v²`.
pub fn q_integral(alpha: f64) -> f64 {
    let m = alpha + 2.0;
    quad::integrate(
        |v: f64| {
            if v == 0.0 {
                return 2.0 / m.sqrt();
            }
            let d = -(m * (-v * v).ln_1p()).exp_m1();
            2.0 * v / d.sqrt()
        },
        0.0,
        1.0,
        1e-14,
        1e-14,
    )
    .value
}

pub fn q_integral_beta(alpha: f64) -> f64 {
    let m = alpha + 2.0;
    beta(1.0 / m, 0.5) / m
}

/// Upper bound for the length of any interval inside `(0, b)` on which an
/// inverted solution with `w(0) = μ` keeps one sign.
pub fn iota_bound(p: ProblemParams, mu: f64) -> Result<f64> {
    let c = derive_constants(p);
    let threshold = c.mu_frd1.max(c.mu_frd8);
    if !(mu > threshold) {
        return Err(Error::BelowThreshold { mu, threshold });
    }
    let a = p.alpha;
    let b = c.b_window;
    let q = q_integral(a);
    let h = mu.powf(-a / 2.0);
    Ok(2.0 * b * (2.0 * (a + 2.0)).sqrt() * h
        + 2f64.powf(a + 1.0) / a * mu.powf(-a)
        + 2f64.powf(1.0 + a / 2.0) / a * h
        + 2f64.powf(4.0 + a / 2.0) * b * b * h
        + 2f64.powf(1.0 + a / 2.0) * b * (a + 2.0).sqrt() * q * h)
}
