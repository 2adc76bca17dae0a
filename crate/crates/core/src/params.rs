//! Model constants and the inequality ledger that decides when a
//! renormalization step is defined and contracting.
//!
//! All ledger quantities are accumulated in double-double arithmetic and
//! rounded to `f64` only at the API boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dd::Dd;

/// Cutoff enforced in strict mode.
pub const STRICT_RHO: f64 = 1.0 / 144.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("strict mode constraint violated: {0}")]
    StrictViolation(String),
    #[error("step {index} has alpha = {value}, outside [{lo}, {hi}]")]
    StepOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid epsilon triple: {0}")]
    InvalidEpsilon(String),
    #[error("outside ledger domain: denominator base {base} <= 0")]
    OutsideLedgerDomain { base: f64 },
    #[error("induction basis violated: {0}")]
    BasisViolation(String),
}

/// A precondition that failed in lab mode and was downgraded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerWarning {
    pub code: String,
    pub message: String,
}

impl LedgerWarning {
    fn new(code: &str, message: String) -> Self {
        LedgerWarning {
            code: code.to_string(),
            message,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub rho: f64,
    pub mu: f64,
    pub xi: f64,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub iota: f64,
    pub strict_mode: bool,
}

impl ModelConstants {
    /// Builds constants, returning the list of downgraded constraint
    /// violations. In strict mode any violation is an error; basic sanity
    /// (positivity, open intervals) is an error in both modes.
    pub fn new(
        rho: f64,
        mu: f64,
        xi: f64,
        alpha_minus: f64,
        alpha_plus: f64,
        strict_mode: bool,
    ) -> Result<(Self, Vec<LedgerWarning>), ParamsError> {
        let finite = [rho, mu, xi, alpha_minus, alpha_plus]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(ParamsError::InvalidConstants("non-finite value".into()));
        }
        if rho <= 0.0 {
            return Err(ParamsError::InvalidConstants(format!("rho = {rho} must be > 0")));
        }
        if !(mu > 0.0 && mu < 1.0) {
            return Err(ParamsError::InvalidConstants(format!("mu = {mu} not in (0,1)")));
        }
        if !(xi > 0.0 && xi < 1.0) {
            return Err(ParamsError::InvalidConstants(format!("xi = {xi} not in (0,1)")));
        }
        if !(alpha_minus > 0.0 && alpha_minus <= alpha_plus) {
            return Err(ParamsError::InvalidConstants(format!(
                "need 0 < alpha_minus <= alpha_plus, got {alpha_minus}, {alpha_plus}"
            )));
        }
        let c = ModelConstants {
            rho,
            mu,
            xi,
            alpha_minus,
            alpha_plus,
            iota: 1.0 - 1.0 / (10.0 * alpha_plus),
            strict_mode,
        };
        let warnings = c.violations();
        if strict_mode {
            if let Some(w) = warnings.first() {
                return Err(ParamsError::StrictViolation(w.message.clone()));
            }
        }
        Ok((c, warnings))
    }

    /// Strict constants with the cutoff fixed to 1/144.
    pub fn strict(mu: f64, xi: f64, alpha_minus: f64, alpha_plus: f64) -> Result<Self, ParamsError> {
        Self::new(STRICT_RHO, mu, xi, alpha_minus, alpha_plus, true).map(|(c, _)| c)
    }

    /// Lab constants; violations are returned, never fatal.
    pub fn lab(
        rho: f64,
        mu: f64,
        xi: f64,
        alpha_minus: f64,
        alpha_plus: f64,
    ) -> Result<(Self, Vec<LedgerWarning>), ParamsError> {
        Self::new(rho, mu, xi, alpha_minus, alpha_plus, false)
    }

    /// Every structural constraint on the constants that does not hold.
    pub fn violations(&self) -> Vec<LedgerWarning> {
        let mut out = Vec::new();
        let six_over_mu = 6.0 / self.mu;
        if self.strict_mode && self.rho != STRICT_RHO {
            out.push(LedgerWarning::new(
                "rho",
                format!("rho = {} but strict mode requires 1/144", self.rho),
            ));
        }
        if !(self.alpha_plus > six_over_mu) {
            out.push(LedgerWarning::new(
                "alpha_plus",
                format!("alpha_plus = {} is not > 6/mu = {six_over_mu}", self.alpha_plus),
            ));
        }
        if !(self.alpha_minus >= six_over_mu) {
            out.push(LedgerWarning::new(
                "alpha_minus",
                format!("alpha_minus = {} is not >= 6/mu = {six_over_mu}", self.alpha_minus),
            ));
        }
        if !(self.alpha_plus >= 2.0 * self.alpha_minus) {
            out.push(LedgerWarning::new(
                "alpha_ratio",
                format!(
                    "alpha_plus = {} is not >= 2 alpha_minus = {}",
                    self.alpha_plus,
                    2.0 * self.alpha_minus
                ),
            ));
        }
        if !(4.0 * std::f64::consts::PI * self.rho < 1.0) {
            out.push(LedgerWarning::new(
                "rho_small",
                format!("4 pi rho = {} is not < 1", 4.0 * std::f64::consts::PI * self.rho),
            ));
        }
        if !(6.0 * self.rho.sqrt() <= 0.5) {
            out.push(LedgerWarning::new(
                "rho_sqrt",
                format!("6 sqrt(rho) = {} is not <= 1/2", 6.0 * self.rho.sqrt()),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonTriple {
    pub eps_i: f64,
    pub eps_z: f64,
    pub eps_f: f64,
}

impl EpsilonTriple {
    pub fn new(eps_i: f64, eps_z: f64, eps_f: f64) -> Result<Self, ParamsError> {
        let e = EpsilonTriple { eps_i, eps_z, eps_f };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        for (name, v) in [("eps_I", self.eps_i), ("eps_Z", self.eps_z), ("eps_F", self.eps_f)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ParamsError::InvalidEpsilon(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub gap_margin_ok: bool,
    pub interaction_ratio_ok: bool,
    pub g_lt_one_ok: bool,
    pub q_inverse_margin_ok: bool,
    pub g_value: f64,
    pub admissible: bool,
}

/// Ordered RG step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSequence {
    pub alphas: Vec<f64>,
}

impl StepSequence {
    /// Checks every entry lies in `[alpha_minus, alpha_plus]`.
    pub fn new(alphas: Vec<f64>, c: &ModelConstants) -> Result<Self, ParamsError> {
        let s = StepSequence { alphas };
        s.validate(c)?;
        Ok(s)
    }

    pub fn validate(&self, c: &ModelConstants) -> Result<(), ParamsError> {
        let tol = 1e-12 * c.alpha_plus;
        for (index, &value) in self.alphas.iter().enumerate() {
            if !(value >= c.alpha_minus - tol && value <= c.alpha_plus + tol) {
                return Err(ParamsError::StepOutOfRange {
                    index,
                    value,
                    lo: c.alpha_minus,
                    hi: c.alpha_plus,
                });
            }
        }
        Ok(())
    }

    /// `|alpha|_j = mu (alpha_1 + ... + alpha_j)`; `j = 0` gives 0.
    pub fn cumulative(&self, mu: f64, j: usize) -> f64 {
        cumulative_dd(&self.alphas, mu, j).to_f64()
    }
}

fn cumulative_dd(alphas: &[f64], mu: f64, j: usize) -> Dd {
    let mut s = Dd::ZERO;
    for &a in alphas.iter().take(j) {
        s = s + Dd::new(a);
    }
    s.mul_f64(mu)
}

fn g_alpha_dd(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> Dd {
    let scale = Dd::new(-alpha).exp().mul_f64(c.rho);
    let ei = Dd::new(eps.eps_i);
    let first = (ei * ei).mul_f64(alpha.min(1.0)) / scale;
    let bracket = Dd::new(2.0) + (Dd::new(3.0) / scale) * (Dd::new(eps.eps_z) + ei);
    first.mul_f64(3.0) * bracket
}

/// The contraction function `G_alpha` of the ledger.
pub fn g_alpha(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> f64 {
    g_alpha_dd(eps, alpha, c).to_f64()
}

fn sharp_denominator(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> Dd {
    let a = Dd::new(-alpha).exp().mul_f64(c.rho) * (Dd::ONE - Dd::new(eps.eps_f));
    let b = Dd::new(-c.iota * alpha).exp().mul_f64(0.5 * c.rho);
    a - b - Dd::new(eps.eps_i * c.xi)
}

/// The resolvent floor `e^{-a} rho (1 - eps_F) - e^{-iota a} rho / 2 - eps_I xi`.
pub fn resolvent_floor(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> f64 {
    sharp_denominator(eps, alpha, c).to_f64()
}

/// The xi-weighted variant of `G_alpha` built on the resolvent floor. Returns
/// `+inf` when the floor is not positive.
pub fn g_alpha_sharp(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> f64 {
    let d = sharp_denominator(eps, alpha, c);
    if d.hi <= 0.0 {
        return f64::INFINITY;
    }
    let eix = Dd::new(eps.eps_i).mul_f64(c.xi);
    let first = (eix * eix).mul_f64(alpha.min(1.0)) / d;
    let bracket = Dd::new(2.0) + (Dd::new(eps.eps_z) + eix) / d;
    (first * bracket).to_f64()
}

/// Bound on `|Q_a^{-1}(zeta) - e^{-a} zeta|`:
/// `(eps_I xi)^2 min(a, 1) / ((1 - G_a) D)` with `D` the resolvent floor.
/// Returns `+inf` when `G_a >= 1` or the floor is not positive.
pub fn q_inverse_bound(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> f64 {
    let d = sharp_denominator(eps, alpha, c);
    let g = g_alpha_dd(eps, alpha, c);
    if d.hi <= 0.0 || !(g < Dd::ONE) {
        return f64::INFINITY;
    }
    let eix = Dd::new(eps.eps_i).mul_f64(c.xi);
    ((eix * eix).mul_f64(alpha.min(1.0)) / ((Dd::ONE - g) * d)).to_f64()
}

/// Bound on `|Q_a'(z) - e^a|`: `e^a G_a`.
pub fn q_derivative_bound(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> f64 {
    (Dd::new(alpha).exp() * g_alpha_dd(eps, alpha, c)).to_f64()
}

/// Evaluates the four membership conditions literally.
pub fn is_admissible(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> AdmissibilityReport {
    let ei = Dd::new(eps.eps_i);
    let gap_margin = Dd::ONE - Dd::new(eps.eps_f)
        - Dd::new(0.1).exp().mul_f64(0.5)
        - ei / Dd::new(-c.alpha_plus).exp().mul_f64(c.rho);
    let gap_margin_ok = gap_margin > Dd::ONE / Dd::new(3.0);
    let interaction_ratio = ei / Dd::new(-alpha).exp().mul_f64(c.rho);
    let interaction_ratio_ok = interaction_ratio < Dd::new(1.0 / 48.0);
    let g = g_alpha_dd(eps, alpha, c);
    let g_lt_one_ok = g < Dd::ONE;
    let lhs = (ei * ei * Dd::new(alpha).exp()).mul_f64(3.0)
        / ((Dd::ONE - g) * Dd::new(-alpha).exp().mul_f64(c.rho));
    let rhs = Dd::new(c.rho * 0.5) * (Dd::ONE - Dd::new(c.iota));
    let q_inverse_margin_ok = g_lt_one_ok && lhs < rhs;
    AdmissibilityReport {
        gap_margin_ok,
        interaction_ratio_ok,
        g_lt_one_ok,
        q_inverse_margin_ok,
        g_value: g.to_f64(),
        admissible: gap_margin_ok && interaction_ratio_ok && g_lt_one_ok && q_inverse_margin_ok,
    }
}

/// Sign-definite consequences of membership: `(1 - eps_F) - e^{(1-iota) a}/2`
/// and the Neumann-ratio quantity that must stay below 1/16.
pub fn membership_consequences(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> (f64, f64) {
    let put0 = Dd::ONE - Dd::new(eps.eps_f) - Dd::new((1.0 - c.iota) * alpha).exp().mul_f64(0.5);
    let ratio = Dd::new(eps.eps_i) / Dd::new(-alpha).exp().mul_f64(c.rho) / put0;
    (put0.to_f64(), ratio.to_f64())
}

/// Largest values allowed at the start of the induction.
pub fn basis_caps(c: &ModelConstants) -> (f64, f64) {
    let eps_f = (Dd::ONE - Dd::new(0.1).exp().mul_f64(0.5)).mul_f64(0.1);
    let eps_i = Dd::new(-2.0 * c.alpha_plus).exp().mul_f64(0.5e-7 * c.rho * c.rho);
    (eps_i.to_f64(), eps_f.to_f64())
}

/// The induction basis at its caps: `(eps_I, 1, eps_F)`.
pub fn epsilon_basis(c: &ModelConstants) -> EpsilonTriple {
    let (eps_i, eps_f) = basis_caps(c);
    EpsilonTriple {
        eps_i,
        eps_z: 1.0,
        eps_f,
    }
}

/// Checks the induction basis. Strict mode errors, lab mode warns.
pub fn check_basis(eps0: &EpsilonTriple, c: &ModelConstants) -> Result<Vec<LedgerWarning>, ParamsError> {
    eps0.validate()?;
    let (cap_i, cap_f) = basis_caps(c);
    let mut out = Vec::new();
    if eps0.eps_z != 1.0 {
        out.push(LedgerWarning::new("basis_z", format!("eps_Z^(0) = {} != 1", eps0.eps_z)));
    }
    if eps0.eps_f > cap_f {
        out.push(LedgerWarning::new(
            "basis_f",
            format!("eps_F^(0) = {} exceeds {cap_f}", eps0.eps_f),
        ));
    }
    if eps0.eps_i > cap_i {
        out.push(LedgerWarning::new(
            "basis_i",
            format!("eps_I^(0) = {} exceeds {cap_i}", eps0.eps_i),
        ));
    }
    if c.strict_mode {
        if let Some(w) = out.first() {
            return Err(ParamsError::BasisViolation(w.message.clone()));
        }
    }
    Ok(out)
}

fn epsilon_sequence_dd(mu: f64, alphas: &[f64], eps0: &EpsilonTriple, ell: usize) -> [Dd; 3] {
    let tiny = 1e-12;
    let small = 1e-7;
    let cum: Vec<Dd> = (0..=ell).map(|j| cumulative_dd(alphas, mu, j)).collect();
    let factor = |j: usize| -> Dd {
        let e = (-cum[j].mul_f64(0.5)).exp();
        Dd::ONE / (Dd::ONE - e.mul_f64(tiny))
    };
    // Product over l in [j, ell) for every j, built from the top down.
    let mut tail = vec![Dd::ONE; ell + 1];
    for j in (0..ell).rev() {
        tail[j] = tail[j + 1] * factor(j);
    }
    let mut sum = Dd::ZERO;
    for j in 0..ell {
        sum = sum + (-cum[j].mul_f64(0.5)).exp() * tail[j];
    }
    let eps_z = tail[0] + sum.mul_f64(small);
    let mut eps_f = Dd::new(eps0.eps_f);
    for j in 0..ell {
        eps_f = eps_f + (-cum[j].mul_f64(0.5)).exp().mul_f64(small);
    }
    let eps_i = Dd::new(eps0.eps_i) * (-cum[ell].mul_f64(0.25)).exp();
    [eps_i, eps_z, eps_f]
}

/// The ledger triple after `ell` steps of `alphas`.
pub fn epsilon_sequence(
    c: &ModelConstants,
    alphas: &StepSequence,
    eps0: &EpsilonTriple,
    ell: usize,
) -> Result<(EpsilonTriple, Vec<LedgerWarning>), ParamsError> {
    alphas.validate(c)?;
    if ell > alphas.alphas.len() {
        return Err(ParamsError::StepOutOfRange {
            index: ell,
            value: f64::NAN,
            lo: c.alpha_minus,
            hi: c.alpha_plus,
        });
    }
    let warnings = check_basis(eps0, c)?;
    Ok((epsilon_sequence_unchecked(c.mu, &alphas.alphas, eps0, ell), warnings))
}

/// Same recursion without range or basis checks; used for trajectories that
/// end in a short final step.
pub fn epsilon_sequence_unchecked(mu: f64, alphas: &[f64], eps0: &EpsilonTriple, ell: usize) -> EpsilonTriple {
    let [i, z, f] = epsilon_sequence_dd(mu, alphas, eps0, ell);
    EpsilonTriple {
        eps_i: i.to_f64(),
        eps_z: z.to_f64(),
        eps_f: f.to_f64(),
    }
}

fn bound_a_core(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> Result<Dd, ParamsError> {
    let inv = Dd::new(3.0) / Dd::new(-alpha).exp().mul_f64(c.rho);
    let base = Dd::ONE - (Dd::new(eps.eps_i) * inv).mul_f64(16.0);
    if !(base.hi > 0.0) {
        return Err(ParamsError::OutsideLedgerDomain { base: base.to_f64() });
    }
    Ok((inv * inv).mul_f64(3.0 * 256.0) / (base * base))
}

/// `A^(inf)`: bound function for the sup-norm of composed kernels.
pub fn bound_a_inf(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> Result<f64, ParamsError> {
    Ok((bound_a_core(eps, alpha, c)? * (Dd::new(2.0) + Dd::new(eps.eps_z))).to_f64())
}

/// `A^(0)`: bound function for the difference-quotient norm of composed kernels.
pub fn bound_a_0(eps: &EpsilonTriple, alpha: f64, c: &ModelConstants) -> Result<f64, ParamsError> {
    Ok(bound_a_core(eps, alpha, c)?.mul_f64(128.0 * std::f64::consts::PI).to_f64())
}

/// Ledger values and their caps at one `(ell, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsReport {
    pub ell: usize,
    pub beta: f64,
    pub eps: EpsilonTriple,
    pub g: f64,
    pub g_cap: f64,
    pub a_inf: f64,
    pub a_inf_cap: f64,
    pub a_0: f64,
    pub a_0_cap: f64,
    pub admissible: bool,
    pub ok: bool,
}

pub fn parameter_caps(
    c: &ModelConstants,
    alphas: &[f64],
    eps0: &EpsilonTriple,
    ell: usize,
    beta: f64,
) -> Result<CapsReport, ParamsError> {
    let [ei, ez, ef] = epsilon_sequence_dd(c.mu, alphas, eps0, ell);
    let eps = EpsilonTriple {
        eps_i: ei.to_f64(),
        eps_z: ez.to_f64(),
        eps_f: ef.to_f64(),
    };
    let g = g_alpha_dd(&eps, beta, c);
    let cum = cumulative_dd(alphas, c.mu, ell);
    let s = Dd::new(-c.alpha_plus).exp().mul_f64(c.rho);
    let g_cap = (-cum.mul_f64(0.5)).exp() * s * s * Dd::new(1e-12);
    let inv = Dd::ONE / Dd::new(-beta).exp().mul_f64(c.rho);
    let inv2 = inv * inv;
    let a_inf = bound_a_core(&eps, beta, c)? * (Dd::new(2.0) + ez);
    let a_0 = bound_a_core(&eps, beta, c)?.mul_f64(128.0 * std::f64::consts::PI);
    let a_inf_cap = inv2.mul_f64(3e4);
    let a_0_cap = inv2.mul_f64(3e6);
    let admissible = is_admissible(&eps, beta, c).admissible;
    let ok = g <= g_cap && a_inf <= a_inf_cap && a_0 <= a_0_cap && ez <= Dd::new(2.0) && admissible;
    Ok(CapsReport {
        ell,
        beta,
        eps,
        g: g.to_f64(),
        g_cap: g_cap.to_f64(),
        a_inf: a_inf.to_f64(),
        a_inf_cap: a_inf_cap.to_f64(),
        a_0: a_0.to_f64(),
        a_0_cap: a_0_cap.to_f64(),
        admissible,
        ok,
    })
}
