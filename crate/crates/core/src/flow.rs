//! The renormalization flow: iterated steps along a decomposition
//! `s = alpha_1 + ... + alpha_l + beta`, the spectral-parameter map `E_s`
//! stored on the stencil, the splitting `H_s = T_s + W_s`, semigroup checks
//! and the ground-eigenvalue estimate.

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::fock_oracle::{build_h, build_interaction_slice, operator_norm, FockBasis};
use crate::kernels::{Kernel, KernelFamily, CUTOFF_RTOL};
use crate::params::{
    check_basis, epsilon_sequence_unchecked, is_admissible, EpsilonTriple, LedgerWarning, ModelConstants,
    ParamsError,
};
use crate::rgmap::{renormalize, RgError, RgOptions, StepReport};
use crate::seminorms::{in_polydisc, report, SeminormError, SeminormReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Rg(#[from] RgError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Seminorm(#[from] SeminormError),
    #[error("invalid decomposition: {0}")]
    Decomposition(String),
    #[error("ledger triple not admissible at alpha = {alpha}")]
    NotAdmissible { alpha: f64 },
    #[error("initial family is not in the polydisc of the basis triple")]
    BasisMembership,
    #[error("E_s left D_(rho/2): |E| = {0}")]
    ERange(f64),
    #[error("norm_W = {norm_w:e} above threshold {threshold:e}; estimate not meaningful")]
    EstimateUnreliable { norm_w: f64, threshold: f64 },
}

impl FlowError {
    /// Process exit code, matching [`RgError::exit_code`].
    pub fn exit_code(&self) -> i32 {
        match self {
            FlowError::Rg(e) => e.exit_code(),
            FlowError::NotAdmissible { .. } | FlowError::ERange(_) => 3,
            FlowError::EstimateUnreliable { .. } => 6,
            _ => 2,
        }
    }
}

/// `s = alpha_1 + ... + alpha_l + beta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowDecomposition {
    pub alphas: Vec<f64>,
    pub beta: f64,
    pub s: f64,
}

impl FlowDecomposition {
    /// Checks `alpha_j in [alpha_-, alpha_+]` and `beta in [0, alpha_+]`.
    pub fn new(alphas: Vec<f64>, beta: f64, c: &ModelConstants) -> Result<Self, FlowError> {
        let tol = 1e-12 * c.alpha_plus;
        for (j, &a) in alphas.iter().enumerate() {
            if !(a >= c.alpha_minus - tol && a <= c.alpha_plus + tol) {
                return Err(FlowError::Decomposition(format!(
                    "alpha_{} = {a} outside [{}, {}]",
                    j + 1,
                    c.alpha_minus,
                    c.alpha_plus
                )));
            }
        }
        if !(beta >= 0.0 && beta <= c.alpha_plus + tol) {
            return Err(FlowError::Decomposition(format!("beta = {beta} outside [0, {}]", c.alpha_plus)));
        }
        let s = alphas.iter().sum::<f64>() + beta;
        Ok(FlowDecomposition { alphas, beta, s })
    }

    /// Greedy rule: steps of `alpha_-` and the remainder as `beta`. With
    /// `snap = Some(delta)` every component must be a multiple of `delta`.
    pub fn greedy(s: f64, c: &ModelConstants, snap: Option<f64>) -> Result<Self, FlowError> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(FlowError::Decomposition(format!("s = {s} must be finite and >= 0")));
        }
        let am = c.alpha_minus;
        let mut l = (s / am).floor() as usize;
        if ((l + 1) as f64 * am - s).abs() <= 1e-12 * s.max(1.0) {
            l += 1;
        }
        let mut beta = (s - l as f64 * am).max(0.0);
        if beta <= 1e-12 * s.max(1.0) {
            beta = 0.0;
        }
        let mut alphas = vec![am; l];
        if let Some(delta) = snap {
            let on_grid = |x: f64| ((x / delta).round() * delta - x).abs() <= 1e-9 * delta;
            if !on_grid(am) || !on_grid(beta) {
                return Err(FlowError::Decomposition(format!(
                    "s = {s} with alpha_- = {am} is not a multiple of delta = {delta}"
                )));
            }
            beta = (beta / delta).round() * delta;
            alphas.iter_mut().for_each(|a| *a = (*a / delta).round() * delta);
        }
        FlowDecomposition::new(alphas, beta, c)
    }

    /// Step sizes in order, with `beta` last when it is positive.
    pub fn steps(&self) -> Vec<f64> {
        let mut v = self.alphas.clone();
        if self.beta > 0.0 {
            v.push(self.beta);
        }
        v
    }
}

/// Settings shared by every step of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub constants: ModelConstants,
    pub rg: RgOptions,
    /// Basis triple of the ledger; `None` skips ledger tracking.
    pub eps0: Option<EpsilonTriple>,
    /// Fock truncation for the optional oracle norm of `W_s`.
    pub oracle_n_max: Option<usize>,
}

/// One row of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub s: f64,
    pub seminorms: SeminormReport,
    pub ledger: Option<EpsilonTriple>,
    pub e_center: Complex64,
    pub q: f64,
    pub fp_iterations: usize,
    pub oracle_w_norm: Option<f64>,
    pub eigenvalue_estimate: Complex64,
    pub error_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub s: f64,
    pub family: KernelFamily,
    /// `E_s` at the stencil points.
    pub e_values: [Complex64; 5],
    pub trajectory: Vec<TrajectoryPoint>,
    /// Step sizes taken so far.
    pub steps: Vec<f64>,
    /// Steps with `alpha >= alpha_-`; the ledger index `l`.
    pub full_steps: usize,
    pub reports: Vec<StepReport>,
    pub warnings: Vec<LedgerWarning>,
}

impl FlowState {
    pub fn e_center(&self) -> Complex64 {
        self.e_values[0]
    }
}

fn ledger_triple(state: &FlowState, cfg: &FlowConfig) -> Option<EpsilonTriple> {
    let full: Vec<f64> = state
        .steps
        .iter()
        .copied()
        .filter(|&a| a >= cfg.constants.alpha_minus * (1.0 - 1e-12))
        .collect();
    cfg.eps0
        .map(|e0| epsilon_sequence_unchecked(cfg.constants.mu, &full, &e0, full.len()))
}

fn oracle_w_norm(f: &KernelFamily, n_max: usize) -> f64 {
    let basis = FockBasis::new(&f.grids.modes, n_max);
    let slice = f.slice_at(f.stencil.center);
    build_interaction_slice(&slice, &basis).norm()
}

fn trajectory_point(state: &FlowState, cfg: &FlowConfig, alpha: f64, q: f64, iters: usize) -> Result<TrajectoryPoint, FlowError> {
    let c = &cfg.constants;
    let seminorms = report(&state.family, c.mu, c.xi, alpha)?;
    let norm_w = c.xi * seminorms.i_xi;
    let e0 = e_at_zero(state);
    Ok(TrajectoryPoint {
        s: state.s,
        ledger: ledger_triple(state, cfg),
        e_center: state.e_center(),
        q,
        fp_iterations: iters,
        oracle_w_norm: cfg.oracle_n_max.map(|n| oracle_w_norm(&state.family, n)),
        eigenvalue_estimate: e0.map(|e| -e).unwrap_or(Complex64::new(f64::NAN, f64::NAN)),
        error_bar: norm_w,
        seminorms,
    })
}

/// `E_0(z) = z` on the stencil. With a basis triple, checks the induction
/// basis and polydisc membership (errors in strict mode, warnings in lab mode).
pub fn initial_state(f0: &KernelFamily, cfg: &FlowConfig) -> Result<FlowState, FlowError> {
    let c = &cfg.constants;
    let mut warnings = Vec::new();
    if let Some(e0) = &cfg.eps0 {
        warnings.extend(check_basis(e0, c)?);
        if !in_polydisc(f0, e0, c.mu, c.xi) {
            if c.strict_mode {
                return Err(FlowError::BasisMembership);
            }
            warnings.push(LedgerWarning {
                code: "basis_membership".into(),
                message: "initial family outside the basis polydisc".into(),
            });
        }
    }
    let mut state = FlowState {
        s: 0.0,
        family: f0.clone(),
        e_values: f0.stencil.points(),
        trajectory: Vec::new(),
        steps: Vec::new(),
        full_steps: 0,
        reports: Vec::new(),
        warnings,
    };
    let pt = trajectory_point(&state, cfg, c.alpha_minus, 0.0, 0)?;
    state.trajectory.push(pt);
    Ok(state)
}

/// One step of size `alpha in (0, alpha_+]`. `E_{s+a}(z_p) = E_s(Q_a^{-1}(z_p))`
/// with `E_s` read off its stencil interpolant.
pub fn advance(state: &FlowState, alpha: f64, cfg: &FlowConfig) -> Result<FlowState, FlowError> {
    let c = &cfg.constants;
    if !(alpha > 0.0 && alpha <= c.alpha_plus * (1.0 + 1e-12)) {
        return Err(FlowError::Decomposition(format!("step {alpha} outside (0, {}]", c.alpha_plus)));
    }
    let mut warnings = state.warnings.clone();
    if let Some(eps) = ledger_triple(state, cfg) {
        if !is_admissible(&eps, alpha, c).admissible {
            if c.strict_mode {
                return Err(FlowError::NotAdmissible { alpha });
            }
            warnings.push(LedgerWarning {
                code: "admissibility".into(),
                message: format!("ledger triple not admissible at s = {}, alpha = {alpha}", state.s),
            });
        }
    }
    let (family, rep) = renormalize(&state.family, alpha, c, &cfg.rg)?;
    let stencil = &state.family.stencil;
    let mut e_values = [Complex64::new(0.0, 0.0); 5];
    for (p, pb) in rep.pullbacks.iter().enumerate() {
        let e = stencil.fit(&state.e_values, pb.zeta);
        if e.norm() > 0.5 * c.rho * (1.0 + CUTOFF_RTOL) {
            return Err(FlowError::ERange(e.norm()));
        }
        e_values[p] = e;
    }
    let mut steps = state.steps.clone();
    steps.push(alpha);
    let full_steps = state.full_steps + usize::from(alpha >= c.alpha_minus * (1.0 - 1e-12));
    let q = rep.q;
    let iters = rep.pullbacks.iter().map(|p| p.iterations).max().unwrap_or(0);
    let mut reports = state.reports.clone();
    reports.push(rep);
    let mut next = FlowState {
        s: state.s + alpha,
        family,
        e_values,
        trajectory: state.trajectory.clone(),
        steps,
        full_steps,
        reports,
        warnings,
    };
    let pt = trajectory_point(&next, cfg, alpha, q, iters)?;
    next.trajectory.push(pt);
    Ok(next)
}

/// Continues a state through the given steps.
pub fn continue_along(state: FlowState, steps: &[f64], cfg: &FlowConfig) -> Result<FlowState, FlowError> {
    let mut st = state;
    for &a in steps {
        st = advance(&st, a, cfg)?;
    }
    Ok(st)
}

/// Flows `f0` through an explicit decomposition.
pub fn flow_along(f0: &KernelFamily, d: &FlowDecomposition, cfg: &FlowConfig) -> Result<FlowState, FlowError> {
    continue_along(initial_state(f0, cfg)?, &d.steps(), cfg)
}

/// Flows `f0` to `s` with the greedy decomposition, snapped to the mode
/// spacing so every dilation is an exact index shift.
pub fn flow_to(f0: &KernelFamily, s: f64, cfg: &FlowConfig) -> Result<FlowState, FlowError> {
    let d = FlowDecomposition::greedy(s, &cfg.constants, Some(f0.grids.modes.delta))?;
    flow_along(f0, &d, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemigroupReport {
    /// Grid-sup distance of the terminal families.
    pub family_distance: f64,
    /// Largest `|E|` difference over the stencil.
    pub e_distance: f64,
    /// `||H(w_direct(z)) - H(w_two_stage(z))||` at the stencil center.
    pub oracle_distance: Option<f64>,
}

/// Compares two terminal states.
pub fn compare_states(a: &FlowState, b: &FlowState, oracle_n_max: Option<usize>) -> Result<SemigroupReport, FlowError> {
    let family_distance = a.family.sup_distance(&b.family).map_err(RgError::from)?;
    let e_distance = a
        .e_values
        .iter()
        .zip(&b.e_values)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max);
    let oracle_distance = oracle_n_max.map(|n| {
        let basis = FockBasis::new(&a.family.grids.modes, n);
        let z = a.family.stencil.center;
        let ha = build_h(&a.family, z, &basis);
        let hb = build_h(&b.family, z, &basis);
        operator_norm(&(ha.mat - hb.mat))
    });
    Ok(SemigroupReport {
        family_distance,
        e_distance,
        oracle_distance,
    })
}

/// Flows to `s + t` directly and as `s` followed by `t`.
pub fn semigroup_check(f0: &KernelFamily, s: f64, t: f64, cfg: &FlowConfig) -> Result<SemigroupReport, FlowError> {
    let delta = Some(f0.grids.modes.delta);
    let c = &cfg.constants;
    let direct = flow_to(f0, s + t, cfg)?;
    let first = flow_to(f0, s, cfg)?;
    let second = FlowDecomposition::greedy(t, c, delta)?;
    let two_stage = continue_along(first, &second.steps(), cfg)?;
    compare_states(&direct, &two_stage, cfg.oracle_n_max)
}

/// `H_s = T_s + W_s` with `T_s` the `w00` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Splitting {
    pub t_s: Kernel,
    pub w_s: KernelFamily,
    /// `xi norm_I`, the kernel-side bound on `||W_s||`.
    pub norm_w: f64,
    pub oracle_norm: Option<f64>,
}

impl Splitting {
    /// `T_s + W_s` as a family.
    pub fn reassemble(&self) -> KernelFamily {
        let mut f = self.w_s.clone();
        f.kernels.insert((0, 0), self.t_s.clone());
        f
    }
}

pub fn split(state: &FlowState, cfg: &FlowConfig) -> Result<Splitting, FlowError> {
    let f = &state.family;
    let t_s = f.kernel(0, 0).map_err(RgError::from)?.clone();
    let mut w_s = f.clone();
    w_s.kernels.insert((0, 0), Kernel::zeros(0, 0, &f.grids));
    let c = &cfg.constants;
    let norm_w = c.xi * crate::seminorms::norm_i(f, c.mu, c.xi)?;
    Ok(Splitting {
        t_s,
        w_s,
        norm_w,
        oracle_norm: cfg.oracle_n_max.map(|n| oracle_w_norm(f, n)),
    })
}

fn e_at_zero(state: &FlowState) -> Option<Complex64> {
    let st = &state.family.stencil;
    if st.center.norm() > st.reconstruction_radius() {
        return None;
    }
    Some(st.fit(&state.e_values, Complex64::new(0.0, 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenEstimate {
    /// `-E_s(0)`.
    pub value: Complex64,
    /// `xi norm_I` of the flowed family.
    pub error_bar: f64,
    pub s: f64,
}

/// Ground-eigenvalue estimate `-E_s(0)`, valid when `norm_W <= threshold`.
pub fn eigenvalue_estimate(state: &FlowState, cfg: &FlowConfig, threshold: f64) -> Result<EigenEstimate, FlowError> {
    let sp = split(state, cfg)?;
    if sp.norm_w > threshold {
        return Err(FlowError::EstimateUnreliable {
            norm_w: sp.norm_w,
            threshold,
        });
    }
    let e0 = e_at_zero(state).ok_or_else(|| {
        FlowError::Rg(RgError::Domain {
            z: Complex64::new(0.0, 0.0),
            reason: "z = 0 is outside the stencil reconstruction disc".into(),
        })
    })?;
    Ok(EigenEstimate {
        value: -e0,
        error_bar: sp.norm_w,
        s: state.s,
    })
}

pub const TRAJECTORY_HEADER: &str = "s,re_e_center,im_e_center,norm_i,norm_f,norm_z,ledger_eps_i,ledger_eps_f,ledger_eps_z,q,fp_iterations,oracle_w_norm,re_eigenvalue,im_eigenvalue,error_bar";

/// Trajectory as CSV with a header row. Missing values are empty fields.
pub fn trajectory_csv(traj: &[TrajectoryPoint]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for p in traj {
        let (li, lf, lz) = match p.ledger {
            Some(e) => (Some(e.eps_i), Some(e.eps_f), Some(e.eps_z)),
            None => (None, None, None),
        };
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{:e},{},{},{:e},{:e},{:e}",
            p.s,
            p.e_center.re,
            p.e_center.im,
            p.seminorms.i_xi,
            p.seminorms.f,
            p.seminorms.z,
            opt(li),
            opt(lf),
            opt(lz),
            p.q,
            p.fp_iterations,
            opt(p.oracle_w_norm),
            p.eigenvalue_estimate.re,
            p.eigenvalue_estimate.im,
            p.error_bar
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{coupling_family, free_family, Grids, ZStencil};

    fn lab() -> (FlowConfig, Grids, ZStencil) {
        let (c, _) = ModelConstants::lab(1.0, 0.5, 0.2, 0.5, 1.0).unwrap();
        let g = Grids::new(1.0, 0.5, 8, 12).unwrap();
        let s = ZStencil::new(Complex64::new(0.0, 0.0), 0.05).unwrap();
        let cfg = FlowConfig {
            constants: c,
            rg: RgOptions::default(),
            eps0: None,
            oracle_n_max: None,
        };
        (cfg, g, s)
    }

    #[test]
    fn greedy_rule() {
        let (cfg, _, _) = lab();
        let d = FlowDecomposition::greedy(1.25, &cfg.constants, None).unwrap();
        assert_eq!(d.alphas, vec![0.5, 0.5]);
        assert!((d.beta - 0.25).abs() < 1e-15);
        let d = FlowDecomposition::greedy(1.5, &cfg.constants, Some(0.5)).unwrap();
        assert_eq!(d.steps(), vec![0.5, 0.5, 0.5]);
        assert!(FlowDecomposition::greedy(1.2, &cfg.constants, Some(0.5)).is_err());
        assert!(FlowDecomposition::new(vec![0.2], 0.0, &cfg.constants).is_err());
    }

    #[test]
    fn free_flow_is_trivial() {
        let (cfg, g, s) = lab();
        let f = free_family(&g, s, 2);
        let st = flow_to(&f, 1.0, &cfg).unwrap();
        assert!(st.family.sup_distance(&f).unwrap() < 1e-12);
        for (e, z) in st.e_values.iter().zip(s.points()) {
            assert!((e - (-1.0f64).exp() * z).norm() < 1e-15);
        }
        let est = eigenvalue_estimate(&st, &cfg, 1e-3).unwrap();
        assert_eq!(est.value.norm(), 0.0);
    }

    #[test]
    fn split_reassembles() {
        let (cfg, g, s) = lab();
        let f = coupling_family(&g, s, 2, Complex64::new(0.01, 0.0), cfg.constants.mu);
        let st = flow_to(&f, 0.5, &cfg).unwrap();
        let sp = split(&st, &cfg).unwrap();
        assert_eq!(sp.reassemble(), st.family);
        assert!(sp.norm_w > 0.0);
        let csv = trajectory_csv(&st.trajectory);
        assert_eq!(csv.lines().count(), 3);
    }
}
