//! One renormalization step on kernel families: the invertibility gate, the
//! spectral-parameter map `Q_alpha` with its fixed-point inverse, and the
//! kernel update `w -> w^` that keeps `<R_alpha(H(w))>_Omega = z`.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::fock_oracle::{build_h, schur_feshbach, vacuum_expectation, FockBasis, OracleError};
use crate::kernels::{canonicalize, FamilySlice, KernelError, KernelFamily, Leg, CUTOFF_RTOL};
use crate::params::ModelConstants;
use crate::seminorms::{norm_i, report, SeminormError, SeminormReport};
use crate::wick::{TildeEvaluator, WickError, WickOptions};

/// Stopping tolerance on `|z_{n+1} - z_n|`.
pub const TOL_FP: f64 = 1e-12;
pub const MAX_ITER: usize = 200;
/// Tolerance of the normalization check `w^00(z, 0) = z`.
pub const TOL_NORM: f64 = 1e-10;
/// Largest defect that lab mode re-centers instead of failing.
pub const RECENTER_LIMIT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RgError {
    #[error("gate failure at z = {z}: {reason}")]
    Gate { z: Complex64, reason: String },
    #[error("domain exit at z = {z}: {reason}")]
    Domain { z: Complex64, reason: String },
    #[error("non-contraction: step ratio {ratio} at iteration {iteration}")]
    NonContraction { ratio: f64, iteration: usize },
    #[error("fixed point not reached after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("normalization defect {defect:e} at z = {z}")]
    Normalization { z: Complex64, defect: f64 },
    #[error(transparent)]
    Wick(#[from] WickError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Seminorm(#[from] SeminormError),
}

impl RgError {
    /// Process exit code: 3 gate or domain, 4 fixed point, 5 normalization,
    /// 2 for anything that points at a bad configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            RgError::Gate { .. } | RgError::Domain { .. } => 3,
            RgError::Wick(WickError::ResolventFloor { .. }) => 3,
            RgError::Oracle(OracleError::BarredBlockSingular { .. }) => 3,
            RgError::NonContraction { .. } | RgError::NoConvergence { .. } => 4,
            RgError::Normalization { .. } => 5,
            _ => 2,
        }
    }
}

/// How `Q_alpha` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QEngine {
    /// `e^a (w00(z, 0) + w~00(z, 0))` from composed kernels.
    Kernel,
    /// `e^a <F_a(H(w(z)))>_Omega` from the Fock-matrix Schur complement.
    Oracle { n_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgOptions {
    pub wick: WickOptions,
    pub engine: QEngine,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub tol_norm: f64,
    pub recenter_limit: f64,
}

impl Default for RgOptions {
    fn default() -> Self {
        RgOptions {
            wick: WickOptions::default(),
            engine: QEngine::Kernel,
            tol_fp: TOL_FP,
            max_iter: MAX_ITER,
            tol_norm: TOL_NORM,
            recenter_limit: RECENTER_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeshbachGate {
    /// `xi norm_I sup |1/w00|` over the barred region.
    pub neumann_ratio: f64,
    /// Every probed `z` satisfies `|z| <= e^{-iota a} rho / 2`.
    pub domain_ok: bool,
    /// `sup |1/w00(z, r)|` over `e^{-a} rho < r <= rho`.
    pub resolvent_bound: f64,
}

impl FeshbachGate {
    pub fn passes(&self) -> bool {
        self.domain_ok && self.neumann_ratio < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QInverseResult {
    /// The preimage `z*` with `Q_a(z*) = zeta`.
    pub zeta: Complex64,
    pub iterations: usize,
    /// `|Q_a(z*) - zeta|`.
    pub residual: f64,
    /// Largest ratio of successive steps above rounding noise.
    pub contraction_factor: f64,
}

/// Diagnostics of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub alpha: f64,
    pub pullbacks: Vec<QInverseResult>,
    pub gates: Vec<FeshbachGate>,
    /// Worst Neumann ratio over the pulled-back stencil.
    pub q: f64,
    /// `|w^00(z_p, 0) - z_p|` before any re-centering.
    pub normalization_defects: Vec<f64>,
    /// Defects subtracted in lab mode, per stencil point.
    pub recentered: Vec<f64>,
    pub seminorms_before: SeminormReport,
    pub seminorms_after: SeminormReport,
}

/// Sample points of the barred region `e^{-a} rho < r <= rho`: the `r` nodes
/// in it, midpoints between them, and the lower edge.
fn barred_samples(f: &KernelFamily, alpha: f64) -> Vec<f64> {
    let rho = f.grids.rho();
    let lo = (-alpha).exp() * rho;
    let mut pts = vec![lo * (1.0 + 1e-9)];
    let nodes: Vec<f64> = f.grids.r.nodes.iter().copied().filter(|&r| r > lo * (1.0 + CUTOFF_RTOL)).collect();
    let mut prev = lo;
    for &r in &nodes {
        pts.push(0.5 * (prev + r));
        pts.push(r);
        prev = r;
    }
    pts
}

/// Gate evaluated at the given spectral parameters.
pub fn gate_at(f: &KernelFamily, zs: &[Complex64], alpha: f64, c: &ModelConstants) -> Result<FeshbachGate, RgError> {
    let lim = (-c.iota * alpha).exp() * c.rho * 0.5;
    let domain_ok = zs.iter().all(|z| z.norm() <= lim * (1.0 + CUTOFF_RTOL));
    let samples = barred_samples(f, alpha);
    let mut resolvent_bound: f64 = 0.0;
    for &z in zs {
        let slice = f.slice_at(z);
        for &r in &samples {
            let w = slice.w00(r).norm();
            resolvent_bound = resolvent_bound.max(if w > 0.0 { 1.0 / w } else { f64::INFINITY });
        }
    }
    let ni = if f.interaction_is_zero() { 0.0 } else { norm_i(f, c.mu, c.xi)? };
    let neumann_ratio = if ni == 0.0 { 0.0 } else { c.xi * ni * resolvent_bound };
    Ok(FeshbachGate {
        neumann_ratio,
        domain_ok,
        resolvent_bound,
    })
}

/// Gate over the family's own stencil.
pub fn gate(f: &KernelFamily, alpha: f64, c: &ModelConstants) -> Result<FeshbachGate, RgError> {
    gate_at(f, &f.stencil.points(), alpha, c)
}

fn q_from_slice(slice: &FamilySlice, alpha: f64, wick: WickOptions) -> Result<Complex64, RgError> {
    let ev = TildeEvaluator::new(slice, alpha, wick, 0)?;
    let tilde = ev.value(0, 0, 0.0, &[], &[])?;
    Ok(alpha.exp() * (slice.w00(0.0) + tilde))
}

/// `Q_a(z)` with the chosen engine.
pub fn q_alpha(f: &KernelFamily, z: Complex64, alpha: f64, engine: QEngine, wick: WickOptions) -> Result<Complex64, RgError> {
    match engine {
        QEngine::Kernel => q_from_slice(&f.slice_at(z), alpha, wick),
        QEngine::Oracle { n_max } => {
            let basis = FockBasis::new(&f.grids.modes, n_max);
            let h = build_h(f, z, &basis);
            let fe = schur_feshbach(&h, &basis, alpha)?;
            Ok(alpha.exp() * vacuum_expectation(&fe))
        }
    }
}

fn check_domain(f: &KernelFamily, z: Complex64, alpha: f64, c: &ModelConstants) -> Result<(), RgError> {
    let lim = (-c.iota * alpha).exp() * c.rho * 0.5;
    if z.norm() > lim * (1.0 + CUTOFF_RTOL) {
        return Err(RgError::Domain {
            z,
            reason: format!("|z| = {} > e^(-iota alpha) rho / 2 = {lim}", z.norm()),
        });
    }
    let radius = f.stencil.reconstruction_radius();
    let d = (z - f.stencil.center).norm();
    if d > radius {
        return Err(RgError::Domain {
            z,
            reason: format!("distance {d} from the stencil center exceeds {radius}"),
        });
    }
    Ok(())
}

/// Solves `Q_a(z) = zeta` by iterating `h(z) = z + e^{-a} zeta - e^{-a} Q_a(z)`
/// from `z_0 = e^{-a} zeta`.
pub fn q_inverse(
    f: &KernelFamily,
    zeta: Complex64,
    alpha: f64,
    c: &ModelConstants,
    opts: &RgOptions,
) -> Result<QInverseResult, RgError> {
    if zeta.norm() > 0.5 * c.rho * (1.0 + CUTOFF_RTOL) {
        return Err(RgError::Domain {
            z: zeta,
            reason: format!("|zeta| = {} > rho / 2", zeta.norm()),
        });
    }
    let shrink = (-alpha).exp();
    let target = shrink * zeta;
    let mut z = target;
    let mut prev: Option<f64> = None;
    let mut factor: f64 = 0.0;
    let mut last_step = f64::INFINITY;
    for it in 1..=opts.max_iter {
        check_domain(f, z, alpha, c)?;
        let qz = q_alpha(f, z, alpha, opts.engine, opts.wick)?;
        let next = z + target - shrink * qz;
        let step = (next - z).norm();
        let noise = 64.0 * f64::EPSILON * (z.norm() + c.rho);
        if let Some(p) = prev {
            if p > noise && step > noise {
                let ratio = step / p;
                factor = factor.max(ratio);
                if ratio >= 1.0 {
                    return Err(RgError::NonContraction { ratio, iteration: it });
                }
            }
        }
        prev = Some(step);
        last_step = step;
        z = next;
        if step <= opts.tol_fp {
            check_domain(f, z, alpha, c)?;
            let residual = (q_alpha(f, z, alpha, opts.engine, opts.wick)? - zeta).norm();
            return Ok(QInverseResult {
                zeta: z,
                iterations: it,
                residual,
                contraction_factor: factor,
            });
        }
    }
    Err(RgError::NoConvergence {
        iterations: opts.max_iter,
        last_step,
    })
}

/// Output slice `e^{a(1 - 3(m+n)/2)} [w + w~](zeta; e^{-a} r; e^{-a} k)` on
/// the grid. Composed kernels are evaluated at the exact contracted `r`;
/// legs contracted below the last mode node carry no value. The result is
/// not yet symmetrized.
fn renormalized_slice(slice: &FamilySlice, ev: &TildeEvaluator, alpha: f64) -> Result<FamilySlice, RgError> {
    let g = &slice.grids;
    let shrink = (-alpha).exp();
    let shift = g.modes.shift_for(alpha);
    let nm = g.n_modes();
    let nodes = &g.modes.nodes;
    let mut kernels = std::collections::BTreeMap::new();
    for &(m, n) in slice.kernels.keys() {
        let legs = m + n;
        let nt = g.n_tuples(legs);
        let pref = (alpha * (1.0 - 1.5 * legs as f64)).exp();
        let mut out = vec![Complex64::new(0.0, 0.0); g.n_r() * nt];
        let mut modes = vec![0usize; legs];
        let composed = !ev.terms(m, n).is_empty();
        'tuples: for t in 0..nt {
            g.decode_tuple(t, legs, &mut modes);
            let mut mapped: Vec<Leg> = Vec::with_capacity(legs);
            for &j in &modes {
                let leg = match shift {
                    Some(k) if j + k < nm => Some(Leg::node(j + k, nodes[j + k])),
                    Some(_) => None,
                    None => g.modes.locate(nodes[j] * shrink),
                };
                match leg {
                    Some(l) => mapped.push(l),
                    None => continue 'tuples,
                }
            }
            let kc: f64 = modes[..m].iter().map(|&j| nodes[j]).sum();
            let ka: f64 = modes[m..].iter().map(|&j| nodes[j]).sum();
            for (ri, &r) in g.r.nodes.iter().enumerate() {
                if !g.in_support(r, kc, ka) {
                    continue;
                }
                let rs = r * shrink;
                let mut v = slice.eval(m, n, rs, &mapped[..m], &mapped[m..]);
                if composed {
                    v += tilde_at_legs(ev, m, n, rs, &mapped)?;
                }
                out[ri * nt + t] = pref * v;
            }
        }
        kernels.insert((m, n), out);
    }
    Ok(FamilySlice {
        grids: g.clone(),
        z: slice.z,
        kernels,
    })
}

/// Unsymmetrized `w~` at legs that may sit between mode nodes, blended
/// multilinearly from the neighbouring nodes.
fn tilde_at_legs(ev: &TildeEvaluator, m: usize, n: usize, r: f64, legs: &[Leg]) -> Result<Complex64, RgError> {
    let free: Vec<usize> = (0..legs.len()).filter(|&i| !legs[i].is_node()).collect();
    let mut acc = Complex64::new(0.0, 0.0);
    let mut idx = vec![0usize; legs.len()];
    for mask in 0..(1usize << free.len()) {
        let mut weight = 1.0;
        for (i, leg) in legs.iter().enumerate() {
            idx[i] = match free.iter().position(|&fi| fi == i) {
                Some(bit) if mask >> bit & 1 == 1 => {
                    weight *= leg.t;
                    leg.hi
                }
                Some(_) => {
                    weight *= 1.0 - leg.t;
                    leg.lo
                }
                None => leg.lo,
            };
        }
        if weight != 0.0 {
            acc += weight * ev.unsym(m, n, r, &idx[..m], &idx[m..])?;
        }
    }
    Ok(acc)
}

/// One renormalization step `w -> R_a(w)`. Every output stencil point is
/// pulled back through `Q_a^{-1}` individually; the output keeps the input
/// stencil. Composed kernels are truncated to the input's `m + n <= M_max`.
pub fn renormalize(
    f: &KernelFamily,
    alpha: f64,
    c: &ModelConstants,
    opts: &RgOptions,
) -> Result<(KernelFamily, StepReport), RgError> {
    if alpha < 0.0 {
        return Err(KernelError::NegativeAlpha(alpha).into());
    }
    let seminorms_before = report(f, c.mu, c.xi, alpha)?;
    let points = f.stencil.points();
    let mut out = KernelFamily::zeros(&f.grids, f.stencil, f.m_max);
    let mut pullbacks = Vec::with_capacity(5);
    let mut gates = Vec::with_capacity(5);
    for (p, &z) in points.iter().enumerate() {
        let pb = q_inverse(f, z, alpha, c, opts)?;
        let g = gate_at(f, &[pb.zeta], alpha, c)?;
        if !g.passes() {
            return Err(RgError::Gate {
                z: pb.zeta,
                reason: format!("domain_ok = {}, neumann ratio = {}", g.domain_ok, g.neumann_ratio),
            });
        }
        let slice = f.slice_at(pb.zeta);
        let ev = TildeEvaluator::new(&slice, alpha, opts.wick, f.m_max)?;
        let new_slice = renormalized_slice(&slice, &ev, alpha)?;
        out.set_point(p, &new_slice)?;
        pullbacks.push(pb);
        gates.push(g);
    }
    let mut out = canonicalize(&out);
    let nr = f.grids.n_r();
    let mut defects = Vec::with_capacity(5);
    let mut recentered = vec![0.0; 5];
    for (p, &z) in points.iter().enumerate() {
        let k = out.kernel_mut(0, 0)?;
        let d = k.values[p * nr] - z;
        defects.push(d.norm());
        if d.norm() <= opts.tol_norm {
            continue;
        }
        if c.strict_mode || d.norm() >= opts.recenter_limit {
            return Err(RgError::Normalization { z, defect: d.norm() });
        }
        for v in &mut k.values[p * nr..(p + 1) * nr] {
            *v -= d;
        }
        recentered[p] = d.norm();
    }
    let seminorms_after = report(&out, c.mu, c.xi, alpha)?;
    let q = gates.iter().map(|g| g.neumann_ratio).fold(0.0, f64::max);
    Ok((
        out,
        StepReport {
            alpha,
            pullbacks,
            gates,
            q,
            normalization_defects: defects,
            recentered,
            seminorms_before,
            seminorms_after,
        },
    ))
}
