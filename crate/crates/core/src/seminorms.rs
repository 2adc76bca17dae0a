//! Seminorms of discretized kernel families and the polydisc test.
//!
//! Sups run over grid nodes. Difference quotients in `r` use pairs of
//! `r` nodes, and a pair only counts for a momentum tuple when both
//! endpoints lie in the support `r + |k|_1 <= rho` of that tuple, so the
//! zeros written by canonicalization never enter a difference.

use serde::{Deserialize, Serialize};

use crate::kernels::{d_dz, Grids, Kernel, KernelFamily, CUTOFF_RTOL};
use crate::params::EpsilonTriple;

/// Tolerance of the normalization check `w00(z, 0) = z`.
pub const TOL_NORMALIZATION: f64 = 1e-10;
/// Relative rounding slack of the seminorm bounds in [`in_polydisc`]; a
/// stencil derivative of exactly linear data is 1 only up to a few ulps.
pub const TOL_MEMBERSHIP_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelNorms {
    pub m: usize,
    pub n: usize,
    pub inf0: f64,
    pub inf: f64,
    pub zero_norm: f64,
    pub alpha_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormReport {
    pub alpha: f64,
    pub kernels: Vec<KernelNorms>,
    pub i_xi: f64,
    /// `norm_I` with `4 xi` in place of `xi`, when `4 xi < 1`.
    pub i_4xi: Option<f64>,
    pub z: f64,
    pub f: f64,
}

/// `|k|^{1/2 - mu/2}` weight of a leg, and the measure weight
/// `shell / |k|^{3/2 + mu/2}` of a leg.
fn leg_weights(grids: &Grids, mu: f64) -> (Vec<f64>, Vec<f64>) {
    let sup_w = grids.modes.nodes.iter().map(|w| w.powf(0.5 - 0.5 * mu)).collect();
    let meas = grids
        .modes
        .nodes
        .iter()
        .zip(&grids.modes.weights)
        .map(|(w, q)| q / w.powf(1.5 + 0.5 * mu))
        .collect();
    (sup_w, meas)
}

/// `sup |w| prod |k_i|^{1/2 - mu/2}` over stencil, `r` nodes and tuples.
pub fn norm_inf_0(k: &Kernel, grids: &Grids, mu: f64) -> f64 {
    let legs = k.legs();
    let nt = grids.n_tuples(legs);
    let (sw, _) = leg_weights(grids, mu);
    let mut modes = vec![0usize; legs];
    let mut tw = vec![0.0; nt];
    for (t, slot) in tw.iter_mut().enumerate() {
        grids.decode_tuple(t, legs, &mut modes);
        *slot = modes.iter().map(|&j| sw[j]).product();
    }
    k.values
        .iter()
        .enumerate()
        .map(|(i, v)| v.norm() * tw[i % nt])
        .fold(0.0, f64::max)
}

/// `norm_inf_0(k) + norm_inf_0(k_dz)`.
pub fn norm_inf(k: &Kernel, k_dz: &Kernel, grids: &Grids, mu: f64) -> f64 {
    norm_inf_0(k, grids, mu) + norm_inf_0(k_dz, grids, mu)
}

/// Weighted difference-quotient seminorm of an interaction kernel,
/// restricted to `s + r <= e^{-alpha} rho` and `|k|_1, |k~|_1 <= e^{-alpha} rho`.
/// `alpha = 0` gives the unrestricted version.
pub fn norm_zero(k: &Kernel, grids: &Grids, mu: f64, alpha: f64) -> Result<f64, SeminormError> {
    let legs = k.legs();
    if legs == 0 {
        return Err(SeminormError::UseW00);
    }
    let nt = grids.n_tuples(legs);
    let nr = grids.n_r();
    let (_, meas) = leg_weights(grids, mu);
    let nodes = &grids.modes.nodes;
    let rho = grids.rho();
    let lim_alpha = (-alpha).exp() * rho * (1.0 + CUTOFF_RTOL);
    let lim = rho * (1.0 + CUTOFF_RTOL);

    // Per tuple: measure weight and the largest block modulus.
    let mut modes = vec![0usize; legs];
    let mut tuples: Vec<(usize, f64, f64)> = Vec::new();
    for t in 0..nt {
        grids.decode_tuple(t, legs, &mut modes);
        let kc: f64 = modes[..k.m].iter().map(|&j| nodes[j]).sum();
        let ka: f64 = modes[k.m..].iter().map(|&j| nodes[j]).sum();
        if kc > lim_alpha || ka > lim_alpha {
            continue;
        }
        let w: f64 = modes.iter().map(|&j| meas[j]).product();
        tuples.push((t, w, kc.max(ka)));
    }
    let rn = &grids.r.nodes;
    let mut best: f64 = 0.0;
    for p in 0..5 {
        let base = p * nr * nt;
        for a in 0..nr {
            for b in (a + 1)..nr {
                if rn[b] > lim_alpha {
                    break;
                }
                let gap = rn[b] - rn[a];
                let mut acc = 0.0;
                for &(t, w, kmax) in &tuples {
                    if rn[b] + kmax > lim {
                        continue;
                    }
                    let d = k.values[base + b * nt + t] - k.values[base + a * nt + t];
                    acc += w * d.norm();
                }
                best = best.max(acc / gap);
            }
        }
    }
    Ok(best)
}

/// Difference-quotient seminorm of `w00` on the `alpha`-restricted triangle.
pub fn norm_zero_00(k00: &Kernel, grids: &Grids, alpha: f64) -> f64 {
    let nr = grids.n_r();
    let rn = &grids.r.nodes;
    let lim_alpha = (-alpha).exp() * grids.rho() * (1.0 + CUTOFF_RTOL);
    let mut best: f64 = 0.0;
    for p in 0..5 {
        let v = &k00.values[p * nr..(p + 1) * nr];
        for a in 0..nr {
            for b in (a + 1)..nr {
                if rn[b] > lim_alpha {
                    break;
                }
                best = best.max((v[b] - v[a]).norm() / (rn[b] - rn[a]));
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeminormError {
    #[error("norm_zero needs m + n >= 1; use norm_zero_00 for w00")]
    UseW00,
    #[error("xi = {0} outside (0, 1)")]
    InvalidXi(f64),
}

/// `2/(1-xi)^2 sup_{m+n>=1} xi^{-(m+n)} [norm_inf + norm_zero]`.
pub fn norm_i(f: &KernelFamily, mu: f64, xi: f64) -> Result<f64, SeminormError> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(SeminormError::InvalidXi(xi));
    }
    let mut best: f64 = 0.0;
    for (&(m, n), k) in &f.kernels {
        if m + n == 0 {
            continue;
        }
        let v = interaction_norm(f, k, mu);
        best = best.max(v * xi.powi(-((m + n) as i32)));
    }
    Ok(2.0 / ((1.0 - xi) * (1.0 - xi)) * best)
}

/// `norm_inf + norm_zero` of one interaction kernel of `f`.
pub fn interaction_norm(f: &KernelFamily, k: &Kernel, mu: f64) -> f64 {
    let dz = d_dz(f, k.m, k.n).expect("kernel belongs to the family");
    norm_inf(k, &dz, &f.grids, mu) + norm_zero(k, &f.grids, mu, 0.0).expect("interaction kernel")
}

/// `norm_zero_00(w00 - r)`.
pub fn norm_f(f: &KernelFamily) -> f64 {
    let k = &f.kernels[&(0, 0)];
    let nr = f.grids.n_r();
    let mut shifted = k.clone();
    for p in 0..5 {
        for (ri, r) in f.grids.r.nodes.iter().enumerate() {
            shifted.values[p * nr + ri] -= r;
        }
    }
    norm_zero_00(&shifted, &f.grids, 0.0)
}

/// `sup_r |d/dz w00(z, r)|` at the stencil center.
pub fn norm_z(f: &KernelFamily) -> f64 {
    let dz = d_dz(f, 0, 0).expect("w00 present");
    let nr = f.grids.n_r();
    dz.values[..nr].iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Largest `|w00(z_p, 0) - z_p|` over the stencil.
pub fn normalization_defect(f: &KernelFamily) -> f64 {
    let k = &f.kernels[&(0, 0)];
    let nr = f.grids.n_r();
    f.stencil
        .points()
        .iter()
        .enumerate()
        .map(|(p, z)| (k.values[p * nr] - z).norm())
        .fold(0.0, f64::max)
}

/// Membership in the polydisc: normalization plus the three seminorm bounds.
pub fn in_polydisc(f: &KernelFamily, eps: &EpsilonTriple, mu: f64, xi: f64) -> bool {
    if normalization_defect(f) > TOL_NORMALIZATION {
        return false;
    }
    match norm_i(f, mu, xi) {
        Ok(ni) => {
            let within = |x: f64, cap: f64| x <= cap * (1.0 + TOL_MEMBERSHIP_REL);
            within(ni, eps.eps_i) && within(norm_z(f), eps.eps_z) && within(norm_f(f), eps.eps_f)
        }
        Err(_) => false,
    }
}

/// Every seminorm of the family; `alpha` selects the restricted variant.
pub fn report(f: &KernelFamily, mu: f64, xi: f64, alpha: f64) -> Result<SeminormReport, SeminormError> {
    let mut kernels = Vec::new();
    for (&(m, n), k) in &f.kernels {
        let dz = d_dz(f, m, n).expect("kernel belongs to the family");
        let inf0 = norm_inf_0(k, &f.grids, mu);
        let inf = inf0 + norm_inf_0(&dz, &f.grids, mu);
        let (zero_norm, alpha_norm) = if m + n == 0 {
            (norm_zero_00(k, &f.grids, 0.0), norm_zero_00(k, &f.grids, alpha))
        } else {
            (norm_zero(k, &f.grids, mu, 0.0)?, norm_zero(k, &f.grids, mu, alpha)?)
        };
        kernels.push(KernelNorms {
            m,
            n,
            inf0,
            inf,
            zero_norm,
            alpha_norm,
        });
    }
    let i_xi = norm_i(f, mu, xi)?;
    let i_4xi = if 4.0 * xi < 1.0 { Some(norm_i(f, mu, 4.0 * xi)?) } else { None };
    Ok(SeminormReport {
        alpha,
        kernels,
        i_xi,
        i_4xi,
        z: norm_z(f),
        f: norm_f(f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use crate::kernels::{free_family, reference_family, Grids, ZStencil};
    use std::f64::consts::PI;

    fn setup() -> (Grids, ZStencil) {
        (
            Grids::new(1.0, 0.5, 6, 8).unwrap(),
            ZStencil::new(Complex64::new(0.0, 0.0), 0.05).unwrap(),
        )
    }

    #[test]
    fn inf0_cancels_weight() {
        let (g, s) = setup();
        let mu = 0.5;
        let mut f = KernelFamily::zeros(&g, s, 2);
        f.fill(1, 0, |_, _, kc, _| Complex64::new(0.3 * kc[0].powf(-0.5 + 0.5 * mu), 0.0)).unwrap();
        assert!((norm_inf_0(&f.kernels[&(1, 0)], &g, mu) - 0.3).abs() < 1e-14);
        f.fill(1, 1, |_, _, _, _| Complex64::new(1.0, 0.0)).unwrap();
        assert!((norm_inf_0(&f.kernels[&(1, 1)], &g, mu) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_norm_linear_in_r() {
        let (g, s) = setup();
        let mu = 0.5;
        let mut f = KernelFamily::zeros(&g, s, 1);
        f.fill(1, 0, |_, r, _, _| Complex64::new(r, 0.0)).unwrap();
        let v = norm_zero(&f.kernels[&(1, 0)], &g, mu, 0.0).unwrap();
        // Smallest pair (0, r_1) excludes only node 0 from the support.
        let expect: f64 = (1..g.n_modes())
            .map(|j| g.modes.weights[j] / g.modes.nodes[j].powf(1.5 + 0.5 * mu))
            .sum();
        assert!((v - expect).abs() < 1e-12 * expect);
        let continuum = 4.0 * PI / (1.5 - 0.5 * mu);
        assert!(v < continuum);
    }

    #[test]
    fn zero_norm_converges_under_refinement() {
        let mu = 0.5;
        let s = ZStencil::new(Complex64::new(0.0, 0.0), 0.05).unwrap();
        let continuum = 4.0 * PI / (1.5 - 0.5 * mu);
        let mut errs = Vec::new();
        for &(d, n) in &[(0.4, 40), (0.2, 80), (0.1, 160)] {
            let g = Grids::new(1.0, d, n, n + 4).unwrap();
            let mut f = KernelFamily::zeros(&g, s, 1);
            f.fill(1, 0, |_, r, _, _| Complex64::new(r, 0.0)).unwrap();
            errs.push((norm_zero(&f.kernels[&(1, 0)], &g, mu, 0.0).unwrap() - continuum).abs());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    }

    #[test]
    fn w00_norms() {
        let (g, s) = setup();
        let free = free_family(&g, s, 2);
        assert!((norm_zero_00(&free.kernels[&(0, 0)], &g, 0.0) - 1.0).abs() < 1e-12);
        assert!(norm_f(&free) < 1e-12);
        assert!((norm_z(&free) - 1.0).abs() < 1e-12);
        let refm = reference_family(&g, s, 2);
        assert!(norm_f(&refm) < 1e-15 && norm_z(&refm) < 1e-15);
        let mut c = free.clone();
        c.fill(0, 0, |z, r, _, _| z + r + 0.01 * r * r).unwrap();
        let rn = &g.r.nodes;
        let expect = 1.0 + 0.01 * (rn[rn.len() - 1] + rn[rn.len() - 2]);
        assert!((norm_zero_00(&c.kernels[&(0, 0)], &g, 0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn norm_i_single_term() {
        let (g, s) = setup();
        let (mu, xi) = (0.5, 0.2);
        let mut f = free_family(&g, s, 2);
        f.fill(0, 1, |_, _, _, ka| Complex64::new(0.01 * ka[0].powf(-0.5 + 0.5 * mu), 0.0)).unwrap();
        let f = crate::kernels::canonicalize(&f);
        let v = 0.01;
        let ni = norm_i(&f, mu, xi).unwrap();
        assert!((ni - 2.0 * v / (xi * (1.0 - xi) * (1.0 - xi))).abs() < 1e-14);
        let f2 = f.scale_interaction(3.0);
        assert!((norm_i(&f2, mu, xi).unwrap() - 3.0 * ni).abs() < 1e-14);
    }

    #[test]
    fn polydisc_examples() {
        let (g, s) = setup();
        let (mu, xi) = (0.5, 0.2);
        let eps = EpsilonTriple::new(1e-3, 1.5, 1e-3).unwrap();
        let free = free_family(&g, s, 2);
        assert!(in_polydisc(&free, &eps, mu, xi));
        assert!(!in_polydisc(&reference_family(&g, s, 2), &eps, mu, xi));
        let mut f = free.clone();
        f.fill(0, 1, |_, _, _, ka| Complex64::new(ka[0].powf(-0.5 + 0.5 * mu), 0.0)).unwrap();
        let unit = norm_i(&f, mu, xi).unwrap();
        let f = f.scale_interaction(2.0 * eps.eps_i / unit);
        assert!(!in_polydisc(&f, &eps, mu, xi));
    }
}
