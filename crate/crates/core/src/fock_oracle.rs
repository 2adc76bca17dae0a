//! Dense matrix realization of the operators on a truncated Fock space.
//!
//! The one-photon space is spanned by the momentum shells of a
//! [`RadialGrid`]; mode `j` carries energy `omega_j`. A state is an
//! occupation vector with at most `n_max` photons. Kernels become matrices
//! by the quadrature rule `int dk a*(k) f a(k) -> sum_j w_j b*_j f b_j` with
//! canonical mode operators, so each leg of `W_{m,n}` carries `sqrt(w_j)`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::kernels::{FamilySlice, KernelFamily, RadialGrid, CUTOFF_RTOL};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("barred block singular: smallest singular value {sv:e} <= tolerance {tol:e}")]
    BarredBlockSingular { sv: f64, tol: f64 },
    #[error("alpha = {0} is not a multiple of the grid spacing")]
    NotGridMultiple(f64),
    #[error("state {0} in the operator support lies outside the dilation range")]
    OutsideDilationDomain(usize),
    #[error("kernel ({0},{1}) missing")]
    MissingKernel(usize, usize),
    #[error("operator has an empty support")]
    EmptySupport,
    #[error("eigenvalue computation failed")]
    Eigen,
}

/// Occupation-number basis with at most `n_max` photons, vacuum first.
#[derive(Debug, Clone)]
pub struct FockBasis {
    pub grid: RadialGrid,
    pub n_max: usize,
    pub states: Vec<Vec<u8>>,
    pub energies: Vec<f64>,
    lookup: HashMap<Vec<u8>, usize>,
}

impl FockBasis {
    /// States are ordered by photon number, then lexicographically by the
    /// sorted list of occupied mode indices.
    pub fn new(grid: &RadialGrid, n_max: usize) -> Self {
        let nm = grid.len();
        let mut states = Vec::new();
        fn rec(start: usize, left: usize, nm: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if left == 0 {
                out.push(cur.clone());
                return;
            }
            for j in start..nm {
                cur.push(j);
                rec(j, left - 1, nm, cur, out);
                cur.pop();
            }
        }
        for n in 0..=n_max {
            let mut lists = Vec::new();
            rec(0, n, nm, &mut Vec::new(), &mut lists);
            for l in lists {
                let mut occ = vec![0u8; nm];
                for j in l {
                    occ[j] += 1;
                }
                states.push(occ);
            }
        }
        let energies = states
            .iter()
            .map(|s| s.iter().zip(&grid.nodes).map(|(&c, w)| c as f64 * w).sum())
            .collect();
        let lookup = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        FockBasis {
            grid: grid.clone(),
            n_max,
            states,
            energies,
            lookup,
        }
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_modes(&self) -> usize {
        self.grid.len()
    }

    pub fn find(&self, occ: &[u8]) -> Option<usize> {
        self.lookup.get(occ).copied()
    }

    pub fn photons(&self, i: usize) -> usize {
        self.states[i].iter().map(|&c| c as usize).sum()
    }

    /// States with energy at most `e^{-alpha} rho`.
    pub fn chi_mask(&self, alpha: f64) -> Vec<bool> {
        let lim = (-alpha).exp() * self.grid.rho * (1.0 + CUTOFF_RTOL);
        self.energies.iter().map(|&e| e <= lim).collect()
    }
}

/// Dense operator together with the set of basis states it acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct FockOperatorMatrix {
    pub mat: CMatrix,
    pub support: Vec<bool>,
}

impl FockOperatorMatrix {
    pub fn support_indices(&self) -> Vec<usize> {
        (0..self.support.len()).filter(|&i| self.support[i]).collect()
    }

    /// The matrix restricted to its support.
    pub fn block(&self) -> CMatrix {
        let idx = self.support_indices();
        submatrix(&self.mat, &idx, &idx)
    }

    pub fn norm(&self) -> f64 {
        operator_norm(&self.mat)
    }
}

pub fn submatrix(m: &CMatrix, rows: &[usize], cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Largest singular value.
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Canonical annihilation and creation matrices `(b_j, b*_j)`; creation
/// beyond `n_max` is truncated.
pub fn mode_ops(basis: &FockBasis) -> Vec<(CMatrix, CMatrix)> {
    let d = basis.dim();
    (0..basis.n_modes())
        .map(|j| {
            let mut a = CMatrix::zeros(d, d);
            for (s, occ) in basis.states.iter().enumerate() {
                if occ[j] > 0 {
                    let mut t = occ.clone();
                    t[j] -= 1;
                    let ti = basis.find(&t).expect("lower sector present");
                    a[(ti, s)] = Complex64::new((occ[j] as f64).sqrt(), 0.0);
                }
            }
            let ad = a.adjoint();
            (a, ad)
        })
        .collect()
}

/// Diagonal matrix of state energies.
pub fn h_f(basis: &FockBasis) -> FockOperatorMatrix {
    let d = basis.dim();
    let mut m = CMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = Complex64::new(basis.energies[i], 0.0);
    }
    FockOperatorMatrix {
        mat: m,
        support: vec![true; d],
    }
}

/// Diagonal projector onto states with energy at most `e^{-alpha} rho`.
pub fn chi(basis: &FockBasis, alpha: f64) -> FockOperatorMatrix {
    let d = basis.dim();
    let mask = basis.chi_mask(alpha);
    let mut m = CMatrix::zeros(d, d);
    for i in 0..d {
        if mask[i] {
            m[(i, i)] = ONE;
        }
    }
    FockOperatorMatrix {
        mat: m,
        support: vec![true; d],
    }
}

/// Removes ordered annihilation tuples from a state. Calls `visit` with the
/// remaining occupation, the amplitude and the tuple.
pub(crate) fn for_each_annihilation<F>(occ: &mut Vec<u8>, legs: usize, tuple: &mut Vec<usize>, amp: f64, visit: &mut F)
where
    F: FnMut(&mut Vec<u8>, f64, &[usize]),
{
    if tuple.len() == legs {
        visit(occ, amp, tuple);
        return;
    }
    for j in 0..occ.len() {
        let c = occ[j];
        if c == 0 {
            continue;
        }
        occ[j] -= 1;
        tuple.push(j);
        for_each_annihilation(occ, legs, tuple, amp * (c as f64).sqrt(), visit);
        tuple.pop();
        occ[j] += 1;
    }
}

/// Adds ordered creation tuples to a state, respecting `n_max`.
pub(crate) fn for_each_creation<F>(occ: &mut Vec<u8>, legs: usize, n_max_left: usize, tuple: &mut Vec<usize>, amp: f64, visit: &mut F)
where
    F: FnMut(&[u8], f64, &[usize]),
{
    if tuple.len() == legs {
        visit(occ, amp, tuple);
        return;
    }
    if n_max_left == 0 {
        return;
    }
    for j in 0..occ.len() {
        let c = occ[j];
        occ[j] += 1;
        tuple.push(j);
        for_each_creation(occ, legs, n_max_left - 1, tuple, amp * ((c + 1) as f64).sqrt(), visit);
        tuple.pop();
        occ[j] -= 1;
    }
}

/// Literal matrix of `sum b*(created) w(r; created; annihilated) b(annihilated)`
/// with `sqrt(w_j)` per leg, where `r` is the energy of the intermediate
/// state after the annihilations.
pub fn build_w_with<K>(basis: &FockBasis, m: usize, n: usize, kernel: K) -> CMatrix
where
    K: FnMut(f64, &[usize], &[usize]) -> Complex64,
{
    let all = vec![true; basis.dim()];
    build_w_restricted(basis, m, n, &all, &all, kernel)
}

/// [`build_w_with`] computing only the entries with a selected source
/// (column) and target (row) state.
pub fn build_w_restricted<K>(basis: &FockBasis, m: usize, n: usize, sources: &[bool], targets: &[bool], mut kernel: K) -> CMatrix
where
    K: FnMut(f64, &[usize], &[usize]) -> Complex64,
{
    let d = basis.dim();
    let sw: Vec<f64> = basis.grid.weights.iter().map(|w| w.sqrt()).collect();
    let mut out = CMatrix::zeros(d, d);
    for s in 0..d {
        if !sources[s] {
            continue;
        }
        let mut occ = basis.states[s].clone();
        let photons = basis.photons(s);
        if photons < n {
            continue;
        }
        let mut ann = Vec::with_capacity(n);
        for_each_annihilation(&mut occ, n, &mut ann, 1.0, &mut |mid, amp_a, at| {
            let r = basis.energies[basis.find(mid).expect("lower sector present")];
            let wa: f64 = at.iter().map(|&j| sw[j]).product();
            let left = basis.n_max - (photons - n);
            let mut cre = Vec::with_capacity(m);
            for_each_creation(mid, m, left, &mut cre, amp_a * wa, &mut |target, amp, ct| {
                let t = basis.find(target).expect("target within n_max");
                if !targets[t] {
                    return;
                }
                let v = kernel(r, ct, at);
                if v == ZERO {
                    return;
                }
                let wc: f64 = ct.iter().map(|&j| sw[j]).product();
                out[(t, s)] += v * (amp * wc);
            });
        });
    }
    out
}

fn chi0_sandwich(basis: &FockBasis, m: &mut CMatrix) -> Vec<bool> {
    let mask = basis.chi_mask(0.0);
    let d = basis.dim();
    for i in 0..d {
        for j in 0..d {
            if !(mask[i] && mask[j]) {
                m[(i, j)] = ZERO;
            }
        }
    }
    mask
}

/// `W_{m,n}` of the family at spectral parameter `z` (no cutoff projectors).
pub fn build_w_mn(f: &KernelFamily, m: usize, n: usize, z: Complex64, basis: &FockBasis) -> Result<FockOperatorMatrix, OracleError> {
    if !f.kernels.contains_key(&(m, n)) {
        return Err(OracleError::MissingKernel(m, n));
    }
    let slice = f.slice_at(z);
    let mat = build_w_with(basis, m, n, |r, c, a| slice.eval_nodes(m, n, r, c, a));
    Ok(FockOperatorMatrix {
        mat,
        support: vec![true; basis.dim()],
    })
}

/// `H(w) = sum chi_0 W_{m,n} chi_0` from a fixed-`z` slice.
pub fn build_h_slice(slice: &FamilySlice, basis: &FockBasis) -> FockOperatorMatrix {
    let d = basis.dim();
    let mut total = CMatrix::zeros(d, d);
    for &(m, n) in slice.kernels.keys() {
        total += build_w_with(basis, m, n, |r, c, a| slice.eval_nodes(m, n, r, c, a));
    }
    let support = chi0_sandwich(basis, &mut total);
    FockOperatorMatrix { mat: total, support }
}

/// `H(w(z))`.
pub fn build_h(f: &KernelFamily, z: Complex64, basis: &FockBasis) -> FockOperatorMatrix {
    build_h_slice(&f.slice_at(z), basis)
}

/// `W(w) = H(w) - chi_0 w_{0,0}(z, H_f) chi_0` from a slice.
pub fn build_interaction_slice(slice: &FamilySlice, basis: &FockBasis) -> FockOperatorMatrix {
    let d = basis.dim();
    let mut total = CMatrix::zeros(d, d);
    for &(m, n) in slice.kernels.keys() {
        if m + n >= 1 {
            total += build_w_with(basis, m, n, |r, c, a| slice.eval_nodes(m, n, r, c, a));
        }
    }
    let support = chi0_sandwich(basis, &mut total);
    FockOperatorMatrix { mat: total, support }
}

/// Smallest singular value of the operator on its support.
pub fn min_singular(h: &FockOperatorMatrix) -> f64 {
    let b = h.block();
    if b.is_empty() {
        return 0.0;
    }
    b.singular_values().min()
}

/// `<Omega| H Omega>`.
pub fn vacuum_expectation(h: &FockOperatorMatrix) -> Complex64 {
    h.mat[(0, 0)]
}

/// Block Schur complement `chi H chi - chi H chib (chib H chib)^{-1} chib H chi`
/// with `chi = chi_alpha` and `chib` its complement inside the support of `H`.
pub fn schur_feshbach(h: &FockOperatorMatrix, basis: &FockBasis, alpha: f64) -> Result<FockOperatorMatrix, OracleError> {
    let mask = basis.chi_mask(alpha);
    let p: Vec<usize> = (0..basis.dim()).filter(|&i| h.support[i] && mask[i]).collect();
    let q: Vec<usize> = (0..basis.dim()).filter(|&i| h.support[i] && !mask[i]).collect();
    if p.is_empty() {
        return Err(OracleError::EmptySupport);
    }
    let hpp = submatrix(&h.mat, &p, &p);
    let mut schur = hpp;
    if !q.is_empty() {
        let hqq = submatrix(&h.mat, &q, &q);
        let tol = 1e-10 * operator_norm(&h.mat);
        let sv = hqq.clone().singular_values().min();
        if sv <= tol {
            return Err(OracleError::BarredBlockSingular { sv, tol });
        }
        let hpq = submatrix(&h.mat, &p, &q);
        let hqp = submatrix(&h.mat, &q, &p);
        let x = hqq.lu().solve(&hqp).ok_or(OracleError::BarredBlockSingular { sv, tol })?;
        schur -= hpq * x;
    }
    let d = basis.dim();
    let mut mat = CMatrix::zeros(d, d);
    for (i, &pi) in p.iter().enumerate() {
        for (j, &pj) in p.iter().enumerate() {
            mat[(pi, pj)] = schur[(i, j)];
        }
    }
    let mut support = vec![false; d];
    for &i in &p {
        support[i] = true;
    }
    Ok(FockOperatorMatrix { mat, support })
}

/// The dilation `Gamma_alpha` as an index map: `shift[t] = Some(s)` when the
/// state `t` is the image of `s` under moving every photon from mode `j + k`
/// to mode `j`, `alpha = k delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dilation {
    pub k: usize,
    pub preimage: Vec<Option<usize>>,
    /// `image[s] = Some(t)` for states `s` with no photon below mode `k`.
    pub image: Vec<Option<usize>>,
}

pub fn dilation(basis: &FockBasis, alpha: f64) -> Result<Dilation, OracleError> {
    let k = basis.grid.shift_for(alpha).ok_or(OracleError::NotGridMultiple(alpha))?;
    let d = basis.dim();
    let nm = basis.n_modes();
    let mut preimage = vec![None; d];
    let mut image = vec![None; d];
    for (t, occ) in basis.states.iter().enumerate() {
        if occ[nm.saturating_sub(k)..].iter().any(|&c| c > 0) {
            continue;
        }
        let mut src = vec![0u8; nm];
        for j in 0..nm - k.min(nm) {
            src[j + k] = occ[j];
        }
        let s = basis.find(&src).expect("same photon number");
        preimage[t] = Some(s);
        image[s] = Some(t);
    }
    Ok(Dilation { k, preimage, image })
}

/// Dense matrix of `Gamma_alpha` (a partial isometry).
pub fn dilation_matrix(basis: &FockBasis, alpha: f64) -> Result<CMatrix, OracleError> {
    let g = dilation(basis, alpha)?;
    let d = basis.dim();
    let mut m = CMatrix::zeros(d, d);
    for (t, s) in g.preimage.iter().enumerate() {
        if let Some(s) = s {
            m[(t, *s)] = ONE;
        }
    }
    Ok(m)
}

/// `Gamma_alpha F Gamma_alpha^*`; errors when the support of `F` is not
/// contained in the range of the dilation.
pub fn conjugate_by_dilation(f: &FockOperatorMatrix, basis: &FockBasis, alpha: f64) -> Result<FockOperatorMatrix, OracleError> {
    let g = dilation(basis, alpha)?;
    for s in 0..basis.dim() {
        if f.support[s] && g.image[s].is_none() {
            return Err(OracleError::OutsideDilationDomain(s));
        }
    }
    let d = basis.dim();
    let mut mat = CMatrix::zeros(d, d);
    let mut support = vec![false; d];
    for t in 0..d {
        if let Some(s) = g.preimage[t] {
            support[t] = f.support[s];
        }
    }
    for t in 0..d {
        let Some(s) = g.preimage[t] else { continue };
        if !support[t] {
            continue;
        }
        for u in 0..d {
            let Some(v) = g.preimage[u] else { continue };
            if support[u] {
                mat[(t, u)] = f.mat[(s, v)];
            }
        }
    }
    Ok(FockOperatorMatrix { mat, support })
}

/// `e^alpha Gamma_alpha F_alpha(H) Gamma_alpha^*`.
pub fn rescaled_map(h: &FockOperatorMatrix, basis: &FockBasis, alpha: f64) -> Result<FockOperatorMatrix, OracleError> {
    let f = schur_feshbach(h, basis, alpha)?;
    let mut out = conjugate_by_dilation(&f, basis, alpha)?;
    out.mat *= Complex64::new(alpha.exp(), 0.0);
    Ok(out)
}

/// `||R_b(R_a(H)) - R_{a+b}(H)||` for the rescaled map `R`; both sides are
/// zero outside their supports.
pub fn semigroup_residual(h: &FockOperatorMatrix, basis: &FockBasis, alpha: f64, beta: f64) -> Result<f64, OracleError> {
    let two = rescaled_map(&rescaled_map(h, basis, alpha)?, basis, beta)?;
    let one = rescaled_map(h, basis, alpha + beta)?;
    Ok(operator_norm(&(two.mat - one.mat)))
}

/// Eigenvalue of smallest real part of the operator on its support.
pub fn eigen_bottom(h: &FockOperatorMatrix) -> Result<Complex64, OracleError> {
    let b = h.block();
    if b.is_empty() {
        return Err(OracleError::EmptySupport);
    }
    let ev = b.schur().eigenvalues().ok_or(OracleError::Eigen)?;
    ev.iter()
        .copied()
        .min_by(|a, b| a.re.partial_cmp(&b.re).expect("finite eigenvalues"))
        .ok_or(OracleError::Eigen)
}
