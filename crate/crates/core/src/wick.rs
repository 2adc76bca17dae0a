//! Composition of kernels: the Neumann series of the Feshbach map rewritten
//! as a new kernel family `w~` through Wick ordering.
//!
//! A contraction index `(m, n, p, q)` assigns to each of `L` vertices `m_l`
//! created and `n_l` annihilated external legs and `p_l` created and `q_l`
//! annihilated internal legs. The vacuum expectation `V` of a product of
//! vertices and resolvent factors is computed by propagating a state vector
//! over a small internal Fock space, rightmost vertex first.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::fock_oracle::{for_each_annihilation, for_each_creation, FockBasis};
use crate::kernels::{symmetrize, FamilySlice, Kernel, KernelFamily, CUTOFF_RTOL};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Relative floor below which `|w00|` on the barred region is treated as a
/// breakdown of the resolvent.
pub const RESOLVENT_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WickError {
    #[error("L = {0} < 2; the L = 1 term is the explicit chi H chi part")]
    LengthTooSmall(usize),
    #[error("resolvent denominator |w00(z, {r})| = {value:e} below floor {floor:e}")]
    ResolventFloor { r: f64, value: f64, floor: f64 },
    #[error("missing kernel ({0},{1})")]
    MissingKernel(usize, usize),
    #[error("expected {expected} external legs, got {got}")]
    ExternalLegs { expected: usize, got: usize },
}

/// Truncation parameters of the composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WickOptions {
    /// Largest number of vertices `L`.
    pub l_max: usize,
    /// Largest number of internal legs of each kind per vertex.
    pub p_max: usize,
}

impl Default for WickOptions {
    fn default() -> Self {
        WickOptions { l_max: 3, p_max: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContractionIndex {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl ContractionIndex {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Product of the binomials `C(m_l + p_l, p_l) C(n_l + q_l, q_l)`.
    pub fn binomial_weight(&self) -> f64 {
        (0..self.len())
            .map(|l| binom(self.m[l] + self.p[l], self.p[l]) * binom(self.n[l] + self.q[l], self.q[l]))
            .product()
    }

    /// Whether the term can be nonzero: the leftmost vertex creates no
    /// internal line, the rightmost annihilates none, the internal count
    /// never goes negative and ends at zero, and each vertex has a kernel of
    /// degree at most `m_in_max`.
    pub fn is_viable(&self, m_in_max: usize) -> bool {
        let l = self.len();
        if l == 0 || self.q[l - 1] > 0 || self.p[0] > 0 {
            return false;
        }
        let mut count: isize = 0;
        for i in (0..l).rev() {
            count -= self.q[i] as isize;
            if count < 0 {
                return false;
            }
            count += self.p[i] as isize;
            if self.m[i] + self.n[i] + self.p[i] + self.q[i] > m_in_max {
                return false;
            }
        }
        count == 0
    }

    /// Largest number of internal photons present between vertices.
    pub fn max_internal(&self) -> usize {
        let mut count = 0usize;
        let mut best = 0;
        for i in (0..self.len()).rev() {
            count = count.saturating_sub(self.q[i]) + self.p[i];
            best = best.max(count);
        }
        best
    }
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// All contraction indices of length `L` with `sum m_l = m`, `sum n_l = n`,
/// nonempty vertices and `p_l, q_l <= p_max`, in lexicographic order of
/// `(m_1, n_1, p_1, q_1, m_2, ...)`.
pub fn enumerate_b_l(l: usize, m: usize, n: usize, p_max: usize) -> Result<Vec<ContractionIndex>, WickError> {
    if l < 2 {
        return Err(WickError::LengthTooSmall(l));
    }
    let mut out = Vec::new();
    let mut cur = ContractionIndex {
        m: vec![0; l],
        n: vec![0; l],
        p: vec![0; l],
        q: vec![0; l],
    };
    fn rec(i: usize, left_m: usize, left_n: usize, p_max: usize, cur: &mut ContractionIndex, out: &mut Vec<ContractionIndex>) {
        let l = cur.len();
        if i == l {
            if left_m == 0 && left_n == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for mi in 0..=left_m {
            for ni in 0..=left_n {
                for pi in 0..=p_max {
                    for qi in 0..=p_max {
                        if mi + ni + pi + qi == 0 {
                            continue;
                        }
                        cur.m[i] = mi;
                        cur.n[i] = ni;
                        cur.p[i] = pi;
                        cur.q[i] = qi;
                        rec(i + 1, left_m - mi, left_n - ni, p_max, cur, out);
                    }
                }
            }
        }
    }
    rec(0, m, n, p_max, &mut cur, &mut out);
    Ok(out)
}

/// Offsets `(r_l, r~_l)`: created moduli of later vertices plus annihilated
/// moduli of earlier vertices, and `r~_l = r_l + |k~_l|_1`. Externals are
/// assigned to vertices in consecutive blocks.
pub fn r_offsets(u: &ContractionIndex, created: &[f64], annihilated: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = u.len();
    let mut kc = vec![0.0; l];
    let mut ka = vec![0.0; l];
    let (mut ic, mut ia) = (0, 0);
    for i in 0..l {
        kc[i] = created[ic..ic + u.m[i]].iter().sum();
        ka[i] = annihilated[ia..ia + u.n[i]].iter().sum();
        ic += u.m[i];
        ia += u.n[i];
    }
    let mut r = vec![0.0; l];
    let mut rt = vec![0.0; l];
    for i in 0..l {
        r[i] = ka[..i].iter().sum::<f64>() + kc[i + 1..].iter().sum::<f64>();
        rt[i] = r[i] + ka[i];
    }
    (r, rt)
}

/// `F(r) = chib_alpha(r) chi_0(r) / w00(z, r)`.
#[derive(Debug, Clone)]
pub struct Resolvent<'a> {
    pub slice: &'a FamilySlice,
    pub alpha: f64,
    pub floor: f64,
}

impl<'a> Resolvent<'a> {
    pub fn new(slice: &'a FamilySlice, alpha: f64) -> Self {
        let rho = slice.grids.rho();
        Resolvent {
            slice,
            alpha,
            floor: RESOLVENT_FLOOR_REL * (-alpha).exp() * rho,
        }
    }

    pub fn eval(&self, r: f64) -> Result<Complex64, WickError> {
        let rho = self.slice.grids.rho();
        let lo = (-self.alpha).exp() * rho * (1.0 + CUTOFF_RTOL);
        if r <= lo || r > rho * (1.0 + CUTOFF_RTOL) {
            return Ok(ZERO);
        }
        let w = self.slice.w00(r);
        if w.norm() < self.floor {
            return Err(WickError::ResolventFloor {
                r,
                value: w.norm(),
                floor: self.floor,
            });
        }
        Ok(1.0 / w)
    }
}

/// Evaluates composed kernels of one slice at arbitrary arguments.
pub struct TildeEvaluator<'a> {
    pub slice: &'a FamilySlice,
    pub resolvent: Resolvent<'a>,
    pub opts: WickOptions,
    internal: FockBasis,
    sqrt_w: Vec<f64>,
    /// Viable indices per output `(m, n)` with sign times binomial weight.
    terms: BTreeMap<(usize, usize), Vec<(ContractionIndex, f64)>>,
}

impl<'a> TildeEvaluator<'a> {
    /// Prepares all viable contraction indices for outputs `m + n <= m_out_max`.
    pub fn new(slice: &'a FamilySlice, alpha: f64, opts: WickOptions, m_out_max: usize) -> Result<Self, WickError> {
        let m_in_max = slice.kernels.keys().map(|&(m, n)| m + n).max().unwrap_or(0);
        let mut terms = BTreeMap::new();
        let mut n_int = opts.p_max.max(1);
        for d in 0..=m_out_max {
            for m in 0..=d {
                let n = d - m;
                let mut list = Vec::new();
                for l in 2..=opts.l_max {
                    let sign = if l % 2 == 0 { -1.0 } else { 1.0 };
                    for u in enumerate_b_l(l, m, n, opts.p_max)? {
                        if !u.is_viable(m_in_max) {
                            continue;
                        }
                        let present = (0..l).all(|i| slice.has(u.m[i] + u.p[i], u.n[i] + u.q[i]));
                        if !present {
                            continue;
                        }
                        n_int = n_int.max(u.max_internal());
                        let w = sign * u.binomial_weight();
                        list.push((u, w));
                    }
                }
                terms.insert((m, n), list);
            }
        }
        let internal = FockBasis::new(&slice.grids.modes, n_int);
        let sqrt_w = slice.grids.modes.weights.iter().map(|w| w.sqrt()).collect();
        Ok(TildeEvaluator {
            slice,
            resolvent: Resolvent::new(slice, alpha),
            opts,
            internal,
            sqrt_w,
            terms,
        })
    }

    pub fn terms(&self, m: usize, n: usize) -> &[(ContractionIndex, f64)] {
        self.terms.get(&(m, n)).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// `V_upsilon(z; r; k)` for external legs given as mode indices.
    pub fn eval_v(&self, u: &ContractionIndex, r: f64, created: &[usize], annihilated: &[usize]) -> Result<Complex64, WickError> {
        let nodes = &self.slice.grids.modes.nodes;
        let cm: Vec<f64> = created.iter().map(|&j| nodes[j]).collect();
        let am: Vec<f64> = annihilated.iter().map(|&j| nodes[j]).collect();
        let (ro, rto) = r_offsets(u, &cm, &am);
        let l = u.len();
        // Sparse state vector over the internal basis; `acc` is a dense
        // accumulator whose nonzero slots are listed in `touched`.
        let mut cur: Vec<(usize, Complex64)> = vec![(0, Complex64::new(1.0, 0.0))];
        let mut acc = vec![ZERO; self.internal.dim()];
        let mut touched = Vec::new();
        // Start offsets of each vertex's external block.
        let mut sc = vec![0usize; l + 1];
        let mut sa = vec![0usize; l + 1];
        for i in 0..l {
            sc[i + 1] = sc[i] + u.m[i];
            sa[i + 1] = sa[i] + u.n[i];
        }
        for i in (0..l).rev() {
            if i + 1 < l {
                // F_i sits to the right of vertex i.
                for (s, v) in cur.iter_mut() {
                    *v *= self.resolvent.eval(r + rto[i] + self.internal.energies[*s])?;
                }
                cur.retain(|(_, v)| *v != ZERO);
            }
            self.apply_vertex(
                &cur,
                &mut acc,
                &mut touched,
                &created[sc[i]..sc[i + 1]],
                &annihilated[sa[i]..sa[i + 1]],
                u.p[i],
                u.q[i],
                r + ro[i],
            );
            cur.clear();
            for t in touched.drain(..) {
                let v = std::mem::replace(&mut acc[t], ZERO);
                if v != ZERO {
                    cur.push((t, v));
                }
            }
            if cur.is_empty() {
                return Ok(ZERO);
            }
        }
        Ok(cur.iter().find(|(s, _)| *s == 0).map(|(_, v)| *v).unwrap_or(ZERO))
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_vertex(
        &self,
        src: &[(usize, Complex64)],
        dst: &mut [Complex64],
        touched: &mut Vec<usize>,
        ext_c: &[usize],
        ext_a: &[usize],
        p: usize,
        q: usize,
        r_base: f64,
    ) {
        let ib = &self.internal;
        let (mc, na) = (ext_c.len() + p, ext_a.len() + q);
        let mut created = ext_c.to_vec();
        let mut annihilated = ext_a.to_vec();
        for &(s, amp_s) in src {
            let photons = ib.photons(s);
            if photons < q {
                continue;
            }
            let mut occ = ib.states[s].clone();
            let es = ib.energies[s];
            let nodes = &ib.grid.nodes;
            let mut xa = Vec::with_capacity(q);
            for_each_annihilation(&mut occ, q, &mut xa, 1.0, &mut |mid, amp_a, at| {
                let e_mid = es - at.iter().map(|&j| nodes[j]).sum::<f64>();
                let wa: f64 = at.iter().map(|&j| self.sqrt_w[j]).product();
                annihilated.truncate(ext_a.len());
                annihilated.extend_from_slice(at);
                let left = ib.n_max - (photons - q);
                let mut xc = Vec::with_capacity(p);
                for_each_creation(mid, p, left, &mut xc, amp_a * wa, &mut |target, amp, ct| {
                    created.truncate(ext_c.len());
                    created.extend_from_slice(ct);
                    let v = self.slice.eval_nodes(mc, na, r_base + e_mid.max(0.0), &created, &annihilated);
                    if v == ZERO {
                        return;
                    }
                    let wc: f64 = ct.iter().map(|&j| self.sqrt_w[j]).product();
                    let t = ib.find(target).expect("internal target within n_max");
                    if dst[t] == ZERO {
                        touched.push(t);
                    }
                    dst[t] += amp_s * v * (amp * wc);
                });
            });
        }
    }

    /// Contribution of each vertex count `L` to the unsymmetrized `w~_{m,n}`.
    pub fn orders(&self, m: usize, n: usize, r: f64, created: &[usize], annihilated: &[usize]) -> Result<BTreeMap<usize, Complex64>, WickError> {
        if created.len() != m || annihilated.len() != n {
            return Err(WickError::ExternalLegs {
                expected: m + n,
                got: created.len() + annihilated.len(),
            });
        }
        let mut out = BTreeMap::new();
        for (u, w) in self.terms(m, n) {
            let v = self.eval_v(u, r, created, annihilated)?;
            *out.entry(u.len()).or_insert(ZERO) += v * *w;
        }
        Ok(out)
    }

    /// Unsymmetrized `w~_{m,n}(z; r; k)`.
    pub fn unsym(&self, m: usize, n: usize, r: f64, created: &[usize], annihilated: &[usize]) -> Result<Complex64, WickError> {
        Ok(self.orders(m, n, r, created, annihilated)?.values().sum())
    }

    /// `w~^(sym)_{m,n}(z; r; k)`: average over permutations of each block.
    pub fn value(&self, m: usize, n: usize, r: f64, created: &[usize], annihilated: &[usize]) -> Result<Complex64, WickError> {
        let pc = distinct_permutations(created);
        let pa = distinct_permutations(annihilated);
        let mut acc = ZERO;
        let mut count = 0.0;
        for (c, wc) in &pc {
            for (a, wa) in &pa {
                acc += self.unsym(m, n, r, c, a)? * (wc * wa);
                count += wc * wa;
            }
        }
        Ok(acc / count)
    }
}

/// Distinct orderings of a small tuple with their multiplicities.
fn distinct_permutations(t: &[usize]) -> Vec<(Vec<usize>, f64)> {
    let mut all: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    fn rec(rest: &mut Vec<usize>, cur: &mut Vec<usize>, all: &mut BTreeMap<Vec<usize>, f64>) {
        if rest.is_empty() {
            *all.entry(cur.clone()).or_insert(0.0) += 1.0;
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            rec(rest, cur, all);
            cur.pop();
            rest.insert(i, x);
        }
    }
    rec(&mut t.to_vec(), &mut Vec::new(), &mut all);
    all.into_iter().collect()
}

/// Composed kernels `w~^(sym)` at spectral parameter `z` on the grid nodes,
/// for all `m + n <= m_out_max`; entries outside the support are zero.
pub fn compose_tilde_w(f: &KernelFamily, z: Complex64, alpha: f64, opts: WickOptions, m_out_max: usize) -> Result<FamilySlice, WickError> {
    let slice = f.slice_at(z);
    compose_slice(&slice, alpha, opts, m_out_max)
}

/// Same as [`compose_tilde_w`] for an already reconstructed slice.
pub fn compose_slice(slice: &FamilySlice, alpha: f64, opts: WickOptions, m_out_max: usize) -> Result<FamilySlice, WickError> {
    let ev = TildeEvaluator::new(slice, alpha, opts, m_out_max)?;
    let g = &slice.grids;
    let nodes = &g.modes.nodes;
    let mut kernels = BTreeMap::new();
    for d in 0..=m_out_max {
        for m in 0..=d {
            let n = d - m;
            let nt = g.n_tuples(d);
            let mut vals = vec![ZERO; g.n_r() * nt];
            let mut modes = vec![0usize; d];
            if !ev.terms(m, n).is_empty() {
                for t in 0..nt {
                    g.decode_tuple(t, d, &mut modes);
                    // Symmetrization is done once on the full grid below.
                    let kc: f64 = modes[..m].iter().map(|&j| nodes[j]).sum();
                    let ka: f64 = modes[m..].iter().map(|&j| nodes[j]).sum();
                    for (ri, &r) in g.r.nodes.iter().enumerate() {
                        if !g.in_support(r, kc, ka) {
                            continue;
                        }
                        vals[ri * nt + t] = ev.unsym(m, n, r, &modes[..m], &modes[m..])?;
                    }
                }
            }
            let sym = symmetrize(&Kernel { m, n, values: vals }, g);
            kernels.insert((m, n), sym.values);
        }
    }
    Ok(FamilySlice {
        grids: g.clone(),
        z: slice.z,
        kernels,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComparisonError {
    #[error(transparent)]
    Wick(#[from] WickError),
    #[error(transparent)]
    Oracle(#[from] crate::fock_oracle::OracleError),
}

/// Matrix-level check of `F_alpha(H(w)) = chi H(w) chi + chi H(w~) chi`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OracleComparison {
    /// Norm of the difference on the low-photon part of `Ran chi_alpha`.
    pub residual: f64,
    /// Measured Neumann ratio `max(|W chib T^-1|, |T^-1 chib W|)`.
    pub q: f64,
    pub h_norm: f64,
    /// `10 q^{L_max+1} / (1 - q) |H|` (infinite when `q >= 1`).
    pub bound: f64,
    pub block_dim: usize,
}

/// Compares the composed kernels with the exact Schur complement on a Fock
/// basis with `n_max` photons. The comparison block holds the states of
/// `Ran chi_alpha` with at most `n_max - M` photons (`M` the largest input
/// degree), for which every intermediate state of the `L <= 3` terms fits
/// in the basis.
pub fn compare_with_oracle(
    f: &KernelFamily,
    z: Complex64,
    alpha: f64,
    opts: WickOptions,
    n_max: usize,
) -> Result<OracleComparison, ComparisonError> {
    use crate::fock_oracle::{build_h_slice, build_interaction_slice, build_w_restricted, schur_feshbach, CMatrix};
    let basis = FockBasis::new(&f.grids.modes, n_max);
    let slice = f.slice_at(z);
    let h = build_h_slice(&slice, &basis);
    let fh = schur_feshbach(&h, &basis, alpha)?;
    let m_in = slice.kernels.keys().map(|&(m, n)| m + n).max().unwrap_or(0);
    let chi = basis.chi_mask(alpha);
    let chi0 = basis.chi_mask(0.0);
    let block: Vec<bool> = (0..basis.dim())
        .map(|i| chi[i] && basis.photons(i) + m_in <= n_max)
        .collect();
    let out_max = 2 * (n_max - m_in);
    let ev = TildeEvaluator::new(&slice, alpha, opts, out_max)?;
    let d = basis.dim();
    let mut recon = CMatrix::zeros(d, d);
    let lim = n_max - m_in;
    let mut failure = None;
    for m in 0..=lim {
        for n in 0..=lim {
            if ev.terms(m, n).is_empty() {
                continue;
            }
            recon += build_w_restricted(&basis, m, n, &block, &block, |r, c, a| match ev.value(m, n, r, c, a) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    ZERO
                }
            });
        }
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    let idx: Vec<usize> = (0..d).filter(|&i| block[i]).collect();
    let mut diff = CMatrix::zeros(idx.len(), idx.len());
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            diff[(a, b)] = h.mat[(i, j)] + recon[(i, j)] - fh.mat[(i, j)];
        }
    }
    let residual = crate::fock_oracle::operator_norm(&diff);
    let w = build_interaction_slice(&slice, &basis);
    let mut tinv = CMatrix::zeros(d, d);
    for i in 0..d {
        if chi0[i] && !chi[i] {
            tinv[(i, i)] = 1.0 / slice.w00(basis.energies[i]);
        }
    }
    let q = crate::fock_oracle::operator_norm(&(&w.mat * &tinv)).max(crate::fock_oracle::operator_norm(&(&tinv * &w.mat)));
    let h_norm = h.norm();
    let bound = if q < 1.0 {
        10.0 * q.powi(opts.l_max as i32 + 1) / (1.0 - q) * h_norm
    } else {
        f64::INFINITY
    };
    Ok(OracleComparison {
        residual,
        q,
        h_norm,
        bound,
        block_dim: idx.len(),
    })
}
