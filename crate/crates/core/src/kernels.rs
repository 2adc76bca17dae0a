//! Kernel families `w = (w_{m,n})` on a rotation-invariant radial grid.
//!
//! A kernel `w_{m,n}(z; r; k^(m); k~^(n))` depends on the spectral parameter
//! `z`, the spectator energy `r` and the moduli of `m` created and `n`
//! annihilated momenta. Values are stored on
//!
//! * a five-point `z` stencil `{c, c+h, c-h, c+ih, c-ih}`,
//! * an `r` grid `{0} u {rho e^{-i delta}}` (ascending),
//! * momentum nodes `omega_j = rho e^{-j delta}`, `j = 0..N`.
//!
//! The `r` and momentum grids share `delta`, so a dilation by `k delta` is an
//! exact index shift. Off-stencil `z` values come from the quartic that
//! interpolates the five stencil values; its constant, linear and quadratic
//! coefficients are the usual central-difference estimates.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when comparing energies with cutoffs and nodes.
pub const CUTOFF_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("degenerate stencil: {0}")]
    DegenerateStencil(String),
    #[error("argument out of domain: {0}")]
    OutOfDomain(String),
    #[error("kernel ({0},{1}) missing")]
    MissingKernel(usize, usize),
    #[error("negative dilation alpha = {0}")]
    NegativeAlpha(f64),
    #[error("families are incompatible: {0}")]
    Incompatible(String),
    #[error("format error: {0}")]
    Format(String),
}

/// Momentum-modulus grid with shell quadrature weights.
///
/// Node `j` represents the shell `(omega_{j+1}, omega_j]` and its weight is the
/// exact shell volume `(4 pi / 3) omega_j^3 (1 - e^{-3 delta})`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub rho: f64,
    pub delta: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RadialGrid {
    pub fn new(rho: f64, delta: f64, n_nodes: usize) -> Result<Self, KernelError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(KernelError::InvalidGrid(format!("rho = {rho}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(KernelError::InvalidGrid(format!("delta = {delta}")));
        }
        if n_nodes == 0 {
            return Err(KernelError::InvalidGrid("no momentum nodes".into()));
        }
        let shell = (4.0 * PI / 3.0) * (1.0 - (-3.0 * delta).exp());
        let nodes: Vec<f64> = (0..n_nodes).map(|j| rho * (-(j as f64) * delta).exp()).collect();
        let weights = nodes.iter().map(|w| shell * w * w * w).collect();
        Ok(RadialGrid {
            rho,
            delta,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Some(k)` when `alpha = k delta` up to rounding.
    pub fn shift_for(&self, alpha: f64) -> Option<usize> {
        let k = alpha / self.delta;
        let kr = k.round();
        if kr >= 0.0 && (k - kr).abs() <= 1e-9 * kr.max(1.0) {
            Some(kr as usize)
        } else {
            None
        }
    }

    /// Interpolation leg for an arbitrary modulus; `None` below the last node
    /// or above `rho`.
    pub fn locate(&self, omega: f64) -> Option<Leg> {
        let n = self.nodes.len();
        if omega > self.rho * (1.0 + CUTOFF_RTOL) {
            return None;
        }
        // nodes are descending: find j with nodes[j] >= omega >= nodes[j+1].
        let x = (self.rho / omega).ln() / self.delta;
        if !x.is_finite() {
            return None;
        }
        let jr = x.round();
        if (x - jr).abs() <= 1e-9 && jr >= 0.0 && (jr as usize) < n {
            let j = jr as usize;
            return Some(Leg::node(j, self.nodes[j]));
        }
        let j = x.floor().max(0.0) as usize;
        if j + 1 >= n {
            return None;
        }
        let (a, b) = (self.nodes[j], self.nodes[j + 1]);
        let t = (a - omega) / (a - b);
        Some(Leg {
            lo: j,
            hi: j + 1,
            t,
            modulus: omega,
        })
    }
}

/// Momentum argument of a kernel: a node or a linear blend of two neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
    pub modulus: f64,
}

impl Leg {
    pub fn node(j: usize, modulus: f64) -> Self {
        Leg {
            lo: j,
            hi: j,
            t: 0.0,
            modulus,
        }
    }

    pub fn is_node(&self) -> bool {
        self.lo == self.hi || self.t == 0.0
    }
}

/// Spectator-energy grid `{0} u {rho e^{-i delta}: i = 0..n_geo}`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RGrid {
    pub rho: f64,
    pub delta: f64,
    pub nodes: Vec<f64>,
}

impl RGrid {
    pub fn new(rho: f64, delta: f64, n_geo: usize) -> Result<Self, KernelError> {
        if n_geo == 0 {
            return Err(KernelError::InvalidGrid("empty r grid".into()));
        }
        let mut nodes = vec![0.0];
        for i in (0..n_geo).rev() {
            nodes.push(rho * (-(i as f64) * delta).exp());
        }
        Ok(RGrid { rho, delta, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index `a` with `nodes[a] <= r < nodes[a+1]`, or an exact node hit.
    fn bracket(&self, r: f64) -> (usize, bool) {
        let nodes = &self.nodes;
        let tol = CUTOFF_RTOL * self.rho;
        let pos = nodes.partition_point(|&x| x <= r);
        let a = pos.saturating_sub(1);
        if (r - nodes[a]).abs() <= tol.max(CUTOFF_RTOL * nodes[a]) {
            return (a, true);
        }
        if a + 1 < nodes.len() && (nodes[a + 1] - r).abs() <= CUTOFF_RTOL * nodes[a + 1] {
            return (a + 1, true);
        }
        (a, false)
    }
}

/// Momentum and spectator grids shared by every kernel of a family.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub modes: RadialGrid,
    pub r: RGrid,
}

impl Grids {
    pub fn new(rho: f64, delta: f64, n_modes: usize, n_r: usize) -> Result<Self, KernelError> {
        Ok(Grids {
            modes: RadialGrid::new(rho, delta, n_modes)?,
            r: RGrid::new(rho, delta, n_r)?,
        })
    }

    pub fn rho(&self) -> f64 {
        self.modes.rho
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_r(&self) -> usize {
        self.r.len()
    }

    pub fn n_tuples(&self, legs: usize) -> usize {
        self.n_modes().pow(legs as u32)
    }

    /// Per-stencil-point block length of a kernel with `legs` momenta.
    pub fn block_len(&self, legs: usize) -> usize {
        self.n_r() * self.n_tuples(legs)
    }

    /// Mode indices of a flat tuple index (created legs first).
    pub fn decode_tuple(&self, mut idx: usize, legs: usize, out: &mut [usize]) {
        let n = self.n_modes();
        for slot in out.iter_mut().take(legs).rev() {
            *slot = idx % n;
            idx /= n;
        }
    }

    pub fn encode_tuple(&self, modes: &[usize]) -> usize {
        let n = self.n_modes();
        modes.iter().fold(0, |acc, &j| acc * n + j)
    }

    /// Whether `r` plus either momentum block stays within the cutoff.
    pub fn in_support(&self, r: f64, created: f64, annihilated: f64) -> bool {
        let lim = self.rho() * (1.0 + CUTOFF_RTOL);
        r + created <= lim && r + annihilated <= lim
    }
}

/// Five-point stencil in the spectral parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStencil {
    pub center: Complex64,
    pub h: f64,
}

impl ZStencil {
    pub fn new(center: Complex64, h: f64) -> Result<Self, KernelError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(KernelError::DegenerateStencil(format!("h = {h}")));
        }
        Ok(ZStencil { center, h })
    }

    /// `[c, c+h, c-h, c+ih, c-ih]`.
    pub fn points(&self) -> [Complex64; 5] {
        let c = self.center;
        let h = self.h;
        [
            c,
            c + h,
            c - h,
            c + Complex64::new(0.0, h),
            c - Complex64::new(0.0, h),
        ]
    }

    /// Weights `c_p(z)` with `fit(z) = sum_p c_p(z) v_p` for the quartic
    /// `a_0 + a_1 u + ... + a_4 u^4`, `u = z - c`, through all five points.
    /// The outer points sit at `u = h i^k`, so the coefficients are a
    /// four-point discrete Fourier transform:
    /// `a_1 = (v_1 - v_2 - i(v_3 - v_4)) / 4h`, `a_2 = (v_1 + v_2 - v_3 - v_4) / 4h^2`,
    /// `a_3 = (v_1 - v_2 + i(v_3 - v_4)) / 4h^3`, `a_4 = ((v_1 + v_2 + v_3 + v_4)/4 - v_0) / h^4`.
    pub fn fit_weights(&self, z: Complex64) -> [Complex64; 5] {
        let u = (z - self.center) / self.h;
        let i = Complex64::new(0.0, 1.0);
        let (u1, u2, u3, u4) = (u / 4.0, u * u / 4.0, u * u * u / 4.0, u * u * u * u / 4.0);
        [
            Complex64::new(1.0, 0.0) - 4.0 * u4,
            u1 + u2 + u3 + u4,
            -u1 + u2 - u3 + u4,
            -i * u1 - u2 + i * u3 + u4,
            i * u1 - u2 - i * u3 + u4,
        ]
    }

    pub fn fit(&self, values: &[Complex64; 5], z: Complex64) -> Complex64 {
        let w = self.fit_weights(z);
        (0..5).map(|p| w[p] * values[p]).sum()
    }

    /// Central-difference derivative at the center (the `b` coefficient).
    pub fn derivative(&self, values: &[Complex64; 5]) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        (values[1] - values[2] - i * (values[3] - values[4])) / (4.0 * self.h)
    }

    /// Largest distance from the center at which the fit is trusted.
    pub fn reconstruction_radius(&self) -> f64 {
        2.0 * self.h
    }
}

/// One kernel `w_{m,n}`; layout `[stencil point][r node][created..., annihilated...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub m: usize,
    pub n: usize,
    pub values: Vec<Complex64>,
}

impl Kernel {
    pub fn zeros(m: usize, n: usize, grids: &Grids) -> Self {
        Kernel {
            m,
            n,
            values: vec![Complex64::new(0.0, 0.0); 5 * grids.block_len(m + n)],
        }
    }

    pub fn legs(&self) -> usize {
        self.m + self.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    pub grids: Grids,
    pub stencil: ZStencil,
    pub m_max: usize,
    pub kernels: BTreeMap<(usize, usize), Kernel>,
}

/// Kernel values at one fixed spectral parameter; layout `[r node][tuple]`.
#[derive(Debug, Clone)]
pub struct FamilySlice {
    pub grids: Grids,
    pub z: Complex64,
    pub kernels: BTreeMap<(usize, usize), Vec<Complex64>>,
}

impl KernelFamily {
    /// Family with every kernel `m + n <= m_max` present and zero.
    pub fn zeros(grids: &Grids, stencil: ZStencil, m_max: usize) -> Self {
        let mut kernels = BTreeMap::new();
        for d in 0..=m_max {
            for m in 0..=d {
                kernels.insert((m, d - m), Kernel::zeros(m, d - m, grids));
            }
        }
        KernelFamily {
            grids: grids.clone(),
            stencil,
            m_max,
            kernels,
        }
    }

    pub fn kernel(&self, m: usize, n: usize) -> Result<&Kernel, KernelError> {
        self.kernels.get(&(m, n)).ok_or(KernelError::MissingKernel(m, n))
    }

    pub fn kernel_mut(&mut self, m: usize, n: usize) -> Result<&mut Kernel, KernelError> {
        self.kernels.get_mut(&(m, n)).ok_or(KernelError::MissingKernel(m, n))
    }

    /// Flat index of an entry.
    pub fn index(&self, legs: usize, p: usize, ri: usize, tuple: usize) -> usize {
        (p * self.grids.n_r() + ri) * self.grids.n_tuples(legs) + tuple
    }

    /// Fills kernel `(m,n)` from `f(z, r, created moduli, annihilated moduli)`.
    pub fn fill<F>(&mut self, m: usize, n: usize, mut f: F) -> Result<(), KernelError>
    where
        F: FnMut(Complex64, f64, &[f64], &[f64]) -> Complex64,
    {
        let grids = self.grids.clone();
        let pts = self.stencil.points();
        let legs = m + n;
        let nt = grids.n_tuples(legs);
        let mut modes = vec![0usize; legs];
        let mut om = vec![0.0; legs];
        let k = self.kernel_mut(m, n)?;
        for (p, &z) in pts.iter().enumerate() {
            for (ri, &r) in grids.r.nodes.iter().enumerate() {
                for t in 0..nt {
                    grids.decode_tuple(t, legs, &mut modes);
                    for (o, &j) in om.iter_mut().zip(modes.iter()) {
                        *o = grids.modes.nodes[j];
                    }
                    k.values[(p * grids.n_r() + ri) * nt + t] = f(z, r, &om[..m], &om[m..]);
                }
            }
        }
        Ok(())
    }

    /// Values at an arbitrary `z` through the stencil interpolant.
    pub fn slice_at(&self, z: Complex64) -> FamilySlice {
        let w = self.stencil.fit_weights(z);
        let mut kernels = BTreeMap::new();
        for (&key, k) in &self.kernels {
            let bl = self.grids.block_len(k.legs());
            let mut out = vec![Complex64::new(0.0, 0.0); bl];
            for (p, wp) in w.iter().enumerate() {
                if *wp == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let src = &k.values[p * bl..(p + 1) * bl];
                for (o, v) in out.iter_mut().zip(src) {
                    *o += wp * v;
                }
            }
            kernels.insert(key, out);
        }
        FamilySlice {
            grids: self.grids.clone(),
            z,
            kernels,
        }
    }

    /// Stored values at stencil point `p` (no fit).
    pub fn slice_point(&self, p: usize) -> FamilySlice {
        let mut kernels = BTreeMap::new();
        for (&key, k) in &self.kernels {
            let bl = self.grids.block_len(k.legs());
            kernels.insert(key, k.values[p * bl..(p + 1) * bl].to_vec());
        }
        FamilySlice {
            grids: self.grids.clone(),
            z: self.stencil.points()[p],
            kernels,
        }
    }

    /// Writes a slice back as stencil point `p`.
    pub fn set_point(&mut self, p: usize, slice: &FamilySlice) -> Result<(), KernelError> {
        for (&key, vals) in &slice.kernels {
            let bl = self.grids.block_len(key.0 + key.1);
            let k = self.kernel_mut(key.0, key.1)?;
            k.values[p * bl..(p + 1) * bl].copy_from_slice(vals);
        }
        Ok(())
    }

    /// Point evaluation: stencil interpolant in `z`, support-aware linear
    /// interpolation in `r`, multilinear interpolation in the moduli.
    pub fn eval(
        &self,
        m: usize,
        n: usize,
        z: Complex64,
        r: f64,
        moduli: &[f64],
    ) -> Result<Complex64, KernelError> {
        if moduli.len() != m + n {
            return Err(KernelError::OutOfDomain(format!(
                "expected {} moduli, got {}",
                m + n,
                moduli.len()
            )));
        }
        let rad = (z - self.stencil.center).norm();
        if rad > self.stencil.reconstruction_radius() * (1.0 + 1e-12) {
            return Err(KernelError::OutOfDomain(format!(
                "z at distance {rad} from the stencil center exceeds {}",
                self.stencil.reconstruction_radius()
            )));
        }
        let rho = self.grids.rho();
        if !(r >= 0.0 && r <= rho * (1.0 + CUTOFF_RTOL)) {
            return Err(KernelError::OutOfDomain(format!("r = {r} outside [0, rho]")));
        }
        let mut legs = Vec::with_capacity(m + n);
        for &om in moduli {
            if !(om > 0.0 && om <= rho * (1.0 + CUTOFF_RTOL)) {
                return Err(KernelError::OutOfDomain(format!("modulus {om} outside (0, rho]")));
            }
            match self.grids.modes.locate(om) {
                Some(l) => legs.push(l),
                None => return Ok(Complex64::new(0.0, 0.0)),
            }
        }
        self.kernel(m, n)?;
        let mut sub = KernelFamily {
            grids: self.grids.clone(),
            stencil: self.stencil,
            m_max: self.m_max,
            kernels: BTreeMap::new(),
        };
        sub.kernels.insert((m, n), self.kernels[&(m, n)].clone());
        let s = sub.slice_at(z);
        Ok(s.eval(m, n, r, &legs[..m], &legs[m..]))
    }

    pub fn w00_at(&self, z: Complex64, r: f64) -> Result<Complex64, KernelError> {
        self.eval(0, 0, z, r, &[])
    }

    /// Largest absolute entry difference between two families on the same grids.
    pub fn sup_distance(&self, other: &KernelFamily) -> Result<f64, KernelError> {
        if self.grids != other.grids {
            return Err(KernelError::Incompatible("grids differ".into()));
        }
        let mut d: f64 = 0.0;
        let keys: std::collections::BTreeSet<_> =
            self.kernels.keys().chain(other.kernels.keys()).copied().collect();
        for key in keys {
            match (self.kernels.get(&key), other.kernels.get(&key)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.values.iter().zip(&b.values) {
                        d = d.max((x - y).norm());
                    }
                }
                (Some(a), None) | (None, Some(a)) => {
                    for x in &a.values {
                        d = d.max(x.norm());
                    }
                }
                (None, None) => {}
            }
        }
        Ok(d)
    }

    /// `self - other`, kernel by kernel (missing kernels count as zero).
    pub fn difference(&self, other: &KernelFamily) -> Result<KernelFamily, KernelError> {
        if self.grids != other.grids {
            return Err(KernelError::Incompatible("grids differ".into()));
        }
        let mut out = self.clone();
        for (key, k) in out.kernels.iter_mut() {
            if let Some(o) = other.kernels.get(key) {
                for (x, y) in k.values.iter_mut().zip(&o.values) {
                    *x -= y;
                }
            }
        }
        Ok(out)
    }

    /// Multiplies every interaction kernel (`m + n >= 1`) by `lambda`.
    pub fn scale_interaction(&self, lambda: f64) -> KernelFamily {
        let mut out = self.clone();
        for (&(m, n), k) in out.kernels.iter_mut() {
            if m + n >= 1 {
                for v in k.values.iter_mut() {
                    *v *= lambda;
                }
            }
        }
        out
    }

    /// Whether every interaction kernel vanishes identically.
    pub fn interaction_is_zero(&self) -> bool {
        self.kernels
            .iter()
            .filter(|((m, n), _)| m + n >= 1)
            .all(|(_, k)| k.values.iter().all(|v| *v == Complex64::new(0.0, 0.0)))
    }
}

impl FamilySlice {
    pub fn has(&self, m: usize, n: usize) -> bool {
        self.kernels.contains_key(&(m, n))
    }

    /// Value at exact momentum nodes and arbitrary `r` (support-aware).
    #[inline]
    pub fn eval_nodes(&self, m: usize, n: usize, r: f64, created: &[usize], annihilated: &[usize]) -> Complex64 {
        let vals = match self.kernels.get(&(m, n)) {
            Some(v) => v,
            None => return Complex64::new(0.0, 0.0),
        };
        let nodes = &self.grids.modes.nodes;
        let kc: f64 = created.iter().map(|&j| nodes[j]).sum();
        let ka: f64 = annihilated.iter().map(|&j| nodes[j]).sum();
        let nt = self.grids.n_tuples(m + n);
        let mut t = 0;
        let nm = self.grids.n_modes();
        for &j in created.iter().chain(annihilated) {
            t = t * nm + j;
        }
        self.interp_r(vals, nt, t, r, kc.max(ka))
    }

    /// General evaluation with interpolating legs.
    pub fn eval(&self, m: usize, n: usize, r: f64, created: &[Leg], annihilated: &[Leg]) -> Complex64 {
        let vals = match self.kernels.get(&(m, n)) {
            Some(v) => v,
            None => return Complex64::new(0.0, 0.0),
        };
        let kc: f64 = created.iter().map(|l| l.modulus).sum();
        let ka: f64 = annihilated.iter().map(|l| l.modulus).sum();
        let legs: Vec<&Leg> = created.iter().chain(annihilated).collect();
        let nt = self.grids.n_tuples(m + n);
        let nm = self.grids.n_modes();
        let free: Vec<usize> = (0..legs.len()).filter(|&i| !legs[i].is_node()).collect();
        let mut acc = Complex64::new(0.0, 0.0);
        for mask in 0..(1usize << free.len()) {
            let mut weight = 1.0;
            let mut t = 0;
            for (i, leg) in legs.iter().enumerate() {
                let j = match free.iter().position(|&f| f == i) {
                    Some(bit) => {
                        if mask >> bit & 1 == 1 {
                            weight *= leg.t;
                            leg.hi
                        } else {
                            weight *= 1.0 - leg.t;
                            leg.lo
                        }
                    }
                    None => leg.lo,
                };
                t = t * nm + j;
            }
            if weight != 0.0 {
                acc += weight * self.interp_r(vals, nt, t, r, kc.max(ka));
            }
        }
        acc
    }

    /// Linear interpolation in `r` that never reads nodes outside the
    /// support `r + |k| <= rho`; near the boundary it extrapolates from the
    /// two nearest in-support nodes below.
    ///
    /// The node `r = 0` holds the vacuum value only. With a mode sitting
    /// exactly on a cutoff, kernels jump between `r = 0` and `r = 0+`, so on
    /// `(0, r_1)` the right-continuous branch is extrapolated from `r_1, r_2`.
    #[inline]
    fn interp_r(&self, vals: &[Complex64], nt: usize, t: usize, r: f64, k: f64) -> Complex64 {
        let g = &self.grids.r;
        let lim = g.rho * (1.0 + CUTOFF_RTOL);
        if r + k > lim || r < -CUTOFF_RTOL * g.rho {
            return Complex64::new(0.0, 0.0);
        }
        let (a, exact) = g.bracket(r.max(0.0));
        let at = |i: usize| vals[i * nt + t];
        if exact {
            return at(a);
        }
        let nodes = &g.nodes;
        if a == 0 && nodes.len() > 1 && nodes[1] + k <= lim {
            if nodes.len() > 2 && nodes[2] + k <= lim {
                let s = (r - nodes[1]) / (nodes[2] - nodes[1]);
                return at(1) + (at(2) - at(1)) * s;
            }
            return at(1);
        }
        if a + 1 < nodes.len() && nodes[a + 1] + k <= lim {
            let s = (r - nodes[a]) / (nodes[a + 1] - nodes[a]);
            return at(a) + (at(a + 1) - at(a)) * s;
        }
        if a == 0 {
            return at(0);
        }
        let s = (r - nodes[a]) / (nodes[a] - nodes[a - 1]);
        at(a) + (at(a) - at(a - 1)) * s
    }

    pub fn w00(&self, r: f64) -> Complex64 {
        self.eval_nodes(0, 0, r, &[], &[])
    }
}

/// `w_{0,0}(z, r) = r`, everything else zero.
pub fn reference_family(grids: &Grids, stencil: ZStencil, m_max: usize) -> KernelFamily {
    let mut f = KernelFamily::zeros(grids, stencil, m_max);
    f.fill(0, 0, |_, r, _, _| Complex64::new(r, 0.0)).expect("w00 present");
    f
}

/// `w_{0,0}(z, r) = z + r`, everything else zero.
pub fn free_family(grids: &Grids, stencil: ZStencil, m_max: usize) -> KernelFamily {
    let mut f = KernelFamily::zeros(grids, stencil, m_max);
    f.fill(0, 0, |z, r, _, _| z + r).expect("w00 present");
    f
}

/// Free family plus a single-boson coupling `w_{0,1}(k) = g |k|^{-1/2+mu/2}`
/// and its adjoint partner `w_{1,0}(k) = conj(g) |k|^{-1/2+mu/2}`.
pub fn coupling_family(grids: &Grids, stencil: ZStencil, m_max: usize, g: Complex64, mu: f64) -> KernelFamily {
    let mut f = free_family(grids, stencil, m_max.max(1));
    let e = -0.5 + 0.5 * mu;
    f.fill(0, 1, |_, _, _, ka| g * ka[0].powf(e)).expect("w01 present");
    f.fill(1, 0, |_, _, kc, _| g.conj() * kc[0].powf(e)).expect("w10 present");
    canonicalize(&f)
}

/// Shape of a random test family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    /// Sup of `|w| prod |k|^{1/2 - mu/2}` for each interaction kernel.
    pub amplitude: f64,
    /// Relative size of the linear `r` dependence of interaction kernels.
    pub r_slope: f64,
    /// Coefficient `c` of `c r^2 / rho` added to `w_{0,0}`.
    pub w00_curvature: f64,
    /// Make `w_{n,m}` the conjugate transpose partner of `w_{m,n}`.
    pub hermitian: bool,
}

/// Random `z`-independent interaction kernels on top of `w00 = z + r + c r^2/rho`.
pub fn random_family<R: Rng>(
    grids: &Grids,
    stencil: ZStencil,
    m_max: usize,
    mu: f64,
    spec: &RandomSpec,
    rng: &mut R,
) -> KernelFamily {
    let rho = grids.rho();
    let mut f = KernelFamily::zeros(grids, stencil, m_max);
    let c = spec.w00_curvature;
    f.fill(0, 0, |z, r, _, _| z + r + c * r * r / rho).expect("w00");
    let e = -0.5 + 0.5 * mu;
    let nm = grids.n_modes();
    for d in 1..=m_max {
        for m in 0..=d {
            let n = d - m;
            if spec.hermitian && m < n {
                continue;
            }
            let nt = grids.n_tuples(d);
            let base: Vec<Complex64> = (0..nt)
                .map(|_| {
                    let rr = spec.amplitude * rng.gen::<f64>().sqrt();
                    let th = 2.0 * PI * rng.gen::<f64>();
                    Complex64::from_polar(rr, th)
                })
                .collect();
            let slope: Vec<f64> = (0..nt).map(|_| spec.r_slope * (2.0 * rng.gen::<f64>() - 1.0)).collect();
            let grids_c = grids.clone();
            let mut tuple = vec![0usize; d];
            f.fill(m, n, |_, r, kc, ka| {
                for (slot, om) in tuple.iter_mut().zip(kc.iter().chain(ka)) {
                    *slot = ((rho / om).ln() / grids_c.modes.delta).round() as usize;
                }
                let t = tuple.iter().fold(0, |acc, &j| acc * nm + j);
                let w: f64 = kc.iter().chain(ka).map(|om| om.powf(e)).product();
                // |1 + s r/rho| <= 1 keeps the sup normalisation.
                let s = slope[t];
                base[t] * w * (1.0 - s.abs() + s * r / rho)
            })
            .expect("kernel present");
            if spec.hermitian && m != n {
                let src = f.kernels[&(m, n)].clone();
                let dst = f.kernel_mut(n, m).expect("partner present");
                let bl = grids.block_len(d);
                let mut modes = vec![0usize; d];
                for p in 0..5 {
                    for ri in 0..grids.n_r() {
                        for t in 0..nt {
                            grids.decode_tuple(t, d, &mut modes);
                            // swap created and annihilated blocks
                            let mut sw = modes[m..].to_vec();
                            sw.extend_from_slice(&modes[..m]);
                            let ts = grids.encode_tuple(&sw);
                            dst.values[p * bl + ri * nt + ts] = src.values[p * bl + ri * nt + t].conj();
                        }
                    }
                }
            }
        }
    }
    let mut out = f.clone();
    for (&(m, n), k) in f.kernels.iter() {
        if m + n >= 2 {
            *out.kernel_mut(m, n).expect("present") = symmetrize(k, &f.grids);
        }
    }
    canonicalize(&out)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out
}

/// Average over permutations of the created legs and, separately, of the
/// annihilated legs.
pub fn symmetrize(k: &Kernel, grids: &Grids) -> Kernel {
    let (m, n) = (k.m, k.n);
    if m <= 1 && n <= 1 {
        return k.clone();
    }
    let legs = m + n;
    let pm = permutations(m);
    let pn = permutations(n);
    let count = (pm.len() * pn.len()) as f64;
    let nt = grids.n_tuples(legs);
    let blocks = k.values.len() / nt;
    let mut out = Kernel {
        m,
        n,
        values: vec![Complex64::new(0.0, 0.0); k.values.len()],
    };
    let mut modes = vec![0usize; legs];
    let mut perm = vec![0usize; legs];
    let mut targets = Vec::with_capacity(pm.len() * pn.len());
    for t in 0..nt {
        grids.decode_tuple(t, legs, &mut modes);
        targets.clear();
        for a in &pm {
            for b in &pn {
                for i in 0..m {
                    perm[i] = modes[a[i]];
                }
                for i in 0..n {
                    perm[m + i] = modes[m + b[i]];
                }
                targets.push(grids.encode_tuple(&perm));
            }
        }
        for blk in 0..blocks {
            let s: Complex64 = targets.iter().map(|&u| k.values[blk * nt + u]).sum();
            out.values[blk * nt + t] = s / count;
        }
    }
    out
}

/// Zeroes every entry with `r + |k^(m)|_1 > rho` or `r + |k~^(n)|_1 > rho`.
pub fn canonicalize(f: &KernelFamily) -> KernelFamily {
    let mut out = f.clone();
    let g = &f.grids;
    let nodes = &g.modes.nodes;
    for (&(m, n), k) in out.kernels.iter_mut() {
        let legs = m + n;
        let nt = g.n_tuples(legs);
        let mut modes = vec![0usize; legs];
        for t in 0..nt {
            g.decode_tuple(t, legs, &mut modes);
            let kc: f64 = modes[..m].iter().map(|&j| nodes[j]).sum();
            let ka: f64 = modes[m..].iter().map(|&j| nodes[j]).sum();
            for (ri, &r) in g.r.nodes.iter().enumerate() {
                if !g.in_support(r, kc, ka) {
                    for p in 0..5 {
                        k.values[(p * g.n_r() + ri) * nt + t] = Complex64::new(0.0, 0.0);
                    }
                }
            }
        }
    }
    out
}

/// Dilation skeleton: `w'(z, r, k) = e^{alpha(1 - 3(m+n)/2)} w(z, e^{-alpha} r, e^{-alpha} k)`.
/// Momenta contracted below the last node carry no value.
pub fn scale_kernels(f: &KernelFamily, alpha: f64) -> Result<KernelFamily, KernelError> {
    if alpha < 0.0 {
        return Err(KernelError::NegativeAlpha(alpha));
    }
    let mut out = f.clone();
    for p in 0..5 {
        let slice = f.slice_point(p);
        let scaled = scale_slice(&slice, alpha);
        out.set_point(p, &scaled)?;
    }
    Ok(canonicalize(&out))
}

/// Applies the dilation skeleton to a single slice.
pub fn scale_slice(slice: &FamilySlice, alpha: f64) -> FamilySlice {
    let g = &slice.grids;
    let shrink = (-alpha).exp();
    let shift = g.modes.shift_for(alpha);
    let nm = g.n_modes();
    let mut kernels = BTreeMap::new();
    for (&(m, n), vals) in &slice.kernels {
        let legs = m + n;
        let nt = g.n_tuples(legs);
        let pref = (alpha * (1.0 - 1.5 * legs as f64)).exp();
        let mut out = vec![Complex64::new(0.0, 0.0); vals.len()];
        let mut modes = vec![0usize; legs];
        let mut leg_buf: Vec<Leg> = Vec::with_capacity(legs);
        for t in 0..nt {
            g.decode_tuple(t, legs, &mut modes);
            leg_buf.clear();
            let mut inside = true;
            for &j in &modes {
                let leg = match shift {
                    Some(k) => {
                        if j + k < nm {
                            Some(Leg::node(j + k, g.modes.nodes[j + k]))
                        } else {
                            None
                        }
                    }
                    None => g.modes.locate(g.modes.nodes[j] * shrink),
                };
                match leg {
                    Some(l) => leg_buf.push(l),
                    None => {
                        inside = false;
                        break;
                    }
                }
            }
            if !inside {
                continue;
            }
            for (ri, &r) in g.r.nodes.iter().enumerate() {
                let v = slice.eval(m, n, r * shrink, &leg_buf[..m], &leg_buf[m..]);
                out[ri * nt + t] = pref * v;
            }
        }
        kernels.insert((m, n), out);
    }
    FamilySlice {
        grids: g.clone(),
        z: slice.z,
        kernels,
    }
}

/// Derivative in `z` at the stencil center, replicated over the stencil slots.
pub fn d_dz(f: &KernelFamily, m: usize, n: usize) -> Result<Kernel, KernelError> {
    let k = f.kernel(m, n)?;
    let bl = f.grids.block_len(m + n);
    let mut out = Kernel {
        m,
        n,
        values: vec![Complex64::new(0.0, 0.0); k.values.len()],
    };
    for e in 0..bl {
        let v = [
            k.values[e],
            k.values[bl + e],
            k.values[2 * bl + e],
            k.values[3 * bl + e],
            k.values[4 * bl + e],
        ];
        let d = f.stencil.derivative(&v);
        for p in 0..5 {
            out.values[p * bl + e] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelRecord {
    m: usize,
    n: usize,
    /// Row-major `[stencil][r][tuple]`, interleaved `re, im`.
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridRecord {
    rho: f64,
    delta: f64,
    n_modes: usize,
    n_r: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FamilyRecord {
    format: String,
    version: u32,
    grid: GridRecord,
    stencil_center: [f64; 2],
    stencil_h: f64,
    m_max: usize,
    kernels: Vec<KernelRecord>,
}

const FORMAT_NAME: &str = "isorg-kernel-family";
const FORMAT_VERSION: u32 = 1;

impl KernelFamily {
    pub fn to_json(&self) -> String {
        let rec = FamilyRecord {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            grid: GridRecord {
                rho: self.grids.rho(),
                delta: self.grids.modes.delta,
                n_modes: self.grids.n_modes(),
                n_r: self.grids.n_r() - 1,
            },
            stencil_center: [self.stencil.center.re, self.stencil.center.im],
            stencil_h: self.stencil.h,
            m_max: self.m_max,
            kernels: self
                .kernels
                .values()
                .map(|k| KernelRecord {
                    m: k.m,
                    n: k.n,
                    values: k.values.iter().flat_map(|c| [c.re, c.im]).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("family serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, KernelError> {
        let rec: FamilyRecord = serde_json::from_str(s).map_err(|e| KernelError::Format(e.to_string()))?;
        if rec.format != FORMAT_NAME || rec.version != FORMAT_VERSION {
            return Err(KernelError::Format(format!(
                "unsupported header {} v{}",
                rec.format, rec.version
            )));
        }
        let grids = Grids::new(rec.grid.rho, rec.grid.delta, rec.grid.n_modes, rec.grid.n_r)?;
        let stencil = ZStencil::new(Complex64::new(rec.stencil_center[0], rec.stencil_center[1]), rec.stencil_h)?;
        let mut f = KernelFamily::zeros(&grids, stencil, rec.m_max);
        for k in rec.kernels {
            let expect = 2 * 5 * grids.block_len(k.m + k.n);
            if k.values.len() != expect {
                return Err(KernelError::Format(format!(
                    "kernel ({},{}) has {} numbers, expected {expect}",
                    k.m,
                    k.n,
                    k.values.len()
                )));
            }
            let values = k.values.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
            f.kernels.insert((k.m, k.n), Kernel { m: k.m, n: k.n, values });
        }
        if !f.kernels.contains_key(&(0, 0)) {
            return Err(KernelError::Format("w00 missing".into()));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids() -> Grids {
        Grids::new(1.0, 0.5, 6, 8).unwrap()
    }

    fn stencil() -> ZStencil {
        ZStencil::new(Complex64::new(0.0, 0.0), 0.05).unwrap()
    }

    #[test]
    fn weights_reproduce_ball_volume_up_to_tail() {
        let g = RadialGrid::new(0.7, 0.4, 40).unwrap();
        let total: f64 = g.weights.iter().sum();
        let ball = 4.0 / 3.0 * PI * 0.7f64.powi(3);
        assert!((total - ball * (1.0 - (-3.0 * 0.4 * 40.0f64).exp())).abs() < 1e-14);
        assert!((total - ball).abs() / ball < 1e-9);
    }

    #[test]
    fn dilation_maps_node_to_node() {
        let g = grids();
        assert_eq!(g.modes.shift_for(1.0), Some(2));
        assert_eq!(g.modes.shift_for(0.7), None);
        let l = g.modes.locate(g.modes.nodes[1] * (-1.0f64).exp()).unwrap();
        assert_eq!((l.lo, l.hi), (3, 3));
    }

    #[test]
    fn fit_exact_on_quartics() {
        let s = ZStencil::new(Complex64::new(0.01, -0.02), 0.03).unwrap();
        let f = |z: Complex64| {
            Complex64::new(0.3, 0.1) + z * 2.0 + z * z * Complex64::new(-1.0, 4.0) + z.powi(3) * 5.0
                - z.powi(4) * Complex64::new(0.0, 7.0)
        };
        let pts = s.points();
        let v = [f(pts[0]), f(pts[1]), f(pts[2]), f(pts[3]), f(pts[4])];
        let z = Complex64::new(0.02, 0.005);
        assert!((s.fit(&v, z) - f(z)).norm() < 1e-14);
        let d = s.derivative(&v);
        let c = s.center;
        let exact = Complex64::new(2.0, 0.0) + c * 2.0 * Complex64::new(-1.0, 4.0) + c * c * 15.0
            - c.powi(3) * Complex64::new(0.0, 28.0);
        // the central difference carries the h^2 f'''/6 term of the cubic
        assert!((d - exact).norm() < 5.0 * s.h * s.h + 1e-12);
        for (p, z) in pts.iter().enumerate() {
            assert!((s.fit(&v, *z) - v[p]).norm() < 1e-15);
        }
    }

    #[test]
    fn eval_free_family() {
        let g = grids();
        let f = free_family(&g, stencil(), 2);
        let z = Complex64::new(0.001, 0.0);
        assert!((f.w00_at(z, 0.0).unwrap() - z).norm() < 1e-15);
        let v = f.w00_at(Complex64::new(0.01, 0.02), 0.37).unwrap();
        assert!((v - Complex64::new(0.38, 0.02)).norm() < 1e-14);
    }

    #[test]
    fn symmetrize_two_leg_average() {
        let g = Grids::new(1.0, 0.5, 2, 1).unwrap();
        let mut f = KernelFamily::zeros(&g, stencil(), 2);
        f.fill(2, 0, |_, _, kc, _| Complex64::new(kc[0] + 10.0 * kc[1], 0.0)).unwrap();
        let s = symmetrize(&f.kernels[&(2, 0)], &g);
        let (a, b) = (g.modes.nodes[0], g.modes.nodes[1]);
        let nt = 4;
        // tuple (0,1) has index 1
        let expect = ((a + 10.0 * b) + (b + 10.0 * a)) / 2.0;
        assert!((s.values[nt + 1].re - expect).abs() < 1e-14);
        let again = symmetrize(&s, &g);
        assert_eq!(again, s);
    }

    #[test]
    fn canonicalize_zeroes_outside_support() {
        let g = grids();
        let f = coupling_family(&g, stencil(), 2, Complex64::new(0.1, 0.0), 0.5);
        let k = &f.kernels[&(0, 1)];
        let nt = g.n_tuples(1);
        // r = rho (last node) with any momentum is outside
        let ri = g.n_r() - 1;
        assert_eq!(k.values[ri * nt], Complex64::new(0.0, 0.0));
        assert_ne!(k.values[nt + 3], Complex64::new(0.0, 0.0));
        assert_eq!(canonicalize(&f), f);
    }

    #[test]
    fn scale_single_leg_constant() {
        let g = grids();
        let mut f = KernelFamily::zeros(&g, stencil(), 1);
        f.fill(1, 0, |_, _, _, _| Complex64::new(2.0, 0.0)).unwrap();
        let f = canonicalize(&f);
        let s = scale_kernels(&f, 0.5).unwrap();
        let v = s.eval(1, 0, Complex64::new(0.0, 0.0), 0.0, &[g.modes.nodes[2]]).unwrap();
        assert!((v.re - 2.0 * (-0.25f64).exp()).abs() < 1e-14);
        // the last node has no preimage on the grid
        let v = s.eval(1, 0, Complex64::new(0.0, 0.0), 0.0, &[g.modes.nodes[5]]).unwrap();
        assert_eq!(v, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn json_round_trip() {
        let g = grids();
        let f = coupling_family(&g, stencil(), 2, Complex64::new(0.1, 0.02), 0.5);
        let back = KernelFamily::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
    }
}
