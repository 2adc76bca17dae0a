//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them).

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use isorg::flow::{compare_states, eigenvalue_estimate, flow_along, flow_to, FlowConfig, FlowDecomposition, FlowState};
use isorg::fock_oracle::{
    build_h, build_interaction_slice, build_w_mn, eigen_bottom, min_singular, operator_norm, schur_feshbach,
    semigroup_residual, submatrix, FockBasis,
};
use isorg::kernels::{coupling_family, free_family, random_family, Grids, KernelFamily, RandomSpec};
use isorg::params::{epsilon_basis, parameter_caps, q_inverse_bound, EpsilonTriple, ModelConstants};
use isorg::rgmap::{q_inverse, renormalize, RgOptions};
use isorg::seminorms::{norm_i, norm_inf_0};
use isorg::wick::{compare_with_oracle, WickOptions};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lab_cfg(c: ModelConstants) -> FlowConfig {
    FlowConfig {
        constants: c,
        rg: RgOptions::default(),
        eps0: None,
        oracle_n_max: None,
    }
}

/// Couplings of the weak-coupling flows.
const COUPLINGS: [f64; 3] = [0.001, 0.003, 0.01];

/// Lab flows of the coupling preset to `s = 10 alpha_-` with `alpha = delta`,
/// on 12 modes so the last step still sees two modes of the original grid.
fn coupling_flows() -> &'static Vec<(f64, KernelFamily, FlowState)> {
    static FLOWS: OnceLock<Vec<(f64, KernelFamily, FlowState)>> = OnceLock::new();
    FLOWS.get_or_init(|| {
        let c = lab();
        let grids = Grids::new(c.rho, 0.5, 12, 14).unwrap();
        COUPLINGS
            .iter()
            .map(|&g| {
                let f0 = coupling_family(&grids, stencil(0.0, 0.05), 2, Complex64::new(g, 0.0), c.mu);
                let st = flow_to(&f0, 10.0 * c.alpha_minus, &lab_cfg(c)).expect("coupling flow");
                (g, f0, st)
            })
            .collect()
    })
}

#[test]
fn criterion_01_oracle_isospectrality() {
    let t0 = Instant::now();
    let c = lab();
    let alpha = 0.5;
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let basis = FockBasis::new(&grids.modes, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut agree, mut total, mut singular) = (0, 0, 0);
    let mut skipped = 0;
    for _ in 0..50 {
        let f = random_admissible(&grids, stencil(0.0, 0.25), &c, alpha, 2e-5, &mut rng);
        // H(w(z)) = H(w(0)) + z on Ran chi_0; probe at -lambda for its
        // eigenvalues inside the disc, then at random points of the disc.
        let radius = 0.5 * c.rho * (-alpha as f64).exp();
        let h0 = build_h(&f, ZERO, &basis);
        let mut ev: Vec<Complex64> = h0.block().schur().eigenvalues().unwrap().iter().copied().collect();
        ev.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
        let mut probes: Vec<Complex64> = ev.iter().filter(|l| l.norm() < radius).take(10).map(|l| -l).collect();
        while probes.len() < 20 {
            let r = radius * rng.gen::<f64>().sqrt();
            probes.push(Complex64::from_polar(r, 2.0 * PI * rng.gen::<f64>()));
        }
        for z in probes {
            let h = build_h(&f, z, &basis);
            let Ok(fh) = schur_feshbach(&h, &basis, alpha) else {
                skipped += 1;
                continue;
            };
            let a = min_singular(&h) < 1e-8;
            let b = min_singular(&fh) < 1e-8;
            total += 1;
            singular += usize::from(a);
            agree += usize::from(a == b);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = agree == total && total == 1000 && secs < 60.0;
    verdict(
        1,
        "oracle isospectrality",
        pass,
        &format!("{agree}/{total} agree ({singular} singular probes, {skipped} outside the Feshbach domain), {secs:.1} s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_matrix_semigroup() {
    let c = lab();
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let basis = FockBasis::new(&grids.modes, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for _ in 0..20 {
        let f = random_admissible(&grids, stencil(0.0, 0.25), &c, 0.5, 2e-5, &mut rng);
        let z = Complex64::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let h = build_h(&f, z, &basis);
        for (a, b) in [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5)] {
            let res = semigroup_residual(&h, &basis, a, b).unwrap();
            let rel = res / h.norm();
            worst = worst.max(rel);
            pass &= rel <= 1e-10;
        }
    }
    verdict(2, "matrix semigroup", pass, &format!("worst residual / |H| = {worst:.3e} (tol 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_03_wick_vs_oracle() {
    let c = lab();
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for g in [0.002, 0.005, 0.01] {
        let f = coupling_family(&grids, stencil(0.0, 0.05), 2, Complex64::new(g, 0.0), c.mu);
        for z in [ZERO, Complex64::new(0.03, 0.02)] {
            let cmp = compare_with_oracle(&f, z, 0.5, WickOptions::default(), 4).unwrap();
            let ok = cmp.q < 1.0 && cmp.residual <= cmp.bound;
            pass &= ok;
            lines.push(format!("g={g} z={z}: {:.2e} <= {:.2e} (q={:.3})", cmp.residual, cmp.bound, cmp.q));
        }
    }
    verdict(3, "wick vs oracle", pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_04_free_fixed_point() {
    let c = lab();
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let f = free_family(&grids, stencil(0.0, 0.05), 2);
    let mut worst: f64 = 0.0;
    for alpha in [0.5, 1.0, c.alpha_minus] {
        let (g, _) = renormalize(&f, alpha, &c, &RgOptions::default()).unwrap();
        worst = worst.max(g.sup_distance(&f).unwrap());
    }
    let pass = worst <= 1e-12;
    verdict(4, "free fixed point", pass, &format!("grid-sup change {worst:.3e} (tol 1e-12)"));
    assert!(pass);
}

#[test]
fn criterion_05_normalization() {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut recentered = false;
    for (_, _, st) in coupling_flows() {
        for r in &st.reports {
            steps += 1;
            worst = r.normalization_defects.iter().copied().fold(worst, f64::max);
            recentered |= r.recentered.iter().any(|d| *d > 0.0);
        }
    }
    let pass = worst <= 1e-10 && !recentered && steps == 30;
    verdict(5, "normalization", pass, &format!("max |w00(z,0) - z| = {worst:.3e} over {steps} steps (tol 1e-10)"));
    assert!(pass);
}

/// Least-squares slope of `ln y` against `x`.
fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_06_contraction() {
    let c = lab();
    let cap = -c.mu / 4.0 + 0.05;
    let mut pass = true;
    let mut lines = Vec::new();
    for (g, _, st) in coupling_flows() {
        let pts: Vec<(f64, f64)> = st
            .trajectory
            .iter()
            .filter(|p| p.s >= c.alpha_minus - 1e-9 && p.s <= 10.0 * c.alpha_minus + 1e-9)
            .map(|p| (p.s, p.seminorms.i_xi))
            .collect();
        let slope = log_slope(&pts);
        pass &= pts.len() == 10 && slope <= cap;
        lines.push(format!("g={g}: slope {slope:.3}"));
    }

    // Strict mode: the flowed norm_I against the ledger at every step.
    let cs = strict();
    let grids = Grids::new(cs.rho, 2.0, 12, 12).unwrap();
    let st = stencil(0.0, cs.rho / 100.0);
    let eps0 = epsilon_basis(&cs);
    let unit = coupling_family(&grids, st, 2, Complex64::new(1.0, 0.0), cs.mu);
    let g = 0.5 * eps0.eps_i / norm_i(&unit, cs.mu, cs.xi).unwrap();
    let f0 = coupling_family(&grids, st, 2, Complex64::new(g, 0.0), cs.mu);
    let cfg = FlowConfig {
        constants: cs,
        rg: RgOptions::default(),
        eps0: Some(eps0),
        oracle_n_max: None,
    };
    let d = FlowDecomposition::new(vec![8.0, 8.0, 8.0], 0.0, &cs).unwrap();
    match flow_along(&f0, &d, &cfg) {
        Ok(flow) => {
            let mut worst: f64 = 0.0;
            for p in &flow.trajectory {
                let l = p.ledger.expect("ledger tracked").eps_i;
                worst = worst.max(p.seminorms.i_xi / l);
            }
            pass &= flow.trajectory.len() == 4 && worst <= 1.0;
            lines.push(format!("strict g={g:.2e}: max norm_I / ledger eps_I = {worst:.3e} over {} steps", flow.steps.len()));
        }
        Err(e) => {
            pass = false;
            lines.push(format!("strict flow failed: {e}"));
        }
    }
    verdict(6, "contraction", pass, &format!("{} (cap {cap})", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_07_q_inverse_bound() {
    let c = lab();
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let f = coupling_family(&grids, stencil(0.0, 0.25), 2, Complex64::new(0.01, 0.0), c.mu);
    let eps = measured(&f, &c);
    let opts = RgOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_ratio, mut max_iter, mut failures) = (0.0f64, 0usize, Vec::new());
    for _ in 0..100 {
        let alpha = rng.gen_range(c.alpha_minus..=c.alpha_plus);
        let r = 0.45 * c.rho * rng.gen::<f64>().sqrt();
        let zeta = Complex64::from_polar(r, 2.0 * PI * rng.gen::<f64>());
        match q_inverse(&f, zeta, alpha, &c, &opts) {
            Ok(res) => {
                let dev = (res.zeta - (-alpha).exp() * zeta).norm();
                let bound = q_inverse_bound(&eps, alpha, &c);
                worst_ratio = worst_ratio.max(dev / bound);
                max_iter = max_iter.max(res.iterations);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let pass = failures.is_empty() && worst_ratio <= 1.0 && max_iter <= 25;
    verdict(
        7,
        "Q inverse bound",
        pass,
        &format!("worst deviation / bound = {worst_ratio:.3}, max iterations {max_iter}, {} failures", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

/// The ledger triple by one-step updates in plain f64:
/// `Z <- (Z + 1e-7 e_l) / (1 - 1e-12 e_l)`, `F <- F + 1e-7 e_l` with
/// `e_l = e^{-|alpha|_l / 2}`, and `I = I_0 e^{-|alpha|_ell / 4}`.
fn ledger_by_steps(mu: f64, alphas: &[f64], eps0: &EpsilonTriple, ell: usize) -> EpsilonTriple {
    let (mut z, mut f, mut cum) = (1.0, eps0.eps_f, 0.0);
    for a in alphas.iter().take(ell) {
        let e = (-cum / 2.0f64).exp();
        z = (z + 1e-7 * e) / (1.0 - 1e-12 * e);
        f += 1e-7 * e;
        cum += mu * a;
    }
    EpsilonTriple {
        eps_i: eps0.eps_i * (-cum / 4.0f64).exp(),
        eps_z: z,
        eps_f: f,
    }
}

#[test]
fn criterion_08_ledger_reproduction() {
    let c = strict();
    let eps0 = epsilon_basis(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    let mut bad = Vec::new();
    for _ in 0..20 {
        let alphas: Vec<f64> = (0..30).map(|_| rng.gen_range(c.alpha_minus..=c.alpha_plus)).collect();
        for ell in 0..=30 {
            let beta = rng.gen_range(c.alpha_minus..=c.alpha_plus);
            let caps = parameter_caps(&c, &alphas, &eps0, ell, beta).unwrap();
            let plain = ledger_by_steps(c.mu, &alphas, &eps0, ell);
            let agree = (plain.eps_i / caps.eps.eps_i - 1.0).abs() < 1e-10
                && (plain.eps_z - caps.eps.eps_z).abs() < 1e-12
                && (plain.eps_f - caps.eps.eps_f).abs() < 1e-12;
            checked += 1;
            let ok = caps.g <= caps.g_cap
                && caps.a_inf <= caps.a_inf_cap
                && caps.a_0 <= caps.a_0_cap
                && caps.eps.eps_z <= 2.0
                && agree;
            if !ok {
                bad.push((ell, beta, caps));
            }
        }
    }
    let pass = bad.is_empty();
    verdict(8, "ledger reproduction", pass, &format!("{checked} (sequence, l) pairs, {} violations", bad.len()));
    assert!(pass, "{:?}", bad.first());
}

/// Random `z`-dependent kernel `(m, n)` with `norm_inf_0` of order `amp`.
fn random_kernel(grids: &Grids, m: usize, n: usize, mu: f64, amp: f64, rng: &mut ChaCha8Rng) -> KernelFamily {
    let mut f = KernelFamily::zeros(grids, stencil(0.0, 0.25), m + n);
    let nt = grids.n_tuples(m + n);
    let vals: Vec<(Complex64, Complex64, f64)> = (0..nt)
        .map(|_| {
            let a = Complex64::from_polar(amp * rng.gen::<f64>(), 2.0 * PI * rng.gen::<f64>());
            let b = Complex64::from_polar(0.2 * amp * rng.gen::<f64>(), 2.0 * PI * rng.gen::<f64>());
            (a, b, rng.gen_range(-0.5..0.5))
        })
        .collect();
    let rho = grids.rho();
    let delta = grids.modes.delta;
    let nm = grids.n_modes();
    let e = -0.5 + 0.5 * mu;
    f.fill(m, n, |z, r, kc, ka| {
        let t = kc.iter().chain(ka).fold(0, |acc, om| acc * nm + ((rho / om).ln() / delta).round() as usize);
        let (a, b, s) = vals[t];
        let w: f64 = kc.iter().chain(ka).map(|om| om.powf(e)).product();
        (a + b * z / rho) * w * (1.0 + s * r / rho)
    })
    .unwrap();
    f
}

#[test]
fn criterion_09_norm_bounds() {
    // 4 pi rho^{2 + mu} < 1 is needed for the family bound.
    let c = ModelConstants::lab(0.2, 0.5, 0.2, 0.5, 1.0).unwrap().0;
    let grids = Grids::new(c.rho, 0.5, 8, 10).unwrap();
    let basis = FockBasis::new(&grids.modes, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let chi0 = basis.chi_mask(0.0);
    let all: Vec<usize> = (0..basis.dim()).filter(|&i| chi0[i]).collect();
    let unit = (4.0 * PI * c.rho.powf(2.0 + c.mu)).sqrt();
    let mut counts: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    let mut record = |name: &'static str, lhs: f64, rhs: f64| {
        let e = counts.entry(name).or_insert((0, 0, 0.0));
        e.0 += 1;
        e.1 += usize::from(lhs > rhs * (1.0 + 1e-12));
        e.2 = e.2.max(lhs / rhs);
    };
    for m in 0..=2usize {
        for n in 0..=2usize {
            if m + n == 0 {
                continue;
            }
            for _ in 0..100 {
                let f = random_kernel(&grids, m, n, c.mu, 1.0, &mut rng);
                let k = f.kernel(m, n).unwrap();
                let sup = norm_inf_0(k, &grids, c.mu);
                let base = sup * unit.powi((m + n) as i32);
                let w = build_w_mn(&f, m, n, ZERO, &basis).unwrap().mat;
                record("chi0 W chi0", operator_norm(&submatrix(&w, &all, &all)), base);
                for alpha in [0.5, 1.0] {
                    let chi = basis.chi_mask(alpha);
                    let bar: Vec<usize> = all.iter().copied().filter(|&i| !chi[i]).collect();
                    if bar.is_empty() {
                        continue;
                    }
                    if m >= 1 && n >= 1 {
                        record("chib W chib", operator_norm(&submatrix(&w, &bar, &bar)), base * alpha);
                    }
                    if n >= 1 {
                        record("chi0 W chib", operator_norm(&submatrix(&w, &all, &bar)), base * alpha.sqrt());
                    }
                    if m >= 1 {
                        record("chib W chi0", operator_norm(&submatrix(&w, &bar, &all)), base * alpha.sqrt());
                    }
                }
            }
        }
    }
    for _ in 0..100 {
        let spec = RandomSpec {
            amplitude: rng.gen_range(0.1..1.0),
            r_slope: rng.gen_range(0.0..0.5),
            w00_curvature: 0.0,
            hermitian: rng.gen_bool(0.5),
        };
        let f = random_family(&grids, stencil(0.0, 0.25), 2, c.mu, &spec, &mut rng);
        let w = build_interaction_slice(&f.slice_at(ZERO), &basis).norm();
        record("W vs norm_I", w, c.xi * norm_i(&f, c.mu, c.xi).unwrap());
    }
    let pass = counts.values().all(|v| v.1 == 0);
    let detail: Vec<String> = counts
        .iter()
        .map(|(k, v)| format!("{k}: {} checks, {} violations, max ratio {:.3}", v.0, v.1, v.2))
        .collect();
    verdict(9, "norm bounds", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_10_eigenvalue_estimate() {
    let c = lab();
    let cfg = lab_cfg(c);
    let mut pass = true;
    let mut lines = Vec::new();
    for (g, f0, st) in coupling_flows() {
        let est = eigenvalue_estimate(st, &cfg, 0.1).unwrap();
        let basis = FockBasis::new(&f0.grids.modes, 3);
        let oracle = eigen_bottom(&build_h(f0, ZERO, &basis)).unwrap();
        let dev = (est.value - oracle).norm();
        let tol = est.error_bar.max(1e-6);
        let mut cauchy = true;
        for w in st.trajectory.windows(2) {
            cauchy &= (w[1].eigenvalue_estimate - w[0].eigenvalue_estimate).norm() <= w[0].error_bar;
        }
        pass &= dev <= tol && cauchy && (est.s - 10.0 * c.alpha_minus).abs() < 1e-9;
        lines.push(format!(
            "g={g}: estimate {:.6e} oracle {:.6e} dev {dev:.2e} tol {tol:.2e} cauchy {cauchy}",
            est.value.re, oracle.re
        ));
    }
    verdict(10, "eigenvalue estimate", pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_11_decomposition_independence() {
    let c = lab();
    let cfg = lab_cfg(c);
    let grids = Grids::new(c.rho, 0.5, 12, 14).unwrap();
    let f0 = coupling_family(&grids, stencil(0.0, 0.05), 2, Complex64::new(0.002, 0.0), c.mu);
    let mut pass = true;
    let mut lines = Vec::new();
    for (a, b) in [(vec![0.5, 0.5], vec![1.0]), (vec![0.5, 1.0], vec![1.0, 0.5])] {
        let da = FlowDecomposition::new(a.clone(), 0.0, &c).unwrap();
        let db = FlowDecomposition::new(b.clone(), 0.0, &c).unwrap();
        let sa = flow_along(&f0, &da, &cfg).unwrap();
        let sb = flow_along(&f0, &db, &cfg).unwrap();
        let rep = compare_states(&sa, &sb, None).unwrap();
        pass &= rep.family_distance <= 1e-8 && rep.e_distance <= 1e-10;
        lines.push(format!(
            "{a:?} vs {b:?}: family {:.2e}, E {:.2e}",
            rep.family_distance, rep.e_distance
        ));
    }
    verdict(11, "decomposition independence", pass, &format!("{} (tol 1e-8, 1e-10)", lines.join("; ")));
    assert!(pass);
}
