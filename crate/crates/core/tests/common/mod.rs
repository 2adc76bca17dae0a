//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use isorg::kernels::{random_family, Grids, KernelFamily, RandomSpec, ZStencil};
use isorg::params::{is_admissible, EpsilonTriple, ModelConstants};
use isorg::seminorms::{norm_f, norm_i, norm_z};
use num_complex::Complex64;
use rand::Rng;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Lab constants: `rho = 1`, `mu = 1/2`, `xi = 0.2`, `alpha in [0.5, 1]`.
pub fn lab() -> ModelConstants {
    ModelConstants::lab(1.0, 0.5, 0.2, 0.5, 1.0).unwrap().0
}

/// Strict constants: `rho = 1/144`, `mu = 3/4`, `xi = 0.2`, `alpha in [8, 16]`.
pub fn strict() -> ModelConstants {
    ModelConstants::strict(0.75, 0.2, 8.0, 16.0).unwrap()
}

pub fn stencil(center: f64, h: f64) -> ZStencil {
    ZStencil::new(Complex64::new(center, 0.0), h).unwrap()
}

pub fn measured(f: &KernelFamily, c: &ModelConstants) -> EpsilonTriple {
    EpsilonTriple {
        eps_i: norm_i(f, c.mu, c.xi).unwrap(),
        eps_z: norm_z(f),
        eps_f: norm_f(f),
    }
}

/// A random family whose measured seminorm triple is admissible for `alpha`.
pub fn random_admissible<R: Rng>(
    grids: &Grids,
    st: ZStencil,
    c: &ModelConstants,
    alpha: f64,
    amplitude: f64,
    rng: &mut R,
) -> KernelFamily {
    for _ in 0..100 {
        let spec = RandomSpec {
            amplitude: amplitude * rng.gen_range(0.2..1.0),
            r_slope: rng.gen_range(0.0..0.5),
            w00_curvature: rng.gen_range(0.0..0.04),
            hermitian: rng.gen_bool(0.5),
        };
        let f = random_family(grids, st, 2, c.mu, &spec, rng);
        if is_admissible(&measured(&f, c), alpha, c).admissible {
            return f;
        }
    }
    panic!("no admissible random family at amplitude {amplitude}");
}

/// One line of the acceptance log.
pub fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
