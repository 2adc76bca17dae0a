//! Batch front end: run configuration, the `ledger`, `flow`, `oracle` and
//! `spectrum` commands, and their JSON/CSV artifacts.
//!
//! Precedence of settings: built-in defaults, then the TOML file given with
//! `--config`, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::flow::{eigenvalue_estimate, flow_along, trajectory_csv, FlowConfig, FlowDecomposition, FlowError};
use crate::fock_oracle::{build_h, eigen_bottom, semigroup_residual, FockBasis};
use crate::kernels::{coupling_family, free_family, random_family, Grids, KernelFamily, RandomSpec, ZStencil};
use crate::params::{
    epsilon_basis, epsilon_sequence_unchecked, parameter_caps, EpsilonTriple, LedgerWarning, ModelConstants, STRICT_RHO,
};
use crate::rgmap::{QEngine, RgOptions};
use crate::seminorms::{norm_f, norm_i, norm_z};
use crate::wick::{compare_with_oracle, WickOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    /// `ledger`: some step is not admissible.
    pub const NOT_ADMISSIBLE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const GATE: i32 = 3;
    pub const FIXED_POINT: i32 = 4;
    pub const NORMALIZATION: i32 = 5;
    /// A verification command measured a residual above its tolerance.
    pub const TOLERANCE: i32 = 6;
}

/// Largest Fock dimension for which `spectrum` diagonalizes the oracle.
pub const ORACLE_DIM_LIMIT: usize = 2500;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    pub rho: f64,
    pub mu: f64,
    pub xi: f64,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub strict: bool,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig {
            rho: 1.0,
            mu: 0.5,
            xi: 0.2,
            alpha_minus: 0.5,
            alpha_plus: 1.0,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_modes: usize,
    pub delta: f64,
    /// Number of geometric `r` nodes (the node `r = 0` is added).
    pub n_r: usize,
    /// Photon-number cutoff of the matrix oracle.
    pub n_max: usize,
    pub m_max: usize,
    pub l_max: usize,
    pub p_max: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_modes: 8,
            delta: 0.5,
            n_r: 12,
            n_max: 4,
            m_max: 2,
            l_max: 3,
            p_max: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Free,
    Coupling,
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub preset: Preset,
    /// Complex coupling `[re, im]` of the coupling preset.
    pub coupling: [f64; 2],
    /// Interaction amplitude of the random preset.
    pub random_amplitude: f64,
    /// Checkpoint file of the file preset.
    pub path: Option<PathBuf>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            preset: Preset::Coupling,
            coupling: [0.003, 0.0],
            random_amplitude: 1e-3,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StencilConfig {
    pub center: [f64; 2],
    pub h: f64,
}

impl Default for StencilConfig {
    fn default() -> Self {
        StencilConfig {
            center: [0.0, 0.0],
            h: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// Target `s`; decomposed greedily unless `steps` is given.
    pub s: f64,
    /// Explicit step sizes; the last one may be a short final step.
    pub steps: Option<Vec<f64>>,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection { s: 1.0, steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedgerConfig {
    /// Step sequence for the `ledger` command.
    pub sequence: Vec<f64>,
    /// Basis triple; missing entries take the induction-basis caps in
    /// strict mode and the measured seminorms of the initial family otherwise.
    pub eps_i: Option<f64>,
    pub eps_z: Option<f64>,
    pub eps_f: Option<f64>,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            sequence: vec![0.5, 0.5, 0.5],
            eps_i: None,
            eps_z: None,
            eps_f: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub tol_fp: f64,
    pub max_iter: usize,
    pub tol_norm: f64,
    pub recenter_limit: f64,
    /// Largest `norm_W` for which an eigenvalue estimate is reported.
    pub estimate_threshold: f64,
    /// Matrix semigroup tolerance relative to `|H|`.
    pub semigroup_rel: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            tol_fp: crate::rgmap::TOL_FP,
            max_iter: crate::rgmap::MAX_ITER,
            tol_norm: crate::rgmap::TOL_NORM,
            recenter_limit: crate::rgmap::RECENTER_LIMIT,
            estimate_threshold: 0.1,
            semigroup_rel: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("isorg-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub constants: ConstantsConfig,
    pub grids: GridConfig,
    pub family: FamilyConfig,
    pub stencil: StencilConfig,
    pub flow: FlowSection,
    pub ledger: LedgerConfig,
    pub tolerances: ToleranceConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Strict-mode defaults: `rho = 1/144`, `mu = 3/4`, `alpha in [8, 16]`.
    pub fn strict_default() -> Self {
        RunConfig {
            constants: ConstantsConfig {
                rho: STRICT_RHO,
                mu: 0.75,
                xi: 0.2,
                alpha_minus: 8.0,
                alpha_plus: 16.0,
                strict: true,
            },
            grids: GridConfig {
                delta: 2.0,
                ..GridConfig::default()
            },
            flow: FlowSection { s: 16.0, steps: None },
            ledger: LedgerConfig {
                sequence: vec![8.0, 12.0, 16.0, 8.0],
                ..LedgerConfig::default()
            },
            family: FamilyConfig {
                preset: Preset::Free,
                ..FamilyConfig::default()
            },
            stencil: StencilConfig {
                center: [0.0, 0.0],
                h: STRICT_RHO / 100.0,
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new("config", e.to_string()))
    }

    /// Parses `text` as overrides of `base`: tables merge key by key.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self, ConfigError> {
        let over: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("config", e.to_string()))?;
        let mut merged = toml::Table::try_from(base).expect("config serializes");
        merge_tables(&mut merged, over);
        RunConfig::deserialize(toml::Value::Table(merged)).map_err(|e| ConfigError::new("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-field checks; the first failing field is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grids;
        if g.n_modes < 2 {
            return Err(ConfigError::new("grids.n_modes", "must be >= 2"));
        }
        if g.n_r < 2 {
            return Err(ConfigError::new("grids.n_r", "must be >= 2"));
        }
        if !(g.delta > 0.0 && g.delta.is_finite()) {
            return Err(ConfigError::new("grids.delta", "must be > 0"));
        }
        if g.m_max < 1 {
            return Err(ConfigError::new("grids.m_max", "must be >= 1"));
        }
        if g.n_max < g.m_max {
            return Err(ConfigError::new("grids.n_max", "must be >= grids.m_max"));
        }
        if g.l_max < 2 {
            return Err(ConfigError::new("grids.l_max", "must be >= 2"));
        }
        if g.p_max < 1 {
            return Err(ConfigError::new("grids.p_max", "must be >= 1"));
        }
        if !(self.stencil.h > 0.0) {
            return Err(ConfigError::new("stencil.h", "must be > 0"));
        }
        if self.stencil.center.iter().any(|x| !x.is_finite()) {
            return Err(ConfigError::new("stencil.center", "must be finite"));
        }
        if !(self.flow.s >= 0.0 && self.flow.s.is_finite()) {
            return Err(ConfigError::new("flow.s", "must be finite and >= 0"));
        }
        if let Some(steps) = &self.flow.steps {
            if steps.iter().any(|a| !(*a > 0.0)) {
                return Err(ConfigError::new("flow.steps", "every step must be > 0"));
            }
        }
        if self.family.preset == Preset::File && self.family.path.is_none() {
            return Err(ConfigError::new("family.path", "required by preset = \"file\""));
        }
        if self.family.coupling.iter().any(|x| !x.is_finite()) {
            return Err(ConfigError::new("family.coupling", "must be finite"));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.tol_fp", t.tol_fp),
            ("tolerances.tol_norm", t.tol_norm),
            ("tolerances.recenter_limit", t.recenter_limit),
            ("tolerances.estimate_threshold", t.estimate_threshold),
            ("tolerances.semigroup_rel", t.semigroup_rel),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::new(name, "must be > 0"));
            }
        }
        if t.max_iter == 0 {
            return Err(ConfigError::new("tolerances.max_iter", "must be >= 1"));
        }
        for (name, v) in [
            ("ledger.eps_i", self.ledger.eps_i),
            ("ledger.eps_z", self.ledger.eps_z),
            ("ledger.eps_f", self.ledger.eps_f),
        ] {
            if let Some(x) = v {
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(ConfigError::new(name, "must be finite and >= 0"));
                }
            }
        }
        self.constants()?;
        Ok(())
    }

    pub fn constants(&self) -> Result<(ModelConstants, Vec<LedgerWarning>), ConfigError> {
        let k = &self.constants;
        ModelConstants::new(k.rho, k.mu, k.xi, k.alpha_minus, k.alpha_plus, k.strict)
            .map_err(|e| ConfigError::new("constants", e.to_string()))
    }

    pub fn grids(&self) -> Result<Grids, ConfigError> {
        let g = &self.grids;
        Grids::new(self.constants.rho, g.delta, g.n_modes, g.n_r).map_err(|e| ConfigError::new("grids", e.to_string()))
    }

    pub fn stencil(&self) -> Result<ZStencil, ConfigError> {
        let [re, im] = self.stencil.center;
        ZStencil::new(Complex64::new(re, im), self.stencil.h).map_err(|e| ConfigError::new("stencil", e.to_string()))
    }

    pub fn initial_family(&self) -> Result<KernelFamily, ConfigError> {
        let (c, _) = self.constants()?;
        let m_max = self.grids.m_max;
        match self.family.preset {
            Preset::Free => Ok(free_family(&self.grids()?, self.stencil()?, m_max)),
            Preset::Coupling => {
                let [re, im] = self.family.coupling;
                Ok(coupling_family(&self.grids()?, self.stencil()?, m_max, Complex64::new(re, im), c.mu))
            }
            Preset::Random => {
                let spec = RandomSpec {
                    amplitude: self.family.random_amplitude,
                    r_slope: 0.5,
                    w00_curvature: 0.0,
                    hermitian: true,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(random_family(&self.grids()?, self.stencil()?, m_max, c.mu, &spec, &mut rng))
            }
            Preset::File => {
                let path = self.family.path.as_ref().expect("validated");
                let text = fs::read_to_string(path)
                    .map_err(|e| ConfigError::new("family.path", format!("{}: {e}", path.display())))?;
                KernelFamily::from_json(&text).map_err(|e| ConfigError::new("family.path", e.to_string()))
            }
        }
    }

    pub fn wick_options(&self) -> WickOptions {
        WickOptions {
            l_max: self.grids.l_max,
            p_max: self.grids.p_max,
        }
    }

    pub fn rg_options(&self) -> RgOptions {
        let t = &self.tolerances;
        RgOptions {
            wick: self.wick_options(),
            engine: QEngine::Kernel,
            tol_fp: t.tol_fp,
            max_iter: t.max_iter,
            tol_norm: t.tol_norm,
            recenter_limit: t.recenter_limit,
        }
    }

    /// Basis triple of the ledger for `f0`.
    pub fn basis_triple(&self, c: &ModelConstants, f0: Option<&KernelFamily>) -> Result<EpsilonTriple, ConfigError> {
        let l = &self.ledger;
        let fallback = match (c.strict_mode, f0) {
            (false, Some(f)) => EpsilonTriple {
                eps_i: norm_i(f, c.mu, c.xi).map_err(|e| ConfigError::new("constants.xi", e.to_string()))?,
                eps_z: norm_z(f),
                eps_f: norm_f(f),
            },
            _ => epsilon_basis(c),
        };
        EpsilonTriple::new(
            l.eps_i.unwrap_or(fallback.eps_i),
            l.eps_z.unwrap_or(fallback.eps_z),
            l.eps_f.unwrap_or(fallback.eps_f),
        )
        .map_err(|e| ConfigError::new("ledger", e.to_string()))
    }

    pub fn flow_config(&self, f0: &KernelFamily) -> Result<FlowConfig, ConfigError> {
        let (c, _) = self.constants()?;
        Ok(FlowConfig {
            constants: c,
            rg: self.rg_options(),
            eps0: Some(self.basis_triple(&c, Some(f0))?),
            oracle_n_max: None,
        })
    }

    /// The configured decomposition: explicit steps or the greedy rule.
    pub fn decomposition(&self, c: &ModelConstants) -> Result<FlowDecomposition, FlowError> {
        match &self.flow.steps {
            Some(steps) if !steps.is_empty() => {
                let (last, head) = steps.split_last().expect("non-empty");
                if *last < c.alpha_minus {
                    FlowDecomposition::new(head.to_vec(), *last, c)
                } else {
                    FlowDecomposition::new(steps.clone(), 0.0, c)
                }
            }
            _ => FlowDecomposition::greedy(self.flow.s, c, Some(self.grids.delta)),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "isorg", version, about = "Isospectral renormalization flow on kernel families")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for random families.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flow target s.
    #[arg(long, global = true)]
    pub s: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Real coupling of the coupling preset.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub coupling: Option<f64>,
    /// Stencil center as `RE IM`.
    #[arg(long, global = true, num_args = 2, value_names = ["RE", "IM"], allow_negative_numbers = true)]
    pub z_center: Option<Vec<f64>>,
    /// Strict mode: start from the strict defaults and force
    /// `constants.strict` with `rho = 1/144`.
    #[arg(long, global = true, conflicts_with = "lab")]
    pub strict: bool,
    /// Lab mode.
    #[arg(long, global = true)]
    pub lab: bool,
    /// Output directory for CSV and checkpoint files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Admissibility and parameter caps along the configured step sequence.
    Ledger,
    /// Run the flow; write the trajectory CSV and the final checkpoint.
    Flow,
    /// Composed kernels and the matrix semigroup identity against the oracle.
    Oracle,
    /// Ground-eigenvalue estimate with the oracle reference.
    Spectrum,
    /// Print the effective configuration as TOML.
    Config,
    /// Print the strict-mode defaults as TOML.
    StrictDefaults,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ledger => "ledger",
            Command::Flow => "flow",
            Command::Oracle => "oracle",
            Command::Spectrum => "spectrum",
            Command::Config => "config",
            Command::StrictDefaults => "strict-defaults",
        }
    }
}

/// Result of one command: exit code and the JSON report.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub report: Value,
}

fn error_outcome(command: &str, code: i32, message: String) -> Outcome {
    Outcome {
        code,
        report: json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "exit_code": code,
            "error": message,
        }),
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies file and flag settings on top of the defaults (the strict
/// defaults when `--strict` is given).
pub fn effective_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let base = if cli.strict {
        RunConfig::strict_default()
    } else {
        RunConfig::default()
    };
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::new("--config", format!("{}: {e}", p.display())))?;
            RunConfig::from_toml_over(&base, &text)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(s) = cli.s {
        cfg.flow.s = s;
        cfg.flow.steps = None;
    }
    if let Some(p) = cli.preset {
        cfg.family.preset = p;
    }
    if let Some(g) = cli.coupling {
        cfg.family.coupling = [g, 0.0];
    }
    if let Some(z) = &cli.z_center {
        cfg.stencil.center = [z[0], z[1]];
    }
    if cli.strict {
        cfg.constants.strict = true;
        cfg.constants.rho = STRICT_RHO;
    }
    if cli.lab {
        cfg.constants.strict = false;
    }
    if let Some(d) = &cli.out_dir {
        cfg.output.dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ConfigError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ConfigError::new("output.dir", format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| ConfigError::new("output.dir", format!("{}: {e}", path.display())))
}

fn cfg_err(command: Command, e: ConfigError) -> Outcome {
    error_outcome(command.name(), exit::CONFIG, e.to_string())
}

fn flow_err(command: Command, e: FlowError) -> Outcome {
    error_outcome(command.name(), e.exit_code(), e.to_string())
}

fn c64(z: Complex64) -> Value {
    json!([z.re, z.im])
}

/// Admissibility report for `l = 0..L`; exit 0 iff every entry is admissible.
pub fn cmd_ledger(cfg: &RunConfig) -> Outcome {
    let cmd = Command::Ledger;
    let (c, warnings) = match cfg.constants() {
        Ok(x) => x,
        Err(e) => return cfg_err(cmd, e),
    };
    let f0 = if c.strict_mode { None } else { cfg.initial_family().ok() };
    let eps0 = match cfg.basis_triple(&c, f0.as_ref()) {
        Ok(e) => e,
        Err(e) => return cfg_err(cmd, e),
    };
    let seq = &cfg.ledger.sequence;
    let mut entries = Vec::new();
    let mut all_ok = true;
    for ell in 0..=seq.len() {
        let beta = seq.get(ell).copied().unwrap_or(c.alpha_minus);
        match parameter_caps(&c, seq, &eps0, ell, beta) {
            Ok(caps) => {
                let adm = crate::params::is_admissible(&caps.eps, beta, &c);
                all_ok &= caps.admissible;
                entries.push(json!({"ell": ell, "beta": beta, "caps": caps, "admissibility": adm}));
            }
            Err(e) => {
                all_ok = false;
                let eps = epsilon_sequence_unchecked(c.mu, seq, &eps0, ell.min(seq.len()));
                let adm = crate::params::is_admissible(&eps, beta, &c);
                entries.push(json!({"ell": ell, "beta": beta, "eps": eps, "admissibility": adm, "error": e.to_string()}));
            }
        }
    }
    let basis_warnings = crate::params::check_basis(&eps0, &c).unwrap_or_default();
    Outcome {
        code: if all_ok { exit::OK } else { exit::NOT_ADMISSIBLE },
        report: json!({
            "schema_version": SCHEMA_VERSION,
            "command": cmd.name(),
            "constants": c,
            "constant_warnings": warnings,
            "basis": eps0,
            "basis_warnings": basis_warnings,
            "sequence": seq,
            "entries": entries,
            "all_admissible": all_ok,
        }),
    }
}

/// Runs the flow, writes `trajectory.csv` and `family_final.json`.
pub fn cmd_flow(cfg: &RunConfig) -> Outcome {
    let cmd = Command::Flow;
    let f0 = match cfg.initial_family() {
        Ok(f) => f,
        Err(e) => return cfg_err(cmd, e),
    };
    let fc = match cfg.flow_config(&f0) {
        Ok(x) => x,
        Err(e) => return cfg_err(cmd, e),
    };
    let d = match cfg.decomposition(&fc.constants) {
        Ok(d) => d,
        Err(e) => return flow_err(cmd, e),
    };
    let st = match flow_along(&f0, &d, &fc) {
        Ok(s) => s,
        Err(e) => return flow_err(cmd, e),
    };
    let traj_path = cfg.output.dir.join("trajectory.csv");
    let ckpt_path = cfg.output.dir.join("family_final.json");
    if let Err(e) = write_file(&traj_path, &trajectory_csv(&st.trajectory)) {
        return cfg_err(cmd, e);
    }
    if let Err(e) = write_file(&ckpt_path, &st.family.to_json()) {
        return cfg_err(cmd, e);
    }
    let steps: Vec<Value> = st
        .reports
        .iter()
        .map(|r| {
            json!({
                "alpha": r.alpha,
                "q": r.q,
                "iterations": r.pullbacks.iter().map(|p| p.iterations).collect::<Vec<_>>(),
                "residuals": r.pullbacks.iter().map(|p| p.residual).collect::<Vec<_>>(),
                "normalization_defects": r.normalization_defects,
                "recentered": r.recentered,
                "norm_i_before": r.seminorms_before.i_xi,
                "norm_i_after": r.seminorms_after.i_xi,
            })
        })
        .collect();
    let last = st.trajectory.last().expect("trajectory has the initial point");
    Outcome {
        code: exit::OK,
        report: json!({
            "schema_version": SCHEMA_VERSION,
            "command": cmd.name(),
            "s": st.s,
            "decomposition": d,
            "e_values": st.e_values.iter().map(|z| c64(*z)).collect::<Vec<_>>(),
            "final": {
                "norm_i": last.seminorms.i_xi,
                "norm_f": last.seminorms.f,
                "norm_z": last.seminorms.z,
                "ledger": last.ledger,
            },
            "steps": steps,
            "warnings": st.warnings,
            "trajectory_csv": traj_path,
            "checkpoint": ckpt_path,
        }),
    }
}

/// Composed kernels against the Schur complement at the stencil center, and
/// the matrix semigroup identity with `alpha = beta = alpha_-` on the grid.
pub fn cmd_oracle(cfg: &RunConfig) -> Outcome {
    let cmd = Command::Oracle;
    let f0 = match cfg.initial_family() {
        Ok(f) => f,
        Err(e) => return cfg_err(cmd, e),
    };
    let c = match cfg.constants() {
        Ok((c, _)) => c,
        Err(e) => return cfg_err(cmd, e),
    };
    let delta = f0.grids.modes.delta;
    let alpha = ((c.alpha_minus / delta).round().max(1.0)) * delta;
    let z = f0.stencil.center;
    let n_max = cfg.grids.n_max;
    let wick = match compare_with_oracle(&f0, z, alpha, cfg.wick_options(), n_max) {
        Ok(w) => w,
        Err(e) => return error_outcome(cmd.name(), exit::GATE, e.to_string()),
    };
    let wick_pass = wick.residual <= wick.bound;
    let basis = FockBasis::new(&f0.grids.modes, n_max);
    let h = build_h(&f0, z, &basis);
    let h_norm = h.norm();
    let sg = match semigroup_residual(&h, &basis, alpha, alpha) {
        Ok(r) => r,
        Err(e) => return error_outcome(cmd.name(), exit::GATE, e.to_string()),
    };
    let sg_bound = cfg.tolerances.semigroup_rel * h_norm;
    let sg_pass = sg <= sg_bound;
    Outcome {
        code: if wick_pass && sg_pass { exit::OK } else { exit::TOLERANCE },
        report: json!({
            "schema_version": SCHEMA_VERSION,
            "command": cmd.name(),
            "z": c64(z),
            "alpha": alpha,
            "n_max": n_max,
            "wick_vs_oracle": {"comparison": wick, "pass": wick_pass},
            "semigroup": {"alpha": alpha, "beta": alpha, "residual": sg, "bound": sg_bound, "pass": sg_pass},
        }),
    }
}

/// Flows to `s` and reports `-E_s(0)` with the oracle ground eigenvalue.
pub fn cmd_spectrum(cfg: &RunConfig) -> Outcome {
    let cmd = Command::Spectrum;
    let f0 = match cfg.initial_family() {
        Ok(f) => f,
        Err(e) => return cfg_err(cmd, e),
    };
    let fc = match cfg.flow_config(&f0) {
        Ok(x) => x,
        Err(e) => return cfg_err(cmd, e),
    };
    let d = match cfg.decomposition(&fc.constants) {
        Ok(d) => d,
        Err(e) => return flow_err(cmd, e),
    };
    let st = match flow_along(&f0, &d, &fc) {
        Ok(s) => s,
        Err(e) => return flow_err(cmd, e),
    };
    let est = match eigenvalue_estimate(&st, &fc, cfg.tolerances.estimate_threshold) {
        Ok(e) => e,
        Err(e) => return flow_err(cmd, e),
    };
    let series: Vec<Value> = st
        .trajectory
        .iter()
        .map(|p| json!({"s": p.s, "estimate": c64(p.eigenvalue_estimate), "error_bar": p.error_bar}))
        .collect();
    let basis = FockBasis::new(&f0.grids.modes, cfg.grids.n_max);
    let tol = est.error_bar.max(1e-6);
    let (oracle, pass) = if basis.dim() <= ORACLE_DIM_LIMIT {
        let h = build_h(&f0, Complex64::new(0.0, 0.0), &basis);
        match eigen_bottom(&h) {
            Ok(e) => {
                let dev = (e - est.value).norm();
                (json!({"ground": c64(e), "n_max": cfg.grids.n_max, "dim": basis.dim(), "deviation": dev, "tolerance": tol}), dev <= tol)
            }
            Err(e) => (json!({"error": e.to_string()}), true),
        }
    } else {
        (Value::Null, true)
    };
    Outcome {
        code: if pass { exit::OK } else { exit::TOLERANCE },
        report: json!({
            "schema_version": SCHEMA_VERSION,
            "command": cmd.name(),
            "s": st.s,
            "estimate": c64(est.value),
            "error_bar": est.error_bar,
            "oracle": oracle,
            "series": series,
        }),
    }
}

/// Executes a parsed command line and returns its outcome.
pub fn execute(cli: &Cli) -> Outcome {
    if cli.command == Command::StrictDefaults {
        return Outcome {
            code: exit::OK,
            report: Value::String(RunConfig::strict_default().to_toml()),
        };
    }
    let cfg = match effective_config(cli) {
        Ok(c) => c,
        Err(e) => return cfg_err(cli.command, e),
    };
    match cli.command {
        Command::Ledger => cmd_ledger(&cfg),
        Command::Flow => cmd_flow(&cfg),
        Command::Oracle => cmd_oracle(&cfg),
        Command::Spectrum => cmd_spectrum(&cfg),
        Command::Config => Outcome {
            code: exit::OK,
            report: Value::String(cfg.to_toml()),
        },
        Command::StrictDefaults => unreachable!("handled above"),
    }
}

/// Entry point of the binary: prints the report and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let out = execute(&cli);
    match &out.report {
        Value::String(s) => print!("{s}"),
        v => println!("{}", serde_json::to_string_pretty(v).expect("report serializes")),
    }
    out.code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let s = RunConfig::strict_default();
        s.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn field_precise_errors() {
        let e = RunConfig::from_toml("[grids]\nn_modez = 3\n").unwrap_err();
        assert!(e.message.contains("n_modez"), "{e}");
        let mut c = RunConfig::default();
        c.grids.l_max = 1;
        assert_eq!(c.validate().unwrap_err().field, "grids.l_max");
        let mut c = RunConfig::default();
        c.constants.mu = 1.5;
        assert_eq!(c.validate().unwrap_err().field, "constants");
    }

    #[test]
    fn flag_precedence() {
        let cli = Cli::try_parse_from(["isorg", "flow", "--s", "2.5", "--coupling", "-0.01", "--z-center", "0.01", "-0.02"]).unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.flow.s, 2.5);
        assert_eq!(cfg.family.coupling, [-0.01, 0.0]);
        assert_eq!(cfg.stencil.center, [0.01, -0.02]);
    }

    #[test]
    fn explicit_steps_with_short_tail() {
        let mut cfg = RunConfig::default();
        cfg.flow.steps = Some(vec![0.5, 1.0, 0.25]);
        let (c, _) = cfg.constants().unwrap();
        let d = cfg.decomposition(&c).unwrap();
        assert_eq!(d.alphas, vec![0.5, 1.0]);
        assert_eq!(d.beta, 0.25);
    }
}
