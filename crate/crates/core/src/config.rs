//! Run configuration.
//!
//! The file is TOML: `key = value` lines grouped in sections
//!
//! ```toml
//! [family]
//! name = "forced_rotator"      # or: expression = "0.5*p^2 + a*p + b*q + 0.001*sin(2*pi*q)"
//! n = 1
//! epsilon = 1e-3
//!
//! [frequency]
//! omega = [1.618033988749895]
//! sigma = 1.0
//! gamma = 0.1                  # or "estimate"
//!
//! [solver]
//! rho = 0.1
//! r = 0.01
//! c = "calibrate"              # or a number
//! ```
//!
//! Every key can be overridden from the command line as `--section.key value`;
//! the value is read as a TOML literal and falls back to a bare string.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diophantine::FrequencyVector;
use crate::driver::DriverOptions;
use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::hamiltonian::{self, Coupling, FamilyOptions, HamiltonianFamily, ParameterDomain};
use crate::kam_newton::{KamBudget, SolverOptions};
use crate::orbit::{Integrator, OrbitOptions};
use crate::smoothing::{Backend, BernsteinCaps, CkOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySection {
    /// Built-in family name; ignored when `expression` is set.
    pub name: String,
    pub n: usize,
    pub epsilon: f64,
    pub smoothness: u32,
    pub cutoff: usize,
    pub coupling: Coupling,
    pub expression: Option<String>,
    pub constants: BTreeMap<String, f64>,
}

impl Default for FamilySection {
    fn default() -> Self {
        let o = FamilyOptions::default();
        Self {
            name: "forced_rotator".into(),
            n: 1,
            epsilon: 1e-3,
            smoothness: o.smoothness,
            cutoff: o.cutoff,
            coupling: o.coupling,
            expression: None,
            constants: BTreeMap::new(),
        }
    }
}

/// A number, or a keyword asking for it to be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Auto {
    Value(f64),
    Keyword(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Estimate,
    Calibrate,
}

impl Auto {
    pub fn value(&self) -> Option<f64> {
        match self {
            Auto::Value(v) => Some(*v),
            Auto::Keyword(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencySection {
    pub omega: Vec<f64>,
    pub sigma: f64,
    pub gamma: Auto,
    /// Truncation order of the Diophantine verification.
    pub kmax: usize,
}

impl Default for FrequencySection {
    fn default() -> Self {
        Self { omega: vec![1.618_033_988_749_895], sigma: 1.0, gamma: Auto::Value(0.1), kmax: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorusSection {
    pub kmax: usize,
    /// Momentum of the flat starting torus; defaults to `omega`.
    pub p0: Option<Vec<f64>>,
    /// Coefficient file of a starting torus, overriding the flat one.
    pub file: Option<PathBuf>,
}

impl Default for TorusSection {
    fn default() -> Self {
        Self { kmax: 16, p0: None, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub rho: f64,
    pub r: f64,
    pub c: Auto,
    pub lambda0: Option<Vec<f64>>,
    pub tol: f64,
    pub max_iter: usize,
    pub enforce_smallness: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            rho: 0.1,
            r: 0.01,
            c: Auto::Keyword(AutoKeyword::Calibrate),
            lambda0: None,
            tol: 1e-10,
            max_iter: 25,
            enforce_smallness: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingSection {
    pub backend: Backend,
    pub degree_cap: usize,
    pub node_cap: usize,
    pub spectral_cap: usize,
    pub fd_step: f64,
    pub grid_per_axis: usize,
    pub max_len: usize,
    /// Keep the parameter axes at Bernstein degree 1. Exact when the family
    /// is affine in `lambda`, as all built-in couplings are.
    pub affine_params: bool,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        let caps = BernsteinCaps::default();
        Self {
            backend: Backend::Bernstein,
            degree_cap: caps.degree_cap,
            node_cap: caps.node_cap,
            spectral_cap: 4096,
            fd_step: CkOptions::default().fd_step,
            grid_per_axis: 32,
            max_len: 12,
            affine_params: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    Identity,
    StripMatched,
    Selected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSection {
    /// Defaults to `identity` for analytic families and `strip-matched` otherwise.
    pub plan: Option<PlanKind>,
    pub j_base: usize,
    pub stop_tol: f64,
    pub k_stop: usize,
    pub tube_per_axis: usize,
    pub residual_grid: usize,
    pub horizon: usize,
    pub max_k0: usize,
    /// Inner solver tolerance; defaults to the solver section's.
    pub tol: Option<f64>,
}

impl Default for DriverSection {
    fn default() -> Self {
        let d = DriverOptions::default();
        Self {
            plan: None,
            j_base: 16,
            stop_tol: d.stop_tol,
            k_stop: d.k_stop,
            tube_per_axis: d.tube_per_axis,
            residual_grid: d.residual_grid,
            horizon: d.horizon,
            max_k0: d.max_k0,
            tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSection {
    pub t_final: f64,
    pub dt: f64,
    pub n_samples: usize,
    /// A TOML integer, so at most `2^63 - 1`.
    pub seed: u64,
    pub checkpoint_every: f64,
    pub integrator: Integrator,
}

impl Default for OrbitSection {
    fn default() -> Self {
        let o = OrbitOptions::default();
        Self {
            t_final: o.t_final,
            dt: o.dt,
            n_samples: o.n_samples,
            seed: o.seed,
            checkpoint_every: o.checkpoint_every,
            integrator: o.integrator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: FamilySection,
    pub frequency: FrequencySection,
    pub torus: TorusSection,
    pub solver: SolverSection,
    pub smoothing: SmoothingSection,
    pub driver: DriverSection,
    pub orbit: OrbitSection,
    pub output: OutputSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` (any depth) in `table`.
fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(KamError::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| KamError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, applies `(key, value)` overrides, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| KamError::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        // Re-serialize so field errors point at a line of the merged document.
        let merged = toml::to_string(&table).map_err(|e| KamError::Config(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&merged).map_err(|e| KamError::Parse {
            line: e.span().map_or(0, |s| line_of(&merged, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KamError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        let n = self.family.n;
        let positive = [
            ("solver.rho", self.solver.rho),
            ("solver.r", self.solver.r),
            ("solver.tol", self.solver.tol),
            ("frequency.sigma", self.frequency.sigma),
            ("smoothing.fd_step", self.smoothing.fd_step),
            ("driver.stop_tol", self.driver.stop_tol),
            ("orbit.t_final", self.orbit.t_final),
            ("orbit.dt", self.orbit.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KamError::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if n == 0 {
            return Err(KamError::Config("`family.n` must be positive".into()));
        }
        if self.frequency.sigma <= n as f64 - 1.0 {
            return Err(KamError::InvalidSigma { sigma: self.frequency.sigma, min: n as f64 - 1.0 });
        }
        if self.frequency.omega.len() != n {
            return Err(KamError::Config(format!(
                "`frequency.omega` has {} entries, `family.n` is {n}",
                self.frequency.omega.len()
            )));
        }
        if let Auto::Value(g) = self.frequency.gamma {
            if g <= 0.0 {
                return Err(KamError::Config(format!("`frequency.gamma` must be positive, got {g}")));
            }
        }
        if matches!(self.frequency.gamma, Auto::Keyword(AutoKeyword::Calibrate)) {
            return Err(KamError::Config("`frequency.gamma` accepts a number or \"estimate\"".into()));
        }
        match self.solver.c {
            Auto::Value(c) if c <= 0.0 => return Err(KamError::Config(format!("`solver.c` must be positive, got {c}"))),
            Auto::Keyword(AutoKeyword::Estimate) => {
                return Err(KamError::Config("`solver.c` accepts a number or \"calibrate\"".into()))
            }
            _ => {}
        }
        if let Some(l) = &self.solver.lambda0 {
            if l.len() != 2 * n {
                return Err(KamError::Config(format!("`solver.lambda0` needs {} entries, got {}", 2 * n, l.len())));
            }
        }
        if let Some(p) = &self.torus.p0 {
            if p.len() != n {
                return Err(KamError::Config(format!("`torus.p0` needs {n} entries, got {}", p.len())));
            }
        }
        if self.torus.kmax == 0 {
            return Err(KamError::Config("`torus.kmax` must be positive".into()));
        }
        Ok(())
    }

    pub fn family_options(&self) -> FamilyOptions {
        FamilyOptions {
            epsilon: self.family.epsilon,
            smoothness: self.family.smoothness,
            cutoff: self.family.cutoff,
            coupling: self.family.coupling,
        }
    }

    pub fn build_family(&self) -> Result<HamiltonianFamily> {
        let n = self.family.n;
        match &self.family.expression {
            Some(src) => hamiltonian::expression_family(n, 2 * n, src, &self.family.constants),
            None => hamiltonian::builtin_family(&self.family.name, n, &self.family_options()),
        }
    }

    pub fn lambda0(&self) -> Vec<f64> {
        self.solver.lambda0.clone().unwrap_or_else(|| vec![0.0; 2 * self.family.n])
    }

    /// Parameter box around `lambda0`: `Q` of half-width `2r`, `A(Q)` of `3r`.
    pub fn param_domain(&self) -> ParameterDomain {
        ParameterDomain::around(self.lambda0(), 2.0 * self.solver.r, 3.0 * self.solver.r)
    }

    /// Frequency vector; `gamma = "estimate"` uses the scan up to `frequency.kmax`.
    pub fn frequency(&self) -> Result<FrequencyVector> {
        let f = &self.frequency;
        let gamma = match f.gamma.value() {
            Some(g) => g,
            None => crate::diophantine::estimate_gamma(&f.omega, f.sigma, f.kmax)?.0,
        };
        FrequencyVector::new(f.omega.clone(), gamma, f.sigma)
    }

    /// Starting torus: the file if given, otherwise flat at `p0` (default `omega`).
    pub fn initial_torus(&self, base: &Path) -> Result<Embedding> {
        match &self.torus.file {
            Some(file) => {
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                let text =
                    std::fs::read_to_string(&path).map_err(|e| KamError::Io(format!("{}: {e}", path.display())))?;
                Embedding::from_text(&text)
            }
            None => {
                let p0 = self.torus.p0.clone().unwrap_or_else(|| self.frequency.omega.clone());
                Ok(Embedding::flat(self.family.n, self.torus.kmax, &p0))
            }
        }
    }

    pub fn budget(&self, freq: &FrequencyVector) -> KamBudget {
        KamBudget::new(self.solver.rho, self.solver.r, freq.gamma, freq.sigma, self.solver.c.value())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            enforce_smallness: self.solver.enforce_smallness,
            ..SolverOptions::default()
        }
    }

    pub fn ck_options(&self) -> CkOptions {
        CkOptions { fd_step: self.smoothing.fd_step, ..CkOptions::default() }
    }

    pub fn bernstein_caps(&self) -> BernsteinCaps {
        BernsteinCaps { degree_cap: self.smoothing.degree_cap, node_cap: self.smoothing.node_cap }
    }

    pub fn driver_options(&self) -> DriverOptions {
        let d = &self.driver;
        let mut solver = self.solver_options();
        if let Some(t) = d.tol {
            solver.tol = t;
        }
        DriverOptions {
            stop_tol: d.stop_tol,
            k_stop: d.k_stop,
            horizon: d.horizon,
            max_k0: d.max_k0,
            tube_per_axis: d.tube_per_axis,
            residual_grid: d.residual_grid,
            ck: self.ck_options(),
            solver,
            ..DriverOptions::default()
        }
    }

    pub fn orbit_options(&self) -> OrbitOptions {
        let o = &self.orbit;
        OrbitOptions {
            t_final: o.t_final,
            dt: o.dt,
            n_samples: o.n_samples,
            seed: o.seed,
            checkpoint_every: o.checkpoint_every,
            integrator: o.integrator,
            ..OrbitOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn keywords_and_numbers() {
        let cfg = RunConfig::parse("[frequency]\ngamma = \"estimate\"\n[solver]\nc = 2.5e-12\n").unwrap();
        assert_eq!(cfg.frequency.gamma, Auto::Keyword(AutoKeyword::Estimate));
        assert_eq!(cfg.solver.c.value(), Some(2.5e-12));
        assert!(RunConfig::parse("[solver]\nc = \"estimate\"\n").is_err());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let text = "[solver]\nrho = 0.2\n";
        let o = vec![
            ("solver.rho".to_string(), "0.05".to_string()),
            ("family.name".to_string(), "pendulum_family".to_string()),
            ("frequency.omega".to_string(), "[1.3]".to_string()),
        ];
        let cfg = RunConfig::parse_with_overrides(text, &o).unwrap();
        assert_eq!(cfg.solver.rho, 0.05);
        assert_eq!(cfg.family.name, "pendulum_family");
        assert_eq!(cfg.frequency.omega, vec![1.3]);
    }

    #[test]
    fn errors_name_the_line_or_field() {
        let err = RunConfig::parse("[solver]\nrho = 0.1\nr = = 2\n").unwrap_err();
        assert!(matches!(err, KamError::Parse { line: 3, .. }), "{err:?}");
        let err = RunConfig::parse("[solver]\nrhoo = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("rhoo"), "{err}");
        let err = RunConfig::parse("[solver]\nrho = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("solver.rho"));
    }

    #[test]
    fn sigma_is_checked_against_the_dimension() {
        let err = RunConfig::parse("[family]\nn = 2\n[frequency]\nomega = [1.0, 1.618]\nsigma = 0.5\n").unwrap_err();
        assert!(matches!(err, KamError::InvalidSigma { .. }));
        assert!(RunConfig::parse("[family]\nn = 2\n[frequency]\nomega = [1.0, 1.618]\nsigma = 1.5\n").is_ok());
    }

    #[test]
    fn builds_the_problem() {
        let cfg = RunConfig::default();
        let h = cfg.build_family().unwrap();
        assert_eq!(h.param_dim(), 2);
        let k = cfg.initial_torus(Path::new(".")).unwrap();
        assert_eq!(k.eval_real(&[0.25]), vec![0.25, 1.618_033_988_749_895]);
        let f = cfg.frequency().unwrap();
        assert_eq!(cfg.budget(&f).c, None);
        let e = RunConfig::parse("[family]\nexpression = \"0.5*p^2 + a*p + b*q\"\n").unwrap();
        assert!(e.build_family().is_ok());
    }
}
