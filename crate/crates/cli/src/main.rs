//! `kamtorus`: command-line front end.
//!
//! Every subcommand reads an optional TOML config (`-c`), applies
//! `--section.key value` overrides and writes its artifacts under
//! `output.dir` (or `-o`). Exit status: 0 on success, 2 when the problem
//! violates a hypothesis, 1 on any other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use kam_core::config::{Auto, PlanKind, RunConfig};
use kam_core::diophantine;
use kam_core::driver::{self, ApproximationPlan};
use kam_core::hamiltonian::{HamiltonianFamily, Smoothness};
use kam_core::kam_newton;
use kam_core::orbit;
use kam_core::report;
use kam_core::smoothing::{self, ApproximantSequence, Backend, Ladder, SampleSet, SelectionOptions};
use kam_core::{KamError, Result};

#[derive(Parser)]
#[command(name = "kamtorus", version, about = "Invariant tori of parametrized Hamiltonian families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the Diophantine condition up to `frequency.kmax`.
    CheckDiophantine {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        omega: Option<Vec<f64>>,
        #[arg(long)]
        sigma: Option<f64>,
        /// A number or `estimate`.
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Quasi-Newton solve for an analytic family.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Localize the family and select an analytic approximant sequence.
    Smooth {
        #[command(flatten)]
        common: Common,
    },
    /// Run the shrinking-strip cascade and write a certificate.
    Drive {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate the flow from points of a torus and compare with the rotation.
    OrbitCheck {
        #[command(flatten)]
        common: Common,
        /// A `solve` or `drive` report; its `torus.txt` sibling and final
        /// lambda are checked. Without it the configured starting torus is.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Exit with status 2 when the deviation exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Re-emit a report in canonical form.
    Report {
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('-'));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| format!("override `{a}` needs a value"))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    base: PathBuf,
}

fn load(common: &Common, overrides: &[(String, String)]) -> Result<Run> {
    let (cfg, base) = match &common.config {
        Some(p) => (RunConfig::load(p, overrides)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::parse_with_overrides("", overrides)?, PathBuf::from(".")),
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok(Run { cfg, out, base })
}

fn emit(run: &Run, name: &str, kind: &str, body: Value) -> Result<PathBuf> {
    let doc = report::document(kind, Some(&run.cfg), body)?;
    let path = run.out.join(name);
    report::write_json(&path, &doc)?;
    Ok(path)
}

fn check_diophantine(run: &Run) -> Result<bool> {
    let f = &run.cfg.frequency;
    let gamma = match f.gamma {
        Auto::Value(g) => g,
        // Estimating first means the verdict can only fail on resonance.
        Auto::Keyword(_) => diophantine::verify_diophantine(&f.omega, 0.0, f.sigma, f.kmax)?.gamma_est,
    };
    let verdict = diophantine::verify_diophantine(&f.omega, gamma, f.sigma, f.kmax)?;
    let body = report::diophantine_body(&f.omega, gamma, f.sigma, &verdict);
    emit(run, "diophantine.json", "check-diophantine", body.clone())?;
    print!("{}", report::render(&body));
    if !verdict.pass {
        eprintln!("Diophantine check failed at k = {:?}: {:e} < gamma = {gamma:e}", verdict.worst_k, verdict.gamma_est);
    }
    Ok(verdict.pass)
}

fn solve(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let h = cfg.build_family()?;
    let freq = cfg.frequency()?;
    let k0 = cfg.initial_torus(&run.base)?;
    let budget = cfg.budget(&freq);
    let sol = kam_newton::solve_analytic(&h, &cfg.lambda0(), &k0, &freq, &budget, &cfg.solver_options())?;
    report::write_text(&run.out.join("torus.txt"), &sol.k.to_text())?;
    report::write_text(&run.out.join("history.csv"), &report::history_csv(&sol))?;
    let path = emit(run, "solve.json", "solve", report::solve_body(&sol, &budget)?)?;
    println!(
        "converged in {} steps: residual {:e}, lambda {:?}, audit {}",
        sol.iterations(),
        sol.residual.value,
        sol.lambda,
        if sol.audit.pass() { "pass" } else { "FAIL" }
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Localization plus selection; `with_families` attaches a Hamiltonian to
/// every Bernstein rung so the driver can solve with it.
fn smoothing_pipeline(run: &Run, h: &HamiltonianFamily, with_families: bool) -> Result<(ApproximantSequence, Value)> {
    let cfg = &run.cfg;
    let n = h.n();
    let d = h.param_dim();
    let freq = cfg.frequency()?;
    let k0 = cfg.initial_torus(&run.base)?;
    let lambda0 = cfg.lambda0();
    let (rho, r) = (cfg.solver.rho, cfg.solver.r);
    let pd = cfg.param_domain();
    let rect = smoothing::build_rectangle(&k0, rho, r, &pd);
    let misses = rect.audit_containment(&k0, 4096, cfg.orbit.seed);
    let psi = smoothing::build_cutoff(&k0, r)?;
    let local = smoothing::localize(h, &psi, &rect);
    // Spectral and identity rungs approximate H itself; only Bernstein works
    // on the localized family over the rectangle.
    let target = match cfg.smoothing.backend {
        Backend::Bernstein => smoothing::family_fn(&local),
        _ => smoothing::family_fn(h),
    };
    let ck = cfg.ck_options();
    let ladder = match cfg.smoothing.backend {
        Backend::Bernstein => {
            let affine: Vec<bool> = (0..2 * n + d).map(|i| i >= 2 * n && cfg.smoothing.affine_params).collect();
            Ladder::bernstein(
                target.clone(),
                rect.joint_lower(),
                rect.joint_upper(),
                affine,
                cfg.bernstein_caps(),
                ck.exec,
                with_families.then_some((n, d)),
            )
        }
        Backend::Spectral => Ladder::spectral(h, cfg.smoothing.spectral_cap)?,
        Backend::Identity => Ladder::identity(h),
    };
    let samples = SampleSet::tube(&k0, 2.0 * r, &pd.q_lower, &pd.q_upper, cfg.smoothing.grid_per_axis);
    let e0 = kam_newton::error_function(h, &lambda0, &k0, &freq.omega)?.norm(rho);
    let opts = SelectionOptions {
        l: driver::smoothness_of(h, &cfg.driver_options()),
        sigma: freq.sigma,
        e0_norm: e0,
        max_len: cfg.smoothing.max_len,
        ck,
    };
    let seq = smoothing::select_subsequence(&target, &ladder, &samples, &opts)?;
    let mut body = report::selection_body(&seq)?;
    body["e0_norm"] = json!(e0);
    body["rectangle"] = report::to_value(&rect)?;
    body["rectangle_misses"] = json!(misses);
    body["cutoff"] = json!({"inner": psi.inner, "outer": psi.outer, "lip_q": psi.lip_q, "lip_p": psi.lip_p});
    Ok((seq, body))
}

/// A stalled ladder still writes its report; it exits with status 2.
fn smooth(run: &Run) -> Result<bool> {
    let h = run.cfg.build_family()?;
    let (seq, body) = smoothing_pipeline(run, &h, false)?;
    report::write_text(&run.out.join("selection.csv"), &report::selection_csv(&seq))?;
    let path = emit(run, "smooth.json", "smooth", body)?;
    println!(
        "{} elements, k0 = {}, A = {:e}, envelope {}",
        seq.elements.len(),
        seq.k0,
        seq.a,
        if seq.envelope_holds { "holds" } else { "FAILS" }
    );
    println!("wrote {}", path.display());
    if let Some(s) = &seq.stall {
        eprintln!("{}", KamError::Stagnation { level: s.level, achieved: s.achieved, threshold: s.threshold });
    }
    Ok(seq.stall.is_none())
}

fn drive(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let h = cfg.build_family()?;
    let freq = cfg.frequency()?;
    let k0 = cfg.initial_torus(&run.base)?;
    let budget = cfg.budget(&freq);
    let kind = cfg.driver.plan.unwrap_or(match h.smoothness {
        Smoothness::Analytic => PlanKind::Identity,
        _ => PlanKind::StripMatched,
    });
    let plan = match kind {
        PlanKind::Identity => ApproximationPlan::Identity,
        PlanKind::StripMatched => ApproximationPlan::StripMatched { j_base: cfg.driver.j_base },
        PlanKind::Selected => ApproximationPlan::Selected(smoothing_pipeline(run, &h, true)?.0.strict()?),
    };
    let cert = driver::drive(&h, &k0, &cfg.lambda0(), &freq, &budget, &plan, &cfg.driver_options())?;
    report::write_text(&run.out.join("torus.txt"), &cert.torus().to_text())?;
    report::write_text(&run.out.join("ledger.csv"), &cert.ledger_csv())?;
    let path = emit(run, "certificate.json", "drive", report::to_value(&cert)?)?;
    println!(
        "{} plan: k0 = {}, {} steps, final residual {:e} (bound {:e}), stop: {}",
        cert.plan, cert.k0, cert.steps, cert.final_residual, cert.residual_bound, cert.stop_reason
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn final_lambda(doc: &Value) -> Option<Vec<f64>> {
    let body = doc.get("body")?;
    let l = body.get("lambda").or_else(|| body.get("lambda_final"))?;
    serde_json::from_value(l.clone()).ok()
}

fn orbit_check(run: &Run, from: Option<&Path>, tolerance: Option<f64>) -> Result<bool> {
    let cfg = &run.cfg;
    let h = cfg.build_family()?;
    let (k, lambda) = match from {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| KamError::Io(format!("{}: {e}", p.display())))?;
            let doc: Value =
                serde_json::from_str(&text).map_err(|e| KamError::Parse { line: e.line(), message: e.to_string() })?;
            let lambda = final_lambda(&doc)
                .ok_or_else(|| KamError::Config(format!("{}: no final lambda in the report", p.display())))?;
            let torus = p.with_file_name("torus.txt");
            let t = std::fs::read_to_string(&torus).map_err(|e| KamError::Io(format!("{}: {e}", torus.display())))?;
            (kam_core::embedding::Embedding::from_text(&t)?, lambda)
        }
        None => (cfg.initial_torus(&run.base)?, cfg.lambda0()),
    };
    let rep = orbit::orbit_check(&h, &lambda, &k, &cfg.frequency.omega, &cfg.orbit_options())?;
    let mut body = report::to_value(&rep)?;
    body["lambda"] = json!(lambda);
    body["tolerance"] = json!(tolerance);
    let path = emit(run, "orbit.json", "orbit-check", body)?;
    println!("max deviation {:e}, energy drift {:e}", rep.max_deviation, rep.energy_drift);
    println!("wrote {}", path.display());
    Ok(tolerance.map_or(true, |t| rep.max_deviation <= t))
}

fn reemit(input: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| KamError::Io(format!("{}: {e}", input.display())))?;
    let canon = report::reemit(&text)?;
    match out {
        Some(p) => report::write_text(p, &canon),
        None => {
            print!("{canon}");
            Ok(())
        }
    }
}

/// `Ok(false)` is a negative verdict that is not an error.
fn run(cli: Cli, overrides: &[(String, String)]) -> Result<bool> {
    match cli.command {
        Command::CheckDiophantine { common, omega, sigma, gamma, kmax } => {
            let mut o = overrides.to_vec();
            if let Some(w) = omega {
                o.push(("family.n".into(), w.len().to_string()));
                let list: Vec<String> = w.iter().map(|x| format!("{x:?}")).collect();
                o.push(("frequency.omega".into(), format!("[{}]", list.join(", "))));
            }
            if let Some(s) = sigma {
                o.push(("frequency.sigma".into(), format!("{s:?}")));
            }
            if let Some(g) = gamma {
                o.push(("frequency.gamma".into(), if g.parse::<f64>().is_ok() { g } else { format!("\"{g}\"") }));
            }
            if let Some(k) = kmax {
                o.push(("frequency.kmax".into(), k.to_string()));
            }
            check_diophantine(&load(&common, &o)?)
        }
        Command::Solve { common } => solve(&load(&common, overrides)?).map(|_| true),
        Command::Smooth { common } => smooth(&load(&common, overrides)?),
        Command::Drive { common } => drive(&load(&common, overrides)?).map(|_| true),
        Command::OrbitCheck { common, from, tolerance } => {
            orbit_check(&load(&common, overrides)?, from.as_deref(), tolerance)
        }
        Command::Report { input, out } => reemit(&input, out.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_hypothesis_failure() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args: Vec<String> =
            ["kamtorus", "solve", "-c", "a.toml", "--solver.rho", "0.2", "--family.name=pendulum_family"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let (rest, o) = split_overrides(args).unwrap();
        assert_eq!(rest, vec!["kamtorus", "solve", "-c", "a.toml"]);
        assert_eq!(o, vec![("solver.rho".into(), "0.2".into()), ("family.name".into(), "pendulum_family".into())]);
        assert!(split_overrides(vec!["--solver.rho".into()]).is_err());
    }
}
