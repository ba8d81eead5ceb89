//! Command-line driver: model files, subcommands, report output and exit
//! codes.
//!
//! Exit codes: 0 success, 1 parse or validation failure, 2 numerical failure,
//! 3 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gen_fn::{self, Criticality};
use crate::general::{self, HittingSolution, Truncation};
use crate::model::{ActionId, CbpModel, GeneralModel, RawCbp, RawGeneral};
use crate::report::to_json;
use crate::sim::{self, EpEstimate, SimCaps};
use crate::solver::{self, CbpSolver, ExtinctionProfile, Policy, SolveReport, TailKind};

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 3;
pub const THREADS_ENV: &str = "CBP_OPT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cbp,
    General,
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cbp: Option<RawCbp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub general: Option<RawGeneral>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Cbp(CbpModel),
    General(GeneralModel),
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::invalid(format!("model file: {e}")))
    }

    pub fn validate(&self) -> Result<Model, CliError> {
        match (self.kind, &self.cbp, &self.general) {
            (ModelKind::Cbp, Some(raw), None) => Ok(Model::Cbp(CbpModel::validate(raw)?)),
            (ModelKind::General, None, Some(raw)) => {
                Ok(Model::General(GeneralModel::validate(raw)?))
            }
            (kind, _, _) => Err(CliError::invalid(format!(
                "model of kind `{}` must carry exactly the `{}` section",
                kind.name(),
                kind.name()
            ))),
        }
    }
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Cbp => "cbp",
            ModelKind::General => "general",
        }
    }
}

impl From<&Model> for ModelFile {
    fn from(model: &Model) -> Self {
        match model {
            Model::Cbp(m) => ModelFile {
                kind: ModelKind::Cbp,
                cbp: Some(m.to_raw()),
                general: None,
            },
            Model::General(g) => ModelFile {
                kind: ModelKind::General,
                cbp: None,
                general: Some(g.to_raw()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            EXIT_INVALID
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cbp-opt",
    version,
    about = "Minimal extinction probabilities of controlled branching processes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smallest nonnegative root of each tail action's generating function.
    Rho {
        model: PathBuf,
        #[arg(long, default_value_t = gen_fn::DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
    /// Optimal policy and minimal extinction probabilities by policy iteration.
    Solve {
        model: PathBuf,
        #[arg(long, default_value_t = gen_fn::DEFAULT_TOL)]
        tol: f64,
        /// Head assignments such as `1:a2,2:a1`; unlisted states take the smallest id.
        #[arg(long)]
        start_policy: Option<String>,
        #[arg(long)]
        trace: bool,
        /// Re-solve with every tied root-minimizing tail action and compare.
        #[arg(long)]
        exhaustive_ties: bool,
        #[arg(long)]
        json: bool,
    },
    /// Extinction probabilities of one policy.
    Evaluate {
        model: PathBuf,
        #[arg(long, default_value = "")]
        policy: String,
        #[arg(long, default_value_t = gen_fn::DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
    /// Monte Carlo estimate of one policy's extinction probability.
    Simulate {
        model: PathBuf,
        #[arg(long, default_value = "")]
        policy: String,
        /// Tail action; defaults to the root-minimizing one.
        #[arg(long)]
        tail: Option<String>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        start: u64,
        #[arg(long = "n", default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 1_000_000)]
        max_jumps: u64,
        #[arg(long, default_value_t = 1_000_000)]
        max_pop: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Value iteration on a general model, or on a truncated branching model.
    General {
        model: PathBuf,
        #[arg(long, default_value_t = general::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = general::DEFAULT_MAX_ITER)]
        max_iter: usize,
        /// Truncation level when the model file describes a branching process.
        #[arg(long)]
        truncate: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Enumerate every head policy and take the componentwise minimum.
    Brute {
        model: PathBuf,
        #[arg(long, default_value_t = solver::DEFAULT_BRUTE_CAP)]
        cap: u128,
        #[arg(long, default_value_t = gen_fn::DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
}

/// Outcome of a successful command: text for standard output.
pub type CmdOutput = String;

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    ModelFile::parse(&text)?.validate()
}

fn load_cbp(path: &Path) -> Result<CbpModel, CliError> {
    match load_model(path)? {
        Model::Cbp(m) => Ok(m),
        Model::General(_) => Err(CliError::invalid(
            "this command needs a model of kind `cbp`",
        )),
    }
}

fn check_tol(tol: f64) -> Result<(), CliError> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "--tol must be positive, got {tol}"
        )))
    }
}

/// Parses arguments and runs the command. Help and version requests return
/// their text as a successful output.
pub fn run<I, T>(args: I) -> Result<CmdOutput, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(e.to_string()),
                _ => Err(CliError::usage(e.to_string())),
            };
        }
    };
    configure_threads()?;
    execute(cli.command)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| {
            CliError::usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{value}`"
            ))
        })?;
    // A pool that already exists (repeated in-process runs) is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<CmdOutput, CliError> {
    match command {
        Command::Rho { model, tol, json } => cmd_rho(&model, tol, json),
        Command::Solve {
            model,
            tol,
            start_policy,
            trace,
            exhaustive_ties,
            json,
        } => cmd_solve(
            &model,
            tol,
            start_policy.as_deref(),
            trace,
            exhaustive_ties,
            json,
        ),
        Command::Evaluate {
            model,
            policy,
            tol,
            json,
        } => cmd_evaluate(&model, &policy, tol, json),
        Command::Simulate {
            model,
            policy,
            tail,
            start,
            n,
            max_jumps,
            max_pop,
            seed,
            json,
        } => cmd_simulate(
            &model,
            &policy,
            tail.as_deref(),
            start,
            n,
            SimCaps {
                max_jumps,
                max_pop,
                track_time: false,
            },
            seed,
            json,
        ),
        Command::General {
            model,
            tol,
            max_iter,
            truncate,
            json,
        } => cmd_general(&model, tol, max_iter, truncate, json),
        Command::Brute {
            model,
            cap,
            tol,
            json,
        } => cmd_brute(&model, cap, tol, json),
    }
}

#[derive(Serialize)]
struct RhoRow<'a> {
    action: &'a ActionId,
    rho: f64,
    residual: f64,
    iterations: usize,
    criticality: Criticality,
}

#[derive(Serialize)]
struct RhoOutput<'a> {
    actions: Vec<RhoRow<'a>>,
    rho_star: f64,
    a_star: &'a ActionId,
    tied: &'a [ActionId],
}

pub fn cmd_rho(path: &Path, tol: f64, json: bool) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let model = load_cbp(path)?;
    let roots = gen_fn::rho_star(&model, tol)?;
    let out = RhoOutput {
        actions: roots
            .per_action
            .iter()
            .map(|(a, r)| RhoRow {
                action: a,
                rho: r.rho,
                residual: r.residual,
                iterations: r.iterations,
                criticality: r.criticality,
            })
            .collect(),
        rho_star: roots.rho_star,
        a_star: &roots.a_star,
        tied: &roots.tied,
    };
    if json {
        return Ok(to_json(&out));
    }
    let mut s = String::new();
    writeln!(
        s,
        "{:<12} {:>22} {:>10} {:>14}",
        "action", "rho", "residual", "criticality"
    )
    .unwrap();
    for row in &out.actions {
        writeln!(
            s,
            "{:<12} {:>22.17} {:>10.2e} {:>14}",
            row.action.as_str(),
            row.rho,
            row.residual,
            format!("{:?}", row.criticality).to_lowercase()
        )
        .unwrap();
    }
    writeln!(s, "rho_* = {:.17}  a_* = {}", out.rho_star, out.a_star).unwrap();
    if out.tied.len() > 1 {
        let tied: Vec<&str> = out.tied.iter().map(ActionId::as_str).collect();
        writeln!(s, "tied: {}", tied.join(", ")).unwrap();
    }
    Ok(s)
}

/// Profile as written to reports: explicit head values plus the closed-form
/// tail description.
#[derive(Serialize)]
struct ProfileOutput {
    ep: BTreeMap<usize, f64>,
    tail: TailKind,
    system_residual: f64,
}

impl From<&ExtinctionProfile> for ProfileOutput {
    fn from(p: &ExtinctionProfile) -> Self {
        ProfileOutput {
            ep: (1..=p.m()).map(|i| (i, p.ep(i))).collect(),
            tail: p.tail(),
            system_residual: p.system_residual(),
        }
    }
}

fn policy_map(p: &Policy) -> BTreeMap<String, &ActionId> {
    let mut map: BTreeMap<String, &ActionId> = p
        .head()
        .iter()
        .enumerate()
        .map(|(idx, a)| ((idx + 1).to_string(), a))
        .collect();
    map.insert("tail".into(), p.tail());
    map
}

#[derive(Serialize)]
struct TraceEntry<'a> {
    policy: BTreeMap<String, &'a ActionId>,
    profile: ProfileOutput,
    improved_states: &'a [usize],
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    m_star: usize,
    rho_star: f64,
    a_star: &'a ActionId,
    tied: &'a [ActionId],
    optimal_policy: BTreeMap<String, &'a ActionId>,
    optimal_profile: ProfileOutput,
    oe_residual: f64,
    iteration_count: usize,
    dont_care: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<Vec<TraceEntry<'a>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tie_check: Option<TieCheck>,
}

#[derive(Serialize)]
struct TieCheck {
    tails: Vec<ActionId>,
    max_difference: f64,
    consistent: bool,
}

/// Profiles under different tied `a_*` must agree within this tolerance.
const TIE_AGREEMENT_TOL: f64 = 1e-10;

fn profile_lines(s: &mut String, p: &ExtinctionProfile, extra: usize) {
    for i in 1..=p.m() + extra {
        let marker = if i > p.m() { " (tail)" } else { "" };
        writeln!(s, "  ep_{i:<4} = {:.17}{marker}", p.ep(i)).unwrap();
    }
    match p.tail() {
        TailKind::Geometric { rho_star } => writeln!(
            s,
            "  ep_i = {rho_star:.17}^(i-{}) * ep_{} for i > {}",
            p.m(),
            p.m(),
            p.m()
        )
        .unwrap(),
        TailKind::Zero { from } => writeln!(s, "  ep_i = 0 for i >= {from}").unwrap(),
    }
}

pub fn cmd_solve(
    path: &Path,
    tol: f64,
    start: Option<&str>,
    trace: bool,
    exhaustive_ties: bool,
    json: bool,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let model = load_cbp(path)?;
    let solver = CbpSolver::new(&model, tol)?;
    let report: SolveReport = match start {
        Some(text) => {
            let f = Policy::parse_assignments(&model, text, solver.a_star().clone())?;
            solver.solve_from(f)?
        }
        None => solver.solve()?,
    };
    let tie_check = if exhaustive_ties {
        let reports = solver::solve_exhaustive_ties(&model, tol)?;
        let reference = &report.optimal_profile;
        let max_difference = reports
            .iter()
            .flat_map(|r| {
                (1..=model.m() + 1).map(move |i| (r.optimal_profile.ep(i) - reference.ep(i)).abs())
            })
            .fold(0.0, f64::max);
        Some(TieCheck {
            tails: reports.iter().map(|r| r.a_star.clone()).collect(),
            max_difference,
            consistent: max_difference <= TIE_AGREEMENT_TOL,
        })
    } else {
        None
    };

    if json {
        let out = SolveOutput {
            m_star: report.m_star,
            rho_star: report.rho_star,
            a_star: &report.a_star,
            tied: &report.tied,
            optimal_policy: policy_map(&report.optimal_policy),
            optimal_profile: (&report.optimal_profile).into(),
            oe_residual: report.oe_residual,
            iteration_count: report.iterations.len(),
            dont_care: &report.dont_care,
            iterations: trace.then(|| {
                report
                    .iterations
                    .iter()
                    .map(|it| TraceEntry {
                        policy: policy_map(&it.policy),
                        profile: (&it.profile).into(),
                        improved_states: &it.improved_states,
                    })
                    .collect()
            }),
            tie_check,
        };
        return Ok(to_json(&out));
    }

    let mut s = String::new();
    writeln!(
        s,
        "m_* = {}  rho_* = {:.17}  a_* = {}",
        report.m_star, report.rho_star, report.a_star
    )
    .unwrap();
    writeln!(s, "optimal policy: {}", report.optimal_policy).unwrap();
    if !report.dont_care.is_empty() {
        let states: Vec<String> = report.dont_care.iter().map(usize::to_string).collect();
        writeln!(s, "don't-care states: {}", states.join(", ")).unwrap();
    }
    writeln!(s, "minimal extinction probabilities:").unwrap();
    profile_lines(&mut s, &report.optimal_profile, 3);
    writeln!(s, "optimality residual: {:.3e}", report.oe_residual).unwrap();
    writeln!(s, "policy evaluations: {}", report.iterations.len()).unwrap();
    if trace {
        for (n, it) in report.iterations.iter().enumerate() {
            let head: Vec<String> = (1..=it.profile.m())
                .map(|i| format!("{:.12}", it.profile.ep(i)))
                .collect();
            writeln!(
                s,
                "  [{n}] {}  ep = ({})  improved: {:?}",
                it.policy,
                head.join(", "),
                it.improved_states
            )
            .unwrap();
        }
    }
    if let Some(tc) = tie_check {
        let tails: Vec<&str> = tc.tails.iter().map(ActionId::as_str).collect();
        writeln!(
            s,
            "tie check over {}: max difference {:.3e} ({})",
            tails.join(", "),
            tc.max_difference,
            if tc.consistent {
                "consistent"
            } else {
                "INCONSISTENT"
            }
        )
        .unwrap();
    }
    Ok(s)
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    policy: BTreeMap<String, &'a ActionId>,
    profile: ProfileOutput,
}

pub fn cmd_evaluate(
    path: &Path,
    policy: &str,
    tol: f64,
    json: bool,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let model = load_cbp(path)?;
    let solver = CbpSolver::new(&model, tol)?;
    let f = Policy::parse_assignments(&model, policy, solver.a_star().clone())?;
    let profile = solver.evaluate_policy(&f)?;
    if json {
        return Ok(to_json(&EvaluateOutput {
            policy: policy_map(&f),
            profile: (&profile).into(),
        }));
    }
    let mut s = String::new();
    writeln!(s, "policy: {f}").unwrap();
    profile_lines(&mut s, &profile, 3);
    writeln!(s, "system residual: {:.3e}", profile.system_residual()).unwrap();
    Ok(s)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    policy: BTreeMap<String, &'a ActionId>,
    start: u64,
    caps: SimCaps,
    seed: u64,
    estimate: EpEstimate,
    std_error: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    path: &Path,
    policy: &str,
    tail: Option<&str>,
    start: u64,
    n: u64,
    caps: SimCaps,
    seed: u64,
    json: bool,
) -> Result<CmdOutput, CliError> {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    if start == 0 {
        return Err(CliError::usage("--start must be at least 1"));
    }
    let model = load_cbp(path)?;
    let tail = match tail {
        Some(t) => ActionId::new(t),
        None => gen_fn::rho_star(&model, gen_fn::DEFAULT_TOL)?.a_star,
    };
    let f = Policy::parse_assignments(&model, policy, tail)?;
    let estimate = sim::estimate_ep(&model, &f, start, n, caps, seed)?;
    if json {
        return Ok(to_json(&SimulateOutput {
            policy: policy_map(&f),
            start,
            caps,
            seed,
            estimate,
            std_error: estimate.std_error(),
        }));
    }
    let mut s = String::new();
    writeln!(
        s,
        "policy: {f}  start: {start}  trajectories: {n}  seed: {seed}"
    )
    .unwrap();
    writeln!(
        s,
        "p_hat = {:.6}  95% Wilson [{:.6}, {:.6}]  std error {:.2e}",
        estimate.p_hat,
        estimate.ci_low,
        estimate.ci_high,
        estimate.std_error()
    )
    .unwrap();
    writeln!(
        s,
        "extinct: {}  censored: {}",
        estimate.extinct, estimate.censored
    )
    .unwrap();
    Ok(s)
}

#[derive(Serialize)]
struct GeneralOutput<'a> {
    h: BTreeMap<&'a str, f64>,
    policy: BTreeMap<&'a str, &'a ActionId>,
    iterations: usize,
    delta: f64,
}

pub fn cmd_general(
    path: &Path,
    tol: f64,
    max_iter: usize,
    truncate: Option<usize>,
    json: bool,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let model = match (load_model(path)?, truncate) {
        (Model::General(g), None) => g,
        (Model::Cbp(c), Some(n)) => general::cbp_truncate(&c, Truncation::Full, n)?,
        (Model::Cbp(_), None) => {
            return Err(CliError::usage(
                "a branching model needs --truncate N for value iteration",
            ))
        }
        (Model::General(_), Some(_)) => {
            return Err(CliError::usage(
                "--truncate applies only to branching models",
            ))
        }
    };
    let sol: HittingSolution = general::value_iterate(&model, tol, max_iter)?;
    let names = model.state_names();
    if json {
        return Ok(to_json(&GeneralOutput {
            h: names
                .iter()
                .map(String::as_str)
                .zip(sol.h.iter().copied())
                .collect(),
            policy: names
                .iter()
                .zip(&sol.policy)
                .filter_map(|(n, a)| a.as_ref().map(|a| (n.as_str(), a)))
                .collect(),
            iterations: sol.iterations,
            delta: sol.delta,
        }));
    }
    let mut s = String::new();
    writeln!(s, "{:<12} {:>22} {:>10}", "state", "h", "action").unwrap();
    for ((name, h), a) in names.iter().zip(&sol.h).zip(&sol.policy) {
        let action = a.as_ref().map_or("-", ActionId::as_str);
        writeln!(s, "{name:<12} {h:>22.17} {action:>10}").unwrap();
    }
    writeln!(
        s,
        "sweeps: {}  final change: {:.3e}",
        sol.iterations, sol.delta
    )
    .unwrap();
    Ok(s)
}

#[derive(Serialize)]
struct BruteRow<'a> {
    policy: BTreeMap<String, &'a ActionId>,
    ep: BTreeMap<usize, f64>,
}

#[derive(Serialize)]
struct BruteOutput<'a> {
    profile: ProfileOutput,
    policies: Vec<BruteRow<'a>>,
}

pub fn cmd_brute(path: &Path, cap: u128, tol: f64, json: bool) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let model = load_cbp(path)?;
    let solver = CbpSolver::new(&model, tol)?;
    let brute = solver.brute_force(cap)?;
    if json {
        return Ok(to_json(&BruteOutput {
            profile: (&brute.profile).into(),
            policies: brute
                .table
                .iter()
                .map(|(p, e)| BruteRow {
                    policy: policy_map(p),
                    ep: (1..=e.m()).map(|i| (i, e.ep(i))).collect(),
                })
                .collect(),
        }));
    }
    let mut s = String::new();
    for (p, e) in &brute.table {
        let head: Vec<String> = (1..=e.m()).map(|i| format!("{:.12}", e.ep(i))).collect();
        writeln!(s, "{p}  ep = ({})", head.join(", ")).unwrap();
    }
    writeln!(
        s,
        "componentwise minimum over {} policies:",
        brute.table.len()
    )
    .unwrap();
    profile_lines(&mut s, &brute.profile, 3);
    Ok(s)
}
