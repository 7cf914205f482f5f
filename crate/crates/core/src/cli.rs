//! Command-line front door: experiment recipes that write CSV/JSON artifacts.
//!
//! Every run resolves its configuration (JSON file, overridden by flags),
//! echoes it to `run.json` in the output directory, and writes byte-identical
//! primary outputs for identical config + seed. Exit codes: 0 success,
//! 1 config/IO error, 2 out-of-distribution refusal, 3 numerical divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::certify::{
    adversarial_bound, attack_search, certify_observation, estimate_posterior_lipschitz,
    measured_w1_at, CertifyConfig, GeneratorModel,
};
use crate::condflow::{
    train_from, trace_to_csv, truncation_mass, Checkpoint, CondFlow, FlowArchitecture,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::estimators::{estimator_sweep, sweep_to_csv, TwoModeConfig};
use crate::gmm::LinearGaussianProblem;
use crate::util::{linspace, mean_stderr, spearman};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "gencert", version, about = "Pointwise Wasserstein robustness toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; CLI flags override its fields
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Replace the generator by the analytic posterior sampler
    #[arg(long, global = true)]
    pub oracle_generator: bool,

    /// Use the full-protocol training configuration
    #[arg(long, global = true)]
    pub paper_scale: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Posterior density curves with MAP/MMSE markers
    Posterior,
    /// MAP/MMSE sweeps across noise levels
    Estimators,
    /// Train a conditional flow, writing checkpoints and a trace
    Train,
    /// Certify a generator at given observations
    Certify,
    /// Adversarial attack search plus the corollary bound
    Attack,
    /// Latent-truncation gap and mass per radius
    Truncation,
    /// Join a training trace into (loss, epsilon_hat) figure data
    AppendixC,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Posterior => "posterior",
            Command::Estimators => "estimators",
            Command::Train => "train",
            Command::Certify => "certify",
            Command::Attack => "attack",
            Command::Truncation => "truncation",
            Command::AppendixC => "appendix-c",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::OutOfDistribution { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn threads() -> usize {
    std::env::var("TOOL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_run_json<T: Serialize>(
    out: &Path,
    subcommand: &str,
    seed: u64,
    config: &T,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let doc = json!({
        "format_version": RUN_FORMAT_VERSION,
        "subcommand": subcommand,
        "seed": seed,
        "threads": threads(),
        "config": serde_json::to_value(config)?,
    });
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    // self-check: a run directory without run.json is a failed run
    if !path.is_file() {
        return Err(Error::Config("run.json was not written".into()));
    }
    Ok(())
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(out.join(name), text)?;
    Ok(())
}

fn load_checkpoint(path: &str) -> Result<CondFlow> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    ck.into_flow()
}

fn vec_to_obs(v: &[f64], n: usize, what: &'static str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what,
            expected: n,
            got: v.len(),
        });
    }
    Ok(DVector::from_column_slice(v))
}

// ---------------------------------------------------------------------------
// posterior
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorConfig {
    pub prior_std: f64,
    pub noise_std: f64,
    pub y_values: Vec<f64>,
    pub grid_points: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            prior_std: 0.05,
            noise_std: 0.1,
            y_values: vec![-0.05, -0.01, 0.01, 0.05],
            grid_points: 1201,
            seed: 0,
            out: None,
        }
    }
}

fn cmd_posterior(cfg: &PosteriorConfig, out: &Path) -> Result<()> {
    if cfg.y_values.is_empty() || cfg.grid_points < 3 {
        return Err(Error::Config("need y_values and grid_points >= 3".into()));
    }
    let problem = LinearGaussianProblem::two_mode(cfg.prior_std, cfg.noise_std)?;
    let est = TwoModeConfig::new(cfg.prior_std, cfg.noise_std)?;
    let mut markers = String::from("y,map,mmse\n");
    for (i, &y) in cfg.y_values.iter().enumerate() {
        let yv = DVector::from_element(1, y);
        let post = problem.posterior(&yv)?;
        let (lo, hi) = post.support_window_1d(10.0);
        let mut csv = String::from("x,density\n");
        for x in linspace(lo, hi, cfg.grid_points) {
            let d = post.density(&DVector::from_element(1, x))?;
            csv.push_str(&format!("{x},{d}\n"));
        }
        write_text(out, &format!("posterior_{i}.csv"), &csv)?;
        markers.push_str(&format!(
            "{y},{},{}\n",
            crate::estimators::map_estimate(&est, y),
            crate::estimators::mmse_closed_form(&est, y)
        ));
    }
    write_text(out, "markers.csv", &markers)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// estimators
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorsConfig {
    pub prior_std: f64,
    pub sigma_sq: Vec<f64>,
    pub y_grid: Vec<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for EstimatorsConfig {
    fn default() -> Self {
        Self {
            prior_std: 0.05,
            sigma_sq: vec![0.01, 0.1, 0.3],
            y_grid: linspace(-0.1, 0.1, 401),
            seed: 0,
            out: None,
        }
    }
}

fn cmd_estimators(cfg: &EstimatorsConfig, out: &Path) -> Result<()> {
    if cfg.sigma_sq.is_empty() {
        return Err(Error::Config("sigma_sq list is empty".into()));
    }
    for (i, &s2) in cfg.sigma_sq.iter().enumerate() {
        if !(s2 > 0.0) {
            return Err(Error::Config(format!("sigma_sq[{i}] must be positive")));
        }
        let c = TwoModeConfig::new(cfg.prior_std, s2.sqrt())?;
        let rows = estimator_sweep(&c, &cfg.y_grid)?;
        write_text(out, &format!("estimators_{i}.csv"), &sweep_to_csv(&rows))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCliConfig {
    /// Defaults to the six-mode 2D problem (modes on a circle of radius 2,
    /// covariance 0.1·I, identity forward, σ = 0.5).
    pub problem: Option<LinearGaussianProblem>,
    pub blocks: usize,
    pub width: usize,
    pub clamp_alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_num_obs: usize,
    pub eval_samples: usize,
    pub resume: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        Self {
            problem: None,
            blocks: 3,
            width: 64,
            clamp_alpha: 1.9,
            steps: 5000,
            batch: 256,
            lr: 1e-3,
            eval_every: 500,
            eval_num_obs: 12,
            eval_samples: 400,
            resume: None,
            seed: 0,
            out: None,
        }
    }
}

impl TrainCliConfig {
    fn apply_paper_scale(&mut self) {
        self.blocks = 10;
        self.width = 512;
        self.steps = 100_000;
        self.batch = 1024;
        self.lr = 1e-4;
        self.eval_num_obs = 30;
        self.eval_samples = 20_000;
    }
}

fn default_problem() -> Result<LinearGaussianProblem> {
    LinearGaussianProblem::six_mode_2d(0.1, 0.5)
}

fn cmd_train(cfg: &TrainCliConfig, out: &Path) -> Result<()> {
    let problem = match &cfg.problem {
        Some(p) => p.clone(),
        None => default_problem()?,
    };
    let tc = TrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        eval_num_obs: cfg.eval_num_obs,
        eval_samples: cfg.eval_samples,
    };
    let (init, start_step) = match &cfg.resume {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let ck: Checkpoint =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
            let step = ck.step;
            (ck.into_flow()?, step)
        }
        None => {
            let arch = FlowArchitecture::new(
                problem.data_dim(),
                problem.obs_dim(),
                cfg.blocks,
                cfg.width,
                cfg.clamp_alpha,
            )?;
            (CondFlow::init(arch, cfg.seed), 0)
        }
    };
    let result = train_from(&problem, init, start_step, &tc)?;
    for (step, flow) in &result.checkpoints {
        let ck = flow.to_checkpoint(cfg.seed, *step);
        write_text(
            out,
            &format!("checkpoint_{step}.json"),
            &(serde_json::to_string_pretty(&ck)? + "\n"),
        )?;
    }
    write_text(out, "trace.csv", &trace_to_csv(&result.trace))?;
    if let Some(step) = result.diverged_at {
        return Err(Error::Divergence { step });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// certify / attack
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyCliConfig {
    pub problem: Option<LinearGaussianProblem>,
    pub checkpoint: Option<String>,
    pub y_tilde: Vec<Vec<f64>>,
    pub certify: CertifyConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for CertifyCliConfig {
    fn default() -> Self {
        Self {
            problem: None,
            checkpoint: None,
            y_tilde: vec![vec![0.5]],
            certify: CertifyConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

fn certify_problem(cfg: &Option<LinearGaussianProblem>) -> Result<LinearGaussianProblem> {
    match cfg {
        Some(p) => Ok(p.clone()),
        None => LinearGaussianProblem::two_mode(0.3, 0.4),
    }
}

fn resolve_generator<'a>(
    checkpoint: &Option<String>,
    oracle: bool,
    problem: &'a LinearGaussianProblem,
    flow_slot: &'a mut Option<CondFlow>,
) -> Result<GeneratorModel<'a>> {
    if oracle {
        return Ok(GeneratorModel::Oracle(problem));
    }
    match checkpoint {
        Some(path) => {
            *flow_slot = Some(load_checkpoint(path)?);
            Ok(GeneratorModel::Flow(flow_slot.as_ref().unwrap()))
        }
        None => Err(Error::Config(
            "no generator: pass a checkpoint in the config or use --oracle-generator".into(),
        )),
    }
}

fn cmd_certify(cfg: &CertifyCliConfig, out: &Path, oracle: bool) -> Result<()> {
    let problem = certify_problem(&cfg.problem)?;
    let mut flow_slot = None;
    let gen = resolve_generator(&cfg.checkpoint, oracle, &problem, &mut flow_slot)?;
    let mut ccfg = cfg.certify;
    ccfg.seed = cfg.seed;
    for (i, y) in cfg.y_tilde.iter().enumerate() {
        let yv = vec_to_obs(y, problem.obs_dim(), "y_tilde")?;
        let report = certify_observation(&gen, &problem, &yv, &ccfg)?;
        println!(
            "y_tilde {:?}: measured W1 = {:.6} ± {:.6}, bound_13 = {:?}, satisfied = {:?}",
            y, report.measured_w1, report.measured_w1_stderr, report.certificate.bound_13,
            report.bound_satisfied
        );
        write_text(
            out,
            &format!("certificate_{i}.json"),
            &(serde_json::to_string_pretty(&report)? + "\n"),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackCliConfig {
    pub problem: Option<LinearGaussianProblem>,
    pub checkpoint: Option<String>,
    pub y_tilde: Vec<f64>,
    pub attack_radius: f64,
    pub budget: usize,
    pub certify: CertifyConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for AttackCliConfig {
    fn default() -> Self {
        Self {
            problem: None,
            checkpoint: None,
            y_tilde: vec![0.5],
            attack_radius: 0.2,
            budget: 40,
            certify: CertifyConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

fn cmd_attack(cfg: &AttackCliConfig, out: &Path, oracle: bool) -> Result<()> {
    let problem = certify_problem(&cfg.problem)?;
    let mut flow_slot = None;
    let gen = resolve_generator(&cfg.checkpoint, oracle, &problem, &mut flow_slot)?;
    let mut ccfg = cfg.certify;
    ccfg.seed = cfg.seed;
    let y = vec_to_obs(&cfg.y_tilde, problem.obs_dim(), "y_tilde")?;
    let b = cfg.attack_radius;

    let attack = if b > 0.0 {
        attack_search(&gen, &problem, &y, b, cfg.budget, &ccfg)?
    } else {
        let (w1, se) = measured_w1_at(&gen, &problem, &y, ccfg.w1_samples, ccfg.w1_reps, ccfg.seed)?;
        crate::certify::AttackResult {
            delta: vec![0.0; problem.obs_dim()],
            attained_w1: w1,
            attained_w1_stderr: se,
            baseline_w1: w1,
            evaluations: 1,
        }
    };
    let y_adv = &y + DVector::from_column_slice(&attack.delta);
    let report = certify_observation(&gen, &problem, &y_adv, &ccfg)?;
    let c_attack =
        estimate_posterior_lipschitz(&problem, y.norm() + b, ccfg.lipschitz_pairs, ccfg.seed ^ 0xB)?;
    let bound = adversarial_bound(&report.certificate.inputs, c_attack, b)?;
    let doc = json!({
        "attack": attack,
        "c_attack": c_attack,
        "certificate_at_adv": report,
        "adversarial_bound": bound,
        "margin": bound - attack.attained_w1,
    });
    println!(
        "attack B = {b}: attained W1 = {:.6} ± {:.6}, bound = {bound:.6}",
        attack.attained_w1, attack.attained_w1_stderr
    );
    write_text(out, "attack.json", &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// truncation
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncationCliConfig {
    pub checkpoint: Option<String>,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub width: usize,
    pub clamp_alpha: f64,
    pub y: Vec<f64>,
    pub radii: Vec<f64>,
    pub count: usize,
    pub reps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TruncationCliConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data_dim: 1,
            cond_dim: 1,
            blocks: 3,
            width: 64,
            clamp_alpha: 1.9,
            y: vec![0.5],
            radii: vec![1.0, 2.0, 4.0, 8.0],
            count: 2000,
            reps: 4,
            seed: 0,
            out: None,
        }
    }
}

fn cmd_truncation(cfg: &TruncationCliConfig, out: &Path) -> Result<()> {
    if cfg.radii.is_empty() || cfg.reps == 0 {
        return Err(Error::Config("need radii and reps >= 1".into()));
    }
    let flow = match &cfg.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => CondFlow::init(
            FlowArchitecture::new(cfg.data_dim, cfg.cond_dim, cfg.blocks, cfg.width, cfg.clamp_alpha)?,
            cfg.seed,
        ),
    };
    let y = vec_to_obs(&cfg.y, flow.arch.cond_dim, "truncation condition")?;
    let d = flow.arch.latent_dim();
    let mut csv = String::from("radius,mass,gap,gap_stderr\n");
    for &r in &cfg.radii {
        let mut gaps = Vec::with_capacity(cfg.reps);
        for k in 0..cfg.reps {
            gaps.push(flow.truncation_gap(&y, r, cfg.count, cfg.seed ^ (0x6A7 + k as u64))?);
        }
        let (gap, se) = mean_stderr(&gaps);
        csv.push_str(&format!("{r},{},{gap},{se}\n", truncation_mass(r, d)));
    }
    write_text(out, "truncation.csv", &csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// appendix-c
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppendixCConfig {
    pub run_dir: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn cmd_appendix_c(cfg: &AppendixCConfig, out: &Path) -> Result<()> {
    let run_dir = cfg
        .run_dir
        .as_ref()
        .ok_or_else(|| Error::Config("appendix-c needs run_dir (a finished train run)".into()))?;
    let trace = fs::read_to_string(run_dir.join("trace.csv"))?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (i, line) in trace.lines().enumerate() {
        if i == 0 {
            if line != "step,loss,epsilon_hat,epsilon_hat_stderr" {
                return Err(Error::Config("unrecognized trace.csv header".into()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Config(format!("malformed trace line {}", i + 1)));
        }
        let loss: f64 = cols[1].parse().map_err(|_| Error::Config("bad loss".into()))?;
        let eps: f64 = cols[2].parse().map_err(|_| Error::Config("bad epsilon".into()))?;
        pairs.push((loss, eps));
    }
    if pairs.is_empty() {
        return Err(Error::Config("trace.csv has no data rows".into()));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut csv = String::from("loss,epsilon_hat\n");
    for (l, e) in &pairs {
        csv.push_str(&format!("{l},{e}\n"));
    }
    write_text(out, "appendix_c.csv", &csv)?;
    let (ls, es): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
    if ls.len() >= 2 {
        println!("spearman(loss, epsilon_hat) = {:.4}", spearman(&ls, &es));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

fn resolve_out(flag: &Option<PathBuf>, cfg_out: &Option<PathBuf>, sub: &str) -> PathBuf {
    flag.clone()
        .or_else(|| cfg_out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(sub))
}

pub fn run(cli: Cli) -> Result<()> {
    let sub = cli.command.name();
    macro_rules! dispatch {
        ($ty:ty, $body:expr) => {{
            let mut cfg: $ty = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = resolve_out(&cli.out, &cfg.out, sub);
            fs::create_dir_all(&out)?;
            let run = $body;
            let r = run(&cfg, &out);
            // run.json is written even for refused runs so the attempt is
            // auditable; primary outputs exist only on success
            write_run_json(&out, sub, cfg.seed, &cfg)?;
            r
        }};
    }
    match &cli.command {
        Command::Posterior => dispatch!(PosteriorConfig, |c: &PosteriorConfig, o: &Path| {
            cmd_posterior(c, o)
        }),
        Command::Estimators => dispatch!(EstimatorsConfig, |c: &EstimatorsConfig, o: &Path| {
            cmd_estimators(c, o)
        }),
        Command::Train => {
            let mut cfg: TrainCliConfig = load_config(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if cli.paper_scale {
                cfg.apply_paper_scale();
            }
            let out = resolve_out(&cli.out, &cfg.out, sub);
            fs::create_dir_all(&out)?;
            let r = cmd_train(&cfg, &out);
            write_run_json(&out, sub, cfg.seed, &cfg)?;
            r
        }
        Command::Certify => dispatch!(CertifyCliConfig, |c: &CertifyCliConfig, o: &Path| {
            cmd_certify(c, o, cli.oracle_generator)
        }),
        Command::Attack => dispatch!(AttackCliConfig, |c: &AttackCliConfig, o: &Path| {
            cmd_attack(c, o, cli.oracle_generator)
        }),
        Command::Truncation => dispatch!(TruncationCliConfig, |c: &TruncationCliConfig, o: &Path| {
            cmd_truncation(c, o)
        }),
        Command::AppendixC => dispatch!(AppendixCConfig, |c: &AppendixCConfig, o: &Path| {
            cmd_appendix_c(c, o)
        }),
    }
}
