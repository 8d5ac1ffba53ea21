//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{certainty_equivalent, value_report};
use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::market_sim::{EnsembleMeta, PathEnsemble, StrategyTrace};
use crate::params::{ModelParams, RawParams};
use crate::policy::{run_policy, Policy, StandardPolicy};
use crate::verify::{oracle_ladders, run_suite, SuiteConfig, LADDER};

/// Everything a run needs; the JSON config file uses exactly these field
/// names and any field may be omitted.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lambda_impact: f64,
    pub alpha: f64,
    pub horizon_T: f64,
    pub lookahead_delta: f64,
    pub phi0: f64,
    pub n_paths: usize,
    /// Grid steps on `[0, T]`.
    pub N: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub policies: Vec<StandardPolicy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = RawParams::default();
        RunConfig {
            s0: p.s0,
            mu: p.mu,
            sigma: p.sigma,
            lambda_impact: p.lambda_impact,
            alpha: p.alpha,
            horizon_T: p.horizon_T,
            lookahead_delta: p.lookahead_delta,
            phi0: p.phi0,
            n_paths: 100,
            N: 1000,
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 0,
            policies: StandardPolicy::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::try_from(RawParams {
            s0: self.s0,
            mu: self.mu,
            sigma: self.sigma,
            lambda_impact: self.lambda_impact,
            alpha: self.alpha,
            horizon_T: self.horizon_T,
            lookahead_delta: self.lookahead_delta,
            phi0: self.phi0,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "lookahead", version, about = "Optimal investment with a peek at future prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate price paths and policy traces; writes paths.csv, traces.csv and meta.json.
    Simulate(ConfigArgs),
    /// Print closed-form primal and dual values, the certainty equivalent and a Monte Carlo check as JSON.
    Value {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the Monte Carlo cross-check.
        #[arg(long)]
        no_mc: bool,
    },
    /// Print the certainty equivalent as a function of the lookahead as CSV.
    Ce {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Lookahead values [default: 0, 0.25, ..., 2].
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        deltas: Option<Vec<f64>>,
    },
    /// Run the acceptance suite and print a JSON report; exits 0 iff every criterion passes.
    Verify(VerifyArgs),
    /// Print dual-oracle refinement ladders as JSON.
    DualOracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid sizes of the ladder [default: 64, 128, ..., 4096].
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
    },
    /// Print kernel tables on a triangular grid as CSV.
    KernelsDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid points per axis.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

/// Command-line overrides of [`RunConfig`] fields.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    s0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mu: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda_impact: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long = "horizon-T", alias = "horizon", allow_negative_numbers = true)]
    horizon_t: Option<f64>,
    #[arg(long, alias = "delta", allow_negative_numbers = true)]
    lookahead_delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    phi0: Option<f64>,
    #[arg(long)]
    n_paths: Option<usize>,
    /// Grid steps on [0, T].
    #[arg(short = 'N', long = "steps")]
    n_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    policies: Option<Vec<StandardPolicy>>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        apply!(s0 => s0, mu => mu, sigma => sigma, lambda_impact => lambda_impact, alpha => alpha,
            horizon_t => horizon_T, lookahead_delta => lookahead_delta, phi0 => phi0, n_paths => n_paths,
            n_steps => N, seed => seed, out_dir => out_dir, workers => workers, policies => policies);
        c.params()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Paths per Monte Carlo estimate.
    #[arg(long, default_value_t = SuiteConfig::default().mc_paths)]
    mc_paths: usize,
    /// Smaller Monte Carlo runs (20000 paths) for a fast smoke check.
    #[arg(long, conflicts_with = "mc_paths")]
    quick: bool,
    #[arg(long, default_value_t = SuiteConfig::default().seed)]
    seed: u64,
    /// Comma-separated criterion ids, e.g. A1,A8.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Evaluate the resolvent with the wrong sign (mutation check).
    #[arg(long, hide = true)]
    flip_resolvent: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code: 0 success, 1 configuration, 2 IO, 3 numeric failure or a
/// failed verification.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Simulate(args) => {
            let cfg = args.resolve()?;
            with_workers(cfg.workers, || cmd_simulate(&cfg))?;
            Ok(0)
        }
        Command::Value { cfg, no_mc } => {
            let cfg = cfg.resolve()?;
            let p = cfg.params()?;
            let mc = (!no_mc).then_some((cfg.n_paths, cfg.N, cfg.seed));
            let report = with_workers(cfg.workers, || value_report(&p, mc))?;
            print_json(out, &report)?;
            Ok(0)
        }
        Command::Ce { cfg, deltas } => {
            let cfg = cfg.resolve()?;
            let p = cfg.params()?;
            let deltas = deltas.unwrap_or_else(|| (0..=8).map(|i| i as f64 * 0.25).collect());
            writeln!(out, "lookahead_delta,certainty_equivalent")?;
            for d in deltas {
                let q = p.to_builder().delta(d).build()?;
                writeln!(out, "{d:?},{:?}", certainty_equivalent(&q))?;
            }
            Ok(0)
        }
        Command::Verify(args) => {
            let cfg = SuiteConfig {
                mc_paths: if args.quick { 20_000 } else { args.mc_paths },
                seed: args.seed,
                flip_resolvent: args.flip_resolvent,
            };
            let report = with_workers(args.workers, || Ok(run_suite(&cfg, &args.only)))?;
            for c in &report.criteria {
                eprintln!("{}", c.line());
            }
            print_json(out, &report)?;
            Ok(if report.all_passed { 0 } else { 3 })
        }
        Command::DualOracle { cfg, m } => {
            let cfg = cfg.resolve()?;
            let p = cfg.params()?;
            let ms = m.unwrap_or_else(|| LADDER.to_vec());
            if ms.is_empty() || ms.iter().any(|&m| m < 2) {
                return Err(Error::Config("ladder sizes must be at least 2".into()));
            }
            let ladders = with_workers(cfg.workers, || oracle_ladders(&p, &ms))?;
            print_json(out, &ladders)?;
            Ok(0)
        }
        Command::KernelsDump { cfg, points } => {
            let cfg = cfg.resolve()?;
            if points < 2 {
                return Err(Error::Config("points must be at least 2".into()));
            }
            let ks = KernelSet::from_reduced(&cfg.params()?.reduce());
            kernels_dump(&ks, points, out)?;
            Ok(0)
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Writes `t, s, l_hat, k_hat, residual` for grid pairs `s <= t`.
pub fn kernels_dump(ks: &KernelSet, points: usize, out: &mut dyn Write) -> Result<()> {
    let h = ks.horizon() / (points - 1) as f64;
    let pairs: Vec<(f64, f64)> =
        (0..points).flat_map(|i| (0..=i).map(move |j| (i as f64 * h, j as f64 * h))).collect();
    let rows: Vec<[f64; 5]> = pairs
        .par_iter()
        .map(|&(t, s)| [t, s, ks.l_hat(t, s), ks.k_hat(t, s), ks.resolvent_residual(t, s)])
        .collect();
    writeln!(out, "t,s,l_hat,k_hat,residual")?;
    for r in rows {
        writeln!(out, "{:?},{:?},{:?},{:?},{:?}", r[0], r[1], r[2], r[3], r[4])?;
    }
    Ok(())
}

/// Contents of `meta.json` written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationMeta {
    pub version: String,
    pub config: RunConfig,
    pub ensemble: EnsembleMeta,
    pub policies: Vec<PolicySummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: StandardPolicy,
    pub mean_terminal_wealth: f64,
    pub mean_utility: f64,
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    fs::File::create(&path).map(BufWriter::new).map_err(|e| with_path(&path, e))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let p = cfg.params()?;
    if cfg.n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    let ensemble = PathEnsemble::simulate(&p, cfg.n_paths, cfg.N, cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| with_path(&cfg.out_dir, e))?;

    let mut paths = create(&cfg.out_dir, "paths.csv")?;
    writeln!(paths, "path,t,S")?;
    let times = ensemble.grid.times();
    for (i, prices) in ensemble.prices.iter().enumerate() {
        for (t, s) in times.iter().zip(prices) {
            writeln!(paths, "{i},{t:?},{s:?}")?;
        }
    }
    paths.flush()?;

    let mut traces = create(&cfg.out_dir, "traces.csv")?;
    writeln!(traces, "policy,path,t,S_t,S_bar,upsilon,phi,Phi,frontrun_term,merton_term")?;
    let mut summaries = Vec::new();
    for policy in &cfg.policies {
        let runs = ensemble
            .prices
            .par_iter()
            .map(|path| run_policy(path, &ensemble.grid, &p, policy))
            .collect::<Result<Vec<StrategyTrace>>>()?;
        for (i, tr) in runs.iter().enumerate() {
            write_trace(&mut traces, policy.name(), i, tr)?;
        }
        let n = runs.len() as f64;
        summaries.push(PolicySummary {
            policy: *policy,
            mean_terminal_wealth: runs.iter().map(|r| r.pnl.total).sum::<f64>() / n,
            mean_utility: runs.iter().map(|r| crate::analytics::utility(p.alpha(), r.pnl.total).0).sum::<f64>() / n,
        });
    }
    traces.flush()?;

    let meta = SimulationMeta {
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        ensemble: ensemble.meta(),
        policies: summaries,
    };
    let mut f = create(&cfg.out_dir, "meta.json")?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Rate columns are empty on the terminal row.
fn write_trace(w: &mut impl Write, policy: &str, path: usize, tr: &StrategyTrace) -> Result<()> {
    for k in 0..tr.t.len() {
        write!(w, "{policy},{path},{:?},{:?},{:?},{:?},", tr.t[k], tr.price[k], tr.s_bar[k], tr.upsilon[k])?;
        match tr.phi.get(k) {
            Some(phi) => writeln!(w, "{phi:?},{:?},{:?},{:?}", tr.position[k], tr.frontrun[k], tr.merton[k])?,
            None => writeln!(w, ",{:?},,", tr.position[k])?,
        }
    }
    Ok(())
}
