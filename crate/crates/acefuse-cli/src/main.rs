use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acefuse::data::{load_csv, DatasetSchema, Design, FusedDataset};
use acefuse::design::{optimal_allocation, AllocationProblem};
use acefuse::estimators::{error_prone_pair, initial_estimate, EstimatorOptions, Method, OutcomeLink, Target};
use acefuse::fusion::{
    fuse, fuse_ratio_estimand, sensitivity_curve, ArmMeans, BootstrapSpec, FusionInputs, FusionResult,
    RatioEstimand, SensitivityPoint, VarianceSource,
};
use acefuse::sim::{report_csv, run_monte_carlo, SimConfig, SimReport};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "acefuse", version, about = "Fuse validation and main data to estimate average causal effects")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fused estimate on a dataset.
    Estimate(EstimateArgs),
    /// Monte Carlo reproduction of the simulation study.
    Simulate(SimulateArgs),
    /// Optimal two-phase allocation.
    Plan(PlanArgs),
    /// Adjusted estimate over a grid of assumed error-prone shifts.
    Sensitivity(SensitivityArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum VarianceArg {
    Analytic,
    Bootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EstimandArg {
    Ate,
    Logcrr,
    Logcor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RegimeArg {
    Srs,
    KnownPi,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    /// JSON mapping roles (id, treatment, outcome, x, u, validation, pi) to column names.
    #[arg(long, required_unless_present = "config")]
    schema: Option<PathBuf>,
    /// Comma-separated initial methods: reg, ipw, aipw, match.
    #[arg(long, default_value = "aipw")]
    method: String,
    /// Comma-separated error-prone methods; defaults to the initial method.
    #[arg(long)]
    ep_methods: Option<String>,
    #[arg(long, value_enum, default_value = "analytic")]
    variance: VarianceArg,
    #[arg(long, default_value_t = 500)]
    boot_reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value = "ate")]
    estimand: EstimandArg,
    #[arg(long, value_enum, default_value = "srs")]
    regime: RegimeArg,
    /// Number of matches for the matching estimator.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Replay the `config` object of an earlier report.
    #[arg(long, conflicts_with_all = ["data", "schema"])]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    estimate: EstimateArgs,
    /// δ grid as start:end:step, applied to every error-prone component.
    #[arg(long)]
    delta_grid: String,
    /// Also write the curve as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Named preset; `paper` runs (n₁,n₂) = (1000,200) and (1000,500).
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    preset: Option<String>,
    /// SimConfig JSON file (one object or an array).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Override the replicate count.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the bootstrap size of every bootstrap source.
    #[arg(long)]
    boot_reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat CSV for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    c1: f64,
    #[arg(long)]
    c2: f64,
    #[arg(long)]
    budget: f64,
    #[arg(long)]
    r2: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything an estimate run depends on, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EstimateConfig {
    data: PathBuf,
    schema: DatasetSchema,
    methods: Vec<Method>,
    ep_methods: Option<Vec<Method>>,
    variance: VarianceArg,
    boot_reps: usize,
    seed: Option<u64>,
    level: f64,
    estimand: EstimandArg,
    regime: RegimeArg,
    m: usize,
}

#[derive(Serialize)]
struct Envelope<C: Serialize, R: Serialize> {
    version: &'static str,
    config_hash: String,
    seed: Option<u64>,
    config: C,
    #[serde(flatten)]
    body: R,
}

fn envelope<C: Serialize, R: Serialize>(config: C, seed: Option<u64>, body: R) -> anyhow::Result<Envelope<C, R>> {
    let canonical = serde_json::to_vec(&config)?;
    let config_hash = Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect();
    Ok(Envelope { version: VERSION, config_hash, seed, config, body })
}

#[derive(Serialize)]
struct MethodReport {
    method: Method,
    ep_methods: Vec<Method>,
    tau2: f64,
    tau1_ep: Vec<f64>,
    tau2_ep: Vec<f64>,
    fusion: FusionResult,
    variance_reduction_pct: f64,
}

#[derive(Serialize)]
struct EstimateBody {
    n1: usize,
    n2: usize,
    warnings: Vec<String>,
    results: Vec<MethodReport>,
}

#[derive(Serialize)]
struct SensitivityBody {
    results: Vec<SensitivityCurve>,
}

#[derive(Serialize)]
struct SensitivityCurve {
    method: Method,
    tau_hat: f64,
    tau2: f64,
    curve: Vec<SensitivityPoint>,
}

fn parse_methods(s: &str) -> anyhow::Result<Vec<Method>> {
    s.split(',')
        .map(|m| Method::parse(m.trim()).ok_or_else(|| acefuse::Error::InvalidInput(format!("unknown method '{m}'")).into()))
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| acefuse::Error::InvalidInput(format!("{}: {e}", path.display())).into())
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn estimate_config(a: &EstimateArgs) -> anyhow::Result<EstimateConfig> {
    if let Some(path) = &a.config {
        #[derive(Deserialize)]
        struct Wrapped {
            config: EstimateConfig,
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        // either a bare config or a report embedding one
        return serde_json::from_str::<EstimateConfig>(&text)
            .or_else(|_| serde_json::from_str::<Wrapped>(&text).map(|w| w.config))
            .map_err(|e| acefuse::Error::InvalidInput(format!("{}: {e}", path.display())).into());
    }
    let schema_path = a.schema.as_ref().ok_or_else(|| anyhow!("--schema is required"))?;
    Ok(EstimateConfig {
        data: a.data.clone().ok_or_else(|| anyhow!("--data is required"))?,
        schema: read_json(schema_path)?,
        methods: parse_methods(&a.method)?,
        ep_methods: a.ep_methods.as_deref().map(parse_methods).transpose()?,
        variance: a.variance,
        boot_reps: a.boot_reps,
        seed: a.seed,
        level: a.level,
        estimand: a.estimand,
        regime: a.regime,
        m: a.m,
    })
}

fn load(c: &EstimateConfig) -> anyhow::Result<FusedDataset> {
    match (c.regime, c.schema.pi.is_some()) {
        (RegimeArg::Srs, true) => {
            return Err(acefuse::Error::Data("inclusion probabilities require known-inclusion regime".into()).into())
        }
        (RegimeArg::KnownPi, false) => {
            return Err(acefuse::Error::Data("known-inclusion regime requires a pi column in the schema".into()).into())
        }
        _ => {}
    }
    let d = load_csv(&c.data, &c.schema)?;
    if c.estimand != EstimandArg::Ate && d.units().iter().any(|r| r.y != 0.0 && r.y != 1.0) {
        return Err(acefuse::Error::Data("log risk and odds ratios need a binary 0/1 outcome".into()).into());
    }
    Ok(d)
}

fn variance_source(c: &EstimateConfig, design: Design) -> anyhow::Result<VarianceSource> {
    Ok(match c.variance {
        VarianceArg::Analytic => VarianceSource::Analytic,
        VarianceArg::Bootstrap => {
            let seed = c
                .seed
                .ok_or_else(|| acefuse::Error::InvalidInput("bootstrap variance needs --seed".into()))?;
            VarianceSource::Bootstrap(BootstrapSpec::for_design(design, c.boot_reps, seed))
        }
    })
}

fn run_estimate(c: &EstimateConfig) -> anyhow::Result<EstimateBody> {
    let d = load(c)?;
    let source = variance_source(c, d.design())?;
    let mut opts = EstimatorOptions { m: c.m, ..EstimatorOptions::default() };
    let mut results = Vec::new();
    for &method in &c.methods {
        let eps = c.ep_methods.clone().unwrap_or_else(|| vec![method]);
        let report = match c.estimand {
            EstimandArg::Ate => {
                let tau2 = initial_estimate(&d, method, &opts)?;
                let ep_pairs = eps.iter().map(|&m| error_prone_pair(&d, m, &opts)).collect::<acefuse::Result<Vec<_>>>()?;
                let inputs = FusionInputs { tau2, ep_pairs, regime: d.design() };
                let fusion = fuse(&inputs, &source, c.level)?;
                MethodReport {
                    method,
                    ep_methods: eps,
                    tau2: inputs.tau2.point,
                    tau1_ep: inputs.ep_pairs.iter().map(|p| p.0.point).collect(),
                    tau2_ep: inputs.ep_pairs.iter().map(|p| p.1.point).collect(),
                    variance_reduction_pct: 100.0 * fusion.variance_reduction,
                    fusion,
                }
            }
            EstimandArg::Logcrr | EstimandArg::Logcor => {
                opts.outcome_link = OutcomeLink::Logistic;
                let estimand = if c.estimand == EstimandArg::Logcrr { RatioEstimand::LogCrr } else { RatioEstimand::LogCor };
                let arm = |a: u8| EstimatorOptions { target: Target::ArmMean(a), ..opts };
                let tau2 = ArmMeans {
                    treated: initial_estimate(&d, method, &arm(1))?,
                    control: initial_estimate(&d, method, &arm(0))?,
                };
                let mut ep_pairs = Vec::new();
                for &m in &eps {
                    let (m1, v1) = error_prone_pair(&d, m, &arm(1))?;
                    let (m0, v0) = error_prone_pair(&d, m, &arm(0))?;
                    ep_pairs.push((ArmMeans { treated: m1, control: m0 }, ArmMeans { treated: v1, control: v0 }));
                }
                let fusion = fuse_ratio_estimand(&tau2, &ep_pairs, d.design(), estimand, &source, c.level)?;
                let ep_diff = fusion.ep_diff.clone();
                let tau1_ep: Vec<f64> = ep_pairs
                    .iter()
                    .map(|(m, _)| acefuse::fusion::ratio_transform(&m.treated, &m.control, estimand).map(|e| e.point))
                    .collect::<acefuse::Result<_>>()?;
                MethodReport {
                    method,
                    ep_methods: eps,
                    tau2: fusion.tau2,
                    tau2_ep: tau1_ep.iter().zip(&ep_diff).map(|(a, b)| a + b).collect(),
                    tau1_ep,
                    variance_reduction_pct: 100.0 * fusion.variance_reduction,
                    fusion,
                }
            }
        };
        results.push(report);
    }
    Ok(EstimateBody { n1: d.n1(), n2: d.n2(), warnings: d.warnings().to_vec(), results })
}

fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    let bad = || acefuse::Error::InvalidInput(format!("delta grid '{s}' must be start:end:step with step > 0"));
    let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [a, b, step] = parts[..] else { return Err(bad().into()) };
    if !(step > 0.0) || b < a {
        return Err(bad().into());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

fn cmd_sensitivity(a: &SensitivityArgs) -> anyhow::Result<String> {
    let c = estimate_config(&a.estimate)?;
    let grid = parse_grid(&a.delta_grid)?;
    let body = run_estimate(&c)?;
    let mut curves = Vec::new();
    let mut csv = String::from("method,delta,tau_adj,lo,hi\n");
    for r in &body.results {
        let l = r.fusion.ep_diff.len();
        let deltas: Vec<Vec<f64>> = grid.iter().map(|&d| vec![d; l]).collect();
        let curve = sensitivity_curve(&r.fusion, &deltas)?;
        for p in &curve {
            csv.push_str(&format!("{},{},{},{},{}\n", r.method.short_name(), p.delta[0], p.tau_adj, p.ci.lo, p.ci.hi));
        }
        curves.push(SensitivityCurve { method: r.method, tau_hat: r.fusion.tau_hat, tau2: r.fusion.tau2, curve });
    }
    if let Some(p) = &a.csv {
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    #[derive(Serialize)]
    struct SensConfig<'a> {
        estimate: &'a EstimateConfig,
        delta_grid: &'a str,
    }
    let cfg = SensConfig { estimate: &c, delta_grid: &a.delta_grid };
    Ok(serde_json::to_string_pretty(&envelope(cfg, c.seed, SensitivityBody { results: curves })?)?)
}

fn sim_configs(a: &SimulateArgs) -> anyhow::Result<Vec<SimConfig>> {
    let mut configs = match (&a.preset, &a.config) {
        (Some(p), _) if p == "paper" => vec![SimConfig::paper(1000, 200, 2000, a.seed), SimConfig::paper(1000, 500, 2000, a.seed)],
        (Some(p), _) => return Err(acefuse::Error::InvalidInput(format!("unknown preset '{p}'")).into()),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Vec<SimConfig>>(&text)
                .or_else(|_| serde_json::from_str::<SimConfig>(&text).map(|c| vec![c]))
                .map_err(|e| acefuse::Error::InvalidInput(format!("{}: {e}", path.display())))?
        }
        (None, None) => bail!("either --preset or --config is required"),
    };
    for c in &mut configs {
        c.seed = a.seed;
        if let Some(r) = a.reps {
            c.reps = r;
        }
        if let Some(b) = a.boot_reps {
            for s in &mut c.variance_sources {
                if let acefuse::sim::SimVariance::Bootstrap { b: old } = s {
                    *old = b;
                }
            }
        }
    }
    Ok(configs)
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<String> {
    let configs = sim_configs(a)?;
    let reports: Vec<SimReport> = configs.iter().map(run_monte_carlo).collect::<acefuse::Result<_>>()?;
    for r in &reports {
        if r.flagged {
            eprintln!("warning: more than 1% of replicates failed for some estimator at n1={}, n2={}", r.config.n1, r.config.n2);
        }
    }
    if let Some(p) = &a.csv {
        let mut text = String::new();
        for (i, r) in reports.iter().enumerate() {
            let body = report_csv(r);
            let mut lines = body.lines();
            let header = lines.next().unwrap_or_default();
            if i == 0 {
                text.push_str("n1,n2,");
                text.push_str(header);
                text.push('\n');
            }
            for line in lines {
                text.push_str(&format!("{},{},{line}\n", r.config.n1, r.config.n2));
            }
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    #[derive(Serialize)]
    struct Body {
        reports: Vec<SimReport>,
    }
    Ok(serde_json::to_string_pretty(&envelope(&configs, Some(a.seed), Body { reports })?)?)
}

fn cmd_plan(a: &PlanArgs) -> anyhow::Result<String> {
    let problem = AllocationProblem { c1: a.c1, c2: a.c2, budget: a.budget, r_squared: a.r2 };
    let alloc = optimal_allocation(&problem)?;
    for w in &alloc.warnings {
        eprintln!("warning: {w}");
    }
    #[derive(Serialize)]
    struct Body {
        allocation: acefuse::design::Allocation,
    }
    Ok(serde_json::to_string_pretty(&envelope(problem, None, Body { allocation: alloc })?)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    match &cli.command {
        Command::Estimate(a) => {
            let c = estimate_config(a)?;
            let body = run_estimate(&c)?;
            for w in &body.warnings {
                eprintln!("warning: {w}");
            }
            let text = serde_json::to_string_pretty(&envelope(&c, c.seed, body)?)?;
            write_output(a.out.as_deref(), &text)
        }
        Command::Simulate(a) => write_output(a.out.as_deref(), &cmd_simulate(a)?),
        Command::Plan(a) => write_output(a.out.as_deref(), &cmd_plan(a)?),
        Command::Sensitivity(a) => write_output(a.estimate.out.as_deref(), &cmd_sensitivity(a)?),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<acefuse::Error>() {
        Some(err) if err.is_numerical() => 3,
        Some(_) => 2,
        // unreadable inputs are data errors too
        None if e.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
