//! Command-line front end: argument parsing, config resolution and report output.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::aipw::{value_ci, ValueReport};
use crate::bootstrap::{epsilon_sweep, reshaped_bootstrap, BootstrapConfig, BootstrapReport, SweepReport, DEFAULT_EPSILON_GRID};
use crate::data::{load_csv, validate_overlap, write_csv, ColumnConfig, Dataset, OverlapReport, RegimeParameter, DEFAULT_OVERLAP_BOUNDS};
use crate::error::{Error, Result};
use crate::nuisance::{EstimatorSpec, Method, NuisanceDiagnostics, NuisanceEstimator, NuisanceFit, OracleNuisance};
use crate::report::{render, Report, SCHEMA_VERSION};
use crate::search::{search, SearchConfig, SearchResult};
use crate::simulation::{derive_seed, fit_study_nuisance, generate, rate_diagnostic, run_coverage_study, DgpSpec, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "linregime", version, about = "Optimal linear treatment regimes with bootstrap inference")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Report path; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp so identical runs give identical bytes.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo coverage study on the synthetic generator, or write one generated dataset.
    Simulate(SimulateArgs),
    /// Fit nuisance models, search the regime and report the value interval.
    Fit(FitArgs),
    /// Fit, then bootstrap percentile intervals for the coefficients.
    BootstrapCi(BootstrapArgs),
    /// Bootstrap over a grid of step sizes and recommend one.
    Sweep(BootstrapArgs),
    /// Convergence-rate diagnostic across sample sizes.
    Rate(RateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NuisanceArg {
    Logistic,
    Kernel,
    Oracle,
}

impl From<NuisanceArg> for Method {
    fn from(a: NuisanceArg) -> Self {
        match a {
            NuisanceArg::Logistic => Method::Logistic,
            NuisanceArg::Kernel => Method::LocalLinearKernel,
            NuisanceArg::Oracle => Method::Oracle,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV input; without it data come from the synthetic generator.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON column roles for --data.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long)]
    pub standardize: bool,
    /// Sample size of generated data.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub nuisance: Option<NuisanceArg>,
    #[arg(long)]
    pub cross_fit: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub epsilon_grid: Option<Vec<f64>>,
    /// Number of bootstrap replicates.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub refit_nuisance: bool,
    /// CSV of bootstrap draws (b, coordinate, value).
    #[arg(long)]
    pub draws_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub epsilon_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub refit_nuisance: bool,
    #[arg(long, value_enum)]
    pub nuisance: Option<NuisanceArg>,
    #[arg(long)]
    pub truth_draws: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// n = 20000, 100 replications, B = 400, eps = 0.5, refit with the kernel nuisance.
    #[arg(long)]
    pub full_scale: bool,
    /// Write one generated dataset to this CSV instead of running a study.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RateArgs {
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long, value_enum)]
    pub nuisance: Option<NuisanceArg>,
    #[command(flatten)]
    pub search: SearchArgs,
}

/// Fully resolved run configuration, embedded verbatim in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub columns: Option<ColumnConfig>,
    pub dgp: DgpSpec,
    pub nuisance: EstimatorSpec,
    pub search: SearchConfig,
    pub bootstrap: BootstrapConfig,
    pub epsilon_grid: Vec<f64>,
    pub level: f64,
    pub replications: usize,
    pub truth_draws: usize,
    pub rate_sizes: Vec<usize>,
    pub rate_replications: usize,
    pub seed: u64,
    pub draws_csv: Option<PathBuf>,
    pub emit_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            columns: None,
            dgp: DgpSpec::default(),
            nuisance: EstimatorSpec::default(),
            search: SearchConfig::default(),
            bootstrap: BootstrapConfig::default(),
            epsilon_grid: DEFAULT_EPSILON_GRID.to_vec(),
            level: 0.95,
            replications: 100,
            truth_draws: 10_000_000,
            rate_sizes: vec![1000, 8000],
            rate_replications: 30,
            seed: 0,
            draws_csv: None,
            emit_data: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Derive every component seed from the master seed.
    fn reseed(&mut self) {
        self.dgp.seed = derive_seed(self.seed, 0);
        self.search.seed = derive_seed(self.seed, 1);
        self.bootstrap.seed = derive_seed(self.seed, 2);
        self.nuisance.cross_fit_seed = derive_seed(self.seed, 3);
    }

    fn apply_search(&mut self, a: &SearchArgs) {
        if let Some(p) = a.population {
            self.search.population = p;
        }
        if let Some(g) = a.generations {
            self.search.generations = g;
        }
    }

    fn apply_fit(&mut self, a: &FitArgs) -> Result<()> {
        if let Some(d) = &a.data {
            self.data = Some(d.clone());
        }
        if let Some(p) = &a.columns {
            self.columns = Some(ColumnConfig::from_json_file(p)?);
        }
        if a.outcome.is_some() || a.treatment.is_some() || a.covariates.is_some() {
            let base = self.columns.clone();
            let pick = |flag: &Option<String>, from: Option<&String>, what: &str| {
                flag.clone()
                    .or_else(|| from.cloned())
                    .ok_or_else(|| Error::InvalidConfig(format!("--{what} is required with --data")))
            };
            self.columns = Some(ColumnConfig {
                outcome: pick(&a.outcome, base.as_ref().map(|c| &c.outcome), "outcome")?,
                treatment: pick(&a.treatment, base.as_ref().map(|c| &c.treatment), "treatment")?,
                covariates: a
                    .covariates
                    .clone()
                    .or_else(|| base.as_ref().map(|c| c.covariates.clone()))
                    .ok_or_else(|| Error::InvalidConfig("--covariates is required with --data".into()))?,
                intercept: base.as_ref().is_none_or(|c| c.intercept),
                standardize: base.as_ref().is_some_and(|c| c.standardize),
            });
        }
        if let Some(c) = self.columns.as_mut() {
            if a.no_intercept {
                c.intercept = false;
            }
            if a.standardize {
                c.standardize = true;
            }
        }
        if let Some(n) = a.n {
            self.dgp.n = n;
        }
        if let Some(m) = a.nuisance {
            self.nuisance.method = m.into();
        }
        if let Some(k) = a.cross_fit {
            self.nuisance.cross_fit_folds = k;
        }
        if let Some(l) = a.level {
            self.level = l;
            self.bootstrap.level = l;
        }
        self.apply_search(&a.search);
        if self.data.is_some() && a.n.is_some() {
            return Err(Error::InvalidConfig("give either --data or --n, not both".into()));
        }
        Ok(())
    }

    fn apply_bootstrap(&mut self, a: &BootstrapArgs) -> Result<()> {
        self.apply_fit(&a.fit)?;
        if let Some(e) = a.epsilon {
            self.bootstrap.epsilon = e;
        }
        if let Some(g) = &a.epsilon_grid {
            self.epsilon_grid = g.clone();
        }
        if let Some(b) = a.bootstrap {
            self.bootstrap.replicates = b;
        }
        if a.refit_nuisance {
            self.bootstrap.refit_nuisance = true;
        }
        if let Some(p) = &a.draws_csv {
            self.draws_csv = Some(p.clone());
        }
        Ok(())
    }

    fn apply_simulate(&mut self, a: &SimulateArgs) {
        if a.full_scale {
            self.dgp.n = 20_000;
            self.replications = 100;
            self.bootstrap.replicates = 400;
            self.bootstrap.epsilon = 0.5;
            self.bootstrap.refit_nuisance = true;
            self.epsilon_grid = vec![0.5];
            self.nuisance.method = Method::LocalLinearKernel;
        }
        if let Some(n) = a.n {
            self.dgp.n = n;
        }
        if let Some(t) = a.replications {
            self.replications = t;
        }
        if let Some(b) = a.bootstrap {
            self.bootstrap.replicates = b;
        }
        if let Some(e) = a.epsilon {
            self.bootstrap.epsilon = e;
            self.epsilon_grid = vec![e];
        }
        if let Some(g) = &a.epsilon_grid {
            self.epsilon_grid = g.clone();
        }
        if a.refit_nuisance {
            self.bootstrap.refit_nuisance = true;
        }
        if let Some(m) = a.nuisance {
            self.nuisance.method = m.into();
        }
        if let Some(d) = a.truth_draws {
            self.truth_draws = d;
        }
        if let Some(l) = a.level {
            self.level = l;
            self.bootstrap.level = l;
        }
        if let Some(p) = &a.emit_data {
            self.emit_data = Some(p.clone());
        }
        self.apply_search(&a.search);
    }

    fn apply_rate(&mut self, a: &RateArgs) {
        if let Some(s) = &a.sizes {
            self.rate_sizes = s.clone();
        }
        if let Some(r) = a.replications {
            self.rate_replications = r;
        }
        if let Some(m) = a.nuisance {
            self.nuisance.method = m.into();
        }
        self.apply_search(&a.search);
    }
}

#[derive(Debug, Serialize)]
struct DataSummary {
    source: String,
    n: usize,
    columns: Vec<String>,
    treated: usize,
    control: usize,
}

#[derive(Debug, Serialize)]
struct PipelineResult {
    data: DataSummary,
    nuisance: NuisanceDiagnostics,
    overlap: OverlapReport,
    search: SearchResult,
    value: ValueReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_original_scale: Option<RegimeParameter>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepReport>,
}

struct Fitted {
    data: Dataset,
    nf: NuisanceFit,
    oracle: Option<OracleNuisance>,
    result: PipelineResult,
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<OracleNuisance>, String)> {
    match &cfg.data {
        Some(path) => {
            if cfg.nuisance.method == Method::Oracle {
                return Err(Error::InvalidConfig("the oracle nuisance needs generated data".into()));
            }
            let columns = cfg.columns.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--data needs --columns or --outcome/--treatment/--covariates".into())
            })?;
            Ok((load_csv(path, columns)?, None, path.display().to_string()))
        }
        None => {
            let d = generate(&cfg.dgp)?;
            let src = format!("generated (n = {})", cfg.dgp.n);
            Ok((d, Some(cfg.dgp.oracle()), src))
        }
    }
}

fn fit_pipeline(cfg: &RunConfig) -> Result<Fitted> {
    cfg.search.validate()?;
    cfg.nuisance.validate()?;
    let (data, oracle, source) = load_data(cfg)?;
    let nf = if cfg.data.is_none() {
        fit_study_nuisance(&cfg.dgp, &data, &cfg.nuisance)?
    } else {
        cfg.nuisance.fit(&data)?
    };
    let raw_e: Vec<f64> = match &nf.propensity {
        Some(p) => data.rows().map(|x| p.predict(x)).collect(),
        None => nf.e_hat.clone(),
    };
    let overlap = validate_overlap(&raw_e, DEFAULT_OVERLAP_BOUNDS);
    let fit = search(&data, &nf, &cfg.search)?;
    let value = value_ci(&data, &nf, &fit.beta_hat, cfg.level)?;
    let beta_original_scale = match data.standardization() {
        Some(s) => Some(s.to_original_scale(&fit.beta_hat, data.has_intercept())?),
        None => None,
    };
    let (control, treated) = data.arm_counts();
    let result = PipelineResult {
        data: DataSummary {
            source,
            n: data.n(),
            columns: data.column_names().to_vec(),
            treated,
            control,
        },
        nuisance: nf.diagnostics.clone(),
        overlap,
        search: fit,
        value,
        beta_original_scale,
        bootstrap: None,
        sweep: None,
    };
    Ok(Fitted {
        data,
        nf,
        oracle,
        result,
    })
}

fn refit_estimator<'a>(cfg: &'a RunConfig, fitted: &'a Fitted) -> Option<&'a dyn NuisanceEstimator> {
    if !cfg.bootstrap.refit_nuisance {
        return None;
    }
    match (&fitted.oracle, cfg.nuisance.method) {
        (Some(o), Method::Oracle) => Some(o),
        _ => Some(&cfg.nuisance),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn timestamp(deterministic: bool) -> Option<u64> {
    if deterministic {
        None
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
    }
}

#[derive(Debug, Serialize)]
struct SimulateDataResult {
    dataset: PathBuf,
    n: usize,
}

#[derive(Debug, Serialize)]
struct SimulateResult {
    summary: crate::simulation::McSummary,
}

#[derive(Debug, Serialize)]
struct RateResult {
    rate: crate::simulation::RateReport,
}

/// Execute a parsed command; returns the rendered report.
pub fn execute(cli: &Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let command = match &cli.command {
        Command::Simulate(a) => {
            cfg.apply_simulate(a);
            if cfg.emit_data.is_some() {
                "simulate-data"
            } else {
                "simulate"
            }
        }
        Command::Fit(a) => {
            cfg.apply_fit(a)?;
            "fit"
        }
        Command::BootstrapCi(a) => {
            cfg.apply_bootstrap(a)?;
            "bootstrap-ci"
        }
        Command::Sweep(a) => {
            cfg.apply_bootstrap(a)?;
            "sweep"
        }
        Command::Rate(a) => {
            cfg.apply_rate(a);
            "rate"
        }
    };
    cfg.reseed();
    let stamp = timestamp(cli.deterministic);
    let envelope = |result: &dyn erased::Render| result.render(command, &cfg, stamp);

    match command {
        "fit" => envelope(&fit_pipeline(&cfg)?.result),
        "bootstrap-ci" => {
            let mut fitted = fit_pipeline(&cfg)?;
            let refit = refit_estimator(&cfg, &fitted);
            let rep = reshaped_bootstrap(
                &fitted.data,
                &fitted.nf,
                &fitted.result.search.beta_hat,
                &cfg.bootstrap,
                &cfg.search,
                refit,
            )?;
            if let Some(p) = &cfg.draws_csv {
                write_text(p, &rep.draws_csv())?;
            }
            fitted.result.bootstrap = Some(rep);
            envelope(&fitted.result)
        }
        "sweep" => {
            let mut fitted = fit_pipeline(&cfg)?;
            let refit = refit_estimator(&cfg, &fitted);
            let sweep = epsilon_sweep(
                &fitted.data,
                &fitted.nf,
                &fitted.result.search.beta_hat,
                &cfg.epsilon_grid,
                &cfg.bootstrap,
                &cfg.search,
                refit,
            )?;
            fitted.result.sweep = Some(sweep);
            envelope(&fitted.result)
        }
        "simulate-data" => {
            let path = cfg.emit_data.clone().expect("set above");
            let data = generate(&cfg.dgp)?;
            write_csv(&data, &path, "y", "a")?;
            envelope(&SimulateDataResult {
                dataset: path,
                n: data.n(),
            })
        }
        "simulate" => {
            let study = StudyConfig {
                dgp: cfg.dgp.clone(),
                replications: cfg.replications,
                search: cfg.search.clone(),
                nuisance: cfg.nuisance.clone(),
                bootstrap: cfg.bootstrap.clone(),
                epsilons: cfg.epsilon_grid.clone(),
                level: cfg.level,
                truth_draws: cfg.truth_draws,
                seed: cfg.seed,
            };
            let summary = run_coverage_study(&study)?;
            eprint!("{}", summary.table());
            envelope(&SimulateResult { summary })
        }
        "rate" => {
            let rate = rate_diagnostic(
                &cfg.dgp,
                &cfg.rate_sizes,
                cfg.rate_replications,
                &cfg.search,
                &cfg.nuisance,
                cfg.seed,
            )?;
            envelope(&RateResult { rate })
        }
        _ => unreachable!("commands are enumerated above"),
    }
}

mod erased {
    use super::*;

    /// Object-safe rendering of any serializable result into the report envelope.
    pub trait Render {
        fn render(&self, command: &str, cfg: &RunConfig, stamp: Option<u64>) -> Result<String>;
    }

    impl<T: Serialize> Render for T {
        fn render(&self, command: &str, cfg: &RunConfig, stamp: Option<u64>) -> Result<String> {
            render(&Report {
                schema_version: SCHEMA_VERSION,
                command,
                seed: cfg.seed,
                generated_at_unix: stamp,
                config: cfg,
                result: self,
            })
        }
    }
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

/// Run the CLI on `args`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let outcome = execute(&cli).and_then(|text| match &cli.out {
        Some(p) => write_text(p, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let code = if e.is_input_error() { 2 } else { 1 };
            let obj = ErrorObject {
                error: ErrorBody {
                    kind: e.kind(),
                    message: e.to_string(),
                    exit_code: code,
                },
            };
            eprintln!("{}", serde_json::to_string(&obj).unwrap_or_else(|_| e.to_string()));
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_and_bootstrap_flags() {
        let cli = Cli::try_parse_from([
            "linregime",
            "--seed",
            "7",
            "bootstrap-ci",
            "--n",
            "300",
            "--epsilon",
            "0.3",
            "--bootstrap",
            "25",
            "--refit-nuisance",
            "--nuisance",
            "oracle",
            "--deterministic",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(7));
        assert!(cli.deterministic);
        let Command::BootstrapCi(a) = &cli.command else {
            panic!("wrong subcommand")
        };
        let mut cfg = RunConfig::default();
        cfg.apply_bootstrap(a).unwrap();
        assert_eq!(cfg.dgp.n, 300);
        assert_eq!(cfg.bootstrap.replicates, 25);
        assert_eq!(cfg.bootstrap.epsilon, 0.3);
        assert!(cfg.bootstrap.refit_nuisance);
        assert_eq!(cfg.nuisance.method, Method::Oracle);
    }

    #[test]
    fn full_scale_preset() {
        let cli = Cli::try_parse_from(["linregime", "simulate", "--full-scale"]).unwrap();
        let Command::Simulate(a) = &cli.command else { panic!() };
        let mut cfg = RunConfig::default();
        cfg.apply_simulate(a);
        assert_eq!((cfg.dgp.n, cfg.replications, cfg.bootstrap.replicates), (20_000, 100, 400));
        assert_eq!(cfg.epsilon_grid, vec![0.5]);
        assert!(cfg.bootstrap.refit_nuisance);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn data_and_n_conflict() {
        let cli = Cli::try_parse_from(["linregime", "fit", "--data", "x.csv", "--n", "10"]).unwrap();
        let Command::Fit(a) = &cli.command else { panic!() };
        assert!(RunConfig::default().apply_fit(a).is_err());
    }
}
