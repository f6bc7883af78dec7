//! Synthetic data-generating process with a known optimal linear regime, and
//! Monte Carlo drivers for coverage, interval length and convergence rate.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aipw::value_ci;
use crate::bootstrap::{reshaped_bootstrap, BootstrapConfig};
use crate::data::{dot, euclidean_norm, Dataset, RegimeParameter, INTERCEPT_NAME};
use crate::error::{Error, Result};
use crate::nuisance::logistic::expit;
use crate::nuisance::{fit_nuisance, ClipBounds, EstimatorSpec, Method, NuisanceEstimator, NuisanceFit, OracleNuisance};
use crate::search::{search, SearchConfig};

/// Covariates uniform on `[lower, upper]`, `logit e(x) = propensity · (1, x)`,
/// `Y = baseline · (1, x) + A · contrast · (1, x) + noise_sd · N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
    pub propensity: Vec<f64>,
    pub baseline: Vec<f64>,
    pub contrast: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
    #[doc(hidden)]
    #[serde(skip)]
    pub noise_free: bool,
}

impl Default for DgpSpec {
    fn default() -> Self {
        let r3 = 3f64.sqrt();
        Self {
            n: 2000,
            lower: 1.0 - r3,
            upper: 1.0 + r3,
            propensity: vec![-1.0, 0.8, 0.8],
            baseline: vec![2.0, -1.5, -1.5],
            contrast: vec![0.0, 2.0, 1.0],
            noise_sd: 1.0,
            seed: 0,
            noise_free: false,
        }
    }
}

impl DgpSpec {
    pub fn with_n(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            ..Self::default()
        }
    }

    /// Number of covariates, excluding the intercept.
    pub fn covariates(&self) -> usize {
        self.propensity.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("dgp: {m}")));
        if self.n < 1 {
            return bad("n must be >= 1".into());
        }
        if !(self.noise_sd > 0.0) {
            return bad(format!("noise sd must be > 0, got {}", self.noise_sd));
        }
        if !(self.lower < self.upper) {
            return bad("lower bound must be below upper bound".into());
        }
        let l = self.propensity.len();
        if l < 2 || self.baseline.len() != l || self.contrast.len() != l {
            return bad("propensity, baseline and contrast need equal length >= 2".into());
        }
        if euclidean_norm(&self.contrast) == 0.0 {
            return bad("contrast must be nonzero".into());
        }
        Ok(())
    }

    fn column_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT_NAME.to_string())
            .chain((1..=self.covariates()).map(|j| format!("x{j}")))
            .collect()
    }

    /// The optimal regime: treat iff `contrast · (1, x) > 0`.
    pub fn beta0(&self) -> Result<RegimeParameter> {
        RegimeParameter::from_unnormalized(self.contrast.clone())
    }

    /// Exact nuisance functions on rows `(1, x)`.
    pub fn oracle(&self) -> OracleNuisance {
        let (p, b, c) = (self.propensity.clone(), self.baseline.clone(), self.contrast.clone());
        let b1 = b.clone();
        OracleNuisance {
            propensity: Arc::new(move |x: &[f64]| expit(dot(x, &p))),
            mu0: Arc::new(move |x: &[f64]| dot(x, &b)),
            mu1: Arc::new(move |x: &[f64]| dot(x, &b1) + dot(x, &c)),
            clip: ClipBounds::default(),
        }
    }

    fn draw_x(&self, rng: &mut ChaCha8Rng, row: &mut [f64]) {
        row[0] = 1.0;
        for v in row[1..].iter_mut() {
            *v = rng.gen_range(self.lower..self.upper);
        }
    }
}

/// Draw a dataset; identical for identical specs.
pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let l = spec.propensity.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = vec![0.0; spec.n * l];
    let mut a = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for row in x.chunks_exact_mut(l) {
        spec.draw_x(&mut rng, row);
        let treat = (rng.gen::<f64>() < expit(dot(row, &spec.propensity))) as u8;
        let noise: f64 = rng.sample(StandardNormal);
        let mean = dot(row, &spec.baseline) + treat as f64 * dot(row, &spec.contrast);
        a.push(treat);
        y.push(if spec.noise_free { mean } else { mean + spec.noise_sd * noise });
    }
    Dataset::new(x, a, y, spec.column_names(), true)
}

/// A seed for stream `stream` of `master`, stable across machines.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValue {
    pub value: f64,
    pub standard_error: f64,
    pub draws: usize,
}

const ORACLE_CHUNK: usize = 1 << 16;

/// Monte Carlo value `E[Y(d(X; β))]` under the generator, seeded by `spec.seed`.
pub fn true_value_oracle(spec: &DgpSpec, beta: &RegimeParameter, draws: usize) -> Result<TrueValue> {
    spec.validate()?;
    if draws < 1 {
        return Err(Error::InvalidConfig("oracle needs at least one draw".into()));
    }
    let l = spec.propensity.len();
    if beta.dim() != l {
        return Err(Error::Dimension {
            expected: l,
            got: beta.dim(),
        });
    }
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(c as u64);
            let m = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut row = vec![0.0; l];
            let (mut s, mut ss) = (0.0, 0.0);
            for _ in 0..m {
                spec.draw_x(&mut rng, &mut row);
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = dot(&row, &spec.baseline);
                if dot(&row, beta.as_slice()) > 0.0 {
                    v += dot(&row, &spec.contrast);
                }
                if !spec.noise_free {
                    v += spec.noise_sd * noise;
                }
                s += v;
                ss += v * v;
            }
            (s, ss)
        })
        .collect();
    let (s, ss) = partial.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let n = draws as f64;
    let mean = s / n;
    let var = if draws > 1 { (ss - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
    Ok(TrueValue {
        value: mean,
        standard_error: (var / n).sqrt(),
        draws,
    })
}

/// Nuisance fit for generated data: the exact functions for [`Method::Oracle`],
/// otherwise the estimator described by `spec`.
pub fn fit_study_nuisance(dgp: &DgpSpec, data: &Dataset, spec: &EstimatorSpec) -> Result<NuisanceFit> {
    match spec.method {
        Method::Oracle => {
            let mut o = dgp.oracle();
            o.clip = spec.clip;
            o.fit(data)
        }
        _ => fit_nuisance(data, spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub search: SearchConfig,
    pub nuisance: EstimatorSpec,
    /// `replicates = 0` runs an estimation-only study.
    pub bootstrap: BootstrapConfig,
    /// Step sizes to evaluate; empty means `bootstrap.epsilon` alone.
    pub epsilons: Vec<f64>,
    /// Confidence level of the value interval.
    pub level: f64,
    pub truth_draws: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpSpec::default(),
            replications: 100,
            search: SearchConfig::default(),
            nuisance: EstimatorSpec::with_method(Method::Oracle),
            bootstrap: BootstrapConfig::default(),
            epsilons: Vec::new(),
            level: 0.95,
            truth_draws: 10_000_000,
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn epsilon_grid(&self) -> Vec<f64> {
        if self.epsilons.is_empty() {
            vec![self.bootstrap.epsilon]
        } else {
            self.epsilons.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.search.validate()?;
        self.nuisance.validate()?;
        if self.replications < 1 {
            return Err(Error::InvalidConfig("study needs at least one replication".into()));
        }
        if self.bootstrap.replicates > 0 {
            for eps in self.epsilon_grid() {
                BootstrapConfig {
                    epsilon: eps,
                    ..self.bootstrap.clone()
                }
                .validate()?;
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub beta_hat: Vec<f64>,
    pub value: f64,
    pub value_ci: (f64, f64),
    /// Per step size, the percentile interval of each coordinate.
    pub intervals: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub coverage: Vec<f64>,
    pub mean_length: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    pub completed: usize,
    pub failures: Vec<ReplicationFailure>,
    /// Scored coordinates (intercept excluded).
    pub coordinates: Vec<String>,
    pub beta0: Vec<f64>,
    pub true_value: TrueValue,
    pub mean_beta_hat: Vec<f64>,
    /// Share of value intervals covering the true value, each widened by two
    /// Monte Carlo standard errors of the truth.
    pub value_ci_coverage: f64,
    pub per_epsilon: Vec<EpsilonSummary>,
    pub records: Vec<ReplicationRecord>,
    pub settings: StudyConfig,
}

impl McSummary {
    /// Aggregate replication records; the result does not depend on their order.
    pub fn from_records(
        settings: StudyConfig,
        true_value: TrueValue,
        mut records: Vec<ReplicationRecord>,
        mut failures: Vec<ReplicationFailure>,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.index);
        failures.sort_by_key(|f| f.index);
        let beta0 = settings.dgp.beta0()?.into_inner();
        let scored: Vec<usize> = (1..beta0.len()).collect();
        let m = records.len();
        let mean = |f: &dyn Fn(&ReplicationRecord) -> f64| -> f64 {
            if m == 0 {
                f64::NAN
            } else {
                records.iter().map(f).sum::<f64>() / m as f64
            }
        };
        let slack = 2.0 * true_value.standard_error;
        let value_ci_coverage = mean(&|r: &ReplicationRecord| {
            (r.value_ci.0 - slack <= true_value.value && true_value.value <= r.value_ci.1 + slack) as u8 as f64
        });
        let per_epsilon = if settings.bootstrap.replicates == 0 {
            Vec::new()
        } else {
            settings
                .epsilon_grid()
                .iter()
                .enumerate()
                .map(|(e, &epsilon)| EpsilonSummary {
                    epsilon,
                    coverage: scored
                        .iter()
                        .map(|&j| {
                            mean(&|r: &ReplicationRecord| {
                                let (lo, hi) = r.intervals[e][j];
                                (lo <= beta0[j] && beta0[j] <= hi) as u8 as f64
                            })
                        })
                        .collect(),
                    mean_length: scored
                        .iter()
                        .map(|&j| mean(&|r: &ReplicationRecord| r.intervals[e][j].1 - r.intervals[e][j].0))
                        .collect(),
                })
                .collect()
        };
        Ok(Self {
            replications: settings.replications,
            completed: m,
            failures,
            coordinates: scored.iter().map(|j| format!("beta0{j}")).collect(),
            mean_beta_hat: scored.iter().map(|&j| mean(&|r: &ReplicationRecord| r.beta_hat[j])).collect(),
            beta0,
            true_value,
            value_ci_coverage,
            per_epsilon,
            records,
            settings,
        })
    }

    /// Plain-text table: coverage and mean length per coordinate (rows) and step size (columns).
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<18}", ""));
        for e in &self.per_epsilon {
            s.push_str(&format!("{:>10}", format!("eps={}", e.epsilon)));
        }
        s.push('\n');
        for (j, name) in self.coordinates.iter().enumerate() {
            for (label, pick) in [("Coverage", 0), ("Length", 1)] {
                s.push_str(&format!("{:<18}", format!("{name} {label}")));
                for e in &self.per_epsilon {
                    let v = if pick == 0 { e.coverage[j] } else { e.mean_length[j] };
                    s.push_str(&format!("{v:>10.3}"));
                }
                s.push('\n');
            }
            s.push_str(&format!("{:<18}{:>10.3}\n", format!("{name} Est"), self.mean_beta_hat[j]));
        }
        s.push_str(&format!(
            "value CI coverage {:.3} ({} of {} replications completed)\n",
            self.value_ci_coverage, self.completed, self.replications
        ));
        s
    }
}

/// Truth for a study: `V(β₀)` from the oracle, seeded from the study seed.
pub fn study_truth(cfg: &StudyConfig) -> Result<TrueValue> {
    let spec = DgpSpec {
        seed: derive_seed(cfg.seed, u64::MAX),
        ..cfg.dgp.clone()
    };
    true_value_oracle(&spec, &cfg.dgp.beta0()?, cfg.truth_draws)
}

fn run_replication(cfg: &StudyConfig, index: usize) -> Result<ReplicationRecord> {
    let seed = derive_seed(cfg.seed, index as u64);
    let dgp = DgpSpec {
        seed: derive_seed(seed, 0),
        ..cfg.dgp.clone()
    };
    let data = generate(&dgp)?;
    let nf = fit_study_nuisance(&dgp, &data, &cfg.nuisance)?;
    let sc = SearchConfig {
        seed: derive_seed(seed, 1),
        ..cfg.search.clone()
    };
    let fit = search(&data, &nf, &sc)?;
    let vr = value_ci(&data, &nf, &fit.beta_hat, cfg.level)?;
    let mut intervals = Vec::new();
    if cfg.bootstrap.replicates > 0 {
        let oracle = dgp.oracle();
        let refit: &dyn NuisanceEstimator = match cfg.nuisance.method {
            Method::Oracle => &oracle,
            _ => &cfg.nuisance,
        };
        for epsilon in cfg.epsilon_grid() {
            let bc = BootstrapConfig {
                epsilon,
                seed: derive_seed(seed, 2),
                ..cfg.bootstrap.clone()
            };
            let rep = reshaped_bootstrap(&data, &nf, &fit.beta_hat, &bc, &sc, Some(refit))?;
            intervals.push(rep.intervals.iter().map(|c| (c.lo, c.hi)).collect());
        }
    }
    Ok(ReplicationRecord {
        index,
        seed,
        beta_hat: fit.beta_hat.into_inner(),
        value: vr.value,
        value_ci: (vr.ci_lo, vr.ci_hi),
        intervals,
    })
}

/// Repeat generate → nuisance → search → bootstrap `cfg.replications` times.
/// Replications that fail are counted with their error and excluded.
pub fn run_coverage_study(cfg: &StudyConfig) -> Result<McSummary> {
    run_coverage_study_with_truth(cfg, study_truth(cfg)?)
}

pub fn run_coverage_study_with_truth(cfg: &StudyConfig, truth: TrueValue) -> Result<McSummary> {
    cfg.validate()?;
    let outcomes: Vec<(usize, Result<ReplicationRecord>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| (r, run_replication(cfg, r)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (index, o) in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failures.push(ReplicationFailure {
                index,
                error: e.to_string(),
            }),
        }
    }
    McSummary::from_records(cfg.clone(), truth, records, failures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub median_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Least-squares slope of log median error on log n.
    pub slope: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median `‖β̂ − β₀‖` over `reps` replications at each sample size and the
/// log-log slope across sizes.
pub fn rate_diagnostic(
    template: &DgpSpec,
    sizes: &[usize],
    reps: usize,
    search_cfg: &SearchConfig,
    nuisance: &EstimatorSpec,
    seed: u64,
) -> Result<RateReport> {
    let mut distinct = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::NeedTwoSizes(distinct.len()));
    }
    if reps < 1 {
        return Err(Error::InvalidConfig("rate diagnostic needs at least one replication".into()));
    }
    let beta0 = template.beta0()?;
    let mut rows = Vec::new();
    for (k, &n) in distinct.iter().enumerate() {
        let errors: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<f64> {
                let s = derive_seed(derive_seed(seed, k as u64), r as u64);
                let dgp = DgpSpec {
                    n,
                    seed: derive_seed(s, 0),
                    ..template.clone()
                };
                let data = generate(&dgp)?;
                let nf = fit_study_nuisance(&dgp, &data, nuisance)?;
                let sc = SearchConfig {
                    seed: derive_seed(s, 1),
                    ..search_cfg.clone()
                };
                let b = search(&data, &nf, &sc)?.beta_hat;
                let diff: Vec<f64> = b.as_slice().iter().zip(beta0.as_slice()).map(|(a, c)| a - c).collect();
                Ok(euclidean_norm(&diff))
            })
            .collect::<Result<_>>()?;
        let mut sorted = errors.clone();
        rows.push(RateRow {
            n,
            median_error: median(&mut sorted),
            errors,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_error.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(RateReport {
        rows,
        slope: sxy / sxx,
    })
}
