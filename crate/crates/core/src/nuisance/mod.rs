//! Propensity score `e(X)` and arm-specific outcome means `μ₀(X)`, `μ₁(X)`.
//!
//! Three estimators sit behind one contract: a parametric pair (logistic
//! propensity by IRLS, per-arm linear regression), an additive local-linear
//! kernel smoother, and an oracle that evaluates known functions. Every
//! estimator produces fitted values at the sample points plus predictors
//! usable on new points. Propensities are always clipped.

pub mod kernel;
pub mod logistic;

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use kernel::{silverman_bandwidth, AdditiveSmoother};

pub trait Predictor: Send + Sync + fmt::Debug {
    fn predict(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

impl ClipBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let c = Self { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lo && self.lo < self.hi && self.hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "propensity clip bounds must satisfy 0 < lo < hi < 1, got ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, e: f64) -> f64 {
        e.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Logistic,
    LocalLinearKernel,
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Logistic => "logistic",
            Method::LocalLinearKernel => "local-linear-kernel",
            Method::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `1.06 · sd · n^{-1/5}` per covariate, on the sample being smoothed.
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSpec {
    pub method: Method,
    pub bandwidth: Bandwidth,
    pub irls_tolerance: f64,
    pub irls_max_iter: usize,
    pub ridge: f64,
    pub backfit_max_cycles: usize,
    pub backfit_tolerance: f64,
    pub max_anchors: usize,
    pub clip: ClipBounds,
    /// Number of cross-fitting folds; values below 2 mean full-sample fitting.
    pub cross_fit_folds: usize,
    pub cross_fit_seed: u64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            method: Method::LocalLinearKernel,
            bandwidth: Bandwidth::Silverman,
            irls_tolerance: 1e-8,
            irls_max_iter: 100,
            ridge: 1e-8,
            backfit_max_cycles: 20,
            backfit_tolerance: 1e-6,
            max_anchors: 256,
            clip: ClipBounds::default(),
            cross_fit_folds: 0,
            cross_fit_seed: 0,
        }
    }
}

impl EstimatorSpec {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidConfig(format!("bandwidth must be > 0, got {h}")));
            }
        }
        if self.irls_max_iter == 0 || self.backfit_max_cycles == 0 || self.max_anchors < 2 {
            return Err(Error::InvalidConfig(
                "iteration limits must be >= 1 and max_anchors >= 2".into(),
            ));
        }
        Ok(())
    }

    fn bandwidth_for(&self, values: &[f64]) -> f64 {
        match self.bandwidth {
            Bandwidth::Silverman => silverman_bandwidth(values),
            Bandwidth::Fixed(h) => h,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceDiagnostics {
    pub method: String,
    pub propensity_iterations: usize,
    pub backfit_cycles: usize,
    pub kernel_fallbacks: usize,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub cross_fit_folds: usize,
}

/// Fitted nuisance values at each observation, plus predictors when available.
#[derive(Clone)]
pub struct NuisanceFit {
    pub e_hat: Vec<f64>,
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub clip: ClipBounds,
    pub propensity: Option<Arc<dyn Predictor>>,
    pub mu0: Option<Arc<dyn Predictor>>,
    pub mu1: Option<Arc<dyn Predictor>>,
    pub diagnostics: NuisanceDiagnostics,
}

impl fmt::Debug for NuisanceFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NuisanceFit")
            .field("n", &self.e_hat.len())
            .field("clip", &self.clip)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

impl NuisanceFit {
    /// Wrap precomputed values; propensities are clipped.
    pub fn from_values(e_hat: Vec<f64>, mu0_hat: Vec<f64>, mu1_hat: Vec<f64>, clip: ClipBounds) -> Result<Self> {
        clip.validate()?;
        let n = e_hat.len();
        if mu0_hat.len() != n || mu1_hat.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: mu0_hat.len().min(mu1_hat.len()),
            });
        }
        if !e_hat.iter().chain(&mu0_hat).chain(&mu1_hat).all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure("nuisance values".into()));
        }
        let (e_hat, low, high) = clip_all(&e_hat, clip);
        Ok(Self {
            e_hat,
            mu0_hat,
            mu1_hat,
            clip,
            propensity: None,
            mu0: None,
            mu1: None,
            diagnostics: NuisanceDiagnostics {
                method: "fixed".into(),
                clipped_low: low,
                clipped_high: high,
                ..Default::default()
            },
        })
    }

    pub fn n(&self) -> usize {
        self.e_hat.len()
    }

    /// Fitted values carried over to a resample (nuisance reuse).
    pub fn select(&self, indices: &[usize]) -> NuisanceFit {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        NuisanceFit {
            e_hat: pick(&self.e_hat),
            mu0_hat: pick(&self.mu0_hat),
            mu1_hat: pick(&self.mu1_hat),
            ..self.clone()
        }
    }

    /// Clipped propensity at a new point.
    pub fn predict_propensity(&self, x: &[f64]) -> Option<f64> {
        self.propensity.as_ref().map(|p| self.clip.apply(p.predict(x)))
    }

    pub fn predict_outcome(&self, arm: u8, x: &[f64]) -> Option<f64> {
        let p = if arm == 1 { &self.mu1 } else { &self.mu0 };
        p.as_ref().map(|p| p.predict(x))
    }
}

fn clip_all(raw: &[f64], clip: ClipBounds) -> (Vec<f64>, usize, usize) {
    let low = raw.iter().filter(|&&e| e < clip.lo).count();
    let high = raw.iter().filter(|&&e| e > clip.hi).count();
    (raw.iter().map(|&e| clip.apply(e)).collect(), low, high)
}

/// Anything that can produce a `NuisanceFit` for a dataset; used for bootstrap refits.
pub trait NuisanceEstimator: Send + Sync {
    fn fit(&self, data: &Dataset) -> Result<NuisanceFit>;
    fn name(&self) -> String;
}

impl NuisanceEstimator for EstimatorSpec {
    fn fit(&self, data: &Dataset) -> Result<NuisanceFit> {
        fit_nuisance(data, self)
    }

    fn name(&self) -> String {
        self.method.to_string()
    }
}

#[derive(Debug)]
pub struct PropensityFit {
    pub predictor: Arc<dyn Predictor>,
    /// Clipped fitted values.
    pub e_hat: Vec<f64>,
    pub raw: Vec<f64>,
    pub iterations: usize,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub fallbacks: usize,
}

#[derive(Debug)]
pub struct OutcomeFit {
    pub mu0: Arc<dyn Predictor>,
    pub mu1: Arc<dyn Predictor>,
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub backfit_cycles: usize,
    pub fallbacks: usize,
}

fn require_arms(data: &Dataset, needed: usize) -> Result<()> {
    let (c0, c1) = data.arm_counts();
    for (arm, count) in [(0u8, c0), (1u8, c1)] {
        if count < needed {
            return Err(Error::EmptyArm { arm, count, needed });
        }
    }
    Ok(())
}

/// Non-intercept columns with spread, as `(column, values on rows)`.
fn smooth_inputs(data: &Dataset, rows: &[usize]) -> Vec<(usize, Vec<f64>)> {
    data.smooth_columns()
        .filter_map(|j| {
            let v: Vec<f64> = rows.iter().map(|&i| data.row(i)[j]).collect();
            let first = v[0];
            v.iter().any(|&x| x != first).then_some((j, v))
        })
        .collect()
}

fn kernel_smoother(data: &Dataset, rows: &[usize], spec: &EstimatorSpec) -> AdditiveSmoother {
    let inputs = smooth_inputs(data, rows);
    let columns: Vec<usize> = inputs.iter().map(|(c, _)| *c).collect();
    let xs: Vec<Vec<f64>> = inputs.into_iter().map(|(_, v)| v).collect();
    let bandwidths: Vec<f64> = xs.iter().map(|v| spec.bandwidth_for(v)).collect();
    AdditiveSmoother::new(rows.len(), &columns, &xs, &bandwidths, spec.max_anchors)
}

pub fn fit_propensity(data: &Dataset, spec: &EstimatorSpec) -> Result<PropensityFit> {
    spec.validate()?;
    require_arms(data, 1)?;
    let (predictor, iterations, fallbacks): (Arc<dyn Predictor>, usize, usize) = match spec.method {
        Method::Logistic => {
            let fit = logistic::fit_logistic_irls(
                data.covariates(),
                data.dim(),
                data.treatments(),
                spec.irls_tolerance,
                spec.irls_max_iter,
                spec.ridge,
            )?;
            (Arc::new(fit.model), fit.iterations, 0)
        }
        Method::LocalLinearKernel => {
            let rows: Vec<usize> = (0..data.n()).collect();
            let smoother = kernel_smoother(data, &rows, spec);
            let (model, outer, stats) = smoother.fit_logistic(
                data.treatments(),
                spec.irls_max_iter,
                spec.backfit_tolerance,
                spec.backfit_max_cycles,
            );
            (Arc::new(model), outer, stats.fallbacks)
        }
        Method::Oracle => {
            return Err(Error::InvalidConfig(
                "oracle nuisance needs the true functions; use OracleNuisance".into(),
            ))
        }
    };
    let raw: Vec<f64> = data.rows().map(|x| predictor.predict(x)).collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("fitted propensity".into()));
    }
    let (e_hat, clipped_low, clipped_high) = clip_all(&raw, spec.clip);
    Ok(PropensityFit {
        predictor,
        e_hat,
        raw,
        iterations,
        clipped_low,
        clipped_high,
        fallbacks,
    })
}

pub fn fit_outcome_means(data: &Dataset, spec: &EstimatorSpec) -> Result<OutcomeFit> {
    spec.validate()?;
    require_arms(data, 2)?;
    let mut cycles = 0;
    let mut fallbacks = 0;
    let mut fit_arm = |arm: u8| -> Result<Arc<dyn Predictor>> {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.treatments()[i] == arm).collect();
        match spec.method {
            Method::Logistic => Ok(Arc::new(logistic::fit_linear(
                data.covariates(),
                data.dim(),
                data.outcomes(),
                &rows,
                spec.ridge,
            )?)),
            Method::LocalLinearKernel => {
                let smoother = kernel_smoother(data, &rows, spec);
                let y: Vec<f64> = rows.iter().map(|&i| data.outcomes()[i]).collect();
                let (model, stats) = smoother.fit_regression(&y, spec.backfit_max_cycles, spec.backfit_tolerance);
                cycles = cycles.max(stats.cycles);
                fallbacks += stats.fallbacks;
                Ok(Arc::new(model))
            }
            Method::Oracle => Err(Error::InvalidConfig(
                "oracle nuisance needs the true functions; use OracleNuisance".into(),
            )),
        }
    };
    let mu0 = fit_arm(0)?;
    let mu1 = fit_arm(1)?;
    let mu0_hat: Vec<f64> = data.rows().map(|x| mu0.predict(x)).collect();
    let mu1_hat: Vec<f64> = data.rows().map(|x| mu1.predict(x)).collect();
    if mu0_hat.iter().chain(&mu1_hat).any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("fitted outcome means".into()));
    }
    Ok(OutcomeFit {
        mu0,
        mu1,
        mu0_hat,
        mu1_hat,
        backfit_cycles: cycles,
        fallbacks,
    })
}

fn fit_full_sample(data: &Dataset, spec: &EstimatorSpec) -> Result<NuisanceFit> {
    let p = fit_propensity(data, spec)?;
    let o = fit_outcome_means(data, spec)?;
    Ok(NuisanceFit {
        e_hat: p.e_hat,
        mu0_hat: o.mu0_hat,
        mu1_hat: o.mu1_hat,
        clip: spec.clip,
        propensity: Some(p.predictor),
        mu0: Some(o.mu0),
        mu1: Some(o.mu1),
        diagnostics: NuisanceDiagnostics {
            method: spec.method.to_string(),
            propensity_iterations: p.iterations,
            backfit_cycles: o.backfit_cycles,
            kernel_fallbacks: p.fallbacks + o.fallbacks,
            clipped_low: p.clipped_low,
            clipped_high: p.clipped_high,
            cross_fit_folds: 0,
        },
    })
}

/// Fit all three nuisance functions. With `cross_fit_folds >= 2`, each fold's
/// fitted values come from models trained on the other folds; the returned
/// predictors are then the full-sample fit.
pub fn fit_nuisance(data: &Dataset, spec: &EstimatorSpec) -> Result<NuisanceFit> {
    let full = fit_full_sample(data, spec)?;
    let k = spec.cross_fit_folds;
    if k < 2 {
        return Ok(full);
    }
    if k > data.n() {
        return Err(Error::InvalidConfig(format!(
            "{k} cross-fitting folds for {} observations",
            data.n()
        )));
    }
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.cross_fit_seed));
    let mut out = full.clone();
    let (mut low, mut high) = (0, 0);
    for fold in 0..k {
        let held: Vec<usize> = order.iter().skip(fold).step_by(k).copied().collect();
        let mut train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % k != fold)
            .map(|(_, &i)| i)
            .collect();
        train.sort_unstable();
        let part = fit_full_sample(&data.select(&train), spec)?;
        let (pe, m0, m1) = (
            part.propensity.expect("fitted"),
            part.mu0.expect("fitted"),
            part.mu1.expect("fitted"),
        );
        for &i in &held {
            let x = data.row(i);
            let raw = pe.predict(x);
            low += (raw < spec.clip.lo) as usize;
            high += (raw > spec.clip.hi) as usize;
            out.e_hat[i] = spec.clip.apply(raw);
            out.mu0_hat[i] = m0.predict(x);
            out.mu1_hat[i] = m1.predict(x);
        }
    }
    out.diagnostics.clipped_low = low;
    out.diagnostics.clipped_high = high;
    out.diagnostics.cross_fit_folds = k;
    Ok(out)
}

pub type TruthFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Known nuisance functions, evaluated exactly (propensity clipped).
#[derive(Clone)]
pub struct OracleNuisance {
    pub propensity: TruthFn,
    pub mu0: TruthFn,
    pub mu1: TruthFn,
    pub clip: ClipBounds,
}

impl fmt::Debug for OracleNuisance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleNuisance").field("clip", &self.clip).finish()
    }
}

#[derive(Clone)]
struct FnPredictor(TruthFn);

impl fmt::Debug for FnPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnPredictor")
    }
}

impl Predictor for FnPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

impl NuisanceEstimator for OracleNuisance {
    fn fit(&self, data: &Dataset) -> Result<NuisanceFit> {
        let raw: Vec<f64> = data.rows().map(|x| (self.propensity)(x)).collect();
        let mu0: Vec<f64> = data.rows().map(|x| (self.mu0)(x)).collect();
        let mu1: Vec<f64> = data.rows().map(|x| (self.mu1)(x)).collect();
        let mut fit = NuisanceFit::from_values(raw, mu0, mu1, self.clip)?;
        fit.propensity = Some(Arc::new(FnPredictor(self.propensity.clone())));
        fit.mu0 = Some(Arc::new(FnPredictor(self.mu0.clone())));
        fit.mu1 = Some(Arc::new(FnPredictor(self.mu1.clone())));
        fit.diagnostics.method = "oracle".into();
        Ok(fit)
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

pub fn oracle_nuisance(
    data: &Dataset,
    true_e: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    true_mu0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    true_mu1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    clip: ClipBounds,
) -> Result<NuisanceFit> {
    OracleNuisance {
        propensity: Arc::new(true_e),
        mu0: Arc::new(true_mu0),
        mu1: Arc::new(true_mu1),
        clip,
    }
    .fit(data)
}
