//! Reshaped-objective bootstrap for the regime coefficients.
//!
//! The plain nonparametric bootstrap is inconsistent for the cube-root
//! maximizer `β̂`. Recentering each bootstrap objective by the original-sample
//! value and subtracting the quadratic `½(β̂−β)ᵀHₙ(β̂−β)` restores consistency,
//! with `Hₙ` a finite-difference estimate of the negative Hessian of the value.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aipw::{pseudo_outcome, value, AipwObjective, HalfspaceSum, Objective};
use crate::data::{Dataset, RegimeParameter};
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceEstimator, NuisanceFit};
use crate::search::{maximize, SearchConfig};

pub const EIGEN_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPSILON_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianEstimate {
    /// Symmetric, eigenvalue-floored matrix used by the reshaped objective.
    pub matrix: Vec<Vec<f64>>,
    /// Symmetrized finite-difference matrix before the floor.
    pub raw: Vec<Vec<f64>>,
    pub raw_eigenvalues: Vec<f64>,
    pub epsilon: f64,
    pub psd_adjusted: bool,
    pub floor: f64,
}

impl HessianEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    /// Wrap a given symmetric matrix without any adjustment.
    pub fn from_matrix(matrix: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let l = matrix.len();
        if matrix.iter().any(|r| r.len() != l) {
            return Err(Error::InvalidData("Hessian must be square".into()));
        }
        for i in 0..l {
            for j in 0..i {
                if (matrix[i][j] - matrix[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidData("Hessian must be symmetric".into()));
                }
            }
        }
        let eig = SymmetricEigen::new(to_dmatrix(&matrix)).eigenvalues.iter().copied().collect();
        Ok(Self {
            raw: matrix.clone(),
            matrix,
            raw_eigenvalues: eig,
            epsilon,
            psd_adjusted: false,
            floor: 0.0,
        })
    }

    /// `½ (β̂−β)ᵀ H (β̂−β)`.
    pub fn half_quadratic(&self, beta_hat: &[f64], beta: &[f64]) -> f64 {
        let l = self.dim();
        let mut q = [0.0f64; 8];
        let mut q_heap;
        let q: &mut [f64] = if l <= 8 {
            &mut q[..l]
        } else {
            q_heap = vec![0.0; l];
            &mut q_heap
        };
        for k in 0..l {
            q[k] = beta_hat[k] - beta[k];
        }
        let mut s = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            let mut r = 0.0;
            for j in 0..l {
                r += row[j] * q[j];
            }
            s += q[i] * r;
        }
        0.5 * s
    }
}

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let l = m.len();
    DMatrix::from_fn(l, l, |i, j| m[i][j])
}

/// Four-point second differences of `objective` at `beta_hat`:
/// `H_kl = −[V(β̂+εe_k+εe_l) − V(β̂+εe_k−εe_l) − V(β̂−εe_k+εe_l) + V(β̂−εe_k−εe_l)] / (4ε²)`,
/// evaluated at the displaced vectors as they are (off the sphere). Eigenvalues
/// below [`EIGEN_FLOOR`] are raised to it.
pub fn hessian_fd<O: Objective + ?Sized>(objective: &O, beta_hat: &[f64], epsilon: f64) -> Result<HessianEstimate> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    let l = objective.dim();
    if beta_hat.len() != l {
        return Err(Error::Dimension {
            expected: l,
            got: beta_hat.len(),
        });
    }
    let eval = |sk: f64, k: usize, sl: f64, j: usize| -> Result<f64> {
        let mut b = beta_hat.to_vec();
        b[k] += sk * epsilon;
        b[j] += sl * epsilon;
        let v = objective.evaluate(&b);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalFailure(format!("non-finite objective at displaced point {b:?}")))
        }
    };
    let mut raw = vec![vec![0.0; l]; l];
    for k in 0..l {
        for j in k..l {
            let s = eval(1.0, k, 1.0, j)? - eval(1.0, k, -1.0, j)? - eval(-1.0, k, 1.0, j)? + eval(-1.0, k, -1.0, j)?;
            let h = -s / (4.0 * epsilon * epsilon);
            raw[k][j] = h;
            raw[j][k] = h;
        }
    }
    let eig = SymmetricEigen::new(to_dmatrix(&raw));
    let raw_eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let psd_adjusted = raw_eigenvalues.iter().any(|&e| e < EIGEN_FLOOR);
    let matrix = if psd_adjusted {
        let floored = eig.eigenvalues.map(|e| e.max(EIGEN_FLOOR));
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        (0..l).map(|i| (0..l).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect()).collect()
    } else {
        raw.clone()
    };
    Ok(HessianEstimate {
        matrix,
        raw,
        raw_eigenvalues,
        epsilon,
        psd_adjusted,
        floor: EIGEN_FLOOR,
    })
}

/// `ṽᵢ(β) = v̂ᵢ(β) − V̂ₙ(β) − ½(β̂−β)ᵀHₙ(β̂−β)` on the original sample.
pub fn reshape_objective(
    i: usize,
    data: &Dataset,
    nf: &NuisanceFit,
    beta: &RegimeParameter,
    beta_hat: &RegimeParameter,
    hessian: &HessianEstimate,
) -> Result<f64> {
    let v = pseudo_outcome(i, data, nf, beta)?;
    let mean = value(data, nf, beta)?;
    Ok(v - mean - hessian.half_quadratic(beta_hat.as_slice(), beta.as_slice()))
}

/// Bootstrap criterion `V̂*ₙ(β) = sum(β) − ½(β̂−β)ᵀHₙ(β̂−β)`, where `sum` already
/// holds the resample mean minus the original-sample mean of `v̂`.
#[derive(Debug, Clone)]
pub struct BootstrapObjective {
    sum: HalfspaceSum,
    beta_hat: Vec<f64>,
    hessian: HessianEstimate,
}

impl BootstrapObjective {
    /// Resample multiplicities `counts` with the original nuisance fit:
    /// `(1/n) Σᵢ (countᵢ − 1) v̂ᵢ(β)`.
    pub fn reuse(
        data: &Dataset,
        nf: &NuisanceFit,
        counts: &[f64],
        beta_hat: &RegimeParameter,
        hessian: &HessianEstimate,
    ) -> Result<Self> {
        let w: Vec<f64> = counts.iter().map(|c| c - 1.0).collect();
        let sum = AipwObjective::weighted(data, nf, Some(&w))?.into_sum().pruned();
        Ok(Self::from_sum(sum, beta_hat, hessian))
    }

    /// Resample `star` with its own nuisance fit, minus the original sample with `nf`.
    pub fn refit(
        data: &Dataset,
        nf: &NuisanceFit,
        star: &Dataset,
        nf_star: &NuisanceFit,
        beta_hat: &RegimeParameter,
        hessian: &HessianEstimate,
    ) -> Result<Self> {
        let minus = vec![-1.0; data.n()];
        let original = AipwObjective::weighted(data, nf, Some(&minus))?.into_sum();
        let resampled = AipwObjective::new(star, nf_star)?.into_sum();
        Ok(Self::from_sum(resampled.concat(original), beta_hat, hessian))
    }

    fn from_sum(sum: HalfspaceSum, beta_hat: &RegimeParameter, hessian: &HessianEstimate) -> Self {
        Self {
            sum,
            beta_hat: beta_hat.as_slice().to_vec(),
            hessian: hessian.clone(),
        }
    }
}

impl Objective for BootstrapObjective {
    fn dim(&self) -> usize {
        self.beta_hat.len()
    }

    fn evaluate(&self, beta: &[f64]) -> f64 {
        self.sum.evaluate(beta) - self.hessian.half_quadratic(&self.beta_hat, beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub epsilon: f64,
    /// Confidence level of the percentile intervals.
    pub level: f64,
    pub refit_nuisance: bool,
    pub seed: u64,
    pub max_consecutive_failures: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 400,
            epsilon: 0.5,
            level: 0.95,
            refit_nuisance: false,
            seed: 0,
            max_consecutive_failures: 10,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidConfig("bootstrap needs at least one replicate".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateInterval {
    pub coordinate: String,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub length: f64,
    pub median: f64,
    pub excludes_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    pub epsilon: f64,
    pub level: f64,
    pub refit_nuisance: bool,
    pub seed: u64,
    pub hessian: HessianEstimate,
    pub intervals: Vec<CoordinateInterval>,
    pub summed_length: f64,
    /// Resamples redrawn because the refit could not use them.
    pub redone_resamples: usize,
    /// `β*_b`, one row per replicate.
    pub draws: Vec<Vec<f64>>,
    /// `n^{1/3}(β*_b − β̂)`.
    pub recentered: Vec<Vec<f64>>,
}

impl BootstrapReport {
    pub fn draws_csv(&self) -> String {
        let mut s = String::from("b,coordinate,value\n");
        for (b, d) in self.draws.iter().enumerate() {
            for (iv, v) in self.intervals.iter().zip(d) {
                s.push_str(&format!("{b},{},{v}\n", iv.coordinate));
            }
        }
        s
    }
}

/// Sample quantile by linear interpolation between order statistics of `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile intervals per coordinate of `draws` at confidence `level`.
pub fn percentile_intervals(draws: &[Vec<f64>], estimate: &[f64], names: &[String], level: f64) -> Vec<CoordinateInterval> {
    let a = (1.0 - level) / 2.0;
    (0..estimate.len())
        .map(|j| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            col.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile(&col, a), percentile(&col, 1.0 - a));
            CoordinateInterval {
                coordinate: names.get(j).cloned().unwrap_or_else(|| format!("beta{j}")),
                estimate: estimate[j],
                lo,
                hi,
                length: hi - lo,
                median: percentile(&col, 0.5),
                excludes_zero: lo > 0.0 || hi < 0.0,
            }
        })
        .collect()
}

fn draw_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Draw `cfg.replicates` bootstrap maximizers `β*` of the reshaped objective.
///
/// Each replicate owns a random stream keyed by `(cfg.seed, b)`; the search is
/// warm-started at `β̂`. With `cfg.refit_nuisance`, `refit` re-estimates the
/// nuisance on each resample, and resamples the estimator rejects for a
/// missing arm are redrawn.
pub fn bootstrap_draws(
    data: &Dataset,
    nf: &NuisanceFit,
    beta_hat: &RegimeParameter,
    hessian: &HessianEstimate,
    cfg: &BootstrapConfig,
    search: &SearchConfig,
    refit: Option<&dyn NuisanceEstimator>,
) -> Result<BootstrapReport> {
    cfg.validate()?;
    let n = data.n();
    let l = data.dim();
    if beta_hat.dim() != l || hessian.dim() != l {
        return Err(Error::Dimension {
            expected: l,
            got: if beta_hat.dim() != l { beta_hat.dim() } else { hessian.dim() },
        });
    }
    if cfg.refit_nuisance && refit.is_none() {
        return Err(Error::InvalidConfig("refit requested without a nuisance estimator".into()));
    }

    let one = |b: usize| -> Result<(Vec<f64>, usize)> {
        let mut rng = draw_rng(cfg.seed, b);
        let mut failures = 0;
        loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let search_seed: u64 = rng.gen();
            let objective = if cfg.refit_nuisance {
                let star = data.select(&idx);
                let (c0, c1) = star.arm_counts();
                let fitted = if c0 == 0 || c1 == 0 {
                    Err(Error::EmptyArm {
                        arm: (c1 == 0) as u8,
                        count: 0,
                        needed: 1,
                    })
                } else {
                    refit.expect("checked above").fit(&star)
                };
                match fitted {
                    Ok(nf_star) => BootstrapObjective::refit(data, nf, &star, &nf_star, beta_hat, hessian)?,
                    Err(Error::EmptyArm { .. }) => {
                        failures += 1;
                        if failures >= cfg.max_consecutive_failures {
                            return Err(Error::ResampleFailures { failures });
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                let mut counts = vec![0.0; n];
                for &i in &idx {
                    counts[i] += 1.0;
                }
                BootstrapObjective::reuse(data, nf, &counts, beta_hat, hessian)?
            };
            let sc = SearchConfig {
                seed: search_seed,
                ..search.clone()
            };
            let res = maximize(&objective, &sc, &[beta_hat.as_slice().to_vec()])?;
            return Ok((res.beta_hat.into_inner(), failures));
        }
    };
    let results: Vec<(Vec<f64>, usize)> = (0..cfg.replicates).into_par_iter().map(one).collect::<Result<_>>()?;
    let redone = results.iter().map(|r| r.1).sum();
    let draws: Vec<Vec<f64>> = results.into_iter().map(|r| r.0).collect();
    let scale = (n as f64).cbrt();
    let recentered = draws
        .iter()
        .map(|d| d.iter().zip(beta_hat.as_slice()).map(|(a, b)| scale * (a - b)).collect())
        .collect();
    let intervals = percentile_intervals(&draws, beta_hat.as_slice(), data.column_names(), cfg.level);
    Ok(BootstrapReport {
        replicates: cfg.replicates,
        epsilon: cfg.epsilon,
        level: cfg.level,
        refit_nuisance: cfg.refit_nuisance,
        seed: cfg.seed,
        hessian: hessian.clone(),
        summed_length: intervals.iter().map(|c| c.length).sum(),
        intervals,
        redone_resamples: redone,
        draws,
        recentered,
    })
}

/// Estimate `Hₙ` at `β̂` with step `cfg.epsilon` and run [`bootstrap_draws`].
pub fn reshaped_bootstrap(
    data: &Dataset,
    nf: &NuisanceFit,
    beta_hat: &RegimeParameter,
    cfg: &BootstrapConfig,
    search: &SearchConfig,
    refit: Option<&dyn NuisanceEstimator>,
) -> Result<BootstrapReport> {
    let objective = AipwObjective::new(data, nf)?;
    let hessian = hessian_fd(&objective, beta_hat.as_slice(), cfg.epsilon)?;
    bootstrap_draws(data, nf, beta_hat, &hessian, cfg, search, refit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRecommendation {
    pub epsilon: f64,
    pub index: usize,
    /// Grid points whose summed length is a local minimum along the grid.
    pub local_minima: Vec<f64>,
}

/// Pick `ε` from a grid (ascending) and the summed CI lengths at each point:
/// among the local minima of the length curve (end points included) the one
/// with the smallest length, ties to the smaller `ε`.
pub fn recommend_epsilon(grid: &[f64], summed_lengths: &[f64]) -> Result<EpsilonRecommendation> {
    if grid.is_empty() || grid.len() != summed_lengths.len() {
        return Err(Error::InvalidConfig("epsilon grid and lengths must be nonempty and aligned".into()));
    }
    let m = grid.len();
    let s = summed_lengths;
    let minima: Vec<usize> = (0..m)
        .filter(|&i| (i == 0 || s[i] <= s[i - 1]) && (i + 1 == m || s[i] <= s[i + 1]))
        .collect();
    let mut best = minima[0];
    for &i in &minima[1..] {
        if s[i] < s[best] {
            best = i;
        }
    }
    Ok(EpsilonRecommendation {
        epsilon: grid[best],
        index: best,
        local_minima: minima.iter().map(|&i| grid[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<BootstrapReport>,
    pub recommendation: EpsilonRecommendation,
}

/// Run the bootstrap at each `ε` of `grid` (sorted ascending, same seed for all).
pub fn epsilon_sweep(
    data: &Dataset,
    nf: &NuisanceFit,
    beta_hat: &RegimeParameter,
    grid: &[f64],
    cfg: &BootstrapConfig,
    search: &SearchConfig,
    refit: Option<&dyn NuisanceEstimator>,
) -> Result<SweepReport> {
    if grid.is_empty() || grid.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidConfig("epsilon grid must be nonempty and positive".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let reports = sorted
        .iter()
        .map(|&epsilon| {
            let c = BootstrapConfig {
                epsilon,
                ..cfg.clone()
            };
            reshaped_bootstrap(data, nf, beta_hat, &c, search, refit)
        })
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<f64> = reports.iter().map(|r| r.summed_length).collect();
    let recommendation = recommend_epsilon(&sorted, &lengths)?;
    Ok(SweepReport {
        reports,
        recommendation,
    })
}
