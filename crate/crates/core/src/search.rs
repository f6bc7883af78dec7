//! Maximization of a regime objective over the unit sphere `‖β‖ = 1`.
//!
//! The AIPW value is piecewise constant in `β`, so the search is derivative
//! free: a real-coded genetic algorithm on raw `l`-vectors (renormalized after
//! every operator) followed by a coordinate-wise polish in hyperspherical
//! coordinates. Ties keep the incumbent found first.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aipw::{AipwObjective, Objective};
use crate::data::{euclidean_norm, Dataset, RegimeParameter};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    /// Standard deviation of the Gaussian mutation, applied before renormalization.
    pub mutation_scale: f64,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub elite: usize,
    pub tournament: usize,
    /// Stop once the best value improved by at most `value_tolerance` for this many generations.
    pub stall_generations: usize,
    pub value_tolerance: f64,
    /// Angular step (radians) of the polish scan.
    pub refine_resolution: f64,
    /// Half-width (radians) of the polish scan around the incumbent.
    pub refine_bracket: f64,
    pub refine_passes: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 200,
            generations: 100,
            mutation_scale: 0.2,
            mutation_rate: 0.5,
            crossover_rate: 0.8,
            elite: 2,
            tournament: 3,
            stall_generations: 10,
            value_tolerance: 0.0,
            refine_resolution: 1e-4,
            refine_bracket: 0.05,
            refine_passes: 3,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("search config: {m}")));
        if self.population < 2 {
            return bad("population must be >= 2");
        }
        if self.generations < 1 {
            return bad("generations must be >= 1");
        }
        if !(self.refine_resolution > 0.0) {
            return bad("refinement resolution must be > 0");
        }
        if !(self.refine_bracket >= 0.0) || !(self.mutation_scale >= 0.0) {
            return bad("refinement bracket and mutation scale must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if self.tournament < 1 || self.elite >= self.population {
            return bad("tournament must be >= 1 and elite < population");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub beta_hat: RegimeParameter,
    pub value_at_max: f64,
    pub evaluations: usize,
    /// Best value after initialization and after each generation.
    pub trace: Vec<f64>,
    pub flat_objective: bool,
    /// Width (radians) of the maximizing plateau along each polish coordinate,
    /// measured on the final polish scan; capped at twice the bracket.
    pub plateau_extent: Vec<f64>,
}

impl SearchResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("generation,best_value\n");
        for (g, v) in self.trace.iter().enumerate() {
            s.push_str(&format!("{g},{v}\n"));
        }
        s
    }
}

/// Maximize `V̂ₙ(β)` over the unit sphere.
pub fn search(data: &Dataset, nf: &NuisanceFit, cfg: &SearchConfig) -> Result<SearchResult> {
    let obj = AipwObjective::new(data, nf)?;
    maximize(&obj, cfg, &[])
}

/// Tracks the best candidate, the evaluation count and whether all values tie.
struct Incumbent {
    beta: Vec<f64>,
    value: f64,
    evaluations: usize,
    min_seen: f64,
    max_seen: f64,
}

impl Incumbent {
    fn offer(&mut self, beta: &[f64], value: f64) -> bool {
        self.evaluations += 1;
        self.min_seen = self.min_seen.min(value);
        self.max_seen = self.max_seen.max(value);
        if value > self.value {
            self.value = value;
            self.beta.clear();
            self.beta.extend_from_slice(beta);
            true
        } else {
            false
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = euclidean_norm(v);
    if !(norm > 1e-12) || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn random_unit(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn generation_rng(seed: u64, generation: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(generation);
    rng
}

fn evaluate_all<O: Objective>(obj: &O, pop: &[Vec<f64>]) -> Vec<f64> {
    pop.par_iter().map(|b| obj.evaluate(b)).collect()
}

/// Maximize any sphere objective. `seeds` are placed first in the initial
/// population (after normalization), ahead of random draws.
pub fn maximize<O: Objective>(obj: &O, cfg: &SearchConfig, seeds: &[Vec<f64>]) -> Result<SearchResult> {
    cfg.validate()?;
    let l = obj.dim();
    if l == 0 {
        return Err(Error::InvalidConfig("cannot search a 0-dimensional regime".into()));
    }
    if seeds.iter().any(|s| s.len() != l) {
        return Err(Error::Dimension {
            expected: l,
            got: seeds.iter().map(|s| s.len()).find(|&k| k != l).unwrap_or(0),
        });
    }
    if l == 1 {
        return two_point(obj);
    }

    let mut rng = generation_rng(cfg.seed, 0);
    let mut pop: Vec<Vec<f64>> = Vec::with_capacity(cfg.population);
    for s in seeds.iter().take(cfg.population) {
        let mut v = s.clone();
        if normalize(&mut v) {
            pop.push(v);
        }
    }
    while pop.len() < cfg.population {
        pop.push(random_unit(&mut rng, l));
    }
    let mut fit = evaluate_all(obj, &pop);
    let mut inc = Incumbent {
        beta: pop[0].clone(),
        value: f64::NEG_INFINITY,
        evaluations: 0,
        min_seen: f64::INFINITY,
        max_seen: f64::NEG_INFINITY,
    };
    for (b, &v) in pop.iter().zip(&fit) {
        inc.offer(b, v);
    }
    let mut trace = vec![inc.value];
    let mut stall = 0;
    let mut last_best = inc.value;

    for g in 1..=cfg.generations {
        let mut rng = generation_rng(cfg.seed, g as u64);
        // mutation shrinks linearly to 10% of its initial scale
        let frac = (g - 1) as f64 / cfg.generations as f64;
        let sigma = cfg.mutation_scale * (1.0 - 0.9 * frac);

        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        let mut next: Vec<Vec<f64>> = order.iter().take(cfg.elite).map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order.iter().take(cfg.elite).map(|&i| fit[i]).collect();

        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let mut best = rng.gen_range(0..pop.len());
            for _ in 1..cfg.tournament {
                let c = rng.gen_range(0..pop.len());
                if fit[c] > fit[best] {
                    best = c;
                }
            }
            best
        };
        let mut children = Vec::with_capacity(cfg.population - next.len());
        while next.len() + children.len() < cfg.population {
            let p1 = tournament(&mut rng);
            let mut child = if rng.gen::<f64>() < cfg.crossover_rate {
                let p2 = tournament(&mut rng);
                let u: f64 = rng.gen();
                pop[p1].iter().zip(&pop[p2]).map(|(a, b)| u * a + (1.0 - u) * b).collect()
            } else {
                pop[p1].clone()
            };
            if rng.gen::<f64>() < cfg.mutation_rate {
                for c in child.iter_mut() {
                    *c += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if !normalize(&mut child) {
                child = random_unit(&mut rng, l);
            }
            children.push(child);
        }
        let child_fit = evaluate_all(obj, &children);
        for (b, &v) in children.iter().zip(&child_fit) {
            inc.offer(b, v);
        }
        next.extend(children);
        next_fit.extend(child_fit);
        pop = next;
        fit = next_fit;
        trace.push(inc.value);

        if inc.value - last_best <= cfg.value_tolerance {
            stall += 1;
        } else {
            stall = 0;
            last_best = inc.value;
        }
        if cfg.stall_generations > 0 && stall >= cfg.stall_generations {
            break;
        }
    }

    let plateau_extent = polish(obj, cfg, &mut inc);
    let flat = inc.min_seen == inc.max_seen;
    Ok(SearchResult {
        beta_hat: RegimeParameter::new(inc.beta.clone())?,
        value_at_max: inc.value,
        evaluations: inc.evaluations,
        trace,
        flat_objective: flat,
        plateau_extent,
    })
}

fn two_point<O: Objective>(obj: &O) -> Result<SearchResult> {
    let plus = obj.evaluate(&[1.0]);
    let minus = obj.evaluate(&[-1.0]);
    let (beta, value) = if minus > plus { (-1.0, minus) } else { (1.0, plus) };
    Ok(SearchResult {
        beta_hat: RegimeParameter::new(vec![beta])?,
        value_at_max: value,
        evaluations: 2,
        trace: vec![value],
        flat_objective: plus == minus,
        plateau_extent: Vec::new(),
    })
}

/// Hyperspherical angles of a unit vector: `φ₀..φ_{l-3} ∈ [0, π]`, `φ_{l-2} ∈ (-π, π]`.
pub fn to_angles(beta: &[f64]) -> Vec<f64> {
    let l = beta.len();
    let mut angles = Vec::with_capacity(l.saturating_sub(1));
    for k in 0..l.saturating_sub(2) {
        let tail = euclidean_norm(&beta[k + 1..]);
        angles.push(tail.atan2(beta[k]));
    }
    if l >= 2 {
        angles.push(beta[l - 1].atan2(beta[l - 2]));
    }
    angles
}

pub fn from_angles(angles: &[f64]) -> Vec<f64> {
    let l = angles.len() + 1;
    let mut beta = Vec::with_capacity(l);
    let mut sin_prod = 1.0;
    for &a in angles {
        beta.push(sin_prod * a.cos());
        sin_prod *= a.sin();
    }
    beta.push(sin_prod);
    beta
}

/// Coordinate-wise polish in a hyperspherical chart: per angle, a scan of the
/// bracket at the configured resolution, then a golden-section search in the
/// cell around the best scan point. Axes are permuted so that the largest
/// components come last, keeping the chart away from its poles.
fn polish<O: Objective>(obj: &O, cfg: &SearchConfig, inc: &mut Incumbent) -> Vec<f64> {
    let l = inc.beta.len();
    let mut perm: Vec<usize> = (0..l).collect();
    perm.sort_by(|&a, &b| inc.beta[a].abs().total_cmp(&inc.beta[b].abs()).then(a.cmp(&b)));
    let to_beta = |angles: &[f64]| -> Vec<f64> {
        let local = from_angles(angles);
        let mut b = vec![0.0; l];
        for (k, &p) in perm.iter().enumerate() {
            b[p] = local[k];
        }
        normalize(&mut b);
        b
    };
    let mut angles = to_angles(&perm.iter().map(|&p| inc.beta[p]).collect::<Vec<_>>());
    let steps = (cfg.refine_bracket / cfg.refine_resolution).round() as i64;
    let mut extents = vec![0.0; angles.len()];
    if steps == 0 {
        return extents;
    }
    let offsets: Vec<f64> = (-steps..=steps).map(|j| j as f64 * cfg.refine_resolution).collect();

    for _pass in 0..cfg.refine_passes.max(1) {
        let mut improved = false;
        for k in 0..angles.len() {
            let base = angles[k];
            let candidates: Vec<Vec<f64>> = offsets
                .iter()
                .map(|&t| {
                    let mut a = angles.clone();
                    a[k] = base + t;
                    to_beta(&a)
                })
                .collect();
            let values = evaluate_all(obj, &candidates);
            let mut center = steps as usize;
            for (j, (b, &v)) in candidates.iter().zip(&values).enumerate() {
                if inc.offer(b, v) {
                    center = j;
                    improved = true;
                }
            }
            let best_t = offsets[center];
            angles[k] = base + best_t;

            let mut f = |t: f64| {
                let mut a = angles.clone();
                a[k] = t;
                let b = to_beta(&a);
                let v = obj.evaluate(&b);
                if inc.offer(&b, v) {
                    improved = true;
                    angles[k] = t;
                }
                v
            };
            let lo = base + best_t - cfg.refine_resolution;
            let hi = base + best_t + cfg.refine_resolution;
            golden_section_max(&mut f, lo, hi, 12);

            // plateau width on this coordinate, from the scan
            let target = values[center];
            let mut left = center;
            while left > 0 && values[left - 1] == target {
                left -= 1;
            }
            let mut right = center;
            while right + 1 < values.len() && values[right + 1] == target {
                right += 1;
            }
            extents[k] = (right - left) as f64 * cfg.refine_resolution;
        }
        if !improved {
            break;
        }
    }
    extents
}

/// Golden-section search for a maximum of `f` on `[a, b]`; returns the best point seen.
pub fn golden_section_max(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, iterations: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let (mut best_x, mut best_f) = if fd > fc { (d, fd) } else { (c, fc) };
    for _ in 0..iterations {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            if fc > best_f {
                best_x = c;
                best_f = fc;
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            if fd > best_f {
                best_x = d;
                best_f = fd;
            }
        }
    }
    (best_x, best_f)
}

/// Number of points of the angular grid for dimension `l` and `resolution`
/// divisions of the full circle.
pub fn grid_size(l: usize, resolution: usize) -> usize {
    match l {
        1 => 2,
        2 => resolution,
        3 => 2 + (resolution / 2).saturating_sub(1) * resolution,
        _ => usize::MAX,
    }
}

pub const MAX_GRID_POINTS: usize = 10_000_000;

/// Evaluate the objective on a uniform angular grid of the sphere (`l ≤ 3`) and
/// return the first maximum in lexicographic angle order.
///
/// `resolution` is the number of divisions of a full circle: `l = 2` uses angles
/// `2πj/m`; `l = 3` uses polar angles `πi/(m/2)` and azimuths `2πj/m` (one point
/// per pole). Doubling `resolution` yields a superset of grid points.
pub fn exhaustive_grid<O: Objective>(obj: &O, resolution: usize) -> Result<SearchResult> {
    let l = obj.dim();
    if !(1..=3).contains(&l) {
        return Err(Error::InvalidConfig(format!("exhaustive grid supports l <= 3, got {l}")));
    }
    if l == 1 {
        return two_point(obj);
    }
    if resolution < 4 || (l == 3 && !resolution.is_multiple_of(2)) {
        return Err(Error::InvalidConfig(format!("grid resolution {resolution} too small or odd")));
    }
    if grid_size(l, resolution) > MAX_GRID_POINTS {
        return Err(Error::InvalidConfig(format!(
            "grid of {} points exceeds {MAX_GRID_POINTS}",
            grid_size(l, resolution)
        )));
    }
    let m = resolution as f64;
    let points: Vec<Vec<f64>> = if l == 2 {
        (0..resolution)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / m;
                vec![t.cos(), t.sin()]
            })
            .collect()
    } else {
        let h = resolution / 2;
        let mut pts = Vec::with_capacity(grid_size(3, resolution));
        for i in 0..=h {
            let phi = PI * i as f64 / h as f64;
            let azimuths = if i == 0 || i == h { 1 } else { resolution };
            for j in 0..azimuths {
                let theta = 2.0 * PI * j as f64 / m;
                pts.push(vec![phi.cos(), phi.sin() * theta.cos(), phi.sin() * theta.sin()]);
            }
        }
        pts
    };
    let values: Vec<f64> = points.par_iter().map(|b| obj.evaluate(b)).collect();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let flat = values.iter().all(|&v| v == values[0]);
    let mut beta = points[best].clone();
    normalize(&mut beta);
    let value = obj.evaluate(&beta);
    Ok(SearchResult {
        beta_hat: RegimeParameter::new(beta)?,
        value_at_max: value,
        evaluations: values.len() + 1,
        trace: vec![value],
        flat_objective: flat,
        plateau_extent: Vec::new(),
    })
}

pub fn exhaustive_grid_value(data: &Dataset, nf: &NuisanceFit, resolution: usize) -> Result<SearchResult> {
    exhaustive_grid(&AipwObjective::new(data, nf)?, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aipw::value;
    use crate::nuisance::ClipBounds;

    struct Quadratic {
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }
        fn evaluate(&self, beta: &[f64]) -> f64 {
            -beta.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        }
    }

    fn toy(n: usize, seed: u64) -> (Dataset, NuisanceFit) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let y: Vec<f64> = rows
            .iter()
            .zip(&a)
            .map(|(r, &a)| a as f64 * (r[0] - 0.5 * r[1]) + rng.sample::<f64, _>(StandardNormal) * 0.5)
            .collect();
        let d = Dataset::from_rows(&rows, a, y, &["u", "v"], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5; n], vec![0.0; n], vec![0.0; n], ClipBounds::default()).unwrap();
        (d, nf)
    }

    #[test]
    fn angles_round_trip() {
        for b in [vec![0.6, 0.8], vec![0.0, 0.6, 0.8], vec![0.5, -0.5, 0.5, -0.5], vec![-1.0, 0.0, 0.0]] {
            let back = from_angles(&to_angles(&b));
            for (x, y) in b.iter().zip(&back) {
                assert!((x - y).abs() < 1e-15, "{b:?} {back:?}");
            }
        }
    }

    #[test]
    fn finds_smooth_maximum() {
        let target = vec![0.0, 2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
        let res = maximize(&Quadratic { target: target.clone() }, &SearchConfig::default(), &[]).unwrap();
        for (x, y) in res.beta_hat.as_slice().iter().zip(&target) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn one_dimensional_sphere() {
        // treating everyone is better: Y = 1 under treatment, 0 otherwise
        let d = Dataset::new(vec![1.0; 4], vec![1, 0, 1, 0], vec![1.0, 0.0, 1.0, 0.0], vec!["c".into()], true).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5; 4], vec![0.0; 4], vec![1.0; 4], ClipBounds::default()).unwrap();
        let res = search(&d, &nf, &SearchConfig::default()).unwrap();
        assert_eq!(res.beta_hat.as_slice(), &[1.0]);
        let mut flipped = d.outcomes().to_vec();
        flipped.iter_mut().for_each(|y| *y = 1.0 - *y);
        let d2 = Dataset::new(vec![1.0; 4], vec![1, 0, 1, 0], flipped, vec!["c".into()], true).unwrap();
        let nf2 = NuisanceFit::from_values(vec![0.5; 4], vec![1.0; 4], vec![0.0; 4], ClipBounds::default()).unwrap();
        assert_eq!(search(&d2, &nf2, &SearchConfig::default()).unwrap().beta_hat.as_slice(), &[-1.0]);
    }

    #[test]
    fn value_at_max_is_exact_and_unit_norm() {
        let (d, nf) = toy(50, 3);
        let res = search(&d, &nf, &SearchConfig::default()).unwrap();
        assert_eq!(res.value_at_max, value(&d, &nf, &res.beta_hat).unwrap());
        assert!((euclidean_norm(res.beta_hat.as_slice()) - 1.0).abs() < 1e-10);
        let mut again = res.beta_hat.as_slice().to_vec();
        normalize(&mut again);
        for (x, y) in again.iter().zip(res.beta_hat.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(value(&d, &nf, &RegimeParameter::from_unnormalized(again).unwrap()).unwrap(), res.value_at_max);
    }

    #[test]
    fn matches_dense_angular_grid() {
        let (d, nf) = toy(50, 11);
        let res = search(&d, &nf, &SearchConfig::default()).unwrap();
        let grid = exhaustive_grid_value(&d, &nf, 100_000).unwrap();
        assert!(res.value_at_max >= grid.value_at_max - 1e-6, "{} vs {}", res.value_at_max, grid.value_at_max);
    }

    #[test]
    fn incumbent_is_monotone_and_deterministic() {
        let (d, nf) = toy(80, 5);
        let cfg = SearchConfig {
            seed: 42,
            ..SearchConfig::default()
        };
        let a = search(&d, &nf, &cfg).unwrap();
        let b = search(&d, &nf, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(a.value_at_max >= a.trace[0]);
    }

    #[test]
    fn flat_objective_is_flagged() {
        let n = 10;
        let d = Dataset::from_rows(&vec![vec![0.3, -0.2]; n], vec![0; n], vec![1.0; n], &["u", "v"], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5; n], vec![1.0; n], vec![1.0; n], ClipBounds::default()).unwrap();
        assert!(search(&d, &nf, &SearchConfig::default()).unwrap().flat_objective);
        let g = exhaustive_grid_value(&d, &nf, 360).unwrap();
        assert!(g.flat_objective);
        assert_eq!(g.beta_hat.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn grid_refinement_is_monotone() {
        let (d, nf) = toy(60, 8);
        let mut prev = f64::NEG_INFINITY;
        for m in [16, 32, 64, 128, 256, 512] {
            let g = exhaustive_grid_value(&d, &nf, m).unwrap();
            assert!(g.value_at_max >= prev);
            prev = g.value_at_max;
        }
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let d3 = Dataset::from_rows(&rows, (0..20).map(|i| (i % 2) as u8).collect(), y, &["u", "v"], true).unwrap();
        let nf3 = NuisanceFit::from_values(vec![0.5; 20], vec![0.0; 20], vec![0.0; 20], ClipBounds::default()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for m in [8, 16, 32, 64, 128] {
            let g = exhaustive_grid_value(&d3, &nf3, m).unwrap();
            assert!(g.value_at_max >= prev);
            prev = g.value_at_max;
        }
    }

    #[test]
    fn grid_finds_best_realizable_halfspace() {
        // four points at 90° spacing: an open halfplane through the origin holds
        // one point or two adjacent ones
        let angles = [10f64, 100.0, 190.0, 280.0];
        let rows: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.to_radians().cos(), a.to_radians().sin()]).collect();
        let gains = [1.0, 2.5, -1.0, 0.5];
        // treated pseudo-outcome = gain, control = 0 (all treated, e = 0.5, mu = 0 => v = 2y)
        let y: Vec<f64> = gains.iter().map(|g| g / 2.0).collect();
        let d = Dataset::from_rows(&rows, vec![1; 4], y, &["u", "v"], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5; 4], vec![0.0; 4], vec![0.0; 4], ClipBounds::default()).unwrap();
        let realizable = |mask: u32| -> bool {
            let k = mask.count_ones();
            (k == 1) || (k == 2 && (0..4).any(|i| mask == (1 << i) | (1 << ((i + 1) % 4))))
        };
        let best_mask = (0u32..16)
            .filter(|&m| realizable(m))
            .max_by(|&a, &b| {
                let va: f64 = (0..4).filter(|i| a >> i & 1 == 1).map(|i| gains[i]).sum();
                let vb: f64 = (0..4).filter(|i| b >> i & 1 == 1).map(|i| gains[i]).sum();
                va.total_cmp(&vb)
            })
            .unwrap();
        assert_eq!(best_mask, 0b0011);
        let g = exhaustive_grid_value(&d, &nf, 3600).unwrap();
        let picked: u32 = (0..4)
            .filter(|&i| crate::data::decide(&rows[i], &g.beta_hat).unwrap() == 1)
            .map(|i| 1 << i)
            .sum();
        assert_eq!(picked, best_mask);
        assert!((g.value_at_max - 3.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(exhaustive_grid(&Quadratic { target: vec![0.0; 4] }, 100).is_err());
        assert!(maximize(&Quadratic { target: vec![] }, &SearchConfig::default(), &[]).is_err());
        let bad = SearchConfig {
            population: 1,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_csv_has_header() {
        let res = maximize(&Quadratic { target: vec![1.0, 0.0] }, &SearchConfig { generations: 3, ..Default::default() }, &[]).unwrap();
        let csv = res.trace_csv();
        assert!(csv.starts_with("generation,best_value\n0,"));
        assert_eq!(csv.lines().count(), res.trace.len() + 1);
    }
}
