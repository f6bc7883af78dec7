//! Additive local-linear kernel smoothing.
//!
//! Each covariate gets a univariate local-linear (Gaussian kernel, truncated at
//! four bandwidths) smoother evaluated on a grid of anchor points and linearly
//! interpolated in between. Anchors are the distinct sample values when there
//! are few of them, otherwise an even grid over the sample range. Components
//! are combined by backfitting; the propensity uses local scoring (IRLS outer
//! loop around weighted backfitting on the logit scale).

use super::logistic::expit;
use super::Predictor;

const KERNEL_RADIUS: f64 = 4.0;
const SINGULAR_REL: f64 = 1e-10;

/// Rule-of-thumb bandwidth `1.06 · sd · n^{-1/5}`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Piecewise-linear function through `(anchors[k], values[k])`, constant outside the range.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothComponent {
    pub column: usize,
    pub anchors: Vec<f64>,
    pub values: Vec<f64>,
}

impl SmoothComponent {
    pub fn eval(&self, x: f64) -> f64 {
        let a = &self.anchors;
        if a.len() == 1 || x <= a[0] {
            return self.values[0];
        }
        let last = a.len() - 1;
        if x >= a[last] {
            return self.values[last];
        }
        let hi = a.partition_point(|&g| g <= x);
        let lo = hi - 1;
        if x == a[lo] {
            return self.values[lo];
        }
        let t = (x - a[lo]) / (a[hi] - a[lo]);
        self.values[lo] + t * (self.values[hi] - self.values[lo])
    }
}

/// Fitted additive model `intercept + Σ_j f_j(x_j)`, optionally on the logit scale.
#[derive(Debug, Clone)]
pub struct AdditiveModel {
    pub intercept: f64,
    pub components: Vec<SmoothComponent>,
    pub logit: bool,
}

impl AdditiveModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.components.iter().map(|c| c.eval(x[c.column])).sum::<f64>()
    }
}

impl Predictor for AdditiveModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        if self.logit {
            expit(eta)
        } else {
            eta
        }
    }
}

/// Precomputed kernel weights for one covariate on one fitting sample.
///
/// Backfitting and local scoring re-smooth the same design many times, so the
/// windows and kernel values are computed once.
#[derive(Debug)]
struct KernelBasis {
    column: usize,
    anchors: Vec<f64>,
    /// Per anchor: (sample index, kernel weight, x - anchor).
    windows: Vec<Vec<(usize, f64, f64)>>,
    /// For each sample point, the bracketing anchor index and interpolation weight.
    locate: Vec<(usize, f64)>,
    nearest: Vec<usize>,
}

impl KernelBasis {
    fn new(column: usize, x: &[f64], bandwidth: f64, max_anchors: usize) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        let sorted: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let mut distinct = sorted.clone();
        distinct.dedup();
        let anchors = if distinct.len() <= max_anchors.max(2) {
            distinct
        } else {
            let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
            let g = max_anchors;
            (0..g)
                .map(|k| {
                    if k == g - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (g - 1) as f64
                    }
                })
                .collect()
        };
        let radius = KERNEL_RADIUS * bandwidth;
        let windows = anchors
            .iter()
            .map(|&g| {
                let start = sorted.partition_point(|&v| v < g - radius);
                let end = sorted.partition_point(|&v| v <= g + radius);
                order[start..end]
                    .iter()
                    .map(|&i| {
                        let d = x[i] - g;
                        let u = d / bandwidth;
                        (i, (-0.5 * u * u).exp(), d)
                    })
                    .collect()
            })
            .collect();
        let comp = SmoothComponent {
            column,
            anchors: anchors.clone(),
            values: vec![0.0; anchors.len()],
        };
        let locate = x
            .iter()
            .map(|&v| {
                let a = &comp.anchors;
                if a.len() == 1 || v <= a[0] {
                    return (0, 0.0);
                }
                let hi = a.partition_point(|&g| g <= v);
                if hi >= a.len() {
                    return (a.len() - 1, 0.0);
                }
                let lo = hi - 1;
                (lo, (v - a[lo]) / (a[hi] - a[lo]))
            })
            .collect();
        let nearest = anchors
            .iter()
            .map(|&g| {
                let p = sorted.partition_point(|&v| v < g);
                let pick = if p == 0 {
                    0
                } else if p == sorted.len() || g - sorted[p - 1] <= sorted[p] - g {
                    p - 1
                } else {
                    p
                };
                order[pick]
            })
            .collect();
        Self {
            column,
            anchors,
            windows,
            locate,
            nearest,
        }
    }

    /// Weighted local-linear fit of `z` at every anchor. Returns anchor values and
    /// the number of anchors that fell back to a local-constant fit.
    fn smooth(&self, z: &[f64], w: Option<&[f64]>) -> (Vec<f64>, usize) {
        let mut fallbacks = 0;
        let values = self
            .windows
            .iter()
            .enumerate()
            .map(|(k, win)| {
                let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for &(i, kern, d) in win {
                    let kw = match w {
                        Some(w) => kern * w[i],
                        None => kern,
                    };
                    s0 += kw;
                    s1 += kw * d;
                    s2 += kw * d * d;
                    t0 += kw * z[i];
                    t1 += kw * d * z[i];
                }
                let det = s0 * s2 - s1 * s1;
                if s0 > 0.0 && det > SINGULAR_REL * s0 * s2 && det > 0.0 {
                    (s2 * t0 - s1 * t1) / det
                } else {
                    fallbacks += 1;
                    if s0 > 0.0 {
                        t0 / s0
                    } else {
                        // empty window: nearest sample's response
                        z[self.nearest[k]]
                    }
                }
            })
            .collect();
        (values, fallbacks)
    }

    fn eval_at_samples(&self, values: &[f64], out: &mut [f64]) {
        for (o, &(lo, t)) in out.iter_mut().zip(&self.locate) {
            *o = if t == 0.0 {
                values[lo]
            } else {
                values[lo] + t * (values[lo + 1] - values[lo])
            };
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackfitStats {
    pub cycles: usize,
    pub fallbacks: usize,
}

pub struct AdditiveSmoother {
    bases: Vec<KernelBasis>,
    n: usize,
}

impl AdditiveSmoother {
    /// `columns[j]` is the covariate index, `xs[j]` its sample values, `bandwidths[j] > 0`.
    pub fn new(n: usize, columns: &[usize], xs: &[Vec<f64>], bandwidths: &[f64], max_anchors: usize) -> Self {
        let bases = columns
            .iter()
            .zip(xs)
            .zip(bandwidths)
            .map(|((&c, x), &h)| KernelBasis::new(c, x, h, max_anchors))
            .collect();
        Self { bases, n }
    }

    /// Weighted backfitting of `z` on the additive components.
    pub fn backfit(
        &self,
        z: &[f64],
        w: Option<&[f64]>,
        max_cycles: usize,
        tolerance: f64,
    ) -> (f64, Vec<Vec<f64>>, BackfitStats) {
        let n = self.n;
        let wsum = w.map_or(n as f64, |w| w.iter().sum());
        let wmean = |v: &[f64]| -> f64 {
            match w {
                Some(w) => v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum,
                None => v.iter().sum::<f64>() / wsum,
            }
        };
        let intercept = wmean(z);
        let mut anchor_values: Vec<Vec<f64>> = self.bases.iter().map(|b| vec![0.0; b.anchors.len()]).collect();
        let mut fitted: Vec<Vec<f64>> = vec![vec![0.0; n]; self.bases.len()];
        let mut stats = BackfitStats::default();
        if self.bases.is_empty() {
            return (intercept, anchor_values, stats);
        }
        let mut partial = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for cycle in 1..=max_cycles.max(1) {
            stats.cycles = cycle;
            let mut max_change: f64 = 0.0;
            stats.fallbacks = 0;
            for j in 0..self.bases.len() {
                for i in 0..n {
                    let others: f64 = (0..self.bases.len()).filter(|&k| k != j).map(|k| fitted[k][i]).sum();
                    partial[i] = z[i] - intercept - others;
                }
                let (mut vals, fb) = self.bases[j].smooth(&partial, w);
                stats.fallbacks += fb;
                self.bases[j].eval_at_samples(&vals, &mut scratch);
                let shift = wmean(&scratch);
                for v in &mut vals {
                    *v -= shift;
                }
                for (i, s) in scratch.iter_mut().enumerate() {
                    *s -= shift;
                    max_change = max_change.max((*s - fitted[j][i]).abs());
                }
                std::mem::swap(&mut fitted[j], &mut scratch);
                anchor_values[j] = vals;
            }
            if self.bases.len() == 1 || max_change < tolerance {
                break;
            }
        }
        (intercept, anchor_values, stats)
    }

    fn model(&self, intercept: f64, anchor_values: Vec<Vec<f64>>, logit: bool) -> AdditiveModel {
        AdditiveModel {
            intercept,
            components: self
                .bases
                .iter()
                .zip(anchor_values)
                .map(|(b, values)| SmoothComponent {
                    column: b.column,
                    anchors: b.anchors.clone(),
                    values,
                })
                .collect(),
            logit,
        }
    }

    pub fn fit_regression(&self, z: &[f64], max_cycles: usize, tolerance: f64) -> (AdditiveModel, BackfitStats) {
        let (a, v, s) = self.backfit(z, None, max_cycles, tolerance);
        (self.model(a, v, false), s)
    }

    /// Local scoring for a binary response. Returns the model, outer iterations and
    /// the last backfitting statistics.
    pub fn fit_logistic(
        &self,
        y: &[u8],
        max_outer: usize,
        tolerance: f64,
        max_cycles: usize,
    ) -> (AdditiveModel, usize, BackfitStats) {
        let n = self.n;
        let pbar = (y.iter().map(|&a| a as f64).sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let mut eta = vec![(pbar / (1.0 - pbar)).ln(); n];
        let mut model = self.model(eta[0], self.bases.iter().map(|b| vec![0.0; b.anchors.len()]).collect(), true);
        let mut stats = BackfitStats::default();
        let mut z = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut outer = 0;
        for it in 1..=max_outer.max(1) {
            outer = it;
            for i in 0..n {
                let p = expit(eta[i]).clamp(1e-6, 1.0 - 1e-6);
                w[i] = p * (1.0 - p);
                z[i] = eta[i] + (y[i] as f64 - p) / w[i];
            }
            let (a, vals, s) = self.backfit(&z, Some(&w), max_cycles, tolerance);
            stats = s;
            model = self.model(a, vals, true);
            let mut change: f64 = 0.0;
            let mut comp = vec![0.0; n];
            let mut new_eta = vec![a; n];
            for (b, c) in self.bases.iter().zip(&model.components) {
                b.eval_at_samples(&c.values, &mut comp);
                for (e, v) in new_eta.iter_mut().zip(&comp) {
                    *e += v;
                }
            }
            for (old, new) in eta.iter_mut().zip(new_eta) {
                change = change.max((new - *old).abs());
                *old = new;
            }
            if change < tolerance {
                break;
            }
        }
        (model, outer, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_lines_at_interior_points() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 37) % 500) as f64 / 100.0 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for h in [0.05, 0.3, 2.0] {
            let s = AdditiveSmoother::new(x.len(), &[0], std::slice::from_ref(&x), &[h], 64);
            let (m, _) = s.fit_regression(&y, 20, 1e-10);
            for &v in &x {
                assert!((m.linear_predictor(&[v]) - 2.0 * v).abs() < 1e-8, "h={h} x={v}");
            }
        }
    }

    #[test]
    fn component_interpolates() {
        let c = SmoothComponent {
            column: 0,
            anchors: vec![0.0, 1.0, 3.0],
            values: vec![0.0, 2.0, 0.0],
        };
        assert_eq!(c.eval(-1.0), 0.0);
        assert_eq!(c.eval(0.5), 1.0);
        assert_eq!(c.eval(2.0), 1.0);
        assert_eq!(c.eval(9.0), 0.0);
    }

    #[test]
    fn sparse_window_falls_back_to_local_constant() {
        // two clusters far apart relative to the bandwidth: each anchor sees one distinct x
        let x = vec![0.0, 0.0, 10.0, 10.0];
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let s = AdditiveSmoother::new(x.len(), &[0], &[x], &[0.1], 64);
        let (m, stats) = s.fit_regression(&y, 5, 1e-10);
        assert_eq!(stats.fallbacks, 2);
        assert!((m.linear_predictor(&[0.0]) - 2.0).abs() < 1e-12);
        assert!((m.linear_predictor(&[10.0]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn silverman_rule() {
        let v: Vec<f64> = (1..=5).map(f64::from).collect();
        let h = silverman_bandwidth(&v);
        assert!((h - 1.06 * 2.5f64.sqrt() * 5f64.powf(-0.2)).abs() < 1e-14);
    }
}
