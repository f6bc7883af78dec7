//! AIPW pseudo-outcomes, the empirical value `V̂ₙ(β)`, its plug-in variance and
//! the normal confidence interval for the optimal value.
//!
//! For a fixed observation the pseudo-outcome takes one of two values depending
//! only on `d(Xᵢ; β)`. The objective therefore precomputes both and evaluates a
//! candidate `β` as a base sum plus the gains of the observations in the
//! halfspace `xᵀβ > 0`. `value` and the policy search share that code path, so
//! the value reported for a search result is bit-identical to `value` at it.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{decide, Dataset, RegimeParameter};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;

/// Something maximized over the unit sphere.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Evaluate at a (not necessarily normalized) coefficient vector.
    fn evaluate(&self, beta: &[f64]) -> f64;
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, beta: &[f64]) -> f64 {
        (**self).evaluate(beta)
    }
}

/// `scale · (base + Σ_{i: xᵢᵀβ > 0} gainᵢ)` over row-major points `x`.
#[derive(Debug, Clone)]
pub struct HalfspaceSum {
    x: Vec<f64>,
    gain: Vec<f64>,
    base: f64,
    scale: f64,
    l: usize,
}

impl HalfspaceSum {
    pub fn new(x: Vec<f64>, l: usize, gain: Vec<f64>, base: f64, scale: f64) -> Self {
        debug_assert_eq!(x.len(), gain.len() * l);
        Self {
            x,
            gain,
            base,
            scale,
            l,
        }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.l
    }

    /// Drop rows whose gain is exactly zero; they never change the sum.
    pub fn pruned(mut self) -> Self {
        let l = self.l;
        let mut k = 0;
        for i in 0..self.gain.len() {
            if self.gain[i] != 0.0 {
                self.gain[k] = self.gain[i];
                self.x.copy_within(i * l..(i + 1) * l, k * l);
                k += 1;
            }
        }
        self.gain.truncate(k);
        self.x.truncate(k * l);
        self
    }

    /// Concatenate two sums over the same dimension with the same scale.
    pub fn concat(mut self, other: HalfspaceSum) -> Self {
        debug_assert_eq!(self.l, other.l);
        self.x.extend(other.x);
        self.gain.extend(other.gain);
        self.base += other.base;
        self
    }

    #[inline]
    pub fn evaluate(&self, beta: &[f64]) -> f64 {
        let selected = match self.l {
            1 => selected_sum::<1>(&self.x, &self.gain, beta),
            2 => selected_sum::<2>(&self.x, &self.gain, beta),
            3 => selected_sum::<3>(&self.x, &self.gain, beta),
            4 => selected_sum::<4>(&self.x, &self.gain, beta),
            _ => selected_sum_dyn(&self.x, self.l, &self.gain, beta),
        };
        self.scale * (self.base + selected)
    }
}

// Four interleaved accumulators, combined in a fixed order.
#[inline]
fn selected_sum<const L: usize>(x: &[f64], gain: &[f64], beta: &[f64]) -> f64 {
    let b: [f64; L] = beta[..L].try_into().expect("dimension checked by caller");
    let mut acc = [0.0f64; 4];
    let mut rows = x.chunks_exact(4 * L);
    let mut gains = gain.chunks_exact(4);
    for (block, g) in (&mut rows).zip(&mut gains) {
        for lane in 0..4 {
            let r = &block[lane * L..(lane + 1) * L];
            let mut s = 0.0;
            for k in 0..L {
                s += r[k] * b[k];
            }
            acc[lane] += if s > 0.0 { g[lane] } else { 0.0 };
        }
    }
    let mut tail = 0.0;
    for (r, g) in rows.remainder().chunks_exact(L).zip(gains.remainder()) {
        let mut s = 0.0;
        for k in 0..L {
            s += r[k] * b[k];
        }
        if s > 0.0 {
            tail += g;
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

fn selected_sum_dyn(x: &[f64], l: usize, gain: &[f64], beta: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    for (i, (r, g)) in x.chunks_exact(l).zip(gain).enumerate() {
        let s: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
        if s > 0.0 {
            acc[i % 4] += g;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `v̂(Xᵢ, Aᵢ, Yᵢ; β)` given the regime's decision `d` for this observation.
#[inline]
pub fn pseudo_outcome_for(d: u8, a: u8, y: f64, e: f64, mu0: f64, mu1: f64) -> f64 {
    let mu_d = if d == 1 { mu1 } else { mu0 };
    if a == d {
        let rho = if a == 1 { e } else { 1.0 - e };
        (y - mu_d) / rho + mu_d
    } else {
        mu_d
    }
}

fn check_inputs(data: &Dataset, nf: &NuisanceFit) -> Result<()> {
    if nf.n() != data.n() {
        return Err(Error::Dimension {
            expected: data.n(),
            got: nf.n(),
        });
    }
    Ok(())
}

fn check_beta(data: &Dataset, beta: &[f64]) -> Result<()> {
    if beta.len() != data.dim() {
        return Err(Error::Dimension {
            expected: data.dim(),
            got: beta.len(),
        });
    }
    Ok(())
}

/// Both candidate pseudo-outcomes `(v̂ᵢ|d=0, v̂ᵢ|d=1)` for every observation.
pub fn pseudo_outcome_table(data: &Dataset, nf: &NuisanceFit) -> Result<Vec<(f64, f64)>> {
    check_inputs(data, nf)?;
    (0..data.n())
        .map(|i| {
            let e = nf.e_hat[i];
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::NumericalFailure(format!("propensity {e} at observation {i}")));
            }
            let (a, y) = (data.treatments()[i], data.outcomes()[i]);
            let t0 = pseudo_outcome_for(0, a, y, e, nf.mu0_hat[i], nf.mu1_hat[i]);
            let t1 = pseudo_outcome_for(1, a, y, e, nf.mu0_hat[i], nf.mu1_hat[i]);
            if !(t0.is_finite() && t1.is_finite()) {
                return Err(Error::NumericalFailure(format!("pseudo-outcome at observation {i}")));
            }
            Ok((t0, t1))
        })
        .collect()
}

pub fn pseudo_outcome(i: usize, data: &Dataset, nf: &NuisanceFit, beta: &RegimeParameter) -> Result<f64> {
    check_inputs(data, nf)?;
    let e = nf.e_hat[i];
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::NumericalFailure(format!("propensity {e} at observation {i}")));
    }
    let d = decide(data.row(i), beta)?;
    let v = pseudo_outcome_for(d, data.treatments()[i], data.outcomes()[i], e, nf.mu0_hat[i], nf.mu1_hat[i]);
    if !v.is_finite() {
        return Err(Error::NumericalFailure(format!("pseudo-outcome at observation {i}")));
    }
    Ok(v)
}

impl Objective for HalfspaceSum {
    fn dim(&self) -> usize {
        self.l
    }

    fn evaluate(&self, beta: &[f64]) -> f64 {
        HalfspaceSum::evaluate(self, beta)
    }
}

/// `V̂ₙ(β)` as an [`Objective`] over raw coefficient vectors.
#[derive(Debug, Clone)]
pub struct AipwObjective {
    sum: HalfspaceSum,
}

impl AipwObjective {
    pub fn new(data: &Dataset, nf: &NuisanceFit) -> Result<Self> {
        Self::weighted(data, nf, None)
    }

    /// `(1/n) Σᵢ cᵢ v̂ᵢ(β)` with per-observation multipliers `cᵢ` (default 1), where
    /// `n` is the dataset size.
    pub fn weighted(data: &Dataset, nf: &NuisanceFit, weights: Option<&[f64]>) -> Result<Self> {
        let table = pseudo_outcome_table(data, nf)?;
        let w = |i: usize| weights.map_or(1.0, |w| w[i]);
        let mut base = 0.0;
        let mut gain = Vec::with_capacity(table.len());
        for (i, &(t0, t1)) in table.iter().enumerate() {
            base += w(i) * t0;
            gain.push(w(i) * (t1 - t0));
        }
        Ok(Self {
            sum: HalfspaceSum::new(data.covariates().to_vec(), data.dim(), gain, base, 1.0 / data.n() as f64),
        })
    }

    pub fn into_sum(self) -> HalfspaceSum {
        self.sum
    }
}

impl Objective for AipwObjective {
    fn dim(&self) -> usize {
        self.sum.l
    }

    fn evaluate(&self, beta: &[f64]) -> f64 {
        self.sum.evaluate(beta)
    }
}

/// `V̂ₙ(β) = (1/n) Σᵢ v̂ᵢ(β)`.
pub fn value(data: &Dataset, nf: &NuisanceFit, beta: &RegimeParameter) -> Result<f64> {
    check_beta(data, beta.as_slice())?;
    Ok(AipwObjective::new(data, nf)?.evaluate(beta.as_slice()))
}

/// Plug-in variance `(1/n) Σᵢ (v̂ᵢ(β) − V̂ₙ(β))²`.
pub fn sigma2(data: &Dataset, nf: &NuisanceFit, beta: &RegimeParameter) -> Result<f64> {
    if data.n() < 2 {
        return Err(Error::InvalidData("variance needs n >= 2".into()));
    }
    check_beta(data, beta.as_slice())?;
    let center = value(data, nf, beta)?;
    let mut ss = 0.0;
    for i in 0..data.n() {
        let r = pseudo_outcome(i, data, nf, beta)? - center;
        ss += r * r;
    }
    Ok(ss / data.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub beta_hat: RegimeParameter,
    pub value: f64,
    pub sigma2: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub n: usize,
}

/// Two-sided standard normal critical value for a confidence level.
pub fn normal_critical(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level must be in (0,1), got {level}")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

/// Normal interval `V̂ ± z · √(σ̂²/n)`.
pub fn interval(value: f64, sigma2: f64, n: usize, level: f64) -> Result<(f64, f64)> {
    let z = normal_critical(level)?;
    let half = z * (sigma2 / n as f64).sqrt();
    Ok((value - half, value + half))
}

pub fn value_ci(data: &Dataset, nf: &NuisanceFit, beta_hat: &RegimeParameter, level: f64) -> Result<ValueReport> {
    normal_critical(level)?;
    let v = value(data, nf, beta_hat)?;
    let s2 = sigma2(data, nf, beta_hat)?;
    let (lo, hi) = interval(v, s2, data.n(), level)?;
    Ok(ValueReport {
        beta_hat: beta_hat.clone(),
        value: v,
        sigma2: s2,
        ci_lo: lo,
        ci_hi: hi,
        level,
        n: data.n(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::ClipBounds;
    use proptest::prelude::*;

    fn one_obs(a: u8, y: f64, e: f64, mu0: f64, mu1: f64) -> (Dataset, NuisanceFit) {
        let d = Dataset::new(vec![1.0], vec![a], vec![y], vec!["x".into()], false).unwrap();
        let nf = NuisanceFit::from_values(vec![e], vec![mu0], vec![mu1], ClipBounds::default()).unwrap();
        (d, nf)
    }

    #[test]
    fn pseudo_outcome_examples() {
        let beta = RegimeParameter::new(vec![1.0]).unwrap();
        let (d, nf) = one_obs(1, 2.0, 0.5, 0.0, 1.0);
        assert_eq!(pseudo_outcome(0, &d, &nf, &beta).unwrap(), 3.0);
        assert_eq!(value(&d, &nf, &beta).unwrap(), 3.0);
        let (d, nf) = one_obs(0, 2.0, 0.5, 0.0, 1.0);
        assert_eq!(pseudo_outcome(0, &d, &nf, &beta).unwrap(), 1.0);
        for a in [0, 1] {
            let (d, nf) = one_obs(a, 1.25, 0.3, 7.0, 1.25);
            assert_eq!(pseudo_outcome(0, &d, &nf, &beta).unwrap(), 1.25);
        }
    }

    #[test]
    fn value_and_sigma2_examples() {
        // pseudo-outcomes 3 and 1
        let d = Dataset::new(vec![1.0, 1.0], vec![1, 0], vec![2.0, 2.0], vec!["x".into()], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5, 0.5], vec![0.0, 0.0], vec![1.0, 1.0], ClipBounds::default()).unwrap();
        let beta = RegimeParameter::new(vec![1.0]).unwrap();
        assert_eq!(value(&d, &nf, &beta).unwrap(), 2.0);
        assert_eq!(sigma2(&d, &nf, &beta).unwrap(), 1.0);

        // pseudo-outcomes 0, 0, 6 via control regime and mismatched arms
        let d = Dataset::new(vec![1.0; 3], vec![1, 1, 0], vec![0.0, 0.0, 3.0], vec!["x".into()], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.5; 3], vec![0.0; 3], vec![0.0; 3], ClipBounds::default()).unwrap();
        let control = RegimeParameter::new(vec![-1.0]).unwrap();
        assert_eq!(value(&d, &nf, &control).unwrap(), 2.0);
        assert_eq!(sigma2(&d, &nf, &control).unwrap(), 8.0);

        let d1 = Dataset::new(vec![1.0], vec![1], vec![1.0], vec!["x".into()], false).unwrap();
        let nf1 = NuisanceFit::from_values(vec![0.5], vec![0.0], vec![0.0], ClipBounds::default()).unwrap();
        assert!(sigma2(&d1, &nf1, &beta).is_err());
    }

    #[test]
    fn constant_pseudo_outcomes_have_zero_variance() {
        let d = Dataset::new(vec![1.0; 4], vec![0, 1, 0, 1], vec![5.0; 4], vec!["x".into()], false).unwrap();
        let nf = NuisanceFit::from_values(vec![0.3; 4], vec![5.0; 4], vec![5.0; 4], ClipBounds::default()).unwrap();
        let beta = RegimeParameter::new(vec![1.0]).unwrap();
        assert_eq!(sigma2(&d, &nf, &beta).unwrap(), 0.0);
        let r = value_ci(&d, &nf, &beta, 0.95).unwrap();
        assert_eq!((r.ci_lo, r.ci_hi), (r.value, r.value));
    }

    #[test]
    fn normal_interval_example() {
        let (lo, hi) = interval(2.0, 1.0, 100, 0.95).unwrap();
        assert!((lo - 1.804).abs() < 5e-4 && (hi - 2.196).abs() < 5e-4, "{lo} {hi}");
        assert!(interval(2.0, 1.0, 100, 1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (d, nf) = one_obs(1, 2.0, 0.5, 0.0, 1.0);
        let beta = RegimeParameter::from_unnormalized(vec![1.0, 1.0]).unwrap();
        assert!(matches!(value(&d, &nf, &beta), Err(Error::Dimension { .. })));
    }

    fn brute_force_value(x: &[Vec<f64>], a: &[u8], y: &[f64], e: &[f64], m0: &[f64], m1: &[f64], beta: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..y.len() {
            let s: f64 = x[i].iter().zip(beta).map(|(u, v)| u * v).sum();
            let d = if s > 0.0 { 1.0 } else { 0.0 };
            let ai = a[i] as f64;
            let rho = e[i] * ai + (1.0 - e[i]) * (1.0 - ai);
            let mu_d = m1[i] * d + m0[i] * (1.0 - d);
            let ind = if ai == d { 1.0 } else { 0.0 };
            total += ind / rho * (y[i] - mu_d) + mu_d;
        }
        total / y.len() as f64
    }

    proptest! {
        #[test]
        fn value_matches_brute_force(
            rows in prop::collection::vec(
                (prop::collection::vec(-3.0f64..3.0, 3), 0u8..2, -5.0f64..5.0, 0.02f64..0.98, -4.0f64..4.0, -4.0f64..4.0),
                1..=5),
            b in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let a: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let e: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let m0: Vec<f64> = rows.iter().map(|r| r.4).collect();
            let m1: Vec<f64> = rows.iter().map(|r| r.5).collect();
            let d = Dataset::from_rows(&x, a.clone(), y.clone(), &["u", "v", "w"], false).unwrap();
            let nf = NuisanceFit::from_values(e.clone(), m0.clone(), m1.clone(), ClipBounds::default()).unwrap();
            let beta = RegimeParameter::from_unnormalized(b).unwrap();
            let v = value(&d, &nf, &beta).unwrap();
            let oracle = brute_force_value(&x, &a, &y, &e, &m0, &m1, beta.as_slice());
            prop_assert!((v - oracle).abs() < 1e-12);
        }

        #[test]
        fn value_is_invariant_to_positive_rescaling(
            b in prop::collection::vec(-1.0f64..1.0, 2),
            s in 0.001f64..1000.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let n = 17;
            let x: Vec<Vec<f64>> = (0..n).map(|i| vec![((i as u64 * 31 + seed) % 13) as f64 - 6.0, ((i as u64 * 7 + seed) % 5) as f64 - 2.0]).collect();
            let a: Vec<u8> = (0..n).map(|i| ((i as u64 + seed) % 2) as u8).collect();
            let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let d = Dataset::from_rows(&x, a, y, &["u", "v"], false).unwrap();
            let nf = NuisanceFit::from_values(vec![0.4; n], vec![0.1; n], vec![-0.2; n], ClipBounds::default()).unwrap();
            let b1 = RegimeParameter::from_unnormalized(b.clone()).unwrap();
            let b2 = RegimeParameter::from_unnormalized(b.iter().map(|v| v * s).collect()).unwrap();
            let obj = AipwObjective::new(&d, &nf).unwrap();
            prop_assert_eq!(obj.evaluate(&b), obj.evaluate(&b.iter().map(|v| v * s).collect::<Vec<_>>()));
            prop_assert_eq!(value(&d, &nf, &b1).unwrap(), obj.evaluate(b1.as_slice()));
            let _ = b2;
        }

        #[test]
        fn sigma2_matches_two_pass_plug_in(
            rows in prop::collection::vec((-2.0f64..2.0, 0u8..2, -5.0f64..5.0, 0.05f64..0.95), 2..40),
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![1.0, r.0]).collect();
            let a: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let e: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let n = rows.len();
            let d = Dataset::from_rows(&x, a.clone(), y.clone(), &["c", "u"], false).unwrap();
            let nf = NuisanceFit::from_values(e.clone(), vec![0.5; n], vec![-0.5; n], ClipBounds::default()).unwrap();
            let beta = RegimeParameter::from_unnormalized(vec![0.2, 1.0]).unwrap();
            // second implementation: E[v²] − (E v)² on the empirical distribution
            let vs: Vec<f64> = (0..n).map(|i| {
                let di = ((x[i][0] * beta.as_slice()[0] + x[i][1] * beta.as_slice()[1]) > 0.0) as u8;
                pseudo_outcome_for(di, a[i], y[i], e[i], 0.5, -0.5)
            }).collect();
            let m1 = vs.iter().sum::<f64>() / n as f64;
            let m2 = vs.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let s2 = sigma2(&d, &nf, &beta).unwrap();
            prop_assert!((s2 - (m2 - m1 * m1)).abs() < 1e-9 * (1.0 + m2));
            prop_assert!(s2 >= 0.0);
        }
    }
}
