//! A-posteriori evaluators for the quantized-FedAvg convergence bound.
//!
//! With `K` rounds, bit budget `B`, quantization level `s` and per-client
//! update ranges `range_m^i`, the averaged squared gradient norm of the
//! aggregated model is bounded by
//!
//! ```text
//! 2nd√(3s)(f₀ − f_K) / (Bητ)
//!   + Ld²√3 / (4Bnητ s^{3/2}) · ΣΣ (range_m^i)²
//!   + ηLσ²/n + η²(σ²/n)(n+1)(τ−1)L²
//! ```
//!
//! and the level minimising it is `s* = √(3Ld ΣΣ range² / (8n²(f₀ − f_K)))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, BatchSize, DatasetShard, ModelKind, ModelSpec, NumericsError, ParamVector};
use crate::rng::RandomStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("the r = n bound needs r == n (got r = {r}, n = {n}); use generalized_rhs")]
    PartialSelection { r: usize, n: usize },
    #[error("invalid bound input: {0}")]
    Input(String),
    #[error("f0 = {f0} must exceed fK = {fk}")]
    NoDescent { f0: f64, fk: f64 },
    #[error("all sample pairs coincide; smoothness is undefined")]
    DegenerateSamples,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Constants and measured series for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub l: f64,
    pub sigma2: f64,
    pub eta: f64,
    pub tau: usize,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    /// Total uplink bit budget `B`.
    pub budget_bits: f64,
    /// Quantization level `s`.
    pub s: f64,
    /// `ranges[m][i]`: range of client `i`'s update in round `m`.
    pub ranges: Vec<Vec<f64>>,
    pub f0: f64,
    pub fk: f64,
}

impl BoundInputs {
    pub fn rounds(&self) -> usize {
        self.ranges.len()
    }

    /// `ΣΣ (range_m^i)²`.
    pub fn range_sq_sum(&self) -> f64 {
        self.ranges.iter().flatten().map(|r| r * r).sum()
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::Input(m.to_string()));
        let positive = [self.l, self.eta, self.budget_bits, self.s];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("L, eta, B and s must be positive and finite");
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be nonnegative");
        }
        if self.tau == 0 || self.n == 0 || self.d == 0 {
            return bad("tau, n and d must be positive");
        }
        if self.r == 0 || self.r > self.n {
            return bad("r must lie in [1, n]");
        }
        if self.s < 1.0 {
            return bad("s must be at least 1");
        }
        if !(self.f0.is_finite() && self.fk.is_finite()) {
            return bad("f0 and fK must be finite");
        }
        if self.ranges.iter().flatten().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return bad("ranges must be nonnegative and finite");
        }
        Ok(())
    }
}

/// Named terms of the right-hand side, plus the measured left-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub initial_gap_term: f64,
    pub range_term: f64,
    pub sigma_term: f64,
    pub drift_term: f64,
    /// Client-selection terms; both zero when `r == n`.
    pub selection_sigma_term: f64,
    pub selection_quant_term: f64,
    pub total: f64,
    pub measured_lhs: Option<f64>,
    pub satisfied: Option<bool>,
}

impl BoundReport {
    /// Attach a measured left-hand side and compare it to the total.
    pub fn with_measured(mut self, lhs: f64) -> Self {
        self.measured_lhs = Some(lhs);
        self.satisfied = Some(lhs <= self.total);
        self
    }
}

fn common_terms(b: &BoundInputs) -> (f64, f64, f64, f64) {
    let (n, d, tau) = (b.n as f64, b.d as f64, b.tau as f64);
    let sqrt3 = 3f64.sqrt();
    let initial_gap = 2.0 * n * d * (3.0 * b.s).sqrt() * (b.f0 - b.fk) / (b.budget_bits * b.eta * tau);
    let range = b.l * d * d * sqrt3 / (4.0 * b.budget_bits * n * b.eta * tau * b.s.powf(1.5)) * b.range_sq_sum();
    let sigma = b.eta * b.l * b.sigma2 / n;
    let drift = b.eta * b.eta * (b.sigma2 / n) * (n + 1.0) * (tau - 1.0) * b.l * b.l;
    (initial_gap, range, sigma, drift)
}

/// Right-hand side of the bound with every client participating.
pub fn theorem1_rhs(b: &BoundInputs) -> Result<BoundReport, AnalysisError> {
    b.validate()?;
    if b.r != b.n {
        return Err(AnalysisError::PartialSelection { r: b.r, n: b.n });
    }
    let (initial_gap_term, range_term, sigma_term, drift_term) = common_terms(b);
    Ok(BoundReport {
        initial_gap_term,
        range_term,
        sigma_term,
        drift_term,
        selection_sigma_term: 0.0,
        selection_quant_term: 0.0,
        total: initial_gap_term + range_term + sigma_term + drift_term,
        measured_lhs: None,
        satisfied: None,
    })
}

/// Right-hand side when only `r` of `n` clients are aggregated per round.
///
/// Adds `ηLσ²/(r(n−1)) · (1 − r/n) · 4(1 + q)n` with `q = d/s²`, split into
/// its `4n` and `4qn` parts.
pub fn generalized_rhs(b: &BoundInputs) -> Result<BoundReport, AnalysisError> {
    b.validate()?;
    let (initial_gap_term, range_term, sigma_term, drift_term) = common_terms(b);
    let (selection_sigma_term, selection_quant_term) = if b.r == b.n {
        (0.0, 0.0)
    } else {
        let (n, r) = (b.n as f64, b.r as f64);
        let q = b.d as f64 / (b.s * b.s);
        let factor = b.eta * b.l * b.sigma2 / (r * (n - 1.0)) * (1.0 - r / n);
        (factor * 4.0 * n, factor * 4.0 * q * n)
    };
    Ok(BoundReport {
        initial_gap_term,
        range_term,
        sigma_term,
        drift_term,
        selection_sigma_term,
        selection_quant_term,
        total: initial_gap_term + range_term + sigma_term + drift_term + (selection_sigma_term + selection_quant_term),
        measured_lhs: None,
        satisfied: None,
    })
}

/// Level `s*` that minimises [`theorem1_rhs`] at a fixed budget.
pub fn optimal_level(l: f64, d: usize, n: usize, ranges: &[Vec<f64>], f0: f64, fk: f64) -> Result<f64, AnalysisError> {
    if !(f0 > fk) {
        return Err(AnalysisError::NoDescent { f0, fk });
    }
    if !(l > 0.0) || d == 0 || n == 0 {
        return Err(AnalysisError::Input("L, d and n must be positive".into()));
    }
    let sum: f64 = ranges.iter().flatten().map(|r| r * r).sum();
    let n = n as f64;
    Ok((3.0 * l * d as f64 * sum / (8.0 * n * n * (f0 - fk))).sqrt())
}

/// Stationarity rate with `η = 1/(L√(Kτ))` and `s = s*`.
pub fn rate_rhs(l: f64, f0: f64, fk: f64, rounds: usize, tau: usize, sigma2: f64, n: usize) -> f64 {
    let kt = (rounds * tau) as f64;
    let n = n as f64;
    8.0 * l * (f0 - fk) / (3.0 * kt.sqrt()) + sigma2 / (n * kt.sqrt()) + sigma2 * (n + 1.0) * (tau as f64 - 1.0) / (n * kt)
}

/// Small-stepsize condition under which the per-round recursion telescopes:
/// `1 − Lη[1 + n/(r(n−1)) (1 − r/n) 4(1+q) τ] − 2L²τ(τ−1)η² ≥ 0`.
pub fn stepsize_condition(l: f64, eta: f64, tau: usize, n: usize, r: usize, q: f64) -> Result<bool, AnalysisError> {
    if r == 0 || r > n {
        return Err(AnalysisError::Input(format!("r must lie in [1, n], got r = {r}, n = {n}")));
    }
    if n == 1 && r < n {
        return Err(AnalysisError::Input("partial selection needs n >= 2".into()));
    }
    Ok(stepsize_margin(l, eta, tau, n, r, q) >= 0.0)
}

/// Left-hand side of [`stepsize_condition`].
pub fn stepsize_margin(l: f64, eta: f64, tau: usize, n: usize, r: usize, q: f64) -> f64 {
    let (nf, rf, t) = (n as f64, r as f64, tau as f64);
    let selection = if r == n { 0.0 } else { nf / (rf * (nf - 1.0)) * (1.0 - rf / nf) * 4.0 * (1.0 + q) * t };
    1.0 - l * eta * (1.0 + selection) - 2.0 * l * l * t * (t - 1.0) * eta * eta
}

/// Sampled secant estimate of the smoothness constant of `grad`.
///
/// For every consecutive pair of `samples` the ratio `‖∇f(a) − ∇f(b)‖/‖a − b‖`
/// is taken, then refined by `power_steps` rounds of secant power iteration
/// along the gradient difference. Every ratio seen is a valid secant, so for a
/// general smooth function the result is a lower bound on `L`; for a quadratic
/// it converges to the largest Hessian eigenvalue.
pub fn estimate_smoothness<G>(grad: G, samples: &[ParamVector], power_steps: usize) -> Result<f64, AnalysisError>
where
    G: Fn(&ParamVector) -> Result<ParamVector, AnalysisError>,
{
    if samples.len() < 2 {
        return Err(AnalysisError::Input("need at least two samples".into()));
    }
    let mut best: Option<f64> = None;
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let mut dir = b.sub(a)?;
        let scale = dir.norm();
        if scale == 0.0 {
            continue;
        }
        let ga = grad(a)?;
        for _ in 0..=power_steps {
            let len = dir.norm();
            if len == 0.0 {
                break;
            }
            dir.scale(scale / len);
            let probe = a.add(&dir)?;
            let diff = grad(&probe)?.sub(&ga)?;
            let ratio = diff.norm() / dir.norm();
            if ratio.is_finite() {
                best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
            }
            dir = diff;
        }
    }
    best.ok_or(AnalysisError::DegenerateSamples)
}

/// Smoothness estimate for a model on a shard (full-batch gradients).
pub fn estimate_l(spec: &ModelSpec, samples: &[ParamVector], shard: &DatasetShard) -> Result<f64, AnalysisError> {
    estimate_smoothness(|x| Ok(numerics::full_gradient(spec, x, shard)?), samples, 30)
}

/// Exact smoothness constant of linear regression: the top eigenvalue of
/// `(1/m) Σ [x; 1][x; 1]ᵀ`, by power iteration.
pub fn linreg_smoothness(shard: &DatasetShard) -> Result<f64, AnalysisError> {
    if shard.is_empty() {
        return Err(AnalysisError::Input("empty shard".into()));
    }
    let dim = shard.input_dim() + 1;
    let m = shard.len() as f64;
    let mut gram = vec![0.0; dim * dim];
    for r in 0..shard.len() {
        let row = shard.row(r);
        let at = |j: usize| if j < dim - 1 { row[j] } else { 1.0 };
        for a in 0..dim {
            for b in 0..dim {
                gram[a * dim + b] += at(a) * at(b) / m;
            }
        }
    }
    Ok(power_iteration(&gram, dim, 10_000, 1e-14))
}

/// Exact smoothness constant of the quadratic model: the mean curvature weight.
pub fn quadratic_smoothness(shard: &DatasetShard) -> f64 {
    shard.labels().iter().sum::<f64>() / shard.len() as f64
}

/// Exact smoothness constant where one is available in closed form.
pub fn exact_smoothness(spec: &ModelSpec, shard: &DatasetShard) -> Option<f64> {
    match spec.kind {
        ModelKind::LinearRegression => linreg_smoothness(shard).ok(),
        ModelKind::Quadratic => Some(quadratic_smoothness(shard)),
        _ => None,
    }
}

fn power_iteration(matrix: &[f64], dim: usize, max_iter: usize, tol: f64) -> f64 {
    let mut v: Vec<f64> = (0..dim).map(|j| 1.0 + j as f64 / dim as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w: Vec<f64> = (0..dim).map(|a| (0..dim).map(|b| matrix[a * dim + b] * v[b]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= tol * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Mean of `‖∇̃f − ∇f‖²` over `trials` stochastic batches.
pub fn estimate_sigma2(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &DatasetShard,
    batch: BatchSize,
    trials: usize,
    rng: &mut RandomStream,
) -> Result<f64, AnalysisError> {
    if trials == 0 {
        return Err(AnalysisError::Input("trials must be positive".into()));
    }
    let full = numerics::full_gradient(spec, params, shard)?;
    if matches!(batch, BatchSize::Full) || matches!(batch, BatchSize::Examples(b) if b >= shard.len()) {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for _ in 0..trials {
        let g = numerics::gradient(spec, params, shard, batch, rng)?;
        acc += g.sub(&full)?.norm_sq();
    }
    Ok(acc / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_inputs() -> BoundInputs {
        BoundInputs {
            l: 5.0,
            sigma2: 0.0,
            eta: 1.0,
            tau: 1,
            n: 1,
            r: 1,
            d: 1,
            budget_bits: 1.0,
            s: 1.0,
            ranges: vec![vec![0.0]],
            f0: 1.0,
            fk: 0.0,
        }
    }

    #[test]
    fn only_gap_term_survives() {
        let r = theorem1_rhs(&unit_inputs()).unwrap();
        assert_eq!(r.range_term, 0.0);
        assert_eq!(r.sigma_term, 0.0);
        assert_eq!(r.drift_term, 0.0);
        assert!((r.total - 2.0 * 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_single_step_kills_noise_terms() {
        let mut b = unit_inputs();
        b.n = 4;
        b.r = 4;
        b.ranges = vec![vec![0.3, 0.1, 0.2, 0.4]; 3];
        b.sigma2 = 0.0;
        b.tau = 1;
        let r = theorem1_rhs(&b).unwrap();
        assert_eq!((r.sigma_term, r.drift_term), (0.0, 0.0));
        b.sigma2 = 2.0;
        b.tau = 3;
        let r = theorem1_rhs(&b).unwrap();
        assert!(r.sigma_term > 0.0 && r.drift_term > 0.0);
    }

    #[test]
    fn partial_selection_redirected() {
        let mut b = unit_inputs();
        b.n = 3;
        b.r = 2;
        b.ranges = vec![vec![0.1, 0.2, 0.3]];
        assert!(matches!(theorem1_rhs(&b), Err(AnalysisError::PartialSelection { r: 2, n: 3 })));
        assert!(generalized_rhs(&b).is_ok());
    }

    #[test]
    fn optimal_level_unit_case_and_homogeneity() {
        let s = optimal_level(8.0, 1, 1, &[vec![1.0]], 3.0, 0.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let ranges = vec![vec![0.2, 0.5], vec![0.1, 0.3]];
        let base = optimal_level(2.0, 10, 2, &ranges, 1.0, 0.4).unwrap();
        let scaled: Vec<Vec<f64>> = ranges.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        let s3 = optimal_level(2.0, 10, 2, &scaled, 1.0, 0.4).unwrap();
        assert!((s3 / base - 3.0).abs() < 1e-12);
        assert!(matches!(optimal_level(1.0, 1, 1, &ranges, 0.2, 0.2), Err(AnalysisError::NoDescent { .. })));
    }

    #[test]
    fn rate_examples() {
        let r = rate_rhs(2.0, 1.0, 0.25, 10, 4, 0.0, 3);
        assert!((r - 8.0 * 2.0 * 0.75 / (3.0 * 40f64.sqrt())).abs() < 1e-15);
        let early = rate_rhs(1.0, 1.0, 0.0, 100, 1, 0.0, 1);
        let late = rate_rhs(1.0, 1.0, 0.0, 1_000_000, 1, 0.0, 1);
        assert!(late / early < 0.1);
        assert!((early / late - 100.0).abs() < 1e-9);
    }

    #[test]
    fn stepsize_closed_forms() {
        assert!(stepsize_condition(4.0, 1e-12, 5, 10, 3, 2.0).unwrap());
        assert!(stepsize_condition(4.0, 0.25, 1, 3, 3, 0.0).unwrap());
        assert!(!stepsize_condition(4.0, 1.01 * 0.25, 1, 3, 3, 0.0).unwrap());
        assert!(stepsize_condition(1.0, 0.1, 1, 1, 0, 0.0).is_err());
        assert!(stepsize_condition(1.0, 0.1, 1, 2, 3, 0.0).is_err());
    }

    #[test]
    fn smoothness_of_scaled_square() {
        // f(x) = ½ · 4 · x²
        let grad = |x: &ParamVector| Ok(ParamVector::new(vec![4.0 * x[0]]));
        let samples = [ParamVector::new(vec![-1.0]), ParamVector::new(vec![0.5]), ParamVector::new(vec![2.0])];
        let l = estimate_smoothness(grad, &samples, 0).unwrap();
        assert!((l - 4.0).abs() < 1e-6);
        let same = [ParamVector::new(vec![1.0]), ParamVector::new(vec![1.0])];
        assert!(matches!(estimate_smoothness(grad, &same, 3), Err(AnalysisError::DegenerateSamples)));
    }

    #[test]
    fn quadratic_smoothness_is_mean_weight() {
        let shard = DatasetShard::new(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 6.0], 1).unwrap();
        assert_eq!(quadratic_smoothness(&shard), 3.0);
        let samples = [ParamVector::new(vec![0.3]), ParamVector::new(vec![-2.0])];
        let est = estimate_l(&ModelSpec::quadratic(1), &samples, &shard).unwrap();
        assert!((est - 3.0).abs() < 1e-9);
    }
}
