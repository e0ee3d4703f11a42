//! Closed-form bounds and the auxiliary recurrences behind them.
//!
//! Everything here is a pure function of a [`BoundInputs`]; the harness
//! overlays these values on measured curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Schedule, StepPolicy};
use crate::network::MixingSystem;

/// Discretization constant in the constant-step Wasserstein bound, `7 sqrt(2) / 6`.
pub const CHI: f64 = 7.0 * std::f64::consts::SQRT_2 / 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smallest nonzero Laplacian eigenvalue.
    pub beta_bar: f64,
    pub sigma: f64,
    /// Gradient Lipschitz constant of `U`.
    pub lipschitz: f64,
    /// Strong convexity modulus of `U`.
    pub strong_convexity: f64,
    pub dim: usize,
    pub h: f64,
    /// Initial expected consensus energy.
    pub f0: f64,
    pub alpha0: f64,
    pub chi: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            beta_bar: 1.0,
            sigma: 0.0,
            lipschitz: 1.0,
            strong_convexity: 1.0,
            dim: 1,
            h: 0.01,
            f0: 0.0,
            alpha0: 1.0,
            chi: CHI,
        }
    }
}

/// Upper bound on the expected time until the expected consensus energy
/// falls below `eps`:
///
/// `2/(bb - s) * [-ln eps + (f0 + s ln(2L/bb)) exp((a0 L - bb)(2L/bb - 1)) + 2L/bb - 1]`.
pub fn consensus_time_bound(inp: &BoundInputs, eps: f64) -> Result<f64, TheoryError> {
    if !(eps > 0.0) {
        return Err(TheoryError::Parameter(format!("eps must be positive, got {eps}")));
    }
    if !(inp.beta_bar > 0.0) || !(inp.lipschitz > 0.0) {
        return Err(TheoryError::Parameter("beta_bar and L must be positive".into()));
    }
    if inp.sigma >= inp.beta_bar {
        return Err(TheoryError::Precondition(format!(
            "sigma < beta_bar fails: sigma = {}, beta_bar = {}",
            inp.sigma, inp.beta_bar
        )));
    }
    let (bb, l) = (inp.beta_bar, inp.lipschitz);
    let t_hat = 2.0 * l / bb - 1.0;
    let transient = (inp.f0 + inp.sigma * (2.0 * l / bb).ln()) * ((inp.alpha0 * l - bb) * t_hat).exp();
    Ok(2.0 / (bb - inp.sigma) * (-eps.ln() + transient + t_hat))
}

/// `chi L sqrt(h d) / m`, gated on `h < min(1/L, m)`.
pub fn w2_limit_bound(inp: &BoundInputs) -> Result<f64, TheoryError> {
    let (l, m, h) = (inp.lipschitz, inp.strong_convexity, inp.h);
    if !(m > 0.0) {
        return Err(TheoryError::Parameter("strong convexity must be positive".into()));
    }
    if !(h < 1.0 / l) {
        return Err(TheoryError::Precondition(format!("h < 1/L fails: h = {h}, 1/L = {}", 1.0 / l)));
    }
    if !(h < m) {
        return Err(TheoryError::Precondition(format!("h < m fails: h = {h}, m = {m}")));
    }
    Ok(inp.chi * l * (h * inp.dim as f64).sqrt() / m)
}

/// `max(1 - m h, L h - 1)`.
pub fn contraction_factor(strong_convexity: f64, lipschitz: f64, h: f64) -> f64 {
    (1.0 - strong_convexity * h).max(lipschitz * h - 1.0)
}

/// Step sequence for the Wasserstein recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecursionSteps {
    Constant(f64),
    /// `h_k = scale / (k + offset)`.
    Inverse {
        offset: u64,
        scale: f64,
    },
}

impl RecursionSteps {
    fn at(&self, k: u64) -> f64 {
        match *self {
            RecursionSteps::Constant(h) => h,
            RecursionSteps::Inverse { offset, scale } => scale / (k + offset) as f64,
        }
    }
}

impl From<StepPolicy> for RecursionSteps {
    fn from(p: StepPolicy) -> Self {
        match p {
            StepPolicy::Constant(h) => RecursionSteps::Constant(h),
            // The dynamics step at iteration k is 1/(k + 1 + offset), i.e. h_{k+1}.
            StepPolicy::InverseK { offset } => RecursionSteps::Inverse { offset, scale: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionCurve {
    /// `values[k]` bounds `W2(nu_k, pi)`; `values[0] = w0`.
    pub values: Vec<f64>,
    /// Set when some `rho_k >= 1`.
    pub non_contracting: bool,
}

/// Iterates
/// `w_{k+1} = rho_{k+1} w_k + chi L sqrt(h_{k+1}^3 d) + L h_{k+1} alpha_{k+1}`
/// with `rho_k = max(1 - m h_k, L h_k - 1)` and `alpha_k = 1 / (1 + k)`.
pub fn w2_recursion_curve(
    inp: &BoundInputs,
    w0: f64,
    steps: u64,
    policy: RecursionSteps,
) -> Result<RecursionCurve, TheoryError> {
    if !(w0 >= 0.0) {
        return Err(TheoryError::Parameter(format!("w0 must be >= 0, got {w0}")));
    }
    let (l, m, d) = (inp.lipschitz, inp.strong_convexity, inp.dim as f64);
    let mut values = Vec::with_capacity(steps as usize + 1);
    values.push(w0);
    let mut w = w0;
    let mut non_contracting = false;
    for k in 0..steps {
        let h = policy.at(k + 1);
        let rho = contraction_factor(m, l, h);
        non_contracting |= rho >= 1.0;
        let alpha = 1.0 / (k + 2) as f64;
        w = rho * w + inp.chi * l * (h * h * h * d).sqrt() + l * h * alpha;
        values.push(w);
    }
    Ok(RecursionCurve { values, non_contracting })
}

/// Iterates `u_{k+1} = (1 - c / k^s) u_k + d / k^t` from `u_1 = u0`.
/// Index `i` of the result holds `u_{i+1}`.
pub fn polyak_recurrence_25(c: f64, d: f64, s: f64, t: f64, u0: f64, steps: u64) -> Result<Vec<f64>, TheoryError> {
    if !(s > 0.0 && s < 1.0) || !(s < t) || !(c > 0.0) || !(d >= 0.0) || !(u0 >= 0.0) {
        return Err(TheoryError::Parameter(format!(
            "need 0 < s < 1, s < t, c > 0, d >= 0, u0 >= 0; got c={c} d={d} s={s} t={t} u0={u0}"
        )));
    }
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut u = u0;
    out.push(u);
    for k in 1..=steps {
        let kf = k as f64;
        u = (1.0 - c / kf.powf(s)) * u + d / kf.powf(t);
        out.push(u);
    }
    Ok(out)
}

/// Iterates `u_{k+1} = (1 - c / k) u_k + d / k^{p+1}` from `u_1 = u0`.
pub fn polyak_recurrence_24(c: f64, d: f64, p: f64, u0: f64, steps: u64) -> Result<Vec<f64>, TheoryError> {
    if !(c > p) {
        return Err(TheoryError::Precondition(format!("c > p fails: c = {c}, p = {p}")));
    }
    if !(p > 0.0) || !(d >= 0.0) || !(u0 >= 0.0) {
        return Err(TheoryError::Parameter(format!("need p > 0, d >= 0, u0 >= 0; got p={p} d={d} u0={u0}")));
    }
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut u = u0;
    out.push(u);
    for k in 1..=steps {
        let kf = k as f64;
        u = (1.0 - c / kf) * u + d / kf.powf(p + 1.0);
        out.push(u);
    }
    Ok(out)
}

/// `u_k * k^rate` for the last entry of a recurrence started at `k = 1`.
pub fn normalized_tail(values: &[f64], rate: f64) -> f64 {
    let k = values.len() as f64;
    values.last().copied().unwrap_or(0.0) * k.powf(rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub name: String,
    pub holds: bool,
    /// Positive when the inequality holds, with its slack.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub checks: Vec<Precondition>,
    pub rho: f64,
}

impl StabilityReport {
    pub fn get(&self, name: &str) -> Option<&Precondition> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, lhs: f64, rhs: f64) -> Precondition {
    Precondition { name: name.into(), holds: lhs < rhs, margin: rhs - lhs }
}

/// Evaluates every standing assumption on the configured instance. The
/// step-size conditions use `inp.h`; `sched` supplies the raw first step of
/// the mixing update.
pub fn stability_report(inp: &BoundInputs, sys: &MixingSystem, sched: &Schedule) -> StabilityReport {
    let rho = contraction_factor(inp.strong_convexity, inp.lipschitz, inp.h);
    let beta = sys.spectral_summary().map(|s| s.beta).unwrap_or(f64::NAN);
    let mut checks = vec![
        check("sigma < beta_bar", inp.sigma, inp.beta_bar),
        check("h < 1/L", inp.h, 1.0 / inp.lipschitz),
        check("h < m", inp.h, inp.strong_convexity),
        check("rho < 1", rho, 1.0),
        check("h_0 < 1", sched.step_at(0), 1.0),
    ];
    if beta.is_nan() {
        checks.push(Precondition { name: "beta < 1".into(), holds: false, margin: f64::NAN });
    } else {
        checks.push(check("beta < 1", beta, 1.0));
    }
    StabilityReport { checks, rho }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AnnealPolicy;
    use crate::network::{build_topology, metropolis_weights, Topology};

    #[test]
    fn chi_value() {
        assert!((CHI - 1.649915822768611).abs() < 1e-15);
    }

    #[test]
    fn consensus_bound_hand_substitution() {
        let inp = BoundInputs { beta_bar: 1.0, sigma: 0.0, lipschitz: 1.0, alpha0: 1.0, f0: 0.0, ..Default::default() };
        assert!((consensus_time_bound(&inp, 1.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn consensus_bound_monotone() {
        let base = BoundInputs { beta_bar: 2.0 / 3.0, sigma: 0.01, lipschitz: 1.0, f0: 3.0, ..Default::default() };
        let mut prev = 0.0;
        for eps in [1.0, 0.1, 0.01, 1e-3] {
            let b = consensus_time_bound(&base, eps).unwrap();
            assert!(b > prev);
            prev = b;
        }
        let mut prev = 0.0;
        for sigma in [0.0, 0.1, 0.3, 0.6] {
            let b = consensus_time_bound(&BoundInputs { sigma, ..base }, 0.01).unwrap();
            assert!(b > prev);
            prev = b;
        }
        // linear in f0
        let b1 = consensus_time_bound(&base, 0.01).unwrap();
        let b2 = consensus_time_bound(&BoundInputs { f0: 6.0, ..base }, 0.01).unwrap();
        let expected = 2.0 / (base.beta_bar - base.sigma)
            * 3.0
            * ((base.alpha0 * base.lipschitz - base.beta_bar) * (2.0 / base.beta_bar - 1.0)).exp();
        assert!((b2 - b1 - expected).abs() < 1e-10);
        assert!(matches!(
            consensus_time_bound(&BoundInputs { sigma: 0.7, ..base }, 0.01),
            Err(TheoryError::Precondition(_))
        ));
    }

    #[test]
    fn limit_bound_values() {
        let inp = BoundInputs { lipschitz: 1.0, strong_convexity: 1.0, h: 0.01, dim: 2, ..Default::default() };
        let b = w2_limit_bound(&inp).unwrap();
        assert!((b - 0.233_333).abs() < 1e-5, "{b}");
        let quad = w2_limit_bound(&BoundInputs { dim: 8, ..inp }).unwrap();
        assert!((quad - 2.0 * b).abs() < 1e-12);
        let tiny = w2_limit_bound(&BoundInputs { h: 1e-12, ..inp }).unwrap();
        assert!(tiny < 1e-5);
        // linear in L (with m scaled to keep the gate open), sqrt in h
        let l2 = w2_limit_bound(&BoundInputs { lipschitz: 2.0, ..inp }).unwrap();
        assert!((l2 - 2.0 * b).abs() < 1e-12);
        let h4 = w2_limit_bound(&BoundInputs { h: 0.04, ..inp }).unwrap();
        assert!((h4 - 2.0 * b).abs() < 1e-12);
        let err = w2_limit_bound(&BoundInputs { h: 0.5, strong_convexity: 0.1, ..inp }).unwrap_err();
        assert!(err.to_string().contains("h < m"));
        let err = w2_limit_bound(&BoundInputs { h: 0.6, lipschitz: 2.0, ..inp }).unwrap_err();
        assert!(err.to_string().contains("h < 1/L"));
    }

    #[test]
    fn recursion_degenerate_is_zero() {
        let inp = BoundInputs { lipschitz: 0.0, strong_convexity: 1.0, ..Default::default() };
        let curve = w2_recursion_curve(&inp, 0.0, 100, RecursionSteps::Constant(0.1)).unwrap();
        assert!(curve.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recursion_matches_geometric_sum() {
        let inp = BoundInputs { lipschitz: 2.0, strong_convexity: 0.5, dim: 3, ..Default::default() };
        let h = 0.1;
        let steps = 3000u64;
        let w0 = 4.0;
        let curve = w2_recursion_curve(&inp, w0, steps, RecursionSteps::Constant(h)).unwrap();
        assert!(!curve.non_contracting);
        let rho = contraction_factor(0.5, 2.0, h);
        let c = CHI * 2.0 * (h * h * h * 3.0).sqrt();
        // direct summation: w_K = rho^K w0 + sum_{j=1..K} rho^{K-j} (c + L h / (1 + j))
        let direct: f64 = rho.powi(steps as i32) * w0
            + (1..=steps).map(|j| rho.powi((steps - j) as i32) * (c + 2.0 * h / (1 + j) as f64)).sum::<f64>();
        assert!((curve.values[steps as usize] - direct).abs() < 1e-8);
        let limit = c / (1.0 - rho);
        // remaining alpha contribution vanishes like 1/K
        assert!((curve.values[steps as usize] - limit).abs() < 0.05 * limit);
    }

    #[test]
    fn recursion_inverse_steps_decay_like_root_k() {
        let inp = BoundInputs { lipschitz: 1.0, strong_convexity: 1.0, dim: 2, ..Default::default() };
        let curve = w2_recursion_curve(&inp, 1.0, 200_000, RecursionSteps::Inverse { offset: 0, scale: 1.0 }).unwrap();
        let scaled: Vec<f64> =
            [1_000usize, 10_000, 100_000, 200_000].iter().map(|&k| curve.values[k] * (k as f64).sqrt()).collect();
        let max = scaled.iter().cloned().fold(0.0, f64::max);
        let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.5, "{scaled:?}");
    }

    #[test]
    fn recursion_flags_non_contraction() {
        let inp = BoundInputs { lipschitz: 10.0, strong_convexity: 0.1, ..Default::default() };
        let curve = w2_recursion_curve(&inp, 0.0, 10, RecursionSteps::Constant(0.5)).unwrap();
        assert!(curve.non_contracting);
    }

    #[test]
    fn polyak_25_limits() {
        let homog = polyak_recurrence_25(1.0, 0.0, 0.5, 1.0, 1.0, 100_000).unwrap();
        assert!(normalized_tail(&homog, 0.5).abs() < 1e-12);
        let a = polyak_recurrence_25(2.0, 1.0, 0.5, 1.0, 0.0, 1_000_000).unwrap();
        let b = polyak_recurrence_25(2.0, 1.0, 0.5, 1.0, 5.0, 1_000_000).unwrap();
        let ta = normalized_tail(&a, 0.5);
        assert!((ta / 0.5 - 1.0).abs() < 0.05, "{ta}");
        assert!((ta - normalized_tail(&b, 0.5)).abs() < 1e-6);
        assert!(polyak_recurrence_25(1.0, 1.0, 1.0, 2.0, 0.0, 10).is_err());
        assert!(polyak_recurrence_25(1.0, 1.0, 0.5, 0.4, 0.0, 10).is_err());
    }

    #[test]
    fn polyak_24_limits() {
        let a = polyak_recurrence_24(2.0, 1.0, 1.0, 0.0, 1_000_000).unwrap();
        assert!((normalized_tail(&a, 1.0) - 1.0).abs() < 0.05);
        let b = polyak_recurrence_24(1.5, 3.0, 1.0, 0.0, 1_000_000).unwrap();
        assert!((normalized_tail(&b, 1.0) / 6.0 - 1.0).abs() < 0.05);
        let z = polyak_recurrence_24(2.0, 0.0, 1.0, 1.0, 100_000).unwrap();
        assert!(normalized_tail(&z, 1.0).abs() < 1e-6);
        assert!(matches!(polyak_recurrence_24(1.0, 1.0, 1.0, 0.0, 10), Err(TheoryError::Precondition(_))));
    }

    #[test]
    fn stability_report_margins() {
        let sys = metropolis_weights(&build_topology(Topology::Ring, 4).unwrap()).unwrap();
        let sched = Schedule::new(StepPolicy::Constant(0.5), AnnealPolicy::Harmonic, 0.01).unwrap();
        let inp = BoundInputs {
            beta_bar: 2.0 / 3.0,
            sigma: 0.01,
            lipschitz: 1.0,
            strong_convexity: 1.0,
            h: 0.5,
            ..Default::default()
        };
        let r = stability_report(&inp, &sys, &sched);
        let s = r.get("sigma < beta_bar").unwrap();
        assert!(s.holds && (s.margin - 0.656_666_666).abs() < 1e-6);
        assert!(r.get("h < 1/L").unwrap().holds);
        assert_eq!(r.rho, 0.5);
        let beta = r.get("beta < 1").unwrap();
        assert!(beta.holds && (beta.margin - 2.0 / 3.0).abs() < 1e-10);
    }
}
