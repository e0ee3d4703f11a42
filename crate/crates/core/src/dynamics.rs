//! Euler–Maruyama integration of the decentralized Langevin dynamics.
//!
//! Agent `i` updates
//!
//! ```text
//! X_{k+1}^i = (1 - h_k) X_k^i + h_k sum_j W_ij X_k^j
//!             - alpha_{k+1} h_k grad u_i(X_k^i)
//!             + sqrt(2 sigma alpha_{k+1} h_k) Z_{k+1}^i
//! ```
//!
//! The network term is the consensus map `(1 - h) I + h W`. Noise for
//! iteration `k` is block `k` of the replica's [`NoiseStream`], laid out
//! row-major as `(agent, coordinate)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::MixingSystem;
use crate::noise::NoiseStream;
use crate::potential::{GaussianLaw, PotentialEnsemble};
use crate::transport::consensus_energy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("non-finite state after iteration {iteration}")]
    Diverged { iteration: u64 },
    #[error("replay mismatch: next state is at k = {next}, expected {expected}")]
    MismatchedReplay { expected: u64, next: u64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Consensus/gradient step `h_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    Constant(f64),
    /// `h = 1 / (k + 1 + offset)` at iteration `k`; `offset >= 1` keeps `h < 1`.
    InverseK {
        offset: u64,
    },
}

/// Annealing weight multiplying gradient and noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealPolicy {
    /// `alpha_k = 1 / (1 + k)`.
    Harmonic,
    /// `alpha_k = 1`.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub step: StepPolicy,
    pub anneal: AnnealPolicy,
    /// Temperature.
    pub sigma: f64,
}

impl Schedule {
    pub fn new(step: StepPolicy, anneal: AnnealPolicy, sigma: f64) -> Result<Self, DynamicsError> {
        let s = Self { step, anneal, sigma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        match self.step {
            StepPolicy::Constant(h) if !(h > 0.0 && h < 1.0) => {
                return Err(DynamicsError::Schedule(format!("constant step must lie in (0, 1), got {h}")));
            }
            StepPolicy::InverseK { offset: 0 } => {
                return Err(DynamicsError::Schedule("inverse_k needs offset >= 1 so that h < 1".into()));
            }
            _ => {}
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DynamicsError::Schedule(format!("temperature must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Step used by the update from `k` to `k + 1`.
    pub fn step_at(&self, k: u64) -> f64 {
        match self.step {
            StepPolicy::Constant(h) => h,
            StepPolicy::InverseK { offset } => 1.0 / (k + 1 + offset) as f64,
        }
    }

    /// `alpha_k`.
    pub fn alpha(&self, k: u64) -> f64 {
        match self.anneal {
            AnnealPolicy::Harmonic => 1.0 / (1 + k) as f64,
            AnnealPolicy::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    /// Row `i` is agent `i`'s iterate.
    pub x: DMatrix<f64>,
    pub k: u64,
    /// Accumulated step sum.
    pub t: f64,
}

impl EnsembleState {
    pub fn new(x: DMatrix<f64>) -> Result<Self, DynamicsError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Parameter("initial state has non-finite entries".into()));
        }
        Ok(Self { x, k: 0, t: 0.0 })
    }

    pub fn agents(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn average(&self) -> DVector<f64> {
        average_state(self)
    }
}

/// Column mean of the stacked iterate.
pub fn average_state(state: &EnsembleState) -> DVector<f64> {
    state.x.row_mean().transpose()
}

/// Reusable integrator holding scratch buffers for one trajectory.
pub struct Integrator<'a> {
    sys: &'a MixingSystem,
    ens: &'a PotentialEnsemble,
    mixed: DMatrix<f64>,
    noise_buf: Vec<f64>,
    row: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> Integrator<'a> {
    pub fn new(sys: &'a MixingSystem, ens: &'a PotentialEnsemble) -> Result<Self, DynamicsError> {
        if sys.agent_count() != ens.agent_count() {
            return Err(DynamicsError::Dimension(format!(
                "{} agents in the network but {} potential components",
                sys.agent_count(),
                ens.agent_count()
            )));
        }
        let (m, d) = (ens.agent_count(), ens.dim());
        Ok(Self {
            sys,
            ens,
            mixed: DMatrix::zeros(m, d),
            noise_buf: vec![0.0; m * d],
            row: vec![0.0; d],
            grad: vec![0.0; d],
        })
    }

    fn check_state(&self, state: &EnsembleState) -> Result<(), DynamicsError> {
        if state.x.nrows() != self.ens.agent_count() || state.x.ncols() != self.ens.dim() {
            return Err(DynamicsError::Dimension(format!(
                "state is {}x{}, expected {}x{}",
                state.x.nrows(),
                state.x.ncols(),
                self.ens.agent_count(),
                self.ens.dim()
            )));
        }
        Ok(())
    }

    /// One update with explicit step, annealing weight and noise block.
    /// `alpha` multiplies both the gradient and the noise variance.
    fn advance(
        &mut self,
        state: &mut EnsembleState,
        h: f64,
        alpha: f64,
        sigma: f64,
        noise: &mut NoiseStream,
        counter: u64,
    ) -> Result<(), DynamicsError> {
        let d = state.x.ncols();
        self.mixed.gemm(1.0, self.sys.weights(), &state.x, 0.0);
        let noise_scale = (2.0 * sigma * alpha * h).sqrt();
        if noise_scale > 0.0 {
            noise.fill_normals(counter, &mut self.noise_buf);
        }
        for (i, component) in self.ens.components().iter().enumerate() {
            for j in 0..d {
                self.row[j] = state.x[(i, j)];
            }
            component.gradient_into(&self.row, &mut self.grad);
            for j in 0..d {
                let mut v = (1.0 - h) * self.row[j] + h * self.mixed[(i, j)] - alpha * h * self.grad[j];
                if noise_scale > 0.0 {
                    v += noise_scale * self.noise_buf[i * d + j];
                }
                state.x[(i, j)] = v;
            }
        }
        let iteration = state.k;
        state.k += 1;
        state.t += h;
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Diverged { iteration });
        }
        Ok(())
    }

    /// In-place [`em_step`].
    pub fn step(
        &mut self,
        state: &mut EnsembleState,
        sched: &Schedule,
        noise: &mut NoiseStream,
    ) -> Result<(), DynamicsError> {
        self.check_state(state)?;
        let k = state.k;
        let h = sched.step_at(k);
        if !(h > 0.0 && h < 1.0) {
            return Err(DynamicsError::Schedule(format!("step {h} at iteration {k} outside (0, 1)")));
        }
        self.advance(state, h, sched.alpha(k + 1), sched.sigma, noise, k)
    }
}

/// One Euler–Maruyama step of the coupled agent dynamics.
pub fn em_step(
    state: &EnsembleState,
    sys: &MixingSystem,
    ens: &PotentialEnsemble,
    sched: &Schedule,
    noise: &mut NoiseStream,
) -> Result<EnsembleState, DynamicsError> {
    let mut next = state.clone();
    Integrator::new(sys, ens)?.step(&mut next, sched, noise)?;
    Ok(next)
}

/// `|xbar_{k+1} - [xbar_k - (alpha h / m) sum_i grad u_i(X_k^i) + sqrt(2 sigma alpha h) zbar]|`
/// with the noise of iteration `prev.k` replayed from `noise`.
pub fn average_update_residual(
    prev: &EnsembleState,
    next: &EnsembleState,
    ens: &PotentialEnsemble,
    sched: &Schedule,
    noise: &mut NoiseStream,
) -> Result<f64, DynamicsError> {
    if next.k != prev.k + 1 {
        return Err(DynamicsError::MismatchedReplay { expected: prev.k + 1, next: next.k });
    }
    let (m, d) = (prev.x.nrows(), prev.x.ncols());
    if next.x.shape() != prev.x.shape() || ens.agent_count() != m || ens.dim() != d {
        return Err(DynamicsError::Dimension("states and ensemble disagree".into()));
    }
    let k = prev.k;
    let h = sched.step_at(k);
    let alpha = sched.alpha(k + 1);
    let mut predicted = average_state(prev);
    let mut row = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for (i, c) in ens.components().iter().enumerate() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = prev.x[(i, j)];
        }
        c.gradient_into(&row, &mut grad);
        for j in 0..d {
            predicted[j] -= alpha * h / m as f64 * grad[j];
        }
    }
    let scale = (2.0 * sched.sigma * alpha * h).sqrt();
    if scale > 0.0 {
        let mut z = vec![0.0; m * d];
        noise.fill_normals(k, &mut z);
        for j in 0..d {
            let zbar: f64 = (0..m).map(|i| z[i * d + j]).sum::<f64>() / m as f64;
            predicted[j] += scale * zbar;
        }
    }
    Ok((average_state(next) - predicted).norm())
}

/// Runs `steps` updates from `init`, calling `observe` whenever the
/// iteration index is in `checkpoints` (which must be sorted).
#[allow(clippy::too_many_arguments)]
pub fn simulate<F>(
    sys: &MixingSystem,
    ens: &PotentialEnsemble,
    sched: &Schedule,
    init: EnsembleState,
    steps: u64,
    checkpoints: &[u64],
    noise: &mut NoiseStream,
    mut observe: F,
) -> Result<EnsembleState, DynamicsError>
where
    F: FnMut(&EnsembleState),
{
    sched.validate()?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DynamicsError::Parameter("checkpoints must be strictly increasing".into()));
    }
    if let Some(&last) = checkpoints.last() {
        if last > init.k + steps {
            return Err(DynamicsError::Parameter(format!("checkpoint {last} beyond the final iteration")));
        }
    }
    let mut integrator = Integrator::new(sys, ens)?;
    integrator.check_state(&init)?;
    let start = init.k;
    let mut state = init;
    let mut next_cp = checkpoints.iter().copied().skip_while(|&c| c < start).peekable();
    if next_cp.peek() == Some(&state.k) {
        observe(&state);
        next_cp.next();
    }
    for _ in 0..steps {
        integrator.step(&mut state, sched, noise)?;
        if next_cp.peek() == Some(&state.k) {
            observe(&state);
            next_cp.next();
        }
    }
    Ok(state)
}

/// [`simulate`] that keeps full snapshots at the checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn simulate_snapshots(
    sys: &MixingSystem,
    ens: &PotentialEnsemble,
    sched: &Schedule,
    init: EnsembleState,
    steps: u64,
    checkpoints: &[u64],
    noise: &mut NoiseStream,
) -> Result<Vec<(u64, EnsembleState)>, DynamicsError> {
    let mut out = Vec::with_capacity(checkpoints.len());
    simulate(sys, ens, sched, init, steps, checkpoints, noise, |s| out.push((s.k, s.clone())))?;
    Ok(out)
}

/// `S(t) = log(1 + t)` for the annealing weight `1 / (1 + t)`.
pub fn time_change_forward(t: f64) -> Result<f64, DynamicsError> {
    if !(t >= 0.0) {
        return Err(DynamicsError::Parameter(format!("time must be >= 0, got {t}")));
    }
    Ok(t.ln_1p())
}

/// `T(s) = e^s - 1`, the inverse of [`time_change_forward`].
pub fn time_change_inverse(s: f64) -> Result<f64, DynamicsError> {
    if !(s >= 0.0) {
        return Err(DynamicsError::Parameter(format!("time must be >= 0, got {s}")));
    }
    Ok(s.exp_m1())
}

/// Consensus energy along a fine-step trajectory of the continuous dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTrace {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
}

impl FineTrace {
    /// First recorded time with energy at or below `eps`.
    pub fn first_passage(&self, eps: f64) -> Option<f64> {
        self.times.iter().zip(&self.energy).find(|(_, &e)| e <= eps).map(|(&t, _)| t)
    }
}

/// Euler–Maruyama with uniform `dt` on
/// `dX = -L X dt - alpha(t) grad U_v(X) dt + sqrt(2 sigma alpha(t)) dB`,
/// `alpha(t) = 1 / (1 + t)`, recording the consensus energy every
/// `record_every` steps (and at time zero).
#[allow(clippy::too_many_arguments)]
pub fn sde_fine_approx(
    sys: &MixingSystem,
    ens: &PotentialEnsemble,
    sigma: f64,
    horizon: f64,
    dt: f64,
    init: &DMatrix<f64>,
    record_every: u64,
    noise: &mut NoiseStream,
) -> Result<FineTrace, DynamicsError> {
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(DynamicsError::Parameter(format!("fine step must lie in (0, 1e-2], got {dt}")));
    }
    if dt * (1.0 + ens.lipschitz()) >= 1.0 {
        return Err(DynamicsError::Parameter(format!(
            "unstable fine step: dt * (1 + alpha(0) L) = {} >= 1",
            dt * (1.0 + ens.lipschitz())
        )));
    }
    if !(horizon >= 0.0) || !(sigma >= 0.0) || record_every == 0 {
        return Err(DynamicsError::Parameter("horizon and sigma must be >= 0, record_every >= 1".into()));
    }
    let mut integrator = Integrator::new(sys, ens)?;
    let mut state = EnsembleState::new(init.clone())?;
    integrator.check_state(&state)?;
    let steps = (horizon / dt).round() as u64;
    let mut trace = FineTrace { times: vec![0.0], energy: vec![consensus_energy(&state.x)] };
    for n in 0..steps {
        let t = n as f64 * dt;
        integrator.advance(&mut state, dt, 1.0 / (1.0 + t), sigma, noise, n)?;
        if (n + 1) % record_every == 0 {
            trace.times.push((n + 1) as f64 * dt);
            trace.energy.push(consensus_energy(&state.x));
        }
    }
    Ok(trace)
}

/// Exact stationary law of the average iterate under constant step and
/// constant annealing, available when all components share one quadratic
/// Hessian `A0`: the average is then an AR(1) process with covariance
/// `(2 sigma / m) (A0 (2 I - h A0))^{-1}` around the minimizer.
pub fn discretized_stationary_law(ens: &PotentialEnsemble, sched: &Schedule) -> Option<GaussianLaw> {
    let h = match (sched.step, sched.anneal) {
        (StepPolicy::Constant(h), AnnealPolicy::Constant) => h,
        _ => return None,
    };
    let a0 = ens.shared_hessian()?;
    let d = ens.dim();
    let m = ens.agent_count() as f64;
    let inner = a0 * (DMatrix::identity(d, d).scale(2.0) - a0.scale(h));
    let inv = inner.try_inverse()?;
    let cov = inv.scale(2.0 * sched.sigma / m);
    let cov = (&cov + cov.transpose()).scale(0.5);
    GaussianLaw::new(ens.minimizer()?.clone(), cov).ok()
}
