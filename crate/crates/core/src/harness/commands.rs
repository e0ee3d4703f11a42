//! Subcommand bodies. Each returns a typed report and writes its artifacts
//! under the configured output directory in a single pass after all
//! replicas have finished.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::config::{sample_moments, ExperimentConfig, InitConfig, Instance};
use super::fit::{fit_decay_ratio, fit_rate, fit_rate_window, RateFit};
use super::plot::{loglog_svg, Series};
use super::{write_file, write_json, HarnessError};
use crate::dynamics::{
    discretized_stationary_law, sde_fine_approx, simulate, DynamicsError, EnsembleState, StepPolicy,
};
use crate::network::MixingDocument;
use crate::noise::NoiseStream;
use crate::potential::GaussianLaw;
use crate::replicas::map_replicas;
use crate::theory::{
    consensus_time_bound, stability_report, w2_limit_bound, w2_recursion_curve, BoundInputs, RecursionSteps,
    StabilityReport, TheoryError, CHI,
};
use crate::transport::{consensus_energy, w2_1d, w2_empirical_exact, w2_gaussian, w2_to_dirac, EmpiricalCloud};

/// Largest cloud handed to the assignment solver in `d > 1`; larger clouds
/// are thinned by taking evenly strided rows.
pub const EMPIRICAL_CAP: usize = 256;

/// Default consensus threshold for the time bound outside fine-SDE mode.
pub const DEFAULT_EPS: f64 = 1e-2;

/// Auxiliary stream for exact draws from the target law.
const TARGET_STREAM: u64 = 1 << 20;

fn dynamics_error(e: DynamicsError, replica: usize) -> HarnessError {
    match e {
        DynamicsError::Diverged { iteration } => HarnessError::Diverged { replica, iteration },
        DynamicsError::Schedule(m) | DynamicsError::Parameter(m) | DynamicsError::Dimension(m) => {
            HarnessError::Config(m)
        }
        other => HarnessError::Other(other.to_string()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

fn echo_config(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    write_json(&cfg.out.join("config.json"), cfg)
}

/// First error in replica order, or all results.
fn collect<T>(results: Vec<Result<T, HarnessError>>) -> Result<Vec<T>, HarnessError> {
    results.into_iter().collect()
}

// ---------------------------------------------------------------- spectra

#[derive(Debug, Clone, Serialize)]
pub struct SpectraReport {
    pub network: MixingDocument,
    pub beta: f64,
    pub beta_bar: f64,
    pub lambda2_laplacian: f64,
    pub lambda_min: f64,
    /// Symmetric, doubly stochastic, connected with `beta < 1`.
    pub mixing_assumption_holds: bool,
}

pub fn cmd_spectra(config: &ExperimentConfig) -> Result<SpectraReport, HarnessError> {
    let inst = config.instantiate()?;
    let sys = &inst.system;
    let summary =
        sys.spectral_summary().map_err(|e| HarnessError::Config(format!("no spectral gap for this network: {e}")))?;
    let report = SpectraReport {
        network: sys.to_document(),
        beta: summary.beta,
        beta_bar: summary.beta_bar,
        lambda2_laplacian: summary.lambda2_laplacian,
        lambda_min: sys.lambda_min(),
        mixing_assumption_holds: sys.check_invariants().is_ok() && summary.beta < 1.0,
    };
    echo_config(config)?;
    write_json(&config.out.join("spectra.json"), &report)?;
    Ok(report)
}

// ----------------------------------------------------------------- bounds

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundValue {
    pub applicable: bool,
    pub value: Option<f64>,
    pub reason: Option<String>,
}

impl From<Result<f64, TheoryError>> for BoundValue {
    fn from(r: Result<f64, TheoryError>) -> Self {
        match r {
            Ok(v) => Self { applicable: true, value: Some(v), reason: None },
            Err(e) => Self { applicable: false, value: None, reason: Some(e.to_string()) },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecursionSummary {
    /// W2 between the initial law of the average iterate and the target.
    pub w0: f64,
    pub non_contracting: bool,
    /// Bound at each checkpoint.
    pub values: Vec<(u64, f64)>,
    pub final_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    /// Moduli of `U`, the raw step and the initial consensus energy.
    pub inputs: BoundInputs,
    /// Inputs of the Wasserstein bounds, see [`averaged_chain_inputs`].
    pub averaged_inputs: Option<BoundInputs>,
    pub eps: f64,
    pub stability: StabilityReport,
    pub consensus_time: BoundValue,
    /// Present for constant steps only.
    pub w2_limit: Option<BoundValue>,
    pub recursion: Option<RecursionSummary>,
    pub vacuous: bool,
}

/// Mean initial consensus energy across replicas.
fn initial_energy(inst: &Instance) -> Result<f64, HarnessError> {
    let r = inst.config.replicas;
    let mut total = 0.0;
    for i in 0..r {
        total += consensus_energy(&inst.initial_state(i)?);
    }
    Ok(total / r as f64)
}

/// Theory inputs for a configured instance. `beta_bar` is NaN for a single agent.
pub fn bound_inputs(inst: &Instance, f0: f64) -> BoundInputs {
    let sched = &inst.config.schedule;
    BoundInputs {
        beta_bar: inst.system.spectral_summary().map(|s| s.beta_bar).unwrap_or(f64::NAN),
        sigma: sched.sigma,
        lipschitz: inst.ensemble.lipschitz(),
        strong_convexity: inst.ensemble.strong_convexity(),
        dim: inst.ensemble.dim(),
        h: sched.step_at(0),
        f0,
        alpha0: sched.alpha(0),
        chi: CHI,
    }
}

/// Inputs for the Wasserstein bounds on the average iterate. The average
/// follows `x - (h/m) grad U(x) + sqrt(2 sigma h / m) z`, which is the
/// unadjusted Langevin chain on `U / sigma` with step `sigma h / m`; its
/// moduli are those of `U` divided by `sigma`. `None` at zero temperature.
pub fn averaged_chain_inputs(raw: &BoundInputs, agents: usize) -> Option<BoundInputs> {
    if !(raw.sigma > 0.0) {
        return None;
    }
    let step_scale = raw.sigma / agents as f64;
    Some(BoundInputs {
        strong_convexity: raw.strong_convexity / raw.sigma,
        lipschitz: raw.lipschitz / raw.sigma,
        h: raw.h * step_scale,
        ..*raw
    })
}

fn averaged_chain_steps(policy: StepPolicy, raw: &BoundInputs, agents: usize) -> RecursionSteps {
    let step_scale = raw.sigma / agents as f64;
    match policy {
        StepPolicy::Constant(h) => RecursionSteps::Constant(h * step_scale),
        StepPolicy::InverseK { offset } => RecursionSteps::Inverse { offset, scale: step_scale },
    }
}

fn target_law(inst: &Instance) -> Option<GaussianLaw> {
    let sigma = inst.config.schedule.sigma;
    if sigma > 0.0 {
        inst.ensemble.stationary_law(sigma)
    } else {
        None
    }
}

/// W2 between the law of the initial average iterate and `target`.
fn initial_distance(inst: &Instance, target: &GaussianLaw) -> Result<f64, HarnessError> {
    let m = inst.ensemble.agent_count() as f64;
    let d = inst.ensemble.dim();
    if let InitConfig::Gaussian { center, scale } = &inst.config.init {
        if *scale > 0.0 {
            let c = center.clone().unwrap_or_else(|| vec![0.0; d]);
            let law = GaussianLaw::new(DVector::from_vec(c), DMatrix::identity(d, d).scale(scale * scale / m))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            return w2_gaussian(&law, target).map_err(|e| HarnessError::Other(e.to_string()));
        }
    }
    let xbar = inst.initial_state(0)?.row_mean().transpose();
    Ok(((xbar - target.mean()).norm_squared() + target.covariance().trace()).sqrt())
}

fn compute_bounds(inst: &Instance, eps: f64) -> Result<BoundsReport, HarnessError> {
    let cfg = &inst.config;
    let agents = inst.ensemble.agent_count();
    let inputs = bound_inputs(inst, initial_energy(inst)?);
    let averaged = averaged_chain_inputs(&inputs, agents);
    let stability = stability_report(averaged.as_ref().unwrap_or(&inputs), &inst.system, &cfg.schedule);
    let consensus_time = if inputs.beta_bar.is_nan() {
        BoundValue { applicable: false, value: None, reason: Some("single agent: no consensus dynamics".into()) }
    } else {
        consensus_time_bound(&inputs, eps).into()
    };
    let w2_limit = match (cfg.schedule.step, &averaged) {
        (StepPolicy::Constant(_), Some(avg)) => Some(BoundValue::from(w2_limit_bound(avg))),
        (StepPolicy::Constant(_), None) => {
            Some(BoundValue { applicable: false, value: None, reason: Some("zero temperature: no target law".into()) })
        }
        (StepPolicy::InverseK { .. }, _) => None,
    };
    let recursion = match (target_law(inst), &averaged) {
        (Some(target), Some(avg)) => {
            let w0 = initial_distance(inst, &target)?;
            let steps = averaged_chain_steps(cfg.schedule.step, &inputs, agents);
            let curve =
                w2_recursion_curve(avg, w0, cfg.steps, steps).map_err(|e| HarnessError::Config(e.to_string()))?;
            let values = inst.checkpoints().into_iter().map(|k| (k, curve.values[k as usize])).collect();
            Some(RecursionSummary {
                w0,
                non_contracting: curve.non_contracting,
                values,
                final_value: *curve.values.last().expect("curve holds w0"),
            })
        }
        _ => None,
    };
    let vacuous = !consensus_time.applicable
        || w2_limit.as_ref().is_some_and(|b| !b.applicable)
        || recursion.as_ref().is_some_and(|r| r.non_contracting);
    Ok(BoundsReport { inputs, averaged_inputs: averaged, eps, stability, consensus_time, w2_limit, recursion, vacuous })
}

pub fn cmd_bounds(config: &ExperimentConfig) -> Result<BoundsReport, HarnessError> {
    let inst = config.instantiate()?;
    let eps = config.fine_sde.map(|f| f.eps).unwrap_or(DEFAULT_EPS);
    let report = compute_bounds(&inst, eps)?;
    echo_config(config)?;
    write_json(&config.out.join("bounds.json"), &report)?;
    Ok(report)
}

// -------------------------------------------------------------- consensus

#[derive(Debug, Clone, Serialize)]
pub struct FinePassage {
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    /// Replica mean of the consensus energy at each recorded time.
    pub mean_energy: Vec<f64>,
    /// First recorded time at which the replica-mean energy is at most `eps`.
    pub first_passage: Option<f64>,
    /// Mean of per-replica first-passage times over replicas that reached `eps`.
    pub mean_replica_first_passage: Option<f64>,
    pub replicas_reaching: usize,
    pub bound: BoundValue,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsensusReport {
    pub checkpoints: Vec<u64>,
    pub mean_energy: Vec<f64>,
    /// W2 between the pooled deviation cloud and the point mass at zero.
    pub w2_dirac: Vec<f64>,
    pub energy_fit: Option<RateFit>,
    pub w2_dirac_fit: Option<RateFit>,
    pub fit_error: Option<String>,
    /// Per-step ratio of a geometric fit to the mean energy.
    pub decay_ratio: Option<f64>,
    pub fine: Option<FinePassage>,
    pub vacuous: bool,
}

struct ConsensusSample {
    k: u64,
    t: f64,
    energy: f64,
    deviations: DMatrix<f64>,
    xbar: DVector<f64>,
}

fn fit_series(cfg: &ExperimentConfig, series: &[(u64, f64)]) -> Result<RateFit, HarnessError> {
    match cfg.fit_window {
        Some((lo, hi)) => fit_rate_window(series, lo, hi),
        None => fit_rate(series, cfg.burn_in),
    }
}

pub fn cmd_consensus(config: &ExperimentConfig, fine_sde: bool) -> Result<ConsensusReport, HarnessError> {
    let inst = config.instantiate()?;
    if fine_sde {
        return run_fine(&inst);
    }
    let cfg = &inst.config;
    let cps = inst.checkpoints();
    let runs = collect(map_replicas(cfg.replicas, |r| -> Result<Vec<ConsensusSample>, HarnessError> {
        let state = EnsembleState::new(inst.initial_state(r)?).map_err(|e| dynamics_error(e, r))?;
        let mut noise = NoiseStream::replica(cfg.seed, r);
        let mut rows = Vec::with_capacity(cps.len());
        simulate(&inst.system, &inst.ensemble, &cfg.schedule, state, cfg.steps, &cps, &mut noise, |s| {
            let xbar = s.average();
            let deviations = DMatrix::from_fn(s.x.nrows(), s.x.ncols(), |i, j| s.x[(i, j)] - xbar[j]);
            rows.push(ConsensusSample { k: s.k, t: s.t, energy: consensus_energy(&s.x), deviations, xbar });
        })
        .map_err(|e| dynamics_error(e, r))?;
        Ok(rows)
    }))?;

    let (m, d) = (inst.ensemble.agent_count(), inst.ensemble.dim());
    let r_count = cfg.replicas as f64;
    let mut mean_energy = Vec::with_capacity(cps.len());
    let mut w2_dirac = Vec::with_capacity(cps.len());
    for c in 0..cps.len() {
        mean_energy.push(runs.iter().map(|run| run[c].energy).sum::<f64>() / r_count);
        let mut pooled = Vec::with_capacity(runs.len() * m * d);
        for run in &runs {
            let dev = &run[c].deviations;
            for i in 0..m {
                pooled.extend(dev.row(i).iter());
            }
        }
        let cloud = EmpiricalCloud::new(pooled, d).map_err(|e| HarnessError::Other(e.to_string()))?;
        w2_dirac.push(w2_to_dirac(&cloud));
    }

    let energy_series: Vec<(u64, f64)> = cps.iter().copied().zip(mean_energy.iter().copied()).collect();
    let dirac_series: Vec<(u64, f64)> = cps.iter().copied().zip(w2_dirac.iter().copied()).collect();
    let (energy_fit, w2_dirac_fit, fit_error) = match (fit_series(cfg, &energy_series), fit_series(cfg, &dirac_series))
    {
        (Ok(a), Ok(b)) => (Some(a), Some(b), None),
        (a, b) => {
            let err = a.as_ref().err().or(b.as_ref().err()).map(|e| e.to_string());
            (a.ok(), b.ok(), err)
        }
    };
    let decay_ratio = fit_decay_ratio(&energy_series).ok();
    let report = ConsensusReport {
        checkpoints: cps.clone(),
        mean_energy,
        w2_dirac,
        energy_fit,
        w2_dirac_fit,
        fit_error,
        decay_ratio,
        fine: None,
        vacuous: false,
    };

    echo_config(cfg)?;
    let mut series = String::from("k,mean_energy,w2_dirac\n");
    for (c, &k) in cps.iter().enumerate() {
        let _ = writeln!(series, "{k},{},{}", report.mean_energy[c], report.w2_dirac[c]);
    }
    write_file(&cfg.out.join("series.csv"), &series)?;
    if cfg.write_trajectory {
        let mut traj = String::from("replica,k,t,consensus_energy");
        for j in 0..d {
            let _ = write!(traj, ",xbar_{}", j + 1);
        }
        traj.push('\n');
        for (r, run) in runs.iter().enumerate() {
            for s in run {
                let _ = write!(traj, "{r},{},{},{}", s.k, s.t, s.energy);
                for v in s.xbar.iter() {
                    let _ = write!(traj, ",{v}");
                }
                traj.push('\n');
            }
        }
        write_file(&cfg.out.join("trajectory.csv"), &traj)?;
    }
    write_json(
        &cfg.out.join("fit.json"),
        &serde_json::json!({
            "energy": report.energy_fit,
            "w2_dirac": report.w2_dirac_fit,
            "error": report.fit_error,
            "decay_ratio": report.decay_ratio,
        }),
    )?;
    let k_f = |v: &[f64]| cps.iter().zip(v).map(|(&k, &y)| (k as f64, y)).collect::<Vec<_>>();
    let mut plot = vec![
        Series::solid("mean consensus energy", k_f(&report.mean_energy)),
        Series::solid("W2 to point mass", k_f(&report.w2_dirac)),
    ];
    if let Some(fit) = &report.energy_fit {
        let (lo, hi) = fit.window;
        let line = |k: u64| (k as f64, (fit.intercept + fit.slope * (k as f64).ln()).exp());
        plot.push(Series::dashed(&format!("fit slope {:.3}", fit.slope), vec![line(lo), line(hi)]));
    }
    write_file(&cfg.out.join("plot.svg"), &loglog_svg("Consensus error", "iteration k", "value", &plot))?;
    Ok(report)
}

fn run_fine(inst: &Instance) -> Result<ConsensusReport, HarnessError> {
    let cfg = &inst.config;
    let fine =
        cfg.fine_sde.ok_or_else(|| HarnessError::Config("fine-SDE mode needs a fine_sde section (dt, eps)".into()))?;
    let inputs = bound_inputs(inst, initial_energy(inst)?);
    let bound = if inputs.beta_bar.is_nan() {
        BoundValue { applicable: false, value: None, reason: Some("single agent: no consensus dynamics".into()) }
    } else {
        BoundValue::from(consensus_time_bound(&inputs, fine.eps))
    };
    let horizon = fine
        .horizon
        .or(bound.value)
        .ok_or_else(|| HarnessError::Config("fine-SDE horizon missing and the time bound is unavailable".into()))?;
    let traces = collect(map_replicas(cfg.replicas, |r| {
        let init = inst.initial_state(r)?;
        let mut noise = NoiseStream::replica(cfg.seed, r);
        sde_fine_approx(
            &inst.system,
            &inst.ensemble,
            cfg.schedule.sigma,
            horizon,
            fine.dt,
            &init,
            fine.record_every,
            &mut noise,
        )
        .map_err(|e| dynamics_error(e, r))
    }))?;
    let times = traces[0].times.clone();
    let mean_energy: Vec<f64> =
        (0..times.len()).map(|i| traces.iter().map(|t| t.energy[i]).sum::<f64>() / traces.len() as f64).collect();
    let first_passage = times.iter().zip(&mean_energy).find(|(_, &e)| e <= fine.eps).map(|(&t, _)| t);
    let passages: Vec<f64> = traces.iter().filter_map(|t| t.first_passage(fine.eps)).collect();
    let mean_replica_first_passage =
        if passages.is_empty() { None } else { Some(passages.iter().sum::<f64>() / passages.len() as f64) };
    let vacuous = !bound.applicable;
    let passage = FinePassage {
        eps: fine.eps,
        dt: fine.dt,
        horizon,
        times,
        mean_energy,
        first_passage,
        mean_replica_first_passage,
        replicas_reaching: passages.len(),
        bound,
    };

    echo_config(cfg)?;
    let mut series = String::from("t,mean_energy\n");
    for (t, e) in passage.times.iter().zip(&passage.mean_energy) {
        let _ = writeln!(series, "{t},{e}");
    }
    write_file(&cfg.out.join("fine_series.csv"), &series)?;
    write_json(
        &cfg.out.join("passage.json"),
        &serde_json::json!({
            "eps": passage.eps,
            "dt": passage.dt,
            "horizon": passage.horizon,
            "first_passage": passage.first_passage,
            "mean_replica_first_passage": passage.mean_replica_first_passage,
            "replicas_reaching": passage.replicas_reaching,
            "replicas": cfg.replicas,
            "bound": passage.bound,
            "inputs": inputs,
        }),
    )?;
    let curve: Vec<(f64, f64)> = passage.times.iter().copied().zip(passage.mean_energy.iter().copied()).collect();
    let (t_lo, t_hi) = (passage.times.get(1).copied().unwrap_or(fine.dt), horizon);
    let (e_lo, e_hi) = passage
        .mean_energy
        .iter()
        .filter(|e| **e > 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let mut plot = vec![
        Series::solid("mean consensus energy", curve),
        Series::dashed("eps", vec![(t_lo, passage.eps), (t_hi, passage.eps)]),
    ];
    if let Some(b) = passage.bound.value {
        plot.push(Series::dashed("time bound", vec![(b, e_lo), (b, e_hi)]));
    }
    write_file(&cfg.out.join("plot.svg"), &loglog_svg("Consensus energy, fine SDE", "time t", "energy", &plot))?;
    Ok(ConsensusReport {
        checkpoints: Vec::new(),
        mean_energy: Vec::new(),
        w2_dirac: Vec::new(),
        energy_fit: None,
        w2_dirac_fit: None,
        fit_error: None,
        decay_ratio: None,
        fine: Some(passage),
        vacuous,
    })
}

// ------------------------------------------------------------ convergence

#[derive(Debug, Clone, Serialize)]
pub struct PlateauSummary {
    pub k_min: u64,
    /// Pooled replica-by-checkpoint samples of the average iterate.
    pub samples: usize,
    /// Gaussian-moment W2 to the target law.
    pub w2_target: Option<f64>,
    /// Gaussian-moment W2 to the exact stationary law of the discretization.
    pub w2_discrete: Option<f64>,
    /// Empirical W2 to exact draws from the target law.
    pub w2_empirical: Option<f64>,
    pub limit_bound: BoundValue,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    /// `ground_truth` or `self_distance`.
    pub mode: String,
    pub checkpoints: Vec<u64>,
    pub w2_gaussian: Vec<Option<f64>>,
    pub w2_empirical: Vec<Option<f64>>,
    pub w2_discrete: Vec<Option<f64>>,
    pub recursion_bound: Vec<Option<f64>>,
    pub limit_bound: Option<BoundValue>,
    pub plateau: Option<PlateauSummary>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    pub vacuous: bool,
}

fn fit_gaussian(x: &DMatrix<f64>) -> Option<GaussianLaw> {
    if x.nrows() <= x.ncols() {
        return None;
    }
    let (mean, cov) = sample_moments(x);
    let cov = (&cov + cov.transpose()).scale(0.5);
    GaussianLaw::new(mean, cov).ok()
}

fn thin(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if x.nrows() <= n {
        return x.clone();
    }
    let stride = x.nrows() as f64 / n as f64;
    DMatrix::from_fn(n, x.ncols(), |i, j| x[((i as f64 * stride) as usize, j)])
}

/// Exact W2 between the rows of two equal-size clouds: sorted matching in
/// `d = 1`, the assignment solver on at most [`EMPIRICAL_CAP`] rows otherwise.
fn empirical_w2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    if a.ncols() == 1 {
        return w2_1d(a.as_slice(), b.as_slice()).ok();
    }
    let (a, b) = (thin(a, EMPIRICAL_CAP), thin(b, EMPIRICAL_CAP));
    let ca = EmpiricalCloud::from_matrix(&a).ok()?;
    let cb = EmpiricalCloud::from_matrix(&b).ok()?;
    w2_empirical_exact(&ca, &cb).ok().map(|p| p.w2())
}

pub fn cmd_convergence(config: &ExperimentConfig) -> Result<ConvergenceReport, HarnessError> {
    let inst = config.instantiate()?;
    let cfg = &inst.config;
    let cps = inst.checkpoints();
    let d = inst.ensemble.dim();
    let runs = collect(map_replicas(cfg.replicas, |r| -> Result<Vec<DVector<f64>>, HarnessError> {
        let state = EnsembleState::new(inst.initial_state(r)?).map_err(|e| dynamics_error(e, r))?;
        let mut noise = NoiseStream::replica(cfg.seed, r);
        let mut rows = Vec::with_capacity(cps.len());
        simulate(&inst.system, &inst.ensemble, &cfg.schedule, state, cfg.steps, &cps, &mut noise, |s| {
            rows.push(s.average())
        })
        .map_err(|e| dynamics_error(e, r))?;
        Ok(rows)
    }))?;
    let cloud_at = |c: usize| DMatrix::from_fn(runs.len(), d, |r, j| runs[r][c][j]);

    let truth = target_law(&inst);
    let mode = if truth.is_some() { "ground_truth" } else { "self_distance" };
    let last = cps.len().saturating_sub(1);
    let target = match &truth {
        Some(t) => Some(t.clone()),
        None => fit_gaussian(&cloud_at(last)),
    };
    let discrete = discretized_stationary_law(&inst.ensemble, &cfg.schedule);
    let bounds = compute_bounds(&inst, cfg.fine_sde.map(|f| f.eps).unwrap_or(DEFAULT_EPS))?;
    let recursion_at: Vec<Option<f64>> = match &bounds.recursion {
        Some(rec) => rec.values.iter().map(|&(_, v)| Some(v)).collect(),
        None => vec![None; cps.len()],
    };

    let mut target_noise = NoiseStream::auxiliary(cfg.seed, TARGET_STREAM);
    let mut w2_g = Vec::with_capacity(cps.len());
    let mut w2_e = Vec::with_capacity(cps.len());
    let mut w2_disc = Vec::with_capacity(cps.len());
    for c in 0..cps.len() {
        let cloud = cloud_at(c);
        let fitted = fit_gaussian(&cloud);
        let dist = |law: &Option<GaussianLaw>| match (&fitted, law) {
            (Some(f), Some(t)) => w2_gaussian(f, t).ok(),
            _ => None,
        };
        w2_g.push(dist(&target));
        w2_disc.push(dist(&discrete));
        let reference = match &truth {
            Some(t) => Some(t.sample(cloud.nrows(), &mut target_noise, c as u64)),
            None => Some(cloud_at(last)),
        };
        w2_e.push(reference.and_then(|r| empirical_w2(&cloud, &r)));
    }

    let plateau = match (cfg.schedule.step, &truth) {
        (StepPolicy::Constant(_), Some(t)) => {
            let k_min = (cfg.plateau_start * cfg.steps as f64).ceil() as u64;
            let idx: Vec<usize> = (0..cps.len()).filter(|&c| cps[c] >= k_min).collect();
            let n = idx.len() * runs.len();
            let pooled = DMatrix::from_fn(n, d, |row, j| runs[row % runs.len()][idx[row / runs.len()]][j]);
            let fitted = fit_gaussian(&pooled);
            let exact = t.sample(n, &mut target_noise, cps.len() as u64);
            Some(PlateauSummary {
                k_min,
                samples: n,
                w2_target: fitted.as_ref().and_then(|f| w2_gaussian(f, t).ok()),
                w2_discrete: match (&fitted, &discrete) {
                    (Some(f), Some(dl)) => w2_gaussian(f, dl).ok(),
                    _ => None,
                },
                w2_empirical: empirical_w2(&pooled, &exact),
                limit_bound: bounds.w2_limit.clone().expect("constant step has a limit bound"),
            })
        }
        _ => None,
    };

    let (fit, fit_error) = match cfg.schedule.step {
        StepPolicy::InverseK { .. } => {
            let series: Vec<(u64, f64)> = cps.iter().zip(&w2_g).map(|(&k, v)| (k, v.unwrap_or(f64::NAN))).collect();
            match fit_series(cfg, &series) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            }
        }
        StepPolicy::Constant(_) => (None, None),
    };
    let vacuous = bounds.w2_limit.as_ref().is_some_and(|b| !b.applicable)
        || bounds.recursion.as_ref().is_some_and(|r| r.non_contracting);
    let limit_value = bounds.w2_limit.as_ref().and_then(|b| b.value);
    let report = ConvergenceReport {
        mode: mode.into(),
        checkpoints: cps.clone(),
        w2_gaussian: w2_g,
        w2_empirical: w2_e,
        w2_discrete: w2_disc,
        recursion_bound: recursion_at,
        limit_bound: bounds.w2_limit.clone(),
        plateau,
        fit,
        fit_error,
        vacuous,
    };

    echo_config(cfg)?;
    let mut series = String::from("k,w2_gaussian,w2_empirical,w2_discrete,recursion_bound,limit_bound\n");
    for (c, &k) in cps.iter().enumerate() {
        let _ = writeln!(
            series,
            "{k},{},{},{},{},{}",
            fmt_opt(report.w2_gaussian[c]),
            fmt_opt(report.w2_empirical[c]),
            fmt_opt(report.w2_discrete[c]),
            fmt_opt(report.recursion_bound[c]),
            fmt_opt(limit_value),
        );
    }
    write_file(&cfg.out.join("series.csv"), &series)?;
    if cfg.write_trajectory {
        let mut traj = String::from("replica,k");
        for j in 0..d {
            let _ = write!(traj, ",xbar_{}", j + 1);
        }
        traj.push('\n');
        for (r, run) in runs.iter().enumerate() {
            for (c, xbar) in run.iter().enumerate() {
                let _ = write!(traj, "{r},{}", cps[c]);
                for v in xbar.iter() {
                    let _ = write!(traj, ",{v}");
                }
                traj.push('\n');
            }
        }
        write_file(&cfg.out.join("trajectory.csv"), &traj)?;
    }
    write_json(
        &cfg.out.join("fit.json"),
        &serde_json::json!({
            "mode": report.mode,
            "fit": report.fit,
            "error": report.fit_error,
            "plateau": report.plateau,
            "limit_bound": report.limit_bound,
        }),
    )?;
    let k_f = |v: &[Option<f64>]| cps.iter().zip(v).filter_map(|(&k, y)| y.map(|y| (k as f64, y))).collect::<Vec<_>>();
    let mut plot = vec![
        Series::solid("W2 Gaussian moments", k_f(&report.w2_gaussian)),
        Series::solid("W2 empirical", k_f(&report.w2_empirical)),
        Series::dashed("recursion bound", k_f(&report.recursion_bound)),
    ];
    if let Some(v) = limit_value {
        let (lo, hi) = (cps.first().copied().unwrap_or(1) as f64, cfg.steps as f64);
        plot.push(Series::dashed("limit bound", vec![(lo, v), (hi, v)]));
    }
    write_file(&cfg.out.join("plot.svg"), &loglog_svg("Average iterate vs target", "iteration k", "W2", &plot))?;
    Ok(report)
}
