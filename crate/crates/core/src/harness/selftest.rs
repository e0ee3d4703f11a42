//! Built-in property suite with optional fault injection.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{average_update_residual, AnnealPolicy, EnsembleState, Integrator, Schedule, StepPolicy};
use crate::network::{build_topology, metropolis_weights, Topology};
use crate::noise::NoiseStream;
use crate::potential::{gradient_check, logistic_ensemble, quadratic_ensemble, PotentialEnsemble};
use crate::theory::{normalized_tail, polyak_recurrence_24, polyak_recurrence_25};
use crate::transport::{solve_assignment, w2_1d, w2_empirical_exact, EmpiricalCloud, TransportPlan};

/// Faults to inject so the suite can be seen to fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Scale one row of a mixing matrix so it sums to 1.1.
    pub corrupt_weights: bool,
    /// Swap two entries of every assignment returned by the solver.
    pub permute_assignment: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestReport {
    pub results: Vec<PropertyResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }
}

fn normals(seed: u64, counter: u64, n: usize) -> Vec<f64> {
    let mut z = vec![0.0; n];
    NoiseStream::new(seed, 0).fill_normals(counter, &mut z);
    z
}

/// Minimum mean squared cost over all `n!` bijections.
pub fn brute_force_cost(a: &EmpiricalCloud, b: &EmpiricalCloud) -> f64 {
    fn rec(a: &EmpiricalCloud, b: &EmpiricalCloud, perm: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        let n = a.len();
        if perm.len() == n {
            *best = best.min(TransportPlan::cost_of(a, b, perm));
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(a, b, perm, used, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(a, b, &mut Vec::new(), &mut vec![false; a.len()], &mut best);
    best
}

fn assignment_cost(a: &EmpiricalCloud, b: &EmpiricalCloud, faults: Faults) -> f64 {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y).powi(2)).sum();
        }
    }
    let mut assignment = solve_assignment(&cost, n);
    if faults.permute_assignment && n >= 2 {
        assignment.swap(0, 1);
    }
    TransportPlan::cost_of(a, b, &assignment)
}

fn ot_bruteforce(faults: Faults) -> Result<String, String> {
    for case in 0..60u64 {
        let n = 2 + (case % 5) as usize;
        let d = 1 + (case % 3) as usize;
        let a = EmpiricalCloud::new(normals(case, 0, n * d), d).expect("sized");
        let b = EmpiricalCloud::new(normals(case, 1, n * d), d).expect("sized");
        let solver = assignment_cost(&a, &b, faults);
        let brute = brute_force_cost(&a, &b);
        if (solver - brute).abs() > 1e-12 {
            return Err(format!("case {case} (n = {n}, d = {d}): solver {solver} vs brute force {brute}"));
        }
    }
    Ok("60 instances match".into())
}

fn one_dim_equivalence() -> Result<String, String> {
    for case in 0..20u64 {
        let n = 1 + (case as usize * 13) % 128;
        let a = normals(case + 100, 0, n);
        let b: Vec<f64> = normals(case + 100, 1, n).iter().map(|v| 2.0 * v + 0.5).collect();
        let sorted = w2_1d(&a, &b).map_err(|e| e.to_string())?;
        let ca = EmpiricalCloud::new(a, 1).map_err(|e| e.to_string())?;
        let cb = EmpiricalCloud::new(b, 1).map_err(|e| e.to_string())?;
        let exact = w2_empirical_exact(&ca, &cb).map_err(|e| e.to_string())?.w2();
        if (sorted - exact).abs() > 1e-12 {
            return Err(format!("case {case}: sorted {sorted} vs assignment {exact}"));
        }
    }
    Ok("20 instances match".into())
}

fn sample_potentials() -> Vec<(&'static str, PotentialEnsemble)> {
    let d = 3;
    let a = (0..3)
        .map(|i| {
            let z = DMatrix::from_row_slice(d, d, &normals(7, i, d * d));
            &z * z.transpose() + DMatrix::identity(d, d)
        })
        .collect();
    let b = (0..3).map(|i| DVector::from_vec(normals(8, i, d))).collect();
    let quad = quadratic_ensemble(a, b).expect("SPD by construction");
    let shards = (0..2)
        .map(|i| {
            let x = DMatrix::from_row_slice(5, d, &normals(9, i, 5 * d));
            let y = normals(10, i, 5).iter().map(|v| if *v > 0.0 { 1.0 } else { -1.0 }).collect();
            (x, y)
        })
        .collect();
    let logistic = logistic_ensemble(shards, 0.5).expect("valid shards");
    vec![("quadratic", quad), ("logistic", logistic)]
}

fn gradients() -> Result<String, String> {
    let mut worst = 0.0f64;
    for (name, ens) in sample_potentials() {
        for p in 0..20u64 {
            let x = normals(11, p, ens.dim());
            for (i, c) in ens.components().iter().enumerate() {
                let err = gradient_check(c, &x);
                if err > 1e-6 {
                    return Err(format!("{name} component {i} at point {p}: relative error {err:e}"));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("worst relative error {worst:e}"))
}

fn averaged_identity() -> Result<String, String> {
    let sys = metropolis_weights(&build_topology(Topology::Ring, 8).expect("ring")).expect("metropolis");
    let a = (0..8).map(|i| DMatrix::from_diagonal_element(2, 2, 0.5 + 0.1 * i as f64)).collect();
    let b = (0..8).map(|i| DVector::from_element(2, i as f64 - 3.5)).collect();
    let ens = quadratic_ensemble(a, b).map_err(|e| e.to_string())?;
    let sched = Schedule::new(StepPolicy::Constant(0.1), AnnealPolicy::Harmonic, 1.0).map_err(|e| e.to_string())?;
    let mut integrator = Integrator::new(&sys, &ens).map_err(|e| e.to_string())?;
    let mut noise = NoiseStream::replica(3, 0);
    let mut replay = NoiseStream::replica(3, 0);
    let mut state = EnsembleState::new(DMatrix::from_fn(8, 2, |i, j| (i * 2 + j) as f64)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let prev = state.clone();
        integrator.step(&mut state, &sched, &mut noise).map_err(|e| e.to_string())?;
        let res = average_update_residual(&prev, &state, &ens, &sched, &mut replay).map_err(|e| e.to_string())?;
        worst = worst.max(res);
    }
    if worst > 1e-10 {
        return Err(format!("residual {worst:e} exceeds 1e-10"));
    }
    Ok(format!("worst residual {worst:e}"))
}

fn polyak() -> Result<String, String> {
    let k = 1_000_000;
    let u = polyak_recurrence_25(2.0, 1.0, 0.5, 1.0, 0.0, k).map_err(|e| e.to_string())?;
    let tail = normalized_tail(&u, 0.5);
    if (tail / 0.5 - 1.0).abs() > 0.05 {
        return Err(format!("first recurrence tail {tail} vs 0.5"));
    }
    let u = polyak_recurrence_24(2.0, 1.0, 1.0, 0.0, k).map_err(|e| e.to_string())?;
    let tail = normalized_tail(&u, 1.0);
    if (tail - 1.0).abs() > 0.05 {
        return Err(format!("second recurrence tail {tail} vs 1"));
    }
    Ok("both tails within 5%".into())
}

fn doubly_stochastic(faults: Faults) -> Result<String, String> {
    let mut checked = 0;
    for m in 2..=12 {
        for kind in [Topology::Ring, Topology::Path, Topology::Complete, Topology::Star] {
            let mut sys =
                metropolis_weights(&build_topology(kind, m).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            if faults.corrupt_weights && checked == 0 {
                let mut w = sys.weights().clone();
                let row_sum: f64 = w.row(0).iter().sum();
                w.row_mut(0).scale_mut(1.1 / row_sum);
                sys = sys.with_weights_unchecked(w);
            }
            sys.check_invariants().map_err(|e| format!("{kind:?} on {m} agents: {e}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} mixing matrices"))
}

/// Runs every property, continuing past failures.
pub fn cmd_selftest(faults: Faults) -> SelfTestReport {
    type Check = Box<dyn Fn() -> Result<String, String>>;
    let checks: Vec<(&'static str, Check)> = vec![
        ("ot_bruteforce_equivalence", Box::new(move || ot_bruteforce(faults))),
        ("w2_1d_matches_assignment", Box::new(one_dim_equivalence)),
        ("gradient_finite_differences", Box::new(gradients)),
        ("averaged_update_identity", Box::new(averaged_identity)),
        ("polyak_tail_limits", Box::new(polyak)),
        ("double_stochasticity", Box::new(move || doubly_stochastic(faults))),
    ];
    let results = checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => PropertyResult { name, passed: true, detail },
            Err(detail) => PropertyResult { name, passed: false, detail },
        })
        .collect();
    SelfTestReport { results }
}
