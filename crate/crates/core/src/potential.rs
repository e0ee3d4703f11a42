//! Agent-decomposed potentials `U(x) = sum_i u_i(x)` with analytic gradients.
//!
//! Two shipped families: quadratics (which carry a Gaussian stationary law and
//! so give closed-form Wasserstein ground truth) and ridge-regularised
//! logistic regression over per-agent data shards. A flat ensemble with zero
//! gradients exists for gradient-free consensus diagnostics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoiseStream;

const SPD_SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix {index} is not symmetric positive definite: {reason}")]
    NotSpd { index: usize, reason: String },
    #[error("non-finite input to gradient")]
    NonFinite,
    #[error("agent {0} owns an empty data shard")]
    EmptyShard(usize),
    #[error("invalid label {label} at row {row}; expected -1 or +1")]
    Label { row: usize, label: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Normal law with an SPD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, PotentialError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(PotentialError::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        check_spd(&covariance, 0)?;
        Ok(Self { mean, covariance })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: DVector::zeros(d), covariance: DMatrix::identity(d, d) }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same mean, covariance scaled by `sigma`.
    pub fn at_temperature(&self, sigma: f64) -> Self {
        Self { mean: self.mean.clone(), covariance: self.covariance.scale(sigma) }
    }

    /// `n` exact draws, one per row, from the `counter` block of `noise`.
    pub fn sample(&self, n: usize, noise: &mut NoiseStream, counter: u64) -> DMatrix<f64> {
        let d = self.dim();
        let chol = self.covariance.clone().cholesky().expect("covariance validated SPD at construction").l();
        let mut z = vec![0.0; n * d];
        noise.fill_normals(counter, &mut z);
        let z = DMatrix::from_row_slice(n, d, &z);
        let mut out = z * chol.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

fn check_spd(a: &DMatrix<f64>, index: usize) -> Result<(), PotentialError> {
    if a.nrows() != a.ncols() {
        return Err(PotentialError::NotSpd { index, reason: "not square".into() });
    }
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SPD_SYMMETRY_TOL {
                return Err(PotentialError::NotSpd { index, reason: format!("asymmetric at ({i}, {j})") });
            }
        }
    }
    let min = a.clone().symmetric_eigenvalues().min();
    if !(min > 0.0) {
        return Err(PotentialError::NotSpd { index, reason: format!("smallest eigenvalue {min}") });
    }
    Ok(())
}

/// `u(x) = x'Ax/2 - b'x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Sum of logistic losses over a shard plus a ridge share `ridge_share * |x|^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    /// One datum per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub ridge_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Quadratic(Quadratic),
    Logistic(Logistic),
    Flat { dim: usize },
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Component {
    pub fn dim(&self) -> usize {
        match self {
            Component::Quadratic(q) => q.b.len(),
            Component::Logistic(l) => l.features.ncols(),
            Component::Flat { dim } => *dim,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Component::Quadratic(q) => {
                let d = x.len();
                let mut v = 0.0;
                for j in 0..d {
                    let ax: f64 = x.iter().enumerate().map(|(i, xi)| q.a[(j, i)] * xi).sum();
                    v += 0.5 * x[j] * ax - q.b[j] * x[j];
                }
                v
            }
            Component::Logistic(l) => {
                let mut v = 0.0;
                for (r, &y) in l.labels.iter().enumerate() {
                    let margin: f64 = (0..x.len()).map(|j| l.features[(r, j)] * x[j]).sum();
                    v += softplus(-y * margin);
                }
                v + 0.5 * l.ridge_share * x.iter().map(|v| v * v).sum::<f64>()
            }
            Component::Flat { .. } => 0.0,
        }
    }

    /// Writes `grad u(x)` into `out`. Hot path: no allocation.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Component::Quadratic(q) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = -q.b[i];
                    for (j, xj) in x.iter().enumerate() {
                        s += q.a[(i, j)] * xj;
                    }
                    *o = s;
                }
            }
            Component::Logistic(l) => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = l.ridge_share * xi;
                }
                for (r, &y) in l.labels.iter().enumerate() {
                    let margin: f64 = (0..x.len()).map(|j| l.features[(r, j)] * x[j]).sum();
                    let w = -y * sigmoid(-y * margin);
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += w * l.features[(r, j)];
                    }
                }
            }
            Component::Flat { .. } => out.fill(0.0),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient_into(x, &mut g);
        g
    }
}

/// Relative error between the analytic gradient and a central finite
/// difference of `value`, normalised by `max(|grad|, 1)`.
pub fn gradient_check(component: &Component, x: &[f64]) -> f64 {
    let g = component.gradient(x);
    let mut xp = x.to_vec();
    let mut err = 0.0;
    for j in 0..x.len() {
        let step = 1e-5 * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let up = component.value(&xp);
        xp[j] = x[j] - step;
        let down = component.value(&xp);
        xp[j] = x[j];
        let fd = (up - down) / (2.0 * step);
        err += (fd - g[j]).powi(2);
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    err.sqrt() / norm.max(1.0)
}

/// The full agent-decomposed potential with its regularity constants.
#[derive(Debug, Clone)]
pub struct PotentialEnsemble {
    components: Vec<Component>,
    dim: usize,
    strong_convexity: f64,
    lipschitz: f64,
    dissimilarity: f64,
    minimizer: Option<DVector<f64>>,
    /// Stationary law at unit temperature; rescale with `at_temperature`.
    stationary_law: Option<GaussianLaw>,
}

/// Radius, sample count and seed used for the `dissimilarity` estimate stored
/// on every constructed ensemble.
pub const DEFAULT_G_RADIUS: f64 = 1.0;
pub const DEFAULT_G_SAMPLES: usize = 64;
pub const DEFAULT_G_SEED: u64 = 0x6a09e667;

impl PotentialEnsemble {
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn agent_count(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Sampled lower bound on the gradient dissimilarity constant `G`.
    pub fn dissimilarity(&self) -> f64 {
        self.dissimilarity
    }

    pub fn minimizer(&self) -> Option<&DVector<f64>> {
        self.minimizer.as_ref()
    }

    pub fn stationary_law(&self, sigma: f64) -> Option<GaussianLaw> {
        self.stationary_law.as_ref().map(|law| law.at_temperature(sigma))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.components.iter().map(|c| c.value(x)).sum()
    }

    /// True when every component is a quadratic with the same Hessian.
    pub fn shared_hessian(&self) -> Option<&DMatrix<f64>> {
        let first = match self.components.first()? {
            Component::Quadratic(q) => &q.a,
            _ => return None,
        };
        self.components.iter().all(|c| matches!(c, Component::Quadratic(q) if q.a == *first)).then_some(first)
    }

    /// Zero potential for `m` agents in dimension `d`.
    pub fn flat(m: usize, d: usize) -> Self {
        Self {
            components: vec![Component::Flat { dim: d }; m],
            dim: d,
            strong_convexity: 0.0,
            lipschitz: 0.0,
            dissimilarity: 0.0,
            minimizer: None,
            stationary_law: None,
        }
    }
}

pub fn quadratic_ensemble(
    a_list: Vec<DMatrix<f64>>,
    b_list: Vec<DVector<f64>>,
) -> Result<PotentialEnsemble, PotentialError> {
    if a_list.is_empty() || a_list.len() != b_list.len() {
        return Err(PotentialError::Dimension(format!("{} Hessians for {} offsets", a_list.len(), b_list.len())));
    }
    let d = b_list[0].len();
    for (i, (a, b)) in a_list.iter().zip(&b_list).enumerate() {
        if a.nrows() != d || a.ncols() != d || b.len() != d {
            return Err(PotentialError::Dimension(format!("component {i} is not {d}-dimensional")));
        }
        check_spd(a, i)?;
    }
    let hessian: DMatrix<f64> = a_list.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a);
    let offset: DVector<f64> = b_list.iter().fold(DVector::zeros(d), |acc, b| acc + b);
    let eig = hessian.clone().symmetric_eigenvalues();
    let inverse = hessian
        .clone()
        .cholesky()
        .ok_or_else(|| PotentialError::NotSpd { index: usize::MAX, reason: "summed Hessian".into() })?
        .inverse();
    let minimizer = &inverse * &offset;
    let law = GaussianLaw::new(minimizer.clone(), symmetrize(inverse))?;
    let components = a_list.into_iter().zip(b_list).map(|(a, b)| Component::Quadratic(Quadratic { a, b })).collect();
    let mut ens = PotentialEnsemble {
        components,
        dim: d,
        strong_convexity: eig.min(),
        lipschitz: eig.max(),
        dissimilarity: 0.0,
        minimizer: Some(minimizer),
        stationary_law: Some(law),
    };
    ens.dissimilarity = estimate_dissimilarity(&ens, DEFAULT_G_RADIUS, DEFAULT_G_SAMPLES, DEFAULT_G_SEED)?.value;
    Ok(ens)
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()).scale(0.5)
}

/// One labeled data shard per agent: `(features n x d, labels)`.
pub type Shard = (DMatrix<f64>, Vec<f64>);

pub fn logistic_ensemble(shards: Vec<Shard>, ridge: f64) -> Result<PotentialEnsemble, PotentialError> {
    if !(ridge > 0.0) {
        return Err(PotentialError::Parameter(format!("ridge must be positive, got {ridge}")));
    }
    if shards.is_empty() {
        return Err(PotentialError::Parameter("no shards".into()));
    }
    let m = shards.len();
    let d = shards[0].0.ncols();
    let mut gram = DMatrix::zeros(d, d);
    let mut components = Vec::with_capacity(m);
    for (i, (features, labels)) in shards.into_iter().enumerate() {
        if labels.is_empty() {
            return Err(PotentialError::EmptyShard(i));
        }
        if features.ncols() != d || features.nrows() != labels.len() {
            return Err(PotentialError::Dimension(format!("shard {i} shape mismatch")));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y != 1.0 && y != -1.0) {
            return Err(PotentialError::Label { row, label });
        }
        gram += features.transpose() * &features;
        components.push(Component::Logistic(Logistic { features, labels, ridge_share: ridge / m as f64 }));
    }
    let gram_max = symmetrize(gram).symmetric_eigenvalues().max();
    let mut ens = PotentialEnsemble {
        components,
        dim: d,
        strong_convexity: ridge,
        lipschitz: ridge + 0.25 * gram_max,
        dissimilarity: 0.0,
        minimizer: None,
        stationary_law: None,
    };
    ens.dissimilarity = estimate_dissimilarity(&ens, DEFAULT_G_RADIUS, DEFAULT_G_SAMPLES, DEFAULT_G_SEED)?.value;
    Ok(ens)
}

/// Reads logistic data from CSV rows `label, f_1, ..., f_d` (no header) and
/// splits them into `agents` contiguous shards of near-equal size.
pub fn read_logistic_csv(path: &Path, agents: usize) -> Result<Vec<Shard>, PotentialError> {
    if agents == 0 {
        return Err(PotentialError::Parameter("agent count must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| PotentialError::Parameter(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() < 2 {
            return Err(PotentialError::Dimension("row needs a label and at least one feature".into()));
        }
        rows.push(row);
    }
    let d = rows.first().map(|r| r.len() - 1).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d + 1) {
        return Err(PotentialError::Dimension("ragged CSV rows".into()));
    }
    let n = rows.len();
    let mut shards = Vec::with_capacity(agents);
    for i in 0..agents {
        let (lo, hi) = (i * n / agents, (i + 1) * n / agents);
        let chunk = &rows[lo..hi];
        let features = DMatrix::from_fn(chunk.len(), d, |r, c| chunk[r][c + 1]);
        shards.push((features, chunk.iter().map(|r| r[0]).collect()));
    }
    Ok(shards)
}

/// JSON schema for quadratic ensembles.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadraticSpec {
    pub components: Vec<QuadraticComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadraticComponentSpec {
    /// Row-major Hessian.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl QuadraticSpec {
    pub fn build(&self) -> Result<PotentialEnsemble, PotentialError> {
        let mut a_list = Vec::new();
        let mut b_list = Vec::new();
        for (i, c) in self.components.iter().enumerate() {
            let d = c.b.len();
            if c.a.len() != d || c.a.iter().any(|r| r.len() != d) {
                return Err(PotentialError::Dimension(format!("component {i}: Hessian is not {d}x{d}")));
            }
            a_list.push(DMatrix::from_fn(d, d, |r, s| c.a[r][s]));
            b_list.push(DVector::from_column_slice(&c.b));
        }
        quadratic_ensemble(a_list, b_list)
    }

    pub fn read(path: &Path) -> Result<Self, PotentialError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PotentialError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn grad_full(ens: &PotentialEnsemble, x: &DVector<f64>) -> Result<DVector<f64>, PotentialError> {
    if x.len() != ens.dim {
        return Err(PotentialError::Dimension(format!("expected {}, got {}", ens.dim, x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PotentialError::NonFinite);
    }
    let mut total = DVector::zeros(ens.dim);
    let mut g = vec![0.0; ens.dim];
    for c in &ens.components {
        c.gradient_into(x.as_slice(), &mut g);
        total += DVector::from_column_slice(&g);
    }
    Ok(total)
}

/// Row `i` of the result is `grad u_i(X^{(i)})`.
pub fn grad_stacked(ens: &PotentialEnsemble, x: &DMatrix<f64>) -> Result<DMatrix<f64>, PotentialError> {
    if x.nrows() != ens.agent_count() || x.ncols() != ens.dim {
        return Err(PotentialError::Dimension(format!(
            "expected {}x{}, got {}x{}",
            ens.agent_count(),
            ens.dim,
            x.nrows(),
            x.ncols()
        )));
    }
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut row = vec![0.0; ens.dim];
    let mut g = vec![0.0; ens.dim];
    for (i, c) in ens.components.iter().enumerate() {
        row.iter_mut().zip(x.row(i).iter()).for_each(|(r, v)| *r = *v);
        c.gradient_into(&row, &mut g);
        for j in 0..ens.dim {
            out[(i, j)] = g[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityEstimate {
    /// Max sampled ratio; a lower bound on the true constant.
    pub value: f64,
    /// Smallest point separation that entered the maximum.
    pub min_separation: f64,
    pub note: Option<String>,
}

/// Samples `samples` points uniformly in the ball of `radius` around the
/// minimizer (or the origin) and returns the largest
/// `|grad u_i(x) - grad u_j(y)| / |x - y|` over all point pairs and all
/// component pairs `i != j`. Pairs closer than `1e-9` are skipped.
pub fn estimate_dissimilarity(
    ens: &PotentialEnsemble,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<DissimilarityEstimate, PotentialError> {
    if !(radius > 0.0) || samples == 0 {
        return Err(PotentialError::Parameter(format!("need radius > 0 and samples >= 1, got {radius} and {samples}")));
    }
    let m = ens.agent_count();
    if m < 2 {
        return Ok(DissimilarityEstimate {
            value: 0.0,
            min_separation: f64::INFINITY,
            note: Some("single component: dissimilarity is vacuous".into()),
        });
    }
    let d = ens.dim;
    let center = ens.minimizer.clone().unwrap_or_else(|| DVector::zeros(d));
    let mut noise = NoiseStream::new(seed, 0);
    let mut dir = vec![0.0; d];
    let mut u = [0.0];
    let points: Vec<Vec<f64>> = (0..samples as u64)
        .map(|s| {
            noise.fill_normals(2 * s, &mut dir);
            noise.fill_uniforms(2 * s + 1, &mut u);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = radius * u[0].powf(1.0 / d as f64);
            (0..d).map(|j| center[j] + r * dir[j] / norm).collect()
        })
        .collect();
    let grads: Vec<Vec<Vec<f64>>> =
        points.iter().map(|p| ens.components.iter().map(|c| c.gradient(p)).collect()).collect();
    let mut best = 0.0f64;
    let mut best_sep = f64::INFINITY;
    for p in 0..samples {
        for q in 0..samples {
            let sep = points[p].iter().zip(&points[q]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if sep < 1e-9 {
                continue;
            }
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    let diff = grads[p][i].iter().zip(&grads[q][j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let ratio = diff / sep;
                    if ratio > best {
                        best = ratio;
                        best_sep = sep;
                    }
                }
            }
        }
    }
    Ok(DissimilarityEstimate { value: best, min_separation: best_sep, note: None })
}
