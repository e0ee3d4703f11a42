//! Wasserstein-2 distances.
//!
//! Closed form between Gaussian laws, exact linear assignment between
//! equal-size uniform clouds, the sorted-order formula in one dimension, and
//! the point-mass case where every coupling is the product coupling.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::potential::GaussianLaw;

/// Largest cloud accepted by the exact assignment solver.
pub const MAX_ASSIGNMENT_SIZE: usize = 4096;

/// Eigenvalues below this are clamped before taking square roots.
pub const SQRT_CLAMP: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("size mismatch: {0} vs {1} points")]
    SizeMismatch(usize, usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("cloud of {0} points exceeds the exact solver limit")]
    TooLarge(usize),
    #[error("covariance is not symmetric positive definite")]
    NotSpd,
    #[error("non-finite point coordinate")]
    NonFinite,
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed number {0:?}")]
    Number(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Uniformly weighted point cloud, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCloud {
    points: Vec<f64>,
    n: usize,
    dim: usize,
}

impl EmpiricalCloud {
    /// `points` is row-major `n x dim`.
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self, TransportError> {
        if dim == 0 || points.is_empty() {
            return Err(TransportError::Empty);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(TransportError::DimensionMismatch(points.len(), dim));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(TransportError::NonFinite);
        }
        Ok(Self { n: points.len() / dim, points, dim })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self, TransportError> {
        let mut points = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            points.extend(row.iter());
        }
        Self::new(points, m.ncols())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.points)
    }

    /// One point per CSV row, no header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TransportError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut points = Vec::new();
        let mut dim = None;
        for rec in rdr.records() {
            let rec = rec?;
            match dim {
                None => dim = Some(rec.len()),
                Some(d) if d != rec.len() => return Err(TransportError::DimensionMismatch(d, rec.len())),
                _ => {}
            }
            for field in rec.iter() {
                points.push(field.parse::<f64>().map_err(|_| TransportError::Number(field.to_string()))?);
            }
        }
        Self::new(points, dim.unwrap_or(0))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TransportError> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.n {
            wtr.write_record(self.point(i).iter().map(|v| format!("{v:e}")))?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Optimal bijection between two equal-size clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `assignment[i]` is the target index matched to source point `i`.
    pub assignment: Vec<usize>,
    /// Mean squared distance under the assignment.
    pub cost: f64,
}

impl TransportPlan {
    pub fn w2(&self) -> f64 {
        self.cost.sqrt()
    }

    /// Mean squared distance of `assignment` between `a` and `b`.
    pub fn cost_of(a: &EmpiricalCloud, b: &EmpiricalCloud, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| sq_dist(a.point(i), b.point(j))).sum::<f64>() / a.len() as f64
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.assignment.len()];
        for &j in &self.assignment {
            if j >= seen.len() || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of the Gaussian closed form, with the eigenvalue clamp applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianDistance {
    pub w2: f64,
    /// Largest magnitude by which a negative eigenvalue was raised to the clamp.
    pub clamp_magnitude: f64,
}

fn sym_sqrt(a: &DMatrix<f64>, clamp: &mut f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()).scale(0.5);
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| {
        if l < SQRT_CLAMP {
            *clamp = clamp.max(SQRT_CLAMP - l);
            SQRT_CLAMP.sqrt()
        } else {
            l.sqrt()
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `sqrt(|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_b^{1/2} S_a S_b^{1/2})^{1/2}))`.
pub fn w2_gaussian_detailed(a: &GaussianLaw, b: &GaussianLaw) -> Result<GaussianDistance, TransportError> {
    if a.dim() != b.dim() {
        return Err(TransportError::DimensionMismatch(a.dim(), b.dim()));
    }
    for law in [a, b] {
        if law.covariance().clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(TransportError::NotSpd);
        }
    }
    let mut clamp = 0.0;
    let root_b = sym_sqrt(b.covariance(), &mut clamp);
    let cross = sym_sqrt(&(&root_b * a.covariance() * &root_b), &mut clamp);
    let trace = (a.covariance() + b.covariance() - cross.scale(2.0)).trace();
    let mean = (a.mean() - b.mean()).norm_squared();
    Ok(GaussianDistance { w2: (mean + trace.max(0.0)).sqrt(), clamp_magnitude: clamp })
}

pub fn w2_gaussian(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64, TransportError> {
    Ok(w2_gaussian_detailed(a, b)?.w2)
}

/// Exact W2 between equal-size uniform clouds via the Hungarian method with
/// potentials (shortest augmenting paths), `O(n^3)`.
pub fn w2_empirical_exact(a: &EmpiricalCloud, b: &EmpiricalCloud) -> Result<TransportPlan, TransportError> {
    if a.len() != b.len() {
        return Err(TransportError::SizeMismatch(a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(TransportError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.len() > MAX_ASSIGNMENT_SIZE {
        return Err(TransportError::TooLarge(a.len()));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let p = a.point(i);
        for j in 0..n {
            cost[i * n + j] = sq_dist(p, b.point(j));
        }
    }
    let assignment = solve_assignment(&cost, n);
    let cost = TransportPlan::cost_of(a, b, &assignment);
    Ok(TransportPlan { assignment, cost })
}

/// Minimum-cost perfect matching on a dense row-major `n x n` cost matrix.
/// Returns `assignment[row] = column`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Exact W2 between equal-length samples on the line: match order statistics.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64, TransportError> {
    if a.is_empty() || b.is_empty() {
        return Err(TransportError::Empty);
    }
    if a.len() != b.len() {
        return Err(TransportError::SizeMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(TransportError::NonFinite);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mean = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(mean.sqrt())
}

/// Squared Frobenius norm of the deviations from the column mean.
pub fn consensus_energy(x: &DMatrix<f64>) -> f64 {
    let m = x.nrows();
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for col in x.column_iter() {
        let mean = col.sum() / m as f64;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    total
}

/// W2 to the point mass at the origin: root mean squared norm.
pub fn w2_to_dirac(a: &EmpiricalCloud) -> f64 {
    (a.points.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseStream;
    use nalgebra::DVector;

    fn random_cloud(noise: &mut NoiseStream, counter: u64, n: usize, d: usize) -> EmpiricalCloud {
        let mut buf = vec![0.0; n * d];
        noise.fill_normals(counter, &mut buf);
        EmpiricalCloud::new(buf, d).unwrap()
    }

    fn brute_force(a: &EmpiricalCloud, b: &EmpiricalCloud) -> f64 {
        fn rec(a: &EmpiricalCloud, b: &EmpiricalCloud, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == a.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    rec(a, b, i + 1, used, acc + sq_dist(a.point(i), b.point(j)), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn gaussian_closed_forms() {
        let a = GaussianLaw::new(DVector::zeros(3), DMatrix::identity(3, 3).scale(4.0)).unwrap();
        let b = GaussianLaw::standard(3);
        assert!((w2_gaussian(&a, &b).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert!(w2_gaussian(&a, &a).unwrap() < 1e-6);
        let c = GaussianLaw::new(DVector::from_vec(vec![3.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let e = GaussianLaw::new(DVector::from_vec(vec![0.0, 4.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((w2_gaussian(&c, &e).unwrap() - 5.0).abs() < 1e-12);
        assert!(w2_gaussian(&a, &c).is_err());
    }

    #[test]
    fn gaussian_symmetric_in_arguments() {
        let a =
            GaussianLaw::new(DVector::from_vec(vec![1.0, 0.5]), DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]))
                .unwrap();
        let b = GaussianLaw::new(
            DVector::from_vec(vec![-0.2, 0.1]),
            DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 3.0]),
        )
        .unwrap();
        let ab = w2_gaussian(&a, &b).unwrap();
        let ba = w2_gaussian(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn assignment_matches_bruteforce() {
        let mut noise = NoiseStream::new(17, 0);
        for trial in 0..40u64 {
            let n = 1 + (trial % 6) as usize;
            let d = 1 + (trial % 3) as usize;
            let a = random_cloud(&mut noise, 2 * trial, n, d);
            let b = random_cloud(&mut noise, 2 * trial + 1, n, d);
            let plan = w2_empirical_exact(&a, &b).unwrap();
            assert!(plan.is_bijection());
            assert!((plan.cost - brute_force(&a, &b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_clouds_cost_zero() {
        let mut noise = NoiseStream::new(1, 0);
        let a = random_cloud(&mut noise, 0, 30, 2);
        let plan = w2_empirical_exact(&a, &a).unwrap();
        assert_eq!(plan.cost, 0.0);
        assert_eq!(plan.assignment, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = EmpiricalCloud::new(vec![0.0, 1.0], 1).unwrap();
        let b = EmpiricalCloud::new(vec![0.0], 1).unwrap();
        assert!(matches!(w2_empirical_exact(&a, &b), Err(TransportError::SizeMismatch(2, 1))));
        assert!(matches!(w2_1d(&[1.0], &[]), Err(TransportError::Empty)));
        assert!(matches!(w2_1d(&[1.0, 2.0], &[1.0]), Err(TransportError::SizeMismatch(2, 1))));
    }

    #[test]
    fn one_dimensional_cases() {
        assert_eq!(w2_1d(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(w2_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        let v = w2_1d(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert!((v - 5f64.sqrt()).abs() < 1e-15);
        let a = EmpiricalCloud::new(vec![0.0, 0.0], 1).unwrap();
        let b = EmpiricalCloud::new(vec![1.0, 3.0], 1).unwrap();
        assert!((w2_empirical_exact(&a, &b).unwrap().w2() - v).abs() < 1e-15);
    }

    #[test]
    fn energy_and_dirac() {
        assert_eq!(consensus_energy(&DMatrix::from_fn(3, 2, |_, j| j as f64)), 0.0);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        assert_eq!(consensus_energy(&x), 2.0);
        let shifted = DMatrix::from_fn(2, 2, |i, j| x[(i, j)] + [3.5, -7.25][j]);
        assert!((consensus_energy(&shifted) - 2.0).abs() < 1e-12);

        let zeros = EmpiricalCloud::new(vec![0.0; 6], 2).unwrap();
        assert_eq!(w2_to_dirac(&zeros), 0.0);
        let unit = EmpiricalCloud::from_matrix(&x).unwrap();
        assert_eq!(w2_to_dirac(&unit), 1.0);

        let mut noise = NoiseStream::new(4, 0);
        let cloud = random_cloud(&mut noise, 0, 25, 3);
        let origin = EmpiricalCloud::new(vec![0.0; 75], 3).unwrap();
        let exact = w2_empirical_exact(&cloud, &origin).unwrap().w2();
        assert!((w2_to_dirac(&cloud) - exact).abs() < 1e-12);
    }

    #[test]
    fn dirac_of_deviations_matches_energy() {
        let mut noise = NoiseStream::new(9, 0);
        let mut buf = vec![0.0; 8 * 3];
        noise.fill_normals(0, &mut buf);
        let x = DMatrix::from_row_slice(8, 3, &buf);
        let mean = x.row_mean();
        let dev = DMatrix::from_fn(8, 3, |i, j| x[(i, j)] - mean[j]);
        let w = w2_to_dirac(&EmpiricalCloud::from_matrix(&dev).unwrap());
        assert!((w * w * 8.0 - consensus_energy(&x)).abs() < 1e-12);
    }

    #[test]
    fn csv_and_plan_io() {
        let cloud = EmpiricalCloud::new(vec![1.0, 2.5, -3.0, 0.125], 2).unwrap();
        let mut out = Vec::new();
        cloud.write_csv(&mut out).unwrap();
        let back = EmpiricalCloud::read_csv(out.as_slice()).unwrap();
        assert_eq!(back, cloud);
        assert!(EmpiricalCloud::read_csv("1,2\n3\n".as_bytes()).is_err());
        let plan = TransportPlan { assignment: vec![1, 0], cost: 0.5 };
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<TransportPlan>(&json).unwrap(), plan);
    }
}
