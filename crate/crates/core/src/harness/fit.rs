//! Least-squares power-law fits on log–log axes.

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const MIN_FIT_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(k_min, k_max)` of the points actually used.
    pub window: (u64, u64),
    pub points: usize,
}

/// Fits `log v = intercept + slope log k` after dropping the first
/// `burn_in` fraction of points.
pub fn fit_rate(series: &[(u64, f64)], burn_in: f64) -> Result<RateFit, HarnessError> {
    if !(0.0..=0.9).contains(&burn_in) {
        return Err(HarnessError::Fit(format!("burn-in fraction must lie in [0, 0.9], got {burn_in}")));
    }
    let skip = (series.len() as f64 * burn_in).floor() as usize;
    fit_points(&series[skip..])
}

/// Fits over the points with `k_min <= k <= k_max`.
pub fn fit_rate_window(series: &[(u64, f64)], k_min: u64, k_max: u64) -> Result<RateFit, HarnessError> {
    let pts: Vec<(u64, f64)> = series.iter().copied().filter(|&(k, _)| k >= k_min && k <= k_max).collect();
    fit_points(&pts)
}

/// Per-step ratio `r` of a geometric decay `v_k ~ C r^k`, from a
/// least-squares line on `(k, log v)`.
pub fn fit_decay_ratio(series: &[(u64, f64)]) -> Result<f64, HarnessError> {
    if series.len() < 2 {
        return Err(HarnessError::Fit(format!("need at least 2 points, got {}", series.len())));
    }
    if let Some(&(k, v)) = series.iter().find(|&&(_, v)| !(v > 0.0) || !v.is_finite()) {
        return Err(HarnessError::Fit(format!("cannot take logs at k = {k}, value = {v}")));
    }
    let n = series.len() as f64;
    let mx = series.iter().map(|&(k, _)| k as f64).sum::<f64>() / n;
    let my = series.iter().map(|&(_, v)| v.ln()).sum::<f64>() / n;
    let sxx: f64 = series.iter().map(|&(k, _)| (k as f64 - mx).powi(2)).sum();
    let sxy: f64 = series.iter().map(|&(k, v)| (k as f64 - mx) * (v.ln() - my)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::Fit("all points share one k".into()));
    }
    Ok((sxy / sxx).exp())
}

fn fit_points(pts: &[(u64, f64)]) -> Result<RateFit, HarnessError> {
    if pts.len() < MIN_FIT_POINTS {
        return Err(HarnessError::Fit(format!("need at least {MIN_FIT_POINTS} points, got {}", pts.len())));
    }
    if let Some(&(k, v)) = pts.iter().find(|&&(k, v)| k == 0 || !(v > 0.0) || !v.is_finite()) {
        return Err(HarnessError::Fit(format!("cannot take logs at k = {k}, value = {v}")));
    }
    let xs: Vec<f64> = pts.iter().map(|&(k, _)| (k as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::Fit("all points share one k".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(RateFit { slope, intercept, r_squared, window: (pts[0].0, pts[pts.len() - 1].0), points: pts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseStream;

    #[test]
    fn exact_power_law() {
        let s: Vec<(u64, f64)> = (1..=20).map(|i| (i * 50, ((i * 50) as f64).powf(-0.5))).collect();
        let f = fit_rate(&s, 0.0).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.window, (50, 1000));
    }

    #[test]
    fn constant_series() {
        let s: Vec<(u64, f64)> = (1..=10).map(|k| (k, 2.5)).collect();
        let f = fit_rate(&s, 0.2).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert_eq!(f.points, 8);
    }

    #[test]
    fn noisy_power_law() {
        let mut z = vec![0.0; 40];
        NoiseStream::new(5, 0).fill_normals(0, &mut z);
        let s: Vec<(u64, f64)> = (0..40)
            .map(|i| {
                let k = 10f64.powf(1.0 + i as f64 / 10.0).round() as u64;
                (k, 3.0 * (k as f64).powf(-0.8) * (1.0 + 0.01 * z[i]))
            })
            .collect();
        let f = fit_rate(&s, 0.2).unwrap();
        assert!((f.slope + 0.8).abs() < 0.05);
    }

    #[test]
    fn geometric_ratio() {
        let s: Vec<(u64, f64)> = (0..30).map(|k| (k, 4.0 * 0.7f64.powi(k as i32))).collect();
        assert!((fit_decay_ratio(&s).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let s: Vec<(u64, f64)> = (1..=10).map(|k| (k, if k == 9 { 0.0 } else { 1.0 })).collect();
        assert!(fit_rate(&s, 0.0).is_err());
        assert!(fit_rate(&s[..4], 0.0).is_err());
        let w = fit_rate_window(&s, 2, 6).unwrap();
        assert_eq!(w.window, (2, 6));
    }
}
