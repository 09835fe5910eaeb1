//! Generic unscented Kalman filter on dynamically sized vectors.
//!
//! Angular components (listed by index) are averaged on the circle and their
//! residuals are taken along the shortest arc, so a state or measurement may mix
//! linear and angular coordinates.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, wrap_angle};

/// Diagonal jitter added to a covariance whose Cholesky factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-9;
/// Number of jitter attempts before giving up.
pub const CHOLESKY_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UkfError {
    #[error("covariance is not positive semidefinite (Cholesky failed after jitter)")]
    CovarianceNotPsd,
    #[error("innovation covariance is singular")]
    SingularInnovation,
}

/// Scaled unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    /// Spread factor `sqrt(n + λ)`.
    pub spread: f64,
}

impl SigmaParams {
    pub fn weights(&self, n: usize) -> SigmaWeights {
        let nf = n as f64;
        let lambda = self.alpha * self.alpha * (nf + self.kappa) - nf;
        let c = nf + lambda;
        let wi = 1.0 / (2.0 * c);
        let w0 = lambda / c;
        let mut mean = vec![wi; 2 * n + 1];
        mean[0] = w0;
        let mut cov = mean.clone();
        cov[0] = w0 + (1.0 - self.alpha * self.alpha + self.beta);
        SigmaWeights {
            mean,
            cov,
            spread: c.sqrt(),
        }
    }
}

/// Lower Cholesky factor of `p`, retrying with diagonal jitter.
pub fn robust_cholesky(p: &DMatrix<f64>) -> Result<DMatrix<f64>, UkfError> {
    let n = p.nrows();
    let mut m = p.clone();
    for attempt in 0..=CHOLESKY_RETRIES {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(c.l());
        }
        if attempt < CHOLESKY_RETRIES {
            m += DMatrix::identity(n, n) * CHOLESKY_JITTER;
        }
    }
    Err(UkfError::CovarianceNotPsd)
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// `2n + 1` symmetric sigma points around `mean`.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, w: &SigmaWeights) -> Result<Vec<DVector<f64>>, UkfError> {
    let n = mean.len();
    let l = robust_cholesky(cov)? * w.spread;
    let mut pts = Vec::with_capacity(2 * n + 1);
    pts.push(mean.clone());
    for i in 0..n {
        pts.push(mean + l.column(i));
    }
    for i in 0..n {
        pts.push(mean - l.column(i));
    }
    Ok(pts)
}

/// Weighted mean respecting angular components.
pub fn weighted_mean(points: &[DVector<f64>], weights: &[f64], angles: &[usize]) -> DVector<f64> {
    let n = points[0].len();
    let mut m = DVector::zeros(n);
    for (p, w) in points.iter().zip(weights) {
        m.axpy(*w, p, 1.0);
    }
    for &k in angles {
        let (s, c) = points
            .iter()
            .zip(weights)
            .fold((0.0, 0.0), |(s, c), (p, w)| (s + w * p[k].sin(), c + w * p[k].cos()));
        m[k] = s.atan2(c);
    }
    m
}

/// `a - b` with shortest-arc differences on angular components.
pub fn residual(a: &DVector<f64>, b: &DVector<f64>, angles: &[usize]) -> DVector<f64> {
    let mut r = a - b;
    for &k in angles {
        r[k] = angle_diff(a[k], b[k]);
    }
    r
}

/// Filter mean and covariance with the angular layout of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ukf {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub params: SigmaParams,
    pub state_angles: Vec<usize>,
}

impl Ukf {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, params: SigmaParams, state_angles: Vec<usize>) -> Self {
        Self {
            x,
            p,
            params,
            state_angles,
        }
    }

    /// Propagates the sigma points through `f` and adds process noise `q`.
    pub fn predict<F>(&mut self, f: F, q: &DMatrix<f64>) -> Result<(), UkfError>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let n = self.x.len();
        let w = self.params.weights(n);
        let pts = sigma_points(&self.x, &self.p, &w)?;
        let prop: Vec<DVector<f64>> = pts.iter().map(&f).collect();
        let mean = weighted_mean(&prop, &w.mean, &self.state_angles);
        let mut cov = q.clone();
        for (p, wc) in prop.iter().zip(&w.cov) {
            let d = residual(p, &mean, &self.state_angles);
            cov.ger(*wc, &d, &d, 1.0);
        }
        symmetrize(&mut cov);
        self.x = mean;
        self.p = cov;
        Ok(())
    }

    /// Standard unscented measurement update.
    pub fn update<H>(&mut self, z: &DVector<f64>, h: H, r: &DMatrix<f64>, meas_angles: &[usize]) -> Result<(), UkfError>
    where
        H: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let n = self.x.len();
        let w = self.params.weights(n);
        let pts = sigma_points(&self.x, &self.p, &w)?;
        let zs: Vec<DVector<f64>> = pts.iter().map(&h).collect();
        let z_mean = weighted_mean(&zs, &w.mean, meas_angles);
        let m = z.len();
        let mut s = r.clone();
        let mut pxz = DMatrix::zeros(n, m);
        for ((zp, xp), wc) in zs.iter().zip(&pts).zip(&w.cov) {
            let dz = residual(zp, &z_mean, meas_angles);
            let dx = residual(xp, &self.x, &self.state_angles);
            s.ger(*wc, &dz, &dz, 1.0);
            pxz.ger(*wc, &dx, &dz, 1.0);
        }
        symmetrize(&mut s);
        let s_inv = Cholesky::new(s.clone())
            .map(|c| c.inverse())
            .or_else(|| s.clone().try_inverse())
            .ok_or(UkfError::SingularInnovation)?;
        let k = &pxz * s_inv;
        let innov = residual(z, &z_mean, meas_angles);
        self.x += &k * innov;
        for &i in &self.state_angles {
            self.x[i] = wrap_angle(self.x[i]);
        }
        self.p -= &k * s * k.transpose();
        symmetrize(&mut self.p);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mean_weights_sum_to_one(alpha in 1e-3..1.0f64, beta in 0.0..4.0f64, kappa in 0.0..3.0f64, n in 1usize..15) {
            let w = SigmaParams { alpha, beta, kappa }.weights(n);
            let s: f64 = w.mean.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn sigma_points_reproduce_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let w = SigmaParams::default().weights(3);
        let pts = sigma_points(&mean, &cov, &w).unwrap();
        let m = weighted_mean(&pts, &w.mean, &[]);
        assert!((m - &mean).amax() < 1e-9);
        let mut c = DMatrix::zeros(3, 3);
        for (p, wc) in pts.iter().zip(&w.mean) {
            let d = p - &mean;
            c += d.clone() * d.transpose() * *wc;
        }
        assert!((c - cov).amax() < 1e-9);
    }

    #[test]
    fn not_psd_is_reported() {
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let w = SigmaParams::default().weights(2);
        assert_eq!(sigma_points(&mean, &cov, &w).unwrap_err(), UkfError::CovarianceNotPsd);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let cov = DMatrix::zeros(3, 3);
        assert!(robust_cholesky(&cov).is_ok());
    }

    #[test]
    fn angular_mean_wraps() {
        let pts = vec![DVector::from_vec(vec![3.1]), DVector::from_vec(vec![-3.1])];
        let m = weighted_mean(&pts, &[0.5, 0.5], &[0]);
        assert!((m[0].abs() - std::f64::consts::PI).abs() < 1e-9);
        let r = residual(&pts[0], &pts[1], &[0]);
        assert!((r[0] - (6.2 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }
}
