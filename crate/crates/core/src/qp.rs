//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ xᵀHx + gᵀx` subject to `A x ≤ b` and optional bounds
//! `lower ≤ x ≤ upper`, with `H` symmetric positive definite. The iteration
//! starts from the unconstrained minimizer and adds the most violated row at
//! each step (ties to the lowest index), so problems whose unconstrained
//! minimum is feasible return after a single scan.
//!
//! Row indices in [`QpSolution::active`] and [`QpError::Infeasible`] number the
//! general rows `0..m`, then upper bounds `m..m+n`, then lower bounds
//! `m+n..m+2n`.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    /// `min ½‖x − target‖²` subject to `A x ≤ b`.
    pub fn projection(target: &DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let n = target.len();
        Self {
            h: DMatrix::identity(n, n),
            g: -target,
            a,
            b,
            lower: None,
            upper: None,
        }
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Active rows at the solution, in the order they were added.
    pub active: Vec<usize>,
    /// Multipliers of `active`, all non-negative.
    pub multipliers: Vec<f64>,
    /// `b − A x` for the general rows.
    pub slack: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Infinity norm of `Hx + g + Σ λ_k a_k` at the returned point.
    pub stationarity: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("problem dimensions are inconsistent: {0}")]
    Dimension(&'static str),
    #[error("constraints are infeasible; conflicting rows {violated:?}")]
    Infeasible { violated: Vec<usize> },
    #[error("iteration limit reached after {0} iterations")]
    IterationLimit(usize),
}

const FEAS_TOL: f64 = 1e-10;
const ZERO_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy)]
enum Row {
    General(usize),
    Upper(usize),
    Lower(usize),
}

struct Rows<'a> {
    p: &'a QpProblem,
    m: usize,
    n: usize,
}

impl<'a> Rows<'a> {
    fn row(&self, k: usize) -> Row {
        if k < self.m {
            Row::General(k)
        } else if k < self.m + self.n {
            Row::Upper(k - self.m)
        } else {
            Row::Lower(k - self.m - self.n)
        }
    }

    fn count(&self) -> usize {
        self.m + 2 * self.n
    }

    fn present(&self, k: usize) -> bool {
        match self.row(k) {
            Row::General(_) => true,
            Row::Upper(i) => self.p.upper.as_ref().is_some_and(|u| u[i].is_finite()),
            Row::Lower(i) => self.p.lower.as_ref().is_some_and(|l| l[i].is_finite()),
        }
    }

    fn rhs(&self, k: usize) -> f64 {
        match self.row(k) {
            Row::General(i) => self.p.b[i],
            Row::Upper(i) => self.p.upper.as_ref().unwrap()[i],
            Row::Lower(i) => -self.p.lower.as_ref().unwrap()[i],
        }
    }

    fn dot(&self, k: usize, x: &[f64]) -> f64 {
        match self.row(k) {
            Row::General(i) => (0..self.n).map(|j| self.p.a[(i, j)] * x[j]).sum(),
            Row::Upper(i) => x[i],
            Row::Lower(i) => -x[i],
        }
    }

    /// `b_k − a_k·x`.
    fn slack(&self, k: usize, x: &[f64]) -> f64 {
        self.rhs(k) - self.dot(k, x)
    }

    fn dense(&self, k: usize) -> Vec<f64> {
        match self.row(k) {
            Row::General(i) => (0..self.n).map(|j| self.p.a[(i, j)]).collect(),
            Row::Upper(i) | Row::Lower(i) => {
                let mut v = vec![0.0; self.n];
                v[i] = if matches!(self.row(k), Row::Upper(_)) {
                    1.0
                } else {
                    -1.0
                };
                v
            }
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    (0..n).map(|i| (0..v.len()).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(p: &QpProblem) -> Result<(), QpError> {
    let n = p.n();
    if p.h.nrows() != n || p.h.ncols() != n {
        return Err(QpError::Dimension("H must be n×n"));
    }
    if p.a.ncols() != n && p.a.nrows() > 0 {
        return Err(QpError::Dimension("A must have n columns"));
    }
    if p.b.len() != p.a.nrows() {
        return Err(QpError::Dimension("b must have one entry per row of A"));
    }
    if p.lower.as_ref().is_some_and(|l| l.len() != n) || p.upper.as_ref().is_some_and(|u| u.len() != n) {
        return Err(QpError::Dimension("bounds must have n entries"));
    }
    Ok(())
}

/// Solves the QP; see the module documentation for conventions.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    check_dims(p)?;
    let n = p.n();
    let rows = Rows { p, m: p.m(), n };
    let h_inv = Cholesky::new(p.h.clone())
        .ok_or(QpError::NotPositiveDefinite)?
        .inverse();

    let mut x: Vec<f64> = mat_vec(&h_inv, p.g.as_slice()).into_iter().map(|v| -v).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut normals: Vec<Vec<f64>> = Vec::new();
    // H⁻¹ a_k for each active row.
    let mut hn: Vec<Vec<f64>> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();

    let max_iter = 10 * (rows.count() + n) + 50;
    let mut iterations = 0;

    loop {
        // Most violated row, lowest index on ties.
        let mut pick: Option<(usize, f64)> = None;
        for k in 0..rows.count() {
            if !rows.present(k) || active.contains(&k) {
                continue;
            }
            let s = rows.slack(k, &x);
            if s < -FEAS_TOL * (1.0 + rows.rhs(k).abs()) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((k, s));
            }
        }
        let Some((kp, _)) = pick else { break };

        let np: Vec<f64> = rows.dense(kp).into_iter().map(|v| -v).collect();
        let hnp = mat_vec(&h_inv, &np);
        let mut lp = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit(iterations));
            }
            // r = M⁻¹ Nᵀ H⁻¹ n⁺ with M = Nᵀ H⁻¹ N, z = H⁻¹ n⁺ − (H⁻¹N) r.
            let q = active.len();
            let r: Vec<f64> = if q == 0 {
                Vec::new()
            } else {
                let m = DMatrix::from_fn(q, q, |i, j| dot(&normals[i], &hn[j]));
                let rhs = DVector::from_fn(q, |i, _| dot(&hn[i], &np));
                let sol = match Cholesky::new(m.clone()) {
                    Some(c) => c.solve(&rhs),
                    None => m.lu().solve(&rhs).ok_or(QpError::Infeasible {
                        violated: with(&active, kp),
                    })?,
                };
                sol.iter().copied().collect()
            };
            let mut z = hnp.clone();
            for (j, rj) in r.iter().enumerate() {
                for i in 0..n {
                    z[i] -= rj * hn[j][i];
                }
            }
            let znp = dot(&z, &np);
            let z_is_zero = znp.abs() <= ZERO_TOL * (1.0 + dot(&np, &np));

            // Dual step length: the first active multiplier driven to zero.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > ZERO_TOL {
                    let t = lambda[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(j);
                    }
                }
            }
            let t2 = if z_is_zero {
                f64::INFINITY
            } else {
                -rows.slack(kp, &x) / znp
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible {
                    violated: with(&active, kp),
                });
            }
            let t = t1.min(t2);
            if !z_is_zero {
                for i in 0..n {
                    x[i] += t * z[i];
                }
            }
            for (l, rj) in lambda.iter_mut().zip(&r) {
                *l -= t * rj;
            }
            lp += t;
            if t2 <= t1 {
                active.push(kp);
                normals.push(np);
                hn.push(hnp);
                lambda.push(lp);
                break;
            }
            let j = drop_at.expect("finite dual step has a blocking row");
            active.remove(j);
            normals.remove(j);
            hn.remove(j);
            lambda.remove(j);
        }
    }

    for l in lambda.iter_mut() {
        *l = l.max(0.0);
    }
    let xv = DVector::from_vec(x);
    let slack = &p.b - &p.a * &xv;
    let mut grad = &p.h * &xv + &p.g;
    for (k, l) in active.iter().zip(&lambda) {
        let a = rows.dense(*k);
        for i in 0..n {
            grad[i] += l * a[i];
        }
    }
    Ok(QpSolution {
        objective: p.objective(&xv),
        x: xv,
        active,
        multipliers: lambda,
        slack,
        iterations,
        stationarity: grad.amax(),
    })
}

fn with(active: &[usize], k: usize) -> Vec<usize> {
    let mut v = active.to_vec();
    v.push(k);
    v.sort_unstable();
    v
}
