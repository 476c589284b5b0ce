use super::Matrix;
use crate::error::{Error, Result};

/// Rotations are skipped once `|⟨a_p, a_q⟩| ≤ TOL · ‖a_p‖‖a_q‖` for every pair.
const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// Thin factorization `m ≈ u · diag(sigma) · vt` keeping the leading `k`
/// components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.mul_unchecked(&self.vt)
    }
}

/// Full decomposition of a matrix with `rows ≥ cols` by Hestenes' one-sided
/// Jacobi method. Returns `(sigma, left, right)` sorted by decreasing sigma;
/// left vectors belonging to zero singular values are zero.
fn jacobi_tall(a: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma = order.iter().map(|&j| norms[j]).collect();
    let left = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            if s > 0.0 {
                cols[j].iter().map(|x| x / s).collect()
            } else {
                vec![0.0; m]
            }
        })
        .collect();
    let right = order.iter().map(|&j| v[j].clone()).collect();
    (sigma, left, right)
}

fn rotate(vectors: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vectors.split_at_mut(q);
    let (vp, vq) = (&mut head[p], &mut tail[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Decomposition of any shape; returns `(sigma, left, right)` with left
/// vectors of length `rows` and right vectors of length `cols`.
fn jacobi_any(a: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let (sigma, left, right) = jacobi_tall(&a.transpose());
        (sigma, right, left)
    }
}

pub(super) fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    Ok(jacobi_any(a).0)
}

pub(super) fn count_above_tolerance(sigma: &[f64], max_dim: usize) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    let tol = max_dim as f64 * f64::EPSILON * top;
    sigma.iter().take_while(|&&s| s > tol).count()
}

/// Best rank-`r` approximation of `m` in Frobenius norm.
///
/// Keeps `k = min(r, numerical rank)` components; the zero matrix yields a
/// single zero component so the factors are never empty. Each left singular
/// vector is signed so that its largest-magnitude entry is positive, which
/// makes the factors reproducible bit for bit.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::Dimension(format!(
            "rank {r} out of range for {rows}x{cols} matrix"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }

    let (sigma, left, right) = jacobi_any(m);
    let k = count_above_tolerance(&sigma, rows.max(cols)).min(r);

    if k == 0 {
        let mut u = Matrix::zeros(rows, 1);
        u[(0, 0)] = 1.0;
        let mut vt = Matrix::zeros(1, cols);
        vt[(0, 0)] = 1.0;
        return Ok(SvdResult {
            u,
            sigma: vec![0.0],
            vt,
        });
    }

    let mut u = Matrix::zeros(rows, k);
    let mut vt = Matrix::zeros(k, cols);
    for j in 0..k {
        let lead = left[j]
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(bi, bv), (i, &x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        let sign = if left[j][lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[(i, j)] = sign * left[j][i];
        }
        for i in 0..cols {
            vt[(j, i)] = sign * right[j][i];
        }
    }
    Ok(SvdResult {
        u,
        sigma: sigma[..k].to_vec(),
        vt,
    })
}
