//! Dense symmetric matrices and a Lanczos solver for the top eigenpair.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::rng::stream_rng;

/// Dense symmetric matrix stored in full row-major form.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds the matrix from its upper triangle (`i <= j`).
    pub fn from_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds the matrix from whole upper-triangle rows (row `i` holds columns `i..n`).
    pub fn from_upper_rows(n: usize, rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut m = Self::zeros(n);
        for (i, row) in rows.into_iter().enumerate() {
            assert_eq!(row.len(), n - i);
            for (k, v) in row.into_iter().enumerate() {
                m.set(i, i + k, v);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        Self {
            n: self.n,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean over all ordered pairs `(i, j)`.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / (self.n * self.n) as f64
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// `out = A x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(out.len(), self.n);
        out.par_iter_mut()
            .enumerate()
            .with_min_len(64)
            .for_each(|(i, o)| {
                *o = dot(self.row(i), x);
            });
    }

    /// `Σ_{i<=j} A_ij x_i x_j`.
    pub fn upper_quadratic_form(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.matvec(x, &mut ax);
        let full = dot(x, &ax);
        let diag: f64 = (0..self.n).map(|i| self.get(i, i) * x[i] * x[i]).sum();
        0.5 * (full + diag)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: f64,
    /// Unit-norm eigenvector.
    pub vector: Vec<f64>,
    /// `‖A v − θ v‖`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct LanczosOptions {
    pub max_steps: usize,
    /// Convergence when the Ritz residual is below `tol · max(1, |θ|)`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            max_steps: 400,
            tol: 1e-9,
            seed: 0x1a2c_2050,
        }
    }
}

/// Largest algebraic eigenpair of the symmetric operator `apply` (full
/// reorthogonalization).
pub fn top_eigenpair(
    n: usize,
    apply: impl Fn(&[f64], &mut [f64]),
    opts: &LanczosOptions,
) -> Eigenpair {
    let max_steps = opts.max_steps.min(n).max(1);
    let mut rng = stream_rng(opts.seed, 0);
    let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let qn = norm(&q);
    q.iter_mut().for_each(|v| *v /= qn);

    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, f64)> = None;

    for j in 0..max_steps {
        apply(&basis[j], &mut w);
        let a = dot(&basis[j], &w);
        alpha.push(a);
        for (wi, qi) in w.iter_mut().zip(&basis[j]) {
            *wi -= a * qi;
        }
        if j > 0 {
            let b = beta[j - 1];
            for (wi, qi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b * qi;
            }
        }
        for _ in 0..2 {
            for qk in &basis {
                let c = dot(qk, &w);
                for (wi, qi) in w.iter_mut().zip(qk) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        let m = j + 1;
        let check = m == max_steps || b < 1e-12 || m % 10 == 0 || m < 10 && m == n;
        if check {
            let (theta, s) = top_ritz(&alpha, &beta);
            let ritz_res = b * s[m - 1].abs();
            best = Some((theta, s, ritz_res));
            if ritz_res <= opts.tol * theta.abs().max(1.0) || b < 1e-12 || m == max_steps {
                break;
            }
        }
        beta.push(b);
        basis.push(w.iter().map(|v| v / b).collect());
    }

    let (theta, s, _) = best.expect("at least one Ritz check");
    let mut v = vec![0.0; n];
    for (sk, qk) in s.iter().zip(&basis) {
        for (vi, qi) in v.iter_mut().zip(qk) {
            *vi += sk * qi;
        }
    }
    let vn = norm(&v);
    v.iter_mut().for_each(|x| *x /= vn);
    apply(&v, &mut w);
    let residual = w
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - theta * b).powi(2))
        .sum::<f64>()
        .sqrt();
    Eigenpair {
        value: theta,
        converged: residual <= 1e3 * opts.tol * theta.abs().max(1.0),
        vector: v,
        residual,
        iterations: alpha.len(),
    }
}

fn top_ritz(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let (idx, &theta) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    (
        theta,
        eig.eigenvectors.column(idx).iter().copied().collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_quadratic_form_counts_pairs_once() {
        let a = SymMatrix::from_upper(3, |i, j| (1 + i + 2 * j) as f64);
        let x = [1.0, -2.0, 0.5];
        let mut direct = 0.0;
        for i in 0..3 {
            for j in i..3 {
                direct += a.get(i, j) * x[i] * x[j];
            }
        }
        assert!((a.upper_quadratic_form(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn lanczos_matches_dense_eigensolver() {
        let mut rng = stream_rng(3, 0);
        let n = 60;
        let a = SymMatrix::from_upper(n, |_, _| StandardNormal.sample(&mut rng));
        let dense = SymmetricEigen::new(a.to_dmatrix());
        let (idx, &top) = dense
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        let ep = top_eigenpair(n, |x, y| a.matvec(x, y), &LanczosOptions::default());
        assert!((ep.value - top).abs() < 1e-8, "{} {}", ep.value, top);
        let u = dense.eigenvectors.column(idx);
        let overlap: f64 = u.iter().zip(&ep.vector).map(|(a, b)| a * b).sum();
        assert!((overlap.abs() - 1.0).abs() < 1e-8);
        assert!(ep.converged);
    }
}
