//! Fixed-capacity vectors and matrices for dimensions up to [`MAX_DIM`].
//!
//! Every kernel evaluation touches a handful of `d×d` matrices, so these
//! types live on the stack and carry their runtime dimension alongside an
//! array sized for the largest supported case.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::scalar::Real;

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vector<S> {
    pub dim: usize,
    pub c: [S; MAX_DIM],
}

impl<S: Real> Vector<S> {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} unsupported");
        Self { dim, c: [S::zero(); MAX_DIM] }
    }

    pub fn from_slice(v: &[S]) -> Self {
        let mut out = Self::zeros(v.len());
        out.c[..v.len()].copy_from_slice(v);
        out
    }

    pub fn from_f64(v: &[f64]) -> Self {
        let mut out = Self::zeros(v.len());
        for (o, x) in out.c.iter_mut().zip(v) {
            *o = S::lit(*x);
        }
        out
    }

    pub fn as_slice(&self) -> &[S] {
        &self.c[..self.dim]
    }

    pub fn dot(&self, o: &Self) -> S {
        (0..self.dim).fold(S::zero(), |acc, i| acc + self.c[i] * o.c[i])
    }

    pub fn norm2(&self) -> S {
        self.dot(self)
    }

    pub fn norm(&self) -> S {
        self.norm2().sqrt()
    }

    pub fn scale(&self, s: S) -> Self {
        let mut out = *self;
        for i in 0..self.dim {
            out.c[i] = out.c[i] * s;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0, |m, x| m.max(x.size()))
    }

    /// Lifts an `f64` vector into this scalar type.
    pub fn lift(v: &Vector<f64>) -> Self {
        Self::from_f64(v.as_slice())
    }

    pub fn re(&self) -> Vector<f64> {
        let mut out = Vector::<f64>::zeros(self.dim);
        for i in 0..self.dim {
            out.c[i] = self.c[i].re();
        }
        out
    }
}

impl<S> Index<usize> for Vector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.c[i]
    }
}

impl<S> IndexMut<usize> for Vector<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        &mut self.c[i]
    }
}

impl<S: Real> Add for Vector<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut out = self;
        for i in 0..self.dim {
            out.c[i] = self.c[i] + o.c[i];
        }
        out
    }
}

impl<S: Real> Sub for Vector<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut out = self;
        for i in 0..self.dim {
            out.c[i] = self.c[i] - o.c[i];
        }
        out
    }
}

impl<S: Real> Neg for Vector<S> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-S::one())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix<S> {
    pub dim: usize,
    pub m: [[S; MAX_DIM]; MAX_DIM],
}

impl<S: Real> Matrix<S> {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} unsupported");
        Self { dim, m: [[S::zero(); MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, S::one())
    }

    pub fn scalar(dim: usize, s: S) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            out.m[i][i] = s;
        }
        out
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let mut out = Self::zeros(rows.len());
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), rows.len(), "matrix must be square");
            for (j, v) in row.iter().enumerate() {
                out.m[i][j] = S::lit(*v);
            }
        }
        out
    }

    pub fn lift(a: &Matrix<f64>) -> Self {
        let mut out = Self::zeros(a.dim);
        for i in 0..a.dim {
            for j in 0..a.dim {
                out.m[i][j] = S::lit(a.m[i][j]);
            }
        }
        out
    }

    pub fn re(&self) -> Matrix<f64> {
        let mut out = Matrix::<f64>::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = self.m[i][j].re();
            }
        }
        out
    }

    pub fn symmetric_part(&self) -> Self {
        let half = S::lit(0.5);
        let mut out = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = half * (self.m[i][j] + self.m[j][i]);
            }
        }
        out
    }

    pub fn scale(&self, s: S) -> Self {
        let mut out = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = out.m[i][j] * s;
            }
        }
        out
    }

    pub fn det(&self) -> S {
        let m = &self.m;
        match self.dim {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        }
    }

    /// Inverse by cofactors; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.re() == 0.0 || !det.is_finite() {
            return None;
        }
        let m = &self.m;
        let mut out = Self::zeros(self.dim);
        match self.dim {
            1 => out.m[0][0] = det.recip(),
            2 => {
                out.m[0][0] = m[1][1] / det;
                out.m[0][1] = -m[0][1] / det;
                out.m[1][0] = -m[1][0] / det;
                out.m[1][1] = m[0][0] / det;
            }
            _ => {
                for i in 0..3 {
                    for j in 0..3 {
                        let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                        let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                        out.m[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
                    }
                }
            }
        }
        Some(out)
    }

    pub fn mul_vec(&self, v: &Vector<S>) -> Vector<S> {
        let mut out = Vector::zeros(self.dim);
        for i in 0..self.dim {
            out.c[i] = (0..self.dim).fold(S::zero(), |acc, j| acc + self.m[i][j] * v.c[j]);
        }
        out
    }

    pub fn quad_form(&self, v: &Vector<S>) -> S {
        v.dot(&self.mul_vec(v))
    }

    /// `Σ_ij a_ij b_ji`, i.e. `Trace[a·b]`.
    pub fn trace_product(&self, b: &Self) -> S {
        let mut acc = S::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc = acc + self.m[i][j] * b.m[j][i];
            }
        }
        acc
    }

    /// Entrywise sup norm.
    pub fn max_abs(&self) -> f64 {
        let mut acc = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc = acc.max(self.m[i][j].size());
            }
        }
        acc
    }
}

impl Matrix<f64> {
    /// Eigenvalues of the symmetric part, ascending (cyclic Jacobi).
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        let mut a = self.symmetric_part();
        let n = self.dim;
        for _ in 0..50 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a.m[p][q] * a.m[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a.m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.m[q][q] - a.m[p][p]) / (2.0 * a.m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.m[k][p];
                        let akq = a.m[k][q];
                        a.m[k][p] = c * akp - s * akq;
                        a.m[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a.m[p][k];
                        let aqk = a.m[q][k];
                        a.m[p][k] = c * apk - s * aqk;
                        a.m[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a.m[i][i]).collect();
        ev.sort_by(|x, y| x.total_cmp(y));
        ev
    }
}

impl<S: Real> Add for Matrix<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut out = self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = self.m[i][j] + o.m[i][j];
            }
        }
        out
    }
}

impl<S: Real> Sub for Matrix<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut out = self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = self.m[i][j] - o.m[i][j];
            }
        }
        out
    }
}

impl<S: Real> Mul for Matrix<S> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = (0..self.dim).fold(S::zero(), |acc, k| acc + self.m[i][k] * o.m[k][j]);
            }
        }
        out
    }
}

/// Rank-3 array `t[i][j][k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tensor3<S> {
    pub dim: usize,
    pub t: [[[S; MAX_DIM]; MAX_DIM]; MAX_DIM],
}

impl<S: Real> Tensor3<S> {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} unsupported");
        Self { dim, t: [[[S::zero(); MAX_DIM]; MAX_DIM]; MAX_DIM] }
    }

    pub fn max_abs(&self) -> f64 {
        let mut acc = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                for k in 0..self.dim {
                    acc = acc.max(self.t[i][j][k].size());
                }
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        for rows in [
            vec![vec![2.0]],
            vec![vec![2.0, 0.3], vec![0.1, 1.5]],
            vec![vec![2.0, 0.3, 0.1], vec![0.2, 1.5, -0.4], vec![0.0, 0.7, 3.0]],
        ] {
            let a = Matrix::<f64>::from_rows(&rows);
            let p = a * a.inverse().unwrap();
            assert!((p - Matrix::identity(a.dim)).max_abs() < 1e-14);
        }
        assert!(Matrix::<f64>::zeros(2).inverse().is_none());
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let ev = a.sym_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
        let b = Matrix::<f64>::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 2.0]]);
        let ev = b.sym_eigenvalues();
        assert!((ev.iter().sum::<f64>() - 9.0).abs() < 1e-12);
        assert!((ev.iter().product::<f64>() - b.det()).abs() < 1e-10);
    }
}
