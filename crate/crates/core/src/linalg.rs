//! Dense row-major matrices plus the two solvers the engine needs:
//! a cyclic Jacobi eigendecomposition for symmetric matrices and a
//! minimum-norm least-squares solver built on top of it.

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `selfᵀ * other`, without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self[(k, i)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `self * v`
    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mat_vec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ * v`
    pub fn t_mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_mat_vec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += self[(i, j)] * vi;
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix: `a = V diag(values) Vᵀ`.
///
/// Eigenvalues are sorted descending; eigenvectors are the columns of
/// `vectors` in matching order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition for symmetric matrices.
///
/// Fine at desk scale (N up to a couple thousand); the contract is the
/// self-consistency it delivers, `‖Av − λv‖∞` at machine-level precision.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.cols() });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric eigendecomposition input".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = if norm > 0.0 { norm * 1e-15 } else { 0.0 };

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of m.
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m[(k, p)];
                        let akq = m[(k, q)];
                        m[(k, p)] = c * akp - s * akq;
                        m[(p, k)] = m[(k, p)];
                        m[(k, q)] = s * akp + c * akq;
                        m[(q, k)] = m[(k, q)];
                    }
                }
                m[(p, p)] = app - t * apq;
                m[(q, q)] = aqq + t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                // Accumulate the rotation into the eigenvector matrix.
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, new_j)] = v[(i, old_j)];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Least-squares solution together with the numerical rank the solver saw.
#[derive(Debug, Clone)]
pub struct Lstsq {
    pub beta: Vec<f64>,
    pub rank: usize,
}

impl Lstsq {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.beta.len()
    }
}

/// Minimum-norm least-squares solution of `x β ≈ y`.
///
/// Solves via the eigendecomposition of the Gram matrix `xᵀx`,
/// dropping directions with eigenvalues below `1e-10` of the largest, so
/// rank-deficient systems yield the minimum-norm solution instead of failing.
pub fn lstsq_min_norm(x: &Matrix, y: &[f64]) -> Result<Lstsq> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.rows(), got: y.len() });
    }
    let gram = x.t_matmul(x);
    let xty = x.t_mat_vec(y);
    let eig = sym_eigen(&gram)?;
    let lam_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = lam_max * 1e-10;
    let k = x.cols();
    let mut beta = vec![0.0; k];
    let mut rank = 0;
    for (j, &lam) in eig.values.iter().enumerate() {
        if lam <= cutoff || lam <= 0.0 {
            continue;
        }
        rank += 1;
        let vj = eig.vectors.col(j);
        let proj: f64 = vj.iter().zip(&xty).map(|(a, b)| a * b).sum();
        let scale = proj / lam;
        for (b, vji) in beta.iter_mut().zip(&vj) {
            *b += scale * vji;
        }
    }
    Ok(Lstsq { beta, rank })
}

/// Orthonormal basis of the column space via modified Gram-Schmidt.
/// Columns with norm below `1e-12` of the largest are dropped.
pub fn orthonormal_columns(a: &Matrix) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for j in 0..a.cols() {
        let mut v = a.col(j);
        for q in &cols {
            let proj = dot(q, &v);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= proj * qi;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 * scale {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            cols.push(v);
        }
    }
    let mut out = Matrix::zeros(a.rows(), cols.len());
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// Largest principal angle (degrees) between the column spaces of `a` and
/// `b`. Both are orthonormalized first; the angle comes from the smallest
/// singular value of `Q_aᵀ Q_b`.
pub fn largest_principal_angle_deg(a: &Matrix, b: &Matrix) -> Result<f64> {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    if qa.cols() != qb.cols() || qa.cols() == 0 {
        return Err(Error::DimensionMismatch { expected: qa.cols(), got: qb.cols() });
    }
    let m = qa.t_matmul(&qb);
    let gram = m.t_matmul(&m);
    let eig = sym_eigen(&gram)?;
    let min_sq = eig.values.last().copied().unwrap_or(0.0).clamp(0.0, 1.0);
    Ok(min_sq.sqrt().clamp(0.0, 1.0).acos().to_degrees())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with divisor `n-1`.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Population standard deviation with divisor `n`.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mu = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    (ss / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.gen_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn eigen_2x2_closed_form() {
        // [[1, rho], [rho, 1]] has eigenvalues 1±rho with vectors (1,±1)/√2.
        let rho = 0.37;
        let a = Matrix::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]);
        let eig = sym_eigen(&a).unwrap();
        assert!((eig.values[0] - (1.0 + rho)).abs() <= 1e-12);
        assert!((eig.values[1] - (1.0 - rho)).abs() <= 1e-12);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            assert!((eig.vectors[(i, 0)].abs() - inv_sqrt2).abs() <= 1e-12);
            assert!((eig.vectors[(i, 1)].abs() - inv_sqrt2).abs() <= 1e-12);
        }
    }

    #[test]
    fn eigen_self_consistency_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_symmetric(12, &mut rng);
            let eig = sym_eigen(&a).unwrap();
            let n = 12;
            // A v = λ v
            for j in 0..n {
                let v = eig.vectors.col(j);
                let av = a.mat_vec(&v);
                for i in 0..n {
                    assert!(
                        (av[i] - eig.values[j] * v[i]).abs() <= 1e-9,
                        "eigenpair residual too large"
                    );
                }
            }
            // Orthonormality
            for j in 0..n {
                for k in j..n {
                    let d = dot(&eig.vectors.col(j), &eig.vectors.col(k));
                    let expect = if j == k { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() <= 1e-9);
                }
            }
            // Trace preservation
            let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
            let sum: f64 = eig.values.iter().sum();
            assert!((trace - sum).abs() <= 1e-9);
            // Descending order
            for j in 1..n {
                assert!(eig.values[j - 1] >= eig.values[j] - 1e-12);
            }
        }
    }

    /// Gaussian elimination with partial pivoting; independent oracle for
    /// the full-rank least-squares path.
    fn solve_gaussian(a: &Matrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut m = a.clone();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if m[(r, col)].abs() > m[(piv, col)].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..n {
                    let tmp = m[(col, j)];
                    m[(col, j)] = m[(piv, j)];
                    m[(piv, j)] = tmp;
                }
                rhs.swap(col, piv);
            }
            let d = m[(col, col)];
            for r in (col + 1)..n {
                let f = m[(r, col)] / d;
                for j in col..n {
                    let v = m[(col, j)];
                    m[(r, j)] -= f * v;
                }
                rhs[r] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in (i + 1)..n {
                s -= m[(i, j)] * x[j];
            }
            x[i] = s / m[(i, i)];
        }
        x
    }

    #[test]
    fn lstsq_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let t = 60;
            let k = 5;
            let mut x = Matrix::zeros(t, k);
            for i in 0..t {
                for j in 0..k {
                    x[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let y: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let beta = lstsq_min_norm(&x, &y).unwrap().beta;
            let oracle = solve_gaussian(&x.t_matmul(&x), &x.t_mat_vec(&y));
            for j in 0..k {
                assert!((beta[j] - oracle[j]).abs() <= 1e-8, "beta mismatch vs oracle");
            }
        }
    }

    #[test]
    fn lstsq_min_norm_on_duplicated_column() {
        // x has two identical columns; the minimum-norm solution splits the
        // coefficient evenly between them.
        let t = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = Matrix::zeros(t, 2);
        for i in 0..t {
            x[(i, 0)] = c[i];
            x[(i, 1)] = c[i];
        }
        let beta = lstsq_min_norm(&x, &c).unwrap().beta;
        assert!((beta[0] - 0.5).abs() <= 1e-9);
        assert!((beta[1] - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn lstsq_zero_design_gives_zero_beta() {
        let x = Matrix::zeros(10, 3);
        let y = vec![1.0; 10];
        let beta = lstsq_min_norm(&x, &y).unwrap().beta;
        assert_eq!(beta, vec![0.0; 3]);
    }
}
