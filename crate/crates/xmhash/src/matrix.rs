//! Dense row-major `f64` matrices and the small amount of linear algebra the
//! rest of the crate needs: products, Frobenius norms and a Cholesky solve for
//! symmetric positive-definite systems.
//!
//! Everything is plain scalar code. The systems involved are at most
//! code-length sized (k x k, k <= 64 in practice), so an O(k^3) factorization
//! is negligible next to training itself.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense matrix, row-major, 64-bit entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from a row-major array. Panics if the data length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    /// Build from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in from_rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row index {i} out of range (rows = {})", self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "row index {i} out of range (rows = {})", self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        assert!(j < self.cols, "column index {j} out of range (cols = {})", self.cols);
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert!(j < self.cols, "column index {j} out of range (cols = {})", self.cols);
        assert_eq!(values.len(), self.rows, "column length mismatch");
        for i in 0..self.rows {
            self[(i, j)] = values[i];
        }
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

    /// Standard matrix product. Panics on a dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: lhs cols ({}) != rhs rows ({})",
            self.cols, other.rows
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = out.row_mut(i);
            for (t, &lv) in lhs_row.iter().enumerate() {
                if lv == 0.0 {
                    continue;
                }
                let rhs_row = other.row(t);
                for (j, &rv) in rhs_row.iter().enumerate() {
                    out_row[j] += lv * rv;
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_nt: lhs cols ({}) != rhs cols ({})",
            self.cols, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, other.rows,
            "matmul_tn: lhs rows ({}) != rhs rows ({})",
            self.rows, other.rows
        );
        let mut out = Matrix::zeros(self.cols, other.cols);
        for t in 0..self.rows {
            let a = self.row(t);
            let b = other.row(t);
            for i in 0..self.cols {
                let av = a[i];
                if av == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (j, &bv) in b.iter().enumerate() {
                    out_row[j] += av * bv;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Solve `self * X = rhs` for symmetric positive-definite `self` via a
    /// Cholesky factorization. The caller is expected to pass a genuinely
    /// symmetric matrix (checked to 1e-10); positive definiteness is
    /// discovered during factorization and reported as a
    /// [`Error::SingularSystem`].
    pub fn solve_spd(&self, rhs: &Matrix) -> Result<Matrix> {
        assert_eq!(self.rows, self.cols, "solve_spd: matrix must be square");
        assert_eq!(
            self.rows, rhs.rows,
            "solve_spd: rhs rows ({}) != system size ({})",
            rhs.rows, self.rows
        );
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                assert!(
                    (self[(i, j)] - self[(j, i)]).abs()
                        <= 1e-10 * (1.0 + self[(i, j)].abs().max(self[(j, i)].abs())),
                    "solve_spd: matrix not symmetric at ({i},{j})"
                );
            }
        }

        // Lower-triangular Cholesky factor, stored densely.
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self[(i, j)];
                for t in 0..j {
                    sum -= l[(i, t)] * l[(j, t)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::SingularSystem { pivot: i });
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }

        // L y = rhs, then L^T x = y, one rhs column at a time.
        let mut x = Matrix::zeros(n, rhs.cols);
        let mut y = vec![0.0; n];
        for col in 0..rhs.cols {
            for i in 0..n {
                let mut sum = rhs[(i, col)];
                for t in 0..i {
                    sum -= l[(i, t)] * y[t];
                }
                y[i] = sum / l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut sum = y[i];
                for t in (i + 1)..n {
                    sum -= l[(t, i)] * x[(t, col)];
                }
                x[(i, col)] = sum / l[(i, i)];
            }
        }
        Ok(x)
    }

    /// Little-endian binary form: rows and cols as u64, then the row-major
    /// entries as IEEE-754 doubles.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Matrix> {
        let mut u = [0u8; 8];
        r.read_exact(&mut u)
            .map_err(|e| Error::parse("matrix header", e.to_string()))?;
        let rows = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)
            .map_err(|e| Error::parse("matrix header", e.to_string()))?;
        let cols = u64::from_le_bytes(u) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::parse("matrix header", "dimension overflow"))?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut u)
                .map_err(|e| Error::parse(format!("matrix entry {i}"), e.to_string()))?;
            let v = f64::from_le_bytes(u);
            if !v.is_finite() {
                return Err(Error::parse(format!("matrix entry {i}"), "non-finite value"));
            }
            data.push(v);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_binary(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Matrix> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Matrix::read_binary(&mut f)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let i = Matrix::identity(2);
        let b = Matrix::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(i.matmul(&b), b);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0]]);
        let b = Matrix::from_rows(&[&[3.0], &[4.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let c = a.matmul(&b);
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for t in 0..4 {
                    want += a[(i, t)] * b[(t, j)];
                }
                assert!((c[(i, j)] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "matmul: lhs cols")]
    fn matmul_dimension_mismatch_panics() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let _ = a.matmul(&b);
    }

    #[test]
    fn solve_identity_system() {
        let a = Matrix::identity(3);
        let rhs = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let x = a.solve_spd(&rhs).unwrap();
        assert_eq!(x, rhs);
    }

    #[test]
    fn solve_scalar_system() {
        let mut a = Matrix::identity(2);
        a.scale(2.0);
        let rhs = Matrix::from_rows(&[&[4.0], &[6.0]]);
        let x = a.solve_spd(&rhs).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 6, 6);
        let mut a = m.matmul_tn(&m); // M^T M
        for i in 0..6 {
            a[(i, i)] += 1.0;
        }
        let rhs = random_matrix(&mut rng, 6, 2);
        let x = a.solve_spd(&rhs).unwrap();
        let residual = a.matmul(&x).sub(&rhs).frobenius_sq().sqrt();
        assert!(residual <= 1e-9 * rhs.frobenius_sq().sqrt());
        assert!(x.is_finite());
    }

    #[test]
    fn solve_rejects_indefinite_matrix() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        match a.solve_spd(&Matrix::zeros(2, 1)) {
            Err(Error::SingularSystem { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular-system error, got {other:?}"),
        }
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_sq(), 0.0);
        assert_eq!(Matrix::from_rows(&[&[3.0, 4.0]]).frobenius_sq(), 25.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 4);
        let want: f64 = a.data().iter().map(|v| v * v).sum();
        assert!((a.frobenius_sq() - want).abs() <= 1e-12);
    }

    #[test]
    fn frobenius_equals_trace_of_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_matrix(&mut rng, 5, 3);
        let gram = a.matmul_tn(&a);
        let trace: f64 = (0..3).map(|i| gram[(i, i)]).sum();
        let rel = (a.frobenius_sq() - trace).abs() / trace.max(1.0);
        assert!(rel <= 1e-9);
    }

    #[test]
    fn transpose_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 5, 6);
        assert_eq!(a.matmul_nt(&b), a.matmul(&b.transpose()));
        let c = random_matrix(&mut rng, 4, 3);
        assert_eq!(a.matmul_tn(&c), a.transpose().matmul(&c));
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_matrix(&mut rng, 3, 7);
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 7 * 8);
        let back = Matrix::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(a, back);
    }

    proptest! {
        // Associativity holds to rounding on small random triples.
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, q, r, s) = (
                rng.random_range(1usize..5),
                rng.random_range(1usize..5),
                rng.random_range(1usize..5),
                rng.random_range(1usize..5),
            );
            let a = random_matrix(&mut rng, p, q);
            let b = random_matrix(&mut rng, q, r);
            let c = random_matrix(&mut rng, r, s);
            let left = a.matmul(&b).matmul(&c);
            let right = a.matmul(&b.matmul(&c));
            let denom = left.frobenius_sq().sqrt().max(1.0);
            prop_assert!(left.sub(&right).frobenius_sq().sqrt() / denom <= 1e-9);
        }

        // Solving then re-multiplying reproduces the right-hand side.
        #[test]
        fn solve_then_multiply_round_trips(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1usize..7);
            let m = random_matrix(&mut rng, n, n);
            let mut a = m.matmul_tn(&m);
            for i in 0..n {
                a[(i, i)] += 1.0;
            }
            let rhs = random_matrix(&mut rng, n, 2);
            let x = a.solve_spd(&rhs).unwrap();
            let res = a.matmul(&x).sub(&rhs).frobenius_sq().sqrt();
            prop_assert!(res <= 1e-9 * rhs.frobenius_sq().sqrt().max(1.0));
        }
    }
}
