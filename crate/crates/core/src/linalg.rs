//! Small dense symmetric linear algebra.
//!
//! Matrices here are tiny (random-effects dimension 2, a handful of
//! longitudinal visits), so everything is stored densely in row-major
//! order and factorised directly. Symmetric square roots go through a full
//! eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot threshold for positive-definiteness checks.
pub const PD_TOLERANCE: f64 = 1e-12;

/// Dense symmetric matrix, stored row-major with both triangles populated.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim])
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    /// Builds a matrix from explicit rows, which must be square and exactly
    /// symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("rows do not form a square matrix".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let m = Self { dim, data };
        for i in 0..dim {
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::Dimension(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Builds a matrix from the lower triangle produced by `f(i, j)` with
    /// `j <= i`, mirroring it into the upper triangle.
    pub fn from_lower_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_diag(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.get(i, i))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// Plain matrix product; the result is symmetrised, so this is only
    /// meaningful when `self` and `other` commute (e.g. `S·S`).
    pub fn mul_sym(&self, other: &SymMatrix) -> SymMatrix {
        let n = self.dim;
        let full: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                (0..n).map(|l| self.get(i, l) * other.get(l, j)).sum()
            })
            .collect();
        SymMatrix::from_lower_fn(n, |i, j| 0.5 * (full[i * n + j] + full[j * n + i]))
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Principal sub-block on the index set `idx`.
    pub fn sub_block(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_lower_fn(idx.len(), |i, j| self.get(idx[i], idx[j]))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }

    fn eigen(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let eig = SymmetricEigen::new(self.to_nalgebra());
        let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for (index, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= PD_TOLERANCE * max_abs {
                return Err(Error::NotPositiveDefinite { index, pivot: ev });
            }
        }
        Ok((eig.eigenvalues.iter().copied().collect(), eig.eigenvectors))
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
        let (values, vectors) = self.eigen()?;
        let n = self.dim;
        Ok(SymMatrix::from_lower_fn(n, |i, j| {
            (0..n)
                .map(|k| vectors[(i, k)] * f(values[k]) * vectors[(j, k)])
                .sum()
        }))
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Solves `L z = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.data[i * n..i * n + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / self.data[i * n + i];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.data[k * n + i] * b[k];
            }
            b[i] = s / self.data[i * n + i];
        }
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        x
    }

    /// `2 Σ log Lᵢᵢ`
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// `L·Lᵀ`
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim;
        SymMatrix::from_lower_fn(n, |i, j| (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum())
    }

    /// `(L Lᵀ)⁻¹`
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            cols.push(self.solve(&e));
        }
        SymMatrix::from_lower_fn(n, |i, j| 0.5 * (cols[j][i] + cols[i][j]))
    }

    /// `L z` for a standard-normal `z`, i.e. a correlated draw.
    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| dot(&self.data[i * n..i * n + i + 1], &z[..=i]))
            .collect()
    }
}

/// Cholesky factorisation. Fails when a pivot drops to
/// `PD_TOLERANCE · max diagonal` or below; no jitter is applied.
pub fn cholesky(m: &SymMatrix) -> Result<LowerTriangular> {
    let n = m.dim;
    let threshold = PD_TOLERANCE * m.max_diag().max(0.0);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > threshold) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

pub fn solve_spd(m: &SymMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != m.dim {
        return Err(Error::Dimension(format!(
            "right-hand side has length {}, matrix is {}x{}",
            rhs.len(),
            m.dim,
            m.dim
        )));
    }
    Ok(cholesky(m)?.solve(rhs))
}

pub fn logdet_spd(m: &SymMatrix) -> Result<f64> {
    Ok(cholesky(m)?.logdet())
}

/// Symmetric positive-definite square root `S` with `S·S = M`.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    m.spectral_map(f64::sqrt)
}

/// Symmetric inverse square root `M^{-1/2}`.
pub fn sym_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    m.spectral_map(|v| 1.0 / v.sqrt())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let a: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        SymMatrix::from_lower_fn(dim, |i, j| {
            let s: f64 = (0..dim).map(|k| a[i * dim + k] * a[j * dim + k]).sum();
            if i == j {
                s + 0.5
            } else {
                s
            }
        })
    }

    fn rel_err(a: &SymMatrix, b: &SymMatrix) -> f64 {
        let num: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l.reconstruct(), SymMatrix::identity(3));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn cholesky_two_by_two() {
        let m = SymMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let l = cholesky(&m).unwrap();
        assert_eq!(
            [l.get(0, 0), l.get(0, 1), l.get(1, 0), l.get(1, 1)],
            [2.0, 0.0, 1.0, 2.0]
        );
        // direct multiplication
        let rebuilt = [
            l.get(0, 0) * l.get(0, 0),
            l.get(1, 0) * l.get(0, 0),
            l.get(1, 0) * l.get(1, 0) + l.get(1, 1) * l.get(1, 1),
        ];
        assert_eq!(rebuilt, [4.0, 2.0, 5.0]);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::NotPositiveDefinite { .. })));
        assert!(matches!(sym_sqrt(&m), Err(Error::NotPositiveDefinite { .. })));
        assert!(logdet_spd(&m).is_err());
    }

    #[test]
    fn asymmetric_rows_are_rejected() {
        assert!(SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
    }

    #[test]
    fn solve_simple_systems() {
        assert_eq!(
            solve_spd(&SymMatrix::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let x = solve_spd(&SymMatrix::diag(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-15);
        assert!(solve_spd(&SymMatrix::identity(2), &[1.0]).is_err());
    }

    #[test]
    fn solve_recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_spd(4, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rhs = m.mul_vec(&x);
        let got = solve_spd(&m, &rhs).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert_relative_eq!(g, e, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn sym_sqrt_cases() {
        assert_eq!(
            sym_sqrt(&SymMatrix::identity(2)).unwrap(),
            SymMatrix::identity(2)
        );
        let s = sym_sqrt(&SymMatrix::diag(&[4.0, 9.0])).unwrap();
        assert_relative_eq!(s.get(0, 0), 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.get(1, 1), 3.0, epsilon = 1e-14);
        assert_relative_eq!(s.get(0, 1), 0.0, epsilon = 1e-14);

        let m = SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let s = sym_sqrt(&m).unwrap();
        assert!(rel_err(&s.mul_sym(&s), &m) < 1e-12);
        // closed form: eigenvalues 1.5 and 0.5 on (1,1) and (1,-1)
        let (a, b) = (1.5_f64.sqrt(), 0.5_f64.sqrt());
        assert_relative_eq!(s.get(0, 0), 0.5 * (a + b), epsilon = 1e-14);
        assert_relative_eq!(s.get(0, 1), 0.5 * (a - b), epsilon = 1e-14);
    }

    #[test]
    fn inverse_sqrt_inverts_sqrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(5, &mut rng);
        let s = sym_sqrt(&m).unwrap();
        let r = sym_inv_sqrt(&m).unwrap();
        assert!(rel_err(&s.mul_sym(&r), &SymMatrix::identity(5)) < 1e-12);
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet_spd(&SymMatrix::identity(5)).unwrap(), 0.0);
        assert_relative_eq!(
            logdet_spd(&SymMatrix::diag(&[2.0, 3.0])).unwrap(),
            6.0_f64.ln(),
            epsilon = 1e-14
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_spd(3, &mut rng);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(3, 3, m.as_slice()));
        let oracle: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
        assert_relative_eq!(logdet_spd(&m).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn inverse_matches_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(4, &mut rng);
        let inv = cholesky(&m).unwrap().inverse();
        // m and its inverse commute, so the symmetrised product is exact
        assert!(rel_err(&m.mul_sym(&inv), &SymMatrix::identity(4)) < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn cholesky_round_trip(seed in any::<u64>(), dim in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(dim, &mut rng);
                let l = cholesky(&m).unwrap();
                prop_assert!(rel_err(&l.reconstruct(), &m) < 1e-12);
            }

            #[test]
            fn sqrt_squares_back(seed in any::<u64>(), dim in 1usize..=10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(dim, &mut rng);
                let s = sym_sqrt(&m).unwrap();
                prop_assert!(rel_err(&s.mul_sym(&s), &m) < 1e-10);
                prop_assert!(cholesky(&s).is_ok());
            }

            #[test]
            fn solve_residual_small(seed in any::<u64>(), dim in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(dim, &mut rng);
                let rhs: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
                let x = solve_spd(&m, &rhs).unwrap();
                let r = m.mul_vec(&x);
                let num: f64 = r.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(num / den < 1e-10);
            }
        }
    }
}
