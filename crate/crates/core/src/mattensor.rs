//! Dense symmetric matrices and the d²×d² tensor algebra built on them.
//!
//! Vectorization is column-major: `vec(A)` lists `A[0][0], A[1][0], …, A[d-1][0], A[0][1], …`,
//! so entry `(p, q)` sits at position `p + d·q`. Together with the standard Kronecker product
//! this gives `vec(B·M·Cᵀ) = (C⊗B)·vec(M)`. The symmetrizer 𝒵 is characterized by its action
//! `𝒵·vec(A) = vec(A + Aᵀ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on the smallest eigenvalue accepted as "PSD".
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Symmetric d×d matrix. Entries are stored exactly symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    /// Accepts a square matrix that is symmetric up to rounding and stores its exact
    /// symmetric part.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "matrix dimension must be at least 1".into(),
            ));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        for p in 0..m.nrows() {
            for q in 0..p {
                if (m[(p, q)] - m[(q, p)]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({p}, {q})"
                    )));
                }
            }
        }
        Ok(Self::symmetrize(&m))
    }

    /// `(m + mᵀ)/2`, with the lower triangle copied from the upper one so that the result is
    /// bit-exactly symmetric.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        let d = m.nrows();
        assert_eq!(d, m.ncols(), "symmetrize needs a square matrix");
        let mut out = DMatrix::zeros(d, d);
        for q in 0..d {
            for p in 0..=q {
                let v = 0.5 * (m[(p, q)] + m[(q, p)]);
                out[(p, q)] = v;
                out[(q, p)] = v;
            }
        }
        SymMat(out)
    }

    pub fn identity(d: usize) -> Self {
        SymMat(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SymMat(DMatrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMat(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds from row slices; convenient for literals in tests and scenario files.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d),
            });
        }
        Self::new(DMatrix::from_fn(d, d, |p, q| rows[p][q]))
    }

    /// Equal variances `sigma²` and pairwise correlation `rho`.
    pub fn equicorrelated(d: usize, sigma: f64, rho: f64) -> Self {
        let s2 = sigma * sigma;
        SymMat(DMatrix::from_fn(
            d,
            d,
            |p, q| if p == q { s2 } else { rho * s2 },
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.0[(p, q)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMat(&self.0 * c)
    }

    pub fn add(&self, other: &SymMat) -> Self {
        SymMat(&self.0 + &other.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    /// Eigenvalues (unsorted) and orthonormal eigenvectors as columns.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let e = SymmetricEigen::new(self.0.clone());
        (e.eigenvalues, e.eigenvectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().0.min()
    }

    /// `U·diag(f(λ))·Uᵀ` for the symmetric eigendecomposition of `self`.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Self {
        let (vals, vecs) = self.eigen();
        let mapped = DVector::from_iterator(vals.len(), vals.iter().map(|&l| f(l)));
        let m = &vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose();
        Self::symmetrize(&m)
    }

    /// Inverse of a strictly positive definite matrix via Cholesky.
    pub fn inverse(&self) -> Result<Self> {
        let chol = self.0.clone().cholesky().ok_or(Error::Singular)?;
        let inv = chol.inverse();
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(Self::symmetrize(&inv))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|p| self.0.row(p).iter().copied().collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMat {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SymMat::from_rows(&rows)
    }
}

impl From<SymMat> for Vec<Vec<f64>> {
    fn from(m: SymMat) -> Self {
        m.to_rows()
    }
}

/// A d²×d² matrix acting on vectorized d×d matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMat {
    d: usize,
    m: DMatrix<f64>,
}

impl TensorMat {
    pub fn new(d: usize, m: DMatrix<f64>) -> Result<Self> {
        let n = d * d;
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: m.nrows().max(m.ncols()),
            });
        }
        Ok(TensorMat { d, m })
    }

    pub fn identity(d: usize) -> Self {
        TensorMat {
            d,
            m: DMatrix::identity(d * d, d * d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        TensorMat {
            d,
            m: DMatrix::zeros(d * d, d * d),
        }
    }

    pub fn from_diagonal(d: usize, diag: &[f64]) -> Result<Self> {
        if diag.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: diag.len(),
            });
        }
        Ok(TensorMat {
            d,
            m: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * v
    }

    pub fn mul(&self, other: &TensorMat) -> TensorMat {
        TensorMat {
            d: self.d,
            m: &self.m * &other.m,
        }
    }

    pub fn add(&self, other: &TensorMat) -> TensorMat {
        TensorMat {
            d: self.d,
            m: &self.m + &other.m,
        }
    }

    pub fn add_assign(&mut self, other: &TensorMat) {
        self.m += &other.m;
    }

    pub fn scale(&self, c: f64) -> TensorMat {
        TensorMat {
            d: self.d,
            m: &self.m * c,
        }
    }

    pub fn transpose(&self) -> TensorMat {
        TensorMat {
            d: self.d,
            m: self.m.transpose(),
        }
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrized(&self) -> TensorMat {
        TensorMat {
            d: self.d,
            m: (&self.m + self.m.transpose()) * 0.5,
        }
    }

    /// General inverse (LU); fails on singular or non-finite results.
    pub fn inverse(&self) -> Result<TensorMat> {
        let inv = self.m.clone().try_inverse().ok_or(Error::Singular)?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(TensorMat { d: self.d, m: inv })
    }

    /// Inverse of a symmetric positive definite tensor via Cholesky, symmetrized.
    pub fn spd_inverse(&self) -> Result<TensorMat> {
        let chol = self.m.clone().cholesky().ok_or(Error::Singular)?;
        let inv = chol.inverse();
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(TensorMat {
            d: self.d,
            m: (&inv + inv.transpose()) * 0.5,
        })
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(&self.m)
    }

    /// Entry at ((p,q),(p',q')) in matrix-index notation.
    pub fn entry(&self, p: usize, q: usize, pp: usize, qq: usize) -> f64 {
        self.m[(vec_index(p, q, self.d), vec_index(pp, qq, self.d))]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.m.nrows())
            .map(|r| self.m.row(r).iter().copied().collect())
            .collect()
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Position of entry (p, q) in `vec` of a d×d matrix.
#[inline]
pub fn vec_index(p: usize, q: usize, d: usize) -> usize {
    p + d * q
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    // nalgebra storage is column-major already
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), d * d, "unvec length must be d²");
    DMatrix::from_column_slice(d, d, v.as_slice())
}

/// Kronecker product `a⊗b` of two d×d matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<TensorMat> {
    let d = a.nrows();
    for m in [a, b] {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: m.nrows().max(m.ncols()),
            });
        }
    }
    Ok(TensorMat {
        d,
        m: a.kronecker(b),
    })
}

/// The symmetrizer 𝒵 with `𝒵·vec(A) = vec(A + Aᵀ)`; equals identity plus the commutation
/// matrix.
pub fn z_matrix(d: usize) -> TensorMat {
    let mut m = DMatrix::identity(d * d, d * d);
    for p in 0..d {
        for q in 0..d {
            // (Aᵀ)[p][q] = A[q][p]
            m[(vec_index(p, q, d), vec_index(q, p, d))] += 1.0;
        }
    }
    TensorMat { d, m }
}

fn check_psd(vals: &DVector<f64>, trace: f64) -> Result<()> {
    let floor = -PSD_TOLERANCE * trace.abs().max(f64::MIN_POSITIVE);
    let min = vals.min();
    if min < floor || !min.is_finite() {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Symmetric PSD square root. Slightly negative eigenvalues (within `1e-10·trace`) are
/// clipped to zero.
pub fn psd_sqrt(m: &SymMat) -> Result<SymMat> {
    let (vals, vecs) = m.eigen();
    check_psd(&vals, m.trace())?;
    let roots = vals.map(|l| l.max(0.0).sqrt());
    Ok(SymMat::symmetrize(
        &(&vecs * DMatrix::from_diagonal(&roots) * vecs.transpose()),
    ))
}

/// Noise-weighted square root `ℋ(ℋ⁻¹Σℋ⁻¹)^{1/2}ℋ` for a positive diagonal `ℋ`.
pub fn weighted_sqrt(sigma: &SymMat, h_diag: &[f64]) -> Result<SymMat> {
    let d = sigma.dim();
    if h_diag.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: h_diag.len(),
        });
    }
    if let Some(&bad) = h_diag.iter().find(|&&h| !(h > 0.0 && h.is_finite())) {
        return Err(Error::NonpositiveNoiseLevel(bad));
    }
    let s = sigma.as_matrix();
    let scaled = DMatrix::from_fn(d, d, |p, q| s[(p, q)] / (h_diag[p] * h_diag[q]));
    let root = psd_sqrt(&SymMat::symmetrize(&scaled))?;
    let r = root.as_matrix();
    Ok(SymMat::symmetrize(&DMatrix::from_fn(d, d, |p, q| {
        h_diag[p] * r[(p, q)] * h_diag[q]
    })))
}

/// Projection onto the PSD cone: negative eigenvalues are set to zero.
pub fn psd_project(m: &SymMat) -> SymMat {
    let (vals, vecs) = m.eigen();
    if vals.iter().all(|&l| l >= 0.0) {
        return m.clone();
    }
    let clipped = vals.map(|l| l.max(0.0));
    SymMat::symmetrize(&(&vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose()))
}

/// Raises every eigenvalue to at least `floor`.
pub fn floor_eigenvalues(m: &SymMat, floor: f64) -> SymMat {
    let (vals, _) = m.eigen();
    if vals.iter().all(|&l| l >= floor) {
        return m.clone();
    }
    m.map_eigenvalues(|l| l.max(floor))
}

/// Eigenvalue floor used before inverting pilot or local covolatility estimates.
pub fn default_floor(m: &SymMat) -> f64 {
    1e-8 * m.trace().max(0.0) + 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_psd(rng: &mut impl Rng, d: usize) -> SymMat {
        let a = random_matrix(rng, d);
        SymMat::symmetrize(&(&a * a.transpose() + DMatrix::identity(d, d) * 0.1))
    }

    #[test]
    fn vec_examples() {
        assert_eq!(
            vec(&DMatrix::identity(2, 2)).as_slice(),
            &[1.0, 0.0, 0.0, 1.0]
        );
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(vec(&DMatrix::zeros(3, 3)).iter().all(|&v| v == 0.0));
        assert_eq!(unvec(&vec(&m), 2), m);
    }

    #[test]
    fn kron_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(
            kron(&i2, &i2).unwrap().into_matrix(),
            DMatrix::identity(4, 4)
        );
        let k = kron(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert_eq!(k.as_matrix()[(0, 0)], 6.0);
        assert!(kron(&i2, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn kron_vec_rule_random_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, m) = (
            random_matrix(&mut rng, 2),
            random_matrix(&mut rng, 2),
            random_matrix(&mut rng, 2),
        );
        let lhs = vec(&(&b * &m * a.transpose()));
        let rhs = kron(&a, &b).unwrap().apply(&vec(&m));
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ms: Vec<_> = (0..4).map(|_| random_matrix(&mut rng, 3)).collect();
        let lhs = kron(&ms[0], &ms[1])
            .unwrap()
            .mul(&kron(&ms[2], &ms[3]).unwrap());
        let rhs = kron(&(&ms[0] * &ms[2]), &(&ms[1] * &ms[3])).unwrap();
        assert!((lhs.as_matrix() - rhs.as_matrix()).amax() < 1e-12);
    }

    #[test]
    fn z_matrix_examples() {
        assert_eq!(z_matrix(1).as_matrix()[(0, 0)], 2.0);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                2., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 2.,
            ],
        );
        assert_eq!(z_matrix(2).as_matrix(), &expected);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3);
        let lhs = z_matrix(3).apply(&vec(&a));
        assert!((lhs - vec(&(&a + a.transpose()))).amax() < 1e-12);
    }

    #[test]
    fn z_matrix_spectrum() {
        for d in 1..=4 {
            let z = z_matrix(d);
            assert_eq!(z.as_matrix(), &z.as_matrix().transpose());
            let vals = SymmetricEigen::new(z.into_matrix()).eigenvalues;
            for l in vals.iter() {
                assert!(
                    [0.0, 1.0, 2.0].iter().any(|t| (l - t).abs() < 1e-12),
                    "eigenvalue {l}"
                );
            }
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        assert_eq!(psd_sqrt(&SymMat::identity(3)).unwrap(), SymMat::identity(3));
        let r = psd_sqrt(&SymMat::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-14 && (r.get(1, 1) - 3.0).abs() < 1e-14);
        assert!(r.get(0, 1).abs() < 1e-14);

        let m = SymMat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let s = psd_sqrt(&m).unwrap();
        let sq = s.as_matrix() * s.as_matrix();
        assert!((sq - m.as_matrix()).norm() / m.as_matrix().norm() < 1e-10);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite_and_clips_rounding() {
        let bad = SymMat::from_diagonal(&[1.0, -0.1]);
        assert!(matches!(psd_sqrt(&bad), Err(Error::NotPsd { .. })));
        let nearly = SymMat::from_diagonal(&[1.0, -1e-13]);
        let r = psd_sqrt(&nearly).unwrap();
        assert_eq!(r.get(1, 1), 0.0);
    }

    #[test]
    fn weighted_sqrt_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = random_psd(&mut rng, 3);
        // homogeneous noise reduces to η·Σ^{1/2}
        let w = weighted_sqrt(&sigma, &[0.7; 3]).unwrap();
        let plain = psd_sqrt(&sigma).unwrap().scale(0.7);
        assert!((w.as_matrix() - plain.as_matrix()).amax() < 1e-12);

        let w = weighted_sqrt(&SymMat::identity(2), &[1.0, 2.0]).unwrap();
        assert!((w.get(0, 0) - 1.0).abs() < 1e-14 && (w.get(1, 1) - 2.0).abs() < 1e-14);
        assert!(w.get(0, 1).abs() < 1e-14);

        for _ in 0..20 {
            let d = rng.random_range(1..5);
            let sigma = random_psd(&mut rng, d);
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
            let w = weighted_sqrt(&sigma, &h).unwrap();
            let hinv2 =
                DMatrix::from_fn(d, d, |p, q| if p == q { 1.0 / (h[p] * h[p]) } else { 0.0 });
            let back = w.as_matrix() * hinv2 * w.as_matrix();
            let rel = (back - sigma.as_matrix()).norm() / sigma.as_matrix().norm();
            assert!(rel < 1e-10, "relative error {rel}");
        }
        assert!(matches!(
            weighted_sqrt(&SymMat::identity(2), &[1.0, 0.0]),
            Err(Error::NonpositiveNoiseLevel(_))
        ));
    }

    #[test]
    fn psd_project_examples() {
        let p = psd_project(&SymMat::from_diagonal(&[1.0, -0.5]));
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15 && p.get(1, 1).abs() < 1e-15);
        let psd = SymMat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(psd_project(&psd), psd);
        let p = psd_project(&SymMat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        for (pp, qq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((p.get(pp, qq) - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn floor_keeps_well_conditioned_input() {
        let m = SymMat::from_diagonal(&[1.0, 2.0]);
        assert_eq!(floor_eigenvalues(&m, 1e-3), m);
        let f = floor_eigenvalues(&SymMat::from_diagonal(&[1.0, -2.0]), 1e-3);
        assert!(f.min_eigenvalue() >= 1e-3 - 1e-15);
    }

    #[test]
    fn symmat_serde_roundtrip() {
        let m = SymMat::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,0.5],[0.5,2.0]]");
        let back: SymMat = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<SymMat>("[[1.0,0.5],[0.4,2.0]]").is_err());
    }
}
