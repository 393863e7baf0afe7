//! Dense complex linear algebra shared by the estimators.
//!
//! Everything is built on `faer` matrices of `c64` (which is
//! `num_complex::Complex<f64>`). Pseudoinverses go through a thin SVD with a
//! relative singular-value cutoff of [`RCOND`]; the hot objective loop of the
//! refinement uses [`ColumnProjector`], which takes a Cholesky shortcut on the
//! Gram matrix when the columns are well conditioned.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

pub use faer::c64;

/// Dense complex matrix.
pub type CMat = Mat<c64>;

/// Relative singular-value cutoff for every rank decision.
pub const RCOND: f64 = 1e-10;

/// Smallest accepted ratio of squared Cholesky pivots before
/// [`ColumnProjector`] falls back to an SVD basis.
const GRAM_PIVOT_RATIO: f64 = 1e-6;

/// Moore-Penrose pseudoinverse together with the numerical rank it used.
#[derive(Debug, Clone)]
pub struct Pinv {
    pub matrix: CMat,
    pub rank: usize,
    /// `rank < min(nrows, ncols)` of the input.
    pub rank_deficient: bool,
}

/// Pseudoinverse through a thin SVD, discarding singular values below
/// `RCOND * sigma_max`.
pub fn pinv(a: MatRef<'_, c64>) -> Result<Pinv> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(Pinv {
            matrix: CMat::zeros(n, m),
            rank: 0,
            rank_deficient: false,
        });
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma_max = s[0].re;
    let rank = (0..s.nrows())
        .take_while(|&i| sigma_max > 0.0 && s[i].re > RCOND * sigma_max)
        .count();

    let u = svd.U();
    let v = svd.V();
    let mut scaled_v = CMat::zeros(n, rank);
    for j in 0..rank {
        let inv = 1.0 / s[j].re;
        for i in 0..n {
            scaled_v[(i, j)] = v[(i, j)] * inv;
        }
    }
    let matrix = &scaled_v * u.subcols(0, rank).adjoint();
    Ok(Pinv {
        matrix,
        rank,
        rank_deficient: rank < m.min(n),
    })
}

/// Orthonormal basis of the numerical column space (`RCOND` cutoff).
pub fn column_basis(a: MatRef<'_, c64>) -> Result<CMat> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(CMat::zeros(m, 0));
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma_max = s[0].re;
    let rank = (0..s.nrows())
        .take_while(|&i| sigma_max > 0.0 && s[i].re > RCOND * sigma_max)
        .count();
    Ok(svd.U().subcols(0, rank).to_owned())
}

/// Orthogonal projector `A A^+` onto the column space of a matrix.
pub struct ColumnProjector {
    inner: Projector,
}

enum Projector {
    /// `A (A^H A)^{-1} A^H` through a Cholesky factor of the Gram matrix.
    Gram { a: CMat, llt: Llt<c64> },
    /// `Q Q^H` for an orthonormal SVD basis `Q`.
    Basis(CMat),
}

impl ColumnProjector {
    pub fn new(a: MatRef<'_, c64>) -> Result<Self> {
        let gram = a.adjoint() * a;
        Self::from_gram(a.to_owned(), &gram)
    }

    /// Build from `a` and a precomputed `a^H a`.
    pub fn from_gram(a: CMat, gram: &CMat) -> Result<Self> {
        if a.ncols() > 0 && a.ncols() <= a.nrows() {
            if let Ok(llt) = gram.llt(Side::Lower) {
                let l = llt.L();
                let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
                for i in 0..l.nrows() {
                    let p = l[(i, i)].norm_sqr();
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                if hi > 0.0 && lo > GRAM_PIVOT_RATIO * hi {
                    return Ok(Self {
                        inner: Projector::Gram { a, llt },
                    });
                }
            }
        }
        Ok(Self {
            inner: Projector::Basis(column_basis(a.as_ref())?),
        })
    }

    /// Dimension of the projected space.
    pub fn rank(&self) -> usize {
        match &self.inner {
            Projector::Gram { a, .. } => a.ncols(),
            Projector::Basis(q) => q.ncols(),
        }
    }

    /// `P z`.
    pub fn apply(&self, z: MatRef<'_, c64>) -> CMat {
        match &self.inner {
            Projector::Gram { a, llt } => {
                let coeff = llt.solve(a.adjoint() * z);
                a * coeff
            }
            Projector::Basis(q) => {
                if q.ncols() == 0 {
                    return CMat::zeros(z.nrows(), z.ncols());
                }
                q * (q.adjoint() * z)
            }
        }
    }
}

/// Run dense kernels on the calling thread. Results then do not depend on
/// the number of worker threads.
pub fn use_sequential_kernels() {
    faer::set_global_parallelism(faer::Par::Seq);
}

/// Squared Frobenius norm.
pub fn fro2(a: MatRef<'_, c64>) -> f64 {
    a.squared_norm_l2()
}

/// Build a matrix from row vectors of equal length.
pub fn from_rows(rows: &[Vec<c64>]) -> Result<CMat> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument("ragged matrix rows".into()));
    }
    Ok(CMat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn to_rows(a: MatRef<'_, c64>) -> Vec<Vec<c64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

/// Serde adapter storing a complex matrix as a list of rows of `[re, im]`.
pub mod serde_cmat {
    use super::{c64, from_rows, to_rows, CMat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &CMat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m.as_ref()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMat, D::Error> {
        let rows = Vec::<Vec<c64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMat::from_fn(m, n, |_, _| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    fn max_abs_diff(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                worst = worst.max((a[(i, j)] - b[(i, j)]).norm());
            }
        }
        worst
    }

    #[test]
    fn pinv_satisfies_penrose_identity() {
        let a = random(9, 4, 1);
        let p = pinv(a.as_ref()).unwrap();
        assert_eq!(p.rank, 4);
        assert!(!p.rank_deficient);
        let back = &a * &p.matrix * &a;
        assert!(max_abs_diff(back.as_ref(), a.as_ref()) < 1e-12);
    }

    #[test]
    fn pinv_reports_rank_deficiency() {
        let mut a = random(6, 3, 2);
        for i in 0..6 {
            a[(i, 2)] = a[(i, 0)] * c64::new(2.0, -1.0);
        }
        let p = pinv(a.as_ref()).unwrap();
        assert_eq!(p.rank, 2);
        assert!(p.rank_deficient);
        let back = &a * &p.matrix * &a;
        assert!(max_abs_diff(back.as_ref(), a.as_ref()) < 1e-12);
    }

    #[test]
    fn pinv_of_zero_matrix_is_zero() {
        let a = CMat::zeros(3, 2);
        let p = pinv(a.as_ref()).unwrap();
        assert_eq!(p.rank, 0);
        assert_eq!(p.matrix.nrows(), 2);
        assert_eq!(fro2(p.matrix.as_ref()), 0.0);
    }

    #[test]
    fn projector_paths_agree() {
        let a = random(40, 6, 3);
        let z = random(40, 3, 4);
        let fast = ColumnProjector::new(a.as_ref()).unwrap();
        assert!(matches!(fast.inner, Projector::Gram { .. }));
        let q = column_basis(a.as_ref()).unwrap();
        let slow = &q * (q.adjoint() * &z);
        assert!(max_abs_diff(fast.apply(z.as_ref()).as_ref(), slow.as_ref()) < 1e-12);
    }

    #[test]
    fn projector_falls_back_on_collinear_columns() {
        let mut a = random(20, 3, 5);
        for i in 0..20 {
            a[(i, 1)] = a[(i, 0)];
        }
        let p = ColumnProjector::new(a.as_ref()).unwrap();
        assert_eq!(p.rank(), 2);
        // projecting a column already in the range leaves it unchanged
        let col = a.subcols(0, 1).to_owned();
        let pc = p.apply(col.as_ref());
        assert!(max_abs_diff(pc.as_ref(), col.as_ref()) < 1e-12);
    }

    #[test]
    fn matrix_json_round_trip() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct Wrap(#[serde(with = "serde_cmat")] CMat);
        let a = random(2, 3, 6);
        let s = serde_json::to_string(&Wrap(a.clone())).unwrap();
        assert!(s.starts_with("[[["));
        let Wrap(b) = serde_json::from_str(&s).unwrap();
        assert_eq!(max_abs_diff(a.as_ref(), b.as_ref()), 0.0);
    }
}
