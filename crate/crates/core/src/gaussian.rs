//! Multivariate Gaussians in moment and canonical form, partitioned
//! conditioning, and the small set of matrix identities the filters rely on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalue floor used when testing positive semi-definiteness.
pub const PSD_TOL: f64 = 1e-10;
/// Relative pivot below which a matrix is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// PSD test with an absolute floor scaled by the matrix magnitude.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    min_eigenvalue(m) >= -PSD_TOL * scale
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Inverse through LU with partial pivoting. A pivot smaller than
/// `PIVOT_TOL` times the largest entry of `m` counts as singular.
pub fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(m.clone());
    }
    let scale = m.amax();
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::SingularMatrix(what.to_string()));
    }
    let lu = m.clone().lu();
    let u = lu.u();
    for i in 0..n {
        if u[(i, i)].abs() < PIVOT_TOL * scale {
            return Err(Error::SingularMatrix(what.to_string()));
        }
    }
    lu.try_inverse()
        .ok_or_else(|| Error::SingularMatrix(what.to_string()))
}

/// Inverse of a symmetric positive definite matrix through Cholesky.
pub fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(m, what)?;
    Ok(symmetrize(&chol.inverse()))
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.amax();
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::SingularMatrix(what.to_string()));
    }
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix(what.to_string()))?;
    let l = chol.l_dirty();
    for i in 0..m.nrows() {
        if l[(i, i)] * l[(i, i)] < PIVOT_TOL * scale {
            return Err(Error::SingularMatrix(what.to_string()));
        }
    }
    Ok(chol)
}

/// log det of an SPD matrix.
pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    let l = chol.l_dirty();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Clamp negative eigenvalues of a symmetric matrix to zero. Returns the
/// repaired matrix and whether anything was clamped.
pub fn clamp_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = symmetrize(m);
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (s, false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

/// Moment parameterization N(mean, cov).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing the covariance. Fails if the
    /// dimensions disagree or the covariance is not PSD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        if !is_psd(&cov) {
            return Err(Error::InvalidModel(
                "covariance is not positive semi-definite".into(),
            ));
        }
        Ok(Self { mean, cov })
    }

    /// Trusted constructor for internal results; only symmetrizes.
    pub(crate) fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self {
            mean,
            cov: symmetrize(&cov),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_canonical(&self) -> Result<CanonicalGaussian> {
        let lambda = invert(&self.cov, "covariance")?;
        let eta = &lambda * &self.mean;
        Ok(CanonicalGaussian {
            eta,
            lambda: symmetrize(&lambda),
        })
    }
}

/// Canonical parameterization: `lambda` is the precision, `eta = lambda * mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGaussian {
    pub eta: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl CanonicalGaussian {
    pub fn new(eta: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        if !lambda.is_square() || lambda.nrows() != eta.len() {
            return Err(Error::Dimension("eta and lambda disagree".into()));
        }
        Ok(Self {
            eta,
            lambda: symmetrize(&lambda),
        })
    }

    pub fn to_moment(&self) -> Result<Gaussian> {
        let cov = invert(&self.lambda, "precision")?;
        let mean = &cov * &self.eta;
        Ok(Gaussian::from_parts(mean, cov))
    }
}

pub fn to_canonical(g: &Gaussian) -> Result<CanonicalGaussian> {
    g.to_canonical()
}

pub fn from_canonical(c: &CanonicalGaussian) -> Result<Gaussian> {
    c.to_moment()
}

/// Joint Gaussian over `(y1, y2)` given blockwise.
#[derive(Debug, Clone)]
pub struct PartitionedGaussian {
    pub mu1: DVector<f64>,
    pub mu2: DVector<f64>,
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s22: DMatrix<f64>,
}

impl PartitionedGaussian {
    pub fn new(
        mu1: DVector<f64>,
        mu2: DVector<f64>,
        s11: DMatrix<f64>,
        s12: DMatrix<f64>,
        s22: DMatrix<f64>,
    ) -> Result<Self> {
        let (n1, n2) = (mu1.len(), mu2.len());
        if s11.shape() != (n1, n1) || s12.shape() != (n1, n2) || s22.shape() != (n2, n2) {
            return Err(Error::Dimension("partition blocks do not conform".into()));
        }
        Ok(Self {
            mu1,
            mu2,
            s11,
            s12,
            s22,
        })
    }

    /// Splits a full Gaussian at index `k`: the first `k` coordinates form
    /// the first block.
    pub fn split(g: &Gaussian, k: usize) -> Result<Self> {
        let n = g.dim();
        if k > n {
            return Err(Error::Dimension(format!("split index {k} beyond dimension {n}")));
        }
        let m = n - k;
        Ok(Self {
            mu1: g.mean.rows(0, k).into_owned(),
            mu2: g.mean.rows(k, m).into_owned(),
            s11: g.cov.view((0, 0), (k, k)).into_owned(),
            s12: g.cov.view((0, k), (k, m)).into_owned(),
            s22: g.cov.view((k, k), (m, m)).into_owned(),
        })
    }

    pub fn joint(&self) -> Gaussian {
        let (n1, n2) = (self.mu1.len(), self.mu2.len());
        let n = n1 + n2;
        let mut mean = DVector::zeros(n);
        mean.rows_mut(0, n1).copy_from(&self.mu1);
        mean.rows_mut(n1, n2).copy_from(&self.mu2);
        let mut cov = DMatrix::zeros(n, n);
        cov.view_mut((0, 0), (n1, n1)).copy_from(&self.s11);
        cov.view_mut((0, n1), (n1, n2)).copy_from(&self.s12);
        cov.view_mut((n1, 0), (n2, n1)).copy_from(&self.s12.transpose());
        cov.view_mut((n1, n1), (n2, n2)).copy_from(&self.s22);
        Gaussian::from_parts(mean, cov)
    }
}

/// Distribution of the first block given that the second block equals `a`.
pub fn condition(pg: &PartitionedGaussian, a: &DVector<f64>) -> Result<Gaussian> {
    if a.len() != pg.mu2.len() {
        return Err(Error::Dimension(format!(
            "observed block has length {} but mu2 has length {}",
            a.len(),
            pg.mu2.len()
        )));
    }
    let s22_inv = invert(&pg.s22, "s22")?;
    let gain = &pg.s12 * &s22_inv;
    let mean = &pg.mu1 + &gain * (a - &pg.mu2);
    let cov = &pg.s11 - &gain * pg.s12.transpose();
    Ok(Gaussian::from_parts(mean, cov))
}

/// `(A + C B C^T)^{-1}` through the Woodbury identity.
pub fn woodbury_inverse(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() || !b.is_square() || c.nrows() != a.nrows() || c.ncols() != b.nrows() {
        return Err(Error::Dimension("woodbury operands do not conform".into()));
    }
    let a_inv = invert(a, "A")?;
    if c.amax() == 0.0 {
        return Ok(a_inv);
    }
    let b_inv = invert(b, "B")?;
    let inner = &b_inv + c.transpose() * &a_inv * c;
    let inner_inv = invert(&inner, "B^-1 + C^T A^-1 C")?;
    Ok(&a_inv - &a_inv * c * inner_inv * c.transpose() * &a_inv)
}

/// Conditional expectations on a finite joint distribution, used to check
/// the tower identity `E[X|Z] = E[E[X|Y,Z]|Z]`.
pub mod tower {
    /// Joint pmf `p[x][y][z]` over a finite grid, with `values[x]` the
    /// number attached to each outcome of `X`.
    #[derive(Debug, Clone)]
    pub struct DiscreteJoint {
        pub p: Vec<Vec<Vec<f64>>>,
        pub values: Vec<f64>,
    }

    impl DiscreteJoint {
        fn ny(&self) -> usize {
            self.p.first().map_or(0, |px| px.len())
        }

        /// E[X | Z = z] straight from the joint.
        pub fn expect_x_given_z(&self, z: usize) -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for (px, v) in self.p.iter().zip(&self.values) {
                for pxy in px {
                    num += pxy[z] * v;
                    den += pxy[z];
                }
            }
            num / den
        }

        /// E[X | Y = y, Z = z].
        pub fn expect_x_given_yz(&self, y: usize, z: usize) -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for (px, v) in self.p.iter().zip(&self.values) {
                num += px[y][z] * v;
                den += px[y][z];
            }
            num / den
        }

        /// E[ E[X | Y, Z] | Z = z ].
        pub fn iterated_expectation(&self, z: usize) -> f64 {
            let p_yz: Vec<f64> = (0..self.ny())
                .map(|y| self.p.iter().map(|px| px[y][z]).sum())
                .collect();
            let den: f64 = p_yz.iter().sum();
            p_yz.iter()
                .enumerate()
                .map(|(y, w)| w / den * self.expect_x_given_yz(y, z))
                .sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn independent_blocks_condition_to_marginal() {
        let pg = PartitionedGaussian::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DVector::from_vec(vec![3.0]),
            m(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::zeros(2, 1),
            m(1, 1, &[4.0]),
        )
        .unwrap();
        let g = condition(&pg, &DVector::from_vec(vec![17.0])).unwrap();
        assert_eq!(g.mean, pg.mu1);
        assert_eq!(g.cov, pg.s11);
    }

    #[test]
    fn scalar_conditioning_by_hand() {
        let pg = PartitionedGaussian::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[0.5]),
            m(1, 1, &[1.0]),
        )
        .unwrap();
        let g = condition(&pg, &DVector::from_vec(vec![2.0])).unwrap();
        assert_abs_diff_eq!(g.mean[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cov[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn centered_observation_keeps_mean() {
        let pg = PartitionedGaussian::new(
            DVector::from_vec(vec![1.5]),
            DVector::from_vec(vec![-1.0, 2.0]),
            m(1, 1, &[3.0]),
            m(1, 2, &[0.5, -0.2]),
            m(2, 2, &[2.0, 0.1, 0.1, 1.0]),
        )
        .unwrap();
        let g = condition(&pg, &pg.mu2.clone()).unwrap();
        assert_abs_diff_eq!(g.mean[0], 1.5, epsilon = 1e-14);
        let expect = &pg.s11 - &pg.s12 * pg.s22.clone().try_inverse().unwrap() * pg.s12.transpose();
        assert_abs_diff_eq!(g.cov[(0, 0)], expect[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn singular_s22_is_reported() {
        let pg = PartitionedGaussian::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0, 0.0]),
            m(1, 1, &[1.0]),
            m(1, 2, &[0.0, 0.0]),
            m(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        match condition(&pg, &DVector::zeros(2)) {
            Err(Error::SingularMatrix(what)) => assert_eq!(what, "s22"),
            other => panic!("expected singular s22, got {other:?}"),
        }
    }

    #[test]
    fn canonical_conversions() {
        let g = Gaussian::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let c = g.to_canonical().unwrap();
        assert_eq!(c.eta, DVector::zeros(3));
        assert_eq!(c.lambda, DMatrix::identity(3, 3));

        let g = Gaussian::new(DVector::from_vec(vec![2.0]), m(1, 1, &[4.0])).unwrap();
        let c = g.to_canonical().unwrap();
        assert_abs_diff_eq!(c.eta[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c.lambda[(0, 0)], 0.25, epsilon = 1e-15);

        let back = from_canonical(&CanonicalGaussian::new(
            DVector::from_vec(vec![0.5]),
            m(1, 1, &[0.25]),
        ).unwrap())
        .unwrap();
        assert_abs_diff_eq!(back.mean[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(back.cov[(0, 0)], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_covariance_has_no_canonical_form() {
        let g = Gaussian::new(DVector::zeros(2), m(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(g.to_canonical(), Err(Error::SingularMatrix(_))));
        let c = CanonicalGaussian::new(DVector::zeros(1), m(1, 1, &[0.0])).unwrap();
        assert!(matches!(c.to_moment(), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        assert!(Gaussian::new(DVector::zeros(2), m(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn woodbury_zero_update_and_hand_case() {
        let a = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = woodbury_inverse(&a, &m(1, 1, &[3.0]), &DMatrix::zeros(2, 1)).unwrap();
        assert_abs_diff_eq!(inv, a.clone().try_inverse().unwrap(), epsilon = 1e-14);

        let inv = woodbury_inverse(
            &DMatrix::identity(2, 2),
            &m(1, 1, &[1.0]),
            &m(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(inv, m(2, 2, &[0.5, 0.0, 0.0, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn clamp_removes_negative_eigenvalues() {
        let (fixed, clamped) = clamp_psd(&m(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(clamped);
        assert!(min_eigenvalue(&fixed) > -1e-12);
        let (same, clamped) = clamp_psd(&DMatrix::identity(2, 2));
        assert!(!clamped);
        assert_eq!(same, DMatrix::identity(2, 2));
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let s = m(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        assert_abs_diff_eq!(log_det_spd(&s, "s").unwrap(), 11f64.ln(), epsilon = 1e-14);
    }
}
