//! Information (canonical-parameter) filter.
//!
//! Tracks `Λ = P^-1` and `η = Λ x` instead of moments. The time update uses
//! the precomputed factor `M_t = Q^-1 F (Λ + F^T Q^-1 F)^-1`, so it needs an
//! invertible process noise covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{self, CanonicalGaussian};
use crate::lgssm::LgssmSpec;

/// Jitter added to Q when `InfoOptions::q_jitter` is enabled.
pub const DEFAULT_Q_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default)]
pub struct InfoOptions {
    /// Adds `jitter * I` to Q before inverting. Off by default: a singular
    /// Q is reported instead.
    pub q_jitter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoStep {
    pub t: usize,
    pub eta_pred: DVector<f64>,
    pub lambda_pred: DMatrix<f64>,
    pub eta_post: DVector<f64>,
    pub lambda_post: DMatrix<f64>,
    /// `M_t`; zero at the first step, which starts from the prior.
    pub m: DMatrix<f64>,
}

impl InfoStep {
    pub fn posterior(&self) -> CanonicalGaussian {
        CanonicalGaussian {
            eta: self.eta_post.clone(),
            lambda: self.lambda_post.clone(),
        }
    }
}

fn q_inverse(spec: &LgssmSpec, t: usize, opts: InfoOptions) -> Result<DMatrix<f64>> {
    let mut q = spec.q(t).clone();
    if let Some(j) = opts.q_jitter {
        q += DMatrix::identity(q.nrows(), q.nrows()) * j;
    }
    gaussian::invert_spd(&q, "Q").map_err(|_| Error::SingularProcessNoise {
        step: t,
        context: format!("Q = {:?}", q.as_slice()),
    })
}

/// Prediction output: `(eta_pred, lambda_pred, M_t)`.
pub type InfoPrediction = (DVector<f64>, DMatrix<f64>, DMatrix<f64>);

/// Time update into step `t` from the previous posterior. `drive` is the
/// deterministic term `B u + c`.
pub fn info_predict(
    prev: &CanonicalGaussian,
    spec: &LgssmSpec,
    drive: &DVector<f64>,
    t: usize,
    opts: InfoOptions,
) -> Result<InfoPrediction> {
    let f = spec.f(t);
    let q_inv = q_inverse(spec, t, opts)?;
    let inner = &prev.lambda + f.transpose() * &q_inv * f;
    let inner_inv = gaussian::invert(&inner, &format!("Λ + F^T Q^-1 F at step {t}"))?;
    let m = &q_inv * f * inner_inv;
    let lambda_pred = gaussian::symmetrize(&(&q_inv - &m * f.transpose() * &q_inv));
    let eta_pred = &m * &prev.eta + &lambda_pred * drive;
    Ok((eta_pred, lambda_pred, m))
}

/// Measurement update: `η + H^T R^-1 (z - d)`, `Λ + H^T R^-1 H`.
pub fn info_update(
    eta_pred: &DVector<f64>,
    lambda_pred: &DMatrix<f64>,
    z: &DVector<f64>,
    spec: &LgssmSpec,
    t: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let h = spec.h(t);
    let r_inv = gaussian::invert_spd(spec.r(t), "R")
        .map_err(|_| Error::SingularMeasurementNoise { step: t })?;
    let ht_rinv = h.transpose() * r_inv;
    let eta = eta_pred + &ht_rinv * (z - spec.d(t));
    let lambda = gaussian::symmetrize(&(lambda_pred + &ht_rinv * h));
    Ok((eta, lambda))
}

/// Runs the information filter from `spec.init` (`Λ_{1|0} = P_1^-1`).
pub fn info_filter(
    spec: &LgssmSpec,
    observations: &[DVector<f64>],
    controls: Option<&[DVector<f64>]>,
    opts: InfoOptions,
) -> Result<Vec<InfoStep>> {
    if observations.is_empty() {
        return Err(Error::InvalidArgument("no observations to filter".into()));
    }
    let prior = spec.init.to_canonical()?;
    let n = spec.state_dim();
    let mut steps: Vec<InfoStep> = Vec::with_capacity(observations.len());
    for (i, z) in observations.iter().enumerate() {
        let t = i + 1;
        let (eta_pred, lambda_pred, m) = match steps.last() {
            None => (prior.eta.clone(), prior.lambda.clone(), DMatrix::zeros(n, n)),
            Some(prev) => {
                let prev_gain = match spec.gain_feedback {
                    Some(_) => Some(gain_from_precision(&prev.lambda_post, spec, prev.t)?),
                    None => None,
                };
                let drive = spec.drive(t, controls.map(|c| &c[i]), prev_gain.as_ref());
                info_predict(&prev.posterior(), spec, &drive, t, opts)?
            }
        };
        let (eta_post, lambda_post) = info_update(&eta_pred, &lambda_pred, z, spec, t)?;
        steps.push(InfoStep {
            t,
            eta_pred,
            lambda_pred,
            eta_post,
            lambda_post,
            m,
        });
    }
    Ok(steps)
}

/// `K = Λ_post^-1 H^T R^-1`.
fn gain_from_precision(lambda_post: &DMatrix<f64>, spec: &LgssmSpec, t: usize) -> Result<DMatrix<f64>> {
    let p = gaussian::invert(lambda_post, "posterior precision")?;
    let r_inv = gaussian::invert_spd(spec.r(t), "R")
        .map_err(|_| Error::SingularMeasurementNoise { step: t })?;
    Ok(p * spec.h(t).transpose() * r_inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::kalman;
    use approx::assert_abs_diff_eq;

    fn scalar_spec(f: f64, q: f64, r: f64) -> LgssmSpec {
        LgssmSpec::time_invariant(
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            Gaussian::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap(),
        )
        .unwrap()
    }

    fn c1(eta: f64, lambda: f64) -> CanonicalGaussian {
        CanonicalGaussian::new(DVector::from_element(1, eta), DMatrix::from_element(1, 1, lambda)).unwrap()
    }

    #[test]
    fn predict_by_hand() {
        let spec = scalar_spec(1.0, 1.0, 1.0);
        let (eta, lambda, m) =
            info_predict(&c1(0.0, 1.0), &spec, &DVector::zeros(1), 2, InfoOptions::default()).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(lambda[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(eta[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn predict_agrees_with_moment_form() {
        let spec = LgssmSpec::time_invariant(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.2, 0.9]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.4]),
            DMatrix::from_element(1, 1, 0.7),
            Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap();
        let prior = Gaussian::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        let moment = kalman::predict(&prior, &spec, None, 2).to_canonical().unwrap();
        let drive = spec.drive(2, None, None);
        let (eta, lambda, _) =
            info_predict(&prior.to_canonical().unwrap(), &spec, &drive, 2, InfoOptions::default()).unwrap();
        assert_abs_diff_eq!(eta, moment.eta, epsilon = 1e-8);
        assert_abs_diff_eq!(lambda, moment.lambda, epsilon = 1e-8);
    }

    #[test]
    fn certain_prior_predicts_process_noise_precision() {
        let spec = LgssmSpec::time_invariant(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_element(1, 1, 1.0),
            Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap();
        let prior = CanonicalGaussian::new(DVector::zeros(2), DMatrix::identity(2, 2) * 1e8).unwrap();
        let (_, lambda, _) = info_predict(&prior, &spec, &DVector::zeros(2), 2, InfoOptions::default()).unwrap();
        let q_inv = spec.q(2).clone().try_inverse().unwrap();
        assert!((&lambda - &q_inv).amax() / q_inv.amax() < 1e-4);
    }

    #[test]
    fn update_cases() {
        let spec = scalar_spec(1.0, 1.0, 1.0);
        let (eta, lambda) =
            info_update(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 0.5), &DVector::from_element(1, 2.0), &spec, 1)
                .unwrap();
        assert_abs_diff_eq!(lambda[(0, 0)], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(eta[0], 2.0, epsilon = 1e-15);

        let mut blind = spec.clone();
        blind.h = DMatrix::zeros(1, 1).into();
        let eta0 = DVector::from_element(1, 0.3);
        let lam0 = DMatrix::from_element(1, 1, 0.5);
        let (eta, lambda) = info_update(&eta0, &lam0, &DVector::from_element(1, 9.0), &blind, 1).unwrap();
        assert_eq!(eta, eta0);
        assert_eq!(lambda, lam0);
    }

    #[test]
    fn singular_noise_is_rejected() {
        let spec = scalar_spec(1.0, 0.0, 1.0);
        let z = vec![DVector::from_element(1, 1.0); 3];
        let err = info_filter(&spec, &z, None, InfoOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularProcessNoise { step: 2, .. }));
        let ok = info_filter(&spec, &z, None, InfoOptions { q_jitter: Some(DEFAULT_Q_JITTER) });
        assert!(ok.is_ok());

        let spec = scalar_spec(1.0, 1.0, 0.0);
        let err = info_filter(&spec, &z, None, InfoOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularMeasurementNoise { step: 1 }));
    }

    #[test]
    fn first_step_starts_from_prior() {
        let spec = scalar_spec(0.9, 0.5, 2.0);
        let steps = info_filter(&spec, &[DVector::from_element(1, 1.0)], None, InfoOptions::default()).unwrap();
        let prior = spec.init.to_canonical().unwrap();
        assert_eq!(steps[0].lambda_pred, prior.lambda);
        assert_eq!(steps[0].eta_pred, prior.eta);
    }
}
