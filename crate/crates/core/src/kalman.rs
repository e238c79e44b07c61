//! Moment-form Kalman filter.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{self, Gaussian};
use crate::lgssm::LgssmSpec;

/// Covariance update used after computing the optimal gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceForm {
    /// `(I - K H) P`.
    Reduced,
    /// `(I - K H) P (I - K H)^T + K R K^T`, valid for any gain.
    #[default]
    Joseph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub t: usize,
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub x_post: DVector<f64>,
    pub p_post: DMatrix<f64>,
    /// Pre-fit residual `z - (H x_pred + d)`.
    pub innovation: DVector<f64>,
    pub s: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `z - (H x_post + d)`.
    pub post_fit_residual: DVector<f64>,
    pub loglik_increment: f64,
}

impl FilterStep {
    pub fn predicted(&self) -> Gaussian {
        Gaussian::from_parts(self.x_pred.clone(), self.p_pred.clone())
    }

    pub fn posterior(&self) -> Gaussian {
        Gaussian::from_parts(self.x_post.clone(), self.p_post.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub steps: Vec<FilterStep>,
    pub total_loglik: f64,
}

impl FilterResult {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One row per step: `t, x_pred_*, x_post_*, innovation_*, loglik_increment`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.steps.first() else {
            w.flush()?;
            return Ok(());
        };
        let n = first.x_pred.len();
        let k = first.innovation.len();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_pred_{i}")));
        header.extend((0..n).map(|i| format!("x_post_{i}")));
        header.extend((0..k).map(|i| format!("innovation_{i}")));
        header.push("loglik_increment".into());
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.x_pred.iter().map(|v| v.to_string()));
            row.extend(s.x_post.iter().map(|v| v.to_string()));
            row.extend(s.innovation.iter().map(|v| v.to_string()));
            row.push(s.loglik_increment.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Time update into step `t`: `F x + B u + c`, `F P F^T + Q`.
pub fn predict(prior: &Gaussian, spec: &LgssmSpec, u: Option<&DVector<f64>>, t: usize) -> Gaussian {
    predict_with_gain(prior, spec, u, t, None)
}

/// Time update where a gain-feedback offset sees the previous step's gain.
pub fn predict_with_gain(
    prior: &Gaussian,
    spec: &LgssmSpec,
    u: Option<&DVector<f64>>,
    t: usize,
    prev_gain: Option<&DMatrix<f64>>,
) -> Gaussian {
    let f = spec.f(t);
    let mean = f * &prior.mean + spec.drive(t, u, prev_gain);
    let cov = f * &prior.cov * f.transpose() + spec.q(t);
    Gaussian::from_parts(mean, cov)
}

/// Joseph covariance update for an arbitrary gain.
pub fn joseph_update(
    p: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let i_kh = DMatrix::identity(p.nrows(), p.nrows()) - gain * h;
    gaussian::symmetrize(&(&i_kh * p * i_kh.transpose() + gain * r * gain.transpose()))
}

/// Reduced covariance update `(I - K H) P`; only valid for the optimal gain.
pub fn reduced_update(p: &DMatrix<f64>, gain: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let i_kh = DMatrix::identity(p.nrows(), p.nrows()) - gain * h;
    gaussian::symmetrize(&(i_kh * p))
}

/// Measurement update at step `t`.
pub fn update(
    pred: &Gaussian,
    z: &DVector<f64>,
    spec: &LgssmSpec,
    t: usize,
    form: CovarianceForm,
) -> Result<FilterStep> {
    let h = spec.h(t);
    let r = spec.r(t);
    let d = spec.d(t);
    if z.len() != h.nrows() {
        return Err(Error::Dimension(format!(
            "observation at step {t} has length {}, expected {}",
            z.len(),
            h.nrows()
        )));
    }
    let innovation = z - (h * &pred.mean + d);
    let s = gaussian::symmetrize(&(h * &pred.cov * h.transpose() + r));
    let s_inv =
        gaussian::invert_spd(&s, "innovation covariance").map_err(|_| Error::SingularInnovation { step: t })?;
    let gain = &pred.cov * h.transpose() * &s_inv;
    let x_post = &pred.mean + &gain * &innovation;
    let p_post = match form {
        CovarianceForm::Reduced => reduced_update(&pred.cov, &gain, h),
        // Rounding can leave a slightly indefinite result, which unstable
        // dynamics then amplify.
        CovarianceForm::Joseph => gaussian::clamp_psd(&joseph_update(&pred.cov, &gain, h, r)).0,
    };
    let log_det = gaussian::log_det_spd(&s, "innovation covariance")
        .map_err(|_| Error::SingularInnovation { step: t })?;
    let maha = (innovation.transpose() * &s_inv * &innovation)[(0, 0)];
    let k = z.len() as f64;
    let loglik_increment = -0.5 * (k * (2.0 * PI).ln() + log_det + maha);
    let post_fit_residual = z - (h * &x_post + d);
    Ok(FilterStep {
        t,
        x_pred: pred.mean.clone(),
        p_pred: pred.cov.clone(),
        x_post,
        p_post,
        innovation,
        s,
        gain,
        post_fit_residual,
        loglik_increment,
    })
}

/// The four equivalent expressions of the optimal gain:
///
/// 1. `P H^T (H P H^T + R)^-1`
/// 2. `(P^-1 + H^T R^-1 H)^-1 H^T R^-1`
/// 3. `(P - P H^T (H P H^T + R)^-1 H P) H^T R^-1`
/// 4. `P_post H^T R^-1`
///
/// `p_pred` and `p_post` are the predicted and updated covariances of step `t`.
pub fn gain_forms(
    p_pred: &DMatrix<f64>,
    p_post: &DMatrix<f64>,
    spec: &LgssmSpec,
    t: usize,
) -> Result<[DMatrix<f64>; 4]> {
    let h = spec.h(t);
    let r = spec.r(t);
    let ht = h.transpose();
    let s = h * p_pred * &ht + r;
    let s_inv = gaussian::invert(&s, "H P H^T + R")?;
    let r_inv = gaussian::invert(r, "R")?;
    let p_inv = gaussian::invert(p_pred, "P_pred")?;

    let k1 = p_pred * &ht * &s_inv;
    let info = gaussian::invert(&(p_inv + &ht * &r_inv * h), "P^-1 + H^T R^-1 H")?;
    let k2 = info * &ht * &r_inv;
    let k3 = (p_pred - p_pred * &ht * &s_inv * h * p_pred) * &ht * &r_inv;
    let k4 = p_post * &ht * &r_inv;
    Ok([k1, k2, k3, k4])
}

/// Posterior mean written as an autoregression on the previous posterior:
/// `(F - K H F) x_prev + (B u + K (z - H B u))`, with the offsets `c`, `d` taken as zero.
pub fn autoregressive_posterior(
    x_prev_post: &DVector<f64>,
    gain: &DMatrix<f64>,
    z: &DVector<f64>,
    spec: &LgssmSpec,
    u: &DVector<f64>,
    t: usize,
) -> DVector<f64> {
    let f = spec.f(t);
    let h = spec.h(t);
    let bu = spec.b(t) * u;
    (f - gain * h * f) * x_prev_post + (&bu + gain * (z - h * &bu))
}

/// Runs the filter from `spec.init` over all observations with a Joseph update.
pub fn filter(
    spec: &LgssmSpec,
    observations: &[DVector<f64>],
    controls: Option<&[DVector<f64>]>,
) -> Result<FilterResult> {
    filter_with(spec, observations, controls, CovarianceForm::Joseph)
}

pub fn filter_with(
    spec: &LgssmSpec,
    observations: &[DVector<f64>],
    controls: Option<&[DVector<f64>]>,
    form: CovarianceForm,
) -> Result<FilterResult> {
    let mut run = FilterRun::new(spec, form);
    if observations.is_empty() {
        return Err(Error::InvalidArgument("no observations to filter".into()));
    }
    if let Some(c) = controls {
        if c.len() != observations.len() {
            return Err(Error::Dimension(format!(
                "{} controls for {} observations",
                c.len(),
                observations.len()
            )));
        }
    }
    for (i, z) in observations.iter().enumerate() {
        run.step(z, controls.map(|c| &c[i]))?;
    }
    Ok(run.finish())
}

/// Incremental filter: feed one observation at a time.
#[derive(Debug, Clone)]
pub struct FilterRun<'a> {
    spec: &'a LgssmSpec,
    form: CovarianceForm,
    steps: Vec<FilterStep>,
    total_loglik: f64,
}

impl<'a> FilterRun<'a> {
    pub fn new(spec: &'a LgssmSpec, form: CovarianceForm) -> Self {
        Self {
            spec,
            form,
            steps: Vec::new(),
            total_loglik: 0.0,
        }
    }

    /// Prediction for the next step before its observation arrives.
    pub fn next_prediction(&self, u: Option<&DVector<f64>>) -> Gaussian {
        match self.steps.last() {
            None => self.spec.init.clone(),
            Some(prev) => predict_with_gain(
                &prev.posterior(),
                self.spec,
                u,
                prev.t + 1,
                Some(&prev.gain),
            ),
        }
    }

    pub fn step(&mut self, z: &DVector<f64>, u: Option<&DVector<f64>>) -> Result<&FilterStep> {
        let t = self.steps.len() + 1;
        let pred = self.next_prediction(u);
        let step = update(&pred, z, self.spec, t, self.form)?;
        if !step.x_post.iter().all(|v| v.is_finite()) || !step.p_post.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularMatrix(format!("non-finite filter state at step {t}")));
        }
        self.total_loglik += step.loglik_increment;
        self.steps.push(step);
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn steps(&self) -> &[FilterStep] {
        &self.steps
    }

    pub fn finish(self) -> FilterResult {
        FilterResult {
            steps: self.steps,
            total_loglik: self.total_loglik,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_spec(f: f64, q: f64, r: f64, p0: f64) -> LgssmSpec {
        LgssmSpec::time_invariant(
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            Gaussian::new(DVector::zeros(1), DMatrix::from_element(1, 1, p0)).unwrap(),
        )
        .unwrap()
    }

    fn g1(m: f64, v: f64) -> Gaussian {
        Gaussian::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn predict_cases() {
        let spec = LgssmSpec::time_invariant(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_element(1, 1, 1.0),
            Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap();
        let prior = Gaussian::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        assert_eq!(predict(&prior, &spec, None, 2), prior);

        let pred = predict(&g1(0.0, 1.0), &scalar_spec(1.0, 1.0, 1.0, 1.0), None, 2);
        assert_eq!(pred.mean[0], 0.0);
        assert_eq!(pred.cov[(0, 0)], 2.0);

        let mut trend = spec.clone();
        trend.f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]).into();
        let pred = predict(&prior, &trend, None, 2);
        assert_eq!(pred.mean, DVector::from_vec(vec![3.0, 2.0]));
    }

    #[test]
    fn update_by_hand() {
        let spec = scalar_spec(1.0, 1.0, 1.0, 1.0);
        let step = update(&g1(0.0, 2.0), &DVector::from_element(1, 2.0), &spec, 1, CovarianceForm::Joseph)
            .unwrap();
        assert_abs_diff_eq!(step.s[(0, 0)], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.gain[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.x_post[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.p_post[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.post_fit_residual[0], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_uncertainty_gives_half_gain() {
        let spec = scalar_spec(1.0, 1.0, 1.7, 1.0);
        let step = update(&g1(0.0, 1.7), &DVector::from_element(1, 1.0), &spec, 1, CovarianceForm::Reduced)
            .unwrap();
        assert_abs_diff_eq!(step.gain[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn huge_measurement_noise_is_ignored() {
        let spec = scalar_spec(1.0, 1.0, 1e12, 1.0);
        let step = update(&g1(5.0, 1.0), &DVector::from_element(1, 1e3), &spec, 1, CovarianceForm::Joseph)
            .unwrap();
        assert!((step.x_post[0] - 5.0).abs() / 5.0 < 1e-6);
    }

    #[test]
    fn singular_innovation_reports_step() {
        let spec = scalar_spec(1.0, 0.0, 0.0, 0.0);
        let err = update(&g1(0.0, 0.0), &DVector::from_element(1, 1.0), &spec, 7, CovarianceForm::Joseph)
            .unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { step: 7 }));
    }

    #[test]
    fn gain_forms_scalar_and_unobservable() {
        let spec = scalar_spec(1.0, 1.0, 1.0, 1.0);
        let p = DMatrix::from_element(1, 1, 2.0);
        let post = DMatrix::from_element(1, 1, 2.0 / 3.0);
        for k in gain_forms(&p, &post, &spec, 1).unwrap() {
            assert_abs_diff_eq!(k[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        }
        let mut blind = spec.clone();
        blind.h = DMatrix::zeros(1, 1).into();
        for k in gain_forms(&p, &p, &blind, 1).unwrap() {
            assert_eq!(k[(0, 0)], 0.0);
        }
    }

    #[test]
    fn single_observation_is_predict_then_update() {
        let spec = scalar_spec(0.8, 0.5, 2.0, 3.0);
        let z = [DVector::from_element(1, 1.3)];
        let res = filter(&spec, &z, None).unwrap();
        let direct = update(&spec.init, &z[0], &spec, 1, CovarianceForm::Joseph).unwrap();
        assert_eq!(res.steps[0], direct);
        assert_eq!(res.total_loglik, direct.loglik_increment);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let spec = scalar_spec(1.0, 1.0, 1.0, 1.0);
        assert!(filter(&spec, &[], None).is_err());
        let z = vec![DVector::from_element(1, 1.0); 3];
        let u = vec![DVector::from_element(1, 1.0); 2];
        assert!(filter(&spec, &z, Some(&u)).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let spec = scalar_spec(1.0, 1.0, 1.0, 1.0);
        let z: Vec<_> = (0..5).map(|i| DVector::from_element(1, i as f64)).collect();
        let res = filter(&spec, &z, None).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x_pred_0,x_post_0,innovation_0,loglik_increment");
        assert_eq!(lines.len(), 6);
    }
}
