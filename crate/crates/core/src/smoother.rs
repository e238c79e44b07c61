//! Backward passes: Rauch-Tung-Striebel, inverse dynamics, the modified
//! Bryson-Frazier backward information filter and two-filter fusion.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{self, CanonicalGaussian, Gaussian};
use crate::kalman::{FilterResult, FilterStep};
use crate::lgssm::LgssmSpec;

/// |det F| below which F is nudged by `F_PERTURBATION * I` before inversion.
pub const F_DET_TOL: f64 = 1e-10;
pub const F_PERTURBATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothStep {
    pub t: usize,
    pub x_smooth: DVector<f64>,
    pub p_smooth: DMatrix<f64>,
    /// Smoother gain `L_t`; zero at the last step.
    pub l_gain: DMatrix<f64>,
}

impl SmoothStep {
    pub fn marginal(&self) -> Gaussian {
        Gaussian::from_parts(self.x_smooth.clone(), self.p_smooth.clone())
    }
}

/// `L_t = P_{t|t} F_{t+1}^T P_{t+1|t}^-1`, from forward quantities only.
pub fn rts_gain(filtered: &FilterResult, spec: &LgssmSpec, t: usize) -> Result<DMatrix<f64>> {
    let now = &filtered.steps[t - 1];
    let next = &filtered.steps[t];
    let p_pred_inv = gaussian::invert(&next.p_pred, &format!("P_{{t+1|t}} at step {}", t + 1))?;
    Ok(&now.p_post * spec.f(t + 1).transpose() * p_pred_inv)
}

pub fn rts_smooth(filtered: &FilterResult, spec: &LgssmSpec) -> Result<Vec<SmoothStep>> {
    let len = filtered.steps.len();
    let Some(last) = filtered.steps.last() else {
        return Ok(Vec::new());
    };
    let n = last.x_post.len();
    let mut out = vec![SmoothStep {
        t: last.t,
        x_smooth: last.x_post.clone(),
        p_smooth: last.p_post.clone(),
        l_gain: DMatrix::zeros(n, n),
    }];
    for t in (1..len).rev() {
        let now = &filtered.steps[t - 1];
        let next = &filtered.steps[t];
        let later = out.last().expect("seeded with the last step");
        let l = rts_gain(filtered, spec, t)?;
        let x = &now.x_post + &l * (&later.x_smooth - &next.x_pred);
        let p = &now.p_post + &l * (&later.p_smooth - &next.p_pred) * l.transpose();
        out.push(SmoothStep {
            t,
            x_smooth: x,
            p_smooth: gaussian::symmetrize(&p),
            l_gain: l,
        });
    }
    out.reverse();
    Ok(out)
}

/// One row per step: `t, x_smooth_*, p_smooth_diag_*`.
pub fn write_smooth_csv<W: Write>(steps: &[SmoothStep], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = steps.first() {
        let n = first.x_smooth.len();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_smooth_{i}")));
        header.extend((0..n).map(|i| format!("p_smooth_diag_{i}")));
        w.write_record(&header)?;
        for s in steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.x_smooth.iter().map(|v| v.to_string()));
            row.extend(s.p_smooth.diagonal().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reversed-arrow parameterization of the transition `x_t -> x_{t+1}`:
/// `x_t = F~ x_{t+1} + B~ u_{t+1} + w~`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDynamics {
    pub f_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
}

fn invert_transition(f: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let f = if f.determinant().abs() < F_DET_TOL {
        log::warn!("F at step {step} is near singular, perturbing by {F_PERTURBATION}·I");
        f + DMatrix::identity(n, n) * F_PERTURBATION
    } else {
        f.clone()
    };
    gaussian::invert(&f, "F").map_err(|_| Error::SingularTransition { step })
}

/// Inverse dynamics for the transition into step `t + 1`, given the
/// unconditional covariance `p_next = P_{t+1}`:
///
/// `F~ = F^-1 (I - Q P^-1)`, `B~ = -F^-1 B`, `Q~ = F^-1 Q (I - P^-1 Q) F^-T`.
pub fn inverse_dynamics(spec: &LgssmSpec, p_next: &DMatrix<f64>, t: usize) -> Result<InverseDynamics> {
    let step = t + 1;
    let f_inv = invert_transition(spec.f(step), step)?;
    let q = spec.q(step);
    let n = q.nrows();
    let eye = DMatrix::identity(n, n);
    let p_inv = gaussian::invert(p_next, &format!("unconditional covariance at step {step}"))?;
    let f_tilde = &f_inv * (&eye - q * &p_inv);
    let b_tilde = -(&f_inv * spec.b(step));
    let q_tilde = gaussian::symmetrize(&(&f_inv * q * (&eye - &p_inv * q) * f_inv.transpose()));
    Ok(InverseDynamics {
        f_tilde,
        b_tilde,
        q_tilde,
    })
}

/// Prior moments of `x_1..x_T` matching the drive the forward filter used.
/// With gain feedback, the offsets are evaluated with the forward gains.
pub fn prior_moments(spec: &LgssmSpec, forward: Option<&FilterResult>, horizon: usize) -> Vec<Gaussian> {
    let mut out: Vec<Gaussian> = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let g = match out.last() {
            None => spec.init.clone(),
            Some(prev) => {
                let gain = forward.and_then(|f| f.steps.get(t - 2)).map(|s| &s.gain);
                let f = spec.f(t);
                Gaussian::from_parts(
                    f * &prev.mean + spec.drive(t, None, gain),
                    f * &prev.cov * f.transpose() + spec.q(t),
                )
            }
        };
        out.push(g);
    }
    out
}

/// Backward information filter state at step `t`: the canonical
/// parameters of `x_t | z_{t+1..T}` (`*_pred`) and `x_t | z_{t..T}` (`*_post`).
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardInfoStep {
    pub t: usize,
    pub eta_pred: DVector<f64>,
    pub lambda_pred: DMatrix<f64>,
    pub eta_post: DVector<f64>,
    pub lambda_post: DMatrix<f64>,
    pub m_tilde: DMatrix<f64>,
}

impl BackwardInfoStep {
    /// Moments of `x_t | z_{t+1..T}`.
    pub fn future_only(&self) -> Result<Gaussian> {
        CanonicalGaussian {
            eta: self.eta_pred.clone(),
            lambda: self.lambda_pred.clone(),
        }
        .to_moment()
    }
}

/// Modified Bryson-Frazier backward pass. Uses the unconditional prior
/// built from `spec.init`; the recursion starts at `T` from that prior.
pub fn mbf_smooth(spec: &LgssmSpec, observations: &[DVector<f64>]) -> Result<Vec<BackwardInfoStep>> {
    let prior = prior_moments(spec, None, observations.len());
    mbf_smooth_with(spec, observations, &prior)
}

/// Backward pass against explicit prior moments `prior[t-1] = N(mu_t, P_t)`.
///
/// For `t < T`, with `F, Q` the transition into `t + 1` and `P = P_{t+1}`:
///
/// ```text
/// M~_t        = F^T Q^-1 (Λ_{t+1|t+1} + Q^-1 - P^-1)^-1
/// Λ_{t|t+1}   = F^T (Q - Q P^-1 Q)^-1 F - M~_t Q^-1 F
/// η_{t|t+1}   = M~_t η_{t+1|t+1} + Λ_{t|t+1} o_t,   o_t = mu_t - F~ mu_{t+1}
/// η_{t|t}     = η_{t|t+1} + H^T R^-1 (z_t - d_t)
/// Λ_{t|t}     = Λ_{t|t+1} + H^T R^-1 H
/// ```
///
/// and `Λ_{T|T+1} = P_T^-1`, `η_{T|T+1} = P_T^-1 mu_T`.
pub fn mbf_smooth_with(
    spec: &LgssmSpec,
    observations: &[DVector<f64>],
    prior: &[Gaussian],
) -> Result<Vec<BackwardInfoStep>> {
    let len = observations.len();
    if prior.len() != len {
        return Err(Error::Dimension(format!(
            "{} prior moments for {len} observations",
            prior.len()
        )));
    }
    if len == 0 {
        return Ok(Vec::new());
    }
    let n = spec.state_dim();
    let mut out: Vec<BackwardInfoStep> = Vec::with_capacity(len);
    for t in (1..=len).rev() {
        let (eta_pred, lambda_pred, m_tilde) = match out.last() {
            None => {
                let lambda = gaussian::invert(&prior[t - 1].cov, &format!("P_{t}"))?;
                (&lambda * &prior[t - 1].mean, lambda, DMatrix::zeros(n, n))
            }
            Some(later) => {
                let step = t + 1;
                let f = spec.f(step);
                let q = spec.q(step);
                let p_next = &prior[t].cov;
                let q_inv = gaussian::invert(q, &format!("Q at step {step}"))
                    .map_err(|_| Error::SingularProcessNoise {
                        step,
                        context: "modified Bryson-Frazier backward pass".into(),
                    })?;
                let p_inv = gaussian::invert(p_next, &format!("P_{step}"))?;
                let inner = &later.lambda_post + &q_inv - &p_inv;
                let inner_inv = gaussian::invert(&inner, &format!("Λ + Q^-1 - P^-1 at step {step}"))?;
                let m = f.transpose() * &q_inv * inner_inv;
                let reduced = q - q * &p_inv * q;
                let reduced_inv = gaussian::invert(&reduced, &format!("Q - Q P^-1 Q at step {step}"))?;
                let lambda = gaussian::symmetrize(&(f.transpose() * reduced_inv * f - &m * &q_inv * f));
                let inv = inverse_dynamics(spec, p_next, t)?;
                let offset = &prior[t - 1].mean - &inv.f_tilde * &prior[t].mean;
                let eta = &m * &later.eta_post + &lambda * offset;
                (eta, lambda, m)
            }
        };
        let h = spec.h(t);
        let r_inv = gaussian::invert_spd(spec.r(t), "R").map_err(|_| Error::SingularMeasurementNoise { step: t })?;
        let ht_rinv = h.transpose() * r_inv;
        let eta_post = &eta_pred + &ht_rinv * (&observations[t - 1] - spec.d(t));
        let lambda_post = gaussian::symmetrize(&(&lambda_pred + &ht_rinv * h));
        out.push(BackwardInfoStep {
            t,
            eta_pred,
            lambda_pred,
            eta_post,
            lambda_post,
            m_tilde,
        });
    }
    out.reverse();
    Ok(out)
}

/// Combines the forward filtered estimate with the backward estimate from
/// future observations, removing the prior counted by both:
///
/// `P_{t|T} = (P_{t|t}^-1 + P_{t|t+1}^-1 - Σ_t^-1)^-1`,
/// `x_{t|T} = P_{t|T} (P_{t|t}^-1 x_{t|t} + η_{t|t+1} - Σ_t^-1 mu_t)`.
pub fn fuse_posterior(forward: &FilterStep, backward: &BackwardInfoStep, prior: &Gaussian) -> Result<Gaussian> {
    let t = forward.t;
    let fwd_prec = gaussian::invert(&forward.p_post, &format!("P_{{t|t}} at step {t}"))?;
    let prior_prec = gaussian::invert(&prior.cov, &format!("Σ_{t}"))?;
    let precision = gaussian::symmetrize(&(&fwd_prec + &backward.lambda_pred - &prior_prec));
    let cov = gaussian::invert_spd(&precision, "fused precision").map_err(|_| Error::FusionFailure { step: t })?;
    let info = &fwd_prec * &forward.x_post + &backward.eta_pred - &prior_prec * &prior.mean;
    Ok(Gaussian::from_parts(&cov * info, cov))
}

/// Two-filter smoother: forward Kalman pass, backward MBF pass, fusion.
pub fn two_filter_smooth(
    spec: &LgssmSpec,
    forward: &FilterResult,
    observations: &[DVector<f64>],
) -> Result<Vec<Gaussian>> {
    let prior = prior_moments(spec, Some(forward), observations.len());
    let backward = mbf_smooth_with(spec, observations, &prior)?;
    forward
        .steps
        .iter()
        .zip(&backward)
        .zip(&prior)
        .map(|((f, b), p)| fuse_posterior(f, b, p))
        .collect()
}
