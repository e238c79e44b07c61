//! Expectation-maximization for the scalar random walk plus noise model
//! `x_k = F x_{k-1} + w_k`, `z_k = x_k + v_k`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::TraceRow;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::kalman::{self, FilterResult};
use crate::lgssm::LgssmSpec;
use crate::smoother::{self, SmoothStep};

/// Lower bound applied to both variance estimates.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Slack allowed when checking that the log-likelihood never drops.
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmTheta {
    pub sigma_v2: f64,
    pub sigma_w2: f64,
    pub f: f64,
}

impl EmTheta {
    pub fn new(sigma_v2: f64, sigma_w2: f64, f: f64) -> Self {
        Self { sigma_v2, sigma_w2, f }
    }
}

/// Which state estimates feed the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EStep {
    #[default]
    Smoothed,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStep {
    /// Closed forms on expected sufficient statistics, including the
    /// smoothed variances and lag-one covariances. Never lowers the
    /// likelihood. Requires smoothed estimates.
    #[default]
    ExpectedMoments,
    /// The same closed forms with the state estimates plugged in as if
    /// they were the true states. Cheaper, not guaranteed to be monotone.
    PointEstimates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the log-likelihood moves less than this.
    pub tol: f64,
    pub e_step: EStep,
    pub m_step: MStep,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            e_step: EStep::Smoothed,
            m_step: MStep::ExpectedMoments,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmState {
    pub theta: EmTheta,
    /// Log-likelihood of each visited parameter, the start included.
    pub loglik_history: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
    /// Set when the data has no variance and the floors carried the fit.
    pub degenerate: bool,
    pub monotone: bool,
}

impl EmState {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.loglik_history
            .iter()
            .enumerate()
            .map(|(i, &ll)| TraceRow {
                iteration: i,
                evaluations: i + 1,
                lambda: None,
                best_f: None,
                sigma: None,
                loglik: Some(ll),
            })
            .collect()
    }
}

/// Scalar model at `theta`. The prior on `x_1` stays fixed across iterations.
pub fn scalar_spec(theta: &EmTheta, prior: &Gaussian) -> Result<LgssmSpec> {
    LgssmSpec::time_invariant(
        DMatrix::from_element(1, 1, theta.f),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, theta.sigma_w2),
        DMatrix::from_element(1, 1, theta.sigma_v2),
        prior.clone(),
    )
}

/// Diffuse-ish prior centered on the first observation.
pub fn default_prior(data: &[f64]) -> Gaussian {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
    Gaussian::new(
        DVector::from_element(1, data[0]),
        DMatrix::from_element(1, 1, var.max(1.0)),
    )
    .expect("positive scalar variance")
}

struct Moments {
    /// E[x_k], Var[x_k] for k = 1..N.
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Cov[x_k, x_{k-1}] for k = 2..N, stored at index k-1; index 0 unused.
    lag_cov: Vec<f64>,
}

fn e_step(filtered: &FilterResult, spec: &LgssmSpec, opts: &EmOptions) -> Result<Moments> {
    let n = filtered.len();
    let exact = opts.m_step == MStep::ExpectedMoments;
    if opts.e_step == EStep::Filtered {
        return Ok(Moments {
            mean: filtered.steps.iter().map(|s| s.x_post[0]).collect(),
            var: vec![0.0; n],
            lag_cov: vec![0.0; n],
        });
    }
    let sm: Vec<SmoothStep> = smoother::rts_smooth(filtered, spec)?;
    let mean = sm.iter().map(|s| s.x_smooth[0]).collect();
    if !exact {
        return Ok(Moments {
            mean,
            var: vec![0.0; n],
            lag_cov: vec![0.0; n],
        });
    }
    let var = sm.iter().map(|s| s.p_smooth[(0, 0)]).collect();
    let mut lag_cov = vec![0.0; n];
    for k in 1..n {
        lag_cov[k] = sm[k - 1].l_gain[(0, 0)] * sm[k].p_smooth[(0, 0)];
    }
    Ok(Moments { mean, var, lag_cov })
}

fn m_step(data: &[f64], m: &Moments) -> (EmTheta, bool) {
    let n = data.len();
    let (mut s_cross, mut s_prev, mut s_next) = (0.0, 0.0, 0.0);
    for k in 1..n {
        s_cross += m.mean[k] * m.mean[k - 1] + m.lag_cov[k];
        s_prev += m.mean[k - 1].powi(2) + m.var[k - 1];
        s_next += m.mean[k].powi(2) + m.var[k];
    }
    let mut degenerate = false;
    let f = if s_prev > 0.0 {
        s_cross / s_prev
    } else {
        degenerate = true;
        1.0
    };
    let sigma_w2 = (s_next - 2.0 * f * s_cross + f * f * s_prev) / (n - 1) as f64;
    let sigma_v2 = data
        .iter()
        .zip(m.mean.iter().zip(&m.var))
        .map(|(z, (x, p))| (z - x).powi(2) + p)
        .sum::<f64>()
        / n as f64;
    if sigma_v2 < VARIANCE_FLOOR || sigma_w2 < VARIANCE_FLOOR {
        degenerate = true;
    }
    (
        EmTheta {
            sigma_v2: sigma_v2.max(VARIANCE_FLOOR),
            sigma_w2: sigma_w2.max(VARIANCE_FLOOR),
            f,
        },
        degenerate,
    )
}

/// Fits `theta` by EM with the default prior on `x_1`.
pub fn em_fit(data: &[f64], init: EmTheta, opts: &EmOptions) -> Result<EmState> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("EM needs at least two observations".into()));
    }
    em_fit_with_prior(data, init, &default_prior(data), opts)
}

pub fn em_fit_with_prior(data: &[f64], init: EmTheta, prior: &Gaussian, opts: &EmOptions) -> Result<EmState> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("EM needs at least two observations".into()));
    }
    if prior.dim() != 1 {
        return Err(Error::UnsupportedModel("EM is implemented for the scalar model only".into()));
    }
    if opts.m_step == MStep::ExpectedMoments && opts.e_step == EStep::Filtered {
        return Err(Error::InvalidArgument(
            "expected-moment M-step needs smoothed estimates".into(),
        ));
    }
    if !(init.sigma_v2 > 0.0 && init.sigma_w2 > 0.0) {
        return Err(Error::InvalidArgument("initial variances must be positive".into()));
    }
    let obs: Vec<DVector<f64>> = data.iter().map(|&z| DVector::from_element(1, z)).collect();
    let mut theta = init;
    let mut history = Vec::new();
    let mut degenerate = false;
    let mut converged = false;
    let mut iteration = 0;
    loop {
        let spec = scalar_spec(&theta, prior)?;
        let filtered = kalman::filter(&spec, &obs, None)?;
        history.push(filtered.total_loglik);
        if let [.., a, b] = history.as_slice() {
            if (b - a).abs() < opts.tol {
                converged = true;
                break;
            }
        }
        if iteration >= opts.max_iter {
            break;
        }
        let moments = e_step(&filtered, &spec, opts)?;
        let (next, flagged) = m_step(data, &moments);
        degenerate |= flagged;
        theta = next;
        iteration += 1;
    }
    if degenerate {
        log::warn!("EM hit the variance floor; the series may be degenerate");
    }
    let monotone = history.windows(2).all(|w| w[1] >= w[0] - MONOTONE_TOL);
    Ok(EmState {
        theta,
        loglik_history: history,
        iteration,
        converged,
        degenerate,
        monotone,
    })
}

/// Rejects anything but a one-dimensional state and measurement.
pub fn check_scalar(spec: &LgssmSpec) -> Result<()> {
    if spec.state_dim() != 1 || spec.obs_dim() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "EM needs a scalar model, got state dimension {} and measurement dimension {}",
            spec.state_dim(),
            spec.obs_dim()
        )));
    }
    Ok(())
}
