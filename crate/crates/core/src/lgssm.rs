//! Linear-Gaussian state-space models.
//!
//! ```text
//! x_t = F_t x_{t-1} + B_t u_t + c_t + w_t,   w_t ~ N(0, Q_t)
//! z_t = H_t x_t + d_t + v_t,                 v_t ~ N(0, R_t)
//! x_1 ~ init
//! ```
//!
//! Steps are numbered from 1. `F_t`, `Q_t`, `c_t` act on the transition into
//! step `t`; the prior `init` describes `x_1` directly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, Gaussian};

/// A system quantity that is either fixed or given per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Constant(T),
    /// Entry `i` applies to step `i + 1`; steps past the end reuse the last entry.
    PerStep(Vec<T>),
}

impl<T> Schedule<T> {
    pub fn at(&self, t: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::PerStep(v) => &v[t.saturating_sub(1).min(v.len() - 1)],
        }
    }

    fn first(&self) -> &T {
        self.at(1)
    }

    fn all(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Schedule::Constant(v) => Box::new(std::iter::once(v)),
            Schedule::PerStep(v) => Box::new(v.iter()),
        }
    }
}

impl<T> From<T> for Schedule<T> {
    fn from(v: T) -> Self {
        Schedule::Constant(v)
    }
}

/// State offset that depends on the Kalman gain of the previous step:
/// `c_t[i] = scale[i] * (level[i] - K_{t-1}[i])`, with `K_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainFeedback {
    pub scale: DVector<f64>,
    pub level: DVector<f64>,
}

impl GainFeedback {
    pub fn offset(&self, prev_gain: Option<&DMatrix<f64>>) -> DVector<f64> {
        let n = self.scale.len();
        DVector::from_fn(n, |i, _| {
            let k = prev_gain.map_or(0.0, |g| g[(i, 0)]);
            self.scale[i] * (self.level[i] - k)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgssmSpec {
    pub f: Schedule<DMatrix<f64>>,
    pub b: Schedule<DMatrix<f64>>,
    pub h: Schedule<DMatrix<f64>>,
    pub q: Schedule<DMatrix<f64>>,
    pub r: Schedule<DMatrix<f64>>,
    pub c_offset: Schedule<DVector<f64>>,
    pub d_offset: Schedule<DVector<f64>>,
    pub init: Gaussian,
    /// When set, replaces `c_offset` inside the filters.
    pub gain_feedback: Option<GainFeedback>,
}

impl LgssmSpec {
    /// Time-invariant model without control or offsets.
    pub fn time_invariant(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self> {
        let n = f.nrows();
        let k = h.nrows();
        Self {
            f: f.into(),
            b: DMatrix::zeros(n, 1).into(),
            h: h.into(),
            q: q.into(),
            r: r.into(),
            c_offset: DVector::zeros(n).into(),
            d_offset: DVector::zeros(k).into(),
            init,
            gain_feedback: None,
        }
        .validated()
    }

    /// Checks dimensions and noise covariances. `Q` and `R` must be
    /// symmetric PSD; `R` may be singular here, the filters report a
    /// singular innovation covariance when it matters.
    pub fn validated(mut self) -> Result<Self> {
        let n = self.init.dim();
        let k = self.h.first().nrows();
        let m = self.b.first().ncols();
        let dims = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
            if mat.shape() != (r, c) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            Ok(())
        };
        for f in self.f.all() {
            dims("F", f, n, n)?;
        }
        for b in self.b.all() {
            dims("B", b, n, m)?;
        }
        for h in self.h.all() {
            dims("H", h, k, n)?;
        }
        for q in self.q.all() {
            dims("Q", q, n, n)?;
            if !gaussian::is_psd(q) {
                return Err(Error::InvalidModel("Q is not positive semi-definite".into()));
            }
        }
        for r in self.r.all() {
            dims("R", r, k, k)?;
            if !gaussian::is_psd(r) {
                return Err(Error::InvalidModel("R is not positive semi-definite".into()));
            }
        }
        for c in self.c_offset.all() {
            if c.len() != n {
                return Err(Error::Dimension(format!("c has length {}, expected {n}", c.len())));
            }
        }
        for d in self.d_offset.all() {
            if d.len() != k {
                return Err(Error::Dimension(format!("d has length {}, expected {k}", d.len())));
            }
        }
        if let Some(fb) = &self.gain_feedback {
            if fb.scale.len() != n || fb.level.len() != n || k != 1 {
                return Err(Error::Dimension(
                    "gain feedback needs an n-vector pair and a scalar measurement".into(),
                ));
            }
        }
        let sym = |s: &mut Schedule<DMatrix<f64>>| match s {
            Schedule::Constant(m) => *m = gaussian::symmetrize(m),
            Schedule::PerStep(v) => v.iter_mut().for_each(|m| *m = gaussian::symmetrize(m)),
        };
        sym(&mut self.q);
        sym(&mut self.r);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.init.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.first().nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.first().ncols()
    }

    pub fn f(&self, t: usize) -> &DMatrix<f64> {
        self.f.at(t)
    }
    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        self.b.at(t)
    }
    pub fn h(&self, t: usize) -> &DMatrix<f64> {
        self.h.at(t)
    }
    pub fn q(&self, t: usize) -> &DMatrix<f64> {
        self.q.at(t)
    }
    pub fn r(&self, t: usize) -> &DMatrix<f64> {
        self.r.at(t)
    }
    pub fn d(&self, t: usize) -> &DVector<f64> {
        self.d_offset.at(t)
    }

    /// State offset for step `t`. With gain feedback the previous step's
    /// gain is used (zero when unknown).
    pub fn c(&self, t: usize, prev_gain: Option<&DMatrix<f64>>) -> DVector<f64> {
        match &self.gain_feedback {
            Some(fb) => fb.offset(prev_gain),
            None => self.c_offset.at(t).clone(),
        }
    }

    /// Deterministic drive `B_t u_t + c_t`. Controls default to the constant 1.
    pub fn drive(
        &self,
        t: usize,
        u: Option<&DVector<f64>>,
        prev_gain: Option<&DMatrix<f64>>,
    ) -> DVector<f64> {
        let b = self.b(t);
        let bu = match u {
            Some(u) => b * u,
            None => b * DVector::from_element(b.ncols(), 1.0),
        };
        bu + self.c(t, prev_gain)
    }
}

/// Which of the four trading model layouts a parameter vector describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_id: u8,
    pub p: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    1.0
}

impl ModelParams {
    pub fn new(model_id: u8, p: Vec<f64>) -> Self {
        Self {
            model_id,
            p,
            dt: 1.0,
        }
    }

    /// Number of parameters for each model layout.
    pub fn arity(model_id: u8) -> Option<usize> {
        match model_id {
            0 => Some(4),
            1 => Some(5),
            2 => Some(6),
            3 => Some(11),
            4 => Some(15),
            _ => None,
        }
    }
}

fn q_block(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a * a, a * b, a * b, c * c])
}

/// Assembles the state-space model for one of the four parameter layouts.
///
/// | model | F                  | H          | Q                       | R    | P0              | c |
/// |-------|--------------------|------------|-------------------------|------|-----------------|---|
/// | 1     | [[1, dt], [0, 1]]  | [1, 0]     | [[p1², p1p2], [., p3²]] | p4   | diag(p5, p5)    | 0 |
/// | 2     | [[1, dt], [0, 1]]  | [1, 0]     | [[p1², p1p2], [., p3²]] | p4   | diag(p5, p6)    | 0 |
/// | 3     | [[p1, p2], [0, p3]]| [p4, p5]   | [[p6², p6p7], [., p8²]] | p9   | diag(p10, p11)  | 0 |
/// | 4     | as model 3         |            |                         |      |                 | [p12(p13 - K1), p14(p15 - K2)] |
///
/// Model 0 is the scalar layout `x' = p1 x + w`, `z = x + v` with
/// `Q = p2`, `R = p3`, `P0 = p4`; it is what the EM fitter accepts.
///
/// The prior mean is zero; callers that track prices re-anchor it. An
/// indefinite Q is repaired by clamping its negative eigenvalues.
pub fn build_model(params: &ModelParams) -> Result<LgssmSpec> {
    let id = params.model_id;
    let expected = ModelParams::arity(id)
        .ok_or_else(|| Error::InvalidModel(format!("unknown model id {id}")))?;
    if params.p.len() != expected {
        return Err(Error::ParamArity {
            model: id,
            expected,
            got: params.p.len(),
        });
    }
    if params.p.iter().any(|v| !v.is_finite()) || !params.dt.is_finite() {
        return Err(Error::InvalidModel("non-finite parameter".into()));
    }
    let p = |i: usize| params.p[i - 1];
    let dt = params.dt;
    if id == 0 {
        return scalar_model(p(1), p(2), p(3), p(4));
    }

    let (f, h, q, r, p0) = match id {
        1 | 2 => (
            DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q_block(p(1), p(2), p(3)),
            p(4),
            if id == 1 { (p(5), p(5)) } else { (p(5), p(6)) },
        ),
        _ => (
            DMatrix::from_row_slice(2, 2, &[p(1), p(2), 0.0, p(3)]),
            DMatrix::from_row_slice(1, 2, &[p(4), p(5)]),
            q_block(p(6), p(7), p(8)),
            p(9),
            (p(10), p(11)),
        ),
    };
    if r < 0.0 {
        return Err(Error::InvalidModel(format!("measurement variance {r} is negative")));
    }
    if p0.0 < 0.0 || p0.1 < 0.0 {
        return Err(Error::InvalidModel("initial covariance has a negative diagonal".into()));
    }
    let (q, clamped) = gaussian::clamp_psd(&q);
    if clamped {
        log::warn!("model {id}: process noise covariance was indefinite, negative eigenvalues clamped to 0");
    }
    let init = Gaussian::from_parts(
        DVector::zeros(2),
        DMatrix::from_diagonal(&DVector::from_vec(vec![p0.0, p0.1])),
    );
    let gain_feedback = (id == 4).then(|| GainFeedback {
        scale: DVector::from_vec(vec![p(12), p(14)]),
        level: DVector::from_vec(vec![p(13), p(15)]),
    });
    let mut spec = LgssmSpec::time_invariant(f, h, q, DMatrix::from_element(1, 1, r), init)?;
    spec.gain_feedback = gain_feedback;
    Ok(spec)
}

fn scalar_model(f: f64, q: f64, r: f64, p0: f64) -> Result<LgssmSpec> {
    if q < 0.0 || r < 0.0 || p0 < 0.0 {
        return Err(Error::InvalidModel("scalar model variances must be non-negative".into()));
    }
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    LgssmSpec::time_invariant(
        m(f),
        m(1.0),
        m(q),
        m(r),
        Gaussian::from_parts(DVector::zeros(1), m(p0)),
    )
}

/// Unconditional mean of `x_t` given `x_1`:
/// `prod_{k=2}^t F_k x_1 + sum_{k=2}^t (prod_{l=k+1}^t F_l)(B_k u_k + c_k)`.
/// Gain feedback offsets are evaluated with a zero gain.
pub fn unconditional_mean(spec: &LgssmSpec, x1: &DVector<f64>, t: usize) -> DVector<f64> {
    (2..=t).fold(x1.clone(), |x, k| spec.f(k) * x + spec.drive(k, None, None))
}

/// `F_t P F_t^T + Q_t`.
pub fn lyapunov_step(spec: &LgssmSpec, p_prev: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let f = spec.f(t);
    gaussian::symmetrize(&(f * p_prev * f.transpose() + spec.q(t)))
}

/// `Cov(x_{t+1}, x_t) = F_{t+1} P_t`.
pub fn neighbor_cov(spec: &LgssmSpec, p_t: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    spec.f(t + 1) * p_t
}

/// Unconditional moments of `x_1..x_T` starting from `spec.init`.
pub fn unconditional_moments(spec: &LgssmSpec, horizon: usize) -> Vec<Gaussian> {
    let mut out: Vec<Gaussian> = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let g = match out.last() {
            None => spec.init.clone(),
            Some(prev) => Gaussian::from_parts(
                spec.f(t) * &prev.mean + spec.drive(t, None, None),
                lyapunov_step(spec, &prev.cov, t),
            ),
        };
        out.push(g);
    }
    out
}

/// Sampler for N(0, S) with S PSD, through the symmetric square root.
pub(crate) fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = gaussian::symmetrize(s).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Simulated trajectory.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

/// Draws `x_1 ~ init`, then propagates states and observations for
/// `horizon` steps. Same seed, same output.
pub fn simulate(spec: &LgssmSpec, horizon: usize, seed: u64) -> Result<Simulation> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.state_dim();
    let k = spec.obs_dim();
    let init_sqrt = psd_sqrt(&spec.init.cov);
    let mut states = Vec::with_capacity(horizon);
    let mut observations = Vec::with_capacity(horizon);
    let mut x = &spec.init.mean + &init_sqrt * standard_normal(&mut rng, n);
    for t in 1..=horizon {
        if t > 1 {
            let w = psd_sqrt(spec.q(t)) * standard_normal(&mut rng, n);
            x = spec.f(t) * &x + spec.drive(t, None, None) + w;
        }
        let v = psd_sqrt(spec.r(t)) * standard_normal(&mut rng, k);
        let z = spec.h(t) * &x + spec.d(t) + v;
        states.push(x.clone());
        observations.push(z);
    }
    Ok(Simulation {
        states,
        observations,
    })
}
