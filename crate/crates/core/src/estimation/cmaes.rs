//! (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation, minimizing.
//!
//! Sampling only touches the RNG and the current state, never objective
//! values, so any strictly increasing transform of the objective replays
//! the same iterates for the same seed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::TraceRow;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Draws per candidate before falling back to clamping into the box.
pub const MAX_RESAMPLES: usize = 100;
/// Eigenvalues of C are floored at this fraction of its trace.
pub const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension("bounds of different lengths".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("lower bound above upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (l, u))| v.clamp(*l, *u)),
        )
    }
}

/// Objective to minimize. `eval` must be pure; it may run on several threads.
pub struct Objective<F> {
    pub eval: F,
    pub dim: usize,
    pub bounds: Option<Bounds>,
}

impl<F> Objective<F>
where
    F: Fn(&DVector<f64>) -> f64 + Sync + Send,
{
    pub fn new(dim: usize, eval: F) -> Self {
        Self { eval, dim, bounds: None }
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = Some(bounds);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmaesConstants {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_w: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c1: f64,
    pub c_mu: f64,
    pub alpha: f64,
    /// E||N(0, I)||.
    pub chi_n: f64,
}

/// Defaults for dimension `n`: λ = 4 + ⌊3 ln n⌋, μ = ⌊λ/2⌋.
pub fn default_constants(n: usize, lambda: Option<usize>) -> Result<CmaesConstants> {
    let lambda = lambda.unwrap_or_else(|| 4 + (3.0 * (n.max(1) as f64).ln()).floor() as usize);
    constants_with_parents(n, lambda, lambda / 2)
}

/// Constants for an explicit parent count `mu`.
pub fn constants_with_parents(n: usize, lambda: usize, mu: usize) -> Result<CmaesConstants> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if lambda < 2 {
        return Err(Error::InvalidPopulation(lambda));
    }
    if mu == 0 || mu > lambda {
        return Err(Error::InvalidArgument(format!("parent count {mu} for population {lambda}")));
    }
    let raw: Vec<f64> = (1..=mu)
        .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_w = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let nf = n as f64;
    // The 3/n, 4/n, 2/n², μ_w/n² scalings, kept below one for small n.
    let c_sigma = 3.0 / (nf + 3.0);
    let c_c = 4.0 / (nf + 4.0);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_w);
    let c_mu = (1.0 - c1).min(2.0 * (mu_w - 2.0 + 1.0 / mu_w) / ((nf + 2.0).powi(2) + mu_w));
    Ok(CmaesConstants {
        lambda,
        mu,
        weights,
        mu_w,
        c_sigma,
        d_sigma: 1.0 + c_sigma,
        c_c,
        c1,
        c_mu,
        alpha: 1.5,
        chi_n: nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf)),
    })
}

impl CmaesConstants {
    /// Multiplier applied to σ given the new isotropic path length.
    pub fn step_size_factor(&self, p_sigma_norm: f64) -> f64 {
        ((self.c_sigma / self.d_sigma) * (p_sigma_norm / self.chi_n - 1.0)).exp()
    }

    /// Indicator that stalls the anisotropic path when ||p_σ|| is large.
    pub fn h_sigma(&self, p_sigma_norm: f64, n: usize) -> bool {
        p_sigma_norm <= self.alpha * (n as f64).sqrt()
    }

    /// Variance correction for a stalled p_c.
    pub fn c_s(&self, h_sigma: bool) -> f64 {
        let h = if h_sigma { 1.0 } else { 0.0 };
        (1.0 - h * h) * self.c1 * self.c_c * (2.0 - self.c_c)
    }
}

#[derive(Debug, Clone)]
pub struct CmaesState {
    pub m: DVector<f64>,
    pub sigma: f64,
    pub c: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub k: usize,
    pub constants: CmaesConstants,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
}

impl CmaesState {
    pub fn new(mean: DVector<f64>, sigma: f64, constants: CmaesConstants) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("initial sigma must be positive, got {sigma}")));
        }
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        Ok(Self {
            m: mean,
            sigma,
            c: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            k: 0,
            constants,
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Draws one generation from N(m, σ²C).
    pub fn ask(&self, rng: &mut ChaCha8Rng, bounds: Option<&Bounds>) -> Vec<DVector<f64>> {
        (0..self.constants.lambda)
            .map(|_| {
                let mut x = self.draw(rng);
                if let Some(b) = bounds {
                    let mut tries = 1;
                    while !b.contains(&x) && tries < MAX_RESAMPLES {
                        x = self.draw(rng);
                        tries += 1;
                    }
                    if !b.contains(&x) {
                        x = b.clamp(&x);
                    }
                }
                x
            })
            .collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        &self.m + (&self.basis * z.component_mul(&self.scales)) * self.sigma
    }

    /// Indices of `fitness` best first. Non-finite values rank last; ties
    /// keep evaluation order.
    pub fn ranking(fitness: &[f64]) -> Vec<usize> {
        let key = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
        let mut idx: Vec<usize> = (0..fitness.len()).collect();
        idx.sort_by(|&a, &b| key(fitness[a]).total_cmp(&key(fitness[b])));
        idx
    }

    /// Weighted mean of the best μ samples.
    pub fn recombine(&self, samples: &[DVector<f64>], order: &[usize]) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, &i) in self.constants.weights.iter().zip(order) {
            m += &samples[i] * *w;
        }
        m
    }

    /// Updates mean, paths, step size and covariance from one generation.
    pub fn tell(&mut self, samples: &[DVector<f64>], fitness: &[f64]) -> Result<()> {
        let cst = &self.constants;
        if samples.len() != cst.lambda || fitness.len() != cst.lambda {
            return Err(Error::Dimension(format!(
                "expected {} samples, got {} with {} values",
                cst.lambda,
                samples.len(),
                fitness.len()
            )));
        }
        let n = self.dim();
        let order = Self::ranking(fitness);
        let m_old = self.m.clone();
        let m_new = self.recombine(samples, &order);
        let step = (&m_new - &m_old) / self.sigma;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d))
            * self.basis.transpose();
        self.p_sigma = &self.p_sigma * (1.0 - cst.c_sigma)
            + inv_sqrt * &step * (cst.c_sigma * (2.0 - cst.c_sigma) * cst.mu_w).sqrt();
        let ps_norm = self.p_sigma.norm();
        let h = cst.h_sigma(ps_norm, n);
        let hv = if h { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - cst.c_c) + &step * (hv * (cst.c_c * (2.0 - cst.c_c) * cst.mu_w).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, &i) in cst.weights.iter().zip(&order) {
            let y = (&samples[i] - &m_old) / self.sigma;
            rank_mu += &y * y.transpose() * *w;
        }
        let discount = 1.0 - cst.c1 - cst.c_mu + cst.c_s(h);
        let c = &self.c * discount + &self.p_c * self.p_c.transpose() * cst.c1 + rank_mu * cst.c_mu;
        self.sigma *= cst.step_size_factor(ps_norm);
        self.m = m_new;
        self.set_covariance(c);
        self.k += 1;
        Ok(())
    }

    fn set_covariance(&mut self, c: DMatrix<f64>) {
        let c = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c.clone());
        let floor = EIGEN_FLOOR * c.trace().abs().max(f64::MIN_POSITIVE);
        let repaired = eig.eigenvalues.iter().any(|&v| v < floor || !v.is_finite());
        let values = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
        if repaired {
            log::warn!("covariance lost positive definiteness at iteration {}, eigenvalues floored", self.k);
            self.c = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
        } else {
            self.c = c;
        }
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CmaesOptions {
    /// Population size; defaults from the dimension.
    pub lambda: Option<usize>,
    pub max_iter: usize,
    pub max_evals: Option<usize>,
    /// Stop when the mean moves less than this in one generation.
    pub tol_x: f64,
    /// Stop once the best value reaches this.
    pub f_target: Option<f64>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            max_iter: 1000,
            max_evals: None,
            tol_x: 1e-12,
            f_target: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    MaxEvaluations,
    MeanStalled,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct CmaesResult {
    pub best_x: DVector<f64>,
    pub best_f: f64,
    pub evaluations: usize,
    /// Candidates whose objective came back NaN or infinite.
    pub non_finite: usize,
    pub stop: StopReason,
    pub trace: Vec<TraceRow>,
    /// Mean after every generation, starting with the initial mean.
    pub means: Vec<DVector<f64>>,
    pub state: CmaesState,
}

pub fn cmaes_minimize<F>(
    obj: &Objective<F>,
    init_mean: &DVector<f64>,
    init_sigma: f64,
    opts: &CmaesOptions,
) -> Result<CmaesResult>
where
    F: Fn(&DVector<f64>) -> f64 + Sync + Send,
{
    if init_mean.len() != obj.dim || obj.dim == 0 {
        return Err(Error::Dimension(format!(
            "initial mean has length {}, objective dimension {}",
            init_mean.len(),
            obj.dim
        )));
    }
    let constants = default_constants(obj.dim, opts.lambda)?;
    let mut state = CmaesState::new(init_mean.clone(), init_sigma, constants)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best_x = init_mean.clone();
    let mut best_f = f64::INFINITY;
    let mut evaluations = 0;
    let mut non_finite = 0;
    let mut trace = Vec::new();
    let mut means = vec![state.m.clone()];

    let stop = loop {
        if state.k >= opts.max_iter {
            break StopReason::MaxIterations;
        }
        if opts.max_evals.is_some_and(|cap| evaluations + state.constants.lambda > cap) {
            break StopReason::MaxEvaluations;
        }
        let samples = state.ask(&mut rng, obj.bounds.as_ref());
        let fitness = exec::map(opts.execution, &samples, |x| (obj.eval)(x));
        evaluations += samples.len();
        for (x, &f) in samples.iter().zip(&fitness) {
            if !f.is_finite() {
                non_finite += 1;
            } else if f < best_f {
                best_f = f;
                best_x = x.clone();
            }
        }
        let m_prev = state.m.clone();
        state.tell(&samples, &fitness)?;
        means.push(state.m.clone());
        trace.push(TraceRow {
            iteration: state.k,
            evaluations,
            lambda: Some(state.constants.lambda),
            best_f: Some(best_f),
            sigma: Some(state.sigma),
            loglik: None,
        });
        if opts.f_target.is_some_and(|t| best_f <= t) {
            break StopReason::TargetReached;
        }
        if (&state.m - m_prev).norm() < opts.tol_x {
            break StopReason::MeanStalled;
        }
    };
    Ok(CmaesResult {
        best_x,
        best_f,
        evaluations,
        non_finite,
        stop,
        trace,
        means,
        state,
    })
}

#[derive(Debug, Clone)]
pub struct RestartResult {
    pub best: CmaesResult,
    /// Population size of each run, in order.
    pub lambdas: Vec<usize>,
    pub run_best: Vec<f64>,
    pub evaluations: usize,
}

/// Runs `runs` independent searches from the same start, doubling λ each
/// time. Run `i` uses seed `opts.seed + i`; the first run is exactly
/// `cmaes_minimize` with `opts`.
pub fn restart_schedule<F>(
    obj: &Objective<F>,
    init_mean: &DVector<f64>,
    init_sigma: f64,
    opts: &CmaesOptions,
    runs: usize,
) -> Result<RestartResult>
where
    F: Fn(&DVector<f64>) -> f64 + Sync + Send,
{
    if runs == 0 {
        return Err(Error::InvalidArgument("restart budget must allow one run".into()));
    }
    let lambda0 = default_constants(obj.dim, opts.lambda)?.lambda;
    let mut best: Option<CmaesResult> = None;
    let mut lambdas = Vec::with_capacity(runs);
    let mut run_best = Vec::with_capacity(runs);
    let mut evaluations = 0;
    for i in 0..runs {
        let lambda = lambda0 << i;
        let run_opts = CmaesOptions {
            lambda: Some(lambda),
            seed: opts.seed.wrapping_add(i as u64),
            ..opts.clone()
        };
        let res = cmaes_minimize(obj, init_mean, init_sigma, &run_opts)?;
        lambdas.push(lambda);
        run_best.push(res.best_f);
        evaluations += res.evaluations;
        let better = best.as_ref().is_none_or(|b| res.best_f < b.best_f);
        if better {
            best = Some(res);
        }
    }
    Ok(RestartResult {
        best: best.expect("at least one run"),
        lambdas,
        run_best,
        evaluations,
    })
}
