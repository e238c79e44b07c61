//! Test-only oracles. Nothing here calls the recursive filters: the joint
//! distribution of all states and observations is written down as one big
//! linear map of independent noises and conditioned in a single shot.
#![allow(dead_code)]

use chrono::NaiveDate;
use kalman_trend::backtest::{Bar, Signal};
use kalman_trend::gaussian::{self, Gaussian, PartitionedGaussian};
use kalman_trend::lgssm::{build_model, LgssmSpec, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Joint Gaussian of `(x_1..x_T, z_1..z_T)`, states first.
///
/// `drives[t-1]` is the deterministic term added on the transition into
/// step `t` (ignored for `t = 1`).
pub fn stacked_joint(spec: &LgssmSpec, horizon: usize, drives: &[DVector<f64>]) -> Gaussian {
    let n = spec.state_dim();
    let k = spec.obs_dim();
    let nx = n * horizon;
    let nz = k * horizon;
    // Independent sources: x_1 - mu_1, w_2..w_T, v_1..v_T.
    let ns = nx + nz;
    let mut source_cov = DMatrix::zeros(ns, ns);
    source_cov.view_mut((0, 0), (n, n)).copy_from(&spec.init.cov);
    for t in 2..=horizon {
        let o = (t - 1) * n;
        source_cov.view_mut((o, o), (n, n)).copy_from(spec.q(t));
    }
    for t in 1..=horizon {
        let o = nx + (t - 1) * k;
        source_cov.view_mut((o, o), (k, k)).copy_from(spec.r(t));
    }

    // x_t = F_t x_{t-1} + drive + w_t  =>  x_t as a linear map of sources.
    let mut map = DMatrix::zeros(nx + nz, ns);
    let mut mean = DVector::zeros(nx + nz);
    let mut x_rows = DMatrix::zeros(n, ns);
    let mut x_mean = spec.init.mean.clone();
    x_rows.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    for t in 1..=horizon {
        if t > 1 {
            let f = spec.f(t);
            x_rows = f * &x_rows;
            let o = (t - 1) * n;
            let mut w = x_rows.view_mut((0, o), (n, n));
            w += DMatrix::identity(n, n);
            x_mean = f * &x_mean + &drives[t - 1];
        }
        map.view_mut(((t - 1) * n, 0), (n, ns)).copy_from(&x_rows);
        mean.rows_mut((t - 1) * n, n).copy_from(&x_mean);

        let h = spec.h(t);
        let mut z_rows = h * &x_rows;
        let vo = nx + (t - 1) * k;
        let mut v = z_rows.view_mut((0, vo), (k, k));
        v += DMatrix::identity(k, k);
        map.view_mut((nx + (t - 1) * k, 0), (k, ns)).copy_from(&z_rows);
        mean.rows_mut(nx + (t - 1) * k, k).copy_from(&(h * &x_mean + spec.d(t)));
    }
    let cov = &map * source_cov * map.transpose();
    Gaussian {
        mean,
        cov: gaussian::symmetrize(&cov),
    }
}

/// Marginal of `x_t` given the observations `z` at the 1-based steps in `observed`.
pub fn state_given(
    joint: &Gaussian,
    n: usize,
    k: usize,
    horizon: usize,
    t: usize,
    observed: &[usize],
    z: &[DVector<f64>],
) -> Gaussian {
    let nx = n * horizon;
    let mut keep: Vec<usize> = ((t - 1) * n..t * n).collect();
    let mut a = Vec::new();
    for &s in observed {
        keep.extend(nx + (s - 1) * k..nx + s * k);
        a.extend(z[s - 1].iter().copied());
    }
    let sub = Gaussian {
        mean: DVector::from_iterator(keep.len(), keep.iter().map(|&i| joint.mean[i])),
        cov: DMatrix::from_fn(keep.len(), keep.len(), |i, j| joint.cov[(keep[i], keep[j])]),
    };
    if observed.is_empty() {
        return sub;
    }
    let pg = PartitionedGaussian::split(&sub, n).unwrap();
    gaussian::condition(&pg, &DVector::from_vec(a)).unwrap()
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

/// Random Table-1 style parameters with a positive definite Q.
pub fn random_model_params(rng: &mut ChaCha8Rng, model_id: u8) -> ModelParams {
    let q3 = rng.gen_range(0.3..1.5);
    let q = [rng.gen_range(0.3..1.5), rng.gen_range(-0.8..0.8) * q3, q3];
    let p = match model_id {
        1 => vec![q[0], q[1], q[2], rng.gen_range(0.2..2.0), rng.gen_range(0.5..3.0)],
        2 => vec![
            q[0],
            q[1],
            q[2],
            rng.gen_range(0.2..2.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
        ],
        3 | 4 => {
            let mut p = vec![
                rng.gen_range(0.6..1.1),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.6..1.1),
                rng.gen_range(0.5..1.5),
                rng.gen_range(-1.0..1.0),
                q[0],
                q[1],
                q[2],
                rng.gen_range(0.2..2.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            ];
            if model_id == 4 {
                p.extend((0..4).map(|_| rng.gen_range(-0.5..0.5)));
            }
            p
        }
        _ => unreachable!(),
    };
    ModelParams::new(model_id, p)
}

pub fn random_model(rng: &mut ChaCha8Rng, model_id: u8) -> LgssmSpec {
    let mut spec = build_model(&random_model_params(rng, model_id)).unwrap();
    spec.init.mean = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
    spec
}

pub fn random_observations(rng: &mut ChaCha8Rng, horizon: usize, k: usize) -> Vec<DVector<f64>> {
    (0..horizon)
        .map(|_| DVector::from_fn(k, |_, _| rng.gen_range(-3.0..3.0)))
        .collect()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn max_abs_diff_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn fixture_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 4).unwrap()
}

fn snap_tick(x: f64) -> f64 {
    (x * 4.0).round() / 4.0
}

/// Random walk on the tick grid with gaps and wicks.
pub fn random_bars(rng: &mut impl Rng, n: usize) -> Vec<Bar> {
    let mut close = 2000.0;
    (0..n)
        .map(|i| {
            let open = snap_tick(close + rng.gen_range(-3.0..3.0));
            close = snap_tick(open + rng.gen_range(-15.0..15.0));
            let high = open.max(close) + snap_tick(rng.gen_range(0.0..8.0));
            let low = open.min(close) - snap_tick(rng.gen_range(0.0..8.0));
            Bar {
                date: fixture_start() + chrono::Days::new(i as u64),
                open,
                high,
                low,
                close,
            }
        })
        .collect()
}

pub fn random_signals(rng: &mut impl Rng, n: usize) -> Vec<Signal> {
    let p_trade = rng.gen_range(0.05..0.6);
    (0..n)
        .map(|_| {
            if rng.gen_bool(p_trade) {
                if rng.gen_bool(0.5) {
                    Signal::Long
                } else {
                    Signal::Short
                }
            } else {
                Signal::Flat
            }
        })
        .collect()
}
