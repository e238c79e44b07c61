use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::data::Bar;
use super::engine::{run_backtest, BacktestRun, InstrumentSpec};
use super::signals::{kf_trend_signals, ma_crossover_signals, ShortRule, Signal};
use crate::error::{Error, Result};
use crate::estimation::{cmaes_minimize, restart_schedule, Bounds, CmaesOptions, Objective, TraceRow};
use crate::lgssm::ModelParams;

/// Kalman trend-following parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub model: ModelParams,
    pub signal_offset: f64,
    pub profit_target_ticks: u32,
    pub stop_loss_ticks: u32,
    #[serde(default)]
    pub short_rule: ShortRule,
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        if self.profit_target_ticks == 0 || self.stop_loss_ticks == 0 {
            return Err(Error::InvalidArgument("profit target and stop loss must be positive".into()));
        }
        if !self.signal_offset.is_finite() {
            return Err(Error::InvalidArgument("signal offset must be finite".into()));
        }
        crate::lgssm::build_model(&self.model).map(|_| ())
    }
}

/// Moving-average crossover parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaParams {
    pub short_period: usize,
    pub long_period: usize,
    pub offset: f64,
    pub profit_target_ticks: u32,
    pub stop_loss_ticks: u32,
    #[serde(default)]
    pub short_rule: ShortRule,
}

impl Default for MaParams {
    fn default() -> Self {
        Self {
            short_period: 5,
            long_period: 20,
            offset: 0.0,
            profit_target_ticks: 150,
            stop_loss_ticks: 80,
            short_rule: ShortRule::Symmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Kf(StrategyParams),
    Ma(MaParams),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Kf(_) => "kalman_filter",
            Strategy::Ma(_) => "ma_crossover",
        }
    }

    pub fn signals(&self, bars: &[Bar]) -> Result<Vec<Signal>> {
        match self {
            Strategy::Kf(p) => kf_trend_signals(bars, &p.model, p.signal_offset, p.short_rule),
            Strategy::Ma(p) => ma_crossover_signals(bars, p.short_period, p.long_period, p.offset, p.short_rule),
        }
    }

    pub fn ticks(&self) -> (u32, u32) {
        match self {
            Strategy::Kf(p) => (p.profit_target_ticks, p.stop_loss_ticks),
            Strategy::Ma(p) => (p.profit_target_ticks, p.stop_loss_ticks),
        }
    }

    pub fn backtest(&self, bars: &[Bar], inst: &InstrumentSpec) -> Result<BacktestRun> {
        let signals = self.signals(bars)?;
        let (target, stop) = self.ticks();
        run_backtest(bars, &signals, inst, target, stop)
    }

    /// Search coordinates: model parameters (or the two periods), then
    /// offset, stop and target.
    fn encode(&self) -> Vec<f64> {
        match self {
            Strategy::Kf(p) => {
                let mut v = p.model.p.clone();
                v.extend([p.signal_offset, p.stop_loss_ticks as f64, p.profit_target_ticks as f64]);
                v
            }
            Strategy::Ma(p) => vec![
                p.short_period as f64,
                p.long_period as f64,
                p.offset,
                p.stop_loss_ticks as f64,
                p.profit_target_ticks as f64,
            ],
        }
    }

    fn decode(&self, x: &[f64]) -> Strategy {
        let ticks = |v: f64| v.round().clamp(1.0, MAX_TICKS) as u32;
        match self {
            Strategy::Kf(p) => {
                let k = p.model.p.len();
                Strategy::Kf(StrategyParams {
                    model: ModelParams {
                        p: x[..k].to_vec(),
                        ..p.model.clone()
                    },
                    signal_offset: x[k].max(0.0),
                    stop_loss_ticks: ticks(x[k + 1]),
                    profit_target_ticks: ticks(x[k + 2]),
                    short_rule: p.short_rule,
                })
            }
            Strategy::Ma(p) => {
                let short = x[0].round().clamp(1.0, MAX_PERIOD) as usize;
                let long = (x[1].round().clamp(1.0, MAX_PERIOD) as usize).max(short + 1);
                Strategy::Ma(MaParams {
                    short_period: short,
                    long_period: long,
                    offset: x[2].max(0.0),
                    stop_loss_ticks: ticks(x[3]),
                    profit_target_ticks: ticks(x[4]),
                    short_rule: p.short_rule,
                })
            }
        }
    }

    /// Coordinates that carry the L1 penalty.
    fn penalized(&self) -> usize {
        match self {
            Strategy::Kf(p) => p.model.p.len(),
            Strategy::Ma(_) => 0,
        }
    }

    /// Per-coordinate scale and box in price or tick units.
    fn search_box(&self, inst: &InstrumentSpec) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = self.encode();
        let k = self.penalized();
        let mut scale = Vec::with_capacity(x.len());
        let mut lo = Vec::with_capacity(x.len());
        let mut hi = Vec::with_capacity(x.len());
        for (i, v) in x.iter().enumerate() {
            let tail = x.len() - i;
            let (s, l, h) = match (self, tail) {
                (_, 1) | (_, 2) => (v.abs().max(10.0), 1.0, MAX_TICKS),
                (_, 3) => (v.abs().max(4.0 * inst.tick_size), 0.0, 1e6),
                (Strategy::Ma(_), _) => (v.abs().max(2.0), 1.0, MAX_PERIOD),
                (Strategy::Kf(_), _) if i < k => (v.abs().max(1.0), -MODEL_BOUND, MODEL_BOUND),
                _ => unreachable!(),
            };
            scale.push(s);
            lo.push(l);
            hi.push(h);
        }
        (scale, lo, hi)
    }
}

pub const MAX_TICKS: f64 = 4000.0;
pub const MAX_PERIOD: f64 = 250.0;
/// Box on each model parameter during calibration.
pub const MODEL_BOUND: f64 = 1e4;
/// Objective of a candidate that never trades; ranks below any real Sharpe.
pub const NO_TRADE_OBJECTIVE: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub penalty_weight: f64,
    /// Initial step size in units of each coordinate's scale.
    pub sigma0: f64,
    /// Number of runs in the λ-doubling restart schedule.
    pub restarts: usize,
    #[serde(skip)]
    pub cmaes: CmaesOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            penalty_weight: 1e-3,
            sigma0: 0.3,
            restarts: 1,
            cmaes: CmaesOptions {
                max_iter: 150,
                tol_x: 1e-9,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub params: Strategy,
    pub objective: f64,
    pub train_report: super::stats::BacktestReport,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
}

/// `-Sharpe + penalty * sum |model params|` on the given bars.
pub fn objective(strategy: &Strategy, bars: &[Bar], inst: &InstrumentSpec, penalty_weight: f64) -> f64 {
    let run = match strategy.backtest(bars, inst) {
        Ok(r) => r,
        Err(_) => return f64::INFINITY,
    };
    if run.trades.is_empty() {
        return NO_TRADE_OBJECTIVE;
    }
    let penalty = match strategy {
        Strategy::Kf(p) => p.model.p.iter().map(|v| v.abs()).sum::<f64>(),
        Strategy::Ma(_) => 0.0,
    };
    -run.report.sharpe + penalty_weight * penalty
}

/// Fits every coordinate of `start` to maximize the training Sharpe ratio.
pub fn calibrate(
    train: &[Bar],
    start: &Strategy,
    inst: &InstrumentSpec,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training window needs at least two bars".into()));
    }
    inst.validate()?;
    let (scale, lo, hi) = start.search_box(inst);
    let dim = scale.len();
    let to_unit = |x: &[f64]| DVector::from_iterator(dim, x.iter().zip(&scale).map(|(v, s)| v / s));
    let from_unit = |y: &DVector<f64>| -> Vec<f64> { y.iter().zip(&scale).map(|(v, s)| v * s).collect() };
    let bounds = Bounds::new(to_unit(&lo), to_unit(&hi))?;
    let weight = opts.penalty_weight;
    let obj = Objective::new(dim, |y: &DVector<f64>| {
        objective(&start.decode(&from_unit(y)), train, inst, weight)
    })
    .with_bounds(bounds.clone());
    let x0 = bounds.clamp(&to_unit(&start.encode()));

    let (best_x, evaluations, trace) = if opts.restarts > 1 {
        let r = restart_schedule(&obj, &x0, opts.sigma0, &opts.cmaes, opts.restarts)?;
        (r.best.best_x, r.evaluations, r.best.trace)
    } else {
        let r = cmaes_minimize(&obj, &x0, opts.sigma0, &opts.cmaes)?;
        (r.best_x, r.evaluations, r.trace)
    };
    // Keep the starting point if nothing beat it.
    let candidate = start.decode(&from_unit(&best_x));
    let f_candidate = objective(&candidate, train, inst, weight);
    let start_clamped = start.decode(&from_unit(&x0));
    let f_start = objective(&start_clamped, train, inst, weight);
    let (params, objective_value) = if f_start < f_candidate {
        (start_clamped, f_start)
    } else {
        (candidate, f_candidate)
    };
    let train_report = params.backtest(train, inst)?.report;
    Ok(Calibration {
        params,
        objective: objective_value,
        train_report,
        evaluations,
        trace,
    })
}
