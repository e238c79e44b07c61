//! Daily-bar trading harness: data loading, the two trend signals, trade
//! simulation with fixed targets and stops, statistics and calibration.

pub mod data;
pub mod engine;
pub mod signals;
pub mod stats;
pub mod strategy;

pub use data::{bars_from_closes, load_bars, split_train_test, write_bars, Bar};
pub use engine::{
    run_backtest, run_backtest_with, BacktestRun, Direction, EngineOptions, ExitReason, InstrumentSpec, Trade,
};
pub use signals::{anchor_state, anchored_spec, kf_predictions, kf_trend_signals, ma_crossover_signals, sma, ShortRule, Signal};
pub use stats::{
    compute_stats, max_drawdown, write_blotter_csv, write_comparison_csv, write_equity_csv, BacktestReport,
    ComparisonRow,
};
pub use strategy::{calibrate, objective, Calibration, CalibrationOptions, MaParams, Strategy, StrategyParams};
