//! Command-line front end: `filter`, `smooth`, `fit` and `backtest` over an
//! OHLC CSV, driven by one JSON config file.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::backtest::{
    anchored_spec, calibrate, load_bars, split_train_test, write_blotter_csv, write_comparison_csv,
    write_equity_csv, Bar, CalibrationOptions, ComparisonRow, InstrumentSpec, MaParams, ShortRule, Strategy,
    StrategyParams,
};
use crate::error::{Error, Result};
use crate::estimation::{em, em_fit, write_trace_csv, CmaesOptions, EmOptions, EmTheta};
use crate::exec::Execution;
use crate::kalman;
use crate::lgssm::{build_model, ModelParams};
use crate::smoother::{rts_smooth, two_filter_smooth, write_smooth_csv};

/// Seed offset of the moving-average calibration relative to the Kalman one.
pub const MA_SEED_OFFSET: u64 = 1000;

pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (JSON document given with --config; omitted keys take defaults):
  model.model_id               state-space layout: 0 scalar, 1 to 4 two-state trend models
  model.p                      layout parameters (4, 5, 6, 11 or 15 values)
  model.dt                     time step in bars [1]
  strategy.signal_offset       price distance the prediction must clear to trade [0.5]
  strategy.profit_target_ticks profit target in ticks [150]
  strategy.stop_loss_ticks     stop loss in ticks [80]
  strategy.short_rule          symmetric | literal [symmetric]
  ma.short_period              fast moving average length [5]
  ma.long_period               slow moving average length [20]
  ma.offset                    crossover offset [0]
  ma.profit_target_ticks       [150]
  ma.stop_loss_ticks           [80]
  ma.short_rule                symmetric | literal [symmetric]
  instrument.tick_size         [0.25]
  instrument.tick_value        currency per tick [12.5]
  instrument.commission        currency per side [1.55]
  instrument.initial_capital   base for returns [100000]
  data_path                    OHLC CSV with header date,open,high,low,close
  split_fraction               share of bars used for training, rounded down [0.5]
  cmaes.lambda                 population size, null for 4 + 3 ln n [null]
  cmaes.max_iter               generations per run [150]
  cmaes.seed                   base seed, overridden by --seed [0]
  cmaes.penalty_weight         L1 weight on model parameters [0.001]
  cmaes.sigma0                 initial step in scaled coordinates [0.3]
  cmaes.restarts               runs in the population-doubling schedule [1]
  cmaes.execution              parallel | sequential [parallel]
  em.max_iter                  [200]
  em.tol                       log-likelihood change that counts as converged [1e-8]
  output_dir                   where every output file goes [out]

Relative paths in the config file are resolved against the file's directory.";

#[derive(Debug, Parser)]
#[command(name = "kftrend", version, about = "Kalman filtering, smoothing, fitting and trend backtests")]
#[command(after_help = CONFIG_KEYS)]
pub struct Cli {
    /// JSON config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides cmaes.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Em,
    Cmaes,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Kalman filter over the closes; writes filter.csv and filter_summary.json.
    Filter,
    /// RTS smoother over the closes; writes smooth.csv.
    Smooth {
        /// Also run the two-filter smoother and report its distance from RTS.
        #[arg(long)]
        compare: bool,
    },
    /// Fit parameters on the training window; writes fitted_config.json.
    Fit {
        #[arg(long, value_enum, default_value_t = Method::Cmaes)]
        method: Method,
        /// Also calibrate the moving-average crossover (cmaes only).
        #[arg(long)]
        compare: bool,
    },
    /// Train and test backtests; writes reports, blotters and equity curves.
    Backtest {
        /// Also run the moving-average crossover and write comparison.csv.
        #[arg(long)]
        compare: bool,
    },
}

/// Entry signal and exits of the Kalman strategy; the model lives in
/// `Config::model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub signal_offset: f64,
    pub profit_target_ticks: u32,
    pub stop_loss_ticks: u32,
    pub short_rule: ShortRule,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            signal_offset: 0.5,
            profit_target_ticks: 150,
            stop_loss_ticks: 80,
            short_rule: ShortRule::Symmetric,
        }
    }
}

impl SignalConfig {
    pub fn with_model(&self, model: &ModelParams) -> StrategyParams {
        StrategyParams {
            model: model.clone(),
            signal_offset: self.signal_offset,
            profit_target_ticks: self.profit_target_ticks,
            stop_loss_ticks: self.stop_loss_ticks,
            short_rule: self.short_rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaesConfig {
    pub lambda: Option<usize>,
    pub max_iter: usize,
    pub seed: u64,
    pub penalty_weight: f64,
    pub sigma0: f64,
    pub restarts: usize,
    pub execution: Execution,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        let cal = CalibrationOptions::default();
        Self {
            lambda: None,
            max_iter: cal.cmaes.max_iter,
            seed: 0,
            penalty_weight: cal.penalty_weight,
            sigma0: cal.sigma0,
            restarts: cal.restarts,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        let o = EmOptions::default();
        Self {
            max_iter: o.max_iter,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelParams,
    pub strategy: SignalConfig,
    pub ma: MaParams,
    pub instrument: InstrumentSpec,
    pub data_path: PathBuf,
    pub split_fraction: f64,
    pub cmaes: CmaesConfig,
    pub em: EmConfig,
    pub output_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelParams::new(1, vec![0.5, 0.0, 0.05, 16.0, 1.0]),
            strategy: SignalConfig::default(),
            ma: MaParams::default(),
            instrument: InstrumentSpec::default(),
            data_path: PathBuf::new(),
            split_fraction: 0.5,
            cmaes: CmaesConfig::default(),
            em: EmConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl Config {
    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if !cfg.data_path.as_os_str().is_empty() && cfg.data_path.is_relative() {
            cfg.data_path = base.join(&cfg.data_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} is outside (0, 1)", self.split_fraction)));
        }
        if self.cmaes.max_iter == 0 || self.cmaes.restarts == 0 {
            return Err(Error::Config("cmaes.max_iter and cmaes.restarts must be at least 1".into()));
        }
        if !(self.cmaes.sigma0 > 0.0) || !(self.cmaes.penalty_weight >= 0.0) {
            return Err(Error::Config("cmaes.sigma0 must be positive and cmaes.penalty_weight non-negative".into()));
        }
        if !(self.em.tol >= 0.0) {
            return Err(Error::Config("em.tol must be non-negative".into()));
        }
        self.instrument.validate()
    }

    pub fn bars(&self) -> Result<Vec<Bar>> {
        if self.data_path.as_os_str().is_empty() {
            return Err(Error::Config("data_path is not set".into()));
        }
        let file = File::open(&self.data_path).map_err(|source| Error::File {
            path: self.data_path.clone(),
            source,
        })?;
        let bars = load_bars(file)?;
        if bars.is_empty() {
            return Err(Error::Data {
                line: 1,
                msg: format!("{} has no bars", self.data_path.display()),
            });
        }
        Ok(bars)
    }

    pub fn kf_strategy(&self) -> Strategy {
        Strategy::Kf(self.strategy.with_model(&self.model))
    }

    pub fn calibration_options(&self, seed: u64) -> CalibrationOptions {
        let defaults = CalibrationOptions::default();
        CalibrationOptions {
            penalty_weight: self.cmaes.penalty_weight,
            sigma0: self.cmaes.sigma0,
            restarts: self.cmaes.restarts,
            cmaes: CmaesOptions {
                lambda: self.cmaes.lambda,
                max_iter: self.cmaes.max_iter,
                seed,
                execution: self.cmaes.execution,
                ..defaults.cmaes
            },
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    log::info!("writing {}", path.display());
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| Error::File { path, source })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut out = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn output_dir(cfg: &Config) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| Error::File {
        path: cfg.output_dir.clone(),
        source,
    })?;
    Ok(cfg.output_dir.clone())
}

fn closes(bars: &[Bar]) -> Vec<DVector<f64>> {
    bars.iter().map(|b| DVector::from_element(1, b.close)).collect()
}

pub fn cmd_filter(cfg: &Config) -> Result<()> {
    let bars = cfg.bars()?;
    let spec = anchored_spec(&build_model(&cfg.model)?, bars[0].close)?;
    let result = kalman::filter(&spec, &closes(&bars), None)?;
    let dir = output_dir(cfg)?;
    let mut out = create(&dir, "filter.csv")?;
    result.write_csv(&mut out)?;
    out.flush()?;
    write_json(
        &dir,
        "filter_summary.json",
        &serde_json::json!({ "steps": result.len(), "total_loglik": result.total_loglik }),
    )?;
    println!("filtered {} bars, log-likelihood {:.6}", result.len(), result.total_loglik);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SmootherCheck {
    steps: usize,
    max_abs_mean_diff: f64,
    max_abs_cov_diff: f64,
}

pub fn cmd_smooth(cfg: &Config, compare: bool) -> Result<()> {
    let bars = cfg.bars()?;
    let spec = anchored_spec(&build_model(&cfg.model)?, bars[0].close)?;
    let obs = closes(&bars);
    let forward = kalman::filter(&spec, &obs, None)?;
    let rts = rts_smooth(&forward, &spec)?;
    let dir = output_dir(cfg)?;
    let mut out = create(&dir, "smooth.csv")?;
    write_smooth_csv(&rts, &mut out)?;
    out.flush()?;
    println!("smoothed {} bars", rts.len());
    if compare {
        let fused = two_filter_smooth(&spec, &forward, &obs)?;
        let mut check = SmootherCheck {
            steps: rts.len(),
            max_abs_mean_diff: 0.0,
            max_abs_cov_diff: 0.0,
        };
        for (r, f) in rts.iter().zip(&fused) {
            check.max_abs_mean_diff = check.max_abs_mean_diff.max((&r.x_smooth - &f.mean).amax());
            check.max_abs_cov_diff = check.max_abs_cov_diff.max((&r.p_smooth - &f.cov).amax());
        }
        write_json(&dir, "smooth_check.json", &check)?;
        println!(
            "rts vs two-filter: max |mean diff| {:.3e}, max |cov diff| {:.3e}",
            check.max_abs_mean_diff, check.max_abs_cov_diff
        );
    }
    Ok(())
}

fn train_window(cfg: &Config, bars: &[Bar]) -> Result<Vec<Bar>> {
    Ok(split_train_test(bars, cfg.split_fraction)?.0.to_vec())
}

fn absolute(cfg: &Config) -> Config {
    let mut out = cfg.clone();
    for p in [&mut out.data_path, &mut out.output_dir] {
        if let Ok(abs) = std::path::absolute(&*p) {
            *p = abs;
        }
    }
    out
}

pub fn cmd_fit(cfg: &Config, method: Method, compare: bool) -> Result<()> {
    cfg.validate()?;
    match method {
        Method::Em => fit_em(cfg),
        Method::Cmaes => fit_cmaes(cfg, compare),
    }
}

fn fit_em(cfg: &Config) -> Result<()> {
    em::check_scalar(&build_model(&cfg.model)?)?;
    let bars = cfg.bars()?;
    let train = train_window(cfg, &bars)?;
    let data: Vec<f64> = train.iter().map(|b| b.close).collect();
    let p = &cfg.model.p;
    let opts = EmOptions {
        max_iter: cfg.em.max_iter,
        tol: cfg.em.tol,
        ..Default::default()
    };
    let state = em_fit(&data, EmTheta::new(p[2], p[1], p[0]), &opts)?;
    let dir = output_dir(cfg)?;
    let mut out = create(&dir, "em_trace.csv")?;
    write_trace_csv(&state.trace(), &mut out)?;
    out.flush()?;
    write_json(&dir, "em_fit.json", &state)?;
    let mut fitted = absolute(cfg);
    fitted.model.p = vec![state.theta.f, state.theta.sigma_w2, state.theta.sigma_v2, p[3]];
    write_json(&dir, "fitted_config.json", &fitted)?;
    println!(
        "em: {} iterations, log-likelihood {:.6}, converged: {}, monotone: {}",
        state.iteration,
        state.loglik_history.last().copied().unwrap_or(f64::NAN),
        state.converged,
        if state.monotone { "yes" } else { "no" }
    );
    Ok(())
}

fn fit_cmaes(cfg: &Config, compare: bool) -> Result<()> {
    let bars = cfg.bars()?;
    let train = train_window(cfg, &bars)?;
    let dir = output_dir(cfg)?;
    let mut fitted = absolute(cfg);
    let mut summary = serde_json::Map::new();

    let kf = calibrate(&train, &cfg.kf_strategy(), &cfg.instrument, &cfg.calibration_options(cfg.cmaes.seed))?;
    let mut out = create(&dir, "cmaes_trace.csv")?;
    write_trace_csv(&kf.trace, &mut out)?;
    out.flush()?;
    if let Strategy::Kf(p) = &kf.params {
        fitted.model = p.model.clone();
        fitted.strategy = SignalConfig {
            signal_offset: p.signal_offset,
            profit_target_ticks: p.profit_target_ticks,
            stop_loss_ticks: p.stop_loss_ticks,
            short_rule: p.short_rule,
        };
    }
    println!(
        "kalman_filter: train sharpe {:.4}, objective {:.6}, {} evaluations",
        kf.train_report.sharpe, kf.objective, kf.evaluations
    );
    summary.insert("kalman_filter".into(), fit_summary(&kf)?);

    if compare {
        let seed = cfg.cmaes.seed.wrapping_add(MA_SEED_OFFSET);
        let ma = calibrate(&train, &Strategy::Ma(cfg.ma.clone()), &cfg.instrument, &cfg.calibration_options(seed))?;
        let mut out = create(&dir, "ma_cmaes_trace.csv")?;
        write_trace_csv(&ma.trace, &mut out)?;
        out.flush()?;
        if let Strategy::Ma(p) = &ma.params {
            fitted.ma = p.clone();
        }
        println!(
            "ma_crossover: train sharpe {:.4}, objective {:.6}, {} evaluations",
            ma.train_report.sharpe, ma.objective, ma.evaluations
        );
        summary.insert("ma_crossover".into(), fit_summary(&ma)?);
    }
    write_json(&dir, "fit_summary.json", &summary)?;
    write_json(&dir, "fitted_config.json", &fitted)
}

fn fit_summary(c: &crate::backtest::Calibration) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "params": serde_json::to_value(&c.params)?,
        "objective": c.objective,
        "evaluations": c.evaluations,
        "train_sharpe": c.train_report.sharpe,
        "train_net_profit": c.train_report.net_profit,
    }))
}

pub fn cmd_backtest(cfg: &Config, compare: bool) -> Result<()> {
    cfg.validate()?;
    let bars = cfg.bars()?;
    let (train, test) = split_train_test(&bars, cfg.split_fraction)?;
    let dir = output_dir(cfg)?;
    let mut strategies = vec![cfg.kf_strategy()];
    if compare {
        strategies.push(Strategy::Ma(cfg.ma.clone()));
    }
    let mut rows = Vec::new();
    for strategy in &strategies {
        let name = strategy.name();
        let mut reports = Vec::new();
        for (period, window) in [("train", train), ("test", test)] {
            let run = strategy.backtest(window, &cfg.instrument)?;
            let stem = format!("{name}_{period}");
            let mut out = create(&dir, &format!("{stem}_report.csv"))?;
            run.report.write_csv(&mut out)?;
            out.flush()?;
            let mut out = create(&dir, &format!("{stem}_report.json"))?;
            run.report.write_json(&mut out)?;
            out.flush()?;
            let mut out = create(&dir, &format!("{stem}_blotter.csv"))?;
            write_blotter_csv(&run.trades, &mut out)?;
            out.flush()?;
            let dates: Vec<_> = window.iter().map(|b| b.date).collect();
            let mut out = create(&dir, &format!("{stem}_equity.csv"))?;
            write_equity_csv(&dates, &run.report.equity_curve, &mut out)?;
            out.flush()?;
            println!(
                "{name} {period}: {} trades, net profit {:.2}, sharpe {:.4}",
                run.report.n_trades, run.report.net_profit, run.report.sharpe
            );
            reports.push(run.report);
        }
        rows.push(ComparisonRow::new(name, &reports[1], &reports[0]));
    }
    if compare {
        let mut out = create(&dir, "comparison.csv")?;
        write_comparison_csv(&rows, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.cmaes.seed = seed;
    }
    if let Some(dir) = &cli.output {
        cfg.output_dir = dir.clone();
    }
    match &cli.command {
        Command::Filter => cmd_filter(&cfg),
        Command::Smooth { compare } => cmd_smooth(&cfg, *compare),
        Command::Fit { method, compare } => cmd_fit(&cfg, *method, *compare),
        Command::Backtest { compare } => cmd_backtest(&cfg, *compare),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on I/O or data errors, 2 on usage
/// errors and unsupported models.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn leaf_keys(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn help_lists_every_config_key() {
        let help = Cli::command().render_help().to_string();
        let mut keys = Vec::new();
        leaf_keys("", &serde_json::to_value(Config::default()).unwrap(), &mut keys);
        assert!(keys.len() > 20);
        for k in keys {
            assert!(help.contains(&format!("  {k} ")), "help is missing {k}");
        }
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = Config::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<Config>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"instrument": {"commission": 2.0}, "em": {"tol": 1e-6}}"#).unwrap();
        assert_eq!(cfg.instrument.commission, 2.0);
        assert_eq!(cfg.instrument.tick_size, 0.25);
        assert_eq!(cfg.em.max_iter, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"split": 0.5}"#).is_err());
    }

    #[test]
    fn bad_split_is_a_config_error() {
        let cfg = Config {
            split_fraction: 1.0,
            ..Config::default()
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
