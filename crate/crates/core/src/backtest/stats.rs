use std::io::Write;

use chrono::NaiveDate;
use serde::{Serialize, Serializer};

use super::engine::{InstrumentSpec, Trade};
use crate::error::Result;

pub const TRADING_DAYS: f64 = 252.0;

/// JSON has no infinity; write non-finite values as strings.
fn finite_or_text<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BacktestReport {
    pub n_bars: usize,
    pub net_profit: f64,
    pub gross_profit: f64,
    pub gross_loss: f64,
    pub commission_total: f64,
    pub n_trades: usize,
    pub avg_trade: f64,
    pub total_net_pct: f64,
    pub annualized_net_pct: f64,
    pub annualized_vol: f64,
    pub sharpe: f64,
    /// False when daily returns had no variance and `sharpe` was set to 0.
    pub sharpe_defined: bool,
    pub sortino: f64,
    pub max_drawdown: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub recovery_factor: f64,
    pub percent_profitable: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub profit_factor: f64,
    pub n_winners: usize,
    pub avg_winner: f64,
    pub largest_winner: f64,
    pub max_consec_winners: usize,
    pub n_losers: usize,
    pub avg_loser: f64,
    pub largest_loser: f64,
    pub max_consec_losers: usize,
    #[serde(serialize_with = "finite_or_text")]
    pub avg_win_over_avg_loss: f64,
    pub trades_per_day: f64,
    pub avg_bars_in_trade: f64,
    /// Bars from the peak before the deepest drawdown until equity is back
    /// at that peak; empty if it never recovers.
    pub time_to_recover_days: Option<usize>,
    pub equity_curve: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn longest_run(flags: impl Iterator<Item = bool>) -> usize {
    let (mut best, mut cur) = (0, 0);
    for f in flags {
        cur = if f { cur + 1 } else { 0 };
        best = best.max(cur);
    }
    best
}

/// `min_t (equity_t - max_{s<=t} equity_s)`, with the running max starting at 0.
pub fn max_drawdown(equity: &[f64]) -> f64 {
    let mut peak = 0.0f64;
    let mut worst = 0.0f64;
    for &e in equity {
        peak = peak.max(e);
        worst = worst.min(e - peak);
    }
    worst
}

fn time_to_recover(equity: &[f64]) -> Option<usize> {
    let mut peak = 0.0f64;
    let mut peak_at = 0;
    let mut worst = 0.0f64;
    let mut worst_peak = (0.0, 0usize, 0usize);
    for (i, &e) in equity.iter().enumerate() {
        if e > peak {
            peak = e;
            peak_at = i;
        }
        if e - peak < worst {
            worst = e - peak;
            worst_peak = (peak, peak_at, i);
        }
    }
    if worst == 0.0 {
        return Some(0);
    }
    let (level, from, trough) = worst_peak;
    equity[trough..]
        .iter()
        .position(|&e| e >= level)
        .map(|k| trough + k - from)
}

/// Daily simple returns of `capital + equity`.
pub fn daily_returns(equity: &[f64], capital: f64) -> Vec<f64> {
    equity
        .windows(2)
        .map(|w| (w[1] - w[0]) / (capital + w[0]))
        .collect()
}

/// Summary statistics of a finished backtest. `equity` is the per-bar
/// marked-to-market P&L in currency, starting from zero.
pub fn compute_stats(trades: &[Trade], equity: &[f64], dates: &[NaiveDate], inst: &InstrumentSpec) -> BacktestReport {
    let n_bars = dates.len().max(equity.len());
    let gross: Vec<f64> = trades.iter().map(|t| t.gross_pnl(inst)).collect();
    let gross_profit = gross.iter().filter(|g| **g > 0.0).fold(0.0, |a, g| a + g);
    let gross_loss = gross.iter().filter(|g| **g < 0.0).fold(0.0, |a, g| a + g);
    let commission_total = 2.0 * inst.commission * trades.len() as f64;
    let net_profit = gross_profit + gross_loss - commission_total;

    let wins: Vec<f64> = trades.iter().map(|t| t.pnl).filter(|p| *p > 0.0).collect();
    let losses: Vec<f64> = trades.iter().map(|t| t.pnl).filter(|p| *p < 0.0).collect();
    let n_trades = trades.len();
    let avg_winner = mean(&wins);
    let avg_loser = mean(&losses);

    let returns = daily_returns(equity, inst.initial_capital);
    let sd = sample_std(&returns);
    let sharpe_defined = sd > 0.0 && sd.is_finite();
    let sharpe = if sharpe_defined {
        mean(&returns) / sd * TRADING_DAYS.sqrt()
    } else {
        0.0
    };
    let downside = if returns.is_empty() {
        0.0
    } else {
        (returns.iter().map(|r| r.min(0.0).powi(2)).sum::<f64>() / returns.len() as f64).sqrt()
    };
    let sortino = if downside > 0.0 {
        mean(&returns) / downside * TRADING_DAYS.sqrt()
    } else {
        0.0
    };
    let total = net_profit / inst.initial_capital;
    let years = returns.len() as f64 / TRADING_DAYS;
    let annualized_net_pct = if years > 0.0 && total > -1.0 {
        ((1.0 + total).powf(1.0 / years) - 1.0) * 100.0
    } else {
        0.0
    };
    let mdd = max_drawdown(equity);
    let ratio = |num: f64, den: f64| {
        if den != 0.0 {
            num / den.abs()
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };

    BacktestReport {
        n_bars,
        net_profit,
        gross_profit,
        gross_loss,
        commission_total,
        n_trades,
        avg_trade: if n_trades > 0 { net_profit / n_trades as f64 } else { 0.0 },
        total_net_pct: total * 100.0,
        annualized_net_pct,
        annualized_vol: sd * TRADING_DAYS.sqrt(),
        sharpe,
        sharpe_defined,
        sortino,
        max_drawdown: mdd,
        recovery_factor: ratio(net_profit, mdd),
        percent_profitable: if n_trades > 0 { 100.0 * wins.len() as f64 / n_trades as f64 } else { 0.0 },
        profit_factor: ratio(gross_profit, gross_loss),
        n_winners: wins.len(),
        avg_winner,
        largest_winner: wins.iter().copied().fold(0.0, f64::max),
        max_consec_winners: longest_run(trades.iter().map(|t| t.pnl > 0.0)),
        n_losers: losses.len(),
        avg_loser,
        largest_loser: losses.iter().copied().fold(0.0, f64::min),
        max_consec_losers: longest_run(trades.iter().map(|t| t.pnl < 0.0)),
        avg_win_over_avg_loss: ratio(avg_winner, avg_loser),
        trades_per_day: if n_bars > 0 { n_trades as f64 / n_bars as f64 } else { 0.0 },
        avg_bars_in_trade: mean(&trades.iter().map(|t| t.bars_held as f64).collect::<Vec<_>>()),
        time_to_recover_days: time_to_recover(equity),
        equity_curve: equity.to_vec(),
    }
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl BacktestReport {
    /// Scalar fields as `(key, value)` in declaration order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("report serializes");
        value
            .as_object()
            .expect("report is an object")
            .iter()
            .filter(|(k, _)| k.as_str() != "equity_curve")
            .map(|(k, v)| (k.clone(), cell(v)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["key", "value"])?;
        for (k, v) in self.pairs() {
            w.write_record([k, v])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn write_equity_csv<W: Write>(dates: &[NaiveDate], equity: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "equity"])?;
    for (d, e) in dates.iter().zip(equity) {
        w.write_record([d.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_blotter_csv<W: Write>(trades: &[Trade], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entry_time", "exit_time", "direction", "entry_price", "exit_price", "exit_reason", "pnl"])?;
    for t in trades {
        let dir = serde_json::to_value(t.direction)?;
        let reason = serde_json::to_value(t.exit_reason)?;
        w.write_record([
            t.entry_time.to_string(),
            t.exit_time.to_string(),
            cell(&dir),
            t.entry_price.to_string(),
            t.exit_price.to_string(),
            cell(&reason),
            t.pnl.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algo: String,
    pub total_net_profit: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub recovery_factor: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub profit_factor: f64,
    pub max_drawdown: f64,
    pub sharpe: f64,
    pub n_trades: usize,
    pub percent_profitable: f64,
    pub train_net_profit: f64,
}

impl ComparisonRow {
    pub fn new(algo: &str, test: &BacktestReport, train: &BacktestReport) -> Self {
        Self {
            algo: algo.to_string(),
            total_net_profit: test.net_profit,
            recovery_factor: test.recovery_factor,
            profit_factor: test.profit_factor,
            max_drawdown: test.max_drawdown,
            sharpe: test.sharpe,
            n_trades: test.n_trades,
            percent_profitable: test.percent_profitable,
            train_net_profit: train.net_profit,
        }
    }
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "algo",
        "total_net_profit",
        "recovery_factor",
        "profit_factor",
        "max_drawdown",
        "sharpe",
        "n_trades",
        "percent_profitable",
        "train_net_profit",
    ])?;
    for r in rows {
        let v = serde_json::to_value(r)?;
        let rec: Vec<String> = v.as_object().expect("row is an object").values().map(cell).collect();
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::engine::{Direction, ExitReason};

    fn trade(pnl_points: f64, inst: &InstrumentSpec, i: usize) -> Trade {
        let d = NaiveDate::from_ymd_opt(2017, 1, 2).unwrap();
        let entry = 100.0;
        Trade {
            direction: Direction::Long,
            entry_time: d,
            exit_time: d.succ_opt().unwrap(),
            entry_price: entry,
            exit_price: entry + pnl_points,
            exit_reason: ExitReason::Target,
            pnl: pnl_points * inst.point_value() - 2.0 * inst.commission,
            bars_held: 1,
            entry_index: i,
            exit_index: i + 1,
        }
    }

    #[test]
    fn drawdown_scan() {
        assert_eq!(max_drawdown(&[0.0, 10.0, 5.0, 20.0]), -5.0);
        assert_eq!(time_to_recover(&[0.0, 10.0, 5.0, 20.0]), Some(2));
        assert_eq!(time_to_recover(&[0.0, 10.0, 5.0, 6.0]), None);
    }

    #[test]
    fn single_winner_has_infinite_profit_factor() {
        let inst = InstrumentSpec { commission: 0.0, ..Default::default() };
        let t = trade(20.0, &inst, 0);
        let equity = vec![0.0, 1000.0, 1000.0];
        let d = NaiveDate::from_ymd_opt(2017, 1, 2).unwrap();
        let r = compute_stats(&[t], &equity, &[d; 3], &inst);
        assert_eq!(r.net_profit, 1000.0);
        assert_eq!(r.percent_profitable, 100.0);
        assert!(r.profit_factor.is_infinite());
        let mut buf = Vec::new();
        r.write_json(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\"profit_factor\": \"inf\""));
    }

    #[test]
    fn symmetric_trades_balance() {
        let inst = InstrumentSpec { commission: 0.0, ..Default::default() };
        let trades: Vec<Trade> = (0..6).map(|i| trade(if i % 2 == 0 { 1.0 } else { -1.0 }, &inst, i)).collect();
        let r = compute_stats(&trades, &[0.0; 7], &[], &inst);
        assert_eq!(r.avg_win_over_avg_loss, 1.0);
        assert_eq!(r.max_consec_winners, 1);
        assert_eq!(r.profit_factor, 1.0);
    }

    #[test]
    fn flat_equity_has_no_sharpe() {
        let r = compute_stats(&[], &[0.0; 10], &[], &InstrumentSpec::default());
        assert_eq!(r.sharpe, 0.0);
        assert!(!r.sharpe_defined);
        assert_eq!(r.net_profit, 0.0);
        assert_eq!(r.time_to_recover_days, Some(0));
    }

    #[test]
    fn flat_csv_skips_the_curve() {
        let r = compute_stats(&[], &[0.0; 3], &[], &InstrumentSpec::default());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("key,value\nn_bars,3\nnet_profit,0.0\n"), "{text}");
        assert!(!text.contains("equity_curve"));
    }
}
