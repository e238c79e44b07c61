use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::data::Bar;
use super::signals::Signal;
use super::stats::{compute_stats, BacktestReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstrumentSpec {
    pub tick_size: f64,
    pub tick_value: f64,
    /// Charged on entry and again on exit.
    pub commission: f64,
    /// Capital that returns are measured against.
    pub initial_capital: f64,
}

impl Default for InstrumentSpec {
    /// E-mini S&P 500: quarter-point ticks worth 12.5 each.
    fn default() -> Self {
        Self {
            tick_size: 0.25,
            tick_value: 12.5,
            commission: 1.55,
            initial_capital: 100_000.0,
        }
    }
}

impl InstrumentSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.tick_size) || !ok(self.tick_value) || !ok(self.initial_capital) || !(self.commission >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad instrument {self:?}")));
        }
        Ok(())
    }

    pub fn point_value(&self) -> f64 {
        self.tick_value / self.tick_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Long,
    Short,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Long => 1.0,
            Direction::Short => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    Target,
    Stop,
    SignalFlip,
    EndOfData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub direction: Direction,
    pub entry_time: NaiveDate,
    pub exit_time: NaiveDate,
    pub entry_price: f64,
    pub exit_price: f64,
    pub exit_reason: ExitReason,
    /// Net of both commissions.
    pub pnl: f64,
    pub bars_held: usize,
    pub entry_index: usize,
    pub exit_index: usize,
}

impl Trade {
    /// P&L before commissions.
    pub fn gross_pnl(&self, inst: &InstrumentSpec) -> f64 {
        self.direction.sign() * (self.exit_price - self.entry_price) * inst.point_value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EngineOptions {
    /// Close an open position at the next open when the signal turns to
    /// the other side. Off by default: signals are ignored while in a trade.
    #[serde(default)]
    pub exit_on_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestRun {
    pub trades: Vec<Trade>,
    pub report: BacktestReport,
}

struct Open {
    direction: Direction,
    entry_index: usize,
    entry_price: f64,
}

/// Simulates one contract at a time. A signal on bar `i` enters at the open
/// of bar `i + 1`; the position is then checked against target and stop
/// from the following bar on, stop first when a bar touches both, and a gap
/// through either level fills at the open. Anything still open is closed
/// at the last close. Entries need one more bar after the entry bar.
pub fn run_backtest(
    bars: &[Bar],
    signals: &[Signal],
    inst: &InstrumentSpec,
    target_ticks: u32,
    stop_ticks: u32,
) -> Result<BacktestRun> {
    run_backtest_with(bars, signals, inst, target_ticks, stop_ticks, EngineOptions::default())
}

pub fn run_backtest_with(
    bars: &[Bar],
    signals: &[Signal],
    inst: &InstrumentSpec,
    target_ticks: u32,
    stop_ticks: u32,
    opts: EngineOptions,
) -> Result<BacktestRun> {
    if signals.len() != bars.len() {
        return Err(Error::Dimension(format!(
            "{} signals for {} bars",
            signals.len(),
            bars.len()
        )));
    }
    inst.validate()?;
    if target_ticks == 0 || stop_ticks == 0 {
        return Err(Error::InvalidArgument("target and stop must be at least one tick".into()));
    }
    let n = bars.len();
    let pv = inst.point_value();
    let target_dist = target_ticks as f64 * inst.tick_size;
    let stop_dist = stop_ticks as f64 * inst.tick_size;
    let mut trades = Vec::new();
    let mut equity = Vec::with_capacity(n);
    let mut realized = 0.0;
    let mut pos: Option<Open> = None;

    for i in 0..n {
        let bar = &bars[i];
        if pos.is_none() && i >= 1 && i + 1 < n {
            let direction = match signals[i - 1] {
                Signal::Long => Some(Direction::Long),
                Signal::Short => Some(Direction::Short),
                Signal::Flat => None,
            };
            if let Some(direction) = direction {
                realized -= inst.commission;
                pos = Some(Open {
                    direction,
                    entry_index: i,
                    entry_price: bar.open,
                });
            }
        }
        let exit = match &pos {
            Some(p) if i > p.entry_index => {
                let s = p.direction.sign();
                let stop = p.entry_price - s * stop_dist;
                let target = p.entry_price + s * target_dist;
                // Distances in the trade's favour: negative is against it.
                let fav = |price: f64| s * (price - p.entry_price);
                let flipped = opts.exit_on_flip
                    && matches!(
                        (p.direction, signals[i - 1]),
                        (Direction::Long, Signal::Short) | (Direction::Short, Signal::Long)
                    );
                let worst = if s > 0.0 { bar.low } else { bar.high };
                let best = if s > 0.0 { bar.high } else { bar.low };
                if fav(bar.open) <= -stop_dist {
                    Some((bar.open, ExitReason::Stop))
                } else if fav(bar.open) >= target_dist {
                    Some((bar.open, ExitReason::Target))
                } else if flipped {
                    Some((bar.open, ExitReason::SignalFlip))
                } else if fav(worst) <= -stop_dist {
                    Some((stop, ExitReason::Stop))
                } else if fav(best) >= target_dist {
                    Some((target, ExitReason::Target))
                } else if i + 1 == n {
                    Some((bar.close, ExitReason::EndOfData))
                } else {
                    None
                }
            }
            _ => None,
        };
        if let (Some((price, reason)), Some(p)) = (exit, &pos) {
            let gross = p.direction.sign() * (price - p.entry_price) * pv;
            realized += gross - inst.commission;
            trades.push(Trade {
                direction: p.direction,
                entry_time: bars[p.entry_index].date,
                exit_time: bar.date,
                entry_price: p.entry_price,
                exit_price: price,
                exit_reason: reason,
                pnl: gross - 2.0 * inst.commission,
                bars_held: i - p.entry_index,
                entry_index: p.entry_index,
                exit_index: i,
            });
            pos = None;
        }
        let open_pnl = pos
            .as_ref()
            .map_or(0.0, |p| p.direction.sign() * (bar.close - p.entry_price) * pv);
        equity.push(realized + open_pnl);
    }
    let dates: Vec<NaiveDate> = bars.iter().map(|b| b.date).collect();
    let report = compute_stats(&trades, &equity, &dates, inst);
    Ok(BacktestRun { trades, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::data::bars_from_closes;

    fn day(i: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2017, 3, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn bar(i: u32, o: f64, h: f64, l: f64, c: f64) -> Bar {
        Bar { date: day(i), open: o, high: h, low: l, close: c }
    }

    #[test]
    fn no_signals_no_trades() {
        let bars = bars_from_closes(day(0), &[1.0, 2.0, 3.0, 2.0]);
        let run = run_backtest(&bars, &[Signal::Flat; 4], &InstrumentSpec::default(), 10, 10).unwrap();
        assert!(run.trades.is_empty());
        assert_eq!(run.report.net_profit, 0.0);
        assert!(run.report.equity_curve.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn long_hits_target() {
        let inst = InstrumentSpec::default();
        let bars = vec![
            bar(0, 99.0, 99.5, 98.5, 99.0),
            bar(1, 100.0, 100.5, 99.5, 100.25),
            bar(2, 100.5, 103.0, 100.0, 102.0),
            bar(3, 102.0, 102.5, 101.0, 101.5),
        ];
        let signals = [Signal::Long, Signal::Flat, Signal::Flat, Signal::Flat];
        let run = run_backtest(&bars, &signals, &inst, 10, 20).unwrap();
        assert_eq!(run.trades.len(), 1);
        let t = &run.trades[0];
        assert_eq!((t.entry_price, t.exit_price, t.exit_reason), (100.0, 102.5, ExitReason::Target));
        assert_eq!(t.pnl, 10.0 * 12.5 - 2.0 * inst.commission);
        assert!(t.exit_time > t.entry_time);
    }

    #[test]
    fn stop_wins_when_both_levels_are_touched() {
        let bars = vec![
            bar(0, 100.0, 100.0, 100.0, 100.0),
            bar(1, 100.0, 100.0, 100.0, 100.0),
            bar(2, 100.0, 110.0, 90.0, 100.0),
            bar(3, 100.0, 100.0, 100.0, 100.0),
        ];
        let run = run_backtest(&bars, &[Signal::Short, Signal::Flat, Signal::Flat, Signal::Flat], &InstrumentSpec::default(), 4, 4)
            .unwrap();
        assert_eq!(run.trades[0].exit_reason, ExitReason::Stop);
        assert_eq!(run.trades[0].exit_price, 101.0);
    }

    #[test]
    fn gaps_fill_at_the_open() {
        let bars = vec![
            bar(0, 100.0, 100.0, 100.0, 100.0),
            bar(1, 100.0, 100.0, 100.0, 100.0),
            bar(2, 95.0, 96.0, 94.0, 95.0),
            bar(3, 95.0, 95.0, 95.0, 95.0),
        ];
        let run = run_backtest(&bars, &[Signal::Long, Signal::Flat, Signal::Flat, Signal::Flat], &InstrumentSpec::default(), 40, 8)
            .unwrap();
        assert_eq!(run.trades[0].exit_price, 95.0);
        assert_eq!(run.trades[0].exit_reason, ExitReason::Stop);
    }

    #[test]
    fn open_position_closes_at_the_end() {
        let bars = bars_from_closes(day(0), &[100.0, 100.0, 100.5, 101.0]);
        let run = run_backtest(&bars, &[Signal::Long, Signal::Flat, Signal::Flat, Signal::Flat], &InstrumentSpec::default(), 100, 100)
            .unwrap();
        assert_eq!(run.trades[0].exit_reason, ExitReason::EndOfData);
        assert_eq!(run.trades[0].exit_price, 101.0);
        assert!((run.report.equity_curve.last().unwrap() - run.report.net_profit).abs() < 1e-9);
    }

    #[test]
    fn last_bar_signal_does_not_trade() {
        let bars = bars_from_closes(day(0), &[100.0, 101.0, 102.0]);
        let run = run_backtest(&bars, &[Signal::Flat, Signal::Long, Signal::Long], &InstrumentSpec::default(), 10, 10).unwrap();
        assert!(run.trades.is_empty());
    }

    #[test]
    fn signals_are_ignored_while_in_a_trade() {
        let closes: Vec<f64> = (0..10).map(|i| 100.0 + 0.1 * i as f64).collect();
        let bars = bars_from_closes(day(0), &closes);
        let run = run_backtest(&bars, &[Signal::Long; 10], &InstrumentSpec::default(), 1000, 1000).unwrap();
        assert_eq!(run.trades.len(), 1);

        let mut flip = vec![Signal::Long; 10];
        flip[4] = Signal::Short;
        let run = run_backtest_with(&bars, &flip, &InstrumentSpec::default(), 1000, 1000, EngineOptions { exit_on_flip: true })
            .unwrap();
        assert_eq!(run.trades[0].exit_reason, ExitReason::SignalFlip);
        assert_eq!(run.trades[0].exit_index, 5);
    }

    #[test]
    fn misaligned_signals_are_rejected() {
        let bars = bars_from_closes(day(0), &[1.0, 2.0]);
        assert!(run_backtest(&bars, &[Signal::Flat], &InstrumentSpec::default(), 1, 1).is_err());
    }
}
