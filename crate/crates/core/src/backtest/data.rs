use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl Bar {
    /// Checks the OHLC ordering; returns the violated relation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let vals = [self.open, self.high, self.low, self.close];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite price".into());
        }
        if self.high < self.low {
            return Err(format!("high {} below low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above open/close", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below open/close", self.high));
        }
        Ok(())
    }
}

pub const BAR_HEADER: [&str; 5] = ["date", "open", "high", "low", "close"];

/// Reads `date,open,high,low,close` rows with ISO dates. Bars come back
/// sorted by date; duplicate dates are rejected.
pub fn load_bars<R: Read>(source: R) -> Result<Vec<Bar>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != BAR_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}, got {}", BAR_HEADER.join(","), names.join(",")),
        });
    }
    let mut rows: Vec<(usize, Bar)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| bad(format!("date {:?}: {e}", &rec[0])))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{} {:?}: {e}", BAR_HEADER[i], &rec[i])))
        };
        let bar = Bar {
            date,
            open: num(1)?,
            high: num(2)?,
            low: num(3)?,
            close: num(4)?,
        };
        bar.check().map_err(|msg| Error::Data { line, msg })?;
        rows.push((line, bar));
    }
    rows.sort_by_key(|(_, b)| b.date);
    for w in rows.windows(2) {
        if w[0].1.date == w[1].1.date {
            return Err(Error::Data {
                line: w[0].0.max(w[1].0),
                msg: format!("duplicate date {}", w[1].1.date),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, b)| b).collect())
}

pub fn write_bars<W: std::io::Write>(bars: &[Bar], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bars {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

/// Chronological split; the train side gets `floor(fraction * len)` bars.
pub fn split_train_test(bars: &[Bar], fraction: f64) -> Result<(&[Bar], &[Bar])> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} is not in (0, 1)")));
    }
    let cut = (fraction * bars.len() as f64).floor() as usize;
    if cut == 0 || cut == bars.len() {
        return Err(Error::Split(format!(
            "fraction {fraction} of {} bars leaves one side empty",
            bars.len()
        )));
    }
    Ok(bars.split_at(cut))
}

/// Bars built from closes alone: open at the previous close, high and low
/// bracketing both.
pub fn bars_from_closes(start: NaiveDate, closes: &[f64]) -> Vec<Bar> {
    let mut out = Vec::with_capacity(closes.len());
    let mut date = start;
    for (i, &c) in closes.iter().enumerate() {
        let open = if i == 0 { c } else { closes[i - 1] };
        out.push(Bar {
            date,
            open,
            high: open.max(c),
            low: open.min(c),
            close: c,
        });
        date = date.succ_opt().expect("date in range");
    }
    out
}
