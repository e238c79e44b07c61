use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::Bar;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::kalman::{self, CovarianceForm, FilterRun};
use crate::lgssm::{build_model, LgssmSpec, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Long,
    Short,
    Flat,
}

/// How the short side of a threshold rule is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortRule {
    /// Short below `reference - offset`: a dead zone of width `2 * offset`.
    #[default]
    Symmetric,
    /// Short below `reference + offset`, so every bar that is not long is short.
    Literal,
}

fn threshold(value: f64, reference: f64, offset: f64, rule: ShortRule, strict: bool) -> Signal {
    let short_level = match rule {
        ShortRule::Symmetric => reference - offset,
        ShortRule::Literal => reference + offset,
    };
    let (long, short) = if strict {
        (value > reference + offset, value < short_level)
    } else {
        (value >= reference + offset, value <= short_level)
    };
    if long {
        Signal::Long
    } else if short {
        Signal::Short
    } else {
        Signal::Flat
    }
}

/// Minimum-norm state reproducing `z = H x`: `H^T z / (H H^T)`.
pub fn anchor_state(h: &DMatrix<f64>, z: f64) -> Result<DVector<f64>> {
    let hh = (h * h.transpose())[(0, 0)];
    if hh <= 0.0 || !hh.is_finite() {
        return Err(Error::InvalidModel("measurement row is zero".into()));
    }
    Ok(h.transpose().column(0) * (z / hh))
}

/// Copy of `spec` whose prior on `x_1` is centered on `first_close`.
pub fn anchored_spec(spec: &LgssmSpec, first_close: f64) -> Result<LgssmSpec> {
    let mut out = spec.clone();
    out.init = Gaussian::from_parts(anchor_state(spec.h(1), first_close)?, spec.init.cov.clone());
    Ok(out)
}

/// Tracks closes bar by bar and returns, for each bar, the filter's
/// prediction of the next close. Bar 0 only anchors the state, so its entry
/// is `None`.
pub fn kf_predictions(bars: &[Bar], spec: &LgssmSpec) -> Result<Vec<Option<f64>>> {
    if bars.is_empty() {
        return Ok(Vec::new());
    }
    let h = spec.h(1).clone();
    let anchor = Gaussian::from_parts(anchor_state(&h, bars[0].close)?, spec.init.cov.clone());
    let mut anchored = spec.clone();
    anchored.init = kalman::predict_with_gain(&anchor, spec, None, 1, None);
    let mut run = FilterRun::new(&anchored, CovarianceForm::Joseph);
    let mut out = Vec::with_capacity(bars.len());
    out.push(None);
    for (i, bar) in bars.iter().enumerate().skip(1) {
        let at = |e| Error::AtBar {
            bar: i,
            source: Box::new(e),
        };
        run.step(&DVector::from_element(1, bar.close), None).map_err(at)?;
        let next = run.next_prediction(None);
        let t = run.steps().len() + 1;
        let z = (anchored.h(t) * &next.mean + anchored.d(t))[0];
        if !z.is_finite() {
            return Err(at(Error::SingularMatrix("non-finite prediction".into())));
        }
        out.push(Some(z));
    }
    Ok(out)
}

/// Long when the predicted next close is at least `close + offset`, short
/// when it is at most the short level, flat otherwise.
pub fn kf_trend_signals(bars: &[Bar], model: &ModelParams, offset: f64, rule: ShortRule) -> Result<Vec<Signal>> {
    let spec = build_model(model)?;
    let preds = kf_predictions(bars, &spec)?;
    Ok(bars
        .iter()
        .zip(preds)
        .map(|(b, p)| match p {
            Some(z) => threshold(z, b.close, offset, rule, false),
            None => Signal::Flat,
        })
        .collect())
}

/// Simple moving averages of `closes` over `period`, `None` until warm.
pub fn sma(closes: &[f64], period: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(closes.len());
    let mut sum = 0.0;
    for i in 0..closes.len() {
        sum += closes[i];
        if i >= period {
            sum -= closes[i - period];
        }
        out.push((i + 1 >= period).then(|| sum / period as f64));
    }
    out
}

/// Long when SMA(short) > SMA(long) + offset, short below the short level.
/// Flat until the long average has a full window.
pub fn ma_crossover_signals(
    bars: &[Bar],
    short_period: usize,
    long_period: usize,
    offset: f64,
    rule: ShortRule,
) -> Result<Vec<Signal>> {
    if short_period == 0 || long_period < short_period {
        return Err(Error::InvalidArgument(format!(
            "moving average periods short={short_period} long={long_period}"
        )));
    }
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let fast = sma(&closes, short_period);
    let slow = sma(&closes, long_period);
    Ok(fast
        .iter()
        .zip(&slow)
        .map(|(f, s)| match (f, s) {
            (Some(f), Some(s)) => threshold(*f, *s, offset, rule, true),
            _ => Signal::Flat,
        })
        .collect())
}
