//! Parameter fitting: expectation-maximization for the scalar model and a
//! CMA-ES minimizer for everything else.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

pub mod cmaes;
pub mod em;

pub use cmaes::{
    cmaes_minimize, constants_with_parents, default_constants, restart_schedule, Bounds, CmaesConstants,
    CmaesOptions, CmaesResult, CmaesState, Objective, RestartResult, StopReason,
};
pub use em::{em_fit, EStep, EmOptions, EmState, EmTheta, MStep};

/// One iteration of a fit. Fields that do not apply to a method stay empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub evaluations: usize,
    pub lambda: Option<usize>,
    pub best_f: Option<f64>,
    pub sigma: Option<f64>,
    pub loglik: Option<f64>,
}

/// CSV with header `iteration,evaluations,lambda,best_f,sigma,loglik`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["iteration", "evaluations", "lambda", "best_f", "sigma", "loglik"])?;
    }
    w.flush()?;
    Ok(())
}
