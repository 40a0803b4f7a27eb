//! Per-iteration solver trace and its CSV encoding.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const TRACE_HEADER: [&str; 13] = [
    "iter",
    "eta_p",
    "eta_d",
    "eta_g",
    "eta_max",
    "primal_obj",
    "dual_obj",
    "sigma",
    "p_max",
    "inner_iters",
    "cg_iters",
    "escape_delta",
    "time_s",
];

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub eta_p: f64,
    pub eta_d: f64,
    pub eta_g: f64,
    pub eta_max: f64,
    pub primal_obj: f64,
    pub dual_obj: f64,
    /// Penalty used by this iteration's subproblem.
    pub sigma: f64,
    pub p: Vec<usize>,
    pub inner_iters: usize,
    pub cg_iters: usize,
    /// Total columns added by saddle escapes in this iteration.
    pub escape_delta: usize,
    /// Seconds since the solve started; zero when timing is disabled.
    pub time_s: f64,
}

impl TraceRecord {
    pub fn p_max(&self) -> usize {
        self.p.iter().copied().max().unwrap_or(0)
    }

    fn csv_fields(&self) -> [String; 13] {
        let f = |v: f64| format!("{v:.16e}");
        [
            self.k.to_string(),
            f(self.eta_p),
            f(self.eta_d),
            f(self.eta_g),
            f(self.eta_max),
            f(self.primal_obj),
            f(self.dual_obj),
            f(self.sigma),
            self.p_max().to_string(),
            self.inner_iters.to_string(),
            self.cg_iters.to_string(),
            self.escape_delta.to_string(),
            f(self.time_s),
        ]
    }
}

/// Writes the header and one row per record.
pub fn write_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[TraceRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ASCII"))
}
