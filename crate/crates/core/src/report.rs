//! Aggregation of iteration traces into run-level metrics, and CSV/JSON
//! emission.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::SweepPoint;
use crate::draft::SimilarityStats;
use crate::engine::{Algorithm, IterationTrace};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "algorithm,n,lp_size,alpha,d_per100,v_per100,c_per100,speedup";
pub const SIMILARITY_HEADER: &str = "lp_size,h,q,k,v,attnoutput";
pub const SWEEP_HEADER: &str =
    "lp_size,width,alpha,draft_units,verify_units,calibrate_units,tokens_per_iteration,throughput,speedup_vs_vanilla";

/// Configuration echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub algorithm: Algorithm,
    pub n: usize,
    pub widths: Vec<usize>,
    pub lp_size: usize,
}

/// Simulated time per 100 emitted tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub draft_per_100: f64,
    pub verify_per_100: f64,
    pub calibrate_per_100: f64,
    /// Drafting including calibration.
    pub d_total_per_100: f64,
    pub total_units: f64,
    pub vanilla_units: f64,
    pub total_speedup_vs_vanilla: f64,
}

/// Wall-clock seconds per 100 emitted tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSummary {
    pub draft_per_100: f64,
    pub verify_per_100: f64,
    pub calibrate_per_100: f64,
    pub d_total_per_100: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub n: usize,
    pub widths: Vec<usize>,
    pub lp_size: usize,
    pub alpha: f64,
    pub tokens_per_s_wall: f64,
    pub emitted_tokens: usize,
    pub sim: SimSummary,
    pub wall: WallSummary,
    pub iterations: Vec<IterationTrace>,
}

impl RunReport {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_wall_clock(&self) -> RunReport {
        let mut r = self.clone();
        r.tokens_per_s_wall = 0.0;
        r.wall = WallSummary {
            draft_per_100: 0.0,
            verify_per_100: 0.0,
            calibrate_per_100: 0.0,
            d_total_per_100: 0.0,
            total_secs: 0.0,
        };
        for t in &mut r.iterations {
            t.draft_wall = 0.0;
            t.verify_wall = 0.0;
            t.calibrate_wall = 0.0;
        }
        r
    }
}

/// `α = Σm / Σn` (0 when nothing was drafted).
pub fn acceptance_rate(traces: &[IterationTrace]) -> f64 {
    let m: usize = traces.iter().map(|t| t.m).sum();
    let n: usize = traces.iter().map(|t| t.n).sum();
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

/// Builds a report. `vanilla_baseline` is the simulated time vanilla
/// decoding would need for the same number of tokens.
pub fn aggregate(meta: RunMeta, traces: Vec<IterationTrace>, vanilla_baseline: f64) -> Result<RunReport> {
    if traces.is_empty() {
        return Err(Error::Empty("iteration traces"));
    }
    let emitted: usize = traces.iter().map(|t| t.emitted).sum();
    if emitted == 0 {
        return Err(Error::Empty("emitted tokens"));
    }
    let per100 = |f: fn(&IterationTrace) -> f64| 100.0 * traces.iter().map(f).sum::<f64>() / emitted as f64;
    let (sd, sv, sc) = (per100(|t| t.draft_sim), per100(|t| t.verify_sim), per100(|t| t.calibrate_sim));
    let (wd, wv, wc) = (per100(|t| t.draft_wall), per100(|t| t.verify_wall), per100(|t| t.calibrate_wall));
    let total_units: f64 = traces.iter().map(|t| t.total_sim()).sum();
    let total_secs: f64 = traces.iter().map(|t| t.draft_wall + t.verify_wall + t.calibrate_wall).sum();
    let speedup = if total_units > 0.0 { vanilla_baseline / total_units } else { 0.0 };
    Ok(RunReport {
        algorithm: meta.algorithm,
        n: meta.n,
        widths: meta.widths,
        lp_size: meta.lp_size,
        alpha: acceptance_rate(&traces),
        tokens_per_s_wall: if total_secs > 0.0 { emitted as f64 / total_secs } else { 0.0 },
        emitted_tokens: emitted,
        sim: SimSummary {
            draft_per_100: sd,
            verify_per_100: sv,
            calibrate_per_100: sc,
            d_total_per_100: sd + sc,
            total_units,
            vanilla_units: vanilla_baseline,
            total_speedup_vs_vanilla: speedup,
        },
        wall: WallSummary { draft_per_100: wd, verify_per_100: wv, calibrate_per_100: wc, d_total_per_100: wd + wc, total_secs },
        iterations: traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unsupported report format {other:?}"))),
        }
    }
}

/// One CSV row (no trailing newline) in [`CSV_HEADER`] order.
pub fn csv_row(r: &RunReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.algorithm, r.n, r.lp_size, r.alpha, r.sim.draft_per_100, r.sim.verify_per_100, r.sim.calibrate_per_100,
        r.sim.total_speedup_vs_vanilla
    )
}

/// Comparison table with one row per report.
pub fn csv_table(reports: &[RunReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn emit(report: &RunReport, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_vec_pretty(report)?,
        ReportFormat::Csv => csv_table(std::slice::from_ref(report)).into_bytes(),
    })
}

pub fn parse_json(bytes: &[u8]) -> Result<RunReport> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Similarity table with one row per layer-parallel size.
pub fn similarity_csv(rows: &[(usize, SimilarityStats)]) -> Result<String> {
    let mut out = format!("{SIMILARITY_HEADER}\n");
    for (lp, stats) in rows {
        let m = stats.means().ok_or(Error::Empty("similarity samples"))?;
        out.push_str(&format!("{lp},{},{},{},{},{}\n", m[0], m[1], m[2], m[3], m[4]));
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.lp_size,
            p.width,
            p.alpha,
            p.draft_units,
            p.verify_units,
            p.calibrate_units,
            p.tokens_per_iteration,
            p.throughput,
            p.speedup_vs_vanilla
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(m: usize, n: usize, d: f64, v: f64, c: f64) -> IterationTrace {
        IterationTrace { m, n, emitted: m + 1, draft_sim: d, verify_sim: v, calibrate_sim: c, ..Default::default() }
    }

    fn meta() -> RunMeta {
        RunMeta { algorithm: Algorithm::Easyspec, n: 5, widths: vec![1; 5], lp_size: 4 }
    }

    #[test]
    fn alpha_examples() {
        let r = aggregate(meta(), vec![trace(5, 5, 1.0, 1.0, 1.0)], 3.0).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert_eq!(r.sim.total_speedup_vs_vanilla, 1.0);
        let r = aggregate(meta(), vec![trace(3, 5, 1.0, 1.0, 0.0), trace(5, 5, 1.0, 1.0, 0.0)], 1.0).unwrap();
        assert!((r.alpha - 0.8).abs() < 1e-12);
    }

    #[test]
    fn per100_and_attribution() {
        let traces = vec![trace(3, 5, 2.0, 3.0, 1.0), trace(1, 5, 4.0, 3.0, 1.0)];
        let r = aggregate(meta(), traces, 28.0).unwrap();
        // 6 emitted tokens.
        assert!((r.sim.draft_per_100 - 100.0).abs() < 1e-9);
        assert!((r.sim.verify_per_100 - 100.0).abs() < 1e-9);
        assert!((r.sim.calibrate_per_100 - 100.0 / 3.0).abs() < 1e-9);
        let sum = r.sim.draft_per_100 + r.sim.verify_per_100 + r.sim.calibrate_per_100;
        assert!((sum * 6.0 / 100.0 - r.sim.total_units).abs() < 1e-9);
        assert!((r.sim.total_speedup_vs_vanilla - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rejected() {
        assert!(aggregate(meta(), vec![], 1.0).is_err());
        let zero = IterationTrace::default();
        assert!(aggregate(meta(), vec![zero], 1.0).is_err());
    }

    #[test]
    fn json_round_trip_and_csv_schema() {
        let r = aggregate(meta(), vec![trace(2, 5, 0.1, 0.7, 1.0 / 3.0)], 3.3).unwrap();
        let bytes = emit(&r, ReportFormat::Json).unwrap();
        assert_eq!(parse_json(&bytes).unwrap(), r);
        let csv = String::from_utf8(emit(&r, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "algorithm,n,lp_size,alpha,d_per100,v_per100,c_per100,speedup");
        assert!(csv.lines().nth(1).unwrap().starts_with("easyspec,5,4,0.4,"));
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn json_has_declared_top_level_fields() {
        let r = aggregate(meta(), vec![trace(2, 5, 0.1, 0.7, 0.2)], 3.3).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&emit(&r, ReportFormat::Json).unwrap()).unwrap();
        for key in ["algorithm", "n", "widths", "lp_size", "alpha", "tokens_per_s_wall", "sim", "iterations"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["draft_per_100", "verify_per_100", "calibrate_per_100", "total_speedup_vs_vanilla"] {
            assert!(v["sim"].get(key).is_some(), "{key}");
        }
    }
}
