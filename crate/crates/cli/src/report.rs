//! Report schemas and writers. CSV headers are versioned constants; the
//! aggregate JSON embeds the schema version, seed list, and scenario hashes.

use crate::HarnessError;
use czflow_core::{CavZoneMetrics, TraceRow};
use std::io::Write;
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: &str = "1";

pub const TRACE_CSV_HEADER: &str = "t,cav,zone,lane,fifo_index,x,v,u,e_relax,mode,qp_feasible";
pub const METRICS_CSV_HEADER: &str = "seed,cav,zone,lane,t_entry,t_exit,travel_time,energy,\
obj_weighted,obj_normalized,fe_time,initial_feasibility_failed,infeasible_steps";
pub const SWEEP_CSV_HEADER: &str = "vm,obj_cz1,obj_cz2,obj_total";

#[derive(Debug, Clone, serde::Serialize)]
pub struct ZoneStats {
    pub zone: u32,
    pub exited: f64,
    pub mean_travel_time: f64,
    pub mean_energy: f64,
    pub mean_obj_weighted: f64,
    pub mean_obj_normalized: f64,
    pub fem_count: f64,
    pub fem_time_avg: f64,
    pub infeasible_count: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VariantReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    pub scenario_hash: String,
    pub zones: Vec<ZoneStats>,
    pub total_obj_weighted: f64,
    pub total_obj_normalized: f64,
    pub fem_count: f64,
    pub fem_time_avg: f64,
    pub infeasible_count: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepPoint {
    pub vm: f64,
    pub obj_cz1: f64,
    pub obj_cz2: f64,
    pub obj_total: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct QuadraticFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub argmin: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub fit: QuadraticFit,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct IntervalVariant {
    pub name: String,
    pub mean_obj_weighted: f64,
    pub cavs: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct IntervalReport {
    pub t_start: f64,
    pub t_end: f64,
    pub rate: f64,
    pub variants: Vec<IntervalVariant>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PresetReport {
    pub schema_version: &'static str,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<IntervalReport>>,
}

/// Least-squares fit of y = c0 + c1 x + c2 x² via the normal equations.
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 3, "need at least three points");
    let n = xs.len() as f64;
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let x2 = x * x;
        s1 += x;
        s2 += x2;
        s3 += x2 * x;
        s4 += x2 * x2;
        t0 += y;
        t1 += x * y;
        t2 += x2 * y;
    }
    // 3x3 solve by elimination.
    let mut m = [[n, s1, s2, t0], [s1, s2, s3, t1], [s2, s3, s4, t2]];
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()).unwrap();
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let c2 = m[2][3] / m[2][2];
    let c1 = (m[1][3] - m[1][2] * c2) / m[1][1];
    let c0 = (m[0][3] - m[0][1] * c1 - m[0][2] * c2) / m[0][0];
    (c0, c1, c2)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| HarnessError::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    let file = std::fs::File::create(path)
        .map_err(|e| HarnessError::Runtime(format!("creating {}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(file))
}

fn finish(mut w: std::io::BufWriter<std::fs::File>, path: &Path) -> Result<(), HarnessError> {
    w.flush().map_err(|e| HarnessError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let _ = writeln!(w, "{TRACE_CSV_HEADER}");
    for r in trace {
        let _ = writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.cav.0, r.zone, r.lane, r.fifo_index, r.x, r.v, r.u, r.e_relax, r.mode,
            r.qp_feasible
        );
    }
    finish(w, path)
}

pub fn write_metrics_csv(
    path: &Path,
    rows: &[(u64, &[CavZoneMetrics])],
) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let _ = writeln!(w, "{METRICS_CSV_HEADER}");
    for (seed, metrics) in rows {
        for m in metrics.iter() {
            let _ = writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                seed,
                m.cav,
                m.zone,
                m.lane,
                m.t_entry,
                m.t_exit,
                m.travel_time,
                m.energy,
                m.obj_weighted,
                m.obj_normalized,
                m.fe_time,
                m.initial_feasibility_failed,
                m.infeasible_steps
            );
        }
    }
    finish(w, path)
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let _ = writeln!(w, "{SWEEP_CSV_HEADER}");
    for p in points {
        let _ = writeln!(w, "{},{},{},{}", p.vm, p.obj_cz1, p.obj_cz2, p.obj_total);
    }
    finish(w, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| HarnessError::Runtime(format!("serializing {}: {e}", path.display())))?;
    let _ = writeln!(w);
    finish(w, path)
}
