//! CSV and JSON output of trajectories, controls and reports.
//!
//! Files:
//!
//! - `trajectory.csv`: `step,t,node,x[,y],value`, one row per level and node
//! - `control.csv`, `truth.csv`: `node,x[,y],value`
//! - `history.csv`: one row per optimizer iteration
//! - `report.json`, `kkt.json`, `ssc.json`: summaries
//! - `timings.json`: wall-clock seconds per phase, the only output that differs
//!   between identical runs
//!
//! With [`Format::Json`] the trajectory and controls are written as
//! `trajectory.json`, `control.json` and `truth.json` instead.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::assimilation::CostBreakdown;
use crate::error::{Error, Result};
use crate::forward::{StateTrajectory, TimeGrid};
use crate::grid::Grid;
use crate::optimizer::{GrowthProbe, HistoryEntry, KktReport, SscReport};
use crate::twin::{SnapReport, TwinResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

fn axis_names(grid: &Grid) -> &'static [&'static str] {
    if grid.dim() == 1 {
        &["x"]
    } else {
        &["x", "y"]
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryJson<'a> {
    dim: usize,
    n: usize,
    times: Vec<f64>,
    values: &'a [Vec<f64>],
}

#[derive(Serialize)]
struct ControlJson<'a> {
    dim: usize,
    n: usize,
    values: &'a [f64],
}

pub fn write_trajectory(
    path: &Path,
    grid: &Grid,
    time: &TimeGrid,
    traj: &StateTrajectory,
    format: Format,
) -> Result<()> {
    match format {
        Format::Json => write_json(
            path,
            &TrajectoryJson {
                dim: grid.dim(),
                n: grid.n(),
                times: (0..traj.n_levels()).map(|m| time.time(m)).collect(),
                values: traj.snapshots(),
            },
        ),
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let mut header = vec!["step", "t", "node"];
            header.extend(axis_names(grid));
            header.push("value");
            w.write_record(&header)?;
            let coords: Vec<Vec<String>> = (0..grid.node_count())
                .map(|j| grid.coords(j).iter().map(|c| c.to_string()).collect())
                .collect();
            for (m, snap) in traj.snapshots().iter().enumerate() {
                let (ms, ts) = (m.to_string(), time.time(m).to_string());
                for (j, v) in snap.iter().enumerate() {
                    let mut row = vec![ms.clone(), ts.clone(), j.to_string()];
                    row.extend(coords[j].iter().cloned());
                    row.push(v.to_string());
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
            Ok(())
        }
    }
}

pub fn write_control(path: &Path, grid: &Grid, u: &[f64], format: Format) -> Result<()> {
    crate::error::check_len("control", grid.node_count(), u.len())?;
    match format {
        Format::Json => write_json(
            path,
            &ControlJson {
                dim: grid.dim(),
                n: grid.n(),
                values: u,
            },
        ),
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let mut header = vec!["node"];
            header.extend(axis_names(grid));
            header.push("value");
            w.write_record(&header)?;
            for (j, v) in u.iter().enumerate() {
                let mut row = vec![j.to_string()];
                row.extend(grid.coords(j).iter().map(|c| c.to_string()));
                row.push(v.to_string());
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Reads a control CSV with a header row: the first column is the node index,
/// the last column the value. Every node must appear exactly once.
pub fn read_control_csv(path: &Path, grid: &Grid) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let n = grid.node_count();
    let mut values = vec![f64::NAN; n];
    let mut seen = 0usize;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad =
            |what: &str| Error::Config(format!("{}: row {}: {what}", path.display(), line + 2));
        let node: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad node index"))?;
        let value: f64 = rec
            .get(rec.len().saturating_sub(1))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad value"))?;
        if node >= n {
            return Err(bad("node index out of range"));
        }
        if !values[node].is_nan() {
            return Err(bad("duplicate node"));
        }
        values[node] = value;
        seen += 1;
    }
    crate::error::check_len("control file rows", n, seen)?;
    Ok(values)
}

pub fn write_history_csv(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "cost",
        "step",
        "psi",
        "kkt_residual",
        "lambda",
        "roundoff_accept",
    ])?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            h.cost.to_string(),
            h.step.to_string(),
            h.psi.to_string(),
            h.kkt_residual.to_string(),
            h.lambda.to_string(),
            h.roundoff_accept.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of a twin run, without the nodal fields.
#[derive(Debug, Clone, Serialize)]
pub struct Report<'a> {
    pub converged: bool,
    pub iterations: usize,
    pub error_l2: f64,
    pub error_lbeta: f64,
    pub truth_norm_l2: f64,
    pub cost: CostBreakdown,
    pub kkt: &'a KktReport,
    pub ssc: Option<&'a SscReport>,
    pub growth_probe: Option<&'a GrowthProbe>,
    pub observation_points: &'a [SnapReport],
}

impl<'a> Report<'a> {
    pub fn new(r: &'a TwinResult) -> Self {
        Self {
            converged: r.converged,
            iterations: r.iterations,
            error_l2: r.error_l2,
            error_lbeta: r.error_lbeta,
            truth_norm_l2: r.truth_norm_l2,
            cost: r.cost,
            kkt: &r.kkt,
            ssc: r.ssc.as_ref(),
            growth_probe: r.growth.as_ref(),
            observation_points: &r.snaps,
        }
    }
}

/// Writes every output of a twin run into `dir` (created if missing).
pub fn export_twin(
    dir: &Path,
    grid: &Grid,
    time: &TimeGrid,
    result: &TwinResult,
    format: Format,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    write_trajectory(
        &dir.join(format!("trajectory.{ext}")),
        grid,
        time,
        &result.recovered_state,
        format,
    )?;
    write_control(
        &dir.join(format!("control.{ext}")),
        grid,
        &result.recovered,
        format,
    )?;
    write_control(
        &dir.join(format!("truth.{ext}")),
        grid,
        &result.truth,
        format,
    )?;
    write_history_csv(&dir.join("history.csv"), &result.history)?;
    write_json(&dir.join("report.json"), &Report::new(result))?;
    write_json(&dir.join("kkt.json"), &result.kkt)?;
    if let Some(ssc) = &result.ssc {
        write_json(&dir.join("ssc.json"), ssc)?;
    }
    write_json(&dir.join("timings.json"), &result.timings)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(2, 3).unwrap();
        let u: Vec<f64> = (0..9).map(|j| (j as f64 * 0.37).sin() / 3.0).collect();
        let path = dir.path().join("u.csv");
        write_control(&path, &grid, &u, Format::Csv).unwrap();
        assert_eq!(read_control_csv(&path, &grid).unwrap(), u);
        let other = Grid::new(2, 4).unwrap();
        assert_eq!(
            read_control_csv(&path, &other).unwrap_err().kind(),
            "dimension_mismatch"
        );
    }

    #[test]
    fn trajectory_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(1, 4).unwrap();
        let time = TimeGrid::new(1.0, 2).unwrap();
        let traj = StateTrajectory::new(vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4]]);
        let path = dir.path().join("t.csv");
        write_trajectory(&path, &grid, &time, &traj, Format::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,t,node,x,value");
        assert_eq!(lines.len(), 1 + 12);
        assert_eq!(lines[5], "1,0.5,0,0.2,2");
    }
}
