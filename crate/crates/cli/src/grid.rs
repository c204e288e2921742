//! Cartesian experiment grids with per-point completion markers.

use std::fs;
use std::path::Path;

use drawdet::eval::AggregateReport;
use drawdet::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentGrid;
use crate::run::run_config;

pub const POINT_MARKER: &str = "point.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: usize,
    pub values: Vec<(String, toml::Value)>,
    pub aggregate: AggregateReport,
}

fn cell(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders rows as a table. `ap_diff` is the best mean over all rows minus
/// the row's mean.
pub fn grid_table(grid: &ExperimentGrid, rows: &[GridRow]) -> String {
    let best = rows.iter().map(|r| r.aggregate.mean).fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::from("point");
    for key in grid.axes.keys() {
        s.push(',');
        s.push_str(key);
    }
    s.push_str(",n_runs,mean_ap,stddev,ap_diff\n");
    for r in rows {
        s += &r.point.to_string();
        for (_, v) in &r.values {
            s.push(',');
            s.push_str(&cell(v));
        }
        s += &format!(",{},{},{},{}\n", r.aggregate.n_runs, r.aggregate.mean, r.aggregate.stddev, best - r.aggregate.mean);
    }
    s
}

/// Runs every point into `root/point-NNN`, then writes `root/grid.csv`. With
/// `resume`, finished points and seeds are read back from their markers.
pub fn run_grid(grid: &ExperimentGrid, root: &Path, resume: bool) -> Result<Vec<GridRow>> {
    let points = grid.points()?;
    fs::create_dir_all(root).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
    let mut rows = Vec::with_capacity(points.len());
    for (i, values) in points.into_iter().enumerate() {
        let dir = root.join(format!("point-{i:03}"));
        let marker = dir.join(POINT_MARKER);
        if resume && marker.exists() {
            let text = fs::read_to_string(&marker).map_err(|e| Error::Data(format!("{}: {e}", marker.display())))?;
            let row: GridRow = serde_json::from_str(&text)?;
            if row.values == values {
                info!("grid point {i}: already complete");
                rows.push(row);
                continue;
            }
            return Err(Error::Data(format!("{} belongs to a different grid", marker.display())));
        }
        let cfg = grid.config_at(&values)?;
        info!("grid point {i}: {values:?}");
        let summary = run_config(&cfg, &dir, resume)?;
        let aggregate = summary
            .aggregate
            .ok_or_else(|| Error::Config(format!("grid point {i} produced no score; give it a dev or test set")))?;
        let row = GridRow { point: i, values, aggregate };
        fs::write(&marker, serde_json::to_string_pretty(&row)?)
            .map_err(|e| Error::Data(format!("{}: {e}", marker.display())))?;
        rows.push(row);
    }
    let table = root.join("grid.csv");
    fs::write(&table, grid_table(grid, &rows)).map_err(|e| Error::Data(format!("{}: {e}", table.display())))?;
    Ok(rows)
}
