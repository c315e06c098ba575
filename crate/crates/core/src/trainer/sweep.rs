//! Grid over expert count `n` and Top-K size `K`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::SplitData;
use super::eval::evaluate;
use super::train::train;
use crate::error::{Error, Result};
use crate::moe::RoutingMode;

/// One grid cell. Accuracy is a percentage on held-out data in student
/// mode; failed cells leave the metrics empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Acc")]
    pub acc: Option<f64>,
    #[serde(rename = "Sim")]
    pub sim: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn run_cell(base: &TrainConfig, data: &SplitData, n: usize, k: usize) -> SweepRow {
    let mut config = base.clone();
    config.num_experts = n;
    config.top_k = k;
    let outcome = config
        .validate()
        .and_then(|_| train(&config, data))
        .and_then(|run| evaluate(&run.model, &data.heldout, RoutingMode::Student));
    match outcome {
        Ok(report) => SweepRow {
            n,
            k,
            acc: Some(100.0 * report.accuracy),
            sim: report.sim,
            status: "ok".into(),
        },
        Err(e) => SweepRow {
            n,
            k,
            acc: None,
            sim: None,
            status: format!("failed: {e}"),
        },
    }
}

/// Trains one fresh seeded model per `(n, K)` pair of the Cartesian product
/// and evaluates it. Cells that cannot run are marked failed; the sweep
/// always completes. Rows come back in grid order.
pub fn sweep(n_values: &[usize], k_values: &[usize], config: &TrainConfig, data: &SplitData) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() || k_values.is_empty() {
        return Err(Error::config("grid", "n and K grids must be non-empty"));
    }
    let cells: Vec<(usize, usize)> = n_values
        .iter()
        .flat_map(|&n| k_values.iter().map(move |&k| (n, k)))
        .collect();
    Ok(cells.par_iter().map(|&(n, k)| run_cell(config, data, n, k)).collect())
}

pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::generate_dataset;

    #[test]
    fn single_cell_grid_round_trips() {
        let mut c = TrainConfig::default();
        c.d = 8;
        c.hidden = 8;
        c.data.train_size = 40;
        c.data.heldout_size = 20;
        c.total_steps = 10;
        c.warmup_steps = 2;
        c.batch = 4;
        let data = generate_dataset(&c, 0).unwrap();
        let rows = sweep(&[8], &[2], &c, &data).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].ok(), "{}", rows[0].status);

        let rows = sweep(&[2, 4], &[1, 3], &c, &data).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(!rows[1].ok() && rows[1].acc.is_none());
        assert!(rows[0].ok() && rows[2].ok() && rows[3].ok());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep(&rows, &path).unwrap();
        assert_eq!(read_sweep(&path).unwrap(), rows);
    }
}
