use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Result;

/// One evaluation result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run_id: String,
    pub protocol: String,
    pub condition_kind: String,
    pub condition_param: f64,
    pub top1: f64,
    pub top5: f64,
    pub n_test: usize,
    pub seed: u64,
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}
