use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{make_batches, BatchOptions, SplitData};
use crate::error::{Error, Result};
use crate::model::TintModel;
use crate::train::rmse;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub path: String,
    pub storm_id: String,
    pub frame_index: u32,
    pub pred: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub predictions: Vec<Prediction>,
}

/// Eval-mode predictions over a split, in manifest order.
pub fn evaluate(model: &TintModel, data: &SplitData, batch_size: usize) -> Result<EvalReport> {
    let opts = BatchOptions {
        dtype: model.dtype(),
        ..BatchOptions::eval(batch_size, model.config().input_size)
    };
    let mut predictions = Vec::with_capacity(data.len());
    for batch in make_batches(data, &opts)? {
        let batch = batch?;
        let preds = model.predict(&batch.images)?;
        for (&i, p) in batch.indices.iter().zip(preds) {
            let e = &data.entries[i];
            predictions.push(Prediction {
                path: e.path.clone(),
                storm_id: e.storm_id.clone(),
                frame_index: e.frame_index,
                pred: p,
                target: e.intensity,
            });
        }
    }
    let p: Vec<f64> = predictions.iter().map(|r| r.pred).collect();
    let t: Vec<f64> = predictions.iter().map(|r| r.target).collect();
    let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    Ok(EvalReport {
        rmse: rmse(&p, &t)?,
        mae,
        predictions,
    })
}

/// Tab-separated per-sample dump with residual `pred - target`.
pub fn write_predictions(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("path\tstorm_id\tframe_index\tpred\ttarget\tresidual\n");
    for r in &report.predictions {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.path,
            r.storm_id,
            r.frame_index,
            r.pred,
            r.target,
            r.pred - r.target
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
