//! Hyperparameter grid search on validation factual loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Grid, GridCell};
use crate::data::ObservationalDataset;
use crate::error::{Error, Result};
use crate::estimators::{fit_estimator, CateModel, EstimatorConfig, EstimatorKind, NetSpec};

/// Validation loss or failure reason of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: GridCell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: GridCell,
    pub model: CateModel,
    pub cells: Vec<CellOutcome>,
}

pub fn cell_config(base: &EstimatorConfig, cell: &GridCell) -> EstimatorConfig {
    EstimatorConfig {
        learning_rate: cell.learning_rate,
        batch_size: cell.batch_size,
        balance_weight: cell.balance_weight,
        ..base.clone()
    }
}

/// Fits every cell (concurrently on the current thread pool) and keeps the one
/// with the lowest validation factual loss; ties go to the earliest cell.
/// Estimators without a validation loss have a single cell.
pub fn grid_search(
    kind: EstimatorKind,
    grid: &Grid,
    base: &EstimatorConfig,
    train: &ObservationalDataset,
    val: &ObservationalDataset,
    seed: u64,
) -> Result<GridResult> {
    grid.validate()?;
    let cells = grid.cells(kind);
    let fits: Vec<Result<CateModel>> = cells
        .par_iter()
        .map(|cell| {
            let spec = NetSpec::standard(cell.d_phi, cell.d_h, seed);
            fit_estimator(kind, train, val, &cell_config(base, cell), &spec)
        })
        .collect();
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, f64, CateModel)> = None;
    for (k, (cell, fit)) in cells.iter().zip(fits).enumerate() {
        match fit {
            Ok(model) => {
                let loss = model.validation_loss();
                outcomes.push(CellOutcome {
                    cell: *cell,
                    validation_loss: loss,
                    error: None,
                });
                let score = loss.filter(|l| l.is_finite()).unwrap_or(f64::INFINITY);
                if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
                    best = Some((k, score, model));
                }
            }
            Err(e) => outcomes.push(CellOutcome {
                cell: *cell,
                validation_loss: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((k, _, model)) => Ok(GridResult {
            best: cells[k],
            model,
            cells: outcomes,
        }),
        None => Err(Error::AllCellsFailed(
            outcomes
                .iter()
                .enumerate()
                .map(|(k, o)| format!("cell {k}: {}", o.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}
