use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Accuracy and confusion matrix of `model` on `ds`, in fixed order.
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if ds.shape != model.config.image {
        return Err(Error::Config(format!(
            "dataset images are {:?}, model expects {:?}",
            ds.shape, model.config.image
        )));
    }
    if ds.n_classes != model.config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.n_classes, model.config.n_classes
        )));
    }
    let k = model.config.n_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch::<T>(chunk)?;
        for (truth, pred) in y.into_iter().zip(model.predict(&x)?) {
            confusion[truth][pred] += 1;
        }
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let total = ds.len();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
    })
}
