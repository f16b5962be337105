//! Minimal differentiable-computation core.
//!
//! Parameters are stored as flat `f32` vectors described by a [`Layout`];
//! activations and gradients are carried in `f64`. Every cell exposes a
//! forward step that returns a cache and a backward pass that accumulates
//! parameter gradients and returns input gradients.

mod cells;
pub mod checkpoint;
mod ops;
mod optim;
mod params;

pub use cells::{dense_forward, gru_cell_forward, rnn_cell_forward, DenseGrad, GruCache, GruCell, GruGrad, LayerParams, RnnCache};
pub use ops::{cross_entropy, masked_softmax, masked_softmax_log, mse, softmax_backward, CE_FLOOR};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Gradient, Layout, ParameterVector, Segment};

pub(crate) use cells::{matvec_t_acc, outer_acc};

use crate::error::{Error, Result};

/// A recorded forward pass. Backward consumes the record, so a second
/// backward without a new forward fails.
#[derive(Debug)]
pub struct Tape<T> {
    record: Option<T>,
}

impl<T> Tape<T> {
    pub fn record(value: T) -> Self {
        Self { record: Some(value) }
    }

    pub fn get(&self) -> Result<&T> {
        self.record.as_ref().ok_or(Error::UnrecordedGraph)
    }

    pub fn take(&mut self) -> Result<T> {
        self.record.take().ok_or(Error::UnrecordedGraph)
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
