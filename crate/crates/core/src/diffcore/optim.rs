use serde::{Deserialize, Serialize};

use super::{Gradient, ParameterVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    /// Global-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
    kind: OptimizerKind,
    moments: Option<(Vec<f64>, Vec<f64>)>,
    steps: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(lr: f64, clip: Option<f64>, kind: OptimizerKind) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {lr} must be non-negative")));
        }
        if clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip threshold must be positive".into()));
        }
        Ok(Self { lr, clip, kind, moments: None, steps: 0 })
    }

    pub fn sgd(lr: f64) -> Self {
        Self { lr, clip: Some(5.0), kind: OptimizerKind::Sgd, moments: None, steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Clip `grads` to the global-norm threshold (in place) and apply one
    /// descent step `θ ← θ - α g` (or the adaptive-moment variant).
    pub fn step(&mut self, params: &mut ParameterVector, grads: &mut Gradient) -> Result<()> {
        params.check_layout(grads.layout())?;
        if grads.values().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        if let Some(clip) = self.clip {
            let norm = grads.norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grads.values()) {
                    *p = (f64::from(*p) - self.lr * g) as f32;
                }
            }
            OptimizerKind::Adam => {
                let n = params.len();
                let (m, v) = self.moments.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let c1 = 1.0 - BETA1.powi(self.steps as i32);
                let c2 = 1.0 - BETA2.powi(self.steps as i32);
                for (i, (p, g)) in params.values_mut().iter_mut().zip(grads.values()).enumerate() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    *p = (f64::from(*p) - self.lr * update) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Layout, Segment};
    use std::sync::Arc;

    fn layout(n: usize) -> Arc<Layout> {
        Arc::new(Layout::new(vec![Segment::new("p", &[n], 1)]))
    }

    #[test]
    fn plain_descent() {
        let mut p = ParameterVector::new(layout(1), vec![1.0]).unwrap();
        let mut g = Gradient::from_values(layout(1), vec![0.5]).unwrap();
        let mut opt = OptimizerState::new(0.1, None, OptimizerKind::Sgd).unwrap();
        opt.step(&mut p, &mut g).unwrap();
        assert!((p.values()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = ParameterVector::new(layout(2), vec![0.0, 0.0]).unwrap();
        let mut g = Gradient::from_values(layout(2), vec![6.0, 8.0]).unwrap();
        let mut opt = OptimizerState::new(1.0, Some(5.0), OptimizerKind::Sgd).unwrap();
        opt.step(&mut p, &mut g).unwrap();
        assert!((g.norm() - 5.0).abs() < 1e-12);
        let moved = (f64::from(p.values()[0]).powi(2) + f64::from(p.values()[1]).powi(2)).sqrt();
        assert!((moved - 5.0).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_zero_rate_are_identity() {
        let init = vec![0.25, -3.0];
        let mut p = ParameterVector::new(layout(2), init.clone()).unwrap();
        let mut g = Gradient::zeros(layout(2));
        OptimizerState::sgd(0.1).step(&mut p, &mut g).unwrap();
        assert_eq!(p.values(), init.as_slice());
        let mut g = Gradient::from_values(layout(2), vec![3.0, -1.0]).unwrap();
        OptimizerState::new(0.0, Some(5.0), OptimizerKind::Sgd).unwrap().step(&mut p, &mut g).unwrap();
        assert_eq!(p.values(), init.as_slice());
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = ParameterVector::zeros(layout(2));
        let mut g = Gradient::from_values(layout(2), vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(OptimizerState::sgd(0.1).step(&mut p, &mut g), Err(Error::NonFiniteGradient)));
        let mut g = Gradient::zeros(layout(3));
        assert!(matches!(OptimizerState::sgd(0.1).step(&mut p, &mut g), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = ParameterVector::new(layout(1), vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(0.01, None, OptimizerKind::Adam).unwrap();
        for _ in 0..3 {
            let mut g = Gradient::from_values(layout(1), vec![2.0]).unwrap();
            opt.step(&mut p, &mut g).unwrap();
        }
        assert!((p.values()[0] - 0.97).abs() < 1e-4);
    }
}
