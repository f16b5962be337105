//! Central finite-difference verification of the model's analytic gradient.

use rand::SeedableRng;

use crate::error::Result;
use crate::model::{LteModel, Objective, PreparedSample};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero entries are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare `dL/dθ` from [`LteModel::backward`] with central differences of
/// step `h` on every parameter. Dropout masks are replayed from
/// `dropout_seed`; the teacher, if any, sees the student's decoder inputs.
pub fn check_gradients(
    model: &LteModel,
    sample: &PreparedSample,
    teacher: Option<&LteModel>,
    mu: f64,
    lambda: f64,
    dropout_seed: u64,
    h: f32,
) -> Result<GradCheckReport> {
    let full = teacher.is_some() && lambda != 0.0;
    let mut pass = model.forward_train(sample, Some(&mut Rng::seed_from_u64(dropout_seed)), None, full)?;
    let reps = match teacher {
        Some(t) if full => Some(t.teacher_reps(sample, &pass.inputs()?)?),
        _ => None,
    };
    let objective = Objective { mu, lambda, teacher: reps.as_deref() };
    let mut grad = model.zero_grad();
    model.backward(&mut pass, &objective, 1.0, &mut grad)?;

    let mut probe = model.clone();
    let loss_at = |probe: &LteModel| -> Result<f64> {
        Ok(probe.sample_loss(sample, Some(&mut Rng::seed_from_u64(dropout_seed)), &objective)?.total)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for i in 0..model.num_params() {
        let orig = model.params().values()[i];
        let up = orig + h;
        let down = orig - h;
        probe.params_mut().values_mut()[i] = up;
        let l_up = loss_at(&probe)?;
        probe.params_mut().values_mut()[i] = down;
        let l_down = loss_at(&probe)?;
        probe.params_mut().values_mut()[i] = orig;
        let numeric = (l_up - l_down) / (f64::from(up) - f64::from(down));
        let analytic = grad.values()[i];
        let err = relative_error(analytic, numeric, REL_ERROR_FLOOR);
        if err > report.max_rel_error {
            report = GradCheckReport { max_rel_error: err, worst_index: i, analytic, numeric, checked: 0 };
        }
    }
    report.checked = model.num_params();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LteConfig, ModelSection};
    use crate::roadnet::{GridSpec, MapMatchedPoint, RoadNetwork};
    use crate::trajdata::{IncompleteTrajectory, MapMatchedTrajectory};

    fn hexagon() -> RoadNetwork {
        let coords: Vec<(f64, f64)> = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 3.0;
                (100.0 + 100.0 * a.cos(), 100.0 + 100.0 * a.sin())
            })
            .collect();
        let links: Vec<(usize, usize)> = (0..6).flat_map(|i| [(i, (i + 1) % 6), ((i + 1) % 6, i)]).collect();
        RoadNetwork::new(&coords, &links).unwrap()
    }

    #[test]
    fn analytic_matches_numeric_with_distillation() {
        let net = hexagon();
        let grid = GridSpec::covering(&net, 50.0).unwrap();
        let section = ModelSection { hidden_dim: 8, seg_embed_dim: 4, dropout: 0.5, blocks: 2, ..ModelSection::default() };
        let cfg = LteConfig::from_section(&section, &net, &grid, 5).unwrap();
        assert_eq!(cfg.num_segments, 12);
        let truth: Vec<MapMatchedPoint> = [(0, 0.2), (0, 0.6), (2, 0.1), (2, 0.5), (4, 0.3)]
            .iter()
            .enumerate()
            .map(|(k, &(e, r))| MapMatchedPoint::new(e, r, k as f64 * 15.0))
            .collect();
        let truth = MapMatchedTrajectory::new(truth.clone(), 15.0).unwrap();
        let icp = IncompleteTrajectory::new(vec![truth.points()[0], truth.points()[4]], 15.0).unwrap();
        for seed in 0..3 {
            let student = LteModel::new(cfg.clone(), seed).unwrap();
            let teacher = LteModel::new(cfg.clone(), seed + 100).unwrap();
            let sample = student.prepare(&icp, Some(&truth), &net, &grid).unwrap();
            let rep = check_gradients(&student, &sample, Some(&teacher), 1.0, 0.5, seed, 1e-4).unwrap();
            assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");
        }
    }
}
