//! Trajectory accuracy metrics against ground truth.

use mlio_core::Posed;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Maximum timestamp gap for associating an estimate with ground truth (s).
pub const ASSOCIATION_WINDOW: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Gap between the estimated and true start→end displacement after
    /// aligning the first pose. Equals the closure distance on closed paths.
    pub end_to_end_error_m: f64,
    pub ate_rmse_m: f64,
    pub associated: usize,
}

/// Index of the ground-truth pose nearest in time to `t`, if within the
/// association window.
fn nearest(gt: &[(f64, Posed)], t: f64) -> Option<usize> {
    let k = gt.partition_point(|(tg, _)| *tg < t);
    [k.checked_sub(1), (k < gt.len()).then_some(k)]
        .into_iter()
        .flatten()
        .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()))
        .filter(|&i| (gt[i].0 - t).abs() <= ASSOCIATION_WINDOW + 1e-12)
}

/// Associates estimates with ground truth by nearest timestamp, aligns the
/// first associated estimate onto its ground-truth pose and reports the
/// end-to-end error and ATE RMSE.
pub fn evaluate(traj: &[(f64, Posed)], gt: &[(f64, Posed)]) -> Result<Metrics, PipelineError> {
    if traj.is_empty() || gt.is_empty() {
        return Err(PipelineError::Eval("empty trajectory".into()));
    }
    let pairs: Vec<(Posed, Posed)> =
        traj.iter().filter_map(|(t, est)| nearest(gt, *t).map(|i| (*est, gt[i].1))).collect();
    let (first_est, first_gt) = *pairs.first().ok_or_else(|| PipelineError::Eval("no associable pairs".into()))?;
    let align = first_gt.compose(&first_est.inverse());
    let sq: f64 = pairs.iter().map(|(e, g)| (align.apply(&e.translation) - g.translation).norm_squared()).sum();
    let (last_est, last_gt) = *pairs.last().unwrap();
    let est_disp = align.apply(&last_est.translation) - align.apply(&first_est.translation);
    let gt_disp = last_gt.translation - first_gt.translation;
    Ok(Metrics {
        end_to_end_error_m: (est_disp - gt_disp).norm(),
        ate_rmse_m: (sq / pairs.len() as f64).sqrt(),
        associated: pairs.len(),
    })
}
