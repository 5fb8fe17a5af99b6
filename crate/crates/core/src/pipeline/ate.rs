//! Absolute trajectory error after rigid least-squares alignment.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AteError {
    #[error("associated {associated} poses out of {estimated} estimated and {ground_truth} ground-truth")]
    LengthMismatch { associated: usize, estimated: usize, ground_truth: usize },
    #[error("empty trajectory")]
    Empty,
}

/// Largest timestamp difference accepted when pairing poses.
pub const MAX_TIME_DIFF: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// Aligned translation error per associated pose, meters.
    pub errors: Vec<f64>,
    /// Root mean square of `errors`, meters.
    pub rmse: f64,
    /// Maps estimated positions onto ground truth.
    pub alignment: Pose,
}

impl TrajectoryReport {
    pub fn rmse_cm(&self) -> f64 {
        self.rmse * 100.0
    }
}

/// Rotation and translation minimizing `sum |R p_i + t - q_i|^2`.
pub fn rigid_align(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Pose {
    assert_eq!(p.len(), q.len());
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - mp) * (b - mq).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Pose::new(r, mq - r * mp).unwrap_or_else(|_| Pose::from_translation(mq - mp)).normalized()
}

/// Pairs poses whose timestamps differ by at most [`MAX_TIME_DIFF`].
pub fn associate(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut used = vec![false; gt.len()];
    for (i, (t, _)) in est.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, (tg, _))| (j, (tg - t).abs()))
            .filter(|(_, dt)| *dt <= MAX_TIME_DIFF)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

pub fn evaluate_ate(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<TrajectoryReport, AteError> {
    if est.is_empty() || gt.is_empty() {
        return Err(AteError::Empty);
    }
    let pairs = associate(est, gt);
    if pairs.len() != est.len() || pairs.len() != gt.len() {
        return Err(AteError::LengthMismatch { associated: pairs.len(), estimated: est.len(), ground_truth: gt.len() });
    }
    let p: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| *est[i].1.translation()).collect();
    let q: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| *gt[j].1.translation()).collect();
    let alignment = rigid_align(&p, &q);
    let errors: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (alignment.transform_point(a) - b).norm()).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(TrajectoryReport { errors, rmse, alignment })
}
