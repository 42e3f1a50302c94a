//! Trajectory accuracy and rejection-rate metrics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::graph::GlobalKey;
use crate::se3::Pose3;

/// Average translation error in meters: the root-mean-square translational
/// residual after the rigid (rotation plus translation, no scale) alignment
/// of `estimates` onto `ground_truth` that minimizes it.
///
/// Both maps must cover exactly the same keys. All robots' keyframes are
/// aligned jointly with a single transform, since the optimizer reports one
/// common frame; the metric is therefore gauge-independent.
pub fn ate(
    estimates: &BTreeMap<GlobalKey, Pose3>,
    ground_truth: &BTreeMap<GlobalKey, Pose3>,
) -> Result<f64> {
    if estimates.len() != ground_truth.len()
        || estimates.keys().zip(ground_truth.keys()).any(|(a, b)| a != b)
    {
        let missing = ground_truth.keys().find(|k| !estimates.contains_key(k));
        let extra = estimates.keys().find(|k| !ground_truth.contains_key(k));
        return Err(Error::KeyMismatch {
            message: format!(
                "estimate and ground truth cover different keys (missing {:?}, extra {:?})",
                missing, extra
            ),
        });
    }
    if estimates.is_empty() {
        return Err(Error::InvalidConfig {
            message: "translation error needs at least one keyframe".into(),
        });
    }

    let n = estimates.len() as f64;
    let mut mu_e = Vector3::zeros();
    let mut mu_g = Vector3::zeros();
    for (e, g) in estimates.values().zip(ground_truth.values()) {
        mu_e += e.translation;
        mu_g += g.translation;
    }
    mu_e /= n;
    mu_g /= n;

    // Kabsch: maximize tr(R H) with H = sum (e - mu_e)(g - mu_g)^T over
    // proper rotations; R = V diag(1, 1, det(V U^T)) U^T for H = U S V^T.
    let mut h = Matrix3::zeros();
    for (e, g) in estimates.values().zip(ground_truth.values()) {
        h += (e.translation - mu_e) * (g.translation - mu_g).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v = svd.v_t.expect("svd with v_t").transpose();
    let det = (v * u.transpose()).determinant();
    let rotation =
        v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * u.transpose();
    let shift = mu_g - rotation * mu_e;

    let mut sum_sq = 0.0;
    for (e, g) in estimates.values().zip(ground_truth.values()) {
        sum_sq += (g.translation - (rotation * e.translation + shift)).norm_squared();
    }
    Ok((sum_sq / n).sqrt())
}

/// Rejection percentages split by generator-truth label.
///
/// Percentages are `None` when the corresponding population is empty, never
/// a 0/0 artifact. With rejection disabled (every candidate accepted) both
/// populated percentages are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionStats {
    pub pct_outliers_rejected: Option<f64>,
    pub pct_inliers_rejected: Option<f64>,
    pub outliers_total: u64,
    pub outliers_rejected: u64,
    pub inliers_total: u64,
    pub inliers_rejected: u64,
}

/// `outlier_labels[i]` is the generator truth for candidate `i`;
/// `accepted` holds the indices the rejection stage kept.
pub fn rejection_stats(outlier_labels: &[bool], accepted: &[usize]) -> RejectionStats {
    let accepted: BTreeSet<usize> = accepted.iter().copied().collect();
    let mut stats = RejectionStats {
        pct_outliers_rejected: None,
        pct_inliers_rejected: None,
        outliers_total: 0,
        outliers_rejected: 0,
        inliers_total: 0,
        inliers_rejected: 0,
    };
    for (index, is_outlier) in outlier_labels.iter().enumerate() {
        let rejected = !accepted.contains(&index);
        if *is_outlier {
            stats.outliers_total += 1;
            stats.outliers_rejected += rejected as u64;
        } else {
            stats.inliers_total += 1;
            stats.inliers_rejected += rejected as u64;
        }
    }
    if stats.outliers_total > 0 {
        stats.pct_outliers_rejected =
            Some(100.0 * stats.outliers_rejected as f64 / stats.outliers_total as f64);
    }
    if stats.inliers_total > 0 {
        stats.pct_inliers_rejected =
            Some(100.0 * stats.inliers_rejected as f64 / stats.inliers_total as f64);
    }
    stats
}

/// One simulation run, flattened to a CSV row with the swept knobs echoed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_index: u64,
    pub seed: u64,
    pub ate_m: f64,
    pub stats: RejectionStats,
    pub candidates_total: u64,
    pub accepted_total: u64,
    pub bytes_frontend: u64,
    pub bytes_pgo: u64,
    pub converged: bool,
    pub pcm_enabled: bool,
    pub pcm_threshold: f64,
    pub descriptor_match_threshold: f64,
    pub min_correspondences: u32,
    pub outlier_fraction: f64,
}

pub const RUN_REPORT_HEADER: &str = "run,seed,ate_m,pct_outliers_rejected,pct_inliers_rejected,\
outliers_total,outliers_rejected,inliers_total,inliers_rejected,candidates_total,accepted_total,\
bytes_frontend,bytes_pgo,bytes_total,converged,pcm_enabled,pcm_threshold,\
descriptor_match_threshold,min_correspondences,outlier_fraction";

fn pct_field(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_frontend + self.bytes_pgo
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_index,
            self.seed,
            self.ate_m,
            pct_field(self.stats.pct_outliers_rejected),
            pct_field(self.stats.pct_inliers_rejected),
            self.stats.outliers_total,
            self.stats.outliers_rejected,
            self.stats.inliers_total,
            self.stats.inliers_rejected,
            self.candidates_total,
            self.accepted_total,
            self.bytes_frontend,
            self.bytes_pgo,
            self.bytes_total(),
            self.converged,
            self.pcm_enabled,
            self.pcm_threshold,
            self.descriptor_match_threshold,
            self.min_correspondences,
            self.outlier_fraction,
        )
    }
}
