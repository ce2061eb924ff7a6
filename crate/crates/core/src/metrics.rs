//! Evaluation metrics: local-space MPJAE, swing/twist axis errors, MPJPE and
//! Procrustes-aligned P-MPJPE, with per-joint tables and dataset aggregation.
//!
//! Positions are meters in, millimeters out. Angles are radians in, degrees out.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::{fk, locals_from_bone};
use crate::rig::{KinematicTree, RestBoneFrames};
use crate::so3::{axis_errors, geodesic};

const DEG: f64 = 180.0 / std::f64::consts::PI;

/// Mean geodesic distance between two local-rotation sequences, in degrees.
pub fn mpjae_locals(pred: &[Matrix3<f64>], gt: &[Matrix3<f64>]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "rotation sequences differ in length");
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| geodesic(p, g)).sum();
    sum / pred.len() as f64 * DEG
}

/// MPJAE of one frame given bone-aligned rotations; both sides are first
/// recovered to local rotations.
pub fn mpjae(
    pred_bone: &[Matrix3<f64>],
    gt_bone: &[Matrix3<f64>],
    tree: &KinematicTree,
    frames: &RestBoneFrames,
) -> f64 {
    let pl = locals_from_bone(pred_bone, &frames.frames, tree);
    let gl = locals_from_bone(gt_bone, &frames.frames, tree);
    mpjae_locals(&pl, &gl)
}

fn check_points(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mpjpe", format!("{} vs {} joints", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("joint positions"));
    }
    Ok(())
}

/// Mean Euclidean joint distance in millimeters.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_points(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Root-mean-square joint distance in millimeters.
pub fn rms_error_mm(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_points(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_squared()).sum();
    Ok(1000.0 * (sum / pred.len() as f64).sqrt())
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn apply_all(&self, xs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

fn centroid(xs: &[Vector3<f64>]) -> Vector3<f64> {
    xs.iter().fold(Vector3::zeros(), |a, x| a + x) / xs.len() as f64
}

/// Least-squares similarity transform taking `pred` onto `gt` (Umeyama),
/// with the determinant correction so the rotation is proper.
pub fn umeyama_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    check_points(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::DegenerateConfig("alignment needs at least 3 joints".into()));
    }
    let mp = centroid(pred);
    let mg = centroid(gt);
    let n = pred.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = p - mp;
        let dg = g - mg;
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
        var_g += dg.norm_squared();
    }
    cov /= n;
    var_p /= n;
    var_g /= n;
    let scale_ref = 1e-24 * (1.0 + mp.norm_squared() + mg.norm_squared());
    if var_g <= scale_ref {
        return Err(Error::DegenerateConfig("ground-truth joints are coincident".into()));
    }
    if var_p <= scale_ref {
        return Err(Error::DegenerateConfig("predicted joints are coincident".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = svd.singular_values.dot(&d) / var_p;
    if scale <= 0.0 {
        return Err(Error::DegenerateConfig("alignment produced a non-positive scale".into()));
    }
    let translation = mg - scale * rotation * mp;
    Ok(SimilarityTransform { scale, rotation, translation })
}

/// MPJPE after per-frame similarity alignment of the prediction.
pub fn p_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let t = umeyama_align(pred, gt)?;
    mpjpe(&t.apply_all(pred), gt)
}

/// Per-joint (swing, twist) errors of bone-aligned rotations in degrees.
pub fn swing_twist(pred_bone: &[Matrix3<f64>], gt_bone: &[Matrix3<f64>]) -> Vec<(f64, f64)> {
    assert_eq!(pred_bone.len(), gt_bone.len(), "rotation sequences differ in length");
    pred_bone
        .iter()
        .zip(gt_bone)
        .map(|(p, g)| {
            let (s, t) = axis_errors(p, g);
            (s * DEG, t * DEG)
        })
        .collect()
}

/// Means of per-joint (swing, twist) pairs.
pub fn swing_twist_means(rows: &[(f64, f64)]) -> (f64, f64) {
    let n = rows.len() as f64;
    let (s, t) = rows.iter().fold((0.0, 0.0), |(a, b), (s, t)| (a + s, b + t));
    (s / n, t / n)
}

/// Per-joint errors of a single frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointError {
    pub mpjae_deg: f64,
    pub swing_deg: f64,
    pub twist_deg: f64,
}

/// All metrics for one frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub mpjae_deg: f64,
    pub swing_deg: f64,
    pub twist_deg: f64,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub per_joint: Vec<JointError>,
}

/// Scores one frame of predicted bone-aligned rotations. Predicted positions
/// come from forward kinematics of the recovered locals; they are compared
/// with `gt_positions` (root space, meters).
pub fn evaluate_frame(
    tree: &KinematicTree,
    frames: &RestBoneFrames,
    pred_bone: &[Matrix3<f64>],
    gt_bone: &[Matrix3<f64>],
    gt_positions: &[Vector3<f64>],
) -> Result<FrameMetrics> {
    let n = tree.joint_count();
    if pred_bone.len() != n || gt_bone.len() != n || gt_positions.len() != n {
        return Err(Error::shape("evaluate_frame", format!("expected {n} joints per input")));
    }
    let pl = locals_from_bone(pred_bone, &frames.frames, tree);
    let gl = locals_from_bone(gt_bone, &frames.frames, tree);
    let st = swing_twist(pred_bone, gt_bone);
    let per_joint: Vec<JointError> = pl
        .iter()
        .zip(&gl)
        .zip(&st)
        .map(|((p, g), &(swing_deg, twist_deg))| JointError { mpjae_deg: geodesic(p, g) * DEG, swing_deg, twist_deg })
        .collect();
    let pose = fk(tree, &pl);
    let nf = n as f64;
    Ok(FrameMetrics {
        mpjae_deg: per_joint.iter().map(|j| j.mpjae_deg).sum::<f64>() / nf,
        swing_deg: per_joint.iter().map(|j| j.swing_deg).sum::<f64>() / nf,
        twist_deg: per_joint.iter().map(|j| j.twist_deg).sum::<f64>() / nf,
        mpjpe_mm: mpjpe(&pose.positions, gt_positions)?,
        p_mpjpe_mm: p_mpjpe(&pose.positions, gt_positions)?,
        per_joint,
    })
}

/// One row of the per-joint table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointRow {
    pub joint: String,
    pub mpjae: f64,
    pub swing: f64,
    pub twist: f64,
}

/// Dataset-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mpjae_deg: f64,
    pub swing_deg: f64,
    pub twist_deg: f64,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub per_joint: Vec<JointRow>,
    pub frame_count: usize,
}

/// Arithmetic means over frames, summed sequentially in frame order.
pub fn aggregate(frames: &[FrameMetrics], joint_names: &[String]) -> Result<EvalReport> {
    let first = frames.first().ok_or(Error::Empty("frame metrics"))?;
    let nj = first.per_joint.len();
    if joint_names.len() != nj || frames.iter().any(|f| f.per_joint.len() != nj) {
        return Err(Error::shape("aggregate", "per-joint tables disagree in length".to_string()));
    }
    let nf = frames.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / nf;
    let per_joint = (0..nj)
        .map(|j| JointRow {
            joint: joint_names[j].clone(),
            mpjae: mean(&|f| f.per_joint[j].mpjae_deg),
            swing: mean(&|f| f.per_joint[j].swing_deg),
            twist: mean(&|f| f.per_joint[j].twist_deg),
        })
        .collect();
    Ok(EvalReport {
        mpjae_deg: mean(&|f| f.mpjae_deg),
        swing_deg: mean(&|f| f.swing_deg),
        twist_deg: mean(&|f| f.twist_deg),
        mpjpe_mm: mean(&|f| f.mpjpe_mm),
        p_mpjpe_mm: mean(&|f| f.p_mpjpe_mm),
        per_joint,
        frame_count: frames.len(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-joint table with columns `joint,mpjae,swing,twist`.
    pub fn per_joint_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_joint {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
