//! Motion files, synthetic paired data, Gaussian noise injection and splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{bone_from_world, fk};
use crate::model::Predictor;
use crate::rig::{KinematicTree, RestBoneFrames};
use crate::so3::{exp_map, matrix_to_quat, quat_to_matrix, random_rotation_vector};
use crate::train::evaluate_inputs;

pub const QUAT_FORMAT: &str = "quat-wxyz";
pub const POSITIONS_FORMAT: &str = "positions-xyz";
/// Quaternions further than this from unit norm are rejected on load.
pub const QUAT_NORM_TOLERANCE: f64 = 1e-4;
/// Quaternions within this of unit squared norm are kept bit-for-bit.
const QUAT_RENORMALIZE_ABOVE: f64 = 1e-12;
/// Cached positions must match forward kinematics within this, in meters.
pub const POSITION_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub rig: String,
    pub n: usize,
    pub format: String,
    pub units: String,
}

/// One motion frame: local rotations, optional cached root-space positions
/// and an optional root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFrame {
    pub q: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<[f64; 3]>,
}

impl MotionFrame {
    pub fn locals(&self) -> Vec<Matrix3<f64>> {
        self.q.iter().map(|&q| quat_to_matrix(q)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub rig: String,
    pub n: usize,
    pub frames: Vec<MotionFrame>,
}

fn header_line(rig: &str, n: usize, format: &str) -> String {
    let h = FileHeader { rig: rig.to_string(), n, format: format.to_string(), units: "m".to_string() };
    serde_json::to_string(&h).expect("header serializes")
}

fn parse_header(line: Option<&str>, format: &str) -> Result<FileHeader> {
    let line = line.ok_or(Error::Empty("motion file"))?;
    let h: FileHeader = serde_json::from_str(line)?;
    if h.format != format {
        return Err(Error::Format(format!("expected format '{format}', got '{}'", h.format)));
    }
    if h.units != "m" {
        return Err(Error::Format(format!("expected units 'm', got '{}'", h.units)));
    }
    Ok(h)
}

fn normalize_quat(q: [f64; 4], frame: usize) -> Result<[f64; 4]> {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    if !n2.is_finite() || (n2.sqrt() - 1.0).abs() > QUAT_NORM_TOLERANCE {
        return Err(Error::Format(format!("frame {frame}: quaternion norm {} is not unit", n2.sqrt())));
    }
    if (n2 - 1.0).abs() <= QUAT_RENORMALIZE_ABOVE {
        return Ok(q);
    }
    let n = n2.sqrt();
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

impl MotionDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = header_line(&self.rig, self.n, QUAT_FORMAT);
        out.push('\n');
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("frame serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a motion file; quaternions are normalized, joint counts checked.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let h = parse_header(lines.next(), QUAT_FORMAT)?;
        let mut frames = Vec::new();
        for (k, line) in lines.enumerate() {
            let mut f: MotionFrame = serde_json::from_str(line)?;
            if f.q.len() != h.n || f.p.as_ref().is_some_and(|p| p.len() != h.n) {
                return Err(Error::Format(format!("frame {k}: expected {} joints", h.n)));
            }
            for q in f.q.iter_mut() {
                *q = normalize_quat(*q, k)?;
            }
            frames.push(f);
        }
        Ok(MotionDataset { rig: h.rig, n: h.n, frames })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Errors unless the dataset belongs to `tree` and cached positions agree with FK.
    pub fn check(&self, tree: &KinematicTree) -> Result<()> {
        if self.rig != tree.name() || self.n != tree.joint_count() {
            return Err(Error::RigMismatch(format!(
                "dataset is for rig '{}' with {} joints, got '{}' with {}",
                self.rig,
                self.n,
                tree.name(),
                tree.joint_count()
            )));
        }
        for (k, f) in self.frames.iter().enumerate() {
            if let Some(p) = &f.p {
                let pose = fk(tree, &f.locals());
                for (a, b) in p.iter().zip(&pose.positions) {
                    if (Vector3::from(*a) - b).amax() > POSITION_TOLERANCE {
                        return Err(Error::Format(format!("frame {k}: cached positions disagree with forward kinematics")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        MotionDataset { rig: self.rig.clone(), n: self.n, frames: idx.iter().map(|&i| self.frames[i].clone()).collect() }
    }
}

/// Root-space positions only, as consumed by inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSequence {
    pub rig: String,
    pub n: usize,
    pub frames: Vec<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PositionRecord {
    p: Vec<[f64; 3]>,
}

impl PositionSequence {
    pub fn to_jsonl(&self) -> String {
        let mut out = header_line(&self.rig, self.n, POSITIONS_FORMAT);
        out.push('\n');
        for f in &self.frames {
            out.push_str(&serde_json::to_string(&PositionRecord { p: f.clone() }).expect("frame serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let h = parse_header(lines.next(), POSITIONS_FORMAT)?;
        let mut frames = Vec::new();
        for (k, line) in lines.enumerate() {
            let r: PositionRecord = serde_json::from_str(line)?;
            if r.p.len() != h.n {
                return Err(Error::Format(format!("frame {k}: expected {} joints", h.n)));
            }
            frames.push(r.p);
        }
        Ok(PositionSequence { rig: h.rig, n: h.n, frames })
    }
}

/// Flattened paired supervision: root-space positions `[F·N·3]` and
/// bone-aligned rotations `[F·N·9]` (row-major), both in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Paired {
    pub n: usize,
    pub frames: usize,
    pub positions: Vec<f64>,
    pub bone: Vec<f64>,
}

impl Paired {
    pub fn from_dataset(ds: &MotionDataset, tree: &KinematicTree, rest: &RestBoneFrames) -> Result<Self> {
        ds.check(tree)?;
        let per_frame: Vec<(Vec<f64>, Vec<f64>)> = ds
            .frames
            .par_iter()
            .map(|f| {
                let pose = fk(tree, &f.locals());
                let pos = pose.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                let bone = bone_from_world(&pose.world, &rest.frames)
                    .iter()
                    .flat_map(|m| (0..9).map(move |k| m[(k / 3, k % 3)]))
                    .collect();
                (pos, bone)
            })
            .collect();
        let mut positions = Vec::with_capacity(ds.len() * ds.n * 3);
        let mut bone = Vec::with_capacity(ds.len() * ds.n * 9);
        for (p, b) in per_frame {
            positions.extend(p);
            bone.extend(b);
        }
        Ok(Paired { n: ds.n, frames: ds.len(), positions, bone })
    }

    pub fn frame_positions(&self, f: usize) -> Vec<Vector3<f64>> {
        self.positions[f * self.n * 3..(f + 1) * self.n * 3].chunks(3).map(Vector3::from_column_slice).collect()
    }

    pub fn frame_bone(&self, f: usize) -> Vec<Matrix3<f64>> {
        self.bone[f * self.n * 9..(f + 1) * self.n * 9].chunks(9).map(Matrix3::from_row_slice).collect()
    }

    /// Same supervision with different input positions.
    pub fn with_positions(&self, positions: Vec<f64>) -> Self {
        assert_eq!(positions.len(), self.positions.len(), "position buffer size");
        Paired { positions, ..self.clone() }
    }
}

/// Per-joint rotation-angle caps, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleCaps {
    pub default: f64,
    #[serde(default)]
    pub joints: BTreeMap<String, f64>,
}

impl AngleCaps {
    pub fn uniform(cap: f64) -> Self {
        AngleCaps { default: cap, joints: BTreeMap::new() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Caps in joint order; every cap must lie in `(0, π)`.
    pub fn resolve(&self, tree: &KinematicTree) -> Result<Vec<f64>> {
        for name in self.joints.keys() {
            if tree.index_of(name).is_none() {
                return Err(Error::UnknownJoint(name.clone()));
            }
        }
        let caps: Vec<f64> = tree.names().iter().map(|n| *self.joints.get(n).unwrap_or(&self.default)).collect();
        if let Some((i, c)) = caps.iter().enumerate().find(|(_, &c)| !(c > 0.0 && c < PI)) {
            return Err(Error::Invalid(format!("cap {c} for joint '{}' outside (0, π)", tree.names()[i])));
        }
        Ok(caps)
    }
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

/// Random poses with angle caps per joint. With smoothing `s`, rotation
/// vectors follow `v_f = s·v_{f−1} + (1 − s)·e_f`, which stays inside each cap.
pub fn generate_synthetic(
    tree: &KinematicTree,
    frame_count: usize,
    seed: u64,
    caps: &[f64],
    smoothing: f64,
) -> Result<MotionDataset> {
    let n = tree.joint_count();
    if caps.len() != n {
        return Err(Error::shape("generate_synthetic", format!("{} caps for {n} joints", caps.len())));
    }
    if caps.iter().any(|&c| !(c > 0.0 && c < PI)) {
        return Err(Error::Invalid("angle caps must lie in (0, π)".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let innovations: Vec<Vec<Vector3<f64>>> = (0..frame_count)
        .into_par_iter()
        .map(|f| {
            let mut rng = frame_rng(seed, f);
            caps.iter().map(|&c| random_rotation_vector(&mut rng, c)).collect()
        })
        .collect();
    let mut vecs = Vec::with_capacity(frame_count);
    for (f, e) in innovations.into_iter().enumerate() {
        let v = if f == 0 || smoothing == 0.0 {
            e
        } else {
            let prev: &Vec<Vector3<f64>> = &vecs[f - 1];
            prev.iter().zip(&e).map(|(p, e)| p * smoothing + e * (1.0 - smoothing)).collect()
        };
        vecs.push(v);
    }
    let frames = vecs
        .par_iter()
        .map(|v| {
            let locals: Vec<Matrix3<f64>> = v.iter().map(exp_map).collect();
            let pose = fk(tree, &locals);
            MotionFrame {
                q: locals.iter().map(matrix_to_quat).collect(),
                p: Some(pose.positions.iter().map(|p| [p.x, p.y, p.z]).collect()),
                t: None,
            }
        })
        .collect();
    Ok(MotionDataset { rig: tree.name().to_string(), n, frames })
}

/// Adds isotropic Gaussian noise of `sigma_mm` millimeters to flattened
/// positions `[F·N·3]`. The draw is fixed by `(seed, σ, frame)`. With
/// `recenter`, the root row is subtracted afterwards so inputs stay in root space.
pub fn inject_noise(positions: &[f64], n: usize, sigma_mm: f64, seed: u64, recenter: bool) -> Result<Vec<f64>> {
    if !(sigma_mm >= 0.0) || !sigma_mm.is_finite() {
        return Err(Error::Invalid(format!("noise level {sigma_mm} must be a finite non-negative number")));
    }
    if n == 0 || !positions.len().is_multiple_of(n * 3) {
        return Err(Error::shape("inject_noise", format!("{} values for {n} joints", positions.len())));
    }
    if sigma_mm == 0.0 {
        return Ok(positions.to_vec());
    }
    let dist = Normal::new(0.0, sigma_mm / 1000.0).expect("valid deviation");
    let key = seed ^ sigma_mm.to_bits().rotate_left(17);
    Ok(positions
        .par_chunks(n * 3)
        .enumerate()
        .flat_map_iter(|(f, frame)| {
            let mut rng = frame_rng(key, f);
            let mut out: Vec<f64> = frame.iter().map(|&v| v + dist.sample(&mut rng)).collect();
            if recenter {
                let root = [out[0], out[1], out[2]];
                for (k, v) in out.iter_mut().enumerate() {
                    *v -= root[k % 3];
                }
            }
            out
        })
        .collect())
}

/// Frame indices for train, validation and test. Sizes are rounded from the
/// fractions with the test set taking the remainder; blocks are contiguous
/// unless `shuffle`.
pub fn split_indices(frames: usize, fractions: [f64; 3], seed: u64, shuffle: bool) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let a = ((fractions[0] * frames as f64).round() as usize).min(frames);
    let b = ((fractions[1] * frames as f64).round() as usize).min(frames - a);
    let mut order: Vec<usize> = (0..frames).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok([order[..a].to_vec(), order[a..a + b].to_vec(), order[a + b..].to_vec()])
}

pub fn split(ds: &MotionDataset, fractions: [f64; 3], seed: u64, shuffle: bool) -> Result<[MotionDataset; 3]> {
    let [a, b, c] = split_indices(ds.len(), fractions, seed, shuffle)?;
    Ok([ds.subset(&a), ds.subset(&b), ds.subset(&c)])
}

pub const DEFAULT_SIGMAS_MM: [f64; 6] = [0.0, 2.5, 5.0, 10.0, 20.0, 40.0];

/// Aggregate metrics at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub sigma_mm: f64,
    pub mpjae_deg: f64,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub swing_deg: f64,
    pub twist_deg: f64,
}

/// Aggregate table plus per-joint swing and twist grids, `[joint][σ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    pub sigmas: Vec<f64>,
    pub joints: Vec<String>,
    pub rows: Vec<NoiseRow>,
    pub swing: Vec<Vec<f64>>,
    pub twist: Vec<Vec<f64>>,
}

/// Evaluates `predictor` on noisy copies of the inputs. Scores are taken
/// against the clean supervision, so σ = 0 reproduces clean evaluation exactly.
pub fn noise_sweep(
    predictor: &dyn Predictor,
    tree: &KinematicTree,
    rest: &RestBoneFrames,
    data: &Paired,
    sigmas: &[f64],
    seed: u64,
    recenter: bool,
) -> Result<NoiseSweep> {
    if sigmas.is_empty() {
        return Err(Error::Empty("noise levels"));
    }
    let n = tree.joint_count();
    let mut rows = Vec::with_capacity(sigmas.len());
    let mut swing = vec![Vec::with_capacity(sigmas.len()); n];
    let mut twist = vec![Vec::with_capacity(sigmas.len()); n];
    for &sigma in sigmas {
        let noisy = inject_noise(&data.positions, n, sigma, seed, recenter)?;
        let r = evaluate_inputs(predictor, tree, rest, &noisy, data)?;
        for (j, row) in r.per_joint.iter().enumerate() {
            swing[j].push(row.swing);
            twist[j].push(row.twist);
        }
        rows.push(NoiseRow {
            sigma_mm: sigma,
            mpjae_deg: r.mpjae_deg,
            mpjpe_mm: r.mpjpe_mm,
            p_mpjpe_mm: r.p_mpjpe_mm,
            swing_deg: r.swing_deg,
            twist_deg: r.twist_deg,
        });
    }
    Ok(NoiseSweep { sigmas: sigmas.to_vec(), joints: tree.names().to_vec(), rows, swing, twist })
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

impl NoiseSweep {
    /// Columns `sigma_mm,mpjae_deg,mpjpe_mm,p_mpjpe_mm,swing_deg,twist_deg`.
    pub fn aggregate_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        finish_csv(w)
    }

    /// One row per joint, one column per σ.
    pub fn grid_csv(grid: &[Vec<f64>], joints: &[String], sigmas: &[f64]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["joint".to_string()];
        header.extend(sigmas.iter().map(|s| format!("{s:?}")));
        w.write_record(&header)?;
        for (name, row) in joints.iter().zip(grid) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    pub fn swing_csv(&self) -> Result<String> {
        Self::grid_csv(&self.swing, &self.joints, &self.sigmas)
    }

    pub fn twist_csv(&self) -> Result<String> {
        Self::grid_csv(&self.twist, &self.joints, &self.sigmas)
    }
}
