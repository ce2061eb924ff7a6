//! Throughput of the pure inference path: forward pass plus analytic
//! recovery of local rotations.

use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use serde::Serialize;

use crate::dataio::{generate_synthetic, Paired};
use crate::error::{Error, Result};
use crate::kinematics::locals_from_bone;
use crate::model::{Model, Predictor};
use crate::rig::{KinematicTree, RestBoneFrames};

pub const DEFAULT_BATCHES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
const INPUT_CAP_RAD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub fps: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
    pub precision: &'static str,
}

impl BenchReport {
    /// Columns `batch_size,fps`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn infer_and_recover(
    model: &Model<f32>,
    tree: &KinematicTree,
    rest: &[Matrix3<f32>],
    inputs: &[f32],
    batch: usize,
    locals: &mut Vec<Matrix3<f32>>,
) -> Result<()> {
    let n = tree.joint_count();
    let bone = model.predict(inputs, batch)?;
    let mut frame = Vec::with_capacity(n);
    locals.clear();
    for chunk in bone.chunks(n * 9) {
        frame.clear();
        frame.extend(chunk.chunks(9).map(Matrix3::from_row_slice));
        locals.extend(locals_from_bone(&frame, rest, tree));
    }
    Ok(())
}

/// Times forward + recovery for each batch size on fixed synthetic inputs.
/// One warmup pass precedes each timed loop, which runs for at least `min_duration`.
pub fn bench_inference(
    model: &Model<f32>,
    tree: &KinematicTree,
    frames: &RestBoneFrames,
    batch_sizes: &[usize],
    min_duration: Duration,
    seed: u64,
) -> Result<BenchReport> {
    model.check_rig(tree)?;
    let largest = *batch_sizes.iter().max().ok_or(Error::Empty("batch sizes"))?;
    if batch_sizes.contains(&0) {
        return Err(Error::Invalid("batch sizes must be positive".into()));
    }
    let n = tree.joint_count();
    let ds = generate_synthetic(tree, largest, seed, &vec![INPUT_CAP_RAD; n], 0.0)?;
    let inputs: Vec<f32> = Paired::from_dataset(&ds, tree, frames)?.positions.iter().map(|&v| v as f32).collect();
    let rest = frames.frames_as::<f32>();
    let mut locals = Vec::with_capacity(largest * n);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let x = &inputs[..b * n * 3];
        infer_and_recover(model, tree, &rest, x, b, &mut locals)?;
        let mut iterations = 0usize;
        let start = Instant::now();
        loop {
            infer_and_recover(model, tree, &rest, x, b, &mut locals)?;
            iterations += 1;
            if start.elapsed() >= min_duration {
                break;
            }
        }
        let wall = start.elapsed().as_secs_f64();
        rows.push(BenchRow { batch_size: b, fps: (b * iterations) as f64 / wall, wall_time_s: wall, iterations });
    }
    Ok(BenchReport { rows, threads: rayon::current_num_threads(), precision: "f32" })
}
