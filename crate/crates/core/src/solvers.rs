//! Per-frame iterative IK baselines over local rotations and the
//! iteration-budget sweep that compares them with a single network pass.
//!
//! Both solvers act on rotations only, so bone lengths are preserved exactly.
//! Neither fits body shape.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataio::Paired;
use crate::error::{Error, Result};
use crate::kinematics::{fk, locals_from_bone};
use crate::metrics::mpjpe;
use crate::model::{compose_world, positions_from_world, Predictor, RigConsts};
use crate::rig::{KinematicTree, RestBoneFrames};
use crate::so3::{axis_angle_to_matrix, exp_map, geodesic, matrix_to_6d, rot_from_6d};

pub const DEFAULT_CHECKPOINTS: [usize; 6] = [1, 10, 50, 100, 200, 300];
/// Largest rotation CCD applies to one joint in one sweep, radians.
pub const CCD_MAX_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub max_iters: usize,
    /// Stop once the RMS joint residual falls below this, in rig units.
    pub tolerance: f64,
    /// Initial step size of the gradient solver.
    pub step: f64,
    /// L-BFGS history length; 0 gives plain steepest descent.
    pub memory: usize,
    pub checkpoints: Vec<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { max_iters: 300, tolerance: 1e-6, step: 10.0, memory: 10, checkpoints: DEFAULT_CHECKPOINTS.to_vec() }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tolerance > 0.0) || !(self.step > 0.0) {
            return Err(Error::Invalid("max_iters, tolerance and step must be positive".into()));
        }
        if self.checkpoints.is_empty() || self.checkpoints.contains(&0) || self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("checkpoints must be positive and strictly increasing".into()));
        }
        Ok(())
    }

    /// Iterations actually needed: up to the last checkpoint.
    fn budget(&self) -> usize {
        self.max_iters.min(*self.checkpoints.last().expect("validated"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Grad,
    Ccd,
}

impl SolverKind {
    pub fn label(self) -> &'static str {
        match self {
            SolverKind::Grad => "grad",
            SolverKind::Ccd => "ccd",
        }
    }
}

/// Solver state recorded after `iteration` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointState {
    pub iteration: usize,
    pub locals: Vec<Matrix3<f64>>,
    /// RMS joint position error, rig units.
    pub residual: f64,
}

/// Mean squared joint error of FK(locals) against `targets`.
fn objective(tree: &KinematicTree, locals: &[Matrix3<f64>], targets: &[Vector3<f64>]) -> f64 {
    let pose = fk(tree, locals);
    pose.positions.iter().zip(targets).map(|(p, t)| (p - t).norm_squared()).sum::<f64>() / targets.len() as f64
}

/// Gradient of the objective with respect to left increments `L_i ← exp(δ_i)·L_i` at `δ = 0`.
fn increment_gradient(c: &RigConsts, locals: &[Matrix3<f64>], targets: &[Vector3<f64>]) -> Result<DVector<f64>> {
    let n = c.n;
    let mut tape = Tape::<f64>::new();
    let delta = tape.leaf(Tensor::zeros(&[n, 3]));
    // skew(δ) rows read from [δ_x, δ_y, δ_z, 0] with signs.
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let ext = tape.concat(&[delta, zero], 1)?;
    let picked = tape.select_cols(ext, Arc::new(vec![3, 2, 1, 2, 3, 0, 1, 0, 3]))?;
    let signs = tape.constant(Tensor::new(vec![1, 9], vec![1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0])?);
    let skew = tape.mul(picked, signs)?;
    // exp(δ) = I + skew(δ) to first order, which fixes the gradient at δ = 0.
    let eye = tape.constant(Tensor::new(vec![1, 9], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?);
    let inc = tape.add(skew, eye)?;
    let l = tape.constant(Tensor::new(vec![n, 9], locals.iter().flat_map(|m| (0..9).map(move |k| m[(k / 3, k % 3)])).collect())?);
    let local = tape.mat3_mul(inc, l, false, false)?;
    let world = compose_world(&mut tape, c, local, 1)?;
    let pos = positions_from_world(&mut tape, c, world, 1)?;
    let t = tape.constant(Tensor::new(vec![n, 3], targets.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?);
    let d = tape.sub(pos, t)?;
    let sq = tape.mul(d, d)?;
    let per = tape.sum_cols(sq);
    let loss = tape.mean(per);
    tape.backward(loss)?;
    Ok(DVector::from_column_slice(tape.grad(delta).expect("leaf gradient").data()))
}

/// Projects a product of rotations back onto SO(3) so rounding does not accumulate.
fn reorthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    rot_from_6d(&matrix_to_6d(m)).expect("columns of a rotation are independent")
}

fn apply_increment(locals: &[Matrix3<f64>], step: &DVector<f64>) -> Vec<Matrix3<f64>> {
    locals
        .iter()
        .enumerate()
        .map(|(i, l)| reorthonormalize(&(exp_map(&Vector3::new(step[3 * i], step[3 * i + 1], step[3 * i + 2])) * l)))
        .collect()
}

fn check_inputs(tree: &KinematicTree, targets: &[Vector3<f64>], init: &[Matrix3<f64>], cfg: &SolveConfig) -> Result<()> {
    cfg.validate()?;
    let n = tree.joint_count();
    if targets.len() != n || init.len() != n {
        return Err(Error::shape("solve", format!("{} targets and {} locals for {n} joints", targets.len(), init.len())));
    }
    Ok(())
}

/// Collects the solver state at each requested iteration.
struct Recorder<'a> {
    checkpoints: &'a [usize],
    next: usize,
    out: Vec<CheckpointState>,
}

impl<'a> Recorder<'a> {
    fn new(checkpoints: &'a [usize]) -> Self {
        Recorder { checkpoints, next: 0, out: Vec::with_capacity(checkpoints.len()) }
    }

    fn after(&mut self, iteration: usize, locals: &[Matrix3<f64>], residual: f64) {
        while self.next < self.checkpoints.len() && self.checkpoints[self.next] == iteration {
            self.out.push(CheckpointState { iteration, locals: locals.to_vec(), residual });
            self.next += 1;
        }
    }

    /// Checkpoints beyond the iteration budget report the final state.
    fn finish(mut self, locals: &[Matrix3<f64>], residual: f64) -> Vec<CheckpointState> {
        for &k in &self.checkpoints[self.next..] {
            self.out.push(CheckpointState { iteration: k, locals: locals.to_vec(), residual });
        }
        self.out
    }
}

/// Descent on the mean squared joint error over per-joint axis-angle
/// increments, optionally with an L-BFGS direction. A trial step is accepted
/// only if it strictly lowers the objective; otherwise it is halved, so the
/// residual never increases.
pub fn gradient_ik(tree: &KinematicTree, targets: &[Vector3<f64>], cfg: &SolveConfig, init: &[Matrix3<f64>]) -> Result<Vec<CheckpointState>> {
    check_inputs(tree, targets, init, cfg)?;
    let c = RigConsts::new(tree)?;
    let tol2 = cfg.tolerance * cfg.tolerance;
    let mut locals = init.to_vec();
    let mut f = objective(tree, &locals, targets);
    let mut g = increment_gradient(&c, &locals, targets)?;
    let mut eta = cfg.step;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut rec = Recorder::new(&cfg.checkpoints);
    let mut active = true;
    for k in 1..=cfg.budget() {
        if active && f > tol2 {
            let quasi_newton = cfg.memory > 0 && !history.is_empty();
            let mut dir = if quasi_newton { lbfgs_direction(&g, &history) } else { -&g };
            let mut t = if quasi_newton { 1.0 } else { eta };
            if g.dot(&dir) >= 0.0 {
                history.clear();
                dir = -&g;
                t = eta;
            }
            active = false;
            for _ in 0..60 {
                let step = &dir * t;
                let trial = apply_increment(&locals, &step);
                let ft = objective(tree, &trial, targets);
                if ft < f {
                    let g_new = increment_gradient(&c, &trial, targets)?;
                    if cfg.memory > 0 {
                        let y = &g_new - &g;
                        if step.dot(&y) > 1e-12 {
                            history.push_back((step, y));
                            if history.len() > cfg.memory {
                                history.pop_front();
                            }
                        }
                    }
                    eta = if quasi_newton { eta } else { 2.0 * t };
                    locals = trial;
                    f = ft;
                    g = g_new;
                    active = true;
                    break;
                }
                t *= 0.5;
            }
        }
        rec.after(k, &locals, f.sqrt());
    }
    Ok(rec.finish(&locals, f.sqrt()))
}

/// Best rotation about the origin taking `from` onto `to` in the least-squares sense.
fn procrustes(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += b * a.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Cyclic coordinate descent. One iteration sweeps joints leaf to root; each
/// joint rotates its descendants toward their targets about itself, by at
/// most [`CCD_MAX_STEP`] radians.
pub fn ccd_ik(tree: &KinematicTree, targets: &[Vector3<f64>], cfg: &SolveConfig, init: &[Matrix3<f64>]) -> Result<Vec<CheckpointState>> {
    check_inputs(tree, targets, init, cfg)?;
    let n = tree.joint_count();
    let tol2 = cfg.tolerance * cfg.tolerance;
    let descendants: Vec<Vec<usize>> = (0..n).map(|i| tree.descendants(i)).collect();
    let mut locals = init.to_vec();
    let mut f = objective(tree, &locals, targets);
    let mut rec = Recorder::new(&cfg.checkpoints);
    for k in 1..=cfg.budget() {
        if f > tol2 {
            for i in (0..n).rev() {
                if descendants[i].is_empty() {
                    continue;
                }
                let pose = fk(tree, &locals);
                let pivot = pose.positions[i];
                let from: Vec<Vector3<f64>> = descendants[i].iter().map(|&d| pose.positions[d] - pivot).collect();
                let to: Vec<Vector3<f64>> = descendants[i].iter().map(|&d| targets[d] - pivot).collect();
                let r = procrustes(&from, &to);
                let (axis, angle) = crate::so3::matrix_to_axis_angle(&r);
                let r = if angle > CCD_MAX_STEP { axis_angle_to_matrix(&axis, CCD_MAX_STEP) } else { r };
                // World-frame rotation r applied at joint i: L_i ← W_pᵀ r W_p L_i.
                let wp = tree.parent(i).map_or(Matrix3::identity(), |p| pose.world[p]);
                locals[i] = reorthonormalize(&(wp.transpose() * r * wp * locals[i]));
            }
            f = objective(tree, &locals, targets);
        }
        rec.after(k, &locals, f.sqrt());
    }
    Ok(rec.finish(&locals, f.sqrt()))
}

pub fn solve(kind: SolverKind, tree: &KinematicTree, targets: &[Vector3<f64>], cfg: &SolveConfig, init: &[Matrix3<f64>]) -> Result<Vec<CheckpointState>> {
    match kind {
        SolverKind::Grad => gradient_ik(tree, targets, cfg, init),
        SolverKind::Ccd => ccd_ik(tree, targets, cfg, init),
    }
}

/// One row of the budget sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub solver: String,
    pub iteration: usize,
    pub mpjae_deg: f64,
    pub mpjpe_mm: f64,
    /// Mean RMS residual in rig units; not written to the CSV.
    #[serde(skip)]
    pub residual: f64,
}

/// Label of the network row; its iteration is one forward pass.
pub const AMORTIZED_LABEL: &str = "amortized";

/// Runs `kind` from the rest pose on every frame of `data`, averaging metrics
/// at each checkpoint in frame order. With `amortized`, appends one row for
/// the network's single pass.
pub fn budget_sweep(
    kind: SolverKind,
    tree: &KinematicTree,
    rest: &RestBoneFrames,
    data: &Paired,
    cfg: &SolveConfig,
    amortized: Option<&dyn Predictor>,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if data.frames == 0 {
        return Err(Error::Empty("sweep dataset"));
    }
    let n = tree.joint_count();
    let init = vec![Matrix3::identity(); n];
    let per_frame: Vec<Vec<(f64, f64, f64)>> = (0..data.frames)
        .into_par_iter()
        .map(|f| {
            let targets = data.frame_positions(f);
            let gt_locals = locals_from_bone(&data.frame_bone(f), &rest.frames, tree);
            solve(kind, tree, &targets, cfg, &init)?
                .into_iter()
                .map(|s| {
                    let mpjae = s.locals.iter().zip(&gt_locals).map(|(a, b)| geodesic(a, b)).sum::<f64>() / n as f64;
                    let pos = fk(tree, &s.locals).positions;
                    Ok((mpjae.to_degrees(), mpjpe(&pos, &targets)?, s.residual))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let frames = data.frames as f64;
    let mut rows: Vec<SweepRow> = cfg
        .checkpoints
        .iter()
        .enumerate()
        .map(|(j, &iteration)| {
            let sum = |pick: fn(&(f64, f64, f64)) -> f64| per_frame.iter().map(|r| pick(&r[j])).sum::<f64>() / frames;
            SweepRow { solver: kind.label().to_string(), iteration, mpjae_deg: sum(|r| r.0), mpjpe_mm: sum(|r| r.1), residual: sum(|r| r.2) }
        })
        .collect();
    if let Some(p) = amortized {
        let r = crate::train::evaluate(p, tree, rest, data)?;
        rows.push(SweepRow { solver: AMORTIZED_LABEL.to_string(), iteration: 1, mpjae_deg: r.mpjae_deg, mpjpe_mm: r.mpjpe_mm, residual: f64::NAN });
    }
    Ok(rows)
}

/// Sweep table as CSV with columns `solver,iteration,mpjae_deg,mpjpe_mm`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// L-BFGS two-loop recursion for `−H·g`.
fn lbfgs_direction(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push((a, rho));
    }
    if let Some((s, y)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y), (a, rho)) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}
