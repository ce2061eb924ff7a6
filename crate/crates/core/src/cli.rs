//! Command-line front end. Exit codes: 0 success, 1 I/O failure, 2 any
//! validation or assertion failure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};

use crate::bench::{bench_inference, DEFAULT_BATCHES};
use crate::dataio::{
    generate_synthetic, noise_sweep, AngleCaps, MotionDataset, MotionFrame, Paired, PositionSequence, DEFAULT_SIGMAS_MM,
};
use crate::error::{Error, Result};
use crate::kinematics::{locals_from_bone, roundtrip_report};
use crate::model::{mean_attention_flow, transfer_embeddings, Checkpoint, Model, Predictor, RestPosePredictor};
use crate::rig::{compute_rest_bone_frames, load_rig, KinematicTree, RestBoneFrames, SMPL22_JSON};
use crate::so3::matrix_to_quat;
use crate::solvers::{budget_sweep, sweep_csv, SolveConfig, SolverKind, DEFAULT_CHECKPOINTS};
use crate::train::{evaluate, history_csv, history_path, train_with_progress, TrainConfig, EVAL_CHUNK};

/// Built-in rig accepted wherever a rig file is expected.
pub const BUILTIN_RIG: &str = "smpl22";
/// Largest single-precision round-trip error `roundtrip` accepts.
pub const ROUNDTRIP_MAX: f64 = 5e-5;

#[derive(Parser, Debug)]
#[command(name = "boneik", version, about = "Amortized inverse kinematics on skeletal rigs")]
pub struct Cli {
    /// Worker threads for frame-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rig file utilities.
    Rig {
        #[command(subcommand)]
        action: RigAction,
    },
    /// Generate a synthetic motion dataset.
    Gen(GenArgs),
    /// Train a regressor and write a checkpoint plus its history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the rest-pose predictor) on a dataset.
    Eval(EvalArgs),
    /// Single- and double-precision representation round trip on random poses.
    Roundtrip(RoundtripArgs),
    /// Iteration-budget sweep of an iterative solver.
    Solve(SolveArgs),
    /// Evaluate a checkpoint under Gaussian input noise.
    NoiseSweep(NoiseArgs),
    /// Inference throughput across batch sizes.
    Bench(BenchArgs),
    /// Mean effective attention flow matrix.
    AttnFlow(FlowArgs),
    /// Move a checkpoint to another rig through a joint name map.
    Transfer(TransferArgs),
    /// Positions in, local rotations out.
    Convert(ConvertArgs),
}

#[derive(Subcommand, Debug)]
pub enum RigAction {
    /// Validate a rig file and print its bone frames.
    Check {
        /// Rig JSON file, or `smpl22` for the built-in rig.
        rig: String,
    },
}

#[derive(Args, Debug)]
pub struct RigArg {
    /// Rig JSON file, or `smpl22` for the built-in rig.
    #[arg(long)]
    pub rig: String,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub rig: RigArg,
    /// Number of frames.
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON caps file `{"default": rad, "joints": {name: rad}}`.
    #[arg(long)]
    pub caps: Option<PathBuf>,
    /// Uniform cap in radians, used when no caps file is given.
    #[arg(long, default_value_t = 2.0)]
    pub cap: f64,
    /// Temporal smoothing coefficient in [0, 1).
    #[arg(long, default_value_t = 0.8)]
    pub smooth: f64,
    /// Output motion JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the root-space positions as a positions JSONL file.
    #[arg(long)]
    pub positions_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub rig: RigArg,
    /// Training motion JSONL.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation motion JSONL.
    #[arg(long)]
    pub val: PathBuf,
    /// Training configuration JSON; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the history goes to `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub rig: RigArg,
    /// Checkpoint; without it the rest-pose predictor is evaluated.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Motion JSONL with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path (printed to stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-joint CSV path.
    #[arg(long)]
    pub per_joint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RoundtripArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long, default_value_t = 10_000)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SolverArg {
    Grad,
    Ccd,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverArg::Grad)]
    pub solver: SolverArg,
    /// Iteration counts at which to record metrics.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CHECKPOINTS.to_vec())]
    pub checkpoints: Vec<usize>,
    /// Adds the amortized row for this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Solve only the first K frames.
    #[arg(long)]
    pub limit: Option<usize>,
    /// L-BFGS history length of the gradient solver; 0 gives steepest descent.
    #[arg(long)]
    pub memory: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Noise levels in millimeters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMAS_MM.to_vec())]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave the root joint perturbed instead of re-centering after noise.
    #[arg(long)]
    pub keep_root_noise: bool,
    /// Aggregate CSV; per-joint grids go to `<stem>_swing.csv` and `<stem>_twist.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BATCHES.to_vec())]
    pub batches: Vec<usize>,
    /// Minimum timed duration per batch size, milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub min_ms: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub src_rig: String,
    #[arg(long)]
    pub dst_rig: String,
    /// JSON object mapping destination joint names to source joint names.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub rig: RigArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Positions JSONL (world or root space).
    #[arg(long)]
    pub positions: PathBuf,
    /// Output motion JSONL with quaternions and root translations.
    #[arg(long)]
    pub out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn resolve_rig(rig_arg: &str) -> Result<KinematicTree> {
    if rig_arg == BUILTIN_RIG && !Path::new(rig_arg).exists() {
        return load_rig(SMPL22_JSON);
    }
    load_rig(&read_text(Path::new(rig_arg))?)
}

fn rig_and_frames(rig_arg: &str) -> Result<(KinematicTree, RestBoneFrames)> {
    let tree = resolve_rig(rig_arg)?;
    let rest = compute_rest_bone_frames(&tree)?;
    Ok((tree, rest))
}

fn load_model(path: &Path, tree: &KinematicTree) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Model::from_checkpoint(&Checkpoint::from_bytes(&bytes)?, tree)
}

fn load_paired(path: &Path, tree: &KinematicTree, rest: &RestBoneFrames) -> Result<Paired> {
    let ds = MotionDataset::from_jsonl(&read_text(path)?)?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Paired::from_dataset(&ds, tree, rest)
}

/// `<dir>/<stem>_<suffix>.csv` next to `out`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn rig_check(rig_arg: &str) -> Result<String> {
    let (tree, rest) = rig_and_frames(rig_arg)?;
    let mut s = String::new();
    let names = tree.names();
    writeln!(s, "rig {} joints {} up {:?}", tree.name(), tree.joint_count(), tree.up().as_slice()).unwrap();
    for i in 0..tree.joint_count() {
        let (a, b) = rest.edges[i];
        let x = rest.frames[i].column(0);
        writeln!(
            s,
            "{} parent={} bone={}->{} x=[{:.6},{:.6},{:.6}] fallback={}",
            names[i],
            tree.parent(i).map_or("-", |p| names[p].as_str()),
            names[a],
            names[b],
            x[0],
            x[1],
            x[2],
            rest.fallback_used[i]
        )
        .unwrap();
    }
    let fallback: Vec<&str> = (0..tree.joint_count()).filter(|&i| rest.fallback_used[i]).map(|i| names[i].as_str()).collect();
    writeln!(s, "fallback joints: {}", if fallback.is_empty() { "none".to_string() } else { fallback.join(",") }).unwrap();
    Ok(s)
}

fn gen(a: &GenArgs) -> Result<()> {
    let tree = resolve_rig(&a.rig.rig)?;
    let caps = match &a.caps {
        Some(p) => AngleCaps::from_json(&read_text(p)?)?,
        None => AngleCaps::uniform(a.cap),
    }
    .resolve(&tree)?;
    let ds = generate_synthetic(&tree, a.frames, a.seed, &caps, a.smooth)?;
    write_file(&a.out, ds.to_jsonl())?;
    if let Some(p) = &a.positions_out {
        let frames = ds.frames.iter().map(|f| f.p.clone().expect("generated frames carry positions")).collect();
        let seq = PositionSequence { rig: ds.rig.clone(), n: ds.n, frames };
        write_file(p, seq.to_jsonl())?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<String> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let train_set = load_paired(&a.train, &tree, &rest)?;
    let val_set = load_paired(&a.val, &tree, &rest)?;
    let outcome = train_with_progress(&tree, &rest, &train_set, &val_set, &cfg, |r| {
        eprintln!("epoch {} train_loss {:.6} val_mpjae {:.4}", r.epoch, r.train_loss, r.val_mpjae);
    })?;
    write_file(&a.out, outcome.model.to_checkpoint().to_bytes())?;
    write_file(&history_path(&a.out), history_csv(&outcome.history)?)?;
    let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch).map_or(f64::NAN, |r| r.val_mpjae);
    Ok(format!("best_epoch {} val_mpjae_deg {best}\n", outcome.best_epoch))
}

fn eval_cmd(a: &EvalArgs) -> Result<String> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let data = load_paired(&a.data, &tree, &rest)?;
    let report = match &a.ckpt {
        Some(p) => evaluate(&load_model(p, &tree)?, &tree, &rest, &data)?,
        None => evaluate(&RestPosePredictor::new(&tree)?, &tree, &rest, &data)?,
    };
    if let Some(p) = &a.per_joint {
        write_file(p, report.per_joint_csv()?)?;
    }
    let json = report.to_json();
    match &a.report {
        Some(p) => {
            write_file(p, &json)?;
            Ok(format!(
                "mpjae_deg {} mpjpe_mm {} p_mpjpe_mm {} swing_deg {} twist_deg {}\n",
                report.mpjae_deg, report.mpjpe_mm, report.p_mpjpe_mm, report.swing_deg, report.twist_deg
            ))
        }
        None => Ok(json + "\n"),
    }
}

/// Returns the printed report and whether the single-precision bound held.
fn roundtrip_cmd(a: &RoundtripArgs) -> Result<(String, bool)> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    if a.frames == 0 {
        return Err(Error::Empty("round-trip poses"));
    }
    let caps = vec![PI * 0.999; tree.joint_count()];
    let ds = generate_synthetic(&tree, a.frames, a.seed, &caps, 0.0)?;
    let poses: Vec<Vec<Matrix3<f64>>> = ds.frames.iter().map(MotionFrame::locals).collect();
    let (max32, mean32) = roundtrip_report::<f32>(&tree, &rest, &poses);
    let (max64, mean64) = roundtrip_report::<f64>(&tree, &rest, &poses);
    let text = format!("f32 max {max32:e} mean {mean32:e}\nf64 max {max64:e} mean {mean64:e}\n");
    Ok((text, max32 <= ROUNDTRIP_MAX))
}

fn solve_cmd(a: &SolveArgs) -> Result<()> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let mut ds = MotionDataset::from_jsonl(&read_text(&a.data)?)?;
    if let Some(k) = a.limit {
        ds.frames.truncate(k);
    }
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let data = Paired::from_dataset(&ds, &tree, &rest)?;
    let max_iters = a.checkpoints.iter().copied().max().ok_or(Error::Empty("checkpoints"))?;
    let mut cfg = SolveConfig { max_iters, checkpoints: a.checkpoints.clone(), ..SolveConfig::default() };
    if let Some(m) = a.memory {
        cfg.memory = m;
    }
    let kind = match a.solver {
        SolverArg::Grad => SolverKind::Grad,
        SolverArg::Ccd => SolverKind::Ccd,
    };
    let model = a.ckpt.as_deref().map(|p| load_model(p, &tree)).transpose()?;
    let rows = budget_sweep(kind, &tree, &rest, &data, &cfg, model.as_ref().map(|m| m as &dyn Predictor))?;
    write_file(&a.out, sweep_csv(&rows)?)
}

fn noise_cmd(a: &NoiseArgs) -> Result<()> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let model = load_model(&a.ckpt, &tree)?;
    let data = load_paired(&a.data, &tree, &rest)?;
    let sweep = noise_sweep(&model, &tree, &rest, &data, &a.sigmas, a.seed, !a.keep_root_noise)?;
    write_file(&a.out, sweep.aggregate_csv()?)?;
    write_file(&sibling(&a.out, "swing"), sweep.swing_csv()?)?;
    write_file(&sibling(&a.out, "twist"), sweep.twist_csv()?)
}

fn bench_cmd(a: &BenchArgs) -> Result<String> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let model = load_model(&a.ckpt, &tree)?;
    let report = bench_inference(&model, &tree, &rest, &a.batches, Duration::from_millis(a.min_ms), a.seed)?;
    write_file(&a.out, report.to_csv()?)?;
    Ok(format!("threads {} precision {}\n", report.threads, report.precision))
}

fn flow_cmd(a: &FlowArgs) -> Result<()> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let model = load_model(&a.ckpt, &tree)?;
    let data = load_paired(&a.data, &tree, &rest)?;
    let x: Vec<f32> = data.positions.iter().map(|&v| v as f32).collect();
    let flow = mean_attention_flow(&model, &x, data.frames)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["joint".to_string()];
    header.extend(tree.names().iter().cloned());
    w.write_record(&header)?;
    for (i, name) in tree.names().iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..tree.joint_count()).map(|j| flow[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_file(&a.out, bytes)
}

fn transfer_cmd(a: &TransferArgs) -> Result<()> {
    let src_tree = resolve_rig(&a.src_rig)?;
    let dst_tree = resolve_rig(&a.dst_rig)?;
    compute_rest_bone_frames(&dst_tree)?;
    let model = load_model(&a.src, &src_tree)?;
    let map: BTreeMap<String, String> = serde_json::from_str(&read_text(&a.map)?)?;
    let moved = transfer_embeddings(&model, &src_tree, &dst_tree, &map)?;
    write_file(&a.out, moved.to_checkpoint().to_bytes())
}

/// Runs inference on a positions file; each output frame carries the
/// subtracted root position as `t`.
pub fn convert_positions(model: &Model<f32>, tree: &KinematicTree, rest: &RestBoneFrames, seq: &PositionSequence) -> Result<MotionDataset> {
    if seq.rig != tree.name() || seq.n != tree.joint_count() {
        return Err(Error::RigMismatch(format!("positions are for rig '{}', got '{}'", seq.rig, tree.name())));
    }
    let n = tree.joint_count();
    let mut roots = Vec::with_capacity(seq.frames.len());
    let mut x = Vec::with_capacity(seq.frames.len() * n * 3);
    for f in &seq.frames {
        let root = f[0];
        roots.push(root);
        for p in f {
            x.extend((0..3).map(|c| (p[c] - root[c]) as f32));
        }
    }
    let frames64 = rest.frames.clone();
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (c, xs) in x.chunks(EVAL_CHUNK * n * 3).enumerate() {
        let b = xs.len() / (n * 3);
        let pred = model.predict(xs, b)?;
        for k in 0..b {
            let bone: Vec<Matrix3<f64>> =
                pred[k * n * 9..(k + 1) * n * 9].chunks(9).map(|r| Matrix3::from_row_slice(r).map(|v| v as f64)).collect();
            let q = locals_from_bone(&bone, &frames64, tree)
                .iter()
                .map(|m| {
                    let q = matrix_to_quat(m);
                    let norm = Vector3::new(q[1], q[2], q[3]).norm_squared() + q[0] * q[0];
                    let s = norm.sqrt();
                    [q[0] / s, q[1] / s, q[2] / s, q[3] / s]
                })
                .collect();
            frames.push(MotionFrame { q, p: None, t: Some(roots[c * EVAL_CHUNK + k]) });
        }
    }
    Ok(MotionDataset { rig: tree.name().to_string(), n, frames })
}

fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let (tree, rest) = rig_and_frames(&a.rig.rig)?;
    let model = load_model(&a.ckpt, &tree)?;
    let seq = PositionSequence::from_jsonl(&read_text(&a.positions)?)?;
    let out = convert_positions(&model, &tree, &rest, &seq)?;
    write_file(&a.out, out.to_jsonl())
}

/// Short machine-readable class of an error for diagnostics.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::Parse(_) | Error::Format(_) => "format",
        Error::Topology { .. } | Error::DegenerateFrame(_) => "rig",
        Error::RigMismatch(_) | Error::UnknownJoint(_) => "rig-mismatch",
        Error::Divergence { .. } => "divergence",
        Error::Empty(_) => "empty",
        _ => "invalid",
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        1
    } else {
        2
    }
}

/// Executes a parsed command, returning the text for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Invalid("--threads must be positive".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Rig { action: RigAction::Check { rig } } => rig_check(rig),
        Command::Gen(a) => gen(a).map(|_| String::new()),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Roundtrip(a) => {
            let (text, ok) = roundtrip_cmd(a)?;
            if ok {
                Ok(text)
            } else {
                print!("{text}");
                Err(Error::Invalid(format!("round-trip max error exceeds {ROUNDTRIP_MAX:e}")))
            }
        }
        Command::Solve(a) => solve_cmd(a).map(|_| String::new()),
        Command::NoiseSweep(a) => noise_cmd(a).map(|_| String::new()),
        Command::Bench(a) => bench_cmd(a),
        Command::AttnFlow(a) => flow_cmd(a).map(|_| String::new()),
        Command::Transfer(a) => transfer_cmd(a).map(|_| String::new()),
        Command::Convert(a) => convert_cmd(a).map(|_| String::new()),
    }
}

/// One-line diagnostic: `error kind=<kind> message=<json string>`.
pub fn diagnostic(e: &Error) -> String {
    format!("error kind={} message={}", error_kind(e), serde_json::Value::String(e.to_string()))
}
