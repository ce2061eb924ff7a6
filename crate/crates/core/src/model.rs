//! Graph-attention regressor over the skeletal graph, the per-joint MLP
//! baseline, the 6D rotation head, both training losses, attention flow,
//! cross-rig embedding transfer and the checkpoint format.
//!
//! Batches are laid out frame-major: row `b·N + i` holds joint `i` of frame `b`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rig::{compute_rest_bone_frames, distal_set, KinematicTree};

/// Which edges the attention layers may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Bidirectional,
    Unidirectional,
    FullyConnected,
}

/// Directed edges `(i, j)` meaning joint `i` attends to joint `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    pub mode: GraphMode,
    pub edges: BTreeSet<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
}

impl GraphTopology {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Additive softmax mask `[N, N]`: 0 on edges, `-inf` elsewhere.
    pub fn mask<T: Real>(&self) -> Tensor<T> {
        let n = self.neighbors.len();
        let mut m = Tensor::full(&[n, n], T::neg_infinity());
        for &(i, j) in &self.edges {
            m.data_mut()[i * n + j] = T::zero();
        }
        m
    }
}

/// Builds the attention graph; self-loops are present in every mode.
pub fn build_topology(tree: &KinematicTree, mode: GraphMode) -> GraphTopology {
    let n = tree.joint_count();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        edges.insert((i, i));
        match mode {
            GraphMode::FullyConnected => {
                for j in 0..n {
                    edges.insert((i, j));
                }
            }
            GraphMode::Bidirectional | GraphMode::Unidirectional => {
                if let Some(p) = tree.parent(i) {
                    edges.insert((i, p));
                    if mode == GraphMode::Bidirectional {
                        edges.insert((p, i));
                    }
                }
            }
        }
    }
    let mut neighbors = vec![Vec::new(); n];
    for &(i, j) in &edges {
        neighbors[i].push(j);
    }
    GraphTopology { mode, edges, neighbors }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gat,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

/// Architecture hyperparameters. For the MLP, `depth` counts residual blocks
/// and the graph fields are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub dropout: f64,
    pub use_positional_embedding: bool,
    pub use_global_shortcut: bool,
    pub use_local_refinement: bool,
    pub graph: GraphMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Small)
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (hidden, depth, heads) = match p {
            Preset::Tiny => (32, 2, 4),
            Preset::Small => (64, 3, 4),
            Preset::Base => (128, 4, 8),
        };
        ModelConfig {
            arch: Arch::Gat,
            hidden,
            depth,
            heads,
            dropout: 0.1,
            use_positional_embedding: true,
            use_global_shortcut: true,
            use_local_refinement: true,
            graph: GraphMode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::Invalid("hidden, depth and heads must be positive".into()));
        }
        if self.arch == Arch::Gat && !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// First layer index (0-based) that receives distal refinement.
    pub fn refine_start(&self) -> usize {
        self.depth.div_ceil(2)
    }
}

/// Named parameter with its weight-decay flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub decay: bool,
}

/// Biases, normalization parameters and joint embeddings are exempt from decay.
pub fn is_no_decay(name: &str) -> bool {
    name == "embedding" || name.ends_with(".bias") || name.contains(".norm.")
}

/// Ordered parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, decay: !is_no_decay(name) });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay }).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on the tape; leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Wraps externally created tape handles, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one handle per parameter");
        Bound { vars, index: self.index.clone() }
    }
}

/// Tape handles of a bound parameter store, in store order.
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("parameter '{name}' is bound"))]
    }
}

/// Per-rig constants used by the forward pass and the losses.
#[derive(Clone, Debug)]
pub struct RigConsts {
    pub n: usize,
    pub parents: Vec<Option<usize>>,
    /// Rest bone frames, row-major, `[N·9]`.
    pub rest: Vec<f64>,
    /// Rest offsets, `[N·3]`.
    pub offsets: Vec<f64>,
    pub distal: Vec<bool>,
    /// Parent and children of each joint.
    pub kin_neighbors: Vec<Vec<usize>>,
    /// Joints grouped by depth, root level first.
    pub levels: Vec<Vec<usize>>,
    /// Non-root joints on the path root → i, for each i.
    pub paths: Vec<Vec<usize>>,
}

impl RigConsts {
    pub fn new(tree: &KinematicTree) -> Result<Self> {
        let n = tree.joint_count();
        let frames = compute_rest_bone_frames(tree)?;
        let rest = frames.frames.iter().flat_map(|m| (0..9).map(move |k| m[(k / 3, k % 3)])).collect();
        let offsets = tree.offsets().iter().flat_map(|o| [o.x, o.y, o.z]).collect();
        let ds = distal_set(tree);
        let kin_neighbors = (0..n)
            .map(|i| tree.parent(i).into_iter().chain(tree.children(i).iter().copied()).collect())
            .collect();
        let max_depth = (0..n).map(|i| tree.depth(i)).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); max_depth + 1];
        for i in 0..n {
            levels[tree.depth(i)].push(i);
        }
        let paths = (0..n).map(|i| tree.path_from_root(i).into_iter().filter(|&a| a != 0).collect()).collect();
        Ok(RigConsts {
            n,
            parents: tree.parents().to_vec(),
            rest,
            offsets,
            distal: (0..n).map(|i| ds.contains(&i)).collect(),
            kin_neighbors,
            levels,
            paths,
        })
    }
}

/// Anything that maps root-space positions to bone-aligned rotations.
pub trait Predictor: Sync {
    /// `positions` is `[B·N·3]`; the result is `[B·N·9]` row-major rotations.
    fn predict(&self, positions: &[f32], batch: usize) -> Result<Vec<f32>>;
}

/// Emits the rest frames, i.e. identity local rotations, for every input.
pub struct RestPosePredictor {
    rest: Vec<f32>,
}

impl RestPosePredictor {
    pub fn new(tree: &KinematicTree) -> Result<Self> {
        let c = RigConsts::new(tree)?;
        Ok(RestPosePredictor { rest: c.rest.iter().map(|&v| v as f32).collect() })
    }
}

impl Predictor for RestPosePredictor {
    fn predict(&self, positions: &[f32], batch: usize) -> Result<Vec<f32>> {
        let n = self.rest.len() / 9;
        if positions.len() != batch * n * 3 {
            return Err(Error::shape("predict", format!("{} values for batch {batch} of {n} joints", positions.len())));
        }
        Ok(self.rest.iter().copied().cycle().take(batch * n * 9).collect())
    }
}

/// Outputs of one forward pass.
pub struct ForwardOut {
    /// Bone-aligned rotations, `[B·N, 9]`.
    pub rot: Var,
    /// Raw head outputs, `[B·N, 6]`.
    pub head: Var,
    /// Attention weights per layer and head, each `[B·N, N]`.
    pub attention: Vec<Vec<Var>>,
}

/// A regressor bound to one rig.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub rig_name: String,
    pub joints: Vec<String>,
    pub params: ParamStore<T>,
    consts: RigConsts,
    topology: GraphTopology,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::c(rng.random_range(-b..b))).collect()).expect("shape")
}

fn embedding_init<T: Real>(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Tensor<T> {
    let d = Normal::new(0.0, 0.02).expect("valid deviation");
    Tensor::new(vec![n, f], (0..n * f).map(|_| T::c(d.sample(rng))).collect()).expect("shape")
}

/// Initial head bias: an untrained model emits the rest frames.
pub const HEAD_BIAS_INIT: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

const ROW_MAJOR_FROM_COLUMNS: [usize; 9] = [0, 3, 6, 1, 4, 7, 2, 5, 8];

impl<T: Real> Model<T> {
    /// Freshly initialized model for `tree`.
    pub fn new(config: ModelConfig, tree: &KinematicTree, seed: u64) -> Result<Self> {
        config.validate()?;
        let consts = RigConsts::new(tree)?;
        let topology = build_topology(tree, config.graph);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let (n, f) = (tree.joint_count(), config.hidden);
        let mut ps = ParamStore::new();
        let ones = |shape: &[usize]| Tensor::full(shape, T::one());
        match config.arch {
            Arch::Gat => {
                let fh = f / config.heads;
                ps.insert("input.weight", uniform(&mut rng, &[3, f], 3));
                ps.insert("embedding", embedding_init(&mut rng, n, f));
                for l in 0..config.depth {
                    ps.insert(&format!("gat.{l}.weight"), uniform(&mut rng, &[f, f], f));
                    ps.insert(&format!("gat.{l}.attn_src"), uniform(&mut rng, &[config.heads, fh], fh));
                    ps.insert(&format!("gat.{l}.attn_dst"), uniform(&mut rng, &[config.heads, fh], fh));
                    ps.insert(&format!("gat.{l}.norm.gain"), ones(&[1, f]));
                    ps.insert(&format!("gat.{l}.norm.bias"), Tensor::zeros(&[1, f]));
                }
                ps.insert("refine.weight", uniform(&mut rng, &[f, f], f));
                ps.insert("skip.weight", uniform(&mut rng, &[3, f], 3));
            }
            Arch::Mlp => {
                ps.insert("input.weight", uniform(&mut rng, &[3, f], 3));
                ps.insert("input.bias", Tensor::zeros(&[1, f]));
                ps.insert("embedding", embedding_init(&mut rng, n, f));
                for k in 0..config.depth {
                    ps.insert(&format!("block.{k}.norm.gain"), ones(&[1, f]));
                    ps.insert(&format!("block.{k}.norm.bias"), Tensor::zeros(&[1, f]));
                    ps.insert(&format!("block.{k}.fc1.weight"), uniform(&mut rng, &[f, 2 * f], f));
                    ps.insert(&format!("block.{k}.fc1.bias"), Tensor::zeros(&[1, 2 * f]));
                    ps.insert(&format!("block.{k}.fc2.weight"), uniform(&mut rng, &[2 * f, f], 2 * f));
                    ps.insert(&format!("block.{k}.fc2.bias"), Tensor::zeros(&[1, f]));
                }
            }
        }
        ps.insert("head.weight", uniform(&mut rng, &[f, 6], f));
        ps.insert("head.bias", Tensor::new(vec![1, 6], HEAD_BIAS_INIT.iter().map(|&v| T::c(v)).collect())?);
        Ok(Model {
            config,
            rig_name: tree.name().to_string(),
            joints: tree.names().to_vec(),
            params: ps,
            consts,
            topology,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.consts.n
    }

    pub fn consts(&self) -> &RigConsts {
        &self.consts
    }

    pub fn topology(&self) -> &GraphTopology {
        &self.topology
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            rig_name: self.rig_name.clone(),
            joints: self.joints.clone(),
            params: self.params.cast(),
            consts: self.consts.clone(),
            topology: self.topology.clone(),
        }
    }

    /// Errors unless `tree` has the rig name and joint names this model was built for.
    pub fn check_rig(&self, tree: &KinematicTree) -> Result<()> {
        if tree.name() != self.rig_name || tree.names() != self.joints.as_slice() {
            return Err(Error::RigMismatch(format!("model is for rig '{}', got '{}'", self.rig_name, tree.name())));
        }
        Ok(())
    }

    /// Records the forward pass. `x` holds root-space positions `[B·N, 3]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOut> {
        let n = self.consts.n;
        if tape.shape(x) != [batch * n, 3] {
            return Err(Error::shape("forward", format!("positions {:?} for batch {batch} of {n} joints", tape.shape(x))));
        }
        let joint_of_row: Arc<Vec<usize>> = Arc::new((0..batch * n).map(|r| r % n).collect());
        let (h, attention) = match self.config.arch {
            Arch::Gat => self.gat_trunk(tape, p, x, batch, training, rng, &joint_of_row)?,
            Arch::Mlp => (self.mlp_trunk(tape, p, x, training, rng, &joint_of_row)?, Vec::new()),
        };
        let hw = tape.matmul(h, p.get("head.weight"))?;
        let head = tape.add(hw, p.get("head.bias"))?;
        let rot = rot6d_to_matrix(tape, head)?;
        Ok(ForwardOut { rot, head, attention })
    }

    fn embed(&self, tape: &mut Tape<T>, p: &Bound, x: Var, joint_of_row: &Arc<Vec<usize>>) -> Result<Var> {
        let mut h = tape.matmul(x, p.get("input.weight"))?;
        if self.config.use_positional_embedding {
            let e = tape.index_select(p.get("embedding"), joint_of_row.clone())?;
            h = tape.add(h, e)?;
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn gat_trunk(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
        joint_of_row: &Arc<Vec<usize>>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let cfg = &self.config;
        let (n, f, heads) = (self.consts.n, cfg.hidden, cfg.heads);
        let fh = f / heads;
        let rows = batch * n;
        let frame_of_row: Arc<Vec<usize>> = Arc::new((0..rows).map(|r| r / n).collect());
        let mask = match cfg.graph {
            GraphMode::FullyConnected => None,
            _ => Some(self.topology.mask::<T>()),
        };
        let head_cols: Vec<Arc<Vec<usize>>> = (0..heads).map(|k| Arc::new((k * fh..(k + 1) * fh).collect())).collect();

        let refine = if cfg.use_local_refinement {
            Some(self.refinement_consts(tape, batch))
        } else {
            None
        };

        let mut h = self.embed(tape, p, x, joint_of_row)?;
        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let wh = tape.matmul(h, p.get(&format!("gat.{l}.weight")))?;
            let mut outs = Vec::with_capacity(heads);
            let mut alphas = Vec::with_capacity(heads);
            for (k, cols) in head_cols.iter().enumerate() {
                let whh = tape.select_cols(wh, cols.clone())?;
                let a_src = tape.index_select(p.get(&format!("gat.{l}.attn_src")), Arc::new(vec![k]))?;
                let a_dst = tape.index_select(p.get(&format!("gat.{l}.attn_dst")), Arc::new(vec![k]))?;
                let ms = tape.mul(whh, a_src)?;
                let src = tape.sum_cols(ms);
                let md = tape.mul(whh, a_dst)?;
                let dst = tape.sum_cols(md);
                // logits[(b,i), j] = a_dstᵀ W h_i + a_srcᵀ W h_j
                let src_bn = tape.reshape(src, &[batch, n])?;
                let src_rows = tape.index_select(src_bn, frame_of_row.clone())?;
                let logits = tape.add(src_rows, dst)?;
                let act = tape.leaky_relu(logits, T::c(0.2));
                let alpha = tape.softmax(act, mask.as_ref())?;
                alphas.push(alpha);
                let alpha_d = tape.dropout(alpha, cfg.dropout, training, rng);
                let a3 = tape.reshape(alpha_d, &[batch, n, n])?;
                let v3 = tape.reshape(whh, &[batch, n, fh])?;
                let msg = tape.bmm(a3, v3)?;
                outs.push(tape.reshape(msg, &[rows, fh])?);
            }
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
            let act = tape.elu(cat);
            let dropped = tape.dropout(act, cfg.dropout, training, rng);
            let mut next = tape.layernorm(dropped, p.get(&format!("gat.{l}.norm.gain")), p.get(&format!("gat.{l}.norm.bias")))?;
            if let Some((seg, inv_count, distal)) = &refine {
                if l >= cfg.refine_start() {
                    let gathered = tape.index_select(h, seg.0.clone())?;
                    let summed = tape.segment_sum(gathered, seg.1.clone(), rows)?;
                    let mean = tape.mul(summed, *inv_count)?;
                    let diff = tape.sub(mean, h)?;
                    let delta = tape.matmul(diff, p.get("refine.weight"))?;
                    let masked = tape.mul(delta, *distal)?;
                    next = tape.add(next, masked)?;
                }
            }
            h = next;
            attention.push(alphas);
        }
        if cfg.use_global_shortcut {
            let r = tape.matmul(x, p.get("skip.weight"))?;
            h = tape.add(h, r)?;
        }
        Ok((h, attention))
    }

    /// Gather/scatter indices for the neighborhood mean, `1/|K(i)|` per row
    /// and the distal indicator per row.
    fn refinement_consts(&self, tape: &mut Tape<T>, batch: usize) -> ((Arc<Vec<usize>>, Arc<Vec<usize>>), Var, Var) {
        let n = self.consts.n;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut inv = Vec::with_capacity(batch * n);
        let mut distal = Vec::with_capacity(batch * n);
        for b in 0..batch {
            for i in 0..n {
                let k = &self.consts.kin_neighbors[i];
                for &j in k {
                    src.push(b * n + j);
                    dst.push(b * n + i);
                }
                inv.push(if k.is_empty() { T::zero() } else { T::c(1.0 / k.len() as f64) });
                distal.push(if self.consts.distal[i] { T::one() } else { T::zero() });
            }
        }
        let inv = tape.constant(Tensor::new(vec![batch * n, 1], inv).expect("shape"));
        let distal = tape.constant(Tensor::new(vec![batch * n, 1], distal).expect("shape"));
        ((Arc::new(src), Arc::new(dst)), inv, distal)
    }

    fn mlp_trunk(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
        joint_of_row: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let mut h = self.embed(tape, p, x, joint_of_row)?;
        h = tape.add(h, p.get("input.bias"))?;
        for k in 0..self.config.depth {
            let z = tape.layernorm(h, p.get(&format!("block.{k}.norm.gain")), p.get(&format!("block.{k}.norm.bias")))?;
            let a = tape.matmul(z, p.get(&format!("block.{k}.fc1.weight")))?;
            let a = tape.add(a, p.get(&format!("block.{k}.fc1.bias")))?;
            let a = tape.elu(a);
            let a = tape.dropout(a, self.config.dropout, training, rng);
            let b = tape.matmul(a, p.get(&format!("block.{k}.fc2.weight")))?;
            let b = tape.add(b, p.get(&format!("block.{k}.fc2.bias")))?;
            h = tape.add(h, b)?;
        }
        Ok(h)
    }

    /// Inference forward pass; returns rotations `[B·N·9]` and, for the
    /// attention model, head-averaged attention per layer `[B·N·N]`.
    pub fn infer(&self, positions: &[T], batch: usize) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let n = self.consts.n;
        if positions.len() != batch * n * 3 || batch == 0 {
            return Err(Error::shape("predict", format!("{} values for batch {batch} of {n} joints", positions.len())));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![batch * n, 3], positions.to_vec())?);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, &p, x, batch, false, &mut rng)?;
        let head = tape.value(out.head).data();
        let eps = T::c(crate::so3::ROT6D_EPS);
        for r in head.chunks(6) {
            let a1 = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let d = (r[0] * r[3] + r[1] * r[4] + r[2] * r[5]) / a1;
            let y: Vec<T> = (0..3).map(|c| r[3 + c] - d * r[c] / a1).collect();
            let ny = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
            if !(a1 > eps) || !(ny > eps) {
                return Err(Error::Degenerate6d);
            }
        }
        let heads = self.config.heads as f64;
        let attn = out
            .attention
            .iter()
            .map(|layer| {
                let mut acc = vec![T::zero(); batch * n * n];
                for &a in layer {
                    for (s, &v) in acc.iter_mut().zip(tape.value(a).data()) {
                        *s = *s + v;
                    }
                }
                acc.into_iter().map(|v| v / T::c(heads)).collect()
            })
            .collect();
        Ok((tape.value(out.rot).data().to_vec(), attn))
    }
}

impl Predictor for Model<f32> {
    fn predict(&self, positions: &[f32], batch: usize) -> Result<Vec<f32>> {
        Ok(self.infer(positions, batch)?.0)
    }
}

/// Gram–Schmidt of `[a1 a2]` rows `[R, 6]` into row-major rotations `[R, 9]`
/// with columns `x̂, ŷ, ẑ`.
pub fn rot6d_to_matrix<T: Real>(tape: &mut Tape<T>, r6: Var) -> Result<Var> {
    let a1 = tape.select_cols(r6, Arc::new(vec![0, 1, 2]))?;
    let a2 = tape.select_cols(r6, Arc::new(vec![3, 4, 5]))?;
    let n1 = tape.l2_norm(a1);
    let x = tape.div(a1, n1)?;
    let m = tape.mul(a2, x)?;
    let d = tape.sum_cols(m);
    let proj = tape.mul(x, d)?;
    let yt = tape.sub(a2, proj)?;
    let ny = tape.l2_norm(yt);
    let y1 = tape.div(yt, ny)?;
    // Second pass; the identity in exact arithmetic, it keeps f32 outputs orthonormal when a1 ∥ a2.
    let m1 = tape.mul(y1, x)?;
    let d1 = tape.sum_cols(m1);
    let proj1 = tape.mul(x, d1)?;
    let yt1 = tape.sub(y1, proj1)?;
    let ny1 = tape.l2_norm(yt1);
    let y = tape.div(yt1, ny1)?;
    let z = tape.cross(x, y)?;
    let cols = tape.concat(&[x, y, z], 1)?;
    tape.select_cols(cols, Arc::new(ROW_MAJOR_FROM_COLUMNS.to_vec()))
}

/// Mean geodesic distance between row-major rotations `[R, 9]`, radians.
pub fn geodesic_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    // tr(AᵀB) = Σ A∘B
    let prod = tape.mul(pred, gt)?;
    let tr = tape.sum_cols(prod);
    let shifted = tape.add_scalar(tr, -T::one());
    let c = tape.scale(shifted, T::c(0.5));
    let ang = tape.acos_clamped(c);
    Ok(tape.mean(ang))
}

/// World rotations recovered from bone-aligned rotations, then local rotations,
/// then world rotations again by level-wise forward kinematics; all `[B·N, 9]`.
pub fn recover_and_recompose<T: Real>(tape: &mut Tape<T>, c: &RigConsts, bone: Var, batch: usize) -> Result<(Var, Var)> {
    let n = c.n;
    let rows = batch * n;
    let rest = tape.constant(Tensor::new(vec![n, 9], c.rest.iter().map(|&v| T::c(v)).collect())?);
    let joint_of_row: Arc<Vec<usize>> = Arc::new((0..rows).map(|r| r % n).collect());
    let rest_rows = tape.index_select(rest, joint_of_row)?;
    let world = tape.mat3_mul(bone, rest_rows, false, true)?;

    // Row `rows + b` is the identity and stands in for the root's parent.
    let eye: Vec<T> = (0..batch).flat_map(|_| (0..9).map(|k| if k % 4 == 0 { T::one() } else { T::zero() })).collect();
    let eye = tape.constant(Tensor::new(vec![batch, 9], eye)?);
    let ext = tape.concat(&[world, eye], 0)?;
    let parent_rows: Vec<usize> = (0..rows)
        .map(|r| match c.parents[r % n] {
            None => rows + r / n,
            Some(p) => (r / n) * n + p,
        })
        .collect();
    let pw = tape.index_select(ext, Arc::new(parent_rows))?;
    let local = tape.mat3_mul(pw, world, true, false)?;

    let fk_world = compose_world(tape, c, local, batch)?;
    Ok((local, fk_world))
}

/// World rotations `[B·N, 9]` from local rotations by level-wise composition.
pub fn compose_world<T: Real>(tape: &mut Tape<T>, c: &RigConsts, local: Var, batch: usize) -> Result<Var> {
    let n = c.n;
    let rows = batch * n;
    // Level-wise composition; `row_of[b·N + i]` locates joint i of frame b in `acc`.
    let mut row_of = vec![usize::MAX; rows];
    let root_rows: Vec<usize> = (0..batch).flat_map(|b| c.levels[0].iter().map(move |&i| b * n + i)).collect();
    let mut acc = tape.index_select(local, Arc::new(root_rows.clone()))?;
    for (k, &r) in root_rows.iter().enumerate() {
        row_of[r] = k;
    }
    let mut filled = root_rows.len();
    for level in &c.levels[1..] {
        let rows_l: Vec<usize> = (0..batch).flat_map(|b| level.iter().map(move |&i| b * n + i)).collect();
        let parents_l: Vec<usize> = rows_l.iter().map(|&r| row_of[(r / n) * n + c.parents[r % n].expect("non-root")]).collect();
        let pw = tape.index_select(acc, Arc::new(parents_l))?;
        let loc = tape.index_select(local, Arc::new(rows_l.clone()))?;
        let w = tape.mat3_mul(pw, loc, false, false)?;
        acc = tape.concat(&[acc, w], 0)?;
        for (k, &r) in rows_l.iter().enumerate() {
            row_of[r] = filled + k;
        }
        filled += rows_l.len();
    }
    tape.index_select(acc, Arc::new(row_of))
}

/// Root-space joint positions `[B·N, 3]` from world rotations `[B·N, 9]`.
pub fn positions_from_world<T: Real>(tape: &mut Tape<T>, c: &RigConsts, world: Var, batch: usize) -> Result<Var> {
    let n = c.n;
    let rows = batch * n;
    // Bone vector of joint a: R_w(π(a)) · d̄(a), for every non-root a.
    let mut parent_rows = Vec::new();
    let mut offsets = Vec::new();
    let mut bone_row = vec![usize::MAX; rows];
    for b in 0..batch {
        for a in 0..n {
            if let Some(p) = c.parents[a] {
                bone_row[b * n + a] = parent_rows.len();
                parent_rows.push(b * n + p);
                offsets.extend((0..3).map(|k| T::c(c.offsets[a * 3 + k])));
            }
        }
    }
    let pw = tape.index_select(world, Arc::new(parent_rows.clone()))?;
    let off = tape.constant(Tensor::new(vec![parent_rows.len(), 3], offsets)?);
    let bones = tape.mat3_vec(pw, off)?;
    let mut src = Vec::new();
    let mut seg = Vec::new();
    for b in 0..batch {
        for i in 0..n {
            for &a in &c.paths[i] {
                src.push(bone_row[b * n + a]);
                seg.push(b * n + i);
            }
        }
    }
    let gathered = tape.index_select(bones, Arc::new(src))?;
    tape.segment_sum(gathered, Arc::new(seg), rows)
}

/// Mean over joints and frames of the squared distance between FK of the
/// recovered locals and the input positions `[B·N, 3]`.
pub fn fk_consistency_loss<T: Real>(tape: &mut Tape<T>, c: &RigConsts, bone: Var, input: Var, batch: usize) -> Result<Var> {
    let (_, world) = recover_and_recompose(tape, c, bone, batch)?;
    let pos = positions_from_world(tape, c, world, batch)?;
    let d = tape.sub(pos, input)?;
    let sq = tape.mul(d, d)?;
    let per_joint = tape.sum_cols(sq);
    Ok(tape.mean(per_joint))
}

/// `L_rot + α·L_fk`; the FK term is skipped entirely when `α = 0`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    c: &RigConsts,
    pred: Var,
    gt: Var,
    input: Var,
    batch: usize,
    alpha: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let rot = geodesic_loss(tape, pred, gt)?;
    if alpha == 0.0 {
        return Ok((rot, rot, None));
    }
    let fk = fk_consistency_loss(tape, c, pred, input, batch)?;
    let w = tape.scale(fk, T::c(alpha));
    Ok((tape.add(rot, w)?, rot, Some(fk)))
}

/// Product `A_D · … · A_1` of head-averaged row-stochastic attention matrices.
pub fn attention_flow(stack: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = stack.first().ok_or(Error::Empty("attention stack"))?;
    let mut flow = first.clone();
    for a in &stack[1..] {
        if a.shape() != flow.shape() {
            return Err(Error::shape("attention_flow", format!("{:?} vs {:?}", a.shape(), flow.shape())));
        }
        flow = a * flow;
    }
    Ok(flow)
}

/// Mean attention flow over frames for a GAT model.
pub fn mean_attention_flow(model: &Model<f32>, positions: &[f32], frames: usize) -> Result<DMatrix<f64>> {
    if model.config.arch != Arch::Gat {
        return Err(Error::Invalid("attention flow needs an attention model".into()));
    }
    let n = model.joint_count();
    let mut mean = DMatrix::zeros(n, n);
    let chunk = 64;
    let mut start = 0;
    while start < frames {
        let b = chunk.min(frames - start);
        let (_, attn) = model.infer(&positions[start * n * 3..(start + b) * n * 3], b)?;
        for f in 0..b {
            let stack: Vec<DMatrix<f64>> =
                attn.iter().map(|layer| DMatrix::from_fn(n, n, |i, j| layer[(f * n + i) * n + j] as f64)).collect();
            mean += attention_flow(&stack)?;
        }
        start += b;
    }
    Ok(mean / frames as f64)
}

/// Copies a model to another rig. Embedding rows follow `name_map`
/// (destination joint → source joint); unmatched rows are zero. All other
/// parameters are copied unchanged.
pub fn transfer_embeddings(
    source: &Model<f32>,
    src_tree: &KinematicTree,
    dst_tree: &KinematicTree,
    name_map: &BTreeMap<String, String>,
) -> Result<Model<f32>> {
    source.check_rig(src_tree)?;
    let mut dst = Model::<f32>::new(source.config.clone(), dst_tree, 0)?;
    let f = source.config.hidden;
    let src_emb = source.params.get("embedding").ok_or_else(|| Error::Format("missing embedding".into()))?;
    let mut emb = vec![0.0f32; dst_tree.joint_count() * f];
    for (d, s) in name_map {
        let di = dst_tree.index_of(d).ok_or_else(|| Error::UnknownJoint(d.clone()))?;
        let si = src_tree.index_of(s).ok_or_else(|| Error::UnknownJoint(s.clone()))?;
        emb[di * f..(di + 1) * f].copy_from_slice(&src_emb.data()[si * f..(si + 1) * f]);
    }
    for p in dst.params.params_mut() {
        p.value = if p.name == "embedding" {
            Tensor::new(vec![dst_tree.joint_count(), f], emb.clone())?
        } else {
            source.params.get(&p.name).expect("same architecture").clone()
        };
    }
    Ok(dst)
}

/// Leading tag of the checkpoint header.
pub const CHECKPOINT_FORMAT: &str = "boneik-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub rig: String,
    pub n: usize,
    pub joints: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// One JSON header line, then the little-endian f32 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.payload.len() * 4);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format '{}'", header.format)));
        }
        let body = &bytes[nl + 1..];
        if !body.len().is_multiple_of(4) {
            return Err(Error::Format("payload length is not a multiple of 4".into()));
        }
        let payload: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut expected = 0;
        for t in &header.tensors {
            if t.offset != expected {
                return Err(Error::Format(format!("tensor '{}' at offset {} (expected {expected})", t.name, t.offset)));
            }
            expected += t.shape.iter().product::<usize>();
        }
        if expected != payload.len() {
            return Err(Error::Format(format!("manifest covers {expected} values, payload has {}", payload.len())));
        }
        if header.joints.len() != header.n {
            return Err(Error::Format("joint list length differs from n".into()));
        }
        Ok(Checkpoint { header, payload })
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut payload = Vec::with_capacity(self.params.scalar_count());
        for p in self.params.params() {
            tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: payload.len() });
            payload.extend_from_slice(p.value.data());
        }
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                config: self.config.clone(),
                rig: self.rig_name.clone(),
                n: self.joints.len(),
                joints: self.joints.clone(),
                tensors,
            },
            payload,
        }
    }

    /// Rebuilds a model; the rig must match the checkpoint's rig name and joints.
    pub fn from_checkpoint(ckpt: &Checkpoint, tree: &KinematicTree) -> Result<Self> {
        let h = &ckpt.header;
        if h.rig != tree.name() || h.joints != tree.names() {
            return Err(Error::RigMismatch(format!("checkpoint is for rig '{}', got '{}'", h.rig, tree.name())));
        }
        let mut model = Model::<f32>::new(h.config.clone(), tree, 0)?;
        let entries: HashMap<&str, &TensorEntry> = h.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if entries.len() != model.params.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", entries.len(), model.params.len())));
        }
        for p in model.params.params_mut() {
            let e = entries.get(p.name.as_str()).ok_or_else(|| Error::Format(format!("missing tensor '{}'", p.name)))?;
            if e.shape != p.value.shape() {
                return Err(Error::Format(format!("tensor '{}' has shape {:?}, expected {:?}", p.name, e.shape, p.value.shape())));
            }
            let len = p.value.len();
            p.value = Tensor::new(e.shape.clone(), ckpt.payload[e.offset..e.offset + len].to_vec())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::kinematics::{bone_from_world, fk};
    use crate::so3::{orthonormality_error, random_rotation};
    use crate::testutil::smpl_rig;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;

    fn chain(n: usize) -> KinematicTree {
        KinematicTree::new(
            "chain",
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| i.checked_sub(1)).collect(),
            (0..n).map(|i| if i == 0 { Vector3::zeros() } else { Vector3::new(0.1 * i as f64, 1.0, 0.05) }).collect(),
            Vector3::y(),
        )
        .unwrap()
    }

    fn five_joint() -> KinematicTree {
        KinematicTree::new(
            "five",
            ["root", "spine", "head", "arm", "hand"].iter().map(|s| s.to_string()).collect(),
            vec![None, Some(0), Some(1), Some(1), Some(3)],
            vec![Vector3::zeros(), Vector3::new(0.0, 0.5, 0.0), Vector3::new(0.0, 0.3, 0.1), Vector3::new(0.4, 0.1, 0.0), Vector3::new(0.3, -0.1, 0.05)],
            Vector3::z(),
        )
        .unwrap()
    }

    fn flat(m: &Matrix3<f64>) -> Vec<f64> {
        (0..9).map(|k| m[(k / 3, k % 3)]).collect()
    }

    /// Random poses as (positions, bone rotations), flattened frame-major.
    fn sample(tree: &KinematicTree, batch: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let frames = compute_rest_bone_frames(tree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::new();
        let mut rot = Vec::new();
        for _ in 0..batch {
            let locals: Vec<_> = (0..tree.joint_count()).map(|_| random_rotation(&mut rng, 1.0)).collect();
            let pose = fk(tree, &locals);
            for p in &pose.positions {
                pos.extend([p.x, p.y, p.z]);
            }
            for b in bone_from_world(&pose.world, &frames.frames) {
                rot.extend(flat(&b));
            }
        }
        (pos, rot)
    }

    #[test]
    fn topology_modes() {
        let t = chain(3);
        let bi = build_topology(&t, GraphMode::Bidirectional);
        let expected: BTreeSet<_> = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 0), (1, 1), (2, 2)].into_iter().collect();
        assert_eq!(bi.edges, expected);
        let smpl = smpl_rig();
        let bi = build_topology(&smpl, GraphMode::Bidirectional);
        assert_eq!(bi.edge_count(), 3 * 22 - 2);
        assert!(bi.edges.iter().all(|&(i, j)| bi.edges.contains(&(j, i))));
        let uni = build_topology(&smpl, GraphMode::Unidirectional);
        assert_eq!(uni.edge_count(), 2 * 22 - 1);
        let four = chain(4);
        assert_eq!(build_topology(&four, GraphMode::FullyConnected).edge_count(), 16);
        for mode in [GraphMode::Bidirectional, GraphMode::Unidirectional, GraphMode::FullyConnected] {
            let g = build_topology(&smpl, mode);
            assert!((0..22).all(|i| g.edges.contains(&(i, i))));
        }
    }

    #[test]
    fn zero_weights_emit_rest_frames() {
        let tree = smpl_rig();
        let mut m = Model::<f32>::new(ModelConfig::preset(Preset::Tiny), &tree, 1).unwrap();
        for p in m.params.params_mut() {
            if p.name != "head.bias" && !p.name.contains(".norm.gain") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (pos, _) = sample(&tree, 2, 2);
        let pos: Vec<f32> = pos.iter().map(|&v| v as f32).collect();
        let out = m.predict(&pos, 2).unwrap();
        for r in out.chunks(9) {
            for (k, v) in r.iter().enumerate() {
                let want = if k % 4 == 0 { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embedding_examples() {
        let tree = chain(4);
        let cfg = ModelConfig { depth: 1, heads: 1, hidden: 8, ..ModelConfig::preset(Preset::Tiny) };
        let m = Model::<f64>::new(cfg.clone(), &tree, 3).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let jr = Arc::new((0..4).collect());
        let h = m.embed(&mut tape, &p, x, &jr).unwrap();
        assert_eq!(tape.value(h).data(), m.params.get("embedding").unwrap().data());

        let m2 = Model::<f64>::new(ModelConfig { use_positional_embedding: false, ..cfg }, &tree, 3).unwrap();
        let mut tape = Tape::new();
        let p = m2.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![4, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let h = m2.embed(&mut tape, &p, x, &jr).unwrap();
        let d = tape.value(h).data();
        assert_eq!(&d[8..16], &d[16..24]);
        assert!(d[..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_are_rotations_and_attention_is_stochastic() {
        let tree = smpl_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [GraphMode::Bidirectional, GraphMode::Unidirectional, GraphMode::FullyConnected] {
            let cfg = ModelConfig { graph: mode, ..ModelConfig::preset(Preset::Tiny) };
            let m = Model::<f32>::new(cfg, &tree, 5).unwrap();
            let pos: Vec<f32> = (0..3 * 22 * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (rot, attn) = m.infer(&pos, 3).unwrap();
            for r in rot.chunks(9) {
                let mm = Matrix3::from_row_slice(r);
                let (o, d) = orthonormality_error(&mm);
                assert!(o < 1e-5 && (d - 1.0).abs() < 1e-5);
            }
            let topo = m.topology();
            for layer in &attn {
                for (r, row) in layer.chunks(22).enumerate() {
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    for (j, &v) in row.iter().enumerate() {
                        assert!(v >= 0.0);
                        if !topo.edges.contains(&(r % 22, j)) {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let tree = chain(2);
        let cfg = ModelConfig { graph: GraphMode::Unidirectional, depth: 1, ..ModelConfig::preset(Preset::Tiny) };
        let m = Model::<f64>::new(cfg, &tree, 6).unwrap();
        let (_, attn) = m.infer(&[0.0, 0.0, 0.0, 0.1, 1.0, 0.05], 1).unwrap();
        // Root only has its self-loop in the unidirectional graph.
        assert_eq!(attn[0][0], 1.0);
        assert_eq!(attn[0][1], 0.0);
    }

    fn reference_variant(flags: (bool, bool, bool), zero_loc: bool) -> Vec<f64> {
        let tree = smpl_rig();
        let cfg = ModelConfig {
            use_positional_embedding: flags.0,
            use_global_shortcut: flags.1,
            use_local_refinement: flags.2,
            ..ModelConfig::preset(Preset::Small)
        };
        let mut m = Model::<f64>::new(cfg, &tree, 7).unwrap();
        if zero_loc {
            m.params.get_mut("refine.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (pos, _) = sample(&tree, 2, 8);
        m.infer(&pos, 2).unwrap().0
    }

    #[test]
    fn zeroed_refinement_matches_refinement_off() {
        assert_eq!(reference_variant((true, true, true), true), reference_variant((true, true, false), false));
        assert_ne!(reference_variant((true, true, true), false), reference_variant((true, true, false), false));
    }

    #[test]
    fn component_flags_remove_their_terms() {
        let tree = smpl_rig();
        let (pos, _) = sample(&tree, 2, 9);
        let base = ModelConfig::preset(Preset::Tiny);
        // Zeroing the embedding equals PE off; zeroing the skip projection equals GS off.
        let mut m = Model::<f64>::new(base.clone(), &tree, 10).unwrap();
        m.params.get_mut("embedding").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut off = m.clone();
        off.config.use_positional_embedding = false;
        assert_eq!(m.infer(&pos, 2).unwrap().0, off.infer(&pos, 2).unwrap().0);

        let mut m = Model::<f64>::new(base, &tree, 11).unwrap();
        m.params.get_mut("skip.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut off = m.clone();
        off.config.use_global_shortcut = false;
        let (a, b) = (m.infer(&pos, 2).unwrap().0, off.infer(&pos, 2).unwrap().0);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn proximal_features_reach_distal_outputs() {
        let tree = smpl_rig();
        let m = Model::<f64>::new(ModelConfig::preset(Preset::Small), &tree, 12).unwrap();
        let (mut pos, _) = sample(&tree, 1, 13);
        let wrist = tree.index_of("left_wrist").unwrap();
        let elbow = tree.index_of("left_elbow").unwrap();
        let base = m.infer(&pos, 1).unwrap().0;
        pos[elbow * 3] += 1e-4;
        let moved = m.infer(&pos, 1).unwrap().0;
        let diff: f64 = (0..9).map(|k| (base[wrist * 9 + k] - moved[wrist * 9 + k]).abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn mlp_is_per_token() {
        let tree = chain(4);
        let cfg = ModelConfig { arch: Arch::Mlp, ..ModelConfig::preset(Preset::Tiny) };
        let m = Model::<f64>::new(cfg, &tree, 14).unwrap();
        let (pos, _) = sample(&tree, 1, 15);
        let base = m.infer(&pos, 1).unwrap().0;
        let mut swapped_pos = pos.clone();
        for k in 0..3 {
            swapped_pos.swap(3 + k, 6 + k);
        }
        let mut m2 = m.clone();
        let f = m.config.hidden;
        let e = m2.params.get_mut("embedding").unwrap().data_mut();
        for k in 0..f {
            e.swap(f + k, 2 * f + k);
        }
        let out = m2.infer(&swapped_pos, 1).unwrap().0;
        assert_eq!(&base[9..18], &out[18..27]);
        assert_eq!(&base[18..27], &out[9..18]);
        assert_eq!(&base[..9], &out[..9]);
        for r in base.chunks(9) {
            let (o, _) = orthonormality_error(&Matrix3::from_row_slice(r));
            assert!(o < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let tree = five_joint();
        let c = RigConsts::new(&tree).unwrap();
        let (pos, rot) = sample(&tree, 2, 16);
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::new(vec![10, 9], rot.clone()).unwrap());
        let x = tape.constant(Tensor::new(vec![10, 3], pos).unwrap());
        let l = geodesic_loss(&mut tape, gt, gt).unwrap();
        // The clamp puts a floor of acos(1 − 1e-7) on identical rotations.
        let floor = (1.0 - crate::autodiff::ACOS_CLAMP).acos();
        assert!((tape.value(l).item() - floor).abs() < 1e-9);
        let fk_l = fk_consistency_loss(&mut tape, &c, gt, x, 2).unwrap();
        assert!(tape.value(fk_l).item() < 1e-10);
        let (total, rot_l, fk_none) = total_loss(&mut tape, &c, gt, gt, x, 2, 0.0).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(rot_l).item());
        assert!(fk_none.is_none());

        // One joint of N off by θ gives θ/N.
        let mut off = rot.clone();
        let r = Matrix3::from_row_slice(&rot[18..27]) * crate::so3::axis_angle_to_matrix(&Vector3::z(), 0.7);
        off[18..27].copy_from_slice(&flat(&r));
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![5, 9], off[..45].to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![5, 9], rot[..45].to_vec()).unwrap());
        let l = geodesic_loss(&mut tape, a, b).unwrap();
        let floor = (1.0 - crate::autodiff::ACOS_CLAMP).acos();
        assert!((tape.value(l).item() - (0.7 + 4.0 * floor) / 5.0).abs() < 1e-7);
    }

    #[test]
    fn recomposed_world_matches_reference_fk() {
        let tree = smpl_rig();
        let c = RigConsts::new(&tree).unwrap();
        let frames = compute_rest_bone_frames(&tree).unwrap();
        let (pos, rot) = sample(&tree, 3, 17);
        let mut tape = Tape::<f64>::new();
        let bone = tape.constant(Tensor::new(vec![66, 9], rot.clone()).unwrap());
        let (local, world) = recover_and_recompose(&mut tape, &c, bone, 3).unwrap();
        let p = positions_from_world(&mut tape, &c, world, 3).unwrap();
        for (a, b) in tape.value(p).data().iter().zip(&pos) {
            assert!((a - b).abs() < 1e-12);
        }
        let bones: Vec<Matrix3<f64>> = rot[..198].chunks(9).map(Matrix3::from_row_slice).collect();
        let reference = crate::kinematics::locals_from_bone(&bones, &frames.frames, &tree);
        for (r, m) in tape.value(local).data()[..198].chunks(9).zip(&reference) {
            assert!((Matrix3::from_row_slice(r) - m).amax() < 1e-12);
        }
    }

    fn grad_fixture(tree: &KinematicTree, cfg: ModelConfig, batch: usize) -> (Model<f64>, Vec<f64>, Vec<f64>) {
        let mut m = Model::<f64>::new(cfg, tree, 18).unwrap();
        // Move the head away from its bias so every parameter matters.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for p in m.params.params_mut() {
            if p.name.contains("norm") || p.name == "embedding" {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let (pos, rot) = sample(tree, batch, 20);
        (m, pos, rot)
    }

    fn full_loss_check(cfg: ModelConfig, tol: f64) {
        let tree = five_joint();
        let (m, pos, rot) = grad_fixture(&tree, cfg, 2);
        let n = tree.joint_count();
        let inputs: Vec<Tensor<f64>> = m.params.params().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let bound = m.params.bind_vars(vars.to_vec());
                let x = tape.constant(Tensor::new(vec![2 * n, 3], pos.clone())?);
                let gt = tape.constant(Tensor::new(vec![2 * n, 9], rot.clone())?);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = m.forward(tape, &bound, x, 2, false, &mut rng)?;
                Ok(total_loss(tape, &m.consts, out.rot, gt, x, 2, 0.1)?.0)
            },
            &inputs,
            1e-5,
            tol,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = ModelConfig { hidden: 8, heads: 2, depth: 2, dropout: 0.0, ..ModelConfig::preset(Preset::Tiny) };
        full_loss_check(cfg.clone(), 1e-3);
        full_loss_check(ModelConfig { arch: Arch::Mlp, ..cfg }, 1e-3);
    }

    #[test]
    fn gat_layer_gradient_check() {
        let tree = five_joint();
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            depth: 1,
            dropout: 0.0,
            use_global_shortcut: false,
            use_local_refinement: false,
            ..ModelConfig::preset(Preset::Tiny)
        };
        let (m, pos, _) = grad_fixture(&tree, cfg, 1);
        let inputs: Vec<Tensor<f64>> = m.params.params().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let bound = m.params.bind_vars(vars.to_vec());
                let x = tape.constant(Tensor::new(vec![5, 3], pos.clone())?);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let jr = Arc::new((0..5).collect());
                let (h, _) = m.gat_trunk(tape, &bound, x, 1, false, &mut rng, &jr)?;
                let sq = tape.mul(h, h)?;
                let w = tape.elu(sq);
                Ok(tape.mean(w))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fk_loss_gradient_wrt_head_outputs() {
        let tree = five_joint();
        let c = RigConsts::new(&tree).unwrap();
        let (pos, _) = sample(&tree, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let head = Tensor::new(vec![10, 6], (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = grad_check(
            |tape, v| {
                let r = rot6d_to_matrix(tape, v[0])?;
                let x = tape.constant(Tensor::new(vec![10, 3], pos.clone())?);
                fk_consistency_loss(tape, &c, r, x, 2)
            },
            &[head],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn attention_flow_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0.0..1.0));
        let a = DMatrix::from_fn(4, 4, |i, j| a[(i, j)] / a.row(i).sum());
        assert_eq!(attention_flow(std::slice::from_ref(&a)).unwrap(), a);
        let id = DMatrix::<f64>::identity(4, 4);
        assert_eq!(attention_flow(&[id.clone(), id.clone(), id.clone()]).unwrap(), id);
        let stack: Vec<_> = (0..5)
            .map(|_| {
                let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..1.0));
                DMatrix::from_fn(6, 6, |i, j| m[(i, j)] / m.row(i).sum())
            })
            .collect();
        let flow = attention_flow(&stack).unwrap();
        for i in 0..6 {
            assert!((flow.row(i).sum() - 1.0).abs() < 1e-6);
        }
        assert!(attention_flow(&[]).is_err());
    }

    #[test]
    fn transfer_examples() {
        let tree = smpl_rig();
        let src = Model::<f32>::new(ModelConfig::preset(Preset::Tiny), &tree, 24).unwrap();
        let ident: BTreeMap<String, String> = tree.names().iter().map(|n| (n.clone(), n.clone())).collect();
        let same = transfer_embeddings(&src, &tree, &tree, &ident).unwrap();
        assert_eq!(same.params, src.params);

        let empty = transfer_embeddings(&src, &tree, &tree, &BTreeMap::new()).unwrap();
        assert!(empty.params.get("embedding").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(empty.params.get("gat.0.weight"), src.params.get("gat.0.weight"));

        // Destination with one extra leaf joint.
        let mut names = tree.names().to_vec();
        names.push("left_hand".into());
        let mut parents = tree.parents().to_vec();
        parents.push(Some(20));
        let mut offsets = tree.offsets().to_vec();
        offsets.push(Vector3::new(0.08, -0.01, 0.0));
        let dst = KinematicTree::new("smpl23", names, parents, offsets, tree.up()).unwrap();
        let out = transfer_embeddings(&src, &tree, &dst, &ident).unwrap();
        let (e_src, e_dst) = (src.params.get("embedding").unwrap(), out.params.get("embedding").unwrap());
        let f = src.config.hidden;
        assert_eq!(&e_dst.data()[..22 * f], e_src.data());
        assert!(e_dst.data()[22 * f..].iter().all(|&v| v == 0.0));

        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), "pelvis".to_string());
        assert!(matches!(transfer_embeddings(&src, &tree, &dst, &bad), Err(Error::UnknownJoint(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let tree = smpl_rig();
        for arch in [Arch::Gat, Arch::Mlp] {
            let m = Model::<f32>::new(ModelConfig { arch, ..ModelConfig::preset(Preset::Tiny) }, &tree, 25).unwrap();
            let bytes = m.to_checkpoint().to_bytes();
            let ck = Checkpoint::from_bytes(&bytes).unwrap();
            let back = Model::from_checkpoint(&ck, &tree).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        }
        let m = Model::<f32>::new(ModelConfig::preset(Preset::Tiny), &tree, 25).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let other = chain(22);
        assert!(matches!(Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &other), Err(Error::RigMismatch(_))));
    }

    #[test]
    fn rest_pose_predictor_and_no_decay_set() {
        let tree = smpl_rig();
        let p = RestPosePredictor::new(&tree).unwrap();
        let out = p.predict(&vec![0.0; 2 * 22 * 3], 2).unwrap();
        assert_eq!(out.len(), 2 * 22 * 9);
        let m = Model::<f32>::new(ModelConfig::preset(Preset::Tiny), &tree, 0).unwrap();
        let exempt: Vec<&str> = m.params.params().iter().filter(|p| !p.decay).map(|p| p.name.as_str()).collect();
        assert_eq!(exempt, vec!["embedding", "gat.0.norm.gain", "gat.0.norm.bias", "gat.1.norm.gain", "gat.1.norm.bias", "head.bias"]);
    }
}
