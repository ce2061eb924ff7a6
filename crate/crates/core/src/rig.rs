//! Kinematic tree definition, rig file I/O and per-rig rest-pose bone frames.
//!
//! Joints are stored in parent-first order: every non-root joint refers to a
//! parent with a strictly smaller index, and joint 0 is the single root. The
//! rest-pose bone frames computed here are fixed per rig and do not depend on
//! the observed motion.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative collinearity threshold for the Gram-Schmidt step: the reference
/// is rejected when the orthogonal residual is below this fraction of its norm.
/// The bundled 22-joint body rig in rig JSON format.
pub const SMPL22_JSON: &str = include_str!("../fixtures/smpl22.json");

pub const COLLINEARITY_THRESHOLD: f64 = 1e-6;

const UP_NORM_TOLERANCE: f64 = 1e-6;
const TIE_TOLERANCE: f64 = 1e-9;

/// Static skeleton: topology, rest offsets, joint names and the global up axis.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicTree {
    name: String,
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
    up: Vector3<f64>,
    children: Vec<Vec<usize>>,
}

impl KinematicTree {
    /// Builds and validates a tree. `parents[0]` must be `None`; every other
    /// joint must name an earlier joint as parent.
    pub fn new(
        name: impl Into<String>,
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::Empty("rig has no joints"));
        }
        if parents.len() != n || offsets.len() != n {
            return Err(Error::Invalid(format!(
                "rig arrays disagree: {} names, {} parents, {} offsets",
                n,
                parents.len(),
                offsets.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, joint) in names.iter().enumerate() {
            if seen.insert(joint.as_str(), i).is_some() {
                return Err(Error::topology(joint, "duplicate joint name"));
            }
        }
        if parents[0].is_some() {
            return Err(Error::topology(&names[0], "first joint must be the root"));
        }
        if offsets[0].norm() != 0.0 {
            return Err(Error::topology(&names[0], "root offset must be zero"));
        }
        for i in 1..n {
            match parents[i] {
                None => return Err(Error::topology(&names[i], "multiple roots")),
                Some(p) if p == i => return Err(Error::topology(&names[i], "cycle: joint is its own parent")),
                Some(p) if p > i => {
                    return Err(Error::topology(&names[i], "parent-first order violated"))
                }
                Some(_) => {}
            }
            let len = offsets[i].norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::topology(&names[i], "zero-length bone"));
            }
        }
        if !((up.norm() - 1.0).abs() <= UP_NORM_TOLERANCE) {
            return Err(Error::Invalid(format!("up vector must be unit length, got norm {}", up.norm())));
        }

        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        Ok(Self { name: name.into(), names, parents, offsets, up, children })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn offset(&self, i: usize) -> Vector3<f64> {
        self.offsets[i]
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn up(&self) -> Vector3<f64> {
        self.up
    }

    pub fn index_of(&self, joint: &str) -> Option<usize> {
        self.names.iter().position(|n| n == joint)
    }

    /// Number of edges between joint `i` and the root.
    pub fn depth(&self, i: usize) -> usize {
        let mut d = 0;
        let mut j = i;
        while let Some(p) = self.parents[j] {
            d += 1;
            j = p;
        }
        d
    }

    /// Joints on the path from the root to `i`, root first, `i` last.
    pub fn path_from_root(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut j = i;
        while let Some(p) = self.parents[j] {
            path.push(p);
            j = p;
        }
        path.reverse();
        path
    }

    /// All strict descendants of `i` in index order.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.children[i].iter().rev().copied().collect();
        while let Some(j) = stack.pop() {
            out.push(j);
            stack.extend(self.children[j].iter().rev());
        }
        out.sort_unstable();
        out
    }

    /// Rest-pose joint positions with the root at the origin.
    pub fn rest_positions(&self) -> Vec<Vector3<f64>> {
        let mut pos = vec![Vector3::zeros(); self.joint_count()];
        for i in 1..self.joint_count() {
            let p = self.parents[i].expect("validated");
            pos[i] = pos[p] + self.offsets[i];
        }
        pos
    }

    /// Serializes to the rig JSON format.
    pub fn to_json(&self) -> String {
        let file = RigFile {
            name: self.name.clone(),
            up: [self.up.x, self.up.y, self.up.z],
            joints: (0..self.joint_count())
                .map(|i| RigJoint {
                    name: self.names[i].clone(),
                    parent: self.parents[i].map(|p| self.names[p].clone()),
                    offset: [self.offsets[i].x, self.offsets[i].y, self.offsets[i].z],
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("rig serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    name: String,
    up: [f64; 3],
    joints: Vec<RigJoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigJoint {
    name: String,
    parent: Option<String>,
    offset: [f64; 3],
}

/// Parses and validates rig JSON. Joint order in the file is preserved.
pub fn load_rig(text: &str) -> Result<KinematicTree> {
    let file: RigFile = serde_json::from_str(text)?;
    let mut index = HashMap::new();
    let mut names = Vec::with_capacity(file.joints.len());
    let mut parents = Vec::with_capacity(file.joints.len());
    let mut offsets = Vec::with_capacity(file.joints.len());
    let all: HashMap<&str, usize> =
        file.joints.iter().enumerate().map(|(i, j)| (j.name.as_str(), i)).collect();

    for (i, joint) in file.joints.iter().enumerate() {
        let parent = match &joint.parent {
            None => None,
            Some(pname) => match index.get(pname.as_str()) {
                Some(&p) => Some(p),
                None if pname == &joint.name => {
                    return Err(Error::topology(&joint.name, "cycle: joint is its own parent"))
                }
                None if all.contains_key(pname.as_str()) => {
                    return Err(Error::topology(&joint.name, "parent-first order violated"))
                }
                None => {
                    return Err(Error::topology(&joint.name, format!("unknown parent '{pname}'")))
                }
            },
        };
        index.insert(joint.name.as_str(), i);
        names.push(joint.name.clone());
        parents.push(parent);
        offsets.push(Vector3::from(joint.offset));
    }
    KinematicTree::new(file.name, names, parents, offsets, Vector3::from(file.up))
}

/// Among the children of `i`, the one whose rest offset points most along
/// `up`; ties go to the longer bone, then to the lower index.
pub fn select_primary_child(tree: &KinematicTree, i: usize) -> Option<usize> {
    let up = tree.up();
    let mut best: Option<(usize, f64, f64)> = None;
    for &c in tree.children(i) {
        let d = tree.offset(c);
        let len = d.norm();
        let align = d.dot(&up) / len;
        best = match best {
            None => Some((c, align, len)),
            Some((b, balign, blen)) => {
                let tie = (align - balign).abs() <= TIE_TOLERANCE;
                if align > balign + TIE_TOLERANCE || (tie && len > blen) {
                    Some((c, align, len))
                } else {
                    Some((b, balign, blen))
                }
            }
        };
    }
    best.map(|(c, _, _)| c)
}

/// Per-joint bone-aligned rest frames `[x̄ ȳ z̄]` and their construction record.
#[derive(Clone, Debug, PartialEq)]
pub struct RestBoneFrames {
    pub frames: Vec<Matrix3<f64>>,
    pub primary_child: Vec<Option<usize>>,
    /// Directed edge `(s, t)` defining each joint's bone axis.
    pub edges: Vec<(usize, usize)>,
    pub fallback_used: Vec<bool>,
}

impl RestBoneFrames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames converted to another precision.
    pub fn frames_as<T: nalgebra::RealField + Copy>(&self) -> Vec<Matrix3<T>> {
        self.frames.iter().map(|m| m.map(|v| nalgebra::convert::<f64, T>(v))).collect()
    }
}

/// Builds the rest-pose bone frames in parent-first order, propagating each
/// parent's y-axis as the twist reference of its children.
pub fn compute_rest_bone_frames(tree: &KinematicTree) -> Result<RestBoneFrames> {
    let n = tree.joint_count();
    if n < 2 {
        return Err(Error::DegenerateFrame(tree.names()[0].clone()));
    }
    let rest = tree.rest_positions();
    let up = tree.up();
    let mut frames = Vec::with_capacity(n);
    let mut primary_child = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    let mut fallback_used = Vec::with_capacity(n);
    let mut y_axes: Vec<Vector3<f64>> = Vec::with_capacity(n);

    for i in 0..n {
        let child = select_primary_child(tree, i);
        let (s, t) = match child {
            Some(c) => (i, c),
            None => (tree.parent(i).expect("non-root leaf"), i),
        };
        let x = (rest[t] - rest[s]).normalize();
        let reference = match tree.parent(i) {
            None => up,
            Some(p) => y_axes[p],
        };
        let (y, fallback) = match orthogonalize(&reference, &x) {
            Some(y) => (y, false),
            None => match orthogonalize(&up, &x) {
                Some(y) => (y, true),
                None => return Err(Error::DegenerateFrame(tree.names()[i].clone())),
            },
        };
        let z = x.cross(&y);
        frames.push(Matrix3::from_columns(&[x, y, z]));
        y_axes.push(y);
        primary_child.push(child);
        edges.push((s, t));
        fallback_used.push(fallback);
    }
    Ok(RestBoneFrames { frames, primary_child, edges, fallback_used })
}

/// Normalized rejection of `r` from unit `x`, or `None` when `r` is
/// (near-)collinear with `x`.
fn orthogonalize(r: &Vector3<f64>, x: &Vector3<f64>) -> Option<Vector3<f64>> {
    let y = r - x * r.dot(x);
    let norm = y.norm();
    if norm < COLLINEARITY_THRESHOLD * r.norm() || norm == 0.0 {
        None
    } else {
        Some(y / norm)
    }
}

/// End effectors and their immediate parents.
pub fn distal_set(tree: &KinematicTree) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    for i in 0..tree.joint_count() {
        if tree.is_leaf(i) {
            set.insert(i);
            if let Some(p) = tree.parent(i) {
                set.insert(p);
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(offsets: &[[f64; 3]], up: [f64; 3]) -> KinematicTree {
        let n = offsets.len();
        KinematicTree::new(
            "chain",
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| i.checked_sub(1)).collect(),
            offsets.iter().map(|o| Vector3::from(*o)).collect(),
            Vector3::from(up),
        )
        .unwrap()
    }

    #[test]
    fn minimal_rig_loads() {
        let text = r#"{"name":"m","up":[0,1,0],"joints":[
            {"name":"root","parent":null,"offset":[0,0,0]},
            {"name":"child","parent":"root","offset":[0,1,0]}]}"#;
        let tree = load_rig(text).unwrap();
        assert_eq!(tree.joint_count(), 2);
        assert_eq!(tree.parent(1), Some(0));
    }

    #[test]
    fn forward_parent_reference_is_rejected() {
        let text = r#"{"name":"m","up":[0,1,0],"joints":[
            {"name":"a","parent":null,"offset":[0,0,0]},
            {"name":"b","parent":"a","offset":[0,1,0]},
            {"name":"c","parent":"b","offset":[0,1,0]},
            {"name":"d","parent":"f","offset":[0,1,0]},
            {"name":"e","parent":"a","offset":[1,0,0]},
            {"name":"f","parent":"a","offset":[-1,0,0]}]}"#;
        let err = load_rig(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parent-first order violated"), "{msg}");
        assert!(msg.contains("'d'"), "{msg}");
    }

    #[test]
    fn topology_errors() {
        let bad_root = r#"{"name":"m","up":[0,1,0],"joints":[
            {"name":"a","parent":null,"offset":[0,0,0]},
            {"name":"b","parent":null,"offset":[0,1,0]}]}"#;
        assert!(load_rig(bad_root).unwrap_err().to_string().contains("multiple roots"));
        let zero = r#"{"name":"m","up":[0,1,0],"joints":[
            {"name":"a","parent":null,"offset":[0,0,0]},
            {"name":"b","parent":"a","offset":[0,0,0]}]}"#;
        assert!(load_rig(zero).unwrap_err().to_string().contains("zero-length bone"));
        let cyc = r#"{"name":"m","up":[0,1,0],"joints":[
            {"name":"a","parent":null,"offset":[0,0,0]},
            {"name":"b","parent":"b","offset":[0,1,0]}]}"#;
        assert!(load_rig(cyc).unwrap_err().to_string().contains("cycle"));
        let unknown_field = r#"{"name":"m","up":[0,1,0],"extra":1,"joints":[]}"#;
        assert!(matches!(load_rig(unknown_field), Err(Error::Parse(_))));
    }

    #[test]
    fn primary_child_prefers_up_then_length() {
        let tree = KinematicTree::new(
            "t",
            vec!["pelvis".into(), "left_hip".into(), "spine1".into()],
            vec![None, Some(0), Some(0)],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)],
            Vector3::y(),
        )
        .unwrap();
        assert_eq!(select_primary_child(&tree, 0), Some(2));
        assert_eq!(select_primary_child(&tree, 1), None);

        let tie = KinematicTree::new(
            "t",
            vec!["r".into(), "a".into(), "b".into(), "c".into()],
            vec![None, Some(0), Some(0), Some(0)],
            vec![
                Vector3::zeros(),
                Vector3::new(0.5, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            Vector3::y(),
        )
        .unwrap();
        assert_eq!(select_primary_child(&tie, 0), Some(2));
    }

    #[test]
    fn single_bone_frame() {
        let tree = chain(&[[0.0; 3], [0.0, 1.0, 0.0]], [0.0, 0.0, 1.0]);
        let f = compute_rest_bone_frames(&tree).unwrap();
        let expect = Matrix3::from_columns(&[Vector3::y(), Vector3::z(), Vector3::x()]);
        assert!((f.frames[0] - expect).norm() < 1e-15);
        assert!((f.frames[1] - expect).norm() < 1e-15);
        assert_eq!(f.edges, vec![(0, 1), (0, 1)]);
    }

    #[test]
    fn bone_along_up_is_degenerate() {
        let tree = chain(&[[0.0; 3], [0.0, 0.0, 2.0]], [0.0, 0.0, 1.0]);
        assert!(matches!(compute_rest_bone_frames(&tree), Err(Error::DegenerateFrame(_))));
    }

    #[test]
    fn fallback_is_recorded() {
        // The second bone lies along the first joint's propagated y axis.
        let tree = chain(&[[0.0; 3], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]], [0.0, 1.0, 0.0]);
        let f = compute_rest_bone_frames(&tree).unwrap();
        assert_eq!(f.fallback_used, vec![false, true, false]);
        for m in &f.frames {
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn distal_sets() {
        let c = chain(&[[0.0; 3], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]], [0.0, 0.0, 1.0]);
        assert_eq!(distal_set(&c).into_iter().collect::<Vec<_>>(), vec![1, 2]);
        let star = KinematicTree::new(
            "s",
            vec!["r".into(), "a".into(), "b".into(), "c".into()],
            vec![None, Some(0), Some(0), Some(0)],
            vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
            Vector3::y(),
        )
        .unwrap();
        assert_eq!(distal_set(&star).into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn json_round_trip() {
        let tree = chain(&[[0.0; 3], [0.1, 0.25, -0.3], [0.0, 1.0 / 3.0, 0.0]], [0.0, 1.0, 0.0]);
        let text = tree.to_json();
        let back = load_rig(&text).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.to_json(), text);
    }
}
