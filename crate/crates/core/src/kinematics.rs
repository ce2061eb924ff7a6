//! Forward kinematics, the bone-aligned world representation and its exact
//! recovery back to parent-relative local rotations.
//!
//! Everything is generic over the scalar so the same code runs in single
//! precision (deployment) and double precision (reference).

use nalgebra::{Matrix3, RealField, Vector3};

use crate::rig::{KinematicTree, RestBoneFrames};

/// One pose viewed as local rotations, world rotations, optional
/// bone-aligned rotations and root-space joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePose<T: RealField + Copy> {
    pub local: Vec<Matrix3<T>>,
    pub world: Vec<Matrix3<T>>,
    pub bone: Option<Vec<Matrix3<T>>>,
    pub positions: Vec<Vector3<T>>,
}

impl<T: RealField + Copy> FramePose<T> {
    /// Fills in the bone-aligned view.
    pub fn with_bone(mut self, frames: &[Matrix3<T>]) -> Self {
        self.bone = Some(bone_from_world(&self.world, frames));
        self
    }
}

fn offsets_as<T: RealField + Copy>(tree: &KinematicTree) -> Vec<Vector3<T>> {
    tree.offsets().iter().map(|o| o.map(|v| nalgebra::convert::<f64, T>(v))).collect()
}

/// World rotations by recursive composition in parent-first order.
pub fn world_from_local<T: RealField + Copy>(tree: &KinematicTree, locals: &[Matrix3<T>]) -> Vec<Matrix3<T>> {
    let mut world: Vec<Matrix3<T>> = Vec::with_capacity(locals.len());
    for (i, l) in locals.iter().enumerate() {
        let w = match tree.parent(i) {
            None => *l,
            Some(p) => world[p] * l,
        };
        world.push(w);
    }
    world
}

/// Root-space joint positions from world rotations; the root sits at the origin.
pub fn positions_from_world<T: RealField + Copy>(tree: &KinematicTree, world: &[Matrix3<T>]) -> Vec<Vector3<T>> {
    let offsets = offsets_as::<T>(tree);
    let mut pos: Vec<Vector3<T>> = Vec::with_capacity(world.len());
    for i in 0..world.len() {
        let p = match tree.parent(i) {
            None => Vector3::zeros(),
            Some(p) => pos[p] + world[p] * offsets[i],
        };
        pos.push(p);
    }
    pos
}

/// Forward kinematics from local rotations.
pub fn fk<T: RealField + Copy>(tree: &KinematicTree, locals: &[Matrix3<T>]) -> FramePose<T> {
    assert_eq!(locals.len(), tree.joint_count(), "one local rotation per joint");
    let world = world_from_local(tree, locals);
    let positions = positions_from_world(tree, &world);
    FramePose { local: locals.to_vec(), world, bone: None, positions }
}

/// `R_bone(i) = R_w(i) · B_rest(i)`.
pub fn bone_from_world<T: RealField + Copy>(world: &[Matrix3<T>], frames: &[Matrix3<T>]) -> Vec<Matrix3<T>> {
    world.iter().zip(frames).map(|(w, b)| w * b).collect()
}

/// `R_w(i) = R_bone(i) · B_rest(i)ᵀ`.
pub fn recover_world<T: RealField + Copy>(bone: &[Matrix3<T>], frames: &[Matrix3<T>]) -> Vec<Matrix3<T>> {
    bone.iter().zip(frames).map(|(r, b)| r * b.transpose()).collect()
}

/// Parent-relative local rotations from world rotations.
pub fn recover_local<T: RealField + Copy>(world: &[Matrix3<T>], tree: &KinematicTree) -> Vec<Matrix3<T>> {
    (0..world.len())
        .map(|i| match tree.parent(i) {
            None => world[i],
            Some(p) => world[p].transpose() * world[i],
        })
        .collect()
}

/// Bone-aligned rotations straight to local rotations.
pub fn locals_from_bone<T: RealField + Copy>(
    bone: &[Matrix3<T>],
    frames: &[Matrix3<T>],
    tree: &KinematicTree,
) -> Vec<Matrix3<T>> {
    recover_local(&recover_world(bone, frames), tree)
}

/// Maximum and mean Frobenius error of the round trip
/// locals → world → bone → world → locals, run entirely in precision `T`
/// and compared against the double-precision inputs.
pub fn roundtrip_report<T: RealField + Copy>(
    tree: &KinematicTree,
    frames: &RestBoneFrames,
    dataset: &[Vec<Matrix3<f64>>],
) -> (f64, f64) {
    assert!(!dataset.is_empty(), "round-trip report needs at least one frame");
    let rest: Vec<Matrix3<T>> = frames.frames_as::<T>();
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for locals in dataset {
        let cast: Vec<Matrix3<T>> = locals.iter().map(|m| m.map(|v| nalgebra::convert::<f64, T>(v))).collect();
        let world = world_from_local(tree, &cast);
        let bone = bone_from_world(&world, &rest);
        let back = locals_from_bone(&bone, &rest, tree);
        for (orig, rec) in locals.iter().zip(&back) {
            let rec64: Matrix3<f64> = rec.map(|v| nalgebra::try_convert::<T, f64>(v).expect("finite"));
            let err = (orig - rec64).norm();
            max = max.max(err);
            sum += err;
            count += 1;
        }
    }
    (max, sum / count as f64)
}

/// World-space joint positions `J̃(i) + t`.
pub fn apply_root_translation<T: RealField + Copy>(positions: &[Vector3<T>], t: &Vector3<T>) -> Vec<Vector3<T>> {
    positions.iter().map(|p| p + t).collect()
}

/// Splits world-space positions into root-space positions and the root translation.
pub fn to_root_space<T: RealField + Copy>(positions: &[Vector3<T>]) -> (Vec<Vector3<T>>, Vector3<T>) {
    let t = positions[0];
    (positions.iter().map(|p| p - t).collect(), t)
}
