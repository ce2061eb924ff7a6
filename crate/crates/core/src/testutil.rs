use crate::rig::{load_rig, KinematicTree};

pub fn smpl_rig() -> KinematicTree {
    load_rig(crate::rig::SMPL22_JSON).expect("fixture rig is valid")
}
