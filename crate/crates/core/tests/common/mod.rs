#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use boneik::rig::KinematicTree;
use nalgebra::Vector3;

pub const BIN: &str = env!("CARGO_BIN_EXE_boneik");

/// Root, spine, head, arm, hand; the arm branches off the spine.
pub fn five_joint() -> KinematicTree {
    KinematicTree::new(
        "five",
        ["root", "spine", "head", "arm", "hand"].iter().map(|s| s.to_string()).collect(),
        vec![None, Some(0), Some(1), Some(1), Some(3)],
        vec![
            Vector3::zeros(),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(0.0, 0.3, 0.1),
            Vector3::new(0.4, 0.1, 0.0),
            Vector3::new(0.3, -0.1, 0.05),
        ],
        Vector3::z(),
    )
    .expect("fixture rig is valid")
}

pub fn run_cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = run_cli(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Derivative-free minimizer over `D` parameters with the standard
/// reflection/expansion/contraction/shrink moves.
pub fn nelder_mead<const D: usize>(f: &dyn Fn(&[f64; D]) -> f64, start: [f64; D], scale: f64, iters: usize) -> [f64; D] {
    let mut simplex: Vec<[f64; D]> = vec![start];
    for i in 0..D {
        let mut p = start;
        p[i] += scale;
        simplex.push(p);
    }
    let mut vals: Vec<f64> = simplex.iter().map(f).collect();
    for _ in 0..iters {
        let mut idx: Vec<usize> = (0..=D).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i]).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let mut c = [0.0; D];
        for p in &simplex[..D] {
            for k in 0..D {
                c[k] += p[k] / D as f64;
            }
        }
        let worst = simplex[D];
        let lerp = |t: f64| {
            let mut r = [0.0; D];
            for k in 0..D {
                r[k] = c[k] + t * (worst[k] - c[k]);
            }
            r
        };
        let xr = lerp(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = lerp(-2.0);
            let fe = f(&xe);
            (simplex[D], vals[D]) = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < vals[D - 1] {
            (simplex[D], vals[D]) = (xr, fr);
        } else {
            let xc = if fr < vals[D] { lerp(-0.5) } else { lerp(0.5) };
            let fc = f(&xc);
            if fc < vals[D].min(fr) {
                (simplex[D], vals[D]) = (xc, fc);
            } else {
                for i in 1..=D {
                    for k in 0..D {
                        simplex[i][k] = simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]);
                    }
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=D).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty simplex");
    simplex[best]
}
