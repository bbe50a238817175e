//! Kinematic tree and forward kinematics.
//!
//! Joint rotations are local unit quaternions. A joint's world position is its
//! parent's world position plus the parent's global rotation applied to the
//! joint's rest offset, so a joint's own rotation only moves its descendants.
//! Axes: x forward, y left, z up.

use glam::{DQuat, DVec3};

use crate::error::{CoreError, Result};

/// Tolerance on `|q| - 1` accepted by [`forward_kinematics`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parent_index: Vec<i32>,
    bone_offset: Vec<DVec3>,
    names: Vec<String>,
}

impl Skeleton {
    /// Builds a skeleton; parents must precede children so that index order
    /// is a valid tree order.
    pub fn new(parent_index: Vec<i32>, bone_offset: Vec<DVec3>, names: Vec<String>) -> Result<Self> {
        let j = parent_index.len();
        if j < 2 {
            return Err(CoreError::Validation(format!("skeleton needs at least 2 joints, got {j}")));
        }
        if bone_offset.len() != j || names.len() != j {
            return Err(CoreError::Validation("parent, offset and name lists differ in length".into()));
        }
        if parent_index[0] != -1 {
            return Err(CoreError::Validation("joint 0 must be the root".into()));
        }
        if bone_offset[0] != DVec3::ZERO {
            return Err(CoreError::Validation("root bone offset must be zero".into()));
        }
        for (i, &p) in parent_index.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(CoreError::Validation(format!("joint {i} has parent {p}; parents must precede children")));
            }
        }
        if bone_offset.iter().any(|o| !o.is_finite()) {
            return Err(CoreError::Validation("non-finite bone offset".into()));
        }
        Ok(Self { parent_index, bone_offset, names })
    }

    /// The 9-joint desk skeleton: pelvis, two hip-foot legs, two shoulder-hand arms.
    pub fn desk() -> Self {
        let parents = vec![-1, 0, 1, 0, 3, 0, 5, 0, 7];
        let offsets = vec![
            DVec3::ZERO,
            DVec3::new(0.0, 0.1, 0.0),
            DVec3::new(0.0, 0.0, -0.88),
            DVec3::new(0.0, -0.1, 0.0),
            DVec3::new(0.0, 0.0, -0.88),
            DVec3::new(0.0, 0.2, 0.5),
            DVec3::new(0.0, 0.0, -0.6),
            DVec3::new(0.0, -0.2, 0.5),
            DVec3::new(0.0, 0.0, -0.6),
        ];
        let names = ["pelvis", "l_hip", "l_foot", "r_hip", "r_foot", "l_shoulder", "l_hand", "r_shoulder", "r_hand"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Self::new(parents, offsets, names).expect("desk skeleton is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.parent_index.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        let p = self.parent_index[j];
        (p >= 0).then_some(p as usize)
    }

    pub fn parents(&self) -> &[i32] {
        &self.parent_index
    }

    pub fn offsets(&self) -> &[DVec3] {
        &self.bone_offset
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn joint(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rest-pose bone lengths (zero for the root).
    pub fn bone_lengths(&self) -> Vec<f64> {
        self.bone_offset.iter().map(|o| o.length()).collect()
    }
}

/// Flips a quaternion into the `w >= 0` hemisphere.
pub fn canonical(q: DQuat) -> DQuat {
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// World positions for every frame. `joint_rotations[t][j]` is joint `j`'s
/// local rotation at frame `t`.
pub fn forward_kinematics(skeleton: &Skeleton, root_position: &[DVec3], joint_rotations: &[Vec<DQuat>]) -> Result<Vec<Vec<DVec3>>> {
    let j = skeleton.num_joints();
    if root_position.len() != joint_rotations.len() {
        return Err(CoreError::Validation(format!("{} root positions but {} rotation frames", root_position.len(), joint_rotations.len())));
    }
    let mut out = Vec::with_capacity(root_position.len());
    let mut global = vec![DQuat::IDENTITY; j];
    for (t, (root, rots)) in root_position.iter().zip(joint_rotations).enumerate() {
        if rots.len() != j {
            return Err(CoreError::Validation(format!("frame {t} has {} rotations, expected {j}", rots.len())));
        }
        for (ji, q) in rots.iter().enumerate() {
            if !q.is_finite() || (q.length() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(CoreError::Validation(format!(
                    "rotation of joint {ji} at frame {t} is not a unit quaternion (|q| = {})",
                    q.length()
                )));
            }
        }
        let mut pos = vec![DVec3::ZERO; j];
        pos[0] = *root;
        global[0] = canonical(rots[0]);
        for ji in 1..j {
            let p = skeleton.parent_index[ji] as usize;
            pos[ji] = pos[p] + global[p] * skeleton.bone_offset[ji];
            global[ji] = canonical(global[p] * rots[ji]);
        }
        out.push(pos);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn chain2() -> Skeleton {
        Skeleton::new(vec![-1, 0], vec![DVec3::ZERO, DVec3::new(1.0, 0.0, 0.0)], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn identity_chain() {
        let p = forward_kinematics(&chain2(), &[DVec3::ZERO], &[vec![DQuat::IDENTITY; 2]]).unwrap();
        assert!((p[0][1] - DVec3::X).length() < 1e-15);
    }

    #[test]
    fn root_half_turn() {
        let q = DQuat::from_rotation_z(PI);
        let p = forward_kinematics(&chain2(), &[DVec3::ZERO], &[vec![q, DQuat::IDENTITY]]).unwrap();
        assert!((p[0][1] - DVec3::new(-1.0, 0.0, 0.0)).length() < 1e-12);
    }

    #[test]
    fn rejects_non_unit() {
        let q = DQuat::from_xyzw(0.0, 0.0, 0.0, 1.0 + 1e-5);
        assert!(forward_kinematics(&chain2(), &[DVec3::ZERO], &[vec![q, DQuat::IDENTITY]]).is_err());
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let s = Skeleton::desk();
        let p = forward_kinematics(&s, &[DVec3::ZERO], &[vec![DQuat::IDENTITY; 9]]).unwrap();
        for j in 0..9 {
            let mut expect = DVec3::ZERO;
            let mut k = j;
            while let Some(par) = s.parent(k) {
                expect += s.offsets()[k];
                k = par;
            }
            assert!((p[0][j] - expect).length() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_trees() {
        assert!(Skeleton::new(vec![-1], vec![DVec3::ZERO], vec!["a".into()]).is_err());
        assert!(Skeleton::new(vec![-1, 1], vec![DVec3::ZERO, DVec3::X], vec!["a".into(), "b".into()]).is_err());
        assert!(Skeleton::new(vec![-1, 0], vec![DVec3::X, DVec3::X], vec!["a".into(), "b".into()]).is_err());
    }
}
