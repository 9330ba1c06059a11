//! Skeleton topology, ancestor relations, the continuous 6D rotation
//! representation, and forward kinematics.
//!
//! Joints are stored in topological order (every parent precedes its
//! children), which makes ancestor walks and FK single forward passes.
//! All types here are immutable after construction and all functions are
//! pure, so they are safe to share across workers.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};

/// A joint rotation as the first two columns of its rotation matrix,
/// flattened column-major: `(c1.x, c1.y, c1.z, c2.x, c2.y, c2.z)`.
///
/// Decoding via Gram–Schmidt recovers an orthonormal matrix with
/// determinant +1; the representation is continuous, unlike Euler angles
/// or quaternions.
pub type Rotation6D = [f64; 6];

/// The identity rotation in 6D form.
pub const ROT6D_IDENTITY: Rotation6D = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// A validated kinematic tree.
///
/// `parent_index[0] == -1` and `parent_index[j] < j` for all `j > 0`,
/// so index order is a topological order and there is exactly one root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent_index: Vec<i64>,
    rest_offsets: Vec<[f64; 3]>,
    toe_joint_ids: Vec<usize>,
}

impl SkeletonTopology {
    /// Builds and validates a topology.
    ///
    /// `toe_names` are resolved to joint indices by exact name match and
    /// must refer to leaf joints.
    pub fn new(
        names: Vec<String>,
        parents: Vec<i64>,
        offsets: Vec<[f64; 3]>,
        toe_names: &[String],
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Topology("skeleton must have at least one joint".into()));
        }
        if names.len() != parents.len() || names.len() != offsets.len() {
            return Err(Error::Topology(format!(
                "name/parent/offset lengths differ: {}/{}/{}",
                names.len(),
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0] != -1 {
            return Err(Error::Topology("joint 0 must be the root (parent -1)".into()));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p == -1 {
                return Err(Error::Topology(format!("joint {j} is a second root")));
            }
            if p < 0 || p as usize >= j {
                return Err(Error::Topology(format!(
                    "joint {j} has cyclic or forward parent reference {p}"
                )));
            }
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::Topology(format!("duplicate joint name {n:?}")));
            }
        }

        let mut topo = SkeletonTopology {
            joint_names: names,
            parent_index: parents,
            rest_offsets: offsets,
            toe_joint_ids: Vec::new(),
        };
        let mut toes = Vec::with_capacity(toe_names.len());
        for name in toe_names {
            let id = topo
                .joint_index(name)
                .ok_or_else(|| Error::Config(format!("unknown toe joint name {name:?}")))?;
            if !topo.is_leaf(id) {
                return Err(Error::Topology(format!("toe joint {name:?} is not a leaf")));
            }
            toes.push(id);
        }
        topo.toe_joint_ids = toes;
        Ok(topo)
    }

    /// Number of joints `J`.
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Raw parent list, `-1` for the root.
    pub fn parent_index(&self) -> &[i64] {
        &self.parent_index
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        match self.parent_index[j] {
            -1 => None,
            p => Some(p as usize),
        }
    }

    /// Bone offset of `j` from its parent, in meters.
    pub fn rest_offset(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.rest_offsets[j])
    }

    pub fn rest_offsets(&self) -> &[[f64; 3]] {
        &self.rest_offsets
    }

    pub fn toe_joint_ids(&self) -> &[usize] {
        &self.toe_joint_ids
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        !self.parent_index.iter().any(|&p| p == j as i64)
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.num_joints()).filter(|&c| self.parent_index[c] == j as i64).collect()
    }

    /// Strict ancestors of joint `j` (walk to the root, excluding `j`).
    pub fn ancestors(&self, j: usize) -> Result<HashSet<usize>> {
        if j >= self.num_joints() {
            return Err(Error::Validation(format!(
                "joint index {j} out of range (J = {})",
                self.num_joints()
            )));
        }
        let mut out = HashSet::new();
        let mut cur = j;
        while let Some(p) = self.parent(cur) {
            out.insert(p);
            cur = p;
        }
        Ok(out)
    }

    /// Topological depth per joint: root is 0, children are parent + 1.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.num_joints()];
        for j in 1..self.num_joints() {
            d[j] = d[self.parent(j).expect("non-root joint has a parent")] + 1;
        }
        d
    }
}

/// Attention visibility over the `J + 1` token axis (root-position token
/// first, then one token per joint).
///
/// `allowed(q, k)` is true iff query token `q` may attend to key token `k`:
/// joint tokens see themselves, their strict ancestors, and the
/// root-position token; the root-position token sees only itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AncestorMask {
    allowed: Vec<Vec<bool>>,
}

impl AncestorMask {
    /// Builds the mask for a topology.
    pub fn from_topology(topo: &SkeletonTopology) -> Result<Self> {
        let j = topo.num_joints();
        let n = j + 1;
        let mut allowed = vec![vec![false; n]; n];
        allowed[0][0] = true;
        for q in 0..j {
            let anc = topo.ancestors(q)?;
            allowed[q + 1][0] = true;
            allowed[q + 1][q + 1] = true;
            for k in anc {
                allowed[q + 1][k + 1] = true;
            }
        }
        Ok(AncestorMask { allowed })
    }

    /// Token-axis length `J + 1`.
    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q][k]
    }

    /// Additive attention bias: 0 where allowed, `-inf` where masked.
    pub fn to_additive(&self) -> ndarray::Array2<f64> {
        let n = self.len();
        ndarray::Array2::from_shape_fn((n, n), |(q, k)| {
            if self.allowed[q][k] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }
}

/// Decodes a 6D rotation via Gram–Schmidt.
///
/// `c1 = normalize(v[0:3])`, `c2 = normalize(v[3:6] - (c1·v[3:6]) c1)`,
/// `c3 = c1 × c2`; the columns `(c1, c2, c3)` form the rotation matrix.
pub fn rot6d_to_matrix(v: &Rotation6D) -> Result<Matrix3<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite 6D components".into()));
    }
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if na < 1e-9 {
        return Err(Error::DegenerateRotation("first column is (near) zero".into()));
    }
    let c1 = a / na;
    let proj = b - c1 * c1.dot(&b);
    let np = proj.norm();
    if np < 1e-9 {
        return Err(Error::DegenerateRotation(
            "second column is (near) parallel to the first".into(),
        ));
    }
    let c2 = proj / np;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Encodes a rotation matrix as its first two columns.
///
/// `r` must be orthonormal with determinant +1 within `1e-4`.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Result<Rotation6D> {
    let gram = r.transpose() * r;
    let err = (gram - Matrix3::identity()).abs().max();
    if err > 1e-4 || (r.determinant() - 1.0).abs() > 1e-4 {
        return Err(Error::Validation(format!(
            "matrix is not a rotation (orthonormality error {err:.2e}, det {})",
            r.determinant()
        )));
    }
    Ok([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Rotation of `angle` radians about the X axis.
pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation of `angle` radians about the Y axis.
pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation of `angle` radians about the Z axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Global joint positions from root translations and local 6D rotations.
///
/// Column-vector convention with offsets rotated by the parent's global
/// rotation (standard BVH semantics):
/// `global(j) = global(parent) + R_global(parent) · rest_offset(j)` and
/// `R_global(j) = R_global(parent) · R_local(j)`. The root's global
/// position is `root_pos` and its global rotation is its local rotation.
///
/// Shapes: `root_pos` is `F×3`, `joint_rot` is `F×J×6`; returns `F×J×3`.
pub fn forward_kinematics(
    topo: &SkeletonTopology,
    root_pos: ArrayView2<f64>,
    joint_rot: ArrayView3<f64>,
) -> Result<Array3<f64>> {
    let frames = root_pos.shape()[0];
    let j = topo.num_joints();
    if root_pos.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "root_pos must be F x 3, got F x {}",
            root_pos.shape()[1]
        )));
    }
    if joint_rot.shape() != [frames, j, 6] {
        return Err(Error::Shape(format!(
            "joint_rot must be {frames} x {j} x 6, got {:?}",
            joint_rot.shape()
        )));
    }

    let mut out = Array3::zeros((frames, j, 3));
    let mut glob_rot: Vec<Matrix3<f64>> = vec![Matrix3::identity(); j];
    let mut glob_pos: Vec<Vector3<f64>> = vec![Vector3::zeros(); j];
    for f in 0..frames {
        for jj in 0..j {
            let rv: Rotation6D = [
                joint_rot[[f, jj, 0]],
                joint_rot[[f, jj, 1]],
                joint_rot[[f, jj, 2]],
                joint_rot[[f, jj, 3]],
                joint_rot[[f, jj, 4]],
                joint_rot[[f, jj, 5]],
            ];
            let local = rot6d_to_matrix(&rv)?;
            match topo.parent(jj) {
                None => {
                    glob_rot[jj] = local;
                    glob_pos[jj] =
                        Vector3::new(root_pos[[f, 0]], root_pos[[f, 1]], root_pos[[f, 2]]);
                }
                Some(p) => {
                    glob_pos[jj] = glob_pos[p] + glob_rot[p] * topo.rest_offset(jj);
                    glob_rot[jj] = glob_rot[p] * local;
                }
            }
            out[[f, jj, 0]] = glob_pos[jj][0];
            out[[f, jj, 1]] = glob_pos[jj][1];
            out[[f, jj, 2]] = glob_pos[jj][2];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("j{i}")).collect()
    }

    fn chain3() -> SkeletonTopology {
        SkeletonTopology::new(
            names(3),
            vec![-1, 0, 1],
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn minimal_single_joint_topology() {
        let t = SkeletonTopology::new(names(1), vec![-1], vec![[0.0; 3]], &[]).unwrap();
        assert_eq!(t.num_joints(), 1);
        assert!(t.is_leaf(0));
    }

    #[test]
    fn chain_is_valid_and_b_is_leaf() {
        let t = chain3();
        assert!(t.is_leaf(2));
        assert!(!t.is_leaf(1));
    }

    #[test]
    fn tree_with_two_leaves() {
        let t = SkeletonTopology::new(names(4), vec![-1, 0, 1, 1], vec![[0.0; 3]; 4], &[]).unwrap();
        assert!(t.is_leaf(2));
        assert!(t.is_leaf(3));
        // hand-enumerated ancestor sets
        assert_eq!(t.ancestors(0).unwrap(), HashSet::new());
        assert_eq!(t.ancestors(1).unwrap(), HashSet::from([0]));
        assert_eq!(t.ancestors(2).unwrap(), HashSet::from([0, 1]));
        assert_eq!(t.ancestors(3).unwrap(), HashSet::from([0, 1]));
    }

    #[test]
    fn forward_reference_rejected() {
        let e = SkeletonTopology::new(names(3), vec![-1, 2, 1], vec![[0.0; 3]; 3], &[]);
        assert!(matches!(e, Err(Error::Topology(_))));
    }

    #[test]
    fn second_root_rejected() {
        let e = SkeletonTopology::new(names(2), vec![-1, -1], vec![[0.0; 3]; 2], &[]);
        assert!(matches!(e, Err(Error::Topology(_))));
    }

    #[test]
    fn unknown_toe_name_is_config_error() {
        let e = SkeletonTopology::new(
            names(2),
            vec![-1, 0],
            vec![[0.0; 3]; 2],
            &["missing".to_string()],
        );
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn non_leaf_toe_rejected() {
        let e = SkeletonTopology::new(names(3), vec![-1, 0, 1], vec![[0.0; 3]; 3], &["j1".to_string()]);
        assert!(matches!(e, Err(Error::Topology(_))));
    }

    #[test]
    fn ancestors_of_chain_and_root() {
        let t = chain3();
        assert_eq!(t.ancestors(2).unwrap(), HashSet::from([0, 1]));
        assert_eq!(t.ancestors(0).unwrap(), HashSet::new());
        assert!(t.ancestors(3).is_err());
    }

    #[test]
    fn mask_chain_row_for_deepest_joint() {
        let t = chain3();
        let m = AncestorMask::from_topology(&t).unwrap();
        // row for joint 2 (token 3) allows root token and joints 0, 1, 2
        assert_eq!(m.len(), 4);
        assert!((0..4).all(|k| m.allowed(3, k)));
    }

    #[test]
    fn mask_single_joint_exact_entries() {
        let t = SkeletonTopology::new(names(1), vec![-1], vec![[0.0; 3]], &[]).unwrap();
        let m = AncestorMask::from_topology(&t).unwrap();
        let mut allowed = Vec::new();
        for q in 0..2 {
            for k in 0..2 {
                if m.allowed(q, k) {
                    allowed.push((q, k));
                }
            }
        }
        assert_eq!(allowed, vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn mask_star_siblings_blocked() {
        let t = SkeletonTopology::new(names(3), vec![-1, 0, 0], vec![[0.0; 3]; 3], &[]).unwrap();
        let m = AncestorMask::from_topology(&t).unwrap();
        assert!(!m.allowed(2, 3), "joint 1 must not attend joint 2");
        assert!(!m.allowed(3, 2), "joint 2 must not attend joint 1");
        assert!(m.allowed(2, 1) && m.allowed(3, 1), "both attend the root joint");
    }

    #[test]
    fn mask_consistent_with_ancestors_and_nonempty_rows() {
        let t = SkeletonTopology::new(names(6), vec![-1, 0, 1, 1, 0, 4], vec![[0.0; 3]; 6], &[])
            .unwrap();
        let m = AncestorMask::from_topology(&t).unwrap();
        for q in 0..t.num_joints() {
            let anc = t.ancestors(q).unwrap();
            for k in 0..t.num_joints() {
                let expect = k == q || anc.contains(&k);
                assert_eq!(m.allowed(q + 1, k + 1), expect, "joint pair ({q},{k})");
            }
        }
        for q in 0..m.len() {
            assert!((0..m.len()).any(|k| m.allowed(q, k)), "row {q} has no keys");
            assert!(m.allowed(q, q), "diagonal must be allowed");
        }
    }

    #[test]
    fn rot6d_identity_and_z90() {
        let r = rot6d_to_matrix(&ROT6D_IDENTITY).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-12);

        let r = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r, rot_z(std::f64::consts::FRAC_PI_2), epsilon = 1e-12);
    }

    #[test]
    fn rot6d_scale_invariance() {
        let r = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rot6d_degenerate_inputs_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn matrix_to_rot6d_known_values() {
        assert_eq!(
            matrix_to_rot6d(&Matrix3::identity()).unwrap(),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        let v = matrix_to_rot6d(&rot_z(std::f64::consts::FRAC_PI_2)).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_rotation_matrix_rejected() {
        let m = Matrix3::new(2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(matrix_to_rot6d(&m), Err(Error::Validation(_))));
    }

    fn random_rotation(seed: u64) -> Matrix3<f64> {
        use rand::Rng;
        let mut rng = crate::rngs::derive_rng(seed, "test-rotation");
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        )
        .normalize();
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    #[test]
    fn round_trip_random_rotations() {
        for seed in 0..200 {
            let r = random_rotation(seed);
            let v = matrix_to_rot6d(&r).unwrap();
            let back = rot6d_to_matrix(&v).unwrap();
            assert!((back - r).abs().max() < 1e-6, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn decoded_rotations_are_orthonormal(raw in proptest::array::uniform6(-3.0f64..3.0)) {
            if let Ok(r) = rot6d_to_matrix(&raw) {
                let gram = r.transpose() * r;
                prop_assert!((gram - Matrix3::identity()).abs().max() < 1e-6);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
            }
        }
    }

    fn identity_rots(frames: usize, joints: usize) -> Array3<f64> {
        let mut a = Array3::zeros((frames, joints, 6));
        for f in 0..frames {
            for j in 0..joints {
                a[[f, j, 0]] = 1.0;
                a[[f, j, 4]] = 1.0;
            }
        }
        a
    }

    #[test]
    fn fk_straight_chain() {
        let t = chain3();
        let pos = forward_kinematics(&t, Array2::zeros((1, 3)).view(), identity_rots(1, 3).view())
            .unwrap();
        assert_abs_diff_eq!(pos[[0, 0, 1]], 0.0);
        assert_abs_diff_eq!(pos[[0, 1, 1]], 1.0);
        assert_abs_diff_eq!(pos[[0, 2, 1]], 2.0);
    }

    #[test]
    fn fk_root_rotation_bends_chain() {
        let t = chain3();
        let mut rots = identity_rots(1, 3);
        let v = matrix_to_rot6d(&rot_z(std::f64::consts::FRAC_PI_2)).unwrap();
        for (i, x) in v.iter().enumerate() {
            rots[[0, 0, i]] = *x;
        }
        let pos = forward_kinematics(&t, Array2::zeros((1, 3)).view(), rots.view()).unwrap();
        let expect = [[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-2.0, 0.0, 0.0]];
        for (j, e) in expect.iter().enumerate() {
            for k in 0..3 {
                assert_abs_diff_eq!(pos[[0, j, k]], e[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fk_translation_equivariance_is_exact() {
        let t = chain3();
        let rots = identity_rots(2, 3);
        let base = Array2::zeros((2, 3));
        let mut shifted = base.clone();
        for f in 0..2 {
            shifted[[f, 0]] += 1.0;
            shifted[[f, 1]] += 2.0;
            shifted[[f, 2]] += 3.0;
        }
        let a = forward_kinematics(&t, base.view(), rots.view()).unwrap();
        let b = forward_kinematics(&t, shifted.view(), rots.view()).unwrap();
        for f in 0..2 {
            for j in 0..3 {
                assert_eq!(b[[f, j, 0]], a[[f, j, 0]] + 1.0);
                assert_eq!(b[[f, j, 1]], a[[f, j, 1]] + 2.0);
                assert_eq!(b[[f, j, 2]], a[[f, j, 2]] + 3.0);
            }
        }
    }

    /// Independent recursive oracle: each joint's global transform is
    /// recomputed from scratch by walking up the parent chain.
    fn fk_oracle(
        topo: &SkeletonTopology,
        root_pos: &Array2<f64>,
        rots: &Array3<f64>,
    ) -> Array3<f64> {
        fn global(
            topo: &SkeletonTopology,
            f: usize,
            j: usize,
            root_pos: &Array2<f64>,
            rots: &Array3<f64>,
        ) -> (Matrix3<f64>, Vector3<f64>) {
            let v: Rotation6D = std::array::from_fn(|i| rots[[f, j, i]]);
            let local = rot6d_to_matrix(&v).unwrap();
            match topo.parent(j) {
                None => (
                    local,
                    Vector3::new(root_pos[[f, 0]], root_pos[[f, 1]], root_pos[[f, 2]]),
                ),
                Some(p) => {
                    let (pr, pp) = global(topo, f, p, root_pos, rots);
                    (pr * local, pp + pr * topo.rest_offset(j))
                }
            }
        }
        let (frames, joints) = (root_pos.shape()[0], topo.num_joints());
        let mut out = Array3::zeros((frames, joints, 3));
        for f in 0..frames {
            for j in 0..joints {
                let (_, p) = global(topo, f, j, root_pos, rots);
                for k in 0..3 {
                    out[[f, j, k]] = p[k];
                }
            }
        }
        out
    }

    fn random_tree(seed: u64, joints: usize) -> SkeletonTopology {
        use rand::Rng;
        let mut rng = crate::rngs::derive_rng(seed, "test-tree");
        let mut parents = vec![-1i64];
        for j in 1..joints {
            parents.push(rng.random_range(0..j) as i64);
        }
        let offsets = (0..joints)
            .map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        SkeletonTopology::new(names(joints), parents, offsets, &[]).unwrap()
    }

    #[test]
    fn fk_matches_recursive_oracle_on_random_trees() {
        for seed in 0..20 {
            let topo = random_tree(seed, 8);
            let frames = 3;
            let root: Array2<f64> =
                Array2::from_shape_fn((frames, 3), |(f, k)| (f as f64) * 0.1 + k as f64);
            let mut rots = Array3::zeros((frames, 8, 6));
            for f in 0..frames {
                for j in 0..8 {
                    let r = random_rotation(seed * 1000 + (f * 8 + j) as u64);
                    let v = matrix_to_rot6d(&r).unwrap();
                    for (i, x) in v.iter().enumerate() {
                        rots[[f, j, i]] = *x;
                    }
                }
            }
            let fast = forward_kinematics(&topo, root.view(), rots.view()).unwrap();
            let slow = fk_oracle(&topo, &root, &rots);
            let diff = (&fast - &slow).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-6, "seed {seed}: max diff {diff}");
        }
    }

    #[test]
    fn fk_rotation_equivariance() {
        let t = chain3();
        let q = rot_y(0.7);
        let frames = 2;
        let root = Array2::from_shape_fn((frames, 3), |(f, k)| f as f64 * 0.3 + k as f64 * 0.2);
        let mut rots = identity_rots(frames, 3);
        for f in 0..frames {
            let r = random_rotation(f as u64 + 99);
            let v = matrix_to_rot6d(&r).unwrap();
            for (i, x) in v.iter().enumerate() {
                rots[[f, 0, i]] = *x;
            }
        }
        // pre-rotate root rotation and positions by Q
        let mut rots_q = rots.clone();
        let mut root_q = root.clone();
        for f in 0..frames {
            let v: Rotation6D = std::array::from_fn(|i| rots[[f, 0, i]]);
            let rq = q * rot6d_to_matrix(&v).unwrap();
            let vq = matrix_to_rot6d(&rq).unwrap();
            for (i, x) in vq.iter().enumerate() {
                rots_q[[f, 0, i]] = *x;
            }
            let p = q * Vector3::new(root[[f, 0]], root[[f, 1]], root[[f, 2]]);
            for k in 0..3 {
                root_q[[f, k]] = p[k];
            }
        }
        let a = forward_kinematics(&t, root.view(), rots.view()).unwrap();
        let b = forward_kinematics(&t, root_q.view(), rots_q.view()).unwrap();
        for f in 0..frames {
            for j in 0..3 {
                let p = q * Vector3::new(a[[f, j, 0]], a[[f, j, 1]], a[[f, j, 2]]);
                for k in 0..3 {
                    assert_abs_diff_eq!(b[[f, j, k]], p[k], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn fk_shape_mismatch_rejected() {
        let t = chain3();
        let bad = forward_kinematics(&t, Array2::zeros((1, 3)).view(), identity_rots(1, 2).view());
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
