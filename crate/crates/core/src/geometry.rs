//! Rigid-body pose algebra.
//!
//! Quaternions are scalar-first `(w, x, y, z)` with the Hamilton product, and
//! are always stored normalized with `w ≥ 0`. A [`Pose`] maps points from its
//! local frame into the parent frame: `p_parent = R·p_local + t`.

use crate::error::{Error, Result};

pub type Matrix4 = [[f64; 4]; 4];
pub type Matrix3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    q: [f64; 4],
    t: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Normalizes a quaternion and forces `w ≥ 0`.
pub fn normalize_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !n.is_finite() || n < 1e-12 {
        return None;
    }
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    Some(q.map(|v| v * s))
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0; 3],
        }
    }

    /// Builds a pose from a (not necessarily unit) quaternion and a translation.
    pub fn new(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        if !q.iter().chain(t.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose(format!("non-finite components q={q:?} t={t:?}")));
        }
        let q = normalize_quaternion(q).ok_or_else(|| Error::InvalidPose(format!("zero quaternion {q:?}")))?;
        Ok(Self { q, t })
    }

    pub fn from_translation(t: [f64; 3]) -> Result<Self> {
        Self::new([1.0, 0.0, 0.0, 0.0], t)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 0.0) {
            return Err(Error::InvalidPose(format!("zero rotation axis {axis:?}")));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n], t)
    }

    pub fn q(&self) -> [f64; 4] {
        self.q
    }

    pub fn t(&self) -> [f64; 3] {
        self.t
    }

    /// The 7-vector `(t, q)` used as the network's pose parameterization.
    pub fn to_vec7(&self) -> [f64; 7] {
        [self.t[0], self.t[1], self.t[2], self.q[0], self.q[1], self.q[2], self.q[3]]
    }

    pub fn rotation_matrix(&self) -> Matrix3 {
        let [w, x, y, z] = self.q;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.t[i])
    }

    /// Homogeneous 4×4 matrix, row-major.
    pub fn to_matrix(&self) -> Matrix4 {
        let r = self.rotation_matrix();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = self.t[i];
        }
        m[3][3] = 1.0;
        m
    }

    /// Builds a pose from the upper 3×4 block of a homogeneous matrix.
    ///
    /// The rotation block is assumed orthonormal; the quaternion is extracted
    /// with the numerically stable largest-diagonal branch.
    pub fn from_matrix(m: &Matrix4) -> Result<Self> {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Self::new(quaternion_from_rotation(&r), [m[0][3], m[1][3], m[2][3]])
    }

    /// Parses the KITTI 12-float row-major 3×4 layout.
    pub fn from_kitti_row(v: &[f64; 12]) -> Result<Self> {
        let m = [
            [v[0], v[1], v[2], v[3]],
            [v[4], v[5], v[6], v[7]],
            [v[8], v[9], v[10], v[11]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::from_matrix(&m)
    }

    pub fn to_kitti_row(&self) -> [f64; 12] {
        let m = self.to_matrix();
        std::array::from_fn(|i| m[i / 4][i % 4])
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation_matrix();
        let t = std::array::from_fn(|i| -(r[0][i] * self.t[0] + r[1][i] * self.t[1] + r[2][i] * self.t[2]));
        let [w, x, y, z] = self.q;
        // Conjugate of a w ≥ 0 unit quaternion keeps w ≥ 0.
        Pose { q: [w, -x, -y, -z], t }
    }

    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        compose(self, other)
    }

    pub fn relative_to(&self, other: &Pose) -> Result<Pose> {
        relative(self, other)
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(self)
    }

    pub fn translation_norm(&self) -> f64 {
        (self.t[0] * self.t[0] + self.t[1] * self.t[1] + self.t[2] * self.t[2]).sqrt()
    }

    /// Maximum absolute difference in `t` and in `q` modulo sign.
    pub fn distance_max(&self, other: &Pose) -> f64 {
        let dt = (0..3).map(|i| (self.t[i] - other.t[i]).abs()).fold(0.0, f64::max);
        let dq_pos = (0..4).map(|i| (self.q[i] - other.q[i]).abs()).fold(0.0, f64::max);
        let dq_neg = (0..4).map(|i| (self.q[i] + other.q[i]).abs()).fold(0.0, f64::max);
        dt.max(dq_pos.min(dq_neg))
    }
}

fn quaternion_from_rotation(r: &Matrix3) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    if trace > 0.0 {
        let s = 2.0 * (trace + 1.0).sqrt();
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    }
}

/// `a ∘ b`: the pose whose matrix is `matrix(a)·matrix(b)`.
pub fn compose(a: &Pose, b: &Pose) -> Result<Pose> {
    let t = a.transform_point(b.t);
    Pose::new(quat_mul(a.q, b.q), t)
}

/// `inverse(a) ∘ b`: pose of `b` expressed in the frame of `a`.
pub fn relative(a: &Pose, b: &Pose) -> Result<Pose> {
    compose(&a.inverse(), b)
}

/// Geodesic rotation angle in `[0, π]`.
pub fn rotation_angle(p: &Pose) -> f64 {
    let [w, x, y, z] = p.q;
    2.0 * (x * x + y * y + z * z).sqrt().atan2(w.abs())
}

/// Ordered absolute poses, one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// Applies `g ∘ pose` to every pose.
    pub fn transformed(&self, g: &Pose) -> Result<Self> {
        Self::new(self.poses.iter().map(|p| compose(g, p)).collect::<Result<_>>()?)
    }

    /// Relative motion between consecutive frames.
    pub fn relatives(&self) -> Result<Vec<Pose>> {
        self.poses.windows(2).map(|w| relative(&w[0], &w[1])).collect()
    }
}

/// Chains relative poses onto `origin`: `poses[i+1] = poses[i] ∘ relatives[i]`.
pub fn accumulate(relatives: &[Pose], origin: Pose) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    poses.push(origin);
    for r in relatives {
        let next = compose(poses.last().expect("non-empty"), r)?;
        poses.push(next);
    }
    Trajectory::new(poses)
}
