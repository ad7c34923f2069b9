//! LiDAR point clouds to image-aligned sparse depth.

use std::path::Path;

use crate::data::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::flow::DepthMap;

/// Affine map from the LiDAR frame into the rectified camera frame (row-major 3×4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarCalibration {
    pub camera_from_lidar: [[f64; 4]; 3],
}

impl LidarCalibration {
    pub fn identity() -> Self {
        Self {
            camera_from_lidar: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn from_row(v: &[f64; 12]) -> Self {
        Self {
            camera_from_lidar: std::array::from_fn(|r| std::array::from_fn(|c| v[r * 4 + c])),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.camera_from_lidar;
        std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3])
    }

    /// Precomposes an extra translation in the camera frame: `p ↦ A·p + offset`.
    pub fn with_camera_offset(mut self, offset: [f64; 3]) -> Self {
        for (r, o) in offset.iter().enumerate() {
            self.camera_from_lidar[r][3] += o;
        }
        self
    }
}

/// Z-buffered projection: each pixel keeps the smallest camera depth among
/// the points whose projection rounds to it.
pub fn project_lidar(points: &[[f64; 3]], calib: &LidarCalibration, k: &CameraIntrinsics) -> DepthMap {
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f64::INFINITY; w * h];
    for p in points {
        let c = calib.apply(*p);
        let Some((u, v)) = k.project(c) else { continue };
        let (u, v) = (u.round(), v.round());
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let i = v as usize * w + u as usize;
        if c[2] < depth[i] {
            depth[i] = c[2];
        }
    }
    let depth = depth.into_iter().map(|d| if d.is_finite() { d } else { 0.0 }).collect();
    DepthMap::from_raw(w, h, depth).expect("buffer sized to the image")
}

/// Reads a KITTI velodyne scan: little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn load_velodyne(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{} bytes is not a whole number of points", bytes.len()),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    Ok(bytes.chunks_exact(16).map(|c| [f(&c[0..4]), f(&c[4..8]), f(&c[8..12])]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(30.0, 30.0, 15.0, 8.0, 32, 16).unwrap()
    }

    #[test]
    fn optical_axis_and_culling() {
        let k = intr();
        let d = project_lidar(&[[0.0, 0.0, 10.0], [0.0, 0.0, -5.0]], &LidarCalibration::identity(), &k);
        assert_eq!(d.get(15, 8), Some(10.0));
        assert_eq!(d.valid_count(), 1);
        let none = project_lidar(&[[1.0, 1.0, -2.0]], &LidarCalibration::identity(), &k);
        assert_eq!(none.valid_count(), 0);
    }

    #[test]
    fn z_buffer_matches_brute_force() {
        let k = intr();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let calib = LidarCalibration::from_row(&[0.0, -1.0, 0.0, 0.1, 0.0, 0.0, -1.0, -0.2, 1.0, 0.0, 0.0, 0.3]);
        let pts: Vec<[f64; 3]> = (0..3000).map(|_| [r.gen_range(-5.0..30.0), r.gen_range(-10.0..10.0), r.gen_range(-3.0..3.0)]).collect();
        let d = project_lidar(&pts, &calib, &k);
        for v in 0..k.height {
            for u in 0..k.width {
                let mut best: Option<f64> = None;
                for p in &pts {
                    let c = calib.apply(*p);
                    if c[2] <= 0.0 {
                        continue;
                    }
                    let pu = (k.fx * c[0] / c[2] + k.cx).round();
                    let pv = (k.fy * c[1] / c[2] + k.cy).round();
                    if pu == u as f64 && pv == v as f64 {
                        best = Some(best.map_or(c[2], |b: f64| b.min(c[2])));
                    }
                }
                assert_eq!(d.get(u, v), best, "pixel ({u},{v})");
            }
        }
    }

    #[test]
    fn velodyne_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("000000.bin");
        let vals: [f32; 8] = [1.0, 2.0, 3.0, 0.5, -1.5, 0.25, 8.0, 0.1];
        std::fs::write(&p, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        assert_eq!(load_velodyne(&p).unwrap(), vec![[1.0, 2.0, 3.0], [-1.5, 0.25, 8.0]]);
        std::fs::write(&p, [0u8; 7]).unwrap();
        assert!(load_velodyne(&p).is_err());
    }
}
