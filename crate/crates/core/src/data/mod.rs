//! Frame-pair inputs: KITTI ingestion, LiDAR projection, depth completion,
//! and a ray-cast synthetic scene.
//!
//! Pixel centres sit at integer coordinates: pixel `(u, v)` covers
//! `[u − 0.5, u + 0.5) × [v − 0.5, v + 0.5)`.

pub mod completion;
pub mod kitti;
pub mod lidar;
pub mod synthetic;

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DepthMap;
use crate::geometry::Pose;
use crate::tensor::Tensor;

pub use completion::{complete_depth, DepthBackend};
pub use kitti::{load_kitti_sequence, KittiOptions, KittiSequence};
pub use lidar::{project_lidar, LidarCalibration};
pub use synthetic::{generate_synthetic_sequence, ground_truth_flow, SyntheticConfig};

/// Pinhole intrinsics in pixels for an image of `width × height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = self.cx >= -0.5 && self.cy >= -0.5 && self.cx < self.width as f64 - 0.5 && self.cy < self.height as f64 - 0.5;
        if !(self.fx > 0.0 && self.fy > 0.0) || !inside {
            return Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Camera-frame point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
    }

    /// Intrinsics after cropping `left`/`top` pixels and scaling to `width × height`.
    pub fn crop_scale(&self, left: usize, top: usize, crop_w: usize, crop_h: usize, width: usize, height: usize) -> Self {
        let sx = width as f64 / crop_w as f64;
        let sy = height as f64 / crop_h as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx - left as f64 + 0.5) * sx - 0.5,
            cy: (self.cy - top as f64 + 0.5) * sy - 0.5,
            width,
            height,
        }
    }
}

/// Two consecutive frames. Images are `3×H×W` tensors in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub rgb_a: Tensor,
    pub rgb_b: Tensor,
    pub sparse_depth_a: DepthMap,
    pub sparse_depth_b: DepthMap,
    pub dense_depth_a: Option<DepthMap>,
    pub dense_depth_b: Option<DepthMap>,
    /// Pose of frame b expressed in frame a.
    pub gt_relative: Option<Pose>,
    pub intrinsics: CameraIntrinsics,
    /// Frame indices within the source sequence.
    pub index: (usize, usize),
}

impl FramePair {
    pub fn height(&self) -> usize {
        self.rgb_a.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb_a.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb_a.shape() != [3, h, w] || self.rgb_b.shape() != [3, h, w] {
            return Err(Error::shape("frame pair images differ in size"));
        }
        let depths = [Some(&self.sparse_depth_a), Some(&self.sparse_depth_b), self.dense_depth_a.as_ref(), self.dense_depth_b.as_ref()];
        if depths.into_iter().flatten().any(|d| d.width() != w || d.height() != h) {
            return Err(Error::shape("depth map and image differ in size"));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!("frame size {w}×{h} is not a multiple of 16")));
        }
        if self.intrinsics.width != w || self.intrinsics.height != h {
            return Err(Error::shape("intrinsics describe a different image size"));
        }
        Ok(())
    }

    /// Fills in dense depth for both frames with `backend`.
    pub fn complete(&mut self, backend: &DepthBackend, keys: (&str, &str)) -> Result<()> {
        if matches!(backend, DepthBackend::GroundTruth) {
            if self.dense_depth_a.is_none() || self.dense_depth_b.is_none() {
                return Err(Error::BackendUnavailable("ground-truth dense depth is not available for this pair".into()));
            }
            return Ok(());
        }
        self.dense_depth_a = Some(complete_depth(&self.sparse_depth_a, &self.rgb_a, backend, keys.0)?);
        self.dense_depth_b = Some(complete_depth(&self.sparse_depth_b, &self.rgb_b, backend, keys.1)?);
        Ok(())
    }
}

/// Loads an 8-bit RGB image as a `3×H×W` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    Ok(rgb_from_image(&img))
}

pub fn rgb_from_image(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn image_from_rgb(t: &Tensor) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = t.dims3();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    image_from_rgb(t).save(path)?;
    Ok(())
}

/// Reads a 16-bit depth PNG (metres = value / 256, 0 = invalid).
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    DepthMap::from_raw(w, h, img.as_raw().iter().map(|v| *v as f64 / 256.0).collect())
}

pub fn save_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let d = depth.get(x as usize, y as usize).unwrap_or(0.0);
        Luma([(d * 256.0).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path)?;
    Ok(())
}

/// Photometric and geometric augmentation applied identically to both frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    /// Maximum multiplicative brightness change, e.g. 0.2 for `[0.8, 1.2]`.
    pub brightness: f64,
    /// Maximum in-plane image rotation in degrees. Leaves the pose target
    /// unchanged, so it is only approximately consistent for small angles.
    pub rotation_deg: f64,
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.brightness == 0.0 && self.rotation_deg == 0.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, pair: &FramePair, rng: &mut R) -> Result<FramePair> {
        let mut out = pair.clone();
        if self.horizontal_flip && rng.gen_bool(0.5) {
            out = flip_pair(&out)?;
        }
        if self.brightness > 0.0 {
            let k = 1.0 + rng.gen_range(-self.brightness..=self.brightness);
            out.rgb_a = out.rgb_a.map(|v| (v * k).clamp(0.0, 1.0));
            out.rgb_b = out.rgb_b.map(|v| (v * k).clamp(0.0, 1.0));
        }
        if self.rotation_deg > 0.0 {
            let a = rng.gen_range(-self.rotation_deg..=self.rotation_deg).to_radians();
            out.rgb_a = rotate_image(&out.rgb_a, a);
            out.rgb_b = rotate_image(&out.rgb_b, a);
            out.sparse_depth_a = rotate_depth(&out.sparse_depth_a, a)?;
            out.sparse_depth_b = rotate_depth(&out.sparse_depth_b, a)?;
            out.dense_depth_a = out.dense_depth_a.as_ref().map(|d| rotate_depth(d, a)).transpose()?;
            out.dense_depth_b = out.dense_depth_b.as_ref().map(|d| rotate_depth(d, a)).transpose()?;
        }
        Ok(out)
    }
}

/// Mirrors both frames about the vertical image axis and the pose about the
/// camera's y-z plane: `t → (−t_x, t_y, t_z)`, `q → (w, x, −y, −z)`.
pub fn flip_pair(pair: &FramePair) -> Result<FramePair> {
    let flip_img = |t: &Tensor| {
        let (c, h, w) = t.dims3();
        Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            t.data()[i - x + (w - 1 - x)]
        })
    };
    let flip_depth = |d: &DepthMap| {
        let w = d.width();
        DepthMap::from_raw(
            w,
            d.height(),
            (0..d.depth().len()).map(|i| d.depth()[i - i % w + (w - 1 - i % w)]).collect(),
        )
    };
    let mut k = pair.intrinsics;
    k.cx = (k.width - 1) as f64 - k.cx;
    let gt = match &pair.gt_relative {
        Some(p) => {
            let (q, t) = (p.q(), p.t());
            Some(Pose::new([q[0], q[1], -q[2], -q[3]], [-t[0], t[1], t[2]])?)
        }
        None => None,
    };
    Ok(FramePair {
        rgb_a: flip_img(&pair.rgb_a),
        rgb_b: flip_img(&pair.rgb_b),
        sparse_depth_a: flip_depth(&pair.sparse_depth_a)?,
        sparse_depth_b: flip_depth(&pair.sparse_depth_b)?,
        dense_depth_a: pair.dense_depth_a.as_ref().map(flip_depth).transpose()?,
        dense_depth_b: pair.dense_depth_b.as_ref().map(flip_depth).transpose()?,
        gt_relative: gt,
        intrinsics: k,
        index: pair.index,
    })
}

/// Source coordinate for rotating about the image centre by `angle`.
fn rotation_source(x: usize, y: usize, w: usize, h: usize, angle: f64) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    (c * dx + s * dy + cx, -s * dx + c * dy + cy)
}

fn rotate_image(t: &Tensor, angle: f64) -> Tensor {
    let (ch, h, w) = t.dims3();
    let mut out = Tensor::zeros(&[ch, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotation_source(x, y, w, h, angle);
            let (sx, sy) = (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..ch {
                let v = (1.0 - fy) * ((1.0 - fx) * t.at3(c, y0, x0) + fx * t.at3(c, y0, x1))
                    + fy * ((1.0 - fx) * t.at3(c, y1, x0) + fx * t.at3(c, y1, x1));
                out.set3(c, y, x, v);
            }
        }
    }
    out
}

fn rotate_depth(d: &DepthMap, angle: f64) -> Result<DepthMap> {
    let (w, h) = (d.width(), d.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = rotation_source(x, y, w, h, angle);
            let (sx, sy) = (sx.round(), sy.round());
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out[y * w + x] = d.get(sx as usize, sy as usize).unwrap_or(0.0);
            }
        }
    }
    DepthMap::from_raw(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_pair() -> FramePair {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (16, 32);
        let d = DepthMap::from_raw(w, h, (0..h * w).map(|i| 1.0 + i as f64 * 0.01).collect()).unwrap();
        FramePair {
            rgb_a: Tensor::uniform(&[3, h, w], 0.5, &mut r).map(|v| v + 0.5),
            rgb_b: Tensor::uniform(&[3, h, w], 0.5, &mut r).map(|v| v + 0.5),
            sparse_depth_a: d.clone(),
            sparse_depth_b: d.clone(),
            dense_depth_a: Some(d.clone()),
            dense_depth_b: None,
            gt_relative: Some(Pose::from_axis_angle([0.2, 1.0, 0.3], 0.05, [0.3, -0.1, 1.0]).unwrap()),
            intrinsics: CameraIntrinsics::new(20.0, 20.0, 10.0, 7.0, w, h).unwrap(),
            index: (0, 1),
        }
    }

    #[test]
    fn intrinsics_validation_and_projection() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 9.0, 1.0, 4, 4).is_err());
        let k = CameraIntrinsics::new(100.0, 90.0, 31.0, 15.0, 64, 32).unwrap();
        assert_eq!(k.project([0.0, 0.0, 10.0]), Some((31.0, 15.0)));
        assert_eq!(k.project([0.0, 0.0, -1.0]), None);
        let p = k.backproject(12.25, 3.5, 7.0);
        let (u, v) = k.project(p).unwrap();
        assert!((u - 12.25).abs() < 1e-12 && (v - 3.5).abs() < 1e-12);
        // Scaling by 2 maps pixel centre 0 to 0.5 and the last centre to 2w − 1.5.
        let s = k.crop_scale(0, 0, 64, 32, 128, 64);
        assert_eq!(s.cx, (31.0 + 0.5) * 2.0 - 0.5);
    }

    #[test]
    fn flip_is_an_involution_and_mirrors_motion() {
        let p = toy_pair();
        let f = flip_pair(&p).unwrap();
        assert_eq!(f.rgb_a.at3(1, 3, 0), p.rgb_a.at3(1, 3, 31));
        let t = f.gt_relative.as_ref().unwrap().t();
        assert_eq!(t, [-0.3, -0.1, 1.0]);
        // A mirrored rotation equals M R M with M = diag(−1, 1, 1).
        let r = p.gt_relative.as_ref().unwrap().rotation_matrix();
        let rf = f.gt_relative.as_ref().unwrap().rotation_matrix();
        let m = [-1.0, 1.0, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                assert!((rf[i][j] - m[i] * r[i][j] * m[j]).abs() < 1e-12);
            }
        }
        let back = flip_pair(&f).unwrap();
        assert_eq!(back.rgb_b, p.rgb_b);
        assert_eq!(back.dense_depth_a, p.dense_depth_a);
        assert!(back.gt_relative.unwrap().distance_max(p.gt_relative.as_ref().unwrap()) < 1e-15);
        assert_eq!(back.intrinsics, p.intrinsics);
    }

    #[test]
    fn augmentation_applies_to_both_frames() {
        let mut p = toy_pair();
        // Keep intensities below the clamp for any brightness factor ≤ 1.3.
        p.rgb_a = p.rgb_a.scale(0.5);
        p.rgb_b = p.rgb_b.scale(0.5);
        let aug = Augmentation {
            horizontal_flip: false,
            brightness: 0.3,
            rotation_deg: 0.0,
        };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = aug.apply(&p, &mut r).unwrap();
        let ratio_a = a.rgb_a.at3(0, 2, 2) / p.rgb_a.at3(0, 2, 2);
        let ratio_b = a.rgb_b.at3(0, 2, 2) / p.rgb_b.at3(0, 2, 2);
        assert!((ratio_a - ratio_b).abs() < 1e-12);
        let none = Augmentation::default().apply(&p, &mut r).unwrap();
        assert_eq!(none.rgb_a, p.rgb_a);
        let rot = Augmentation {
            rotation_deg: 5.0,
            ..Default::default()
        }
        .apply(&p, &mut r)
        .unwrap();
        assert_eq!(rot.gt_relative, p.gt_relative);
        assert!(rot.rgb_a.is_finite());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_pair();
        let rp = dir.path().join("rgb.png");
        save_rgb(&p.rgb_a, &rp).unwrap();
        let back = load_rgb(&rp).unwrap();
        assert!(back.max_abs_diff(&p.rgb_a) <= 0.5 / 255.0 + 1e-12);
        let dp = dir.path().join("depth.png");
        let d = DepthMap::from_raw(4, 2, vec![0.0, 1.5, 2.25, 100.0, 0.0, 3.0, 0.5, 7.0]).unwrap();
        save_depth_png(&d, &dp).unwrap();
        assert_eq!(load_depth_png(&dp).unwrap(), d);
    }
}
