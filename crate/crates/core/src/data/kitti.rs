//! KITTI odometry layout: `sequences/NN/{image_2,velodyne,calib.txt}` and `poses/NN.txt`.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::data::lidar::load_velodyne;
use crate::data::{project_lidar, rgb_from_image, CameraIntrinsics, FramePair, LidarCalibration};
use crate::error::{Error, Result};
use crate::geometry::{relative, Pose};

pub const DEFAULT_WIDTH: usize = 1216;
pub const DEFAULT_HEIGHT: usize = 352;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KittiOptions {
    pub width: usize,
    pub height: usize,
}

impl Default for KittiOptions {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

/// Parses a pose file of 12-float rows (camera-to-world, row-major 3×4).
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_floats::<12>(line, path, n + 1)?;
        poses.push(Pose::from_kitti_row(&row).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(poses)
}

fn parse_floats<const N: usize>(s: &str, path: &Path, line: usize) -> Result<[f64; N]> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let vals = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    vals.try_into().map_err(|v: Vec<f64>| err(format!("expected {N} values, found {}", v.len())))
}

/// Camera intrinsics of `image_2` and the LiDAR-to-`image_2` transform from `calib.txt`.
pub fn parse_calib(text: &str, path: &Path, width: usize, height: usize) -> Result<(CameraIntrinsics, LidarCalibration)> {
    let mut p2 = None;
    let mut tr = None;
    for (n, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        match key.trim() {
            "P2" => p2 = Some(parse_floats::<12>(rest, path, n + 1)?),
            "Tr" | "Tr_velo_to_cam" => tr = Some(parse_floats::<12>(rest, path, n + 1)?),
            _ => {}
        }
    }
    let missing = |what: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing {what}"),
    };
    let p2 = p2.ok_or_else(|| missing("P2"))?;
    let tr = tr.ok_or_else(|| missing("Tr"))?;
    let (fx, cx, fy, cy) = (p2[0], p2[2], p2[5], p2[6]);
    let k = CameraIntrinsics::new(fx, fy, cx, cy, width, height)?;
    // P2 = K·[I | b]: recover the rectified-camera offset b of camera 2.
    let bz = p2[11];
    let offset = [(p2[3] - cx * bz) / fx, (p2[7] - cy * bz) / fy, bz];
    Ok((k, LidarCalibration::from_row(&tr).with_camera_offset(offset)))
}

/// Bottom-anchored, horizontally centred crop with the target aspect ratio.
pub fn crop_window(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> (usize, usize, usize, usize) {
    let crop_h = ((src_w as f64 * dst_h as f64 / dst_w as f64).round() as usize).clamp(1, src_h);
    let crop_w = ((crop_h as f64 * dst_w as f64 / dst_h as f64).round() as usize).clamp(1, src_w);
    ((src_w - crop_w) / 2, src_h - crop_h, crop_w, crop_h)
}

/// A lazily loaded odometry sequence.
#[derive(Debug, Clone)]
pub struct KittiSequence {
    pub id: String,
    pub dir: PathBuf,
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub calib: LidarCalibration,
    /// `(left, top, width, height)` of the crop applied before scaling.
    pub crop: (usize, usize, usize, usize),
}

pub fn load_kitti_sequence(root: &Path, id: &str, options: &KittiOptions) -> Result<KittiSequence> {
    if options.width % 16 != 0 || options.height % 16 != 0 || options.width == 0 || options.height == 0 {
        return Err(Error::Config(format!("KITTI target size {}×{} is not a multiple of 16", options.width, options.height)));
    }
    let dir = root.join("sequences").join(id);
    let pose_path = root.join("poses").join(format!("{id}.txt"));
    let calib_path = dir.join("calib.txt");
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let poses = parse_poses(&read(&pose_path)?, &pose_path)?;
    if poses.len() < 2 {
        return Err(Error::InvalidInput(format!("{} has fewer than two poses", pose_path.display())));
    }
    let first = image_path(&dir, 0);
    let (src_w, src_h) = image::image_dimensions(&first)?;
    let (src_w, src_h) = (src_w as usize, src_h as usize);
    let (k, calib) = parse_calib(&read(&calib_path)?, &calib_path, src_w, src_h)?;
    let crop = crop_window(src_w, src_h, options.width, options.height);
    let intrinsics = k.crop_scale(crop.0, crop.1, crop.2, crop.3, options.width, options.height);
    Ok(KittiSequence {
        id: id.to_string(),
        dir,
        poses,
        intrinsics,
        calib,
        crop,
    })
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("image_2").join(format!("{i:06}.png"))
}

impl KittiSequence {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn pair_count(&self) -> usize {
        self.poses.len() - 1
    }

    pub fn frame_key(&self, i: usize) -> String {
        format!("{i:06}")
    }

    fn load_frame(&self, i: usize) -> Result<(crate::tensor::Tensor, crate::flow::DepthMap)> {
        let path = image_path(&self.dir, i);
        let img = image::open(&path)?.into_rgb8();
        let (l, t, w, h) = self.crop;
        let cropped = imageops::crop_imm(&img, l as u32, t as u32, w as u32, h as u32).to_image();
        let k = &self.intrinsics;
        let scaled = imageops::resize(&cropped, k.width as u32, k.height as u32, FilterType::Triangle);
        let points = load_velodyne(&self.dir.join("velodyne").join(format!("{i:06}.bin")))?;
        Ok((rgb_from_image(&scaled), project_lidar(&points, &self.calib, k)))
    }

    /// Pair `(i, i + 1)` with its ground-truth relative pose.
    pub fn pair(&self, i: usize) -> Result<FramePair> {
        if i + 1 >= self.poses.len() {
            return Err(Error::InvalidInput(format!("pair {i} out of range for {} frames", self.poses.len())));
        }
        let (rgb_a, sparse_a) = self.load_frame(i)?;
        let (rgb_b, sparse_b) = self.load_frame(i + 1)?;
        let pair = FramePair {
            rgb_a,
            rgb_b,
            sparse_depth_a: sparse_a,
            sparse_depth_b: sparse_b,
            dense_depth_a: None,
            dense_depth_b: None,
            gt_relative: Some(relative(&self.poses[i], &self.poses[i + 1])?),
            intrinsics: self.intrinsics,
            index: (i, i + 1),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn pairs(&self) -> impl Iterator<Item = Result<FramePair>> + '_ {
        (0..self.pair_count()).map(move |i| self.pair(i))
    }
}
