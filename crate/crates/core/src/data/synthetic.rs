//! Ray-cast synthetic sequences with exact depth, poses and flow.
//!
//! The world uses camera conventions: x right, y down, z forward. The default
//! scene is a closed corridor (floor, ceiling, side walls, end wall) with
//! boxes on the floor, so every pixel has a finite depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{project_lidar, CameraIntrinsics, FramePair, LidarCalibration};
use crate::error::{Error, Result};
use crate::flow::{DepthMap, FlowField};
use crate::geometry::{compose, relative, Pose};
use crate::tensor::Tensor;

/// Supersampling grid per pixel for colour (depth uses the pixel centre).
const SUPERSAMPLE: usize = 3;
const SINUSOIDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Closed corridor with boxes.
    Corridor,
    /// A single textured fronto-parallel plane at `plane_depth`.
    Plane,
}

/// Scene, camera path and sensor settings. All lengths in metres, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; the principal point is the image centre.
    pub focal: f64,
    pub scene: SceneKind,
    pub plane_depth: f64,
    pub boxes: usize,
    pub corridor_half_width: f64,
    pub camera_height: f64,
    pub corridor_length: f64,
    /// Forward motion per frame is drawn from `[speed_min, speed_max]`.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Maximum sideways and vertical motion per frame.
    pub lateral: f64,
    pub vertical: f64,
    /// Maximum yaw and pitch change per frame.
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    /// Fraction of pixels that receive a simulated LiDAR return.
    pub lidar_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            width: 64,
            height: 32,
            focal: 40.0,
            scene: SceneKind::Corridor,
            plane_depth: 10.0,
            boxes: 14,
            corridor_half_width: 6.0,
            camera_height: 1.6,
            corridor_length: 80.0,
            speed_min: 0.4,
            speed_max: 1.2,
            lateral: 0.1,
            vertical: 0.03,
            yaw_deg: 1.5,
            pitch_deg: 0.3,
            lidar_fraction: 0.08,
        }
    }
}

impl SyntheticConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("degenerate synthetic configuration: {m}")));
        if self.frames < 2 {
            return bad("fewer than two frames");
        }
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return bad("image size must be a positive multiple of 16");
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range");
        }
        if [self.lateral, self.vertical, self.yaw_deg, self.pitch_deg].iter().any(|v| !(*v >= 0.0)) {
            return bad("negative motion bounds");
        }
        if !(0.0..=1.0).contains(&self.lidar_fraction) {
            return bad("lidar fraction outside [0, 1]");
        }
        if !(self.plane_depth > 0.0 && self.corridor_half_width > 0.0 && self.camera_height > 0.0) {
            return bad("scene dimensions");
        }
        let travel = self.speed_max * (self.frames - 1) as f64;
        if self.scene == SceneKind::Corridor && travel + 2.0 >= self.corridor_length {
            return bad("camera path leaves the corridor");
        }
        if self.scene == SceneKind::Plane && travel >= self.plane_depth {
            return bad("camera path reaches the plane");
        }
        self.intrinsics()?;
        Ok(())
    }
}

/// Per-surface procedural colour: a sum of oriented sinusoids per channel.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    waves: Vec<[f64; 4]>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let waves = (0..3 * SINUSOIDS)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let wavelength: f64 = rng.gen_range(0.6..5.0);
                let k = 2.0 * std::f64::consts::PI / wavelength;
                [k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..6.3), rng.gen_range(0.04..0.12)]
            })
            .collect();
        Self { base, waves }
    }

    fn color(&self, a: f64, b: f64) -> [f64; 3] {
        std::array::from_fn(|c| {
            let mut v = self.base[c];
            for w in &self.waves[c * SINUSOIDS..(c + 1) * SINUSOIDS] {
                v += w[3] * (w[0] * a + w[1] * b + w[2]).sin();
            }
            v.clamp(0.0, 1.0)
        })
    }
}

#[derive(Debug, Clone)]
struct AaBox {
    min: [f64; 3],
    max: [f64; 3],
    texture: Texture,
}

/// An axis-aligned plane `p[axis] = offset`.
#[derive(Debug, Clone)]
struct Plane {
    axis: usize,
    offset: f64,
    texture: Texture,
    shade: f64,
}

#[derive(Debug, Clone)]
struct Scene {
    planes: Vec<Plane>,
    boxes: Vec<AaBox>,
}

/// In-plane texture coordinates for a hit on a face orthogonal to `axis`.
fn face_coords(p: [f64; 3], axis: usize) -> (f64, f64) {
    match axis {
        0 => (p[2], p[1]),
        1 => (p[0], p[2]),
        _ => (p[0], p[1]),
    }
}

const FACE_SHADE: [f64; 3] = [0.85, 0.7, 1.0];

impl Scene {
    fn build(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut planes = Vec::new();
        let mut boxes = Vec::new();
        match cfg.scene {
            SceneKind::Plane => planes.push(Plane {
                axis: 2,
                offset: cfg.plane_depth,
                texture: Texture::random(rng),
                shade: 1.0,
            }),
            SceneKind::Corridor => {
                let hw = cfg.corridor_half_width;
                let floor = cfg.camera_height;
                let ceiling = -(4.0 - cfg.camera_height).max(1.0);
                for (axis, offset) in [(1, floor), (1, ceiling), (0, -hw), (0, hw), (2, cfg.corridor_length), (2, -2.0)] {
                    planes.push(Plane {
                        axis,
                        offset,
                        texture: Texture::random(rng),
                        shade: FACE_SHADE[axis],
                    });
                }
                for _ in 0..cfg.boxes {
                    let half = rng.gen_range(0.3..1.0);
                    let height = rng.gen_range(0.5..2.5);
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let x = side * rng.gen_range((1.6 + half)..(hw - half).max(1.7 + half));
                    let z = rng.gen_range(3.0..cfg.corridor_length - 2.0);
                    boxes.push(AaBox {
                        min: [x - half, floor - height, z - half],
                        max: [x + half, floor, z + half],
                        texture: Texture::random(rng),
                    });
                }
            }
        }
        Self { planes, boxes }
    }

    /// Nearest hit along `o + s·d`: `(s, colour)`.
    fn trace(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        let mut consider = |s: f64, colour: &dyn Fn() -> [f64; 3]| {
            if s > 1e-9 && best.is_none_or(|(b, _)| s < b) {
                best = Some((s, colour()));
            }
        };
        for pl in &self.planes {
            if d[pl.axis].abs() < 1e-12 {
                continue;
            }
            let s = (pl.offset - o[pl.axis]) / d[pl.axis];
            let p = [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]];
            let (a, b) = face_coords(p, pl.axis);
            consider(s, &|| pl.texture.color(a, b).map(|c| c * pl.shade));
        }
        for bx in &self.boxes {
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            let mut hit = true;
            for k in 0..3 {
                if d[k].abs() < 1e-12 {
                    if o[k] < bx.min[k] || o[k] > bx.max[k] {
                        hit = false;
                    }
                    continue;
                }
                let (mut a, mut b) = ((bx.min[k] - o[k]) / d[k], (bx.max[k] - o[k]) / d[k]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis = k;
                }
                t1 = t1.min(b);
            }
            if hit && t0 <= t1 && t0 > 1e-9 {
                let p = [o[0] + t0 * d[0], o[1] + t0 * d[1], o[2] + t0 * d[2]];
                let (a, b) = face_coords(p, axis);
                consider(t0, &|| bx.texture.color(a, b).map(|c| c * FACE_SHADE[axis]));
            }
        }
        best
    }
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub rgb: Tensor,
    pub depth: DepthMap,
    pub sparse_depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: SyntheticConfig,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world poses.
    pub poses: Vec<Pose>,
    pub frames: Vec<SyntheticFrame>,
}

impl SyntheticSequence {
    pub fn pair_count(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn pair(&self, i: usize) -> Result<FramePair> {
        if i + 1 >= self.frames.len() {
            return Err(Error::InvalidInput(format!("pair {i} out of range")));
        }
        let (a, b) = (&self.frames[i], &self.frames[i + 1]);
        Ok(FramePair {
            rgb_a: a.rgb.clone(),
            rgb_b: b.rgb.clone(),
            sparse_depth_a: a.sparse_depth.clone(),
            sparse_depth_b: b.sparse_depth.clone(),
            dense_depth_a: Some(a.depth.clone()),
            dense_depth_b: Some(b.depth.clone()),
            gt_relative: Some(relative(&self.poses[i], &self.poses[i + 1])?),
            intrinsics: self.intrinsics,
            index: (i, i + 1),
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = Result<FramePair>> + '_ {
        (0..self.pair_count()).map(move |i| self.pair(i))
    }
}

fn camera_path(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let mut poses = vec![Pose::identity()];
    let mut yaw = 0.0f64;
    let mut pitch = 0.0f64;
    for _ in 1..cfg.frames {
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        // Pull heading back toward the corridor axis so the path stays inside.
        let dyaw = (sym(rng, cfg.yaw_deg) - 0.3 * yaw).clamp(-cfg.yaw_deg, cfg.yaw_deg);
        let dpitch = (sym(rng, cfg.pitch_deg) - 0.5 * pitch).clamp(-cfg.pitch_deg, cfg.pitch_deg);
        yaw += dyaw;
        pitch += dpitch;
        let speed = if cfg.speed_max > cfg.speed_min {
            rng.gen_range(cfg.speed_min..=cfg.speed_max)
        } else {
            cfg.speed_min
        };
        let t = [sym(rng, cfg.lateral), sym(rng, cfg.vertical), speed];
        let ry = Pose::from_axis_angle([0.0, 1.0, 0.0], dyaw.to_radians(), [0.0; 3])?;
        let rx = Pose::from_axis_angle([1.0, 0.0, 0.0], dpitch.to_radians(), [0.0; 3])?;
        let rot = compose(&ry, &rx)?;
        let rel = Pose::new(rot.q(), t)?;
        let next = compose(poses.last().expect("non-empty"), &rel)?;
        poses.push(next);
    }
    Ok(poses)
}

fn render(scene: &Scene, pose: &Pose, k: &CameraIntrinsics) -> Result<(Tensor, DepthMap)> {
    let (w, h) = (k.width, k.height);
    let o = pose.t();
    let mut rgb = Tensor::zeros(&[3, h, w]);
    let mut depth = vec![0.0; w * h];
    let ray = |u: f64, v: f64| pose.rotation_matrix().map(|r| r[0] * (u - k.cx) / k.fx + r[1] * (v - k.cy) / k.fy + r[2]);
    for y in 0..h {
        for x in 0..w {
            let (s, _) = scene
                .trace(o, ray(x as f64, y as f64))
                .ok_or_else(|| Error::InvalidInput(format!("pixel ({x},{y}) sees no surface")))?;
            // Camera-frame direction has unit z, so the ray parameter is the depth.
            depth[y * w + x] = s;
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let du = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    let dv = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    if let Some((_, c)) = scene.trace(o, ray(x as f64 + du, y as f64 + dv)) {
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                rgb.set3(ch, y, x, a / (SUPERSAMPLE * SUPERSAMPLE) as f64);
            }
        }
    }
    Ok((rgb, DepthMap::from_raw(w, h, depth)?))
}

/// Simulated LiDAR: back-project a random subset of pixels and project them again.
fn simulate_lidar(depth: &DepthMap, k: &CameraIntrinsics, fraction: f64, rng: &mut ChaCha8Rng) -> DepthMap {
    let w = depth.width();
    let points: Vec<[f64; 3]> = (0..depth.depth().len())
        .filter(|_| rng.gen_bool(fraction))
        .filter_map(|i| depth.get(i % w, i / w).map(|d| k.backproject((i % w) as f64, (i / w) as f64, d)))
        .collect();
    project_lidar(&points, &LidarCalibration::identity(), k)
}

pub fn generate_synthetic_sequence(config: &SyntheticConfig, seed: u64) -> Result<SyntheticSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.intrinsics()?;
    let scene = Scene::build(config, &mut rng);
    let poses = camera_path(config, &mut rng)?;
    let frames = poses
        .iter()
        .map(|p| {
            let (rgb, depth) = render(&scene, p, &k)?;
            let sparse_depth = simulate_lidar(&depth, &k, config.lidar_fraction, &mut rng);
            Ok(SyntheticFrame { rgb, depth, sparse_depth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        config: config.clone(),
        intrinsics: k,
        poses,
        frames,
    })
}

/// Flow from frame a to frame b induced by the rigid motion `rel` (pose of b in a)
/// and the depth of frame a. Pixels without depth get zero flow.
pub fn ground_truth_flow(depth_a: &DepthMap, k: &CameraIntrinsics, rel: &Pose) -> Result<FlowField> {
    let (w, h) = (depth_a.width(), depth_a.height());
    let inv = rel.inverse();
    let mut flow = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth_a.get(x, y) else { continue };
            let pb = inv.transform_point(k.backproject(x as f64, y as f64, d));
            if let Some((u, v)) = k.project(pb) {
                flow.set3(0, y, x, u - x as f64);
                flow.set3(1, y, x, v - y as f64);
            }
        }
    }
    FlowField::new(flow, 0)
}
