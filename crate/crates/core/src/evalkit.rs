//! KITTI odometry metrics, trajectory files and visualization.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::data::kitti::parse_poses;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{relative, Pose, Trajectory};
use crate::tensor::Tensor;

/// Subsequence lengths of the KITTI odometry benchmark, in metres.
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub start_frame: usize,
    pub length_m: f64,
    /// Translation error divided by the segment length.
    pub t_err: f64,
    /// Rotation error in radians per metre.
    pub r_err: f64,
}

/// Cumulative ground-travelled distance at every frame.
pub fn path_distances(traj: &Trajectory) -> Vec<f64> {
    let mut d = Vec::with_capacity(traj.frame_count());
    d.push(0.0);
    for w in traj.poses().windows(2) {
        let (a, b) = (w[0].t(), w[1].t());
        let step = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        d.push(d.last().expect("non-empty") + step);
    }
    d
}

fn last_frame_from_start(dist: &[f64], start: usize, length: f64) -> Option<usize> {
    let target = dist[start] + length;
    (start..dist.len()).find(|&i| dist[i] >= target)
}

/// Angle from the rotation-matrix trace, clamped as in the KITTI devkit; an
/// error pose with a numerically exact identity rotation yields exactly 0.
fn rotation_error(err: &Pose) -> f64 {
    let r = err.rotation_matrix();
    (0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0)).clamp(-1.0, 1.0).acos()
}

/// Errors for every start frame (stride 1) and every length that fits.
pub fn segment_errors(gt: &Trajectory, pred: &Trajectory, lengths: &[f64]) -> Result<Vec<SegmentError>> {
    if gt.frame_count() != pred.frame_count() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: gt {} vs pred {}",
            gt.frame_count(),
            pred.frame_count()
        )));
    }
    if let Some(l) = lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput(format!("segment length must be positive, got {l}")));
    }
    let dist = path_distances(gt);
    let (g, p) = (gt.poses(), pred.poses());
    let mut out = Vec::new();
    for start in 0..g.len() {
        for &length in lengths {
            let Some(end) = last_frame_from_start(&dist, start, length) else {
                continue;
            };
            let gt_rel = relative(&g[start], &g[end])?;
            let pred_rel = relative(&p[start], &p[end])?;
            let err = relative(&pred_rel, &gt_rel)?;
            out.push(SegmentError {
                start_frame: start,
                length_m: length,
                t_err: err.translation_norm() / length,
                r_err: rotation_error(&err) / length,
            });
        }
    }
    Ok(out)
}

/// Mean errors as (translation %, rotation °/100 m).
pub fn aggregate(errors: &[SegmentError]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::Empty("segment errors"));
    }
    let n = errors.len() as f64;
    let t = errors.iter().map(|e| e.t_err).sum::<f64>() / n;
    let r = errors.iter().map(|e| e.r_err).sum::<f64>() / n;
    Ok((t * 100.0, r.to_degrees() * 100.0))
}

/// Per-sequence outcome as written to the results file.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub id: String,
    /// `None` when the sequence is shorter than every segment length.
    pub metrics: Option<(f64, f64)>,
}

pub fn evaluate_sequence(id: &str, gt: &Trajectory, pred: &Trajectory, lengths: &[f64]) -> Result<SequenceResult> {
    let errors = segment_errors(gt, pred, lengths)?;
    let metrics = if errors.is_empty() { None } else { Some(aggregate(&errors)?) };
    Ok(SequenceResult { id: id.to_string(), metrics })
}

/// Whitespace-separated table: one row per sequence and a final mean row over
/// the sequences that had enough length.
pub fn format_results(results: &[SequenceResult]) -> String {
    let mut s = String::from("seq t_rel r_rel status\n");
    let mut sum = (0.0, 0.0, 0usize);
    for r in results {
        match r.metrics {
            Some((t, rot)) => {
                let _ = writeln!(s, "{} {:.6} {:.6} ok", r.id, t, rot);
                sum = (sum.0 + t, sum.1 + rot, sum.2 + 1);
            }
            None => {
                let _ = writeln!(s, "{} nan nan insufficient_length", r.id);
            }
        }
    }
    if sum.2 > 0 {
        let n = sum.2 as f64;
        let _ = writeln!(s, "mean {:.6} {:.6} ok", sum.0 / n, sum.1 / n);
    } else {
        s.push_str("mean nan nan insufficient_length\n");
    }
    s
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Trajectory::new(parse_poses(&text, path)?)
}

/// KITTI pose file: twelve row-major floats per frame.
pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in traj.poses() {
        let row: Vec<String> = p.to_kitti_row().iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, format_trajectory(traj)).map_err(|e| Error::io(path, e))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue for a flow direction in image coordinates (y down). The quarter turn
/// from rightward to downward spans red to green; the rest of the circle
/// covers green through blue and magenta back to red.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    let a = v.atan2(u).to_degrees().rem_euclid(360.0);
    if a <= 90.0 {
        a * 120.0 / 90.0
    } else {
        120.0 + (a - 90.0) * 240.0 / 270.0
    }
}

/// `3×H×W` color rendering in `[0, 1]`: hue encodes direction, saturation
/// encodes magnitude clipped at `max_magnitude`.
pub fn flow_to_color(flow: &FlowField, max_magnitude: f64) -> Result<Tensor> {
    if !(max_magnitude > 0.0 && max_magnitude.is_finite()) {
        return Err(Error::InvalidInput(format!("max magnitude must be positive, got {max_magnitude}")));
    }
    if !flow.data.is_finite() {
        return Err(Error::InvalidInput("flow contains non-finite values".into()));
    }
    let (h, w) = (flow.height(), flow.width());
    let hw = h * w;
    let d = flow.data.data();
    let mut out = Tensor::zeros(&[3, h, w]);
    let o = out.data_mut();
    for i in 0..hw {
        let (u, v) = (d[i], d[hw + i]);
        let s = ((u * u + v * v).sqrt() / max_magnitude).min(1.0);
        let rgb = hsv_to_rgb(flow_hue(u, v), s, 1.0);
        for c in 0..3 {
            o[c * hw + i] = rgb[c];
        }
    }
    Ok(out)
}

/// Writes a flow field in the Middlebury `.flo` layout: `PIEH`, width, height,
/// then interleaved `(u, v)` as little-endian f32.
pub fn save_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    let hw = h * w;
    let d = flow.data.data();
    let mut buf = Vec::with_capacity(12 + 8 * hw);
    buf.extend_from_slice(b"PIEH");
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    for i in 0..hw {
        buf.extend_from_slice(&(d[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(d[hw + i] as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_flow(path: &Path, level: usize) -> Result<FlowField> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidInput(format!("{}: {msg}", path.display()));
    if buf.len() < 12 || &buf[..4] != b"PIEH" {
        return Err(bad("not a .flo file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let (w, h) = (word(4) as usize, word(8) as usize);
    let hw = w.checked_mul(h).ok_or_else(|| bad("size overflow"))?;
    if buf.len() != 12 + 8 * hw {
        return Err(bad("truncated flow data"));
    }
    let mut data = vec![0.0; 2 * hw];
    for i in 0..hw {
        let f = |k: usize| f32::from_le_bytes(buf[12 + 8 * i + 4 * k..16 + 8 * i + 4 * k].try_into().expect("4 bytes")) as f64;
        data[i] = f(0);
        data[hw + i] = f(1);
    }
    FlowField::new(Tensor::from_vec(&[2, h, w], data), level)
}

pub const PLOT_SIZE: u32 = 512;
const PLOT_MARGIN: f64 = 24.0;
const PALETTE: [[u8; 3]; 6] = [[220, 40, 40], [30, 90, 220], [30, 160, 60], [200, 120, 20], [150, 40, 180], [20, 160, 170]];

fn draw_line(img: &mut ImageBuffer<Rgb<u8>, Vec<u8>>, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Top-down (x, z) rendering of the ground truth (black) and each prediction,
/// written as a PNG at `path` plus a text table next to it (`.txt`). Both files
/// depend only on the inputs.
pub fn plot_trajectory(gt: &Trajectory, preds: &[(String, Trajectory)], results: &[SequenceResult], path: &Path) -> Result<()> {
    let all = std::iter::once(gt).chain(preds.iter().map(|(_, t)| t));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for t in all.clone() {
        for p in t.poses() {
            let [x, _, z] = p.t();
            lo = [lo[0].min(x), lo[1].min(z)];
            hi = [hi[0].max(x), hi[1].max(z)];
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let scale = (PLOT_SIZE as f64 - 2.0 * PLOT_MARGIN) / span;
    let half = PLOT_SIZE as f64 / 2.0;
    let to_px = |p: &Pose| {
        let [x, _, z] = p.t();
        (((x - centre[0]) * scale + half).round() as i64, (half - (z - centre[1]) * scale).round() as i64)
    };
    let mut img = ImageBuffer::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255u8, 255, 255]));
    for (k, t) in all.enumerate() {
        let color = if k == 0 { [0, 0, 0] } else { PALETTE[(k - 1) % PALETTE.len()] };
        let pts: Vec<(i64, i64)> = t.poses().iter().map(to_px).collect();
        draw_line(&mut img, pts[0], pts[0], color);
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;

    let mut table = String::from("# series color\nground_truth black\n");
    for (k, (name, _)) in preds.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(table, "{name} #{:02x}{:02x}{:02x}", c[0], c[1], c[2]);
    }
    table.push_str(&format_results(results));
    let txt = path.with_extension("txt");
    std::fs::write(&txt, table).map_err(|e| Error::io(&txt, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| Pose::from_translation([0.0, 0.0, step * i as f64]).unwrap()).collect()).unwrap()
    }

    #[test]
    fn distances_of_a_line() {
        assert_eq!(path_distances(&line(1, 1.0)), vec![0.0]);
        assert_eq!(path_distances(&line(5, 1.0)), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn endpoint_takes_first_frame_reaching_length() {
        let d = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(last_frame_from_start(&d, 0, 2.0), Some(2));
        assert_eq!(last_frame_from_start(&d, 1, 2.5), Some(4));
        assert_eq!(last_frame_from_start(&d, 2, 2.5), None);
    }

    #[test]
    fn scaled_line_gives_scale_error() {
        let gt = line(301, 1.0);
        let pred = line(301, 1.1);
        let errs = segment_errors(&gt, &pred, &[100.0, 200.0]).unwrap();
        assert_eq!(errs.len(), 201 + 101);
        for e in &errs {
            assert!((e.t_err - 0.1).abs() < 1e-9);
            assert_eq!(e.r_err, 0.0);
        }
        let (t, r) = aggregate(&errs).unwrap();
        assert!((t - 10.0).abs() < 1e-6 && r == 0.0);
    }

    #[test]
    fn short_sequence_reports_insufficient_length() {
        let gt = line(10, 1.0);
        let res = evaluate_sequence("03", &gt, &gt, &SEGMENT_LENGTHS).unwrap();
        assert_eq!(res.metrics, None);
        let text = format_results(&[res]);
        assert_eq!(text, "seq t_rel r_rel status\n03 nan nan insufficient_length\nmean nan nan insufficient_length\n");
        assert!(segment_errors(&gt, &line(9, 1.0), &[1.0]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn results_have_mean_row() {
        let rows = [
            SequenceResult { id: "09".into(), metrics: Some((1.0, 0.5)) },
            SequenceResult { id: "10".into(), metrics: Some((3.0, 1.5)) },
        ];
        let text = format_results(&rows);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().last().unwrap(), "mean 2.000000 1.000000 ok");
    }

    #[test]
    fn flow_colors() {
        let right = flow_to_color(&FlowField::constant(2, 3, 0, 5.0, 0.0), 5.0).unwrap();
        assert_eq!(&right.data()[..6], &[1.0; 6]);
        assert!(right.data()[6..].iter().all(|v| *v == 0.0));
        let down = flow_to_color(&FlowField::constant(1, 1, 0, 0.0, 2.0), 1.0).unwrap();
        assert_eq!(down.data(), &[0.0, 1.0, 0.0]);
        let zero = flow_to_color(&FlowField::zeros(2, 2, 0), 1.0).unwrap();
        assert!(zero.data().iter().all(|v| *v == 1.0));
        assert!(flow_to_color(&FlowField::zeros(2, 2, 0), 0.0).is_err());
    }

    #[test]
    fn hue_is_continuous() {
        let mut prev = flow_hue(1.0, 0.0);
        for k in 1..=3600 {
            let a = (k as f64 / 10.0).to_radians();
            let h = flow_hue(a.cos(), a.sin());
            let step = (h - prev).rem_euclid(360.0);
            assert!(step < 0.2, "jump at {k}: {prev} -> {h}");
            prev = h;
        }
    }

    #[test]
    fn flow_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FlowField::new(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.25 - 1.0), 1).unwrap();
        let p = dir.path().join("a.flo");
        save_flow(&f, &p).unwrap();
        assert_eq!(load_flow(&p, 1).unwrap(), f);
        std::fs::write(&p, b"PIEH\x01\0\0\0").unwrap();
        assert!(load_flow(&p, 0).is_err());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trajectory::new(vec![
            Pose::identity(),
            Pose::from_axis_angle([0.0, 1.0, 0.0], 0.3, [1.0, -2.0, 3.5]).unwrap(),
        ])
        .unwrap();
        let p = dir.path().join("t.txt");
        write_trajectory(&t, &p).unwrap();
        let back = read_trajectory(&p).unwrap();
        for (a, b) in t.poses().iter().zip(back.poses()) {
            assert!(a.distance_max(b) < 1e-8);
        }
    }

    #[test]
    fn plot_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let gt = line(30, 0.5);
        let single = Trajectory::new(vec![Pose::identity()]).unwrap();
        let res = [SequenceResult { id: "00".into(), metrics: Some((1.0, 2.0)) }];
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        plot_trajectory(&gt, &[("pred".into(), line(30, 0.55))], &res, &a).unwrap();
        plot_trajectory(&gt, &[("pred".into(), line(30, 0.55))], &res, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read(a.with_extension("txt")).unwrap(), std::fs::read(b.with_extension("txt")).unwrap());
        plot_trajectory(&single, &[], &[], &a).unwrap();
        assert!(plot_trajectory(&gt, &[], &[], &dir.path().join("missing/x.png")).is_err());
    }
}
