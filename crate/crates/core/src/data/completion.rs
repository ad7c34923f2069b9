//! Sparse-to-dense depth completion backends.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{load_depth_png, save_depth_png, save_rgb};
use crate::error::{Error, Result};
use crate::flow::DepthMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthBackend {
    /// Dense maps saved as `<dir>/<key>.png` (16-bit, metres × 256).
    Precomputed { dir: PathBuf },
    /// A completion program invoked as `program [args..] SPARSE.png RGB.png OUT.png`.
    External { program: PathBuf, args: Vec<String> },
    /// Dilation, nearest-valid fill and a 3×3 blur of the filled pixels.
    Fallback,
    /// Use the dense depth already attached to the pair (synthetic data).
    GroundTruth,
}

pub fn complete_depth(sparse: &DepthMap, rgb: &Tensor, backend: &DepthBackend, key: &str) -> Result<DepthMap> {
    let (w, h) = (sparse.width(), sparse.height());
    if rgb.rank() != 3 || rgb.shape()[1] != h || rgb.shape()[2] != w {
        return Err(Error::shape(format!("sparse depth {w}×{h} does not match image {:?}", rgb.shape())));
    }
    let dense = match backend {
        DepthBackend::Fallback => fallback_completion(sparse)?,
        DepthBackend::Precomputed { dir } => {
            let path = dir.join(format!("{key}.png"));
            if !path.is_file() {
                return Err(Error::BackendUnavailable(format!("no precomputed depth at {}", path.display())));
            }
            load_depth_png(&path)?
        }
        DepthBackend::External { program, args } => run_external(program, args, sparse, rgb, key)?,
        DepthBackend::GroundTruth => {
            return Err(Error::BackendUnavailable("ground-truth depth is only available on synthetic pairs".into()))
        }
    };
    if dense.width() != w || dense.height() != h {
        return Err(Error::shape(format!("completed depth is {}×{}, expected {w}×{h}", dense.width(), dense.height())));
    }
    if !dense.is_dense() {
        return Err(Error::BackendUnavailable(format!(
            "completion backend left {} invalid pixels",
            w * h - dense.valid_count()
        )));
    }
    Ok(dense)
}

fn run_external(program: &PathBuf, args: &[String], sparse: &DepthMap, rgb: &Tensor, key: &str) -> Result<DepthMap> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("lvo-complete-{}-{n}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let safe: String = key.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    let (sp, rp, op) = (dir.join(format!("{safe}_sparse.png")), dir.join(format!("{safe}_rgb.png")), dir.join(format!("{safe}_dense.png")));
    let result = (|| {
        save_depth_png(sparse, &sp)?;
        save_rgb(rgb, &rp)?;
        let status = Command::new(program)
            .args(args)
            .arg(&sp)
            .arg(&rp)
            .arg(&op)
            .status()
            .map_err(|e| Error::BackendUnavailable(format!("cannot run {}: {e}", program.display())))?;
        if !status.success() {
            return Err(Error::BackendUnavailable(format!("{} exited with {status}", program.display())));
        }
        load_depth_png(&op)
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

/// Classical completion: a 5×5 min-depth dilation, breadth-first nearest-valid
/// fill, then a 3×3 mean over the pixels that were not measured.
pub fn fallback_completion(sparse: &DepthMap) -> Result<DepthMap> {
    let (w, h) = (sparse.width(), sparse.height());
    if sparse.valid_count() == 0 {
        return Err(Error::InvalidInput("cannot complete a depth map with no valid pixels".into()));
    }
    let src = sparse.depth();
    let measured = sparse.valid();
    let mut d: Vec<f64> = src.to_vec();
    let mut valid: Vec<bool> = measured.to_vec();

    for y in 0..h {
        for x in 0..w {
            if measured[y * w + x] {
                continue;
            }
            let mut best = f64::INFINITY;
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2)..(x + 3).min(w) {
                    let j = yy * w + xx;
                    if measured[j] && src[j] < best {
                        best = src[j];
                    }
                }
            }
            if best.is_finite() {
                d[y * w + x] = best;
                valid[y * w + x] = true;
            }
        }
    }

    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| valid[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !valid[j] {
                valid[j] = true;
                d[j] = d[i];
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }

    let mut out = d.clone();
    for y in 0..h {
        for x in 0..w {
            if measured[y * w + x] {
                continue;
            }
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += d[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    DepthMap::from_raw(w, h, out)
}
