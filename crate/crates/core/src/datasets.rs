//! Recorded sequences: depth PNGs listed in a manifest, and TUM-format
//! trajectories (`timestamp tx ty tz qx qy qz qw`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::likelihood::DepthImage;
use crate::particle_filter::OdometryDelta;
use crate::projection::{CameraIntrinsics, Pose};
use crate::sim::{TimedPose, Trajectory};

/// Raw depth units per meter unless a manifest says otherwise.
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("need at least 2 poses to form deltas, found {0}")]
    TooFewPoses(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    /// (timestamp s, depth image path), paths resolved against the manifest directory.
    pub frames: Vec<(f64, PathBuf)>,
    pub groundtruth: Option<PathBuf>,
    /// Raw units per meter.
    pub scale: f64,
    pub intrinsics: CameraIntrinsics,
}

impl SequenceManifest {
    pub fn new(
        frames: Vec<(f64, PathBuf)>,
        groundtruth: Option<PathBuf>,
        scale: f64,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, DatasetError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DatasetError::Invalid(format!("depth scale must be positive, got {scale}")));
        }
        for (i, w) in frames.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(DatasetError::Invalid(format!(
                    "frame timestamps not strictly increasing at entry {}",
                    i + 1
                )));
            }
        }
        Ok(Self { frames, groundtruth, scale, intrinsics })
    }

    /// Parses a manifest. Header comments `# scale: <int>`, `# intrinsics: f cx cy
    /// width height` (required) and `# groundtruth: <path>` are recognized; other
    /// comments are ignored.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let perr = |line: usize, message: String| DatasetError::Parse { path: path.to_path_buf(), line, message };
        let mut scale = DEFAULT_DEPTH_SCALE;
        let mut intrinsics = None;
        let mut groundtruth = None;
        let mut frames = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() {
                continue;
            }
            if let Some(comment) = body.strip_prefix('#') {
                let Some((key, value)) = comment.split_once(':') else { continue };
                let value = value.trim();
                match key.trim() {
                    "scale" => {
                        scale = value
                            .parse::<u32>()
                            .ok()
                            .filter(|s| *s > 0)
                            .ok_or_else(|| perr(line, format!("bad scale '{value}'")))?
                            as f64;
                    }
                    "intrinsics" => {
                        let t: Vec<&str> = value.split_whitespace().collect();
                        if t.len() != 5 {
                            return Err(perr(line, "intrinsics need f cx cy width height".into()));
                        }
                        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(line, format!("bad number '{s}'")));
                        let dim = |s: &str| s.parse::<usize>().map_err(|_| perr(line, format!("bad dimension '{s}'")));
                        let k = CameraIntrinsics::new(num(t[0])?, num(t[1])?, num(t[2])?, dim(t[3])?, dim(t[4])?)
                            .map_err(|e| perr(line, e.to_string()))?;
                        intrinsics = Some(k);
                    }
                    "groundtruth" => groundtruth = Some(base.join(value)),
                    _ => {}
                }
                continue;
            }
            let mut it = body.split_whitespace();
            let (Some(ts), Some(file), None) = (it.next(), it.next(), it.next()) else {
                return Err(perr(line, "expected 'timestamp path'".into()));
            };
            let ts: f64 = ts
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite())
                .ok_or_else(|| perr(line, format!("bad timestamp '{ts}'")))?;
            if let Some((prev, _)) = frames.last() {
                if !(ts > *prev) {
                    return Err(perr(line, "timestamps must be strictly increasing".into()));
                }
            }
            frames.push((ts, base.join(file)));
        }
        let intrinsics = intrinsics.ok_or_else(|| perr(0, "missing '# intrinsics:' header".into()))?;
        Self::new(frames, groundtruth, scale, intrinsics)
    }

    /// Writes the manifest; frame and ground-truth paths are written relative to
    /// `path`'s directory when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rel = |p: &Path| p.strip_prefix(&base).unwrap_or(p).display().to_string();
        let k = &self.intrinsics;
        let mut out = String::new();
        out.push_str(&format!("# scale: {}\n", self.scale));
        out.push_str(&format!("# intrinsics: {} {} {} {} {}\n", k.f, k.cx, k.cy, k.width, k.height));
        if let Some(gt) = &self.groundtruth {
            out.push_str(&format!("# groundtruth: {}\n", rel(gt)));
        }
        for (t, p) in &self.frames {
            out.push_str(&format!("{t:.9} {}\n", rel(p)));
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    pub fn load_frame(&self, index: usize) -> Result<DepthImage, DatasetError> {
        read_depth_image(&self.frames[index].1, self.scale, &self.intrinsics)
    }

    /// Decodes frames in order on a helper thread, one image ahead of the consumer.
    pub fn prefetch(&self) -> impl Iterator<Item = (f64, Result<DepthImage, DatasetError>)> {
        let (tx, rx) = mpsc::sync_channel(1);
        let frames = self.frames.clone();
        let (scale, intrinsics) = (self.scale, self.intrinsics);
        thread::spawn(move || {
            for (t, p) in frames {
                if tx.send((t, read_depth_image(&p, scale, &intrinsics))).is_err() {
                    break;
                }
            }
        });
        rx.into_iter()
    }
}

/// Reads a 16-bit single-channel PNG; depth = raw / scale, raw 0 is invalid.
pub fn read_depth_image(
    path: impl AsRef<Path>,
    scale: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<DepthImage, DatasetError> {
    let path = path.as_ref();
    let ierr = |message: String| DatasetError::Image { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| ierr(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(ierr(format!("expected 16-bit grayscale, found {color:?} {depth:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| ierr("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ierr(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if (w, h) != (intrinsics.width, intrinsics.height) {
        return Err(ierr(format!("image is {w}x{h}, intrinsics expect {}x{}", intrinsics.width, intrinsics.height)));
    }
    let depths = (0..h)
        .flat_map(|v| {
            let row = &buf[v * info.line_size..v * info.line_size + 2 * w];
            row.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
        })
        .map(|raw| if raw == 0 { 0.0 } else { raw as f64 / scale })
        .collect();
    DepthImage::new(*intrinsics, depths).map_err(|e| ierr(e.to_string()))
}

/// Writes depths as 16-bit PNG (`round(d · scale)`, saturating; invalid → 0).
pub fn write_depth_image(image: &DepthImage, path: impl AsRef<Path>, scale: f64) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let ierr = |message: String| DatasetError::Image { path: path.to_path_buf(), message };
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| ierr(e.to_string()))?;
    let data: Vec<u8> = image
        .depths()
        .iter()
        .flat_map(|d| {
            let raw =
                if DepthImage::is_valid_depth(*d) { (d * scale).round().clamp(0.0, u16::MAX as f64) as u16 } else { 0 };
            raw.to_be_bytes()
        })
        .collect();
    writer.write_image_data(&data).map_err(|e| ierr(e.to_string()))?;
    writer.finish().map_err(|e| ierr(e.to_string()))
}

/// Orientation quaternion of a pose (camera-to-world).
pub fn pose_quaternion(pose: &Pose) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&pose.orientation())
}

pub fn parse_tum_line(body: &str) -> Result<TimedPose, String> {
    let v: Vec<f64> = body
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("bad number '{t}'")))
        .collect::<Result<_, _>>()?;
    if v.len() != 8 {
        return Err(format!("expected 8 fields, found {}", v.len()));
    }
    let q = Quaternion::new(v[7], v[4], v[5], v[6]);
    if !(q.norm() > 1e-6) {
        return Err("zero quaternion".into());
    }
    let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    Ok(TimedPose { timestamp: v[0], pose: Pose::from_rotation(Vector3::new(v[1], v[2], v[3]), &rot) })
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let perr = |line: usize, message: String| DatasetError::Parse { path: path.to_path_buf(), line, message };
    let mut samples: Vec<TimedPose> = Vec::new();
    for (i, raw) in BufReader::new(file).lines().enumerate() {
        let raw = raw.map_err(io_err(path))?;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let s = parse_tum_line(body).map_err(|m| perr(i + 1, m))?;
        if let Some(prev) = samples.last() {
            if !(s.timestamp > prev.timestamp) {
                return Err(perr(i + 1, "timestamps must be strictly increasing".into()));
            }
        }
        samples.push(s);
    }
    Trajectory::new(samples).map_err(|e| DatasetError::Invalid(e.to_string()))
}

/// Comment line that opens every written trajectory.
pub const TUM_HEADER: &str = "# timestamp tx ty tz qx qy qz qw";

pub fn format_tum_line(s: &TimedPose) -> String {
    let p = &s.pose.position;
    let q = pose_quaternion(&s.pose);
    // Canonical sign keeps output deterministic for ±q.
    let q = if q.w < 0.0 { UnitQuaternion::new_unchecked(-q.into_inner()) } else { q };
    format!("{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", s.timestamp, p.x, p.y, p.z, q.i, q.j, q.k, q.w)
}

pub fn write_trajectory_to(traj: &Trajectory, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TUM_HEADER}")?;
    for s in traj.samples() {
        writeln!(out, "{}", format_tum_line(s))?;
    }
    out.flush()
}

pub fn write_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_trajectory_to(traj, BufWriter::new(file)).map_err(io_err(path))
}

/// Exact relative motion between consecutive poses.
pub fn deltas_from_trajectory(traj: &Trajectory) -> Result<Vec<OdometryDelta>, DatasetError> {
    if traj.len() < 2 {
        return Err(DatasetError::TooFewPoses(traj.len()));
    }
    Ok(traj.samples().windows(2).map(|w| OdometryDelta::between(&w[0].pose, &w[1].pose)).collect())
}
