//! Gaussian mixture environment maps.
//!
//! A [`GmmMap`] is the whole environment model: a weighted set of 3D Gaussian
//! components in the world frame. This module covers density queries, EM
//! fitting from a point cloud, sampling, and the `GMM1` binary format whose
//! payload is 40 bytes per component.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::rng;

/// Smallest eigenvalue a stored covariance may have (m²).
pub const COVARIANCE_FLOOR: f64 = 1e-6;
/// Per-point log density never drops below this value.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Magic bytes opening a serialized map.
pub const MAGIC: &[u8; 4] = b"GMM1";
/// Serialized size of one component: ten little-endian f32 values.
pub const BYTES_PER_COMPONENT: usize = 40;
/// Upper bound on the serialized header (magic, count, frame id).
pub const MAX_HEADER_BYTES: usize = 64;
const FIXED_HEADER_BYTES: usize = 12;
/// Longest frame id that still fits the header bound.
pub const MAX_FRAME_ID_BYTES: usize = MAX_HEADER_BYTES - FIXED_HEADER_BYTES;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("component weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("component parameters must be finite")]
    NonFinite,
    #[error("covariance is not symmetric")]
    Asymmetric,
    #[error("covariance is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("a map needs at least one component")]
    Empty,
    #[error("mixture weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("cannot fit {components} components to {points} points")]
    InsufficientPoints { points: usize, components: usize },
    #[error("point cloud contains non-finite coordinates")]
    NonFinitePoint,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated stream: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after the last component")]
    TrailingBytes(usize),
    #[error("frame id is {0} bytes, at most {MAX_FRAME_ID_BYTES} fit the header")]
    FrameIdTooLong(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Clamps the eigenvalues of a symmetric matrix at [`COVARIANCE_FLOOR`].
///
/// Matrices already above the floor are returned symmetrized but otherwise
/// untouched.
pub fn regularize_covariance(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= COVARIANCE_FLOOR {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
    let out = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

fn is_symmetric(cov: &Matrix3<f64>) -> bool {
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    (cov - cov.transpose()).amax() <= 1e-12 * scale
}

/// One weighted 3D Gaussian of the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    weight: f64,
    mean: Vector3<f64>,
    covariance: Matrix3<f64>,
}

impl GmmComponent {
    /// Validates and regularizes a component.
    ///
    /// Covariances must be symmetric and PSD up to rounding; eigenvalues
    /// below the floor are lifted to it.
    pub fn new(weight: f64, mean: Vector3<f64>, covariance: Matrix3<f64>) -> Result<Self, MapError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(MapError::InvalidWeight(weight));
        }
        if !mean.iter().chain(covariance.iter()).all(|v| v.is_finite()) {
            return Err(MapError::NonFinite);
        }
        if !is_symmetric(&covariance) {
            return Err(MapError::Asymmetric);
        }
        let sym = (covariance + covariance.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if lo < 0.0 && -lo > 1e-6 * hi.abs().max(COVARIANCE_FLOOR) {
            return Err(MapError::NotPsd(lo));
        }
        Ok(Self { weight, mean, covariance: regularize_covariance(&sym) })
    }

    /// Builds a component whose covariance is known to be valid already
    /// (e.g. a rotated copy of a valid one).
    pub(crate) fn from_parts_unchecked(weight: f64, mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Self { weight, mean, covariance: (covariance + covariance.transpose()) * 0.5 }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &Vector3<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    pub(crate) fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Precomputed quantities for fast log-density evaluation of one component.
#[derive(Debug, Clone)]
pub(crate) struct ComponentEval {
    pub mean: Vector3<f64>,
    /// Upper triangle of the precision matrix: xx, xy, xz, yy, yz, zz.
    pub precision: [f64; 6],
    /// ln λ − (3/2) ln 2π − ½ ln det Σ.
    pub log_coef: f64,
    /// Square root of the largest covariance eigenvalue.
    pub sigma_max: f64,
}

impl ComponentEval {
    fn new(c: &GmmComponent) -> Self {
        let cov = c.covariance;
        let chol = cov.cholesky().expect("regularized covariance is positive definite");
        let inv = chol.inverse();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let eig = SymmetricEigen::new(cov);
        Self {
            mean: c.mean,
            precision: [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)], inv[(1, 1)], inv[(1, 2)], inv[(2, 2)]],
            log_coef: c.weight.ln() - 1.5 * LN_2PI - 0.5 * log_det,
            sigma_max: eig.eigenvalues.max().max(0.0).sqrt(),
        }
    }

    /// Weighted log density ln(λ N(p; μ, Σ)).
    #[inline]
    pub fn log_term(&self, p: &Vector3<f64>) -> f64 {
        let dx = p.x - self.mean.x;
        let dy = p.y - self.mean.y;
        let dz = p.z - self.mean.z;
        let [xx, xy, xz, yy, yz, zz] = self.precision;
        let q = xx * dx * dx + yy * dy * dy + zz * dz * dz + 2.0 * (xy * dx * dy + xz * dx * dz + yz * dy * dz);
        self.log_coef - 0.5 * q
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    #[inline]
    pub fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    #[inline]
    pub fn push(&mut self, t: f64) {
        if t > self.max {
            self.sum = self.sum * (self.max - t).exp() + 1.0;
            self.max = t;
        } else {
            self.sum += (t - self.max).exp();
        }
    }

    /// ln Σ exp(t); −∞ when empty.
    #[inline]
    pub fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// An immutable Gaussian mixture over world coordinates.
#[derive(Debug, Clone)]
pub struct GmmMap {
    components: Vec<GmmComponent>,
    frame_id: String,
    evals: Vec<ComponentEval>,
}

impl PartialEq for GmmMap {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components && self.frame_id == other.frame_id
    }
}

impl GmmMap {
    /// Builds a map; weights must already sum to one within 1e-9.
    pub fn new(components: Vec<GmmComponent>, frame_id: impl Into<String>) -> Result<Self, MapError> {
        if components.is_empty() {
            return Err(MapError::Empty);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MapError::WeightSum(total));
        }
        let evals = components.iter().map(ComponentEval::new).collect();
        Ok(Self { components, frame_id: frame_id.into(), evals })
    }

    /// Like [`GmmMap::new`] but rescales the weights to sum to one first.
    pub fn normalized(components: Vec<GmmComponent>, frame_id: impl Into<String>) -> Result<Self, MapError> {
        if components.is_empty() {
            return Err(MapError::Empty);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components.into_iter().map(|c| {
            let w = c.weight / total;
            c.with_weight(w)
        });
        Self::new(components.collect(), frame_id)
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub(crate) fn evals(&self) -> &[ComponentEval] {
        &self.evals
    }

    /// ln p(point), evaluated with log-sum-exp and floored at [`LOG_DENSITY_FLOOR`].
    pub fn log_density_at(&self, point: &Vector3<f64>) -> f64 {
        debug_assert!(point.iter().all(|v| v.is_finite()));
        let mut acc = LogSumExp::new();
        for e in &self.evals {
            acc.push(e.log_term(point));
        }
        acc.value().max(LOG_DENSITY_FLOOR)
    }

    /// Mixture density Σ λᵢ N(point; μᵢ, Σᵢ) in 1/m³.
    pub fn density_at(&self, point: &Vector3<f64>) -> f64 {
        self.log_density_at(point).exp()
    }

    /// Axis-aligned box holding every component mean.
    pub fn mean_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for c in &self.components {
            lo = lo.inf(&c.mean);
            hi = hi.sup(&c.mean);
        }
        (lo, hi)
    }

    /// Draws `n` i.i.d. points: component ∝ λ, then μ + L z with Σ = L Lᵀ.
    pub fn sample_points(&self, n: usize, seed: u64) -> PointCloud {
        let mut rng = rng::seeded(seed);
        let factors: Vec<Matrix3<f64>> =
            self.components.iter().map(|c| c.covariance.cholesky().expect("valid covariance").l()).collect();
        let mut cumulative = Vec::with_capacity(self.components.len());
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            cumulative.push(acc);
        }
        let points = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
                let z = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                self.components[k].mean + factors[k] * z
            })
            .collect();
        PointCloud { points }
    }

    /// Size of the serialized component payload, without serializing.
    pub fn memory_footprint(&self) -> usize {
        self.components.len() * BYTES_PER_COMPONENT
    }

    /// Encodes the map in the `GMM1` format.
    pub fn serialize(&self) -> Result<Vec<u8>, MapError> {
        let mut out = Vec::with_capacity(FIXED_HEADER_BYTES + self.frame_id.len() + self.memory_footprint());
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MapError> {
        let id = self.frame_id.as_bytes();
        if id.len() > MAX_FRAME_ID_BYTES {
            return Err(MapError::FrameIdTooLong(id.len()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&(self.components.len() as u32).to_le_bytes())?;
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for c in &self.components {
            let s = &c.covariance;
            let values = [
                c.weight,
                c.mean.x,
                c.mean.y,
                c.mean.z,
                s[(0, 0)],
                s[(0, 1)],
                s[(0, 2)],
                s[(1, 1)],
                s[(1, 2)],
                s[(2, 2)],
            ];
            for v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Decodes a `GMM1` stream.
    ///
    /// Weights summing within [0.999, 1.001] are renormalized; anything else is
    /// rejected as corrupt.
    pub fn deserialize(bytes: &[u8]) -> Result<Self, MapError> {
        if bytes.len() < FIXED_HEADER_BYTES {
            return Err(MapError::MalformedHeader(format!(
                "stream has {} bytes, header needs {FIXED_HEADER_BYTES}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(MapError::MalformedHeader("bad magic".into()));
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let count = read_u32(4);
        let id_len = read_u32(8);
        if count == 0 {
            return Err(MapError::Empty);
        }
        if id_len > MAX_FRAME_ID_BYTES {
            return Err(MapError::MalformedHeader(format!("frame id length {id_len} exceeds header bound")));
        }
        let header = FIXED_HEADER_BYTES + id_len;
        if bytes.len() < header {
            return Err(MapError::Truncated { expected: header, found: bytes.len() });
        }
        let frame_id = std::str::from_utf8(&bytes[FIXED_HEADER_BYTES..header])
            .map_err(|_| MapError::MalformedHeader("frame id is not UTF-8".into()))?
            .to_owned();
        let expected = count
            .checked_mul(BYTES_PER_COMPONENT)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| MapError::MalformedHeader("component count overflows".into()))?;
        if bytes.len() < expected {
            return Err(MapError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(MapError::TrailingBytes(bytes.len() - expected));
        }

        let mut components = Vec::with_capacity(count);
        for chunk in bytes[header..].chunks_exact(BYTES_PER_COMPONENT) {
            let mut v = [0f64; 10];
            for (k, raw) in chunk.chunks_exact(4).enumerate() {
                v[k] = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
            }
            let mean = Vector3::new(v[1], v[2], v[3]);
            let cov = Matrix3::new(v[4], v[5], v[6], v[5], v[7], v[8], v[6], v[8], v[9]);
            components.push(GmmComponent::new(v[0], mean, cov)?);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(0.999..=1.001).contains(&total) {
            return Err(MapError::WeightSum(total));
        }
        Self::normalized(components, frame_id)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::deserialize(&fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        fs::write(path, self.serialize()?)?;
        Ok(())
    }
}

/// Raw 3D samples in the world frame, in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, MapError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(MapError::NonFinitePoint);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads `.ply` files as ASCII PLY and anything else as XYZ text.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, MapError> {
        let path = path.as_ref();
        let file = BufReader::new(fs::File::open(path)?);
        let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
        if is_ply {
            Self::read_ply(file)
        } else {
            Self::read_xyz(file)
        }
    }

    /// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
    /// Extra columns after the third are ignored.
    pub fn read_xyz<R: Read>(reader: R) -> Result<Self, MapError> {
        let mut points = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            points.push(parse_xyz(text.split_whitespace(), i + 1)?);
        }
        Self::new(points)
    }

    /// ASCII PLY with a `vertex` element carrying `x`, `y`, `z` properties.
    pub fn read_ply<R: Read>(reader: R) -> Result<Self, MapError> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String), MapError> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(MapError::Parse { line: 0, message: format!("unexpected end of file in {what}") }),
            }
        };
        let (n, first) = next_line("header")?;
        if first.trim() != "ply" {
            return Err(MapError::Parse { line: n, message: "missing 'ply' magic".into() });
        }
        // (name, count, property names)
        let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
        loop {
            let (n, line) = next_line("header")?;
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("format") => {
                    if toks.next() != Some("ascii") {
                        return Err(MapError::Parse { line: n, message: "only ASCII PLY is supported".into() });
                    }
                }
                Some("element") => {
                    let name = toks.next().unwrap_or_default().to_owned();
                    let count = toks
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| MapError::Parse { line: n, message: "bad element count".into() })?;
                    elements.push((name, count, Vec::new()));
                }
                Some("property") => {
                    let toks: Vec<&str> = toks.collect();
                    let (Some(name), Some(el)) = (toks.last(), elements.last_mut()) else {
                        return Err(MapError::Parse { line: n, message: "property outside element".into() });
                    };
                    el.2.push((*name).to_owned());
                }
                Some("end_header") => break,
                Some("comment") | Some("obj_info") | None => {}
                Some(other) => {
                    return Err(MapError::Parse { line: n, message: format!("unknown header keyword '{other}'") })
                }
            }
        }
        let mut points = Vec::new();
        for (name, count, props) in &elements {
            let idx = |axis: &str| props.iter().position(|p| p == axis);
            let xyz = if name == "vertex" {
                match (idx("x"), idx("y"), idx("z")) {
                    (Some(x), Some(y), Some(z)) => Some((x, y, z)),
                    _ => return Err(MapError::Parse { line: 0, message: "vertex element lacks x/y/z".into() }),
                }
            } else {
                None
            };
            for _ in 0..*count {
                let (n, line) = next_line("body")?;
                if let Some((x, y, z)) = xyz {
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    if toks.len() < props.len() {
                        return Err(MapError::Parse { line: n, message: "too few vertex fields".into() });
                    }
                    points.push(parse_xyz([toks[x], toks[y], toks[z]].into_iter(), n)?);
                }
            }
        }
        Self::new(points)
    }

    pub fn write_xyz<W: Write>(&self, mut w: W) -> io::Result<()> {
        for p in &self.points {
            writeln!(w, "{:.9} {:.9} {:.9}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn write_ply<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", self.points.len())?;
        writeln!(w, "property double x\nproperty double y\nproperty double z\nend_header")?;
        self.write_xyz(w)
    }
}

fn parse_xyz<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<Vector3<f64>, MapError> {
    let mut v = [0.0f64; 3];
    for slot in &mut v {
        let tok = toks.next().ok_or_else(|| MapError::Parse { line, message: "expected three coordinates".into() })?;
        *slot = tok.parse().map_err(|_| MapError::Parse { line, message: format!("'{tok}' is not a number") })?;
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(MapError::Parse { line, message: "non-finite coordinate".into() });
    }
    Ok(Vector3::from(v))
}

/// EM stopping rules.
#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the log-likelihood gains less than this between iterations.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { seed: 0, max_iters: 100, tol: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub map: GmmMap,
    /// Data log-likelihood of the parameters after each M-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().expect("at least one iteration")
    }
}

/// Sufficient statistics of one EM pass, relative to the cloud centroid.
#[derive(Clone)]
struct Moments {
    log_likelihood: f64,
    mass: Vec<f64>,
    first: Vec<Vector3<f64>>,
    second: Vec<[f64; 6]>,
}

impl Moments {
    fn zeros(m: usize) -> Self {
        Self { log_likelihood: 0.0, mass: vec![0.0; m], first: vec![Vector3::zeros(); m], second: vec![[0.0; 6]; m] }
    }

    fn add_point(&mut self, k: usize, r: f64, p: &Vector3<f64>) {
        self.mass[k] += r;
        self.first[k] += p * r;
        let s = &mut self.second[k];
        s[0] += r * p.x * p.x;
        s[1] += r * p.x * p.y;
        s[2] += r * p.x * p.z;
        s[3] += r * p.y * p.y;
        s[4] += r * p.y * p.z;
        s[5] += r * p.z * p.z;
    }

    fn merge(&mut self, other: &Moments) {
        self.log_likelihood += other.log_likelihood;
        for k in 0..self.mass.len() {
            self.mass[k] += other.mass[k];
            self.first[k] += other.first[k];
            for j in 0..6 {
                self.second[k][j] += other.second[k][j];
            }
        }
    }
}

const EM_CHUNK: usize = 2048;

/// Fits an `m`-component full-covariance mixture by expectation-maximization.
///
/// Means are seeded with k-means++ and the first parameters come from the hard
/// nearest-seed partition. Covariance eigenvalues are clamped at the floor in
/// every M-step, which is the exact maximizer under that constraint, so the
/// recorded log-likelihood never decreases.
pub fn fit_em(cloud: &PointCloud, m: usize, options: EmOptions) -> Result<EmFit, MapError> {
    let n = cloud.len();
    if m == 0 || n < m {
        return Err(MapError::InsufficientPoints { points: n, components: m });
    }
    if cloud.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(MapError::NonFinitePoint);
    }
    let centroid = cloud.points.iter().sum::<Vector3<f64>>() / n as f64;
    let points: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p - centroid).collect();

    let seeds = kmeans_pp(&points, m, options.seed);
    let mut moments = Moments::zeros(m);
    for p in &points {
        let k = nearest(&seeds, p);
        moments.add_point(k, 1.0, p);
    }
    let mut params = m_step(&moments, n, None);

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..options.max_iters.max(1) {
        let evals: Vec<ComponentEval> = params.iter().map(ComponentEval::new).collect();
        let moments = e_step(&points, &evals);
        let ll = moments.log_likelihood;
        let gain = trace.last().map(|prev: &f64| ll - prev);
        trace.push(ll);
        if gain.is_some_and(|g| g < options.tol) {
            converged = true;
            break;
        }
        params = m_step(&moments, n, Some(&params));
    }
    // The trace ends with the likelihood of `params` whether or not EM stopped
    // on tolerance; evaluate the last M-step when the iteration budget ran out.
    if !converged {
        let evals: Vec<ComponentEval> = params.iter().map(ComponentEval::new).collect();
        trace.push(e_step(&points, &evals).log_likelihood);
    }

    let components = params
        .into_iter()
        .map(|c| GmmComponent::from_parts_unchecked(c.weight, c.mean + centroid, c.covariance))
        .collect();
    let map = GmmMap::normalized(components, "world")?;
    Ok(EmFit { map, log_likelihood: trace, converged })
}

fn nearest(seeds: &[Vector3<f64>], p: &Vector3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, s) in seeds.iter().enumerate() {
        let d = (p - s).norm_squared();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn kmeans_pp(points: &[Vector3<f64>], m: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = rng::seeded(seed);
    let mut seeds = Vec::with_capacity(m);
    seeds.push(points[rng.random_range(0..points.len())]);
    let mut dist: Vec<f64> = points.iter().map(|p| (p - seeds[0]).norm_squared()).collect();
    while seeds.len() < m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = dist.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let s = points[pick];
        seeds.push(s);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - s).norm_squared());
        }
    }
    seeds
}

fn e_step(points: &[Vector3<f64>], evals: &[ComponentEval]) -> Moments {
    let m = evals.len();
    let partials: Vec<Moments> = points
        .par_chunks(EM_CHUNK)
        .map(|chunk| {
            let mut acc = Moments::zeros(m);
            let mut terms = vec![0.0; m];
            let mut near: Vec<(usize, f64)> = Vec::new();
            for p in chunk {
                let mut max = f64::NEG_INFINITY;
                for (t, e) in terms.iter_mut().zip(evals) {
                    *t = e.log_term(p);
                    max = max.max(*t);
                }
                // Responsibilities below e^-40 of the largest are dropped.
                near.clear();
                near.extend(
                    terms.iter().enumerate().filter(|(_, t)| **t > max - 40.0).map(|(k, t)| (k, (t - max).exp())),
                );
                let sum: f64 = near.iter().map(|(_, e)| e).sum();
                acc.log_likelihood += max + sum.ln();
                for &(k, e) in &near {
                    acc.add_point(k, e / sum, p);
                }
            }
            acc
        })
        .collect();
    let mut total = Moments::zeros(m);
    for part in &partials {
        total.merge(part);
    }
    total
}

fn m_step(moments: &Moments, n: usize, previous: Option<&[GmmComponent]>) -> Vec<GmmComponent> {
    (0..moments.mass.len())
        .map(|k| {
            let mass = moments.mass[k];
            if mass < 1e-10 {
                // Starved component: keep its shape with a vanishing weight.
                let (mean, cov) = match previous {
                    Some(prev) => (prev[k].mean, prev[k].covariance),
                    None => (Vector3::zeros(), Matrix3::identity() * COVARIANCE_FLOOR),
                };
                return GmmComponent::from_parts_unchecked(1e-10 / n as f64, mean, cov);
            }
            let mean = moments.first[k] / mass;
            let s = &moments.second[k];
            let second = Matrix3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5]) / mass;
            let cov = regularize_covariance(&(second - mean * mean.transpose()));
            GmmComponent::from_parts_unchecked(mass / n as f64, mean, cov)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::Normal;

    fn iso(weight: f64, mean: [f64; 3], var: f64) -> GmmComponent {
        GmmComponent::new(weight, Vector3::from(mean), Matrix3::identity() * var).unwrap()
    }

    fn random_map(seed: u64, m: usize) -> GmmMap {
        let mut rng = rng::seeded(seed);
        let comps = (0..m)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let cov = a * a.transpose() + Matrix3::identity() * 0.05;
                let mean = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                GmmComponent::new(rng.random_range(0.1..1.0), mean, cov).unwrap()
            })
            .collect();
        GmmMap::normalized(comps, "world").unwrap()
    }

    /// Direct Σ λ N(p) with an explicit inverse and determinant.
    fn naive_density(map: &GmmMap, p: &Vector3<f64>) -> f64 {
        map.components()
            .iter()
            .map(|c| {
                let d = p - c.mean();
                let inv = c.covariance().try_inverse().unwrap();
                let q = (d.transpose() * inv * d)[0];
                c.weight() * (-0.5 * q).exp()
                    / ((2.0 * std::f64::consts::PI).powf(1.5) * c.covariance().determinant().sqrt())
            })
            .sum()
    }

    #[test]
    fn unit_gaussian_density_at_mean() {
        let map = GmmMap::new(vec![iso(1.0, [0.0; 3], 1.0)], "w").unwrap();
        assert_relative_eq!(
            map.density_at(&Vector3::zeros()),
            (2.0 * std::f64::consts::PI).powf(-1.5),
            max_relative = 1e-14
        );
        assert_relative_eq!(map.density_at(&Vector3::zeros()), 0.06349, epsilon = 1e-5);
    }

    #[test]
    fn duplicated_halves_match_single_component() {
        let one = GmmMap::new(vec![iso(1.0, [1.0, 2.0, 3.0], 0.3)], "w").unwrap();
        let two = GmmMap::new(vec![iso(0.5, [1.0, 2.0, 3.0], 0.3), iso(0.5, [1.0, 2.0, 3.0], 0.3)], "w").unwrap();
        for p in [Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.0, 0.5, 2.0)] {
            assert_relative_eq!(one.density_at(&p), two.density_at(&p), max_relative = 1e-13);
        }
    }

    #[test]
    fn density_matches_direct_sum() {
        let map = random_map(11, 5);
        let mut rng = rng::seeded(12);
        for _ in 0..100 {
            let p = Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0));
            assert_relative_eq!(map.density_at(&p), naive_density(&map, &p), max_relative = 1e-12);
        }
    }

    #[test]
    fn far_query_hits_floor_not_zero() {
        let map = GmmMap::new(vec![iso(1.0, [0.0; 3], 1e-4)], "w").unwrap();
        let d = map.density_at(&Vector3::new(100.0, 0.0, 0.0));
        assert!(d > 0.0);
        assert_eq!(map.log_density_at(&Vector3::new(100.0, 0.0, 0.0)), LOG_DENSITY_FLOOR);
    }

    #[test]
    fn component_validation() {
        let m = Vector3::zeros();
        assert!(matches!(GmmComponent::new(0.0, m, Matrix3::identity()), Err(MapError::InvalidWeight(_))));
        let mut asym = Matrix3::identity();
        asym[(0, 1)] = 0.5;
        assert!(matches!(GmmComponent::new(1.0, m, asym), Err(MapError::Asymmetric)));
        assert!(matches!(GmmComponent::new(1.0, m, -Matrix3::identity()), Err(MapError::NotPsd(_))));
        // Rank-deficient input is lifted to the floor.
        let flat = GmmComponent::new(1.0, m, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0))).unwrap();
        let eig = SymmetricEigen::new(*flat.covariance());
        assert_relative_eq!(eig.eigenvalues.min(), COVARIANCE_FLOOR, max_relative = 1e-9);
        assert!(GmmMap::new(vec![], "w").is_err());
        assert!(matches!(GmmMap::new(vec![iso(0.7, [0.0; 3], 1.0)], "w"), Err(MapError::WeightSum(_))));
    }

    #[test]
    fn footprint_is_forty_bytes_per_component() {
        for (m, bytes) in [(1, 40), (1000, 40_000), (2500, 100_000)] {
            let comps = (0..m).map(|i| iso(1.0, [i as f64, 0.0, 0.0], 0.1)).collect();
            let map = GmmMap::normalized(comps, "world").unwrap();
            assert_eq!(map.memory_footprint(), bytes);
        }
    }

    #[test]
    fn serialized_layout() {
        let map = random_map(3, 1000);
        let bytes = map.serialize().unwrap();
        let header = bytes.len() - 40_000;
        assert_eq!(header, 12 + "world".len());
        assert!(header <= MAX_HEADER_BYTES);
        assert_eq!(&bytes[..4], b"GMM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1000);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(&bytes[12..17], b"world");
        let w0 = f32::from_le_bytes(bytes[17..21].try_into().unwrap());
        assert_eq!(w0, map.components()[0].weight() as f32);
    }

    #[test]
    fn deserialize_errors() {
        assert!(matches!(GmmMap::deserialize(&[]), Err(MapError::MalformedHeader(_))));
        assert!(matches!(GmmMap::deserialize(b"GMM2\0\0\0\0\0\0\0\0"), Err(MapError::MalformedHeader(_))));
        let bytes = random_map(4, 3).serialize().unwrap();
        assert!(matches!(GmmMap::deserialize(&bytes[..bytes.len() - 1]), Err(MapError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(GmmMap::deserialize(&extra), Err(MapError::TrailingBytes(1))));

        // Flip the sign of the first component's xx variance.
        let mut bad = bytes.clone();
        let at = 12 + 5 + 16;
        let v = -f32::from_le_bytes(bad[at..at + 4].try_into().unwrap());
        bad[at..at + 4].copy_from_slice(&v.to_le_bytes());
        assert!(matches!(GmmMap::deserialize(&bad), Err(MapError::NotPsd(_))));

        // Halve every weight: sum 0.5 is outside the renormalization band.
        let mut light = bytes.clone();
        for k in 0..3 {
            let at = 17 + 40 * k;
            let w = 0.5 * f32::from_le_bytes(light[at..at + 4].try_into().unwrap());
            light[at..at + 4].copy_from_slice(&w.to_le_bytes());
        }
        assert!(matches!(GmmMap::deserialize(&light), Err(MapError::WeightSum(_))));
    }

    #[test]
    fn long_frame_id_rejected() {
        let map = GmmMap::new(vec![iso(1.0, [0.0; 3], 1.0)], "x".repeat(53)).unwrap();
        assert!(matches!(map.serialize(), Err(MapError::FrameIdTooLong(53))));
        let ok = GmmMap::new(vec![iso(1.0, [0.0; 3], 1.0)], "x".repeat(52)).unwrap();
        assert_eq!(ok.serialize().unwrap().len(), 64 + 40);
    }

    #[test]
    fn sample_covariance_matches_isotropic_component() {
        let sigma2 = 0.25;
        let map = GmmMap::new(vec![iso(1.0, [1.0, -1.0, 2.0], sigma2)], "w").unwrap();
        let cloud = map.sample_points(100_000, 5);
        let n = cloud.len() as f64;
        let mean = cloud.points.iter().sum::<Vector3<f64>>() / n;
        let cov = cloud.points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { sigma2 } else { 0.0 };
                assert!((cov[(i, j)] - target).abs() <= 0.05 * sigma2, "cov[{i},{j}] = {}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn sample_component_fractions() {
        let map = GmmMap::new(vec![iso(0.9, [-50.0, 0.0, 0.0], 1.0), iso(0.1, [50.0, 0.0, 0.0], 1.0)], "w").unwrap();
        let cloud = map.sample_points(100_000, 6);
        let first = cloud.points.iter().filter(|p| p.x < 0.0).count() as f64 / 1e5;
        assert!((0.89..=0.91).contains(&first), "{first}");
        let one = map.sample_points(1, 1);
        assert_eq!(one.len(), 1);
        assert!(one.points[0].iter().all(|v| v.is_finite()));
    }

    fn cluster_cloud(seed: u64, centers: &[[f64; 3]], sigma: f64, per: usize) -> PointCloud {
        let mut rng = rng::seeded(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut points = Vec::new();
        for c in centers {
            for _ in 0..per {
                points.push(Vector3::new(
                    c[0] + noise.sample(&mut rng),
                    c[1] + noise.sample(&mut rng),
                    c[2] + noise.sample(&mut rng),
                ));
            }
        }
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn em_recovers_separated_clusters() {
        let centers = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 5.0]];
        let sigma = 0.3;
        let cloud = cluster_cloud(21, &centers, sigma, 1000);
        let fit = fit_em(&cloud, 3, EmOptions { seed: 2, max_iters: 200, tol: 1e-8 }).unwrap();
        let bound = 3.0 * sigma / (1000f64).sqrt();
        for c in centers {
            let c = Vector3::from(c);
            let best = fit.map.components().iter().map(|k| (k.mean() - c).amax()).fold(f64::INFINITY, f64::min);
            assert!(best <= bound, "mean error {best} > {bound}");
        }
    }

    #[test]
    fn em_single_component_is_sample_moments() {
        let cloud = cluster_cloud(8, &[[1.0, 2.0, 3.0]], 0.5, 500);
        let fit = fit_em(&cloud, 1, EmOptions::default()).unwrap();
        let n = cloud.len() as f64;
        let mean = cloud.points.iter().sum::<Vector3<f64>>() / n;
        let cov = cloud.points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
        let c = &fit.map.components()[0];
        assert_relative_eq!(c.weight(), 1.0);
        assert!((c.mean() - mean).amax() < 1e-12);
        assert!((c.covariance() - cov).amax() < 1e-12);
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let cloud = cluster_cloud(9, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.5, 0.0], [2.0, 2.0, 1.0]], 0.6, 300);
        for seed in 0..5 {
            let fit = fit_em(&cloud, 6, EmOptions { seed, max_iters: 60, tol: 0.0 }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_handles_degenerate_planar_cloud() {
        // Points on z = 0 exactly: every covariance would be singular without the floor.
        let mut rng = rng::seeded(4);
        let pts = (0..400).map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0)).collect();
        let fit = fit_em(&PointCloud::new(pts).unwrap(), 4, EmOptions::default()).unwrap();
        for c in fit.map.components() {
            let eig = SymmetricEigen::new(*c.covariance());
            assert!(eig.eigenvalues.min() >= COVARIANCE_FLOOR * (1.0 - 1e-9));
        }
    }

    #[test]
    fn em_rejects_too_few_points() {
        let cloud = cluster_cloud(1, &[[0.0; 3]], 1.0, 2);
        assert!(matches!(fit_em(&cloud, 3, EmOptions::default()), Err(MapError::InsufficientPoints { .. })));
        assert!(fit_em(&cloud, 0, EmOptions::default()).is_err());
    }

    #[test]
    fn xyz_and_ply_readers() {
        let xyz = "# comment\n1 2 3\n\n4.5 -1 0 extra\n";
        let cloud = PointCloud::read_xyz(xyz.as_bytes()).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.5, -1.0, 0.0)]);
        let err = PointCloud::read_xyz("1 2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MapError::Parse { line: 1, .. }));

        let ply = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float y\nproperty float x\n\
                   property float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\n\
                   end_header\n1 2 3 255\n4 5 6 0\n";
        let cloud = PointCloud::read_ply(ply.as_bytes()).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(2.0, 1.0, 3.0), Vector3::new(5.0, 4.0, 6.0)]);
        assert!(PointCloud::read_ply("ply\nformat binary_little_endian 1.0\nend_header\n".as_bytes()).is_err());
        assert!(PointCloud::read_ply("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n".as_bytes()).is_err());

        let mut buf = Vec::new();
        cloud.write_ply(&mut buf).unwrap();
        assert_eq!(PointCloud::read_ply(buf.as_slice()).unwrap(), cloud);
    }
}
