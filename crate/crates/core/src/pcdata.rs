//! Point-cloud samples, the synthetic primitive dataset and the `PCDS` file
//! format.
//!
//! `PCDS` layout, little-endian throughout:
//!
//! ```text
//! "PCDS" | u32 version=1 | u32 classes | u32 n_labeled | u32 n_unlabeled | u32 n_test
//! samples (labeled, unlabeled, test): u32 label (0xFFFFFFFF if unlabeled) | u32 m | m*3 f32
//! optional sidecar: n_unlabeled * u32 ground-truth labels of the unlabeled samples
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Tag};

pub const MIN_POINTS: usize = 8;
pub const MAX_CLASSES: usize = 8;

const MAGIC: &[u8; 4] = b"PCDS";
const VERSION: u32 = 1;
const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "a point cloud needs at least {MIN_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(PointCloud { points })
    }

    /// Builds a cloud without validation; used by transforms that preserve
    /// the invariants of an already-valid cloud.
    pub(crate) fn from_points_unchecked(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub cloud: PointCloud,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: u32,
    pub labeled: Vec<LabeledSample>,
    /// Unlabeled clouds; a cloud's position is its sample id.
    pub unlabeled: Vec<PointCloud>,
    pub test: Vec<LabeledSample>,
    /// Ground truth for the unlabeled pool. Diagnostics only.
    pub unlabeled_truth: Option<Vec<u32>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c == 0 {
            return Err(Error::Config("dataset has zero classes".into()));
        }
        if let Some(s) = self.labeled.iter().chain(&self.test).find(|s| s.label >= c) {
            return Err(Error::Config(format!("label {} >= classes {c}", s.label)));
        }
        if self.labeled.len() > self.unlabeled.len() && !self.unlabeled.is_empty() {
            return Err(Error::Config(format!(
                "labeled set ({}) larger than unlabeled set ({})",
                self.labeled.len(),
                self.unlabeled.len()
            )));
        }
        if let Some(t) = &self.unlabeled_truth {
            if t.len() != self.unlabeled.len() {
                return Err(Error::Config("unlabeled truth length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Number of points per cloud when every cloud agrees.
    pub fn points_per_cloud(&self) -> Option<usize> {
        let mut it = self
            .labeled
            .iter()
            .map(|s| s.cloud.len())
            .chain(self.unlabeled.iter().map(|c| c.len()))
            .chain(self.test.iter().map(|s| s.cloud.len()));
        let first = it.next()?;
        it.all(|m| m == first).then_some(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    PlaneCross,
    Helix,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Pyramid,
        ShapeKind::PlaneCross,
        ShapeKind::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::PlaneCross => "plane-cross",
            ShapeKind::Helix => "helix",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind `{s}`")))
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn any_orthogonal(u: &[f64; 3]) -> [f64; 3] {
    let pick = if u[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let c = [
        u[1] * pick[2] - u[2] * pick[1],
        u[2] * pick[0] - u[0] * pick[2],
        u[0] * pick[1] - u[1] * pick[0],
    ];
    let n = norm(&c);
    c.map(|x| x / n)
}

fn neg(p: [f64; 3]) -> [f64; 3] {
    p.map(|x| -x)
}

/// Sphere points in antipodal pairs (plus one zero-sum triple when `m` is
/// odd), so the raw sample is already centred and every point has norm 1.
fn sample_sphere<R: Rng>(m: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(m);
    let mut left = m;
    if m % 2 == 1 {
        let u = unit_vector(rng);
        let v = any_orthogonal(&u);
        let s = 3f64.sqrt() / 2.0;
        pts.push(u);
        pts.push([0, 1, 2].map(|k| -0.5 * u[k] + s * v[k]));
        pts.push([0, 1, 2].map(|k| -0.5 * u[k] - s * v[k]));
        left -= 3;
    }
    for _ in 0..left / 2 {
        let u = unit_vector(rng);
        pts.push(u);
        pts.push(neg(u));
    }
    pts
}

fn cube_face_point<R: Rng>(rng: &mut R) -> [f64; 3] {
    let axis = rng.random_range(0..3);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ];
    p[axis] = sign;
    p
}

/// Cube surface (half-extent 1) in antipodal pairs; an odd `m` adds one
/// zero-sum triple whose points all lie on faces.
fn sample_cube<R: Rng>(m: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(m);
    let mut left = m;
    if m % 2 == 1 {
        let a = rng.random_range(-0.5..=0.5);
        let c = rng.random_range(-0.5..=0.5);
        pts.push([1.0, a, -0.5]);
        pts.push([-1.0, c, -0.5]);
        pts.push([0.0, -a - c, 1.0]);
        left -= 3;
    }
    for _ in 0..left / 2 {
        let p = cube_face_point(rng);
        pts.push(p);
        pts.push(neg(p));
    }
    pts
}

fn sample_raw<R: Rng>(kind: ShapeKind, m: usize, rng: &mut R) -> Vec<[f64; 3]> {
    match kind {
        ShapeKind::Sphere => sample_sphere(m, rng),
        ShapeKind::Cube => sample_cube(m, rng),
        ShapeKind::Cylinder => {
            let (r, h) = (rng.random_range(0.35..0.65), rng.random_range(0.6..1.2));
            (0..m)
                .map(|_| {
                    let t = rng.random_range(0.0..2.0 * PI);
                    // lateral area 2*pi*r*2h vs caps 2*pi*r^2
                    if rng.random::<f64>() < (2.0 * h) / (2.0 * h + r) {
                        [r * t.cos(), r * t.sin(), rng.random_range(-h..=h)]
                    } else {
                        let rr = r * rng.random::<f64>().sqrt();
                        let z = if rng.random::<bool>() { h } else { -h };
                        [rr * t.cos(), rr * t.sin(), z]
                    }
                })
                .collect()
        }
        ShapeKind::Cone => {
            let (r, h): (f64, f64) = (rng.random_range(0.5..0.9), rng.random_range(1.0..1.8));
            (0..m)
                .map(|_| {
                    let t = rng.random_range(0.0..2.0 * PI);
                    let slant = (r * r + h * h).sqrt();
                    if rng.random::<f64>() < slant / (slant + r) {
                        // uniform on the lateral surface: radius fraction ~ sqrt(u)
                        let f = rng.random::<f64>().sqrt();
                        [f * r * t.cos(), f * r * t.sin(), h * (1.0 - f)]
                    } else {
                        let rr = r * rng.random::<f64>().sqrt();
                        [rr * t.cos(), rr * t.sin(), 0.0]
                    }
                })
                .collect()
        }
        ShapeKind::Torus => {
            let (big, small) = (rng.random_range(0.55..0.8), rng.random_range(0.15..0.35));
            (0..m)
                .map(|_| {
                    let u = rng.random_range(0.0..2.0 * PI);
                    let v = rng.random_range(0.0..2.0 * PI);
                    let ring = big + small * v.cos();
                    [ring * u.cos(), ring * u.sin(), small * v.sin()]
                })
                .collect()
        }
        ShapeKind::Pyramid => {
            let (w, h) = (rng.random_range(0.6..1.0), rng.random_range(0.8..1.5));
            let apex = [0.0, 0.0, h];
            let base = [[-w, -w, 0.0], [w, -w, 0.0], [w, w, 0.0], [-w, w, 0.0]];
            (0..m)
                .map(|_| {
                    let face = rng.random_range(0..5);
                    if face == 4 {
                        [rng.random_range(-w..=w), rng.random_range(-w..=w), 0.0]
                    } else {
                        let (b0, b1) = (base[face], base[(face + 1) % 4]);
                        let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
                        if s + t > 1.0 {
                            s = 1.0 - s;
                            t = 1.0 - t;
                        }
                        [0, 1, 2].map(|k| apex[k] + s * (b0[k] - apex[k]) + t * (b1[k] - apex[k]))
                    }
                })
                .collect()
        }
        ShapeKind::PlaneCross => {
            let e: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.5..1.0));
            (0..m)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..=1.0);
                    let b: f64 = rng.random_range(-1.0..=1.0);
                    match rng.random_range(0..3) {
                        0 => [0.0, a * e[1], b * e[2]],
                        1 => [a * e[0], 0.0, b * e[2]],
                        _ => [a * e[0], b * e[1], 0.0],
                    }
                })
                .collect()
        }
        ShapeKind::Helix => {
            let turns = rng.random_range(2.0..4.0);
            let radius = rng.random_range(0.45..0.75);
            (0..m)
                .map(|_| {
                    let t = rng.random_range(0.0..2.0 * PI * turns);
                    let r = radius + 0.03 * Distribution::<f64>::sample(&StandardNormal, rng);
                    [r * t.cos(), r * t.sin(), t / (2.0 * PI * turns) * 2.0 - 1.0]
                })
                .collect()
        }
    }
}

/// Centres on the centroid, scales to unit max-norm and rounds every
/// coordinate to f32 precision so that clouds survive the file format
/// unchanged.
fn normalize(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let c = c.map(|v| v / n);
    for p in &mut pts {
        for k in 0..3 {
            p[k] -= c[k];
        }
    }
    let scale = pts.iter().map(norm).fold(0.0, f64::max);
    if scale > 0.0 {
        for p in &mut pts {
            *p = p.map(|v| v / scale);
        }
    }
    for p in &mut pts {
        *p = p.map(|v| v as f32 as f64);
    }
    pts
}

/// Samples `m` surface points of a primitive, centred and scaled to unit
/// max-norm.
pub fn generate_shape<R: Rng>(kind: ShapeKind, m: usize, rng: &mut R) -> Result<PointCloud> {
    if m < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_POINTS} points, got {m}"
        )));
    }
    PointCloud::new(normalize(sample_raw(kind, m, rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    /// Train samples per class (labelled + unlabelled).
    pub per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 8,
            per_class: 100,
            test_per_class: 20,
            points: 64,
            labeled_fraction: 0.02,
            seed: 0,
        }
    }
}

/// Labelled count per class for a stratified split of `total` samples.
fn labeled_per_class(cfg: &DatasetConfig) -> Result<Vec<usize>> {
    let (c, per) = (cfg.classes, cfg.per_class);
    let f = cfg.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {f}"
        )));
    }
    if (per as f64) * f < 1.0 {
        return Err(Error::Config(format!(
            "labeled fraction {f} leaves less than one labeled sample per class ({per} per class)"
        )));
    }
    let n = (f * (c * per) as f64).round() as usize;
    if n < c {
        return Err(Error::Config(format!(
            "{n} labeled samples cannot cover {c} classes"
        )));
    }
    let base = n / c;
    let extra = n % c;
    Ok((0..c)
        .map(|k| (base + usize::from(k < extra)).min(per))
        .collect())
}

/// Generates the synthetic primitive dataset. Class `k` is
/// `ShapeKind::ALL[k]`. Each sample draws from its own keyed stream, so the
/// result depends only on the config.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "classes must lie in 1..={MAX_CLASSES}, got {}",
            cfg.classes
        )));
    }
    if cfg.per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Config(
            "per-class and test-per-class counts must be positive".into(),
        ));
    }
    if cfg.points < MIN_POINTS {
        return Err(Error::Config(format!(
            "need at least {MIN_POINTS} points per cloud"
        )));
    }
    let lpc = labeled_per_class(cfg)?;
    let gen = |class: usize, idx: usize| {
        let mut r = rng::stream(cfg.seed, Tag::Shape, &[class as u64, idx as u64]);
        generate_shape(ShapeKind::ALL[class], cfg.points, &mut r)
    };

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for class in 0..cfg.classes {
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Tag::Split, &[class as u64]));
        for (rank, &idx) in order.iter().enumerate() {
            let s = LabeledSample {
                cloud: gen(class, idx)?,
                label: class as u32,
            };
            if rank < lpc[class] {
                labeled.push(s);
            } else {
                unlabeled.push(s);
            }
        }
    }
    unlabeled.shuffle(&mut rng::stream(cfg.seed, Tag::Split, &[u64::MAX]));
    let mut test = Vec::new();
    for class in 0..cfg.classes {
        for j in 0..cfg.test_per_class {
            test.push(LabeledSample {
                cloud: gen(class, cfg.per_class + j)?,
                label: class as u32,
            });
        }
    }
    let truth = unlabeled.iter().map(|s| s.label).collect();
    Ok(Dataset {
        classes: cfg.classes as u32,
        labeled,
        unlabeled: unlabeled.into_iter().map(|s| s.cloud).collect(),
        test,
        unlabeled_truth: Some(truth),
    })
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        d.classes,
        d.labeled.len() as u32,
        d.unlabeled.len() as u32,
        d.test.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |label: u32, cloud: &PointCloud| {
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
        for c in cloud.points().iter().flatten() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    };
    for s in &d.labeled {
        put(s.label, &s.cloud);
    }
    for c in &d.unlabeled {
        put(UNLABELED, c);
    }
    for s in &d.test {
        put(s.label, &s.cloud);
    }
    if let Some(t) = &d.unlabeled_truth {
        for l in t {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?.to_vec();
    if magic != MAGIC {
        return Err(r.err(
            0,
            format!(
                "bad magic {:?}, expected \"PCDS\"",
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let classes = r.u32("class count")?;
    let n_lab = r.u32("labeled count")? as usize;
    let n_unl = r.u32("unlabeled count")? as usize;
    let n_test = r.u32("test count")? as usize;

    let sample = |r: &mut Reader, expect_label: bool| -> Result<(u32, PointCloud)> {
        let at = r.pos;
        let label = r.u32("sample label")?;
        if expect_label && label >= classes {
            return Err(r.err(at, format!("label {label} >= class count {classes}")));
        }
        if !expect_label && label != UNLABELED {
            return Err(r.err(at, format!("unlabeled sample carries label {label}")));
        }
        let m_at = r.pos;
        let m = r.u32("point count")? as usize;
        let bytes = r.take(m * 12, "points")?;
        let pts = bytes
            .chunks_exact(12)
            .map(|c| {
                [0, 1, 2]
                    .map(|k| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap()) as f64)
            })
            .collect();
        let cloud = PointCloud::new(pts).map_err(|e| r.err(m_at, e.to_string()))?;
        Ok((label, cloud))
    };

    let mut labeled = Vec::with_capacity(n_lab);
    for _ in 0..n_lab {
        let (label, cloud) = sample(&mut r, true)?;
        labeled.push(LabeledSample { cloud, label });
    }
    let mut unlabeled = Vec::with_capacity(n_unl);
    for _ in 0..n_unl {
        unlabeled.push(sample(&mut r, false)?.1);
    }
    let mut test = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        let (label, cloud) = sample(&mut r, true)?;
        test.push(LabeledSample { cloud, label });
    }
    let unlabeled_truth = if r.pos == buf.len() {
        None
    } else {
        let mut t = Vec::with_capacity(n_unl);
        for _ in 0..n_unl {
            let at = r.pos;
            let l = r.u32("sidecar label")?;
            if l >= classes {
                return Err(r.err(at, format!("sidecar label {l} >= class count {classes}")));
            }
            t.push(l);
        }
        if r.pos != buf.len() {
            return Err(r.err(r.pos, "trailing bytes after sidecar"));
        }
        Some(t)
    };
    Ok(Dataset {
        classes,
        labeled,
        unlabeled,
        test,
        unlabeled_truth,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(seed: u64) -> rng::Stream {
        rng::stream(seed, Tag::Shape, &[])
    }

    #[test]
    fn sphere_points_have_unit_norm() {
        for m in [64, 65, 9] {
            let c = generate_shape(ShapeKind::Sphere, m, &mut r(3)).unwrap();
            assert_eq!(c.len(), m);
            for p in c.points() {
                assert!((norm(p) - 1.0).abs() < 1e-6, "{m}: {}", norm(p));
            }
        }
    }

    #[test]
    fn cube_points_lie_on_faces() {
        for m in [64, 33] {
            let c = generate_shape(ShapeKind::Cube, m, &mut r(4)).unwrap();
            let h = c
                .points()
                .iter()
                .flatten()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            for p in c.points() {
                assert!(p.iter().any(|v| (v.abs() - h).abs() < 1e-6), "{p:?} h={h}");
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let a = generate_shape(ShapeKind::Sphere, 64, &mut r(9)).unwrap();
        let b = generate_shape(ShapeKind::Sphere, 64, &mut r(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_kinds_centered_and_scaled() {
        for kind in ShapeKind::ALL {
            for m in [8, 31, 64] {
                let c = generate_shape(kind, m, &mut r(m as u64)).unwrap();
                assert!(
                    c.centroid().iter().all(|v| v.abs() <= 1e-6),
                    "{kind:?} {:?}",
                    c.centroid()
                );
                assert!((c.max_norm() - 1.0).abs() <= 1e-6, "{kind:?}");
            }
        }
    }

    #[test]
    fn shape_kind_parsing() {
        assert_eq!(
            "plane-cross".parse::<ShapeKind>().unwrap(),
            ShapeKind::PlaneCross
        );
        assert!(matches!(
            "blob".parse::<ShapeKind>(),
            Err(Error::InvalidArgument(_))
        ));
        assert!(generate_shape(ShapeKind::Torus, 7, &mut r(1)).is_err());
    }

    fn cfg(classes: usize, per_class: usize, f: f64) -> DatasetConfig {
        DatasetConfig {
            classes,
            per_class,
            test_per_class: 2,
            points: 16,
            labeled_fraction: f,
            seed: 5,
        }
    }

    #[test]
    fn two_percent_split() {
        let d = make_dataset(&cfg(8, 100, 0.02)).unwrap();
        assert_eq!(d.labeled.len(), 16);
        assert_eq!(d.unlabeled.len(), 784);
        for k in 0..8 {
            assert_eq!(d.labeled.iter().filter(|s| s.label == k).count(), 2);
        }
        assert_eq!(d.test.len(), 16);
        d.validate().unwrap();
    }

    #[test]
    fn ten_percent_split() {
        let d = make_dataset(&cfg(8, 100, 0.10)).unwrap();
        assert_eq!(d.labeled.len(), 80);
    }

    #[test]
    fn fully_supervised_split() {
        let d = make_dataset(&cfg(2, 10, 1.0)).unwrap();
        assert_eq!(d.labeled.len(), 20);
        assert!(d.unlabeled.is_empty());
    }

    #[test]
    fn too_small_fraction_is_config_error() {
        assert!(matches!(
            make_dataset(&cfg(8, 10, 0.02)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_dataset(&cfg(8, 10, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = encode_dataset(&make_dataset(&cfg(3, 20, 0.1)).unwrap()).unwrap();
        let b = encode_dataset(&make_dataset(&cfg(3, 20, 0.1)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let d = make_dataset(&cfg(2, 10, 0.2)).unwrap();
        let mut bytes = encode_dataset(&d).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), d);

        let cut = 24 + 8 + 100;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("{other:?}"),
        }
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn out_of_range_label_names_offset() {
        let d = make_dataset(&cfg(2, 10, 0.2)).unwrap();
        let mut bytes = encode_dataset(&d).unwrap();
        bytes[24..28].copy_from_slice(&7u32.to_le_bytes());
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 24);
                assert!(message.contains("label 7"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_sidecar_loads_as_none() {
        let mut d = make_dataset(&cfg(2, 10, 0.2)).unwrap();
        d.unlabeled_truth = None;
        let back = decode_dataset(&encode_dataset(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
