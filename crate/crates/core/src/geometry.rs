//! Point cloud ingestion, synthesis, corruption, normalization, and
//! six-view orthographic depth projection.

use crate::error::{invalid, Error, Result};
use crate::rng::{standard_normal, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A labeled 3D point set.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: String,
    pub sample_id: String,
}

/// A square depth image with values in [0, 1]; 0 marks empty pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    size: usize,
    values: Vec<f64>,
}

impl DepthImage {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(invalid(format!(
                "depth image: {} values for size {size}",
                values.len()
            )));
        }
        Ok(DepthImage { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// The six fixed view directions, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewDirection {
    Top,
    Bottom,
    Front,
    Back,
    Left,
    Right,
}

impl ViewDirection {
    pub const ALL: [ViewDirection; 6] = [
        ViewDirection::Top,
        ViewDirection::Bottom,
        ViewDirection::Front,
        ViewDirection::Back,
        ViewDirection::Left,
        ViewDirection::Right,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ViewDirection::Top => "top",
            ViewDirection::Bottom => "bottom",
            ViewDirection::Front => "front",
            ViewDirection::Back => "back",
            ViewDirection::Left => "left",
            ViewDirection::Right => "right",
        }
    }

    /// In-plane coordinates and brightness (1 - distance to the view plane).
    fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let [x, y, z] = p;
        match self {
            ViewDirection::Top => (x, y, 0.5 + z),
            ViewDirection::Bottom => (x, y, 0.5 - z),
            ViewDirection::Front => (x, z, 0.5 - y),
            ViewDirection::Back => (x, z, 0.5 + y),
            ViewDirection::Left => (y, z, 0.5 - x),
            ViewDirection::Right => (y, z, 0.5 + x),
        }
    }
}

/// Six depth images of one sample, in [`ViewDirection::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    views: Vec<DepthImage>,
    pub sample_id: String,
    pub label: String,
}

impl ViewSet {
    pub fn new(views: Vec<DepthImage>, sample_id: String, label: String) -> Result<Self> {
        if views.len() != 6 {
            return Err(invalid(format!("view set needs 6 views, got {}", views.len())));
        }
        let size = views[0].size();
        if views.iter().any(|v| v.size() != size) {
            return Err(invalid("view set resolutions differ"));
        }
        Ok(ViewSet {
            views,
            sample_id,
            label,
        })
    }

    pub fn views(&self) -> &[DepthImage] {
        &self.views
    }

    pub fn view(&self, dir: ViewDirection) -> &DepthImage {
        let idx = ViewDirection::ALL.iter().position(|d| *d == dir).unwrap();
        &self.views[idx]
    }

    pub fn resolution(&self) -> usize {
        self.views[0].size()
    }
}

/// Supported cloud file formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    Off,
    Xyz,
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(CloudFormat::Off),
            "xyz" => Ok(CloudFormat::Xyz),
            other => Err(invalid(format!("unknown cloud format '{other}'"))),
        }
    }
}

fn parse_float(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric token '{tok}'"),
    })
}

fn sample_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Reads an OFF or XYZ file into an un-normalized point cloud.
pub fn load_point_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let points = match format {
        CloudFormat::Off => parse_off(&text)?,
        CloudFormat::Xyz => parse_xyz(&text)?,
    };
    Ok(PointCloud {
        points,
        label: String::new(),
        sample_id: sample_id_from_path(path),
    })
}

fn parse_off(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    if header.trim() != "OFF" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected OFF header, got '{}'", header.trim()),
        });
    }
    // Count line: vertex count first; face and edge counts are ignored.
    let (count_idx, counts) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(Error::Parse {
            line: 2,
            message: "missing vertex count line".into(),
        })?;
    let count_line = count_idx + 1;
    let first = counts.split_whitespace().next().ok_or(Error::Parse {
        line: count_line,
        message: "missing vertex count".into(),
    })?;
    let nv: usize = first.parse().map_err(|_| Error::Parse {
        line: count_line,
        message: format!("non-numeric vertex count '{first}'"),
    })?;
    if nv == 0 {
        return Err(Error::Parse {
            line: count_line,
            message: "empty vertex list".into(),
        });
    }
    let mut points = Vec::with_capacity(nv);
    let mut last_line = count_line;
    for (idx, line) in lines {
        let lineno = idx + 1;
        last_line = lineno;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 coordinates, got {}", toks.len()),
            });
        }
        points.push([
            parse_float(toks[0], lineno)?,
            parse_float(toks[1], lineno)?,
            parse_float(toks[2], lineno)?,
        ]);
        if points.len() == nv {
            return Ok(points);
        }
    }
    Err(Error::Parse {
        line: last_line,
        message: format!("file ends after {} of {nv} vertices", points.len()),
    })
}

fn parse_xyz(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 coordinates, got {}", toks.len()),
            });
        }
        points.push([
            parse_float(toks[0], lineno)?,
            parse_float(toks[1], lineno)?,
            parse_float(toks[2], lineno)?,
        ]);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "empty vertex list".into(),
        });
    }
    Ok(points)
}

/// Centers the bounding box at the origin and scales the largest axis
/// extent to 1. Coincident clouds collapse to the origin.
pub fn normalize_unit_cube(pc: &PointCloud) -> Result<PointCloud> {
    if pc.points.is_empty() {
        return Err(invalid("normalize_unit_cube: empty point cloud"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pc.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let max_extent = extent[0].max(extent[1]).max(extent[2]);
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let points = if max_extent == 0.0 {
        vec![[0.0, 0.0, 0.0]; pc.points.len()]
    } else {
        pc.points
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for a in 0..3 {
                    // Clamp absorbs one-ulp overshoot at the box faces.
                    q[a] = ((p[a] - center[a]) / max_extent).clamp(-0.5, 0.5);
                }
                q
            })
            .collect()
    };
    Ok(PointCloud {
        points,
        label: pc.label.clone(),
        sample_id: pc.sample_id.clone(),
    })
}

const NORMALIZED_TOLERANCE: f64 = 1e-9;

/// Projects a normalized cloud into six orthographic depth images.
///
/// Each point lands in the pixel containing its in-plane coordinates; the
/// pixel keeps 1 - d for the nearest point, where d is the distance to the
/// view plane. Empty pixels stay 0.
pub fn project_six_views(pc: &PointCloud, resolution: usize) -> Result<ViewSet> {
    if resolution == 0 || !resolution.is_power_of_two() {
        return Err(invalid(format!(
            "projection resolution must be a power of two, got {resolution}"
        )));
    }
    if pc.points.is_empty() {
        return Err(invalid("project_six_views: empty point cloud"));
    }
    for (i, p) in pc.points.iter().enumerate() {
        for a in 0..3 {
            if p[a].abs() > 0.5 + NORMALIZED_TOLERANCE {
                return Err(invalid(format!(
                    "point {i} coordinate {} outside the unit cube; normalize first",
                    p[a]
                )));
            }
        }
    }
    let res = resolution;
    let to_pixel = |coord: f64| -> usize {
        let idx = ((coord + 0.5) * res as f64).floor() as isize;
        idx.clamp(0, res as isize - 1) as usize
    };
    let mut views = Vec::with_capacity(6);
    for dir in ViewDirection::ALL {
        let mut values = vec![0.0; res * res];
        for p in &pc.points {
            let (u, v, brightness) = dir.project(*p);
            let col = to_pixel(u);
            let row = to_pixel(-v);
            let b = brightness.clamp(0.0, 1.0);
            let cell = &mut values[row * res + col];
            if b > *cell {
                *cell = b;
            }
        }
        views.push(DepthImage::new(res, values)?);
    }
    ViewSet::new(views, pc.sample_id.clone(), pc.label.clone())
}

/// The synthetic shape families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Pyramid,
        ShapeKind::Ellipsoid,
        ShapeKind::Cross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Cross => "cross",
        }
    }

    fn tag(&self) -> u64 {
        ShapeKind::ALL.iter().position(|k| k == self).unwrap() as u64
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| invalid(format!("unknown shape kind '{s}'")))
    }
}

pub(crate) fn unit_gaussian_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let g = [
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        ];
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 1e-9 {
            return [g[0] / norm, g[1] / norm, g[2] / norm];
        }
    }
}

/// Samples `n_points` surface points of the requested shape, deterministic
/// in (kind, n_points, seed). Output fits the unit cube.
pub fn synth_shape(kind: ShapeKind, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(invalid(format!("synth_shape needs at least 8 points, got {n_points}")));
    }
    let mut rng = stream(&[0x5ca1e, kind.tag(), n_points as u64, seed]);
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        points.push(sample_surface_point(kind, &mut rng));
    }
    Ok(PointCloud {
        points,
        label: kind.name().to_string(),
        sample_id: format!("{}_{seed:08x}", kind.name()),
    })
}

fn sample_surface_point<R: Rng>(kind: ShapeKind, rng: &mut R) -> [f64; 3] {
    const TAU: f64 = std::f64::consts::TAU;
    match kind {
        ShapeKind::Sphere => {
            let d = unit_gaussian_direction(rng);
            [0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]
        }
        ShapeKind::Cube => {
            let face: usize = rng.gen_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 0.5 } else { -0.5 };
            let (a1, a2) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut p = [0.0; 3];
            p[axis] = sign;
            p[a1] = rng.gen::<f64>() - 0.5;
            p[a2] = rng.gen::<f64>() - 0.5;
            p
        }
        ShapeKind::Cylinder => {
            // Side area : cap area = 2/3 : 1/3 for r = 0.5, h = 1.
            if rng.gen::<f64>() < 2.0 / 3.0 {
                let theta = rng.gen::<f64>() * TAU;
                [
                    0.5 * theta.cos(),
                    0.5 * theta.sin(),
                    rng.gen::<f64>() - 0.5,
                ]
            } else {
                let z = if rng.gen::<bool>() { 0.5 } else { -0.5 };
                let rho = 0.5 * rng.gen::<f64>().sqrt();
                let theta = rng.gen::<f64>() * TAU;
                [rho * theta.cos(), rho * theta.sin(), z]
            }
        }
        ShapeKind::Cone => {
            // Lateral area pi*r*sqrt(r^2+h^2) vs base area pi*r^2.
            let r = 0.5;
            let slant = (r * r + 1.0f64).sqrt();
            let p_side = slant / (slant + r);
            if rng.gen::<f64>() < p_side {
                let t = rng.gen::<f64>().sqrt();
                let theta = rng.gen::<f64>() * TAU;
                let rho = r * t;
                [rho * theta.cos(), rho * theta.sin(), 0.5 - t]
            } else {
                let rho = r * rng.gen::<f64>().sqrt();
                let theta = rng.gen::<f64>() * TAU;
                [rho * theta.cos(), rho * theta.sin(), -0.5]
            }
        }
        ShapeKind::Torus => {
            let major = 0.35;
            let minor = 0.15;
            loop {
                let theta = rng.gen::<f64>() * TAU;
                let phi = rng.gen::<f64>() * TAU;
                // Area element is proportional to major + minor*cos(phi).
                let w = (major + minor * phi.cos()) / (major + minor);
                if rng.gen::<f64>() < w {
                    let ring = major + minor * phi.cos();
                    return [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()];
                }
            }
        }
        ShapeKind::Pyramid => {
            let apex = [0.0, 0.0, 0.5];
            let corners = [
                [0.5, 0.5, -0.5],
                [-0.5, 0.5, -0.5],
                [-0.5, -0.5, -0.5],
                [0.5, -0.5, -0.5],
            ];
            // Four slanted triangles of area ~0.559 each vs base area 1.
            let tri_area = 0.5 * (0.25f64 + 1.0).sqrt() * 1.0;
            let p_side = 4.0 * tri_area / (4.0 * tri_area + 1.0);
            if rng.gen::<f64>() < p_side {
                let face: usize = rng.gen_range(0..4);
                let a = apex;
                let b = corners[face];
                let c = corners[(face + 1) % 4];
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                [
                    a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                    a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                    a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
                ]
            } else {
                [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, -0.5]
            }
        }
        ShapeKind::Ellipsoid => {
            let axes = [0.5, 0.32, 0.21];
            let d = unit_gaussian_direction(rng);
            [axes[0] * d[0], axes[1] * d[1], axes[2] * d[2]]
        }
        ShapeKind::Cross => {
            // Union of three orthogonal square prisms of half-width w.
            let w = 0.11;
            loop {
                let long_axis: usize = rng.gen_range(0..3);
                // Sample a face of the chosen prism: 4 long faces + 2 ends.
                let long_area = 4.0 * 1.0 * (2.0 * w);
                let end_area = 2.0 * (2.0 * w) * (2.0 * w);
                let on_long = rng.gen::<f64>() < long_area / (long_area + end_area);
                let mut p = [0.0; 3];
                let (a1, a2) = match long_axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                if on_long {
                    p[long_axis] = rng.gen::<f64>() - 0.5;
                    let fixed = if rng.gen::<bool>() { w } else { -w };
                    if rng.gen::<bool>() {
                        p[a1] = fixed;
                        p[a2] = (rng.gen::<f64>() * 2.0 - 1.0) * w;
                    } else {
                        p[a2] = fixed;
                        p[a1] = (rng.gen::<f64>() * 2.0 - 1.0) * w;
                    }
                } else {
                    p[long_axis] = if rng.gen::<bool>() { 0.5 } else { -0.5 };
                    p[a1] = (rng.gen::<f64>() * 2.0 - 1.0) * w;
                    p[a2] = (rng.gen::<f64>() * 2.0 - 1.0) * w;
                }
                // Keep only points on the union surface, not inside a sibling prism.
                let inside = |axis: usize| -> bool {
                    let (b1, b2) = match axis {
                        0 => (1, 2),
                        1 => (0, 2),
                        _ => (0, 1),
                    };
                    p[axis].abs() < 0.5 && p[b1].abs() < w && p[b2].abs() < w
                };
                let mut interior = false;
                for axis in 0..3 {
                    if axis != long_axis && inside(axis) {
                        interior = true;
                        break;
                    }
                }
                if !interior {
                    return p;
                }
            }
        }
    }
}

/// Corruption families applied to normalized clouds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptKind {
    Jitter,
    Dropout,
    Rotate,
}

impl std::str::FromStr for CorruptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jitter" => Ok(CorruptKind::Jitter),
            "dropout" => Ok(CorruptKind::Dropout),
            "rotate" => Ok(CorruptKind::Rotate),
            other => Err(invalid(format!("unknown corruption kind '{other}'"))),
        }
    }
}

pub(crate) fn rotate_points(points: &[[f64; 3]], axis: [f64; 3], angle: f64) -> Vec<[f64; 3]> {
    let (sin, cos) = angle.sin_cos();
    let k = axis;
    points
        .iter()
        .map(|p| {
            // Rodrigues rotation.
            let cross = [
                k[1] * p[2] - k[2] * p[1],
                k[2] * p[0] - k[0] * p[2],
                k[0] * p[1] - k[1] * p[0],
            ];
            let dot = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
            [
                p[0] * cos + cross[0] * sin + k[0] * dot * (1.0 - cos),
                p[1] * cos + cross[1] * sin + k[1] * dot * (1.0 - cos),
                p[2] * cos + cross[2] * sin + k[2] * dot * (1.0 - cos),
            ]
        })
        .collect()
}

/// Applies one corruption at the given severity (1..=5), deterministically.
pub fn corrupt(pc: &PointCloud, kind: CorruptKind, severity: u8, seed: u64) -> Result<PointCloud> {
    if !(1..=5).contains(&severity) {
        return Err(invalid(format!("corruption severity {severity} outside 1..=5")));
    }
    let mut rng = stream(&[0xc0, kind as u64, severity as u64, seed]);
    let mut out = pc.clone();
    match kind {
        CorruptKind::Jitter => {
            let sigma = 0.01 * severity as f64;
            for p in &mut out.points {
                for a in 0..3 {
                    p[a] = (p[a] + sigma * standard_normal(&mut rng)).clamp(-0.5, 0.5);
                }
            }
            Ok(out)
        }
        CorruptKind::Dropout => {
            let n = pc.points.len();
            let n_remove = ((0.1 * severity as f64) * n as f64).round() as usize;
            let keep = (n - n_remove.min(n)).max(1);
            let mut order: Vec<usize> = (0..n).collect();
            // Partial Fisher-Yates: the first `keep` entries are the survivors.
            for i in 0..keep.min(n - 1) {
                let j = rng.gen_range(i..n);
                order.swap(i, j);
            }
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            out.points = kept.into_iter().map(|i| pc.points[i]).collect();
            Ok(out)
        }
        CorruptKind::Rotate => {
            let axis = unit_gaussian_direction(&mut rng);
            let max_angle = (15.0 * severity as f64).to_radians();
            let angle = rng.gen::<f64>() * max_angle;
            out.points = rotate_points(&pc.points, axis, angle);
            normalize_unit_cube(&out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            points,
            label: "test".into(),
            sample_id: "t0".into(),
        }
    }

    fn write_temp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    /// Reference projection: scan all points per pixel.
    fn brute_force_view(pc: &PointCloud, dir: ViewDirection, res: usize) -> Vec<f64> {
        let mut values = vec![0.0; res * res];
        for row in 0..res {
            for col in 0..res {
                let mut best = 0.0f64;
                for p in &pc.points {
                    let (u, v, b) = dir.project(*p);
                    let c = (((u + 0.5) * res as f64).floor() as isize).clamp(0, res as isize - 1);
                    let r = (((-v + 0.5) * res as f64).floor() as isize).clamp(0, res as isize - 1);
                    if r as usize == row && c as usize == col {
                        best = best.max(b.clamp(0.0, 1.0));
                    }
                }
                values[row * res + col] = best;
            }
        }
        values
    }

    #[test]
    fn xyz_single_point_parses() {
        let f = write_temp("0 0 0\n", ".xyz");
        let pc = load_point_cloud(f.path(), CloudFormat::Xyz).unwrap();
        assert_eq!(pc.points, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn xyz_comments_and_blank_lines_skipped() {
        let f = write_temp("# header\n\n1 2 3\n4 5 6\n", ".xyz");
        let pc = load_point_cloud(f.path(), CloudFormat::Xyz).unwrap();
        assert_eq!(pc.points.len(), 2);
    }

    #[test]
    fn xyz_bad_token_names_line() {
        let f = write_temp("0 0 0\n1 1 1\na b c\n", ".xyz");
        match load_point_cloud(f.path(), CloudFormat::Xyz) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn off_cube_vertices_parse() {
        let text = "OFF\n8 6 12\n\
            -1 -1 -1\n1 -1 -1\n1 1 -1\n-1 1 -1\n\
            -1 -1 1\n1 -1 1\n1 1 1\n-1 1 1\n\
            4 0 1 2 3\n";
        let f = write_temp(text, ".off");
        let pc = load_point_cloud(f.path(), CloudFormat::Off).unwrap();
        assert_eq!(pc.points.len(), 8);
        assert_eq!(pc.points[6], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn off_errors_name_lines() {
        let bad_header = write_temp("OFZ\n3 0 0\n0 0 0\n", ".off");
        assert!(matches!(
            load_point_cloud(bad_header.path(), CloudFormat::Off),
            Err(Error::Parse { line: 1, .. })
        ));
        let empty = write_temp("OFF\n0 0 0\n", ".off");
        assert!(matches!(
            load_point_cloud(empty.path(), CloudFormat::Off),
            Err(Error::Parse { line: 2, .. })
        ));
        let truncated = write_temp("OFF\n3 0 0\n0 0 0\n1 1 1\n", ".off");
        assert!(load_point_cloud(truncated.path(), CloudFormat::Off).is_err());
    }

    #[test]
    fn normalize_centers_and_scales() {
        let pc = cloud(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize_unit_cube(&pc).unwrap();
        assert_eq!(n.points, vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);

        let pc = cloud(vec![[0.0, 0.0, 0.0], [4.0, 2.0, 0.0]]);
        let n = normalize_unit_cube(&pc).unwrap();
        assert_eq!(n.points, vec![[-0.5, -0.25, 0.0], [0.5, 0.25, 0.0]]);
    }

    #[test]
    fn normalize_degenerate_maps_to_origin() {
        let pc = cloud(vec![[1.0, 1.0, 1.0]]);
        let n = normalize_unit_cube(&pc).unwrap();
        assert_eq!(n.points, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let pc = synth_shape(ShapeKind::Cone, 256, 5).unwrap();
        let once = normalize_unit_cube(&pc).unwrap();
        let twice = normalize_unit_cube(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_empty_is_error() {
        assert!(normalize_unit_cube(&cloud(vec![])).is_err());
    }

    #[test]
    fn origin_point_projects_to_center_half() {
        let pc = cloud(vec![[0.0, 0.0, 0.0]]);
        let vs = project_six_views(&pc, 4).unwrap();
        for view in vs.views() {
            let nonzero: Vec<(usize, f64)> = view
                .values()
                .iter()
                .cloned()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(nonzero[0].1, 0.5);
        }
    }

    #[test]
    fn nearest_point_wins_in_top_view() {
        let pc = cloud(vec![[0.0, 0.0, 0.49], [0.0, 0.0, -0.49]]);
        let vs = project_six_views(&pc, 4).unwrap();
        let top = vs.view(ViewDirection::Top);
        let nonzero: Vec<f64> = top.values().iter().cloned().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((nonzero[0] - 0.99).abs() < 1e-12);
        // Cross-check against the brute-force oracle.
        let oracle = brute_force_view(&pc, ViewDirection::Top, 4);
        assert_eq!(top.values(), oracle.as_slice());
    }

    #[test]
    fn projection_matches_brute_force_oracle() {
        let pc = synth_shape(ShapeKind::Torus, 300, 9).unwrap();
        let vs = project_six_views(&pc, 8).unwrap();
        for dir in ViewDirection::ALL {
            let oracle = brute_force_view(&pc, dir, 8);
            assert_eq!(vs.view(dir).values(), oracle.as_slice(), "{}", dir.name());
        }
    }

    #[test]
    fn sphere_views_have_balanced_coverage() {
        let pc = synth_shape(ShapeKind::Sphere, 1024, 4).unwrap();
        let vs = project_six_views(&pc, 16).unwrap();
        let counts: Vec<usize> = vs.views().iter().map(|v| v.nonzero_count()).collect();
        let lo = *counts.iter().min().unwrap() as f64;
        let hi = *counts.iter().max().unwrap() as f64;
        assert!(hi / lo < 1.1, "counts {counts:?}");
    }

    #[test]
    fn z_reflection_swaps_top_and_bottom() {
        let pc = synth_shape(ShapeKind::Cone, 400, 2).unwrap();
        let reflected = cloud(pc.points.iter().map(|p| [p[0], p[1], -p[2]]).collect());
        let vs = project_six_views(&pc, 16).unwrap();
        let vs_ref = project_six_views(&reflected, 16).unwrap();
        assert_eq!(
            vs.view(ViewDirection::Top).values(),
            vs_ref.view(ViewDirection::Bottom).values()
        );
        assert_eq!(
            vs.view(ViewDirection::Bottom).values(),
            vs_ref.view(ViewDirection::Top).values()
        );
    }

    #[test]
    fn projection_is_deterministic() {
        let pc = synth_shape(ShapeKind::Cross, 500, 77).unwrap();
        let a = project_six_views(&pc, 32).unwrap();
        let b = project_six_views(&pc, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let pc = cloud(vec![[0.0, 0.0, 0.7]]);
        assert!(project_six_views(&pc, 4).is_err());
        let pc = cloud(vec![[0.5 + 5e-10, 0.0, 0.0]]);
        assert!(project_six_views(&pc, 4).is_ok());
    }

    #[test]
    fn non_power_of_two_resolution_rejected() {
        let pc = cloud(vec![[0.0, 0.0, 0.0]]);
        assert!(project_six_views(&pc, 12).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_shape(ShapeKind::Sphere, 512, 7).unwrap();
        let b = synth_shape(ShapeKind::Sphere, 512, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_shape(ShapeKind::Sphere, 512, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cube_points_sit_on_faces() {
        let pc = synth_shape(ShapeKind::Cube, 512, 7).unwrap();
        for p in &pc.points {
            let on_face: usize = (0..3).filter(|&a| p[a].abs() == 0.5).count();
            assert_eq!(on_face, 1, "point {p:?}");
        }
    }

    #[test]
    fn sphere_points_have_radius_half() {
        let pc = synth_shape(ShapeKind::Sphere, 2048, 3).unwrap();
        for p in &pc.points {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(synth_shape(ShapeKind::Cube, 7, 0).is_err());
    }

    #[test]
    fn dropout_severity_five_halves_the_cloud() {
        let pc = cloud((0..100).map(|i| [i as f64 * 0.001, 0.0, 0.0]).collect());
        let n = normalize_unit_cube(&pc).unwrap();
        let out = corrupt(&n, CorruptKind::Dropout, 5, 1).unwrap();
        assert_eq!(out.points.len(), 50);
    }

    #[test]
    fn dropout_keeps_at_least_one_point() {
        let pc = cloud(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        let out = corrupt(&pc, CorruptKind::Dropout, 5, 1).unwrap();
        assert!(!out.points.is_empty());
    }

    #[test]
    fn jitter_displacement_is_small() {
        let pc = synth_shape(ShapeKind::Sphere, 512, 1).unwrap();
        for seed in 0..20 {
            let out = corrupt(&pc, CorruptKind::Jitter, 1, seed).unwrap();
            let mean_disp: f64 = pc
                .points
                .iter()
                .zip(&out.points)
                .map(|(a, b)| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / pc.points.len() as f64;
            assert!(mean_disp <= 0.04, "seed {seed}: mean displacement {mean_disp}");
        }
    }

    #[test]
    fn rotation_is_an_isometry() {
        let pc = synth_shape(ShapeKind::Sphere, 256, 2).unwrap();
        let mut rng = stream(&[123]);
        let axis = unit_gaussian_direction(&mut rng);
        let rotated = rotate_points(&pc.points, axis, 0.7);
        for (a, b) in pc.points.iter().zip(&rotated) {
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn rotate_corruption_renormalizes() {
        let pc = synth_shape(ShapeKind::Pyramid, 256, 4).unwrap();
        let out = corrupt(&pc, CorruptKind::Rotate, 3, 9).unwrap();
        for p in &out.points {
            for a in 0..3 {
                assert!(p[a].abs() <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn bad_severity_rejected() {
        let pc = cloud(vec![[0.0, 0.0, 0.0]]);
        assert!(corrupt(&pc, CorruptKind::Jitter, 0, 0).is_err());
        assert!(corrupt(&pc, CorruptKind::Jitter, 6, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn generated_and_corrupted_views_stay_in_unit_range(
            kind_idx in 0usize..8,
            seed in 0u64..50,
            corrupt_idx in 0usize..3,
            severity in 1u8..=5,
        ) {
            let kind = ShapeKind::ALL[kind_idx];
            let pc = synth_shape(kind, 64, seed).unwrap();
            let corrupted = match corrupt_idx {
                0 => corrupt(&pc, CorruptKind::Jitter, severity, seed).unwrap(),
                1 => corrupt(&pc, CorruptKind::Dropout, severity, seed).unwrap(),
                _ => corrupt(&pc, CorruptKind::Rotate, severity, seed).unwrap(),
            };
            for vs in [project_six_views(&pc, 8).unwrap(), project_six_views(&corrupted, 8).unwrap()] {
                for view in vs.views() {
                    for v in view.values() {
                        prop_assert!((0.0..=1.0).contains(v));
                    }
                }
            }
        }

        #[test]
        fn all_shapes_fit_the_unit_cube(kind_idx in 0usize..8, seed in 0u64..50) {
            let kind = ShapeKind::ALL[kind_idx];
            let pc = synth_shape(kind, 64, seed).unwrap();
            for p in &pc.points {
                for a in 0..3 {
                    prop_assert!(p[a].abs() <= 0.5 + 1e-12);
                }
            }
        }
    }
}
