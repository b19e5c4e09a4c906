//! Dataset layout, manifests, paired loading and the synthetic primitive
//! generator.
//!
//! On disk every shape lives at `<root>/<class>/<split>/<shape_id>.*`: the
//! geometry as either `.bin` + `.json` (float32 points and sidecar) or a
//! `.off` mesh, and twelve views `<shape_id>_v00.png … _v11.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiview::{ViewImage, ViewSet};
use crate::pointcloud::{
    cross, dot, normalize_unit_sphere, read_off, rotate_scale, sample_points, Point, PointCloud, TriangleMesh,
};

/// Views per shape.
pub const VIEWS: usize = 12;
pub const VIEW_ELEVATION_DEG: f64 = 30.0;
pub const VIEW_AZIMUTH_STEP_DEG: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shape_id: String,
    pub class_name: String,
    pub class_index: usize,
    pub split: Split,
    /// Relative to the manifest root.
    pub geometry: PathBuf,
    pub views: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub rejected: Vec<Rejection>,
}

impl DatasetManifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if e.views.len() != VIEWS {
                return Err(Error::Consistency(format!(
                    "{} has {} views",
                    e.shape_id,
                    e.views.len()
                )));
            }
            if let Some(prev) = seen.insert(e.shape_id.as_str(), e.split) {
                return Err(Error::Consistency(format!(
                    "shape id {} appears in {prev} and {}",
                    e.shape_id, e.split
                )));
            }
        }
        Ok(())
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|d| d.map(|d| d.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn view_name(shape_id: &str, i: usize) -> String {
    format!("{shape_id}_v{i:02}.png")
}

/// Scans `<root>/<class>/<split>/` and pairs each geometry file with its
/// twelve views. Incomplete shapes are skipped, logged and listed in
/// [`DatasetManifest::rejected`].
pub fn build_manifest(root: &Path) -> Result<DatasetManifest> {
    let classes: Vec<String> = sorted_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| file_name(&p))
        .collect();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (class_index, class_name) in classes.iter().enumerate() {
        for split in [Split::Train, Split::Test] {
            let dir = root.join(class_name).join(split.as_str());
            if !dir.is_dir() {
                continue;
            }
            let files: BTreeSet<String> = sorted_dir(&dir)?.iter().map(|p| file_name(p)).collect();
            for name in &files {
                let (stem, ext) = match name.rsplit_once('.') {
                    Some((s, e @ ("bin" | "off"))) => (s, e),
                    _ => continue,
                };
                let rel_dir = PathBuf::from(class_name).join(split.as_str());
                let geometry = rel_dir.join(name);
                if ext == "bin" && !files.contains(&format!("{stem}.json")) {
                    warn!("skipping {}: missing point sidecar", geometry.display());
                    rejected.push(Rejection {
                        path: geometry,
                        reason: "missing point sidecar".into(),
                    });
                    continue;
                }
                let missing: Vec<usize> = (0..VIEWS).filter(|&i| !files.contains(&view_name(stem, i))).collect();
                if !missing.is_empty() {
                    warn!("skipping {}: missing views {missing:?}", geometry.display());
                    rejected.push(Rejection {
                        path: geometry,
                        reason: format!("missing views {missing:?}"),
                    });
                    continue;
                }
                entries.push(ManifestEntry {
                    shape_id: stem.to_string(),
                    class_name: class_name.clone(),
                    class_index,
                    split,
                    geometry,
                    views: (0..VIEWS).map(|i| rel_dir.join(view_name(stem, i))).collect(),
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no complete shapes under {}", root.display())));
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        entries,
        rejected,
    };
    manifest.check()?;
    Ok(manifest)
}

/// Point count and image resolution expected by the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadConfig {
    pub num_points: usize,
    pub image_size: usize,
}

/// FNV-1a, used to derive a stable sampling seed from a shape id.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Loads the normalized cloud and the ordered views of one entry.
pub fn load_pair(manifest: &DatasetManifest, entry: &ManifestEntry, cfg: LoadConfig) -> Result<(PointCloud, ViewSet)> {
    let path = manifest.root.join(&entry.geometry);
    let raw = match path.extension().and_then(|e| e.to_str()) {
        Some("off") => {
            let mesh = read_off(&path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&entry.shape_id));
            sample_points(&mesh, cfg.num_points, &mut rng)?
        }
        _ => PointCloud::load(&path)?,
    };
    if raw.len() < cfg.num_points {
        return Err(Error::Dataset(format!(
            "{} has {} points, need {}",
            entry.shape_id,
            raw.len(),
            cfg.num_points
        )));
    }
    let pc = normalize_unit_sphere(&raw.truncated(cfg.num_points))?.with_identity(&entry.shape_id, entry.class_index);
    let images = entry
        .views
        .iter()
        .map(|v| ViewImage::load_png(&manifest.root.join(v), cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        pc,
        ViewSet {
            shape_id: entry.shape_id.clone(),
            label: entry.class_index,
            images,
        },
    ))
}

/// Primitive families of the synthetic set. `y` is up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Cube,
    Sphere,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Prism,
    Capsule,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Cube,
        Primitive::Sphere,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
        Primitive::Pyramid,
        Primitive::Prism,
        Primitive::Capsule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Cube => "cube",
            Primitive::Sphere => "sphere",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::Pyramid => "pyramid",
            Primitive::Prism => "prism",
            Primitive::Capsule => "capsule",
        }
    }

    /// Nominal size parameters before jitter.
    fn base_size(self) -> [f64; 3] {
        match self {
            Primitive::Cube => [1.0, 1.0, 1.0],
            Primitive::Sphere => [1.0, 1.0, 1.0],
            Primitive::Cylinder => [0.6, 1.0, 0.6],
            Primitive::Cone => [1.0, 1.6, 1.0],
            Primitive::Torus => [1.0, 0.3, 1.0],
            Primitive::Pyramid => [1.0, 0.9, 1.0],
            Primitive::Prism => [0.9, 0.8, 1.2],
            Primitive::Capsule => [0.45, 1.1, 0.45],
        }
    }
}

/// One synthetic shape. `size` holds per-primitive extents (see
/// [`sample_surface`]); `yaw` rotates the shape about `y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub primitive: Primitive,
    pub size: [f64; 3],
    pub yaw: f64,
    pub seed: u64,
}

impl SyntheticShapeSpec {
    /// Nominal extents jittered by up to ±`jitter` per axis and a random yaw,
    /// all drawn from `seed`.
    pub fn random(primitive: Primitive, jitter: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = primitive.base_size();
        let size = base.map(|s| s * (1.0 + jitter * rng.random_range(-1.0..=1.0)));
        SyntheticShapeSpec {
            primitive,
            size,
            yaw: rng.random_range(0.0..TAU),
            seed,
        }
    }
}

fn quad(mesh: &mut TriangleMesh, corners: [Point; 4]) {
    let base = mesh.vertices.len();
    mesh.vertices.extend_from_slice(&corners);
    mesh.triangles.push([base, base + 1, base + 2]);
    mesh.triangles.push([base, base + 2, base + 3]);
}

fn box_mesh([a, b, c]: [f64; 3]) -> TriangleMesh {
    let mut m = TriangleMesh::default();
    for s in [-1.0, 1.0] {
        quad(&mut m, [[s * a, -b, -c], [s * a, b, -c], [s * a, b, c], [s * a, -b, c]]);
        quad(&mut m, [[-a, s * b, -c], [a, s * b, -c], [a, s * b, c], [-a, s * b, c]]);
        quad(&mut m, [[-a, -b, s * c], [a, -b, s * c], [a, b, s * c], [-a, b, s * c]]);
    }
    m
}

fn pyramid_mesh([a, h, c]: [f64; 3]) -> TriangleMesh {
    let base = [[-a, 0.0, -c], [a, 0.0, -c], [a, 0.0, c], [-a, 0.0, c]];
    let apex = [0.0, h, 0.0];
    let mut vertices = base.to_vec();
    vertices.push(apex);
    TriangleMesh {
        vertices,
        triangles: vec![[0, 1, 2], [0, 2, 3], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]],
    }
}

/// Triangular cross-section in the `xy` plane, extruded along `z`.
fn prism_mesh([a, h, c]: [f64; 3]) -> TriangleMesh {
    let tri = [[-a, 0.0], [a, 0.0], [0.0, h]];
    let mut m = TriangleMesh::default();
    for z in [-c, c] {
        let base = m.vertices.len();
        m.vertices.extend(tri.iter().map(|&[x, y]| [x, y, z]));
        m.triangles.push([base, base + 1, base + 2]);
    }
    for i in 0..3 {
        let j = (i + 1) % 3;
        let [x0, y0] = tri[i];
        let [x1, y1] = tri[j];
        quad(&mut m, [[x0, y0, -c], [x1, y1, -c], [x1, y1, c], [x0, y0, c]]);
    }
    m
}

fn unit_direction<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = dot(v, v).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniform point on the side of a `y`-aligned cylinder of radius `r`
/// spanning `y ∈ [y0, y1]`.
fn cylinder_side<R: Rng + ?Sized>(r: f64, y0: f64, y1: f64, rng: &mut R) -> Point {
    let t = rng.random_range(0.0..TAU);
    [r * t.cos(), rng.random_range(y0..=y1), r * t.sin()]
}

/// Uniform point on a disc of radius `r` at height `y`.
fn disc<R: Rng + ?Sized>(r: f64, y: f64, rng: &mut R) -> Point {
    let rho = r * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..TAU);
    [rho * t.cos(), y, rho * t.sin()]
}

/// Area-uniform surface sample of the primitive, before yaw.
///
/// Extents by primitive: cube/box half-extents `(a, b, c)`; sphere semi-axes;
/// cylinder and capsule `(r, half-height, r)` with the capsule's cylinder
/// part spanning `±half-height`; cone and pyramid `(base radius or half-width,
/// height, ·)`; torus `(R, r, ·)`; prism `(half-base, height, half-length)`.
pub fn sample_surface<R: Rng + ?Sized>(spec: &SyntheticShapeSpec, n: usize, rng: &mut R) -> Result<PointCloud> {
    let [a, b, c] = spec.size;
    let points: Vec<Point> = match spec.primitive {
        Primitive::Cube => return sample_points(&box_mesh([a, a, a]), n, rng),
        Primitive::Pyramid => return sample_points(&pyramid_mesh([a, b, a]), n, rng),
        Primitive::Prism => return sample_points(&prism_mesh([a, b, c]), n, rng),
        Primitive::Sphere => (0..n)
            .map(|_| {
                let d = unit_direction(rng);
                [a * d[0], b * d[1], c * d[2]]
            })
            .collect(),
        Primitive::Cylinder => {
            let side = TAU * a * 2.0 * b;
            let cap = PI * a * a;
            (0..n)
                .map(|_| {
                    let u = rng.random_range(0.0..side + 2.0 * cap);
                    if u < side {
                        cylinder_side(a, -b, b, rng)
                    } else {
                        disc(a, if u < side + cap { -b } else { b }, rng)
                    }
                })
                .collect()
        }
        Primitive::Cone => {
            let (r, h) = (a, b);
            let side = PI * r * (r * r + h * h).sqrt();
            let base = PI * r * r;
            (0..n)
                .map(|_| {
                    if rng.random_range(0.0..side + base) < side {
                        // Distance from the apex grows like sqrt(u) for area uniformity.
                        let s = rng.random::<f64>().sqrt();
                        let t = rng.random_range(0.0..TAU);
                        [s * r * t.cos(), h * (1.0 - s), s * r * t.sin()]
                    } else {
                        disc(r, 0.0, rng)
                    }
                })
                .collect()
        }
        Primitive::Torus => {
            let (big, small) = (a, b);
            (0..n)
                .map(|_| loop {
                    let u = rng.random_range(0.0..TAU);
                    let v = rng.random_range(0.0..TAU);
                    let w = (big + small * v.cos()) / (big + small);
                    if rng.random::<f64>() <= w {
                        let rho = big + small * v.cos();
                        break [rho * u.cos(), small * v.sin(), rho * u.sin()];
                    }
                })
                .collect()
        }
        Primitive::Capsule => {
            let (r, h) = (a, b);
            let side = TAU * r * 2.0 * h;
            let sphere = 4.0 * PI * r * r;
            (0..n)
                .map(|_| {
                    if rng.random_range(0.0..side + sphere) < side {
                        cylinder_side(r, -h, h, rng)
                    } else {
                        let d = unit_direction(rng);
                        let shift = if d[1] >= 0.0 { h } else { -h };
                        [r * d[0], r * d[1] + shift, r * d[2]]
                    }
                })
                .collect()
        }
    };
    Ok(PointCloud::new(points))
}

/// Surface sample of `spec` in its posed frame.
pub fn synthesize(spec: &SyntheticShapeSpec, n: usize, noise: Option<f64>, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let mut pc = rotate_scale(&sample_surface(spec, n, rng)?, spec.yaw, 1.0);
    if let Some(sigma) = noise {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(format!("noise: {e}")))?;
        for p in &mut pc.points {
            p.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    Ok(pc)
}

/// Orthographic depth render of a unit-sphere-normalized cloud seen from
/// `(azimuth, elevation)` in degrees. Pixels covered by the surface hold
/// `0.2 + 0.8 · nearness`; the background is 0. Each point splats a 3×3
/// footprint through a z-buffer.
pub fn render_depth(pc: &PointCloud, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Vec<f32> {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    let toward = [ce * sa, se, ce * ca];
    let right = [ca, 0.0, -sa];
    let up = cross(toward, right);
    let mut depth = vec![f64::INFINITY; size * size];
    let s = size as f64;
    for p in &pc.points {
        let u = (dot(*p, right) + 1.0) * 0.5 * s;
        let v = (1.0 - dot(*p, up)) * 0.5 * s;
        // Depth grows away from the viewer, in [0, 2] for the unit sphere.
        let d = 1.0 - dot(*p, toward);
        let (cu, cv) = (u.floor() as i64, v.floor() as i64);
        for dv in -1..=1 {
            for du in -1..=1 {
                let (x, y) = (cu + du, cv + dv);
                if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                    continue;
                }
                let cell = &mut depth[y as usize * size + x as usize];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }
    depth
        .into_iter()
        .map(|d| {
            if d.is_finite() {
                (0.2 + 0.8 * (1.0 - d / 2.0).clamp(0.0, 1.0)) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// The twelve views of a shape at 30° azimuth steps and 30° elevation.
pub fn render_views(pc: &PointCloud, size: usize) -> Vec<ViewImage> {
    (0..VIEWS)
        .map(|i| {
            let az = i as f64 * VIEW_AZIMUTH_STEP_DEG;
            ViewImage::from_gray(size, size, &render_depth(pc, az, VIEW_ELEVATION_DEG, size))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: Vec<Primitive>,
    pub per_class: usize,
    /// Shapes per class placed in the train split; the rest go to test.
    pub train_per_class: usize,
    pub num_points: usize,
    pub image_size: usize,
    /// Points splatted per render.
    pub render_points: usize,
    pub size_jitter: f64,
    pub noise: Option<f64>,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, per_class: usize) -> Self {
        SyntheticConfig {
            classes: Primitive::ALL[..num_classes.min(Primitive::ALL.len())].to_vec(),
            per_class,
            train_per_class: per_class * 4 / 5,
            num_points: 1024,
            image_size: 32,
            render_points: 6000,
            size_jitter: 0.2,
            noise: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub train: usize,
    pub test: usize,
}

/// Per-shape seed so every shape is reproducible on its own.
fn shape_seed(seed: u64, class: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng.random()
}

/// Writes a synthetic dataset tree under `root`.
pub fn generate_synthetic(root: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<GenerateReport> {
    if cfg.classes.len() < 2 {
        return Err(Error::Parameter("need at least two primitive classes".into()));
    }
    if cfg.train_per_class > cfg.per_class {
        return Err(Error::Parameter("train_per_class exceeds per_class".into()));
    }
    let mut names: Vec<&str> = cfg.classes.iter().map(|p| p.name()).collect();
    names.sort_unstable();
    let mut report = GenerateReport::default();
    for (ci, &prim) in cfg.classes.iter().enumerate() {
        let label = names.binary_search(&prim.name()).unwrap_or(ci);
        for split in [Split::Train, Split::Test] {
            let dir = root.join(prim.name()).join(split.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for i in 0..cfg.per_class {
            let s = shape_seed(seed, ci, i);
            let spec = SyntheticShapeSpec::random(prim, cfg.size_jitter, s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let shape_id = format!("{}_{:04}", prim.name(), i + 1);
            let pc = synthesize(&spec, cfg.num_points, cfg.noise, &mut rng)?.with_identity(&shape_id, label);
            let dense = normalize_unit_sphere(&synthesize(&spec, cfg.render_points, None, &mut rng)?)?;
            let split = if i < cfg.train_per_class {
                report.train += 1;
                Split::Train
            } else {
                report.test += 1;
                Split::Test
            };
            let dir = root.join(prim.name()).join(split.as_str());
            pc.save(&dir.join(format!("{shape_id}.bin")))?;
            for (v, img) in render_views(&dense, cfg.image_size).iter().enumerate() {
                img.save_gray_png(&dir.join(view_name(&shape_id, v)))?;
            }
        }
    }
    Ok(report)
}
