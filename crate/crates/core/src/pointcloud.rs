//! Point sampling, normalization, augmentation, directed k-NN graphs and
//! edge-feature tensors.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// An `N × 3` set of points with its shape identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub shape_id: String,
    pub label: usize,
    pub normalized: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            shape_id: String::new(),
            label: 0,
            normalized: false,
        }
    }

    pub fn with_identity(mut self, shape_id: impl Into<String>, label: usize) -> Self {
        self.shape_id = shape_id.into();
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.points.len(), 3],
            self.points.iter().flat_map(|p| p.iter().copied()).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        assert_eq!(t.cols(), 3);
        PointCloud::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }

    /// Reorders points: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            ..self.clone()
        }
    }

    /// First `n` points (or all of them when fewer).
    pub fn truncated(&self, n: usize) -> Self {
        PointCloud {
            points: self.points.iter().take(n).copied().collect(),
            ..self.clone()
        }
    }

    /// Writes float32 `N × 3` data to `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.points.len() * 12);
        for p in &self.points {
            for v in p {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = PointSidecar {
            shape_id: self.shape_id.clone(),
            label: self.label,
            n: self.points.len(),
            normalized: self.normalized,
        };
        let side_path = path.with_extension("json");
        fs::write(&side_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = path.with_extension("json");
        let side_bytes = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: PointSidecar = serde_json::from_slice(&side_bytes).map_err(|e| Error::Parse {
            path: side_path.clone(),
            message: e.to_string(),
        })?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != sidecar.n * 12 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!(
                    "expected {} bytes for {} points, found {}",
                    sidecar.n * 12,
                    sidecar.n,
                    bytes.len()
                ),
            });
        }
        let points = bytes
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
                [f(0), f(4), f(8)]
            })
            .collect();
        Ok(PointCloud {
            points,
            shape_id: sidecar.shape_id,
            label: sidecar.label,
            normalized: sidecar.normalized,
        })
    }
}

/// JSON sidecar stored next to a binary point file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PointSidecar {
    pub shape_id: String,
    pub label: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub normalized: bool,
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        norm(cross(u, v)) * 0.5
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Axis-aligned unit cube centred at the origin (12 triangles).
    pub fn unit_cube() -> Self {
        let vertices = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -0.5 } else { 0.5 },
                    if i & 2 == 0 { -0.5 } else { 0.5 },
                    if i & 4 == 0 { -0.5 } else { 0.5 },
                ]
            })
            .collect();
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh { vertices, triangles }
    }
}

/// Parses an ASCII OFF mesh. Polygons are fan-triangulated; the ModelNet
/// quirk of counts glued onto the header line (`OFF490 518 0`) is accepted.
pub fn parse_off(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let header = lines.next().ok_or("empty file")?;
    let rest = header.strip_prefix("OFF").ok_or("missing OFF header")?.trim();
    let counts_line = if rest.is_empty() {
        lines.next().ok_or("missing counts line")?
    } else {
        rest
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad count `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    if counts.len() < 2 {
        return Err("counts line needs vertex and face counts".into());
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let line = lines.next().ok_or_else(|| format!("missing vertex {i}"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| format!("bad coordinate `{t}`")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 3 {
            return Err(format!("vertex {i} has {} coordinates", v.len()));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for f in 0..nf {
        let line = lines.next().ok_or_else(|| format!("missing face {f}"))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("bad index `{t}`")))
            .collect::<std::result::Result<_, _>>()?;
        let n = *idx.first().ok_or_else(|| format!("empty face {f}"))?;
        if idx.len() < n + 1 || n < 3 {
            return Err(format!("face {f} is malformed"));
        }
        let poly = &idx[1..=n];
        if let Some(bad) = poly.iter().find(|&&i| i >= nv) {
            return Err(format!("face {f} references vertex {bad} of {nv}"));
        }
        for j in 1..n - 1 {
            triangles.push([poly[0], poly[j], poly[j + 1]]);
        }
    }
    Ok(TriangleMesh { vertices, triangles })
}

pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// Area-weighted uniform sampling of `n` points on the mesh surface.
pub fn sample_points<R: Rng + ?Sized>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh);
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let tri = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[tri].map(|i| mesh.vertices[i]);
        points.push(sample_triangle(a, b, c, rng));
    }
    Ok(PointCloud::new(points))
}

/// Uniform point on triangle `abc`.
pub(crate) fn sample_triangle<R: Rng + ?Sized>(a: Point, b: Point, c: Point, rng: &mut R) -> Point {
    let s = rng.random::<f64>().sqrt();
    let r2: f64 = rng.random();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
    [0, 1, 2].map(|d| wa * a[d] + wb * b[d] + wc * c[d])
}

/// Centres the cloud on its centroid and scales it into the unit ball.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    if pc.points.is_empty() {
        return Err(Error::Parameter("empty point cloud".into()));
    }
    let c = pc.centroid();
    let centred: Vec<Point> = pc.points.iter().map(|p| sub(*p, c)).collect();
    let radius = centred.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud {
        points: centred.into_iter().map(|p| p.map(|v| v / radius)).collect(),
        normalized: true,
        ..pc.clone()
    })
}

/// Random rotation about the vertical (`y`) axis, isotropic scaling and
/// optional clipped Gaussian jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub scale_range: (f64, f64),
    pub jitter: Option<Jitter>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub sigma: f64,
    pub clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            scale_range: (0.8, 1.25),
            jitter: None,
        }
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            sigma: 0.01,
            clip: 0.05,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut R) -> PointCloud {
    let theta = if cfg.rotate {
        rng.random_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut out = rotate_scale(pc, theta, scale);
    if let Some(j) = cfg.jitter {
        let normal = Normal::new(0.0, j.sigma).expect("jitter sigma must be finite and non-negative");
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += normal.sample(rng).clamp(-j.clip, j.clip);
            }
        }
    }
    out
}

/// Rotates by `theta` about `y` (so `x → −x` at `θ = π`) and scales by `scale`.
pub fn rotate_scale(pc: &PointCloud, theta: f64, scale: f64) -> PointCloud {
    let (s, c) = theta.sin_cos();
    PointCloud {
        points: pc
            .points
            .iter()
            .map(|&[x, y, z]| [scale * (c * x + s * z), scale * y, scale * (-s * x + c * z)])
            .collect(),
        ..pc.clone()
    }
}

/// Directed k-nearest-neighbour graph: row `i` lists the `k` nearest other
/// points, nearest first, ties broken by ascending index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn num_points(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn build_knn_graph(pc: &PointCloud, k: usize) -> Result<KnnGraph> {
    knn_of_points(&pc.points, k)
}

pub(crate) fn knn_of_points(points: &[Point], k: usize) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("need 1 <= k < N, got k = {k}, N = {n}")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (i, p) in points.iter().enumerate() {
        cand.clear();
        cand.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (squared_distance(p, q), j)),
        );
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
        }
        let nearest = &mut cand[..k];
        nearest.sort_unstable_by(order);
        neighbors.extend(nearest.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph { k, neighbors })
}

/// `N × k × C` tensor of per-edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTensor {
    pub n: usize,
    pub k: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl EdgeTensor {
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.k + j) * self.channels + c]
    }

    /// Flattened `(N·k) × C` view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n * self.k, self.channels], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor, n: usize, k: usize) -> Self {
        assert_eq!(t.rows(), n * k);
        EdgeTensor {
            n,
            k,
            channels: t.cols(),
            values: t.data().to_vec(),
        }
    }
}

/// `e_ij = x_i − x_{neighbors[i][j]}`.
pub fn edge_features(pc: &PointCloud, g: &KnnGraph) -> Result<EdgeTensor> {
    let n = pc.points.len();
    if g.k == 0 || g.neighbors.len() != n * g.k {
        return Err(Error::Consistency(format!(
            "graph has {} entries for k = {}, cloud has {} points",
            g.neighbors.len(),
            g.k,
            n
        )));
    }
    if let Some(&bad) = g.neighbors.iter().find(|&&j| j >= n) {
        return Err(Error::Consistency(format!(
            "neighbor index {bad} out of range for {n} points"
        )));
    }
    let mut values = Vec::with_capacity(n * g.k * 3);
    for i in 0..n {
        for &j in g.row(i) {
            values.extend_from_slice(&sub(pc.points[i], pc.points[j]));
        }
    }
    Ok(EdgeTensor {
        n,
        k: g.k,
        channels: 3,
        values,
    })
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    /// Full sort of every pairwise distance.
    fn brute_force_knn(points: &[Point], k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..points.len() {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|c| (points[i][c] - points[j][c]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|&(_, j)| j));
        }
        out
    }

    #[test]
    fn single_triangle_samples_stay_on_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let pc = sample_points(&mesh, 1000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pc.len(), 1000);
        for p in &pc.points {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0);
        }
        let again = sample_points(&mesh, 1000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pc, again);
    }

    #[test]
    fn cube_face_counts_follow_area_weights() {
        let n = 10_000;
        let pc = sample_points(&TriangleMesh::unit_cube(), n, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut counts = [0usize; 6];
        for p in &pc.points {
            let axis = (0..3).max_by(|&a, &b| p[a].abs().total_cmp(&p[b].abs())).unwrap();
            counts[axis * 2 + usize::from(p[axis] > 0.0)] += 1;
        }
        // Binomial(n, 1/6) per face.
        let mean = n as f64 / 6.0;
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_mesh_is_rejected() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(matches!(
            sample_points(&mesh, 10, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::DegenerateMesh)
        ));
    }

    #[test]
    fn off_parser_accepts_glued_header_and_polygons() {
        let text = "OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let mesh = parse_off(text).unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((mesh.area() - 1.0).abs() < 1e-12);
        let classic = "OFF\n# comment\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(parse_off(classic).unwrap().triangles.len(), 1);
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n").is_err());
        assert!(parse_off("PLY\n").is_err());
    }

    #[test]
    fn normalize_two_points() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let out = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(out.normalized);
    }

    #[test]
    fn normalize_random_cloud_recomputed_independently() {
        let out = normalize_unit_sphere(&random_cloud(100, 3).truncated(100)).unwrap();
        let n = out.len() as f64;
        let c: Vec<f64> = (0..3)
            .map(|d| out.points.iter().map(|p| p[d]).sum::<f64>() / n)
            .collect();
        let cnorm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rmax = out
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!(cnorm <= 1e-6);
        assert!((rmax - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalize_rejects_identical_points() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]; 5]);
        assert!(matches!(normalize_unit_sphere(&pc), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn augment_identity_and_half_turn() {
        let pc = random_cloud(20, 9);
        assert_eq!(rotate_scale(&pc, 0.0, 1.0), pc);
        let cfg = AugmentConfig {
            rotate: false,
            scale_range: (1.0, 1.0),
            jitter: None,
        };
        assert_eq!(augment(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), pc);
        let p = rotate_scale(&PointCloud::new(vec![[1.0, 0.0, 0.0]]), std::f64::consts::PI, 1.0);
        assert!((p.points[0][0] + 1.0).abs() < 1e-12 && p.points[0][2].abs() < 1e-12);
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let pc = random_cloud(50, 4);
        let cfg = AugmentConfig {
            scale_range: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let rot = augment(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(12));
        for i in 0..pc.len() {
            for j in 0..pc.len() {
                let a = squared_distance(&pc.points[i], &pc.points[j]).sqrt();
                let b = squared_distance(&rot.points[i], &rot.points[j]).sqrt();
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let pc = random_cloud(200, 1);
        let cfg = AugmentConfig {
            rotate: false,
            scale_range: (1.0, 1.0),
            jitter: Some(Jitter { sigma: 0.5, clip: 0.05 }),
        };
        let out = augment(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        for (a, b) in pc.points.iter().zip(&out.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn knn_small_examples() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [5.0, 5.0, 5.0]]);
        let g = build_knn_graph(&pc, 2).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
        let tri = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let g = build_knn_graph(&tri, 2).unwrap();
        assert_eq!(g.neighbors, vec![1, 2, 0, 2, 0, 1]);
        assert!(matches!(build_knn_graph(&tri, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn knn_equals_brute_force_oracle() {
        let pc = random_cloud(128, 77);
        let g = build_knn_graph(&pc, 20).unwrap();
        assert_eq!(g.neighbors, brute_force_knn(&pc.points, 20));
        for i in 0..pc.len() {
            assert!(!g.row(i).contains(&i));
        }
    }

    #[test]
    fn knn_ties_broken_by_index() {
        // Points 1..=4 are all at distance 1 from point 0.
        let pc = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
        ]);
        assert_eq!(build_knn_graph(&pc, 3).unwrap().row(0), &[1, 2, 3]);
    }

    #[test]
    fn edge_features_examples() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let g = build_knn_graph(&pc, 1).unwrap();
        let e = edge_features(&pc, &g).unwrap();
        assert_eq!(&e.values[..3], &[-1.0, 0.0, 0.0]);

        let pc = random_cloud(40, 8);
        let g = build_knn_graph(&pc, 5).unwrap();
        let e = edge_features(&pc, &g).unwrap();
        for i in 0..40 {
            for j in 0..5 {
                for c in 0..3 {
                    assert_eq!(e.get(i, j, c), pc.points[i][c] - pc.points[g.neighbors[i * 5 + j]][c]);
                }
            }
        }
        let bad = KnnGraph {
            k: 5,
            neighbors: vec![0; 10],
        };
        assert!(matches!(edge_features(&pc, &bad), Err(Error::Consistency(_))));
    }

    #[test]
    fn point_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube_0001.bin");
        let mut pc = random_cloud(10, 0).with_identity("cube_0001", 3);
        pc.points.iter_mut().for_each(|p| *p = p.map(|v| v as f32 as f64));
        pc.save(&path).unwrap();
        assert_eq!(PointCloud::load(&path).unwrap(), pc);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn knn_matches_oracle(n in 6usize..120, k_frac in 0.0f64..1.0, seed in 0u64..1000) {
            let k = 1 + ((n - 2) as f64 * k_frac) as usize;
            let k = k.min(32).min(n - 1);
            let pc = random_cloud(n, seed);
            prop_assert_eq!(build_knn_graph(&pc, k).unwrap().neighbors, brute_force_knn(&pc.points, k));
        }

        #[test]
        fn edge_features_translation_invariant(seed in 0u64..1000, t in prop::array::uniform3(-10.0f64..10.0)) {
            let pc = random_cloud(30, seed);
            let g = build_knn_graph(&pc, 4).unwrap();
            let moved = PointCloud::new(pc.points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect());
            let a = edge_features(&pc, &g).unwrap();
            let b = edge_features(&moved, &g).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn knn_is_permutation_equivariant(seed in 0u64..1000) {
            let pc = random_cloud(40, seed);
            let mut perm: Vec<usize> = (0..40).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for i in (1..40).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // permuted[i] = pc[perm[i]]; inverse maps old index to new.
            let mut inv = vec![0; 40];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let g = build_knn_graph(&pc, 6).unwrap();
            let gp = build_knn_graph(&pc.permuted(&perm), 6).unwrap();
            for new in 0..40 {
                let mapped: Vec<usize> = g.row(perm[new]).iter().map(|&o| inv[o]).collect();
                prop_assert_eq!(gp.row(new), &mapped[..]);
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000) {
            let once = normalize_unit_sphere(&random_cloud(50, seed)).unwrap();
            let twice = normalize_unit_sphere(&once).unwrap();
            for (a, b) in once.points.iter().zip(&twice.points) {
                for d in 0..3 {
                    prop_assert!((a[d] - b[d]).abs() <= 1e-6);
                }
            }
        }
    }
}
