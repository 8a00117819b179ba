//! Meshes, point clouds, icosphere templates and surface sampling.
//!
//! All operations here are pure functions on immutable inputs. Template
//! meshes are closed 2-manifolds with counter-clockwise winding for
//! outward normals; `validate_manifold` enforces this.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// Triangle mesh: vertices, faces, and a lazily derived edge list
/// (each undirected edge stored once, lower index first).
#[derive(Clone, Debug, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    edges: OnceLock<Vec<[usize; 2]>>,
}

/// Unordered point set, optionally with unit normals.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<[f64; 3]>, normals: Vec<[f64; 3]>) -> Result<PointCloud> {
        if points.len() != normals.len() {
            return Err(Error::Geometry(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            let len = norm(*n);
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::Geometry(format!(
                    "normal {i} has norm {len}, expected unit"
                )));
            }
        }
        Ok(PointCloud {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    scale3(v, 1.0 / n)
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Mesh> {
        let nv = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::Geometry(format!(
                    "face {i} references vertex out of range (V={nv})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Geometry(format!(
                    "face {i} has repeated vertex indices {f:?}"
                )));
            }
        }
        Ok(Mesh {
            vertices,
            faces,
            edges: OnceLock::new(),
        })
    }

    /// Undirected edge list, derived once and cached.
    pub fn edges(&self) -> &[[usize; 2]] {
        self.edges.get_or_init(|| {
            let mut set = std::collections::BTreeSet::new();
            for f in &self.faces {
                for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                    set.insert([a.min(b), a.max(b)]);
                }
            }
            set.into_iter().collect()
        })
    }

    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.faces[f];
        cross(
            sub3(self.vertices[b], self.vertices[a]),
            sub3(self.vertices[c], self.vertices[a]),
        )
    }

    pub fn face_area(&self, f: usize) -> f64 {
        norm(self.face_normal(f)) * 0.5
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Connected components over the face adjacency graph (shared vertex).
    pub fn connected_components(&self) -> Vec<Mesh> {
        let nv = self.vertices.len();
        let mut parent: Vec<usize> = (0..nv).collect();
        fn find(parent: &mut Vec<usize>, x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            let mut c = x;
            while parent[c] != r {
                let next = parent[c];
                parent[c] = r;
                c = next;
            }
            r
        }
        for f in &self.faces {
            let a = find(&mut parent, f[0]);
            let b = find(&mut parent, f[1]);
            let c = find(&mut parent, f[2]);
            parent[b] = a;
            parent[c] = a;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            groups
                .entry(find(&mut parent, f[0]))
                .or_default()
                .push(fi);
        }
        groups
            .into_values()
            .map(|face_ids| {
                let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
                let mut verts = Vec::new();
                let mut faces = Vec::new();
                for fi in face_ids {
                    let f = self.faces[fi];
                    let mut nf = [0usize; 3];
                    for (k, &v) in f.iter().enumerate() {
                        let idx = *remap.entry(v).or_insert_with(|| {
                            verts.push(self.vertices[v]);
                            verts.len() - 1
                        });
                        nf[k] = idx;
                    }
                    faces.push(nf);
                }
                Mesh::new(verts, faces).expect("component remap preserves validity")
            })
            .collect()
    }
}

/// Check closed 2-manifold structure: every edge on exactly two faces.
/// Returns the offending edges otherwise.
pub fn validate_manifold(mesh: &Mesh) -> Result<()> {
    let mut counts: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            *counts.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
        }
    }
    let bad: Vec<[usize; 2]> = counts
        .iter()
        .filter(|(_, &c)| c != 2)
        .map(|(&e, _)| e)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Geometry(format!(
            "non-manifold mesh; offending edges: {bad:?}"
        )))
    }
}

/// Unit icosphere: level 0 is a regular icosahedron, each level applies
/// one midpoint subdivision with re-projection to the unit sphere.
pub fn icosphere(level: u32) -> Result<Mesh> {
    if level > 6 {
        return Err(Error::Geometry(format!(
            "icosphere level {level} exceeds the maximum of 6"
        )));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw: [[f64; 3]; 12] = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let vertices: Vec<[f64; 3]> = raw.iter().map(|&v| normalize3(v)).collect();
    let faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut mesh = Mesh::new(vertices, faces)?;
    for _ in 0..level {
        let (mut next, _) = subdivide(&mesh)?;
        for v in &mut next.vertices {
            *v = normalize3(*v);
        }
        mesh = next;
    }
    Ok(mesh)
}

/// Map from the topology of a mesh to the topology of its subdivision:
/// old vertices keep their indices, each undirected edge maps to the new
/// midpoint vertex index.
#[derive(Clone, Debug)]
pub struct SubdivisionMap {
    pub edge_midpoint: BTreeMap<[usize; 2], usize>,
}

/// Midpoint subdivision: each triangle becomes four, shared edges produce
/// a single midpoint vertex, winding is preserved.
pub fn subdivide(mesh: &Mesh) -> Result<(Mesh, SubdivisionMap)> {
    validate_manifold(mesh)?;
    let mut vertices = mesh.vertices.clone();
    let mut edge_midpoint: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
        let key = [a.min(b), a.max(b)];
        *edge_midpoint.entry(key).or_insert_with(|| {
            let m = scale3(add3(vertices[a], vertices[b]), 0.5);
            vertices.push(m);
            vertices.len() - 1
        })
    };
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for f in &mesh.faces {
        let [a, b, c] = *f;
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        faces.push([a, ab, ca]);
        faces.push([b, bc, ab]);
        faces.push([c, ca, bc]);
        faces.push([ab, bc, ca]);
    }
    let out = Mesh::new(vertices, faces)?;
    Ok((out, SubdivisionMap { edge_midpoint }))
}

/// Area-weighted uniform surface sampling with face normals, deterministic
/// for a given seed.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    let (points, normals, _) = sample_surface_detail(mesh, n, seed)?;
    PointCloud::with_normals(points, normals)
}

/// Like [`sample_surface`] but also returns per-sample (face index,
/// barycentric weights) so callers can re-evaluate the same sample on a
/// deforming copy of the mesh.
pub fn sample_surface_detail(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<(usize, [f64; 3])>)> {
    let total = mesh.total_area();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Geometry(format!(
            "cannot sample a mesh with total area {total}"
        )));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen_range(0.0..acc);
        let fi = cumulative.partition_point(|&c| c < t).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.faces[fi];
        // Uniform barycentric via square-root trick.
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let w = [1.0 - s, s * (1.0 - r2), s * r2];
        let p = add3(
            add3(
                scale3(mesh.vertices[a], w[0]),
                scale3(mesh.vertices[b], w[1]),
            ),
            scale3(mesh.vertices[c], w[2]),
        );
        points.push(p);
        normals.push(normalize3(mesh.face_normal(fi)));
        picks.push((fi, w));
    }
    Ok((points, normals, picks))
}

/// Points uniform on the unit sphere via normalized 3D Gaussians.
pub fn sphere_template(p: usize, seed: u64) -> Result<PointCloud> {
    if p < 1 {
        return Err(Error::Geometry("sphere template needs p >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(p);
    let mut gauss = move || -> f64 {
        // Box-Muller; second value discarded for simplicity.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    while points.len() < p {
        let v = [gauss(), gauss(), gauss()];
        let n = norm(v);
        if n > 1e-9 {
            points.push(scale3(v, 1.0 / n));
        }
    }
    Ok(PointCloud::new(points))
}

/// Translate so the bounding-box center is at the origin, uniformly scale
/// so the longest bounding-box side equals 1.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh> {
    if mesh.vertices.is_empty() {
        return Err(Error::Geometry("cannot normalize an empty mesh".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let extent: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
    let longest = extent.iter().cloned().fold(0.0, f64::max);
    if longest <= 0.0 {
        return Err(Error::Geometry(
            "degenerate mesh with zero bounding-box extent".into(),
        ));
    }
    let center = [
        (lo[0] + hi[0]) * 0.5,
        (lo[1] + hi[1]) * 0.5,
        (lo[2] + hi[2]) * 0.5,
    ];
    let vertices = mesh
        .vertices
        .iter()
        .map(|&v| scale3(sub3(v, center), 1.0 / longest))
        .collect();
    Mesh::new(vertices, mesh.faces.clone())
}

/// Minimal OBJ writer: only `v` and `f` directives, 1-based indices.
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Minimal OBJ reader: `v x y z` and `f i j k` (1-based); every other
/// directive is ignored.
pub fn read_obj(path: &Path) -> Result<Mesh> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| {
                        Error::Geometry(format!("{}:{}: bad vertex: {e}", path.display(), lineno + 1))
                    })?;
                if coords.len() != 3 {
                    return Err(Error::Geometry(format!(
                        "{}:{}: vertex needs 3 coordinates",
                        path.display(),
                        lineno + 1
                    )));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .take(3)
                    .map(|t| {
                        // Accept "i", "i/..", "i//.." forms; keep only the index.
                        t.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|e| {
                                Error::Geometry(format!(
                                    "{}:{}: bad face index: {e}",
                                    path.display(),
                                    lineno + 1
                                ))
                            })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::Geometry(format!(
                        "{}:{}: face needs 3 indices",
                        path.display(),
                        lineno + 1
                    )));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}
