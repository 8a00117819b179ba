//! Procedural shape corpus, dataset generation and example loading.
//!
//! Stands in for ShapeNet at desk scale: seven parametric families, each
//! instance a validated closed manifold (the torus keeps genus 1 and is
//! excluded from the default novel set because the genus-0 template
//! cannot represent it).

use crate::camera::{Camera, RIG_DISTANCE_RANGE};
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_mesh, read_obj, sample_surface, validate_manifold, write_obj, Mesh, PointCloud,
};
use crate::raster::{rasterize_hard, render_shaded, write_pgm_u8, Mask, Silhouette};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Parametric shape constructors. All are centered at the origin; callers
/// normalize afterwards.
pub mod shapes {
    use crate::error::Result;
    use crate::geometry::Mesh;

    /// Axis-aligned box with the given full extents; 12 triangles,
    /// outward winding.
    pub fn box_mesh(extents: [f64; 3]) -> Result<Mesh> {
        let [hx, hy, hz] = [extents[0] / 2.0, extents[1] / 2.0, extents[2] / 2.0];
        let v = vec![
            [-hx, -hy, -hz],
            [hx, -hy, -hz],
            [hx, hy, -hz],
            [-hx, hy, -hz],
            [-hx, -hy, hz],
            [hx, -hy, hz],
            [hx, hy, hz],
            [-hx, hy, hz],
        ];
        let f = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [0, 4, 7],
            [0, 7, 3],
            [1, 2, 6],
            [1, 6, 5],
        ];
        Mesh::new(v, f)
    }

    /// Surface of revolution around the z axis. The profile runs bottom
    /// to top; its first and last entries must have radius 0 (poles),
    /// interior entries positive radius. Outward winding.
    pub fn lathe(profile: &[(f64, f64)], segments: usize) -> Result<Mesh> {
        use crate::error::Error;
        if profile.len() < 3 || segments < 3 {
            return Err(Error::Geometry(
                "lathe needs >= 3 profile points and >= 3 segments".into(),
            ));
        }
        if profile[0].0 != 0.0 || profile[profile.len() - 1].0 != 0.0 {
            return Err(Error::Geometry("lathe profile must start and end at radius 0".into()));
        }
        if profile[1..profile.len() - 1].iter().any(|&(r, _)| r <= 0.0) {
            return Err(Error::Geometry("lathe interior radii must be positive".into()));
        }
        let rings = profile.len() - 2;
        let mut vertices = Vec::with_capacity(2 + rings * segments);
        vertices.push([0.0, 0.0, profile[0].1]); // bottom pole
        for &(r, z) in &profile[1..profile.len() - 1] {
            for i in 0..segments {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
                vertices.push([r * theta.cos(), r * theta.sin(), z]);
            }
        }
        vertices.push([0.0, 0.0, profile[profile.len() - 1].1]); // top pole
        let top = vertices.len() - 1;
        let ring = |k: usize, i: usize| 1 + k * segments + (i % segments);
        let mut faces = Vec::new();
        for i in 0..segments {
            faces.push([ring(0, i + 1), ring(0, i), 0]);
        }
        for k in 0..rings - 1 {
            for i in 0..segments {
                let (a, b) = (ring(k, i), ring(k, i + 1));
                let (c, d) = (ring(k + 1, i + 1), ring(k + 1, i));
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
        for i in 0..segments {
            faces.push([ring(rings - 1, i), ring(rings - 1, i + 1), top]);
        }
        Mesh::new(vertices, faces)
    }

    /// Ellipsoid: icosphere scaled per axis.
    pub fn ellipsoid(semi_axes: [f64; 3], level: u32) -> Result<Mesh> {
        let sphere = crate::geometry::icosphere(level)?;
        let vertices = sphere
            .vertices
            .iter()
            .map(|&v| [v[0] * semi_axes[0], v[1] * semi_axes[1], v[2] * semi_axes[2]])
            .collect();
        Mesh::new(vertices, sphere.faces.clone())
    }

    /// Closed cylinder along z with flat caps.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> Result<Mesh> {
        let h = height / 2.0;
        lathe(
            &[(0.0, -h), (radius, -h), (radius, h), (0.0, h)],
            segments,
        )
    }

    /// Capsule: cylinder of the given core height with hemispherical caps.
    pub fn capsule(radius: f64, core_height: f64, segments: usize, arc_steps: usize) -> Result<Mesh> {
        let h = core_height / 2.0;
        let mut profile = vec![(0.0, -h - radius)];
        for s in 1..arc_steps {
            let a = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::FRAC_PI_2 * s as f64 / arc_steps as f64;
            profile.push((radius * a.cos(), -h + radius * a.sin()));
        }
        profile.push((radius, -h));
        profile.push((radius, h));
        for s in 1..arc_steps {
            let a = std::f64::consts::FRAC_PI_2 * s as f64 / arc_steps as f64;
            profile.push((radius * a.cos(), h + radius * a.sin()));
        }
        profile.push((0.0, h + radius));
        lathe(&profile, segments)
    }

    /// Torus around z: major radius of the tube center circle, minor tube
    /// radius. Genus 1 — manifold, Euler characteristic 0.
    pub fn torus(major: f64, minor: f64, major_segments: usize, minor_segments: usize) -> Result<Mesh> {
        use crate::error::Error;
        if !(minor > 0.0 && major > minor) {
            return Err(Error::Geometry(format!(
                "torus needs major > minor > 0, got {major}, {minor}"
            )));
        }
        let mut vertices = Vec::with_capacity(major_segments * minor_segments);
        for i in 0..major_segments {
            let u = 2.0 * std::f64::consts::PI * i as f64 / major_segments as f64;
            for j in 0..minor_segments {
                let v = 2.0 * std::f64::consts::PI * j as f64 / minor_segments as f64;
                let r = major + minor * v.cos();
                vertices.push([r * u.cos(), r * u.sin(), minor * v.sin()]);
            }
        }
        let at = |i: usize, j: usize| (i % major_segments) * minor_segments + (j % minor_segments);
        let mut faces = Vec::new();
        for i in 0..major_segments {
            for j in 0..minor_segments {
                let (a, b) = (at(i, j), at(i + 1, j));
                let (c, d) = (at(i + 1, j + 1), at(i, j + 1));
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
        Mesh::new(vertices, faces)
    }

    fn translate(mesh: &Mesh, offset: [f64; 3]) -> Result<Mesh> {
        Mesh::new(
            mesh.vertices
                .iter()
                .map(|&v| [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]])
                .collect(),
            mesh.faces.clone(),
        )
    }

    fn merge(parts: &[Mesh]) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for part in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&part.vertices);
            faces.extend(part.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        Mesh::new(vertices, faces)
    }

    /// Table: a round pedestal table — base disc, central column and a
    /// flat top — built as one lathe surface so the mesh is a single
    /// connected genus-0 manifold (reachable from the sphere template).
    pub fn table(
        top_radius: f64,
        top_thickness: f64,
        column_radius: f64,
        height: f64,
        segments: usize,
    ) -> Result<Mesh> {
        let h = height / 2.0;
        let base_r = (0.45 * top_radius).max(1.6 * column_radius);
        let base_h = 0.1 * height;
        let top_z = h - top_thickness;
        lathe(
            &[
                (0.0, -h),
                (base_r, -h),
                (base_r, -h + base_h),
                (column_radius, -h + base_h),
                (column_radius, top_z),
                (top_radius, top_z),
                (top_radius, h),
                (0.0, h),
            ],
            segments,
        )
    }

    /// Lamp: a thin cylindrical pole under a conical shade — 2 components.
    pub fn lamp(
        pole_radius: f64,
        pole_height: f64,
        shade_bottom: f64,
        shade_top: f64,
        shade_height: f64,
        segments: usize,
    ) -> Result<Mesh> {
        let pole = cylinder(pole_radius, pole_height, segments)?;
        let h = shade_height / 2.0;
        let shade = lathe(
            &[
                (0.0, -h),
                (shade_bottom, -h),
                (shade_top, h),
                (0.0, h),
            ],
            segments,
        )?;
        let shade = translate(&shade, [0.0, 0.0, pole_height / 2.0 + h + 0.02])?;
        merge(&[pole, shade])
    }
}

/// Train/test role of a shape family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyRole {
    Base,
    Novel,
}

/// The seven procedural families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Box,
    Ellipsoid,
    Cylinder,
    Torus,
    Capsule,
    Table,
    Lamp,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Capsule => "capsule",
            ShapeFamily::Table => "table",
            ShapeFamily::Lamp => "lamp",
        }
    }

    pub fn from_name(name: &str) -> Result<ShapeFamily> {
        Ok(match name {
            "box" => ShapeFamily::Box,
            "ellipsoid" => ShapeFamily::Ellipsoid,
            "cylinder" => ShapeFamily::Cylinder,
            "torus" => ShapeFamily::Torus,
            "capsule" => ShapeFamily::Capsule,
            "table" => ShapeFamily::Table,
            "lamp" => ShapeFamily::Lamp,
            other => return Err(Error::Data(format!("unknown shape family {other:?}"))),
        })
    }

    /// Base families train; novel families are held out for testing.
    pub fn role(self) -> FamilyRole {
        match self {
            ShapeFamily::Box
            | ShapeFamily::Ellipsoid
            | ShapeFamily::Cylinder
            | ShapeFamily::Table => FamilyRole::Base,
            ShapeFamily::Capsule | ShapeFamily::Lamp | ShapeFamily::Torus => FamilyRole::Novel,
        }
    }

    pub const BASE: [ShapeFamily; 4] = [
        ShapeFamily::Box,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Cylinder,
        ShapeFamily::Table,
    ];

    /// Default novel set; the torus is deliberately excluded (genus 1,
    /// unreachable from the genus-0 sphere template).
    pub const NOVEL: [ShapeFamily; 2] = [ShapeFamily::Capsule, ShapeFamily::Lamp];
}

/// Random instance of a family, normalized and manifold-validated.
/// Deterministic given the seed.
pub fn generate_shape(family: ShapeFamily, seed: u64) -> Result<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = match family {
        ShapeFamily::Box => shapes::box_mesh([
            rng.gen_range(0.5..1.5),
            rng.gen_range(0.5..1.5),
            rng.gen_range(0.5..1.5),
        ])?,
        ShapeFamily::Ellipsoid => shapes::ellipsoid(
            [
                rng.gen_range(0.4..1.0),
                rng.gen_range(0.4..1.0),
                rng.gen_range(0.4..1.0),
            ],
            3,
        )?,
        ShapeFamily::Cylinder => {
            shapes::cylinder(rng.gen_range(0.25..0.6), rng.gen_range(0.8..1.6), 24)?
        }
        ShapeFamily::Torus => {
            let major = rng.gen_range(0.5..0.8);
            shapes::torus(major, major * rng.gen_range(0.25..0.45), 24, 16)?
        }
        ShapeFamily::Capsule => shapes::capsule(
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.5..1.2),
            20,
            6,
        )?,
        ShapeFamily::Table => shapes::table(
            rng.gen_range(0.45..0.7),
            rng.gen_range(0.1..0.18),
            rng.gen_range(0.16..0.22),
            rng.gen_range(0.6..0.8),
            20,
        )?,
        ShapeFamily::Lamp => shapes::lamp(
            rng.gen_range(0.03..0.06),
            rng.gen_range(0.8..1.2),
            rng.gen_range(0.35..0.55),
            rng.gen_range(0.12..0.2),
            rng.gen_range(0.25..0.4),
            20,
        )?,
    };
    validate_manifold(&mesh)?;
    normalize_mesh(&mesh)
}

/// Dataset generation knobs.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    /// Instances per family.
    pub per_family: usize,
    /// Rendered image side (square, must be divisible by 32 for training).
    pub image_size: usize,
    pub focal_px: f64,
    /// Fraction of base-family instances assigned to the validation split.
    pub val_fraction: f64,
    /// Include the torus family (failure-mode demos only).
    pub include_torus: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            per_family: 8,
            image_size: 64,
            focal_px: 70.0,
            val_fraction: 0.25,
            include_torus: false,
            seed: 0,
        }
    }
}

/// One dataset entry. Paths are relative to the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub family: String,
    pub split: String,
    pub mesh_path: String,
    pub image_path: String,
    pub camera: Camera,
    pub seed: u64,
}

/// Everything one training/eval example needs in memory.
pub struct Example {
    pub image: Mask,
    pub camera: Camera,
    pub gt_mesh: Mesh,
    pub gt_samples: PointCloud,
    pub gt_silhouettes: Silhouette,
}

fn shaded_image(mesh: &Mesh, camera: &Camera) -> Result<Mask> {
    // Light along the viewing direction (from the object towards the
    // camera) so the visible side is always lit.
    let light = [-camera.rot[2][0], -camera.rot[2][1], -camera.rot[2][2]];
    render_shaded(mesh, camera, light)
}

/// Generate the full corpus: meshes as OBJ, shaded renders as PGM, one
/// manifest line per instance. Returns the records in manifest order.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Vec<ManifestRecord>> {
    let mut families: Vec<ShapeFamily> = ShapeFamily::BASE.to_vec();
    families.extend(ShapeFamily::NOVEL);
    if cfg.include_torus {
        families.push(ShapeFamily::Torus);
    }
    for sub in ["meshes", "images"] {
        std::fs::create_dir_all(root.join(sub))
            .map_err(|e| Error::io(root.join(sub).display().to_string(), e))?;
    }
    let mut records = Vec::new();
    for family in families {
        // At least one validation instance per base family whenever there
        // are two or more instances to split.
        let val_count = ((cfg.val_fraction * cfg.per_family as f64).round() as usize)
            .max(usize::from(cfg.per_family >= 2))
            .min(cfg.per_family);
        let val_from = cfg.per_family - val_count;
        for k in 0..cfg.per_family {
            let id = format!("{}_{k:03}", family.name());
            let shape_seed = cfg
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((records.len() as u64) << 8)
                .wrapping_add(k as u64);
            let mesh = generate_shape(family, shape_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(shape_seed ^ 0x5eed);
            let camera = Camera::from_angles(
                rng.gen_range(0.0..360.0),
                rng.gen_range(-45.0..45.0),
                rng.gen_range(RIG_DISTANCE_RANGE.0..RIG_DISTANCE_RANGE.1),
                cfg.focal_px,
                cfg.image_size,
                cfg.image_size,
            )?;
            let mesh_path = format!("meshes/{id}.obj");
            let image_path = format!("images/{id}.pgm");
            write_obj(&mesh, &root.join(&mesh_path))?;
            write_pgm_u8(&shaded_image(&mesh, &camera)?, &root.join(&image_path))?;
            let split = match family.role() {
                FamilyRole::Novel => "test",
                FamilyRole::Base => {
                    if k < val_from {
                        "train"
                    } else {
                        "val"
                    }
                }
            };
            records.push(ManifestRecord {
                id,
                family: family.name().to_string(),
                split: split.to_string(),
                mesh_path,
                image_path,
                camera,
                seed: shape_seed,
            });
        }
    }
    let manifest = root.join("manifest.jsonl");
    let mut f =
        std::fs::File::create(&manifest).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    for r in &records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(manifest.display().to_string(), e))?;
    }
    Ok(records)
}

/// Read a manifest written by [`build_dataset`].
pub fn load_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join("manifest.jsonl");
    let f = std::fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad manifest line: {e}")))?,
        );
    }
    Ok(records)
}

/// Surface sample count per example (paper: 2500).
pub const GT_SAMPLES: usize = 2500;

fn cache_path(root: &Path, record: &ManifestRecord) -> PathBuf {
    root.join("cache").join(format!("{}.ckpt", record.id))
}

fn rows3_of(t: &Tensor) -> Vec<[f64; 3]> {
    t.rows3()
}

/// Load one example: image, ground-truth mesh, a 2500-point surface
/// sample and the 24-view hard silhouettes. Samples and silhouettes are
/// cached on disk (tensor checkpoint format) after the first load.
pub fn load_example(root: &Path, record: &ManifestRecord) -> Result<Example> {
    let image = crate::raster::read_pgm(&root.join(&record.image_path))?;
    let gt_mesh = read_obj(&root.join(&record.mesh_path))?;
    let rig = crate::camera::view_ring(
        RIG_DISTANCE_RANGE,
        record.seed,
        record.camera.fx,
        record.camera.width,
        record.camera.height,
    )?;
    let cache = cache_path(root, record);
    let (gt_samples, masks) = if cache.exists() {
        let store = load_checkpoint(&cache)?;
        let pts = store
            .get("samples")
            .ok_or_else(|| Error::Data(format!("cache {} lacks samples", cache.display())))?;
        let nrm = store
            .get("normals")
            .ok_or_else(|| Error::Data(format!("cache {} lacks normals", cache.display())))?;
        let mut masks = Vec::with_capacity(rig.len());
        for (v, cam) in rig.iter().enumerate() {
            let t = store
                .get(&format!("sil{v:02}"))
                .ok_or_else(|| Error::Data(format!("cache {} lacks view {v}", cache.display())))?;
            masks.push(Mask {
                width: cam.width,
                height: cam.height,
                data: t.data().to_vec(),
            });
        }
        (
            PointCloud::with_normals(rows3_of(pts), rows3_of(nrm))?,
            masks,
        )
    } else {
        let samples = sample_surface(&gt_mesh, GT_SAMPLES, record.seed)?;
        let masks: Vec<Mask> = rig
            .iter()
            .map(|cam| rasterize_hard(&gt_mesh, cam))
            .collect::<Result<_>>()?;
        let mut store = ParamStore::new();
        store.insert("samples", Tensor::from_rows3(&samples.points));
        store.insert(
            "normals",
            Tensor::from_rows3(samples.normals.as_ref().expect("sampler sets normals")),
        );
        for (v, m) in masks.iter().enumerate() {
            store.insert(
                format!("sil{v:02}"),
                Tensor::new(vec![m.data.len()], m.data.clone())?,
            );
        }
        std::fs::create_dir_all(root.join("cache"))
            .map_err(|e| Error::io(root.join("cache").display().to_string(), e))?;
        save_checkpoint(&store, &cache)?;
        (samples, masks)
    };
    Ok(Example {
        image,
        camera: record.camera.clone(),
        gt_mesh,
        gt_samples,
        gt_silhouettes: Silhouette::new(masks, rig)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_is_a_cube() {
        let m = shapes::box_mesh([1.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
        validate_manifold(&m).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        // Outward winding: total signed volume is positive and equals 1.
        let vol: f64 = m
            .faces
            .iter()
            .map(|f| {
                let (a, b, c) = (m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
                crate::geometry::dot(a, crate::geometry::cross(b, c)) / 6.0
            })
            .sum();
        assert!((vol - 1.0).abs() < 1e-12, "volume {vol}");
    }

    #[test]
    fn ellipsoid_vertices_unscale_to_unit_norm() {
        let axes = [0.9, 0.5, 0.7];
        let m = shapes::ellipsoid(axes, 3).unwrap();
        for v in &m.vertices {
            let n = ((v[0] / axes[0]).powi(2) + (v[1] / axes[1]).powi(2)
                + (v[2] / axes[2]).powi(2))
            .sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        validate_manifold(&m).unwrap();
    }

    #[test]
    fn primitive_solids_are_closed_manifolds() {
        for m in [
            shapes::cylinder(0.4, 1.2, 16).unwrap(),
            shapes::capsule(0.3, 0.8, 14, 5).unwrap(),
            shapes::lamp(0.05, 1.0, 0.4, 0.15, 0.3, 12).unwrap(),
            shapes::table(0.6, 0.1, 0.12, 0.8, 16).unwrap(),
        ] {
            validate_manifold(&m).unwrap();
        }
    }

    #[test]
    fn solids_of_revolution_wind_outward() {
        for m in [
            shapes::cylinder(0.4, 1.2, 24).unwrap(),
            shapes::capsule(0.3, 0.8, 20, 6).unwrap(),
        ] {
            let vol: f64 = m
                .faces
                .iter()
                .map(|f| {
                    let (a, b, c) = (m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
                    crate::geometry::dot(a, crate::geometry::cross(b, c)) / 6.0
                })
                .sum();
            assert!(vol > 0.0, "negative volume {vol}");
        }
    }

    #[test]
    fn torus_is_manifold_with_genus_one() {
        let m = shapes::torus(0.7, 0.25, 20, 12).unwrap();
        validate_manifold(&m).unwrap();
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn table_is_one_connected_euler_two_component() {
        let m = shapes::table(0.6, 0.1, 0.12, 0.8, 16).unwrap();
        let comps = m.connected_components();
        assert_eq!(comps.len(), 1);
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn lamp_has_two_components() {
        let m = shapes::lamp(0.05, 1.0, 0.4, 0.15, 0.3, 12).unwrap();
        assert_eq!(m.connected_components().len(), 2);
    }

    #[test]
    fn generate_shape_is_deterministic_and_normalized() {
        for family in [
            ShapeFamily::Box,
            ShapeFamily::Ellipsoid,
            ShapeFamily::Cylinder,
            ShapeFamily::Capsule,
            ShapeFamily::Table,
            ShapeFamily::Lamp,
            ShapeFamily::Torus,
        ] {
            let a = generate_shape(family, 42).unwrap();
            let b = generate_shape(family, 42).unwrap();
            assert_eq!(a.vertices, b.vertices, "{family:?} not deterministic");
            let mut hi = [f64::NEG_INFINITY; 3];
            let mut lo = [f64::INFINITY; 3];
            for v in &a.vertices {
                for k in 0..3 {
                    hi[k] = hi[k].max(v[k]);
                    lo[k] = lo[k].min(v[k]);
                }
            }
            let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
            assert!((longest - 1.0).abs() < 1e-12, "{family:?} not normalized");
        }
    }

    #[test]
    fn build_dataset_writes_consistent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_family: 2,
            image_size: 32,
            ..DatasetConfig::default()
        };
        let records = build_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(records.len(), 2 * 6); // 4 base + 2 novel families
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.len(), records.len());
        let splits: std::collections::BTreeSet<&str> =
            records.iter().map(|r| r.split.as_str()).collect();
        assert!(splits.contains("train") && splits.contains("val") && splits.contains("test"));
        for r in &records {
            assert!(dir.path().join(&r.mesh_path).exists());
            assert!(dir.path().join(&r.image_path).exists());
            let base = ShapeFamily::from_name(&r.family).unwrap().role() == FamilyRole::Base;
            assert_eq!(base, r.split != "test");
        }
    }

    #[test]
    fn dataset_generation_is_byte_identical_across_runs() {
        let cfg = DatasetConfig {
            per_family: 1,
            image_size: 32,
            ..DatasetConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_dataset(d1.path(), &cfg).unwrap();
        build_dataset(d2.path(), &cfg).unwrap();
        for rel in ["manifest.jsonl", "images/box_000.pgm", "meshes/lamp_000.obj"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs");
        }
    }

    #[test]
    fn every_render_covers_at_least_five_percent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_family: 2,
            image_size: 32,
            include_torus: true,
            ..DatasetConfig::default()
        };
        let records = build_dataset(dir.path(), &cfg).unwrap();
        for r in &records {
            let mesh = read_obj(&dir.path().join(&r.mesh_path)).unwrap();
            let mask = rasterize_hard(&mesh, &r.camera).unwrap();
            let coverage = mask.mean();
            assert!(coverage >= 0.05, "{}: coverage {coverage}", r.id);
        }
    }

    #[test]
    fn load_example_caches_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_family: 1,
            image_size: 32,
            ..DatasetConfig::default()
        };
        let records = build_dataset(dir.path(), &cfg).unwrap();
        let r = &records[0];
        let cold = load_example(dir.path(), r).unwrap();
        assert!(cache_path(dir.path(), r).exists());
        let warm = load_example(dir.path(), r).unwrap();
        assert_eq!(cold.gt_samples.points.len(), GT_SAMPLES);
        assert_eq!(cold.gt_silhouettes.views(), 24);
        for (a, b) in cold
            .gt_samples
            .points
            .iter()
            .zip(warm.gt_samples.points.iter())
        {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        for (ma, mb) in cold
            .gt_silhouettes
            .masks
            .iter()
            .zip(warm.gt_silhouettes.masks.iter())
        {
            assert_eq!(ma.data, mb.data);
        }
    }

    #[test]
    fn missing_files_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_family: 1,
            image_size: 32,
            ..DatasetConfig::default()
        };
        let records = build_dataset(dir.path(), &cfg).unwrap();
        let mut broken = records[0].clone();
        broken.image_path = "images/nope.pgm".into();
        let err = match load_example(dir.path(), &broken) {
            Err(e) => e,
            Ok(_) => panic!("missing image must fail"),
        };
        assert!(err.to_string().contains("nope.pgm"), "{err}");
    }
}
