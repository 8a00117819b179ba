//! Hard, soft and shaded rasterization plus PGM image I/O.
//!
//! The soft rasterizer is a single tape primitive: per face `j` and pixel
//! `i` the occupancy is `D_j(i) = sigmoid(delta * d^2 / sigma)` with `d`
//! the distance (in normalized device coordinates) from the pixel center
//! to the triangle boundary and `delta = +1` inside / `-1` outside; the
//! pixel value is the probabilistic union `1 - prod_j (1 - D_j(i))`. Its
//! backward pass is hand-derived and finite-difference checked.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{dot, normalize3, Mesh};
use crate::tensor::{BackwardCtx, Tensor, Var};
use std::io::Read;
use std::path::Path;

/// Single-view occupancy or intensity map, values in [0,1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Mask {
        Mask {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Multi-view silhouette: one mask per generating camera.
#[derive(Clone, Debug)]
pub struct Silhouette {
    pub masks: Vec<Mask>,
    pub cameras: Vec<Camera>,
}

impl Silhouette {
    pub fn new(masks: Vec<Mask>, cameras: Vec<Camera>) -> Result<Silhouette> {
        if masks.len() != cameras.len() {
            return Err(Error::Camera(format!(
                "{} masks but {} cameras",
                masks.len(),
                cameras.len()
            )));
        }
        for (v, m) in masks.iter().enumerate() {
            if m.data.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Camera(format!(
                    "silhouette view {v} has values outside [0,1]"
                )));
            }
        }
        Ok(Silhouette { masks, cameras })
    }

    pub fn views(&self) -> usize {
        self.masks.len()
    }
}

fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn inside_triangle(p: [f64; 2], tri: &[[f64; 2]; 3]) -> bool {
    let e0 = edge_fn(tri[0], tri[1], p);
    let e1 = edge_fn(tri[1], tri[2], p);
    let e2 = edge_fn(tri[2], tri[0], p);
    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
}

/// Binary silhouette: pixel = 1 iff its center (integer + 0.5) lies inside
/// the projection of at least one face. No depth buffer is needed.
pub fn rasterize_hard(mesh: &Mesh, camera: &Camera) -> Result<Mask> {
    let mut mask = Mask::zeros(camera.width, camera.height);
    if mesh.faces.is_empty() {
        return Ok(mask);
    }
    let mut projected = Vec::with_capacity(mesh.vertices.len());
    for (i, &v) in mesh.vertices.iter().enumerate() {
        projected.push(camera.project_point(v, i)?.0);
    }
    for f in &mesh.faces {
        let tri = [projected[f[0]], projected[f[1]], projected[f[2]]];
        let x0 = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let x1 = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let y0 = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let y1 = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let xs = (x0 - 0.5).floor().max(0.0) as usize;
        let xe = ((x1 + 0.5).ceil() as i64).clamp(0, camera.width as i64) as usize;
        let ys = (y0 - 0.5).floor().max(0.0) as usize;
        let ye = ((y1 + 0.5).ceil() as i64).clamp(0, camera.height as i64) as usize;
        for y in ys..ye {
            for x in xs..xe {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if inside_triangle(p, &tri) {
                    mask.data[y * camera.width + x] = 1.0;
                }
            }
        }
    }
    Ok(mask)
}

/// Distance from `p` to segment `(a, b)` with the interpolation parameter
/// of the closest point.
fn point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
    (d, t)
}

/// Signed squared boundary distance in NDC; positive inside.
fn signed_sq_distance(p: [f64; 2], tri: &[[f64; 2]; 3]) -> (f64, usize, f64) {
    let mut best_d = f64::INFINITY;
    let mut best_edge = 0;
    let mut best_t = 0.0;
    for (e, (i, j)) in [(0, 1), (1, 2), (2, 0)].iter().enumerate() {
        let (d, t) = point_segment(p, tri[*i], tri[*j]);
        if d < best_d {
            best_d = d;
            best_edge = e;
            best_t = t;
        }
    }
    let sign = if inside_triangle(p, tri) { 1.0 } else { -1.0 };
    (sign * best_d * best_d, best_edge, best_t)
}

struct SoftGeometry {
    ndc: Vec<[f64; 2]>,
    cam_pts: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl SoftGeometry {
    fn face_visible(&self, f: &[usize; 3]) -> bool {
        self.valid[f[0]] && self.valid[f[1]] && self.valid[f[2]]
    }
}

fn project_ndc(verts: &Tensor, camera: &Camera) -> SoftGeometry {
    // A vertex can drift behind the image plane mid-training; it is
    // marked invalid and every face touching it is clipped out of the
    // silhouette (with no gradient) instead of aborting the step.
    let rows = verts.rows3();
    let mut ndc = Vec::with_capacity(rows.len());
    let mut cam_pts = Vec::with_capacity(rows.len());
    let mut valid = Vec::with_capacity(rows.len());
    for &v in rows.iter() {
        let c = camera.to_camera(v);
        valid.push(c[2] > 1e-6);
        let cz = c[2].max(1e-6);
        let u = camera.fx * c[0] / cz + camera.cx;
        let w = camera.fy * c[1] / cz + camera.cy;
        ndc.push([
            2.0 * u / camera.width as f64 - 1.0,
            2.0 * w / camera.height as f64 - 1.0,
        ]);
        cam_pts.push([c[0], c[1], cz]);
    }
    SoftGeometry {
        ndc,
        cam_pts,
        valid,
    }
}

fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Differentiable silhouette of `verts` (a (V,3) tape variable) under one
/// camera. Returns a flat (h*w,) variable; pixel order is row-major.
pub fn rasterize_soft(
    verts: &Var,
    faces: &[[usize; 3]],
    camera: &Camera,
    sigma: f64,
) -> Result<Var> {
    if sigma <= 0.0 {
        return Err(Error::Camera(format!(
            "soft rasterizer sharpness must be positive, got {sigma}"
        )));
    }
    let (w, h) = (camera.width, camera.height);
    let value = verts.to_tensor();
    if value.shape().len() != 2 || value.shape()[1] != 3 {
        return Err(Error::Autodiff(format!(
            "rasterize_soft wants a (V,3) tensor, got {:?}",
            value.shape()
        )));
    }
    let geo = project_ndc(&value, camera);

    // A face only influences pixels within `margin` of its footprint:
    // beyond it, sigmoid(-d^2/sigma) < ~1e-18, far below finite-difference
    // resolution (the IoU ratio downstream amplifies truncation jumps).
    let margin = (40.0 * sigma).sqrt();
    let px_w = 2.0 / w as f64;
    let px_h = 2.0 / h as f64;

    let mut prod = vec![1.0f64; w * h];
    let mut contributions: Vec<Vec<u32>> = vec![Vec::new(); w * h];
    for (fi, f) in faces.iter().enumerate() {
        if !geo.face_visible(f) {
            continue;
        }
        let tri = [geo.ndc[f[0]], geo.ndc[f[1]], geo.ndc[f[2]]];
        let x0 = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - margin;
        let x1 = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
        let y0 = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - margin;
        let y1 = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
        let xs = (((x0 + 1.0) / px_w - 0.5).floor().max(0.0)) as usize;
        let xe = ((((x1 + 1.0) / px_w - 0.5).ceil() as i64) + 1).clamp(0, w as i64) as usize;
        let ys = (((y0 + 1.0) / px_h - 0.5).floor().max(0.0)) as usize;
        let ye = ((((y1 + 1.0) / px_h - 0.5).ceil() as i64) + 1).clamp(0, h as i64) as usize;
        for y in ys..ye {
            let py = (y as f64 + 0.5) * px_h - 1.0;
            for x in xs..xe {
                let px = (x as f64 + 0.5) * px_w - 1.0;
                let (sq, _, _) = signed_sq_distance([px, py], &tri);
                let d = sigmoid_f(sq / sigma);
                if d < 1e-17 {
                    continue;
                }
                let idx = y * w + x;
                prod[idx] *= 1.0 - d;
                contributions[idx].push(fi as u32);
            }
        }
    }
    let out: Vec<f64> = prod.iter().map(|&p| 1.0 - p).collect();

    let faces_b: Vec<[usize; 3]> = faces.to_vec();
    let camera_b = camera.clone();
    Ok(verts.tape().record(
        Tensor::raw(vec![w * h], out),
        &[verts],
        Box::new(move |ctx: &BackwardCtx| {
            vec![soft_backward(
                ctx.grad,
                ctx.inputs[0],
                &faces_b,
                &camera_b,
                sigma,
                &contributions,
            )]
        }),
    ))
}

fn soft_backward(
    grad_out: &Tensor,
    verts: &Tensor,
    faces: &[[usize; 3]],
    camera: &Camera,
    sigma: f64,
    contributions: &[Vec<u32>],
) -> Tensor {
    let geo = project_ndc(verts, camera);
    let (w, h) = (camera.width, camera.height);
    let px_w = 2.0 / w as f64;
    let px_h = 2.0 / h as f64;
    let mut grad_ndc = vec![[0.0f64; 2]; geo.ndc.len()];

    for (idx, faces_here) in contributions.iter().enumerate() {
        if faces_here.is_empty() {
            continue;
        }
        let g = grad_out.data()[idx];
        if g == 0.0 {
            continue;
        }
        let y = idx / w;
        let x = idx % w;
        let p = [
            (x as f64 + 0.5) * px_w - 1.0,
            (y as f64 + 0.5) * px_h - 1.0,
        ];
        // Recompute each contributing face's occupancy.
        let ds: Vec<(f64, usize, f64, f64)> = faces_here
            .iter()
            .map(|&fi| {
                let f = faces[fi as usize];
                let tri = [geo.ndc[f[0]], geo.ndc[f[1]], geo.ndc[f[2]]];
                let (sq, edge, t) = signed_sq_distance(p, &tri);
                (sigmoid_f(sq / sigma), edge, t, sq)
            })
            .collect();
        let total: f64 = ds.iter().map(|&(d, _, _, _)| 1.0 - d).product();
        for (k, &fi) in faces_here.iter().enumerate() {
            let (d_occ, edge, t, sq) = ds[k];
            // Leave-one-out product: d(pixel)/dD_j.
            let omd = 1.0 - d_occ;
            let loo = if omd > 1e-9 {
                total / omd
            } else {
                ds.iter()
                    .enumerate()
                    .filter(|&(m, _)| m != k)
                    .map(|(_, &(d, _, _, _))| 1.0 - d)
                    .product()
            };
            // dD/d(sq) = sigmoid' / sigma
            let dd_dsq = d_occ * (1.0 - d_occ) / sigma;
            let scale = g * loo * dd_dsq;
            if scale == 0.0 {
                continue;
            }
            // d(sq)/d(2d verts): sign * 2 * dist * d(dist)/d(verts).
            let f = faces[fi as usize];
            let tri = [geo.ndc[f[0]], geo.ndc[f[1]], geo.ndc[f[2]]];
            let sign = if sq >= 0.0 { 1.0 } else { -1.0 };
            let dist = sq.abs().sqrt();
            if dist < 1e-12 {
                continue; // gradient of sign*d^2 vanishes at the boundary
            }
            let (i0, i1) = [(0usize, 1usize), (1, 2), (2, 0)][edge];
            let a = tri[i0];
            let b = tri[i1];
            let c = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let u_hat = [(p[0] - c[0]) / dist, (p[1] - c[1]) / dist];
            // d(dist)/da = -(1-t) u_hat, d(dist)/db = -t u_hat.
            let common = scale * sign * 2.0 * dist;
            let va = f[i0];
            let vb = f[i1];
            grad_ndc[va][0] += common * (-(1.0 - t) * u_hat[0]);
            grad_ndc[va][1] += common * (-(1.0 - t) * u_hat[1]);
            grad_ndc[vb][0] += common * (-t * u_hat[0]);
            grad_ndc[vb][1] += common * (-t * u_hat[1]);
        }
    }

    // Chain NDC gradients through the projection into world space.
    let mut grad = Tensor::zeros(verts.shape().to_vec());
    for (vi, gn) in grad_ndc.iter().enumerate() {
        if gn[0] == 0.0 && gn[1] == 0.0 {
            continue;
        }
        let c = geo.cam_pts[vi];
        let sx = 2.0 * camera.fx / w as f64;
        let sy = 2.0 * camera.fy / h as f64;
        // d(ndc)/d(cam): perspective divide Jacobian.
        let g_cam = [
            gn[0] * sx / c[2],
            gn[1] * sy / c[2],
            -(gn[0] * sx * c[0] + gn[1] * sy * c[1]) / (c[2] * c[2]),
        ];
        // d(cam)/d(world) = R, so g_world = R^T g_cam.
        for k in 0..3 {
            let gw = camera.rot[0][k] * g_cam[0]
                + camera.rot[1][k] * g_cam[1]
                + camera.rot[2][k] * g_cam[2];
            grad.data_mut()[vi * 3 + k] += gw;
        }
    }
    grad
}

/// Lambertian grayscale render with a z-buffer: intensity
/// `0.2 + 0.8 * max(0, n_face . light)`, background 0.
pub fn render_shaded(mesh: &Mesh, camera: &Camera, light: [f64; 3]) -> Result<Mask> {
    let mut img = Mask::zeros(camera.width, camera.height);
    if mesh.faces.is_empty() {
        return Ok(img);
    }
    let mut zbuf = vec![f64::INFINITY; camera.width * camera.height];
    let mut projected = Vec::with_capacity(mesh.vertices.len());
    let mut depths = Vec::with_capacity(mesh.vertices.len());
    for (i, &v) in mesh.vertices.iter().enumerate() {
        let (uv, d) = camera.project_point(v, i)?;
        projected.push(uv);
        depths.push(d);
    }
    let light = normalize3(light);
    for (fi, f) in mesh.faces.iter().enumerate() {
        let tri = [projected[f[0]], projected[f[1]], projected[f[2]]];
        let normal = normalize3(mesh.face_normal(fi));
        let shade = 0.2 + 0.8 * dot(normal, light).max(0.0);
        let area2 = edge_fn(tri[0], tri[1], tri[2]);
        if area2.abs() < 1e-12 {
            continue;
        }
        let x0 = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let x1 = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let y0 = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let y1 = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let xs = (x0 - 0.5).floor().max(0.0) as usize;
        let xe = ((x1 + 0.5).ceil() as i64).clamp(0, camera.width as i64) as usize;
        let ys = (y0 - 0.5).floor().max(0.0) as usize;
        let ye = ((y1 + 0.5).ceil() as i64).clamp(0, camera.height as i64) as usize;
        for y in ys..ye {
            for x in xs..xe {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if !inside_triangle(p, &tri) {
                    continue;
                }
                // Affine barycentric depth interpolation.
                let w0 = edge_fn(tri[1], tri[2], p) / area2;
                let w1 = edge_fn(tri[2], tri[0], p) / area2;
                let w2 = 1.0 - w0 - w1;
                let z = w0 * depths[f[0]] + w1 * depths[f[1]] + w2 * depths[f[2]];
                let idx = y * camera.width + x;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    img.data[idx] = shade;
                }
            }
        }
    }
    Ok(img)
}

/// Write a mask as binary PGM (P5), 8-bit.
pub fn write_pgm_u8(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend(
        mask.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a mask as binary PGM (P5), 16-bit big-endian (for inspecting
/// soft masks; losses always use in-memory reals).
pub fn write_pgm_u16(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", mask.width, mask.height).into_bytes();
    for &v in &mask.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PGM (P5) into a [0,1] mask; handles 8- and 16-bit depth.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Data(format!("{}: truncated PGM header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Data(format!(
            "{}: expected P5 magic, got {magic:?}",
            path.display()
        )));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|e| Error::Data(format!("{}: bad PGM header: {e}", path.display())))
    };
    let width = parse(token(&bytes, &mut pos)?)?;
    let height = parse(token(&bytes, &mut pos)?)?;
    let maxval = parse(token(&bytes, &mut pos)?)?;
    pos += 1; // single whitespace after maxval
    let n = width * height;
    let data = if maxval < 256 {
        if bytes.len() < pos + n {
            return Err(Error::Data(format!("{}: truncated PGM data", path.display())));
        }
        bytes[pos..pos + n]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect()
    } else {
        if bytes.len() < pos + 2 * n {
            return Err(Error::Data(format!("{}: truncated PGM data", path.display())));
        }
        bytes[pos..pos + 2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Ok(Mask {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::view_ring;
    use crate::geometry::icosphere;
    use crate::tensor::ops::{mul, reduce_sum};
    use crate::tensor::{finite_diff_check, Tape};

    fn wide_camera() -> Camera {
        Camera::from_angles(30.0, 20.0, 1.4, 10.0, 32, 32).unwrap()
    }

    /// Independent per-pixel oracle: barycentric point-in-triangle test
    /// against every face, no bounding boxes.
    fn brute_force_mask(mesh: &Mesh, camera: &Camera) -> Mask {
        let mut mask = Mask::zeros(camera.width, camera.height);
        let projected: Vec<[f64; 2]> = mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(i, &v)| camera.project_point(v, i).unwrap().0)
            .collect();
        for y in 0..camera.height {
            for x in 0..camera.width {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let inside = mesh.faces.iter().any(|f| {
                    let (a, b, c) = (projected[f[0]], projected[f[1]], projected[f[2]]);
                    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
                    if det == 0.0 {
                        return false;
                    }
                    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
                    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
                    let l0 = 1.0 - l1 - l2;
                    l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0
                });
                if inside {
                    mask.data[y * camera.width + x] = 1.0;
                }
            }
        }
        mask
    }

    #[test]
    fn empty_mesh_rasterizes_to_zero() {
        let mesh = Mesh::new(vec![], vec![]).unwrap();
        let mask = rasterize_hard(&mesh, &wide_camera()).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covering_triangle_rasterizes_to_one() {
        // Big triangle in front of the camera covering the whole image.
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 10.0, 16, 16).unwrap();
        let mesh = Mesh::new(
            vec![[0.0, -30.0, -30.0], [0.0, 30.0, -30.0], [0.0, 0.0, 60.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let mask = rasterize_hard(&mesh, &cam).unwrap();
        assert!(mask.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hard_matches_brute_force_on_icosphere() {
        let mesh = icosphere(2).unwrap();
        for cam in view_ring((1.4, 1.4), 3, 10.0, 32, 32).unwrap().iter().take(6) {
            let fast = rasterize_hard(&mesh, cam).unwrap();
            let slow = brute_force_mask(&mesh, cam);
            assert_eq!(fast.data, slow.data);
        }
    }

    #[test]
    fn hard_mask_invariant_under_face_permutation() {
        let mesh = icosphere(1).unwrap();
        let mut permuted_faces = mesh.faces.clone();
        permuted_faces.reverse();
        let permuted = Mesh::new(mesh.vertices.clone(), permuted_faces).unwrap();
        let cam = wide_camera();
        assert_eq!(
            rasterize_hard(&mesh, &cam).unwrap().data,
            rasterize_hard(&permuted, &cam).unwrap().data
        );
    }

    #[test]
    fn soft_boundary_pixel_is_half() {
        // Camera 8x8, triangle whose projected edge passes exactly through
        // a pixel center: that pixel reads sigmoid(0) = 0.5.
        let cam = Camera::new(
            8.0,
            8.0,
            4.0,
            4.0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 2.0],
            8,
            8,
        )
        .unwrap();
        // Pixel (4, 4) center = (4.5, 4.5) px. Put a vertical triangle edge
        // exactly on u = 4.5: x_cam = (4.5 - 4)/8 * z = 0.125 at z = 2.
        let mesh_verts = vec![
            [0.125, -0.5, 0.0],
            [0.125, 1.5, 0.0],
            [2.0, 0.5, 0.0],
        ];
        let tape = Tape::new();
        let v = tape.input(Tensor::from_rows3(&mesh_verts));
        let soft = rasterize_soft(&v, &[[0, 1, 2]], &cam, 1e-4).unwrap();
        let val = soft.value().data()[4 * 8 + 4];
        assert!((val - 0.5).abs() < 1e-9, "got {val}");
    }

    #[test]
    fn soft_values_in_unit_interval() {
        let mesh = icosphere(1).unwrap();
        let cam = wide_camera();
        let tape = Tape::new();
        let v = tape.input(Tensor::from_rows3(&mesh.vertices));
        let soft = rasterize_soft(&v, &mesh.faces, &cam, 1e-3).unwrap();
        assert!(soft
            .value()
            .data()
            .iter()
            .all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn soft_approaches_hard_as_sigma_vanishes() {
        let mesh = icosphere(2).unwrap();
        for cam in view_ring((1.4, 1.4), 11, 10.0, 32, 32).unwrap().iter().take(5) {
            let hard = rasterize_hard(&mesh, cam).unwrap();
            let tape = Tape::new();
            let v = tape.constant(Tensor::from_rows3(&mesh.vertices));
            let soft = rasterize_soft(&v, &mesh.faces, cam, 1e-5).unwrap();
            let gap: f64 = soft
                .value()
                .data()
                .iter()
                .zip(hard.data.iter())
                .map(|(s, h)| (s - h).abs())
                .sum::<f64>()
                / hard.data.len() as f64;
            assert!(gap < 1e-2, "mean gap {gap}");
        }
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 4.0, 8, 8).unwrap();
        let verts = Tensor::from_rows3(&[
            [0.0, -0.31, -0.27],
            [0.0, 0.42, -0.23],
            [0.0, 0.03, 0.44],
        ]);
        let report = finite_diff_check(
            |tape, v| {
                let soft = rasterize_soft(v, &[[0, 1, 2]], &cam, 1e-3)?;
                // Weighted sum so every pixel matters differently.
                let w: Vec<f64> = (0..64).map(|i| 0.3 + 0.01 * i as f64).collect();
                let wv = tape.constant(Tensor::new(vec![64], w)?);
                reduce_sum(&mul(&soft, &wv)?)
            },
            &verts,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn soft_clips_faces_behind_the_camera() {
        // One triangle in view, one touching a vertex behind the image
        // plane: the latter is clipped, the output stays finite and the
        // behind vertex gets no gradient.
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 4.0, 8, 8).unwrap();
        let behind = cam.back_project([cam.cx, cam.cy], -0.5);
        let verts = vec![
            [0.0, -0.31, -0.27],
            [0.0, 0.42, -0.23],
            [0.0, 0.03, 0.44],
            behind,
        ];
        let tape = Tape::new();
        let v = tape.input(Tensor::from_rows3(&verts));
        let both = rasterize_soft(&v, &[[0, 1, 2], [1, 2, 3]], &cam, 1e-3).unwrap();
        let tape2 = Tape::new();
        let v2 = tape2.input(Tensor::from_rows3(&verts));
        let front_only = rasterize_soft(&v2, &[[0, 1, 2]], &cam, 1e-3).unwrap();
        assert_eq!(both.value().data(), front_only.value().data());
        let loss = reduce_sum(&both).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = v.grad(&grads).unwrap();
        assert!(g.data()[9..12].iter().all(|&x| x == 0.0), "{g:?}");
        assert!(g.data()[..9].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn soft_rejects_non_positive_sigma() {
        let tape = Tape::new();
        let v = tape.input(Tensor::from_rows3(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]));
        assert!(rasterize_soft(&v, &[[0, 1, 2]], &wide_camera(), 0.0).is_err());
    }

    #[test]
    fn shaded_normal_at_light_reads_one() {
        // Triangle facing the camera, light along the face normal.
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 10.0, 16, 16).unwrap();
        let mesh = Mesh::new(
            vec![[0.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.5]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let n = normalize3(mesh.face_normal(0));
        let img = render_shaded(&mesh, &cam, n).unwrap();
        let max = img.data.iter().cloned().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shaded_nearer_face_wins() {
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 10.0, 16, 16).unwrap();
        // Two parallel triangles; the one nearer to the camera (larger x,
        // since the camera sits at +x looking toward -x) must win.
        let near = [[0.5, -1.0, -1.0], [0.5, 1.0, -1.0], [0.5, 0.0, 1.5]];
        let far = [[-0.5, -1.0, -1.0], [-0.5, 1.0, -1.0], [-0.5, 0.0, 1.5]];
        let mut verts = near.to_vec();
        verts.extend_from_slice(&far);
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        // Shade depends only on normals here; make them differ by flipping
        // the far face's winding.
        let mesh_flipped = Mesh::new(mesh.vertices.clone(), vec![[0, 1, 2], [3, 5, 4]]).unwrap();
        let light = normalize3(mesh_flipped.face_normal(0));
        let img = render_shaded(&mesh_flipped, &cam, light).unwrap();
        // Near face's shade: 1.0; far face (flipped normal): 0.2.
        let center = img.at(8, 8);
        assert!((center - 1.0).abs() < 1e-12, "got {center}");
    }

    #[test]
    fn pgm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask {
            width: 4,
            height: 2,
            data: vec![0.0, 0.25, 0.5, 1.0, 0.1, 0.9, 0.33, 0.66],
        };
        let p8 = dir.path().join("a.pgm");
        write_pgm_u8(&mask, &p8).unwrap();
        let back = read_pgm(&p8).unwrap();
        assert_eq!(back.width, 4);
        for (a, b) in back.data.iter().zip(mask.data.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
        let p16 = dir.path().join("b.pgm");
        write_pgm_u16(&mask, &p16).unwrap();
        let back = read_pgm(&p16).unwrap();
        for (a, b) in back.data.iter().zip(mask.data.iter()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }
}
