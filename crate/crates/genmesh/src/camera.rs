//! Pinhole camera model, projection and the 24-view evaluation rig.

use crate::error::{Error, Result};
use crate::geometry::{cross, dot, normalize3, sub3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
/// transform. `R` must be a proper rotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub width: usize,
    pub height: usize,
}

/// The paper-style rig: 3 elevations x 8 azimuths.
pub const RIG_ELEVATIONS_DEG: [f64; 3] = [-45.0, 0.0, 45.0];
pub const RIG_AZIMUTHS_DEG: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

/// Default per-camera distance range for the rig.
pub const RIG_DISTANCE_RANGE: (f64, f64) = (1.1375, 1.6625);

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: [[f64; 3]; 3],
        trans: [f64; 3],
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Camera(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        // R^T R = I and det(R) = 1 within 1e-9.
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += rot[k][i] * rot[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((v - want).abs());
            }
        }
        let det = dot(rot[0], cross(rot[1], rot[2]));
        if max_dev > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Camera(format!(
                "rotation not orthonormal (max |R^T R - I| = {max_dev:.2e}, det = {det})"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
        })
    }

    /// World point into camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [
            dot(self.rot[0], p) + self.trans[0],
            dot(self.rot[1], p) + self.trans[1],
            dot(self.rot[2], p) + self.trans[2],
        ]
    }

    /// Project one world point; errors if at or behind the camera plane.
    pub fn project_point(&self, p: [f64; 3], index: usize) -> Result<([f64; 2], f64)> {
        let c = self.to_camera(p);
        if c[2] <= 1e-6 {
            return Err(Error::BehindCamera {
                index,
                depth: c[2],
            });
        }
        Ok((
            [
                self.fx * c[0] / c[2] + self.cx,
                self.fy * c[1] / c[2] + self.cy,
            ],
            c[2],
        ))
    }

    /// Back-project pixel coordinates at a given depth into world space.
    pub fn back_project(&self, uv: [f64; 2], depth: f64) -> [f64; 3] {
        let cam = [
            (uv[0] - self.cx) * depth / self.fx,
            (uv[1] - self.cy) * depth / self.fy,
            depth,
        ];
        // world = R^T (cam - T)
        let d = sub3(cam, self.trans);
        [
            self.rot[0][0] * d[0] + self.rot[1][0] * d[1] + self.rot[2][0] * d[2],
            self.rot[0][1] * d[0] + self.rot[1][1] * d[1] + self.rot[2][1] * d[2],
            self.rot[0][2] * d[0] + self.rot[1][2] * d[1] + self.rot[2][2] * d[2],
        ]
    }

    /// Look-at construction: camera at `eye`, optical axis towards
    /// `target`, pixel intrinsics centered on the image.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal_px: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let forward = normalize3(sub3(target, eye));
        let right = normalize3(cross(forward, up));
        let down = cross(forward, right);
        let rot = [right, down, forward];
        // T = -R * eye
        let trans = [
            -dot(rot[0], eye),
            -dot(rot[1], eye),
            -dot(rot[2], eye),
        ];
        Camera::new(
            focal_px,
            focal_px,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rot,
            trans,
            width,
            height,
        )
    }

    /// Camera on the view sphere at spherical angles, looking at the origin.
    pub fn from_angles(
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
        focal_px: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        let eye = [
            distance * el.cos() * az.cos(),
            distance * el.cos() * az.sin(),
            distance * el.sin(),
        ];
        // Z-up world; poles excluded by the rig's elevation set.
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], focal_px, width, height)
    }
}

/// Project a point cloud; every point must be in front of the camera.
/// Clamping is deliberately not applied here.
pub fn project(points: &PointCloud, camera: &Camera) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let mut uv = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    for (i, &p) in points.points.iter().enumerate() {
        let (px, d) = camera.project_point(p, i)?;
        uv.push(px);
        depth.push(d);
    }
    Ok((uv, depth))
}

/// The 24-camera rig: all elevation/azimuth pairs, per-camera distance
/// drawn uniformly from `distance_range`, deterministic given the seed.
pub fn view_ring(
    distance_range: (f64, f64),
    seed: u64,
    focal_px: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    let (lo, hi) = distance_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Camera(format!(
            "invalid distance range ({lo}, {hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cameras = Vec::with_capacity(24);
    for &el in &RIG_ELEVATIONS_DEG {
        for &az in &RIG_AZIMUTHS_DEG {
            let d = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            cameras.push(Camera::from_angles(az, el, d, focal_px, width, height)?);
        }
    }
    Ok(cameras)
}

/// The fixed canonical camera used by viewer-centered reconstruction:
/// azimuth 0, elevation 0, midpoint of the rig distance range.
pub fn canonical_camera(focal_px: f64, width: usize, height: usize) -> Camera {
    let d = (RIG_DISTANCE_RANGE.0 + RIG_DISTANCE_RANGE.1) / 2.0;
    Camera::from_angles(0.0, 0.0, d, focal_px, width, height)
        .expect("canonical camera construction cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    fn test_camera() -> Camera {
        Camera::new(
            100.0,
            100.0,
            50.0,
            50.0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 2.0],
            100,
            100,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = test_camera();
        let (uv, depth) = cam.project_point([0.0, 0.0, 1.0], 0).unwrap();
        assert_eq!(uv, [50.0, 50.0]);
        assert_eq!(depth, 3.0);
    }

    #[test]
    fn hand_computed_projection() {
        // u = 100 * 0.5 / 2 + 50 = 75
        let cam = test_camera();
        let (uv, _) = cam.project_point([0.5, 0.0, 0.0], 0).unwrap();
        assert!((uv[0] - 75.0).abs() < 1e-12);
        assert!((uv[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_errors_with_point_index() {
        let cam = test_camera();
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, -3.0]]);
        let err = project(&cloud, &cam).unwrap_err();
        match err {
            Error::BehindCamera { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn back_project_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = Camera::from_angles(30.0, 20.0, 1.4, 35.0, 64, 64).unwrap();
        for _ in 0..50 {
            let p = [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ];
            let (uv, depth) = cam.project_point(p, 0).unwrap();
            let back = cam.back_project(uv, depth);
            let (uv2, _) = cam.project_point(back, 0).unwrap();
            assert!((uv[0] - uv2[0]).abs() < 1e-9 && (uv[1] - uv2[1]).abs() < 1e-9);
            assert!(norm(sub3(p, back)) < 1e-9);
        }
    }

    #[test]
    fn view_ring_count_and_determinism() {
        let a = view_ring(RIG_DISTANCE_RANGE, 7, 22.4, 64, 64).unwrap();
        let b = view_ring(RIG_DISTANCE_RANGE, 7, 22.4, 64, 64).unwrap();
        assert_eq!(a.len(), 24);
        for (ca, cb) in a.iter().zip(b.iter()) {
            assert_eq!(ca.trans, cb.trans);
        }
        assert!(view_ring((0.0, 1.0), 7, 22.4, 64, 64).is_err());
        assert!(view_ring((2.0, 1.0), 7, 22.4, 64, 64).is_err());
    }

    #[test]
    fn rig_front_camera_centers_origin() {
        let rig = view_ring(RIG_DISTANCE_RANGE, 0, 22.4, 64, 64).unwrap();
        // elevation -45 block comes first; azimuth 0 elevation 0 is index 8.
        let cam = &rig[8];
        let (uv, _) = cam.project_point([0.0; 3], 0).unwrap();
        assert!((uv[0] - 32.0).abs() < 1e-9 && (uv[1] - 32.0).abs() < 1e-9);
    }

    #[test]
    fn projection_equivariant_under_world_rotation() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cam = Camera::from_angles(40.0, -10.0, 1.5, 30.0, 64, 64).unwrap();
        // Rotation about z by a random angle.
        let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let q = [
            [t.cos(), -t.sin(), 0.0],
            [t.sin(), t.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        // R' = R * Q^T
        let mut rot2 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rot2[i][j] += cam.rot[i][k] * q[j][k];
                }
            }
        }
        let cam2 = Camera::new(
            cam.fx, cam.fy, cam.cx, cam.cy, rot2, cam.trans, cam.width, cam.height,
        )
        .unwrap();
        for _ in 0..20 {
            let p = [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ];
            let qp = [dot(q[0], p), dot(q[1], p), dot(q[2], p)];
            let (uv1, _) = cam.project_point(p, 0).unwrap();
            let (uv2, _) = cam2.project_point(qp, 0).unwrap();
            assert!((uv1[0] - uv2[0]).abs() < 1e-9 && (uv1[1] - uv2[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_camera_faces_origin() {
        let cam = canonical_camera(22.4, 64, 64);
        let (uv, d) = cam.project_point([0.0; 3], 0).unwrap();
        assert!((uv[0] - 32.0).abs() < 1e-9);
        assert!((d - 1.4).abs() < 1e-12);
    }
}
