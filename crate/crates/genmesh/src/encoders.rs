//! Miniature 2D/3D feature encoders and the two local-feature samplers.
//!
//! The 2D encoder is five stride-2 3x3 convolution blocks with feature
//! taps after blocks 3/4/5 (strides 8/16/32). The 3D encoder is three
//! PointNet-style grouping levels: farthest-point-sampled centroids, ball
//! query with a membership cap, centroid-relative coordinates through a
//! shared MLP, channel-wise max pool. `sample2d` bilinearly interpolates
//! projected points into the 2D maps; `sample3d` looks up the nearest
//! centroid per grouping level.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{norm, sub3, PointCloud};
use crate::raster::Mask;
use crate::tensor::ops::{
    add, concat, gather, gather_rows, leaky_relu, matmul, min_axis, neg, relu, reshape, sub,
};
use crate::tensor::{BackwardCtx, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Ball-query membership cap: at most this many nearest members per group.
pub const K_MAX: usize = 32;

/// Group radii for the three levels on unit-normalized shapes.
pub const GROUP_RADII: [f64; 3] = [0.2, 0.4, f64::INFINITY];

const LEAK: f64 = 0.1;

/// Encoder size: desk-scale (CPU-trainable) or paper-parity channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Desk,
    Parity,
}

impl EncoderMode {
    /// Output channels of the five 2D convolution blocks.
    pub fn conv_channels(self) -> [usize; 5] {
        match self {
            EncoderMode::Desk => [8, 16, 32, 64, 128],
            EncoderMode::Parity => [32, 64, 128, 256, 512],
        }
    }

    /// Channels of the three tapped feature maps (blocks 3/4/5).
    pub fn tap_channels(self) -> [usize; 3] {
        let c = self.conv_channels();
        [c[2], c[3], c[4]]
    }

    /// Centroid counts of the three grouping levels.
    pub fn group_counts(self) -> [usize; 3] {
        match self {
            EncoderMode::Desk => [64, 16, 1],
            EncoderMode::Parity => [512, 128, 1],
        }
    }

    /// Feature channels of the three grouping levels.
    pub fn group_channels(self) -> [usize; 3] {
        match self {
            EncoderMode::Desk => [32, 64, 128],
            EncoderMode::Parity => [128, 256, 512],
        }
    }

    /// Concatenated sample2d feature width.
    pub fn feat2d_width(self) -> usize {
        self.tap_channels().iter().sum()
    }

    /// Concatenated sample3d feature width.
    pub fn feat3d_width(self) -> usize {
        self.group_channels().iter().sum()
    }
}

/// One tapped feature map: `features` is (h*w, c), row-major pixels.
pub struct FeatureMap {
    pub features: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// The three multi-scale maps at strides 8/16/32 of the input image.
pub struct FeatureMaps {
    pub levels: Vec<FeatureMap>,
}

/// One grouping level: centroid positions plus an (m, c) feature matrix.
pub struct FeatureLevel {
    pub centroids: Vec<[f64; 3]>,
    pub features: Var,
    pub radius: f64,
}

/// The three grouping levels; the coarsest has exactly one group.
pub struct FeatureGroups {
    pub levels: Vec<FeatureLevel>,
}

fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::raw(shape, data)
}

/// Register the 2D encoder parameters ("enc2d.*") with random weights and
/// zero biases.
pub fn init_enc2d(store: &mut ParamStore, rng: &mut impl Rng, mode: EncoderMode) {
    let mut cin = 1;
    for (i, &cout) in mode.conv_channels().iter().enumerate() {
        let fan = 9 * cin;
        store.insert(
            format!("enc2d.conv{i}.weight"),
            uniform_init(rng, vec![fan, cout], fan),
        );
        store.insert(format!("enc2d.conv{i}.bias"), Tensor::zeros(vec![1, cout]));
        cin = cout;
    }
}

/// Register the 3D encoder parameters ("enc3d.*").
pub fn init_enc3d(store: &mut ParamStore, rng: &mut impl Rng, mode: EncoderMode) {
    let mut prev_c = 0;
    for (l, &cout) in mode.group_channels().iter().enumerate() {
        let cin = 3 + prev_c;
        store.insert(
            format!("enc3d.l{l}.w1"),
            uniform_init(rng, vec![cin, cout], cin),
        );
        store.insert(format!("enc3d.l{l}.b1"), Tensor::zeros(vec![1, cout]));
        store.insert(
            format!("enc3d.l{l}.w2"),
            uniform_init(rng, vec![cout, cout], cout),
        );
        store.insert(format!("enc3d.l{l}.b2"), Tensor::zeros(vec![1, cout]));
        prev_c = cout;
    }
}

fn ones_col(tape: &Tape, n: usize) -> Var {
    tape.constant(Tensor::full(vec![n, 1], 1.0))
}

/// Linear layer on a (n, cin) matrix: x W + 1 b.
fn linear(tape: &Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let n = x.shape()[0];
    add(&matmul(x, w)?, &matmul(&ones_col(tape, n), b)?)
}

/// One stride-2, pad-1, 3x3 convolution via im2col: input (h*w, cin),
/// output (h/2 * w/2, cout). Padding rows map to an appended zero row.
fn conv_block(
    tape: &Tape,
    x: &Var,
    h: usize,
    w: usize,
    cin: usize,
    weight: &Var,
    bias: &Var,
) -> Result<Var> {
    let (ho, wo) = (h / 2, w / 2);
    let zero_row = tape.constant(Tensor::zeros(vec![1, cin]));
    let padded = concat(&[x, &zero_row], 0)?;
    let pad_row = h * w;
    let mut idx = Vec::with_capacity(ho * wo * 9 * cin);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as i64 - 1;
                    let ix = (2 * ox + kx) as i64 - 1;
                    let row = if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                        iy as usize * w + ix as usize
                    } else {
                        pad_row
                    };
                    for ci in 0..cin {
                        idx.push(row * cin + ci);
                    }
                }
            }
        }
    }
    let patches = reshape(&gather(&padded, &idx)?, vec![ho * wo, 9 * cin])?;
    linear(tape, &patches, weight, bias)
}

/// Encode a grayscale image into the three tapped feature maps.
pub fn encode_image(
    tape: &Tape,
    params: &ParamStore,
    image: &Mask,
    mode: EncoderMode,
) -> Result<FeatureMaps> {
    let (h, w) = (image.height, image.width);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "encoder input must be divisible by 32, got {w}x{h}"
        )));
    }
    let mut x = tape.constant(Tensor::raw(vec![h * w, 1], image.data.clone()));
    let (mut ch, mut cw, mut cin) = (h, w, 1usize);
    let mut levels = Vec::with_capacity(3);
    for (i, &cout) in mode.conv_channels().iter().enumerate() {
        let weight = tape.param(params, &format!("enc2d.conv{i}.weight"))?;
        let bias = tape.param(params, &format!("enc2d.conv{i}.bias"))?;
        x = leaky_relu(&conv_block(tape, &x, ch, cw, cin, &weight, &bias)?, LEAK);
        ch /= 2;
        cw /= 2;
        cin = cout;
        if i >= 2 {
            levels.push(FeatureMap {
                features: x.clone(),
                channels: cout,
                height: ch,
                width: cw,
                stride: 1 << (i + 1),
            });
        }
    }
    Ok(FeatureMaps { levels })
}

/// Farthest point sampling: starts from the first point (keeping the
/// selection independent of any global offset), then repeatedly picks the
/// point maximizing the distance to the chosen set. Ties break to the
/// lowest index. Returns `count.min(n)` indices.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return vec![];
    }
    let start = 0;
    let mut chosen = vec![start];
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|&p| {
            let d = sub3(p, points[start]);
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        })
        .collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..n {
            if min_d2[i] > min_d2[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let d = sub3(points[i], points[best]);
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    chosen
}

/// Encode a point cloud into the three grouping levels. Point positions
/// enter as constants; use [`encode_points_var`] when gradients must
/// flow into the cloud (end-to-end two-stage training).
pub fn encode_points(
    tape: &Tape,
    params: &ParamStore,
    cloud: &PointCloud,
    mode: EncoderMode,
) -> Result<FeatureGroups> {
    if cloud.is_empty() {
        return Err(Error::Geometry("encode_points on an empty cloud".into()));
    }
    let coords = tape.constant(Tensor::from_rows3(&cloud.points));
    encode_points_var(tape, params, &coords, mode)
}

/// [`encode_points`] with differentiable point coordinates: grouping and
/// membership are selected from the current values (non-differentiable
/// choices), but the relative offsets feeding the shared MLPs keep their
/// gradient paths into `coords`.
pub fn encode_points_var(
    tape: &Tape,
    params: &ParamStore,
    coords: &Var,
    mode: EncoderMode,
) -> Result<FeatureGroups> {
    let shape = coords.shape();
    if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::Geometry(format!(
            "encode_points wants (n,3) coordinates, got {shape:?}"
        )));
    }
    let mut positions: Vec<[f64; 3]> = coords.to_tensor().rows3();
    let mut pos_var = coords.clone();
    let mut feats: Option<Var> = None;
    let mut levels = Vec::with_capacity(3);
    for (l, (&m, &radius)) in mode
        .group_counts()
        .iter()
        .zip(GROUP_RADII.iter())
        .enumerate()
    {
        let w1 = tape.param(params, &format!("enc3d.l{l}.w1"))?;
        let b1 = tape.param(params, &format!("enc3d.l{l}.b1"))?;
        let w2 = tape.param(params, &format!("enc3d.l{l}.w2"))?;
        let b2 = tape.param(params, &format!("enc3d.l{l}.b2"))?;
        let centroid_idx = farthest_point_sample(&positions, m);
        let mut group_rows = Vec::with_capacity(centroid_idx.len());
        let mut centroids = Vec::with_capacity(centroid_idx.len());
        for &ci in &centroid_idx {
            let c = positions[ci];
            centroids.push(c);
            // Ball query: members within the radius, nearest K_MAX kept.
            let mut members: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter_map(|(i, &p)| {
                    let d = norm(sub3(p, c));
                    (d <= radius).then_some((d, i))
                })
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.truncate(K_MAX);
            let idx: Vec<usize> = members.iter().map(|&(_, i)| i).collect();
            let rel = sub(
                &gather_rows(&pos_var, &idx)?,
                &gather_rows(&pos_var, &vec![ci; idx.len()])?,
            )?;
            let input = match &feats {
                Some(f) => concat(&[&rel, &gather_rows(f, &idx)?], 1)?,
                None => rel,
            };
            let h1 = relu(&linear(tape, &input, &w1, &b1)?);
            let h2 = linear(tape, &h1, &w2, &b2)?;
            // Channel-wise max over members.
            let (mins, _) = min_axis(&neg(&h2), 0)?;
            group_rows.push(reshape(&neg(&mins), vec![1, h2.shape()[1]])?);
        }
        let refs: Vec<&Var> = group_rows.iter().collect();
        let features = if refs.len() == 1 {
            group_rows[0].clone()
        } else {
            concat(&refs, 0)?
        };
        pos_var = gather_rows(&pos_var, &centroid_idx)?;
        positions = centroids.clone();
        feats = Some(features.clone());
        levels.push(FeatureLevel {
            centroids,
            features,
            radius,
        });
    }
    Ok(FeatureGroups { levels })
}

/// Grid coordinates of one projected point at a given stride, with the
/// clamp state needed by the position gradient.
struct GridPoint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    live_x: bool,
    live_y: bool,
    cam: [f64; 3],
}

fn grid_point(p: [f64; 3], camera: &Camera, stride: usize, mw: usize, mh: usize) -> GridPoint {
    // A point can drift behind the image plane mid-training; clamp its
    // depth and treat the projection as a dead zone (no position
    // gradient), mirroring the border clamp below.
    const MIN_DEPTH: f64 = 1e-3;
    let mut cam = camera.to_camera(p);
    let behind = cam[2] < MIN_DEPTH;
    cam[2] = cam[2].max(MIN_DEPTH);
    let u = camera.fx * cam[0] / cam[2] + camera.cx;
    let v = camera.fy * cam[1] / cam[2] + camera.cy;
    // Map cell (i) covers pixels [i*stride, (i+1)*stride); its center sits
    // at grid coordinate i, hence the -0.5 shift.
    let gx_raw = u / stride as f64 - 0.5;
    let gy_raw = v / stride as f64 - 0.5;
    let gx = gx_raw.clamp(0.0, (mw - 1) as f64);
    let gy = gy_raw.clamp(0.0, (mh - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(mw - 1);
    let y1 = (y0 + 1).min(mh - 1);
    GridPoint {
        x0,
        x1,
        y0,
        y1,
        fx: gx - x0 as f64,
        fy: gy - y0 as f64,
        live_x: !behind && gx == gx_raw && x1 > x0,
        live_y: !behind && gy == gy_raw && y1 > y0,
        cam,
    }
}

/// Bilinearly sample one feature level at projected point positions.
/// Fused tape primitive: gradients flow to both the points (through the
/// projection) and the feature map.
fn sample_level(points: &Var, map: &FeatureMap, camera: &Camera) -> Result<Var> {
    let pts = points.to_tensor();
    if pts.shape().len() != 2 || pts.shape()[1] != 3 {
        return Err(Error::Autodiff(format!(
            "sample2d wants (p,3) points, got {:?}",
            pts.shape()
        )));
    }
    let (mw, mh, c, stride) = (map.width, map.height, map.channels, map.stride);
    let p = pts.shape()[0];
    let feat = map.features.to_tensor();
    let mut out = vec![0.0; p * c];
    for (i, &pos) in pts.rows3().iter().enumerate() {
        let g = grid_point(pos, camera, stride, mw, mh);
        let w00 = (1.0 - g.fx) * (1.0 - g.fy);
        let w10 = g.fx * (1.0 - g.fy);
        let w01 = (1.0 - g.fx) * g.fy;
        let w11 = g.fx * g.fy;
        let rows = [
            (g.y0 * mw + g.x0, w00),
            (g.y0 * mw + g.x1, w10),
            (g.y1 * mw + g.x0, w01),
            (g.y1 * mw + g.x1, w11),
        ];
        for (row, wgt) in rows {
            for ch in 0..c {
                out[i * c + ch] += wgt * feat.data()[row * c + ch];
            }
        }
    }
    let cam = camera.clone();
    let tape = points.tape().clone();
    Ok(tape.record(
        Tensor::raw(vec![p, c], out),
        &[points, &map.features],
        Box::new(move |ctx: &BackwardCtx| {
            let pts = ctx.inputs[0];
            let feat = ctx.inputs[1];
            let mut g_pts = Tensor::zeros(pts.shape().to_vec());
            let mut g_feat = Tensor::zeros(feat.shape().to_vec());
            for (i, &pos) in pts.rows3().iter().enumerate() {
                let g = grid_point(pos, &cam, stride, mw, mh);
                let grad_row = &ctx.grad.data()[i * c..(i + 1) * c];
                let w00 = (1.0 - g.fx) * (1.0 - g.fy);
                let w10 = g.fx * (1.0 - g.fy);
                let w01 = (1.0 - g.fx) * g.fy;
                let w11 = g.fx * g.fy;
                let corners = [
                    (g.y0 * mw + g.x0, w00, -(1.0 - g.fy), -(1.0 - g.fx)),
                    (g.y0 * mw + g.x1, w10, 1.0 - g.fy, -g.fx),
                    (g.y1 * mw + g.x0, w01, -g.fy, 1.0 - g.fx),
                    (g.y1 * mw + g.x1, w11, g.fy, g.fx),
                ];
                // d(output)/d(gx), d(output)/d(gy) dotted with the
                // upstream gradient.
                let mut d_gx = 0.0;
                let mut d_gy = 0.0;
                for (row, wgt, dwx, dwy) in corners {
                    let fslice = &feat.data()[row * c..(row + 1) * c];
                    for ch in 0..c {
                        g_feat.data_mut()[row * c + ch] += wgt * grad_row[ch];
                        let gf = grad_row[ch] * fslice[ch];
                        d_gx += dwx * gf;
                        d_gy += dwy * gf;
                    }
                }
                if !g.live_x {
                    d_gx = 0.0;
                }
                if !g.live_y {
                    d_gy = 0.0;
                }
                // Chain: grid -> pixel -> camera point -> world point.
                let du = d_gx / stride as f64;
                let dv = d_gy / stride as f64;
                let [cx_, cy_, cz_] = g.cam;
                let d_cam = [
                    du * cam.fx / cz_,
                    dv * cam.fy / cz_,
                    -(du * cam.fx * cx_ + dv * cam.fy * cy_) / (cz_ * cz_),
                ];
                for k in 0..3 {
                    g_pts.data_mut()[i * 3 + k] += cam.rot[0][k] * d_cam[0]
                        + cam.rot[1][k] * d_cam[1]
                        + cam.rot[2][k] * d_cam[2];
                }
            }
            vec![g_pts, g_feat]
        }),
    ))
}

/// Sample all three 2D feature levels at the projected point positions
/// and concatenate: output (p, sum of level channels).
pub fn sample2d(points: &Var, maps: &FeatureMaps, camera: &Camera) -> Result<Var> {
    let per_level: Vec<Var> = maps
        .levels
        .iter()
        .map(|m| sample_level(points, m, camera))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = per_level.iter().collect();
    concat(&refs, 1)
}

/// Nearest-centroid index per query point for one grouping level; ties
/// break to the lowest group index.
pub fn nearest_centroids(points: &[[f64; 3]], level: &FeatureLevel) -> Vec<usize> {
    points
        .iter()
        .map(|&p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &c) in level.centroids.iter().enumerate() {
                let d = sub3(p, c);
                let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                if d2 < best_d {
                    best_d = d2;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Nearest-centroid feature lookup per level, concatenated. Gradients
/// flow into the selected group features only; the selection itself is
/// not differentiated.
pub fn sample3d(points: &[[f64; 3]], groups: &FeatureGroups) -> Result<Var> {
    if groups.levels.is_empty() {
        return Err(Error::Geometry("sample3d on empty feature groups".into()));
    }
    let per_level: Vec<Var> = groups
        .levels
        .iter()
        .map(|level| {
            let sel = nearest_centroids(points, level);
            gather_rows(&level.features, &sel)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = per_level.iter().collect();
    concat(&refs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::canonical_camera;
    use crate::tensor::ops::{mul, reduce_sum};
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_params(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_enc2d(&mut store, &mut rng, EncoderMode::Desk);
        init_enc3d(&mut store, &mut rng, EncoderMode::Desk);
        store
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn desk_maps_have_spec_shapes_on_64() {
        let store = desk_params(0);
        let tape = Tape::new();
        let maps =
            encode_image(&tape, &store, &Mask::zeros(64, 64), EncoderMode::Desk).unwrap();
        let got: Vec<(usize, usize, usize, usize)> = maps
            .levels
            .iter()
            .map(|m| (m.channels, m.height, m.width, m.stride))
            .collect();
        assert_eq!(got, vec![(32, 8, 8, 8), (64, 4, 4, 16), (128, 2, 2, 32)]);
    }

    #[test]
    fn parity_maps_match_paper_shapes_on_224() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_enc2d(&mut store, &mut rng, EncoderMode::Parity);
        let tape = Tape::new();
        let maps =
            encode_image(&tape, &store, &Mask::zeros(224, 224), EncoderMode::Parity).unwrap();
        let got: Vec<(usize, usize, usize)> = maps
            .levels
            .iter()
            .map(|m| (m.channels, m.height, m.width))
            .collect();
        assert_eq!(got, vec![(128, 28, 28), (256, 14, 14), (512, 7, 7)]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let store = desk_params(3);
        let tape = Tape::new();
        let maps =
            encode_image(&tape, &store, &Mask::zeros(64, 64), EncoderMode::Desk).unwrap();
        for m in &maps.levels {
            assert!(m.features.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let store = desk_params(0);
        let tape = Tape::new();
        assert!(encode_image(&tape, &store, &Mask::zeros(60, 64), EncoderMode::Desk).is_err());
    }

    #[test]
    fn group_counts_follow_mode() {
        let store = desk_params(1);
        let tape = Tape::new();
        let groups =
            encode_points(&tape, &store, &random_cloud(200, 7), EncoderMode::Desk).unwrap();
        let counts: Vec<usize> = groups.levels.iter().map(|l| l.centroids.len()).collect();
        assert_eq!(counts, vec![64, 16, 1]);
        for (l, want_c) in groups.levels.iter().zip([32usize, 64, 128]) {
            assert_eq!(l.features.shape(), vec![l.centroids.len(), want_c]);
        }
    }

    #[test]
    fn parity_group_counts_match_paper() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_enc3d(&mut store, &mut rng, EncoderMode::Parity);
        let tape = Tape::new();
        let groups =
            encode_points(&tape, &store, &random_cloud(600, 9), EncoderMode::Parity).unwrap();
        let counts: Vec<usize> = groups.levels.iter().map(|l| l.centroids.len()).collect();
        assert_eq!(counts, vec![512, 128, 1]);
    }

    #[test]
    fn features_invariant_under_global_translation() {
        let store = desk_params(4);
        // Quantize coordinates to 2^-10 and translate by 8.0 so the shifted
        // points and all pairwise differences are exactly representable;
        // otherwise rounding in the shift can flip grouping decisions.
        let raw = random_cloud(100, 11);
        let quant = |v: f64| (v * 1024.0).round() / 1024.0;
        let cloud = PointCloud::new(
            raw.points
                .iter()
                .map(|&p| [quant(p[0]), quant(p[1]), quant(p[2])])
                .collect(),
        );
        let moved = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|&p| [p[0] + 8.0, p[1], p[2]])
                .collect(),
        );
        let tape_a = Tape::new();
        let a = encode_points(&tape_a, &store, &cloud, EncoderMode::Desk).unwrap();
        let tape_b = Tape::new();
        let b = encode_points(&tape_b, &store, &moved, EncoderMode::Desk).unwrap();
        for (la, lb) in a.levels.iter().zip(b.levels.iter()) {
            let da = la.features.value();
            let db = lb.features.value();
            for (x, y) in da.data().iter().zip(db.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_point_cloud_degenerates_gracefully() {
        let store = desk_params(5);
        let tape = Tape::new();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3]]);
        let groups = encode_points(&tape, &store, &cloud, EncoderMode::Desk).unwrap();
        for l in &groups.levels {
            assert_eq!(l.centroids, vec![[0.1, 0.2, 0.3]]);
        }
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let store = desk_params(0);
        let tape = Tape::new();
        assert!(
            encode_points(&tape, &store, &PointCloud::new(vec![]), EncoderMode::Desk).is_err()
        );
    }

    #[test]
    fn fps_covers_better_than_prefix() {
        // FPS on points spread along a line picks both extremes early.
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [i as f64 / 100.0, 0.0, 0.0]).collect();
        let picks = farthest_point_sample(&pts, 3);
        assert_eq!(picks[0], 0); // seeded at the first point
        assert_eq!(picks[1], 99); // farthest from it
    }

    /// A single constant-free map for sampler tests: 4x4, 2 channels,
    /// stride 8 (as if from a 32x32 image).
    fn toy_map(tape: &Tape, data: Vec<f64>) -> FeatureMaps {
        let features = tape.input(Tensor::new(vec![16, 2], data).unwrap());
        FeatureMaps {
            levels: vec![FeatureMap {
                features,
                channels: 2,
                height: 4,
                width: 4,
                stride: 8,
            }],
        }
    }

    #[test]
    fn constant_map_samples_to_constant() {
        let tape = Tape::new();
        let maps = toy_map(&tape, vec![3.5; 32]);
        let cam = canonical_camera(30.0, 32, 32);
        let pts = tape.input(Tensor::from_rows3(&[
            [0.0, 0.0, 0.0],
            [0.0, 0.3, 0.2],
            [0.0, -0.4, -0.1],
        ]));
        let out = sample2d(&pts, &maps, &cam).unwrap();
        assert!(out.value().data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn cell_center_hit_returns_that_cell() {
        // Identity-rotation camera 32x32, f=32, looking down +z from z=-2
        // ... simpler: place a point whose projection lands exactly on
        // grid cell (1,2): pixel u = (1 + 0.5) * 8 = 12, v = (2+0.5)*8=20.
        let cam = Camera::new(
            32.0,
            32.0,
            16.0,
            16.0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 2.0],
            32,
            32,
        )
        .unwrap();
        // u = 32*x/2 + 16 = 12 -> x = -0.25; v = 20 -> y = 0.25.
        let tape = Tape::new();
        let mut data = vec![0.0; 32];
        let cell = 2 * 4 + 1; // (x=1, y=2)
        data[cell * 2] = 7.0;
        data[cell * 2 + 1] = -1.0;
        let maps = toy_map(&tape, data);
        let pts = tape.input(Tensor::from_rows3(&[[-0.25, 0.25, 0.0]]));
        let out = sample2d(&pts, &maps, &cam).unwrap();
        assert!((out.value().data()[0] - 7.0).abs() < 1e-12);
        assert!((out.value().data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_cell_center_returns_mean() {
        let cam = Camera::new(
            32.0,
            32.0,
            16.0,
            16.0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 2.0],
            32,
            32,
        )
        .unwrap();
        // Grid coords (1.5, 1.5): u = 2.0*8 = 16 -> x = 0, v = 16 -> y = 0.
        let tape = Tape::new();
        let mut data = vec![0.0; 32];
        for (i, cell) in [(1, 1), (1, 2), (2, 1), (2, 2)].iter().enumerate() {
            data[(cell.1 * 4 + cell.0) * 2] = i as f64 + 1.0; // 1..4
        }
        let maps = toy_map(&tape, data);
        let pts = tape.input(Tensor::from_rows3(&[[0.0, 0.0, 0.0]]));
        let out = sample2d(&pts, &maps, &cam).unwrap();
        assert!((out.value().data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sample2d_position_gradient_matches_fd() {
        let cam = canonical_camera(30.0, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let map_data: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pts: Vec<[f64; 3]> = (0..4)
                .map(|_| {
                    [
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ]
                })
                .collect();
            let md = map_data.clone();
            let report = finite_diff_check(
                |tape, x| {
                    let maps = FeatureMaps {
                        levels: vec![FeatureMap {
                            features: tape.constant(Tensor::new(vec![16, 2], md.clone())?),
                            channels: 2,
                            height: 4,
                            width: 4,
                            stride: 8,
                        }],
                    };
                    let s = sample2d(x, &maps, &cam)?;
                    let w = tape.constant(Tensor::full(vec![4, 2], 0.7));
                    reduce_sum(&mul(&s, &w)?)
                },
                &Tensor::from_rows3(&pts),
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn sample2d_map_gradient_matches_fd() {
        let cam = canonical_camera(30.0, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let map_point = Tensor::new(
            vec![16, 2],
            (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = finite_diff_check(
            |tape, m| {
                let maps = FeatureMaps {
                    levels: vec![FeatureMap {
                        features: m.clone(),
                        channels: 2,
                        height: 4,
                        width: 4,
                        stride: 8,
                    }],
                };
                let pts = tape.constant(Tensor::from_rows3(&[
                    [0.03, 0.11, -0.2],
                    [-0.1, -0.27, 0.31],
                ]));
                let s = sample2d(&pts, &maps, &cam)?;
                let w = tape.constant(Tensor::full(vec![2, 2], 1.3));
                reduce_sum(&mul(&s, &w)?)
            },
            &map_point,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sample2d_is_continuous_in_position() {
        let cam = canonical_camera(30.0, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map_data: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |pos: [f64; 3]| -> Vec<f64> {
            let tape = Tape::new();
            let maps = toy_map(&tape, map_data.clone());
            let pts = tape.constant(Tensor::from_rows3(&[pos]));
            sample2d(&pts, &maps, &cam).unwrap().value().data().to_vec()
        };
        for eps in [1e-3, 1e-4, 1e-5] {
            let a = eval([0.05, 0.1, -0.07]);
            let b = eval([0.05 + eps, 0.1 + eps, -0.07]);
            let diff: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 100.0 * eps, "eps {eps}: jump {diff}");
        }
    }

    #[test]
    fn sample2d_clamps_behind_camera_points_with_dead_gradient() {
        // A point behind the image plane is clamped rather than rejected:
        // the output stays finite and the position gradient is zero.
        let cam = canonical_camera(30.0, 32, 32);
        let tape = Tape::new();
        let maps = toy_map(&tape, (0..32).map(f64::from).collect());
        let pts = tape.input(Tensor::from_rows3(&[[10.0, 0.0, 0.0]]));
        let out = sample2d(&pts, &maps, &cam).unwrap();
        assert!(out.value().data().iter().all(|v| v.is_finite()));
        let loss = reduce_sum(&out).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = pts.grad(&grads).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0), "live gradient {g:?}");
    }

    #[test]
    fn sample3d_at_centroid_returns_its_feature() {
        let store = desk_params(6);
        let tape = Tape::new();
        let cloud = random_cloud(80, 13);
        let groups = encode_points(&tape, &store, &cloud, EncoderMode::Desk).unwrap();
        let c0 = groups.levels[0].centroids[5];
        let out = sample3d(&[c0], &groups).unwrap();
        let v = out.value();
        let f = groups.levels[0].features.value();
        for ch in 0..32 {
            assert_eq!(v.data()[ch].to_bits(), f.at2(5, ch).to_bits());
        }
    }

    #[test]
    fn sample3d_matches_brute_force_on_1000_queries() {
        let store = desk_params(8);
        let tape = Tape::new();
        let groups =
            encode_points(&tape, &store, &random_cloud(150, 17), EncoderMode::Desk).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let queries: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                ]
            })
            .collect();
        for level in &groups.levels {
            let got = nearest_centroids(&queries, level);
            // Independent oracle: plain loop, explicit distance compare.
            for (q, &sel) in queries.iter().zip(got.iter()) {
                let mut best = 0;
                for j in 1..level.centroids.len() {
                    let dj = sub3(*q, level.centroids[j]);
                    let db = sub3(*q, level.centroids[best]);
                    let d2j = dj[0] * dj[0] + dj[1] * dj[1] + dj[2] * dj[2];
                    let d2b = db[0] * db[0] + db[1] * db[1] + db[2] * db[2];
                    if d2j < d2b {
                        best = j;
                    }
                }
                assert_eq!(sel, best);
            }
        }
    }

    #[test]
    fn sample3d_single_group_level_is_constant() {
        let store = desk_params(9);
        let tape = Tape::new();
        let groups =
            encode_points(&tape, &store, &random_cloud(50, 19), EncoderMode::Desk).unwrap();
        let coarse = FeatureGroups {
            levels: vec![FeatureLevel {
                centroids: groups.levels[2].centroids.clone(),
                features: groups.levels[2].features.clone(),
                radius: f64::INFINITY,
            }],
        };
        let out = sample3d(&[[0.0; 3], [5.0, -2.0, 1.0]], &coarse).unwrap();
        let v = out.value();
        for ch in 0..128 {
            assert_eq!(v.at2(0, ch).to_bits(), v.at2(1, ch).to_bits());
        }
    }

    #[test]
    fn encoder_parameters_receive_gradients() {
        let store = desk_params(10);
        let tape = Tape::new();
        let cloud = random_cloud(60, 23);
        let groups = encode_points(&tape, &store, &cloud, EncoderMode::Desk).unwrap();
        let out = sample3d(&[[0.1, 0.0, 0.0]], &groups).unwrap();
        let loss = reduce_sum(&crate::tensor::ops::square(&out)).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let by_name = tape.param_grads(&grads);
        for l in 0..3 {
            let g = &by_name[&format!("enc3d.l{l}.w1")];
            assert!(g.data().iter().any(|&v| v != 0.0), "level {l} w1 grad zero");
        }
    }
}
