//! The two-stage reconstruction model (Eqs. 1–2), its training loop, and
//! inference.
//!
//! Stage one deforms a sphere point template by per-point MLP offsets
//! conditioned on sampled 2D features; stage two deforms an icosphere
//! coarse-to-fine, each level conditioned on sampled 2D features and (in
//! two-stage mode) 3D features grouped from the intermediate cloud. All
//! offset-producing layers are zero-initialized, so an untrained model is
//! the identity on its templates.

use crate::camera::{canonical_camera, Camera};
use crate::data::Example;
use crate::encoders::{
    encode_image, encode_points_var, init_enc2d, init_enc3d, sample2d, sample3d, EncoderMode,
    FeatureGroups, FeatureMaps,
};
use crate::error::{Error, Result};
use crate::geometry::{icosphere, sample_surface_detail, sphere_template, subdivide, Mesh, PointCloud};
use crate::losses::{total_loss, IouTerm, LossWeights, MeshStageTerms};
use crate::raster::Mask;
use crate::tensor::ops::{
    add, concat, div, gather, gather_rows, matmul, mul, reshape, scale, shift, sqrt, square, sub,
    tanh,
};
use crate::tensor::{save_checkpoint, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Coordinate frame convention for the conditioning camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    /// Features are projected with the fixed canonical camera
    /// (azimuth = elevation = 0); no pose input at inference.
    Viewer,
    /// Features are projected with the true camera pose of the image.
    Object,
}

/// Model architecture switches (the §5.1 ablation axes plus scale).
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub center: CenterMode,
    /// Two-stage: point cloud generation feeds a 3D feature encoder whose
    /// groups condition the mesh stages. One-stage: mesh deformation only.
    pub two_stage: bool,
    /// Per-vertex projected 2D features; `false` pools each map globally.
    pub local2d: bool,
    /// Per-vertex nearest-group 3D features; `false` pools each level.
    pub local3d: bool,
    pub iou_loss: bool,
    /// Backpropagate mesh-stage losses through the intermediate cloud
    /// into stage one (end-to-end reading of the paper).
    pub attach_cloud: bool,
    /// Points in the sphere template of stage one.
    pub template_points: usize,
    /// Mesh refinement stages (vertex schedule 162/642/2562 for 3).
    pub mesh_levels: usize,
    /// Icosphere subdivision level of the mesh template (2 -> 162).
    pub template_level: u32,
    pub mode: EncoderMode,
    /// Hidden width of the shared offset MLPs.
    pub hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// CPU-trainable defaults.
    pub fn desk(seed: u64) -> ModelConfig {
        ModelConfig {
            center: CenterMode::Object,
            two_stage: true,
            local2d: true,
            local3d: true,
            iou_loss: true,
            attach_cloud: true,
            template_points: 1500,
            mesh_levels: 3,
            template_level: 2,
            mode: EncoderMode::Desk,
            hidden: 128,
            seed,
        }
    }

    /// Paper-parity channel counts and MLP width.
    pub fn parity(seed: u64) -> ModelConfig {
        ModelConfig {
            mode: EncoderMode::Parity,
            hidden: 512,
            ..ModelConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh_levels < 1 {
            return Err(Error::Config("mesh_levels must be >= 1".into()));
        }
        if self.template_points < 1 || self.hidden < 1 {
            return Err(Error::Config(
                "template_points and hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Camera actually used for 2D feature projection.
    pub fn resolve_camera(&self, camera: &Camera) -> Camera {
        match self.center {
            CenterMode::Object => camera.clone(),
            CenterMode::Viewer => canonical_camera(camera.fx, camera.width, camera.height),
        }
    }

    fn mesh_in_dim(&self) -> usize {
        3 + self.mode.feat2d_width() + if self.two_stage { self.mode.feat3d_width() } else { 0 }
    }
}

/// Training schedule knobs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay applied at each milestone.
    pub decay: f64,
    /// Epoch fractions at which the decay fires; strictly increasing in (0,1].
    pub milestones: Vec<f64>,
    pub weights: LossWeights,
    /// Silhouette views drawn per step for the IoU term.
    pub views_per_step: usize,
    /// Differentiable surface samples per mesh stage for the Chamfer and
    /// normal terms.
    pub mesh_samples: usize,
    /// Soft rasterizer sharpness.
    pub sigma: f64,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Single worker, wall-clock omitted from logs.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            lr: 3e-3,
            decay: 0.3,
            milestones: vec![0.7, 0.9, 0.97],
            weights: LossWeights::default(),
            views_per_step: 4,
            mesh_samples: 550,
            sigma: 1e-4,
            checkpoint_every: 0,
            deterministic: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.mesh_samples < 1 {
            return Err(Error::Config(
                "epochs, batch_size and mesh_samples must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.decay > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config("lr, decay and sigma must be positive".into()));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                )));
            }
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
            return Err(Error::Config(format!(
                "milestones must lie in (0, 1], got {:?}",
                self.milestones
            )));
        }
        self.weights.validate()
    }

    /// Learning rate in effect at the given epoch fraction.
    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        let fired = self.milestones.iter().filter(|&&m| epoch_fraction >= m).count();
        self.lr * self.decay.powi(fired as i32)
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::raw(shape, (0..n).map(|_| rng.gen_range(-s..s)).collect())
}

/// Offset-MLP layer dimensions: two hidden layers plus a linear output.
fn mlp_dims(in_dim: usize, hidden: usize) -> [(usize, usize); 3] {
    [(in_dim, hidden), (hidden, hidden), (hidden, 3)]
}

fn init_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, hidden: usize) {
    for (l, (fan_in, out)) in mlp_dims(in_dim, hidden).into_iter().enumerate() {
        let w = if l == 2 {
            // Zero-initialized output: the untrained model is the identity
            // on its templates.
            Tensor::zeros(vec![fan_in, out])
        } else {
            uniform_init(rng, vec![fan_in, out], fan_in)
        };
        store.insert(format!("{prefix}.l{l}.w"), w);
        store.insert(format!("{prefix}.l{l}.b"), Tensor::zeros(vec![1, out]));
    }
}

/// Fresh parameter store for the configuration, seeded from `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_enc2d(&mut store, &mut rng, cfg.mode);
    if cfg.two_stage {
        init_enc3d(&mut store, &mut rng, cfg.mode);
    }
    init_mlp(
        &mut store,
        &mut rng,
        "point_mlp",
        3 + cfg.mode.feat2d_width(),
        cfg.hidden,
    );
    for i in 0..cfg.mesh_levels {
        init_mlp(&mut store, &mut rng, &format!("mesh{i}"), cfg.mesh_in_dim(), cfg.hidden);
    }
    Ok(store)
}

/// Names and shapes every forward pass under this configuration reads.
pub fn required_params(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = 1;
    for (i, &cout) in cfg.mode.conv_channels().iter().enumerate() {
        out.push((format!("enc2d.conv{i}.weight"), vec![9 * cin, cout]));
        out.push((format!("enc2d.conv{i}.bias"), vec![1, cout]));
        cin = cout;
    }
    if cfg.two_stage {
        let mut prev = 0;
        for (l, &c) in cfg.mode.group_channels().iter().enumerate() {
            let cin = 3 + prev;
            out.push((format!("enc3d.l{l}.w1"), vec![cin, c]));
            out.push((format!("enc3d.l{l}.b1"), vec![1, c]));
            out.push((format!("enc3d.l{l}.w2"), vec![c, c]));
            out.push((format!("enc3d.l{l}.b2"), vec![1, c]));
            prev = c;
        }
    }
    let mlp = |prefix: &str, in_dim: usize, out: &mut Vec<(String, Vec<usize>)>| {
        for (l, (a, b)) in mlp_dims(in_dim, cfg.hidden).into_iter().enumerate() {
            out.push((format!("{prefix}.l{l}.w"), vec![a, b]));
            out.push((format!("{prefix}.l{l}.b"), vec![1, b]));
        }
    };
    mlp("point_mlp", 3 + cfg.mode.feat2d_width(), &mut out);
    for i in 0..cfg.mesh_levels {
        mlp(&format!("mesh{i}"), cfg.mesh_in_dim(), &mut out);
    }
    out
}

/// Reject a parameter store that does not carry this configuration's
/// parameters, naming every missing or mis-shaped entry.
pub fn check_params(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in required_params(cfg) {
        match store.get(&name) {
            None => problems.push(format!("{name} (missing)")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "{name} (shape {:?}, expected {:?})",
                t.shape(),
                shape
            )),
            Some(_) => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint incompatible with model config: {}",
            problems.join(", ")
        )))
    }
}

fn linear(tape: &Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let n = x.shape()[0];
    let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
    add(&matmul(x, w)?, &matmul(&ones, b)?)
}

/// Shared 3-layer offset MLP: tanh hidden layers, linear output.
fn offset_mlp(tape: &Tape, params: &ParamStore, prefix: &str, x: &Var) -> Result<Var> {
    let mut h = x.clone();
    for l in 0..3 {
        let w = tape.param(params, &format!("{prefix}.l{l}.w"))?;
        let b = tape.param(params, &format!("{prefix}.l{l}.b"))?;
        h = linear(tape, &h, &w, &b)?;
        if l < 2 {
            h = tanh(&h);
        }
    }
    Ok(h)
}

/// Mean over rows as a (1, c) matrix product.
fn mean_rows(tape: &Tape, x: &Var) -> Result<Var> {
    let n = x.shape()[0];
    let ones = tape.constant(Tensor::full(vec![1, n], 1.0 / n as f64));
    matmul(&ones, x)
}

/// 2D conditioning features for a point set: projected local samples, or
/// the globally pooled maps broadcast to every point.
fn features_2d(
    tape: &Tape,
    points: &Var,
    maps: &FeatureMaps,
    camera: &Camera,
    local: bool,
) -> Result<Var> {
    if local {
        return sample2d(points, maps, camera);
    }
    let pooled: Vec<Var> = maps
        .levels
        .iter()
        .map(|m| mean_rows(tape, &m.features))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = pooled.iter().collect();
    let row = concat(&refs, 1)?;
    gather_rows(&row, &vec![0; points.shape()[0]])
}

/// 3D conditioning features: nearest-group local samples, or the pooled
/// levels broadcast.
fn features_3d(
    tape: &Tape,
    query: &[[f64; 3]],
    groups: &FeatureGroups,
    local: bool,
) -> Result<Var> {
    if local {
        return sample3d(query, groups);
    }
    let pooled: Vec<Var> = groups
        .levels
        .iter()
        .map(|l| mean_rows(tape, &l.features))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = pooled.iter().collect();
    let row = concat(&refs, 1)?;
    gather_rows(&row, &vec![0; query.len()])
}

/// One mesh-generator stage, with topology fixed for the whole run.
pub struct StageOutput {
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub verts_before: Var,
    pub verts: Var,
}

/// Everything a loss or reconstruction needs from one forward pass.
pub struct ForwardOutput {
    pub point_pred: Var,
    pub stages: Vec<StageOutput>,
}

/// Full forward pass of the model (Eqs. 1–2), recorded on `tape`.
/// `camera` must already be resolved per the center mode.
pub fn forward(
    tape: &Tape,
    params: &ParamStore,
    image: &Mask,
    camera: &Camera,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    check_params(params, cfg)?;
    let maps = encode_image(tape, params, image, cfg.mode)?;

    // Stage one: p_hat = p + MLP([p | f]) on the sphere template.
    let template = sphere_template(cfg.template_points, cfg.seed)?;
    let pts = tape.constant(Tensor::from_rows3(&template.points));
    let f = features_2d(tape, &pts, &maps, camera, cfg.local2d)?;
    let offsets = offset_mlp(tape, params, "point_mlp", &concat(&[&pts, &f], 1)?)?;
    let point_pred = add(&pts, &offsets)?;

    // Intermediate cloud into the 3D encoder, attached or detached.
    let groups = if cfg.two_stage {
        let coords = if cfg.attach_cloud {
            point_pred.clone()
        } else {
            tape.constant(point_pred.to_tensor())
        };
        Some(encode_points_var(tape, params, &coords, cfg.mode)?)
    } else {
        None
    };

    // Stage two: coarse-to-fine icosphere refinement, v_hat = v + MLP([v|f|g]).
    let template_mesh = icosphere(cfg.template_level)?;
    let mut faces = template_mesh.faces.clone();
    let mut verts = tape.constant(Tensor::from_rows3(&template_mesh.vertices));
    let mut stages = Vec::with_capacity(cfg.mesh_levels);
    for i in 0..cfg.mesh_levels {
        let verts_before = verts.clone();
        let vals = verts_before.to_tensor().rows3();
        let f = features_2d(tape, &verts_before, &maps, camera, cfg.local2d)?;
        let input = match &groups {
            Some(g) => {
                let g3 = features_3d(tape, &vals, g, cfg.local3d)?;
                concat(&[&verts_before, &f, &g3], 1)?
            }
            None => concat(&[&verts_before, &f], 1)?,
        };
        let offsets = offset_mlp(tape, params, &format!("mesh{i}"), &input)?;
        verts = add(&verts_before, &offsets)?;
        let mesh = Mesh::new(verts.to_tensor().rows3(), faces.clone())?;
        stages.push(StageOutput {
            faces: faces.clone(),
            edges: mesh.edges().to_vec(),
            verts_before,
            verts: verts.clone(),
        });
        if i + 1 < cfg.mesh_levels {
            let (sub_mesh, map) = subdivide(&mesh)?;
            // Rebuild the subdivision differentiably: old rows pass
            // through, each midpoint is the mean of its edge endpoints,
            // appended in midpoint-index order.
            let mut mids: Vec<(usize, [usize; 2])> = map
                .edge_midpoint
                .iter()
                .map(|(&e, &m)| (m, e))
                .collect();
            mids.sort_unstable();
            let a: Vec<usize> = mids.iter().map(|(_, e)| e[0]).collect();
            let b: Vec<usize> = mids.iter().map(|(_, e)| e[1]).collect();
            let mid = scale(
                &add(&gather_rows(&verts, &a)?, &gather_rows(&verts, &b)?)?,
                0.5,
            );
            verts = concat(&[&verts, &mid], 0)?;
            faces = sub_mesh.faces.clone();
        }
    }
    Ok(ForwardOutput { point_pred, stages })
}

/// Differentiable surface samples at fixed (face, barycentric) picks:
/// positions as the barycentric combination of the gathered vertex rows,
/// unit normals from the face cross product.
pub fn differentiable_samples(
    verts: &Var,
    faces: &[[usize; 3]],
    picks: &[(usize, [f64; 3])],
) -> Result<(Var, Var)> {
    let tape = verts.tape().clone();
    let k = picks.len();
    if k == 0 {
        return Err(Error::Geometry("differentiable_samples with no picks".into()));
    }
    let (mut ia, mut ib, mut ic) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
    let (mut wa, mut wb, mut wc) = (Vec::with_capacity(3 * k), Vec::with_capacity(3 * k), Vec::with_capacity(3 * k));
    for &(fi, w) in picks {
        let [a, b, c] = faces[fi];
        ia.push(a);
        ib.push(b);
        ic.push(c);
        for _ in 0..3 {
            wa.push(w[0]);
            wb.push(w[1]);
            wc.push(w[2]);
        }
    }
    let ga = gather_rows(verts, &ia)?;
    let gb = gather_rows(verts, &ib)?;
    let gc = gather_rows(verts, &ic)?;
    let wa = tape.constant(Tensor::raw(vec![k, 3], wa));
    let wb = tape.constant(Tensor::raw(vec![k, 3], wb));
    let wc = tape.constant(Tensor::raw(vec![k, 3], wc));
    let pos = add(
        &add(&mul(&ga, &wa)?, &mul(&gb, &wb)?)?,
        &mul(&gc, &wc)?,
    )?;

    let column = |x: &Var, j: usize| -> Result<Var> {
        let idx: Vec<usize> = (0..k).map(|r| r * 3 + j).collect();
        reshape(&gather(x, &idx)?, vec![k, 1])
    };
    let e1 = sub(&gb, &ga)?;
    let e2 = sub(&gc, &ga)?;
    let (x1, y1, z1) = (column(&e1, 0)?, column(&e1, 1)?, column(&e1, 2)?);
    let (x2, y2, z2) = (column(&e2, 0)?, column(&e2, 1)?, column(&e2, 2)?);
    let nx = sub(&mul(&y1, &z2)?, &mul(&z1, &y2)?)?;
    let ny = sub(&mul(&z1, &x2)?, &mul(&x1, &z2)?)?;
    let nz = sub(&mul(&x1, &y2)?, &mul(&y1, &x2)?)?;
    let sq = add(&add(&square(&nx), &square(&ny))?, &square(&nz))?;
    // Epsilon keeps the sqrt gradient finite on (unsampleable) degenerate
    // faces without disturbing real ones.
    let len = sqrt(&shift(&sq, 1e-18));
    let normals = concat(&[&div(&nx, &len)?, &div(&ny, &len)?, &div(&nz, &len)?], 1)?;
    Ok((pos, normals))
}

/// Loss-ready view of one stage: deterministic area-weighted surface
/// samples re-expressed differentiably in the stage's vertices.
pub fn stage_terms(stage: &StageOutput, samples: usize, seed: u64) -> Result<MeshStageTerms> {
    let mesh = Mesh::new(stage.verts.to_tensor().rows3(), stage.faces.clone())?;
    let (_, _, picks) = sample_surface_detail(&mesh, samples, seed)?;
    let (sample_pos, sample_normals) = differentiable_samples(&stage.verts, &stage.faces, &picks)?;
    Ok(MeshStageTerms {
        verts_before: stage.verts_before.clone(),
        verts: stage.verts.clone(),
        edges: stage.edges.clone(),
        sample_pos,
        sample_normals,
    })
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15) ^ c.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

/// Forward + loss (+ optionally backward) for one example.
fn item_pass(
    params: &ParamStore,
    ex: &Example,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mesh_samples: usize,
    sigma: f64,
    views: &[usize],
    epoch_fraction: f64,
    sample_seed: u64,
    want_grads: bool,
) -> Result<(BTreeMap<String, f64>, Option<BTreeMap<String, Tensor>>)> {
    let tape = Tape::new();
    let camera = model_cfg.resolve_camera(&ex.camera);
    let fwd = forward(&tape, params, &ex.image, &camera, model_cfg)?;
    let gt_pts = tape.constant(Tensor::from_rows3(&ex.gt_samples.points));
    let gt_nrm = tape.constant(Tensor::from_rows3(
        ex.gt_samples
            .normals
            .as_ref()
            .ok_or_else(|| Error::Data("ground-truth samples lack normals".into()))?,
    ));
    let stages: Vec<MeshStageTerms> = fwd
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| stage_terms(s, mesh_samples, sample_seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let last = fwd.stages.last().expect("mesh_levels >= 1");
    let mut sel_masks = Vec::with_capacity(views.len());
    let mut sel_cams = Vec::with_capacity(views.len());
    for &v in views {
        sel_masks.push(ex.gt_silhouettes.masks[v].clone());
        sel_cams.push(ex.gt_silhouettes.cameras[v].clone());
    }
    let mut w = weights.clone();
    if !model_cfg.iou_loss {
        w.lambda_iou = 0.0;
    }
    let iou = (w.lambda_iou > 0.0 && !sel_masks.is_empty()).then_some(IouTerm {
        verts: &last.verts,
        faces: &last.faces,
        masks: &sel_masks,
        cameras: &sel_cams,
        sigma,
    });
    let (loss, breakdown) = total_loss(
        &fwd.point_pred,
        &gt_pts,
        &gt_nrm,
        &stages,
        iou,
        &w,
        epoch_fraction,
    )?;
    for (name, v) in &breakdown {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss term {name}"),
                index: 0,
            });
        }
    }
    let grads = if want_grads {
        let g = tape.backward(&loss)?;
        Some(tape.param_grads(&g))
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Mean per-term loss of a fixed batch under fixed views, without a
/// gradient pass. Used by the ablation grid and its exactness check.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    params: &ParamStore,
    examples: &[Example],
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    mesh_samples: usize,
    sigma: f64,
    views: &[usize],
    epoch_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut mean = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let (breakdown, _) = item_pass(
            params,
            ex,
            model_cfg,
            weights,
            mesh_samples,
            sigma,
            views,
            epoch_fraction,
            mix_seed(seed, i as u64, 0),
            false,
        )?;
        for (k, v) in breakdown {
            *mean.entry(k).or_insert(0.0) += v / examples.len() as f64;
        }
    }
    Ok(mean)
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Adam {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("optimizer step on unknown parameter {name:?}")))?
                .clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let mut new = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                new.push(p.data()[i] - lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps));
            }
            params.set(name, Tensor::new(p.shape().to_vec(), new)?)?;
        }
        Ok(())
    }
}

/// Summary handed back by [`train`].
pub struct TrainReport {
    pub steps: usize,
    pub final_losses: BTreeMap<String, f64>,
}

/// Train the model in place. Emits one JSON line per step
/// (`{epoch, step, lr, losses, wall_ms?}`) plus one per epoch with the
/// validation CD when `val_set` is non-empty; saves checkpoints under
/// `out_dir` when given. Fully deterministic for a fixed seed.
pub fn train(
    params: &mut ParamStore,
    train_set: &[Example],
    val_set: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_params(params, model_cfg)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let n_views = train_set[0].gt_silhouettes.views();
    let mut adam = Adam::new();
    let mut step_global = 0usize;
    let mut last_losses = BTreeMap::new();
    for epoch in 0..cfg.epochs {
        let frac = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.lr_at(frac);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0x01));
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let mut view_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step_global as u64, 0x02));
            let views: Vec<usize> =
                rand::seq::index::sample(&mut view_rng, n_views, cfg.views_per_step.min(n_views))
                    .into_vec();
            let pass = |&idx: &usize| {
                item_pass(
                    params,
                    &train_set[idx],
                    model_cfg,
                    &cfg.weights,
                    cfg.mesh_samples,
                    cfg.sigma,
                    &views,
                    frac,
                    mix_seed(cfg.seed, step_global as u64, idx as u64),
                    true,
                )
            };
            let results: Vec<(BTreeMap<String, f64>, Option<BTreeMap<String, Tensor>>)> =
                if cfg.deterministic {
                    batch.iter().map(pass).collect::<Result<_>>()?
                } else {
                    batch.par_iter().map(pass).collect::<Result<_>>()?
                };
            // Ordered reduction: mean losses, mean gradients.
            let scale = 1.0 / batch.len() as f64;
            let mut losses: BTreeMap<String, f64> = BTreeMap::new();
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (breakdown, g) in results {
                for (k, v) in breakdown {
                    *losses.entry(k).or_insert(0.0) += v * scale;
                }
                for (k, t) in g.expect("gradients requested") {
                    match grads.get_mut(&k) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b * scale;
                            }
                        }
                        None => {
                            let mut t = t;
                            for x in t.data_mut() {
                                *x *= scale;
                            }
                            grads.insert(k, t);
                        }
                    }
                }
            }
            adam.step(params, &grads, lr)?;
            let mut line = serde_json::json!({
                "epoch": epoch,
                "step": step_global,
                "lr": lr,
                "losses": losses,
            });
            if !cfg.deterministic {
                line["wall_ms"] = serde_json::json!(t0.elapsed().as_millis() as u64);
            }
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
            last_losses = serde_json::from_value(line["losses"].take())
                .expect("loss map round-trips");
            step_global += 1;
        }
        if !val_set.is_empty() {
            let mut cd_sum = 0.0;
            for (i, ex) in val_set.iter().enumerate() {
                let (mesh, _) = reconstruct(params, &ex.image, &ex.camera, model_cfg)?;
                let pred = crate::geometry::sample_surface(
                    &mesh,
                    ex.gt_samples.points.len(),
                    mix_seed(cfg.seed, 0x7a11, i as u64),
                )?;
                cd_sum += crate::metrics::cd_metric(&pred.points, &ex.gt_samples.points)?;
            }
            let line = serde_json::json!({
                "epoch": epoch,
                "val_cd": cd_sum / val_set.len() as f64,
            });
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        if let Some(dir) = out_dir {
            let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if due {
                save_checkpoint(params, &dir.join(format!("epoch{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(params, &dir.join("final.ckpt"))?;
    }
    Ok(TrainReport {
        steps: step_global,
        final_losses: last_losses,
    })
}

/// Deterministic inference: final mesh plus the intermediate point cloud.
pub fn reconstruct(
    params: &ParamStore,
    image: &Mask,
    camera: &Camera,
    cfg: &ModelConfig,
) -> Result<(Mesh, PointCloud)> {
    let tape = Tape::new();
    let cam = cfg.resolve_camera(camera);
    let fwd = forward(&tape, params, image, &cam, cfg)?;
    let last = fwd.stages.last().expect("mesh_levels >= 1");
    let mesh = Mesh::new(last.verts.to_tensor().rows3(), last.faces.clone())?;
    let cloud = PointCloud::new(fwd.point_pred.to_tensor().rows3());
    Ok((mesh, cloud))
}
