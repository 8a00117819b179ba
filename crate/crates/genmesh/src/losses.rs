//! Training losses: Chamfer, normal, edge, move, multi-view soft
//! silhouette IoU, and their weighted combination.
//!
//! Chamfer is a fused tape primitive (the O(pq) nearest-neighbor scan
//! never materializes the distance matrix); everything else composes
//! existing primitives.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::raster::{rasterize_soft, Mask};
use crate::tensor::ops::{add, div, gather_rows, reduce_mean, reduce_sum, scale, shift, sub, mul, square};
use crate::tensor::{BackwardCtx, Tensor, Var};
use std::collections::BTreeMap;

/// Loss-term weights of Eq. 9 plus the IoU activation schedule.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_normal: f64,
    pub lambda_iou: f64,
    pub lambda_edge: f64,
    pub lambda_move: f64,
    /// Fraction of training after which the IoU term switches on.
    pub iou_activation_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_normal: 1e-3,
            lambda_iou: 5.0,
            lambda_edge: 3e-2,
            lambda_move: 1e-3,
            iou_activation_fraction: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_normal", self.lambda_normal),
            ("lambda_iou", self.lambda_iou),
            ("lambda_edge", self.lambda_edge),
            ("lambda_move", self.lambda_move),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.iou_activation_fraction) {
            return Err(Error::Config(format!(
                "iou_activation_fraction must lie in [0,1], got {}",
                self.iou_activation_fraction
            )));
        }
        Ok(())
    }
}

fn check_points(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != 3 || t.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 3],
        });
    }
    Ok(())
}

fn nearest(rows: &[[f64; 3]], q: [f64; 3]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &r) in rows.iter().enumerate() {
        let d = (r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2) + (r[2] - q[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// Nearest-neighbor index of each row of `from` within `to`.
pub fn nearest_indices(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<usize> {
    from.iter().map(|&p| nearest(to, p).0).collect()
}

/// Symmetric Chamfer distance, sum convention:
/// `sum_p min_q ||p-q||^2 + sum_q min_p ||q-p||^2`.
/// Fused primitive; gradients flow through the argmin matches into both
/// point sets.
pub fn chamfer(p: &Var, q: &Var) -> Result<Var> {
    let pv = p.to_tensor();
    let qv = q.to_tensor();
    check_points("chamfer", &pv)?;
    check_points("chamfer", &qv)?;
    if !p.same_tape(q) {
        return Err(Error::Autodiff("chamfer inputs on different tapes".into()));
    }
    let prows = pv.rows3();
    let qrows = qv.rows3();
    let mut fwd = 0.0;
    for &pp in &prows {
        fwd += nearest(&qrows, pp).1;
    }
    let mut bwd = 0.0;
    for &qq in &qrows {
        bwd += nearest(&prows, qq).1;
    }
    let total = fwd + bwd;
    Ok(p.tape().record(
        Tensor::scalar(total),
        &[p, q],
        Box::new(move |ctx: &BackwardCtx| {
            let prows = ctx.inputs[0].rows3();
            let qrows = ctx.inputs[1].rows3();
            let g = ctx.grad.item();
            let mut gp = Tensor::zeros(vec![prows.len(), 3]);
            let mut gq = Tensor::zeros(vec![qrows.len(), 3]);
            for (i, &pp) in prows.iter().enumerate() {
                let (j, _) = nearest(&qrows, pp);
                for k in 0..3 {
                    let d = 2.0 * (pp[k] - qrows[j][k]) * g;
                    gp.data_mut()[i * 3 + k] += d;
                    gq.data_mut()[j * 3 + k] -= d;
                }
            }
            for (j, &qq) in qrows.iter().enumerate() {
                let (i, _) = nearest(&prows, qq);
                for k in 0..3 {
                    let d = 2.0 * (qq[k] - prows[i][k]) * g;
                    gq.data_mut()[j * 3 + k] += d;
                    gp.data_mut()[i * 3 + k] -= d;
                }
            }
            vec![gp, gq]
        }),
    ))
}

/// Normal loss with positional correspondence:
/// `sum_p ||n_p - n_{q*(p)}||^2 + sum_q ||n_q - n_{p*(q)}||^2` where the
/// starred indices are the Chamfer (nearest-position) matches. Gradients
/// flow into both normal sets; the correspondence itself is fixed.
pub fn normal_loss(p_pos: &Var, p_nrm: &Var, q_pos: &Var, q_nrm: &Var) -> Result<Var> {
    let pp = p_pos.to_tensor();
    let qp = q_pos.to_tensor();
    check_points("normal_loss", &pp)?;
    check_points("normal_loss", &qp)?;
    if p_nrm.shape() != pp.shape().to_vec() || q_nrm.shape() != qp.shape().to_vec() {
        return Err(Error::ShapeMismatch {
            op: "normal_loss",
            lhs: p_nrm.shape(),
            rhs: pp.shape().to_vec(),
        });
    }
    let prows = pp.rows3();
    let qrows = qp.rows3();
    let pq = nearest_indices(&prows, &qrows);
    let qp_idx = nearest_indices(&qrows, &prows);
    let t1 = reduce_sum(&square(&sub(p_nrm, &gather_rows(q_nrm, &pq)?)?))?;
    let t2 = reduce_sum(&square(&sub(q_nrm, &gather_rows(p_nrm, &qp_idx)?)?))?;
    add(&t1, &t2)
}

/// Edge-length regularizer: `sum_e ||e1 - e2||^2`.
pub fn edge_loss(verts: &Var, edges: &[[usize; 2]]) -> Result<Var> {
    if edges.is_empty() {
        return Ok(verts.tape().constant(Tensor::scalar(0.0)));
    }
    let a: Vec<usize> = edges.iter().map(|e| e[0]).collect();
    let b: Vec<usize> = edges.iter().map(|e| e[1]).collect();
    reduce_sum(&square(&sub(
        &gather_rows(verts, &a)?,
        &gather_rows(verts, &b)?,
    )?))
}

/// Vertex displacement regularizer: `sum_v ||after_v - before_v||^2`.
pub fn move_loss(before: &Var, after: &Var) -> Result<Var> {
    reduce_sum(&square(&sub(after, before)?))
}

// Large enough to keep the per-pixel ratio's gradient bounded (the soft
// rasterizer's tail truncations get amplified by up to 1/eps at empty
// pixels), small enough not to bias occupied pixels.
const IOU_EPS: f64 = 1e-4;

/// Multi-view soft silhouette IoU loss (Eq. 5): mean over views of the
/// per-pixel mean of `1 - p q / (p + q - p q)`, with p = q = 0 pixels
/// contributing 0. Differentiable w.r.t. the mesh vertices through the
/// soft rasterizer.
pub fn silhouette_iou_loss(
    verts: &Var,
    faces: &[[usize; 3]],
    masks: &[Mask],
    cameras: &[Camera],
    sigma: f64,
) -> Result<Var> {
    if masks.len() != cameras.len() || masks.is_empty() {
        return Err(Error::Camera(format!(
            "silhouette loss: {} masks vs {} cameras",
            masks.len(),
            cameras.len()
        )));
    }
    let tape = verts.tape().clone();
    let mut total: Option<Var> = None;
    for (mask, camera) in masks.iter().zip(cameras.iter()) {
        if mask.width != camera.width || mask.height != camera.height {
            return Err(Error::Camera(format!(
                "mask {}x{} does not match camera image {}x{}",
                mask.width, mask.height, camera.width, camera.height
            )));
        }
        let p = rasterize_soft(verts, faces, camera, sigma)?;
        let q = tape.constant(Tensor::raw(vec![mask.data.len()], mask.data.clone()));
        let inter = mul(&p, &q)?;
        let union = sub(&add(&p, &q)?, &inter)?;
        // (union - inter) / (union + eps): 0/0 -> 0 at empty pixels.
        let term = reduce_mean(&div(&sub(&union, &inter)?, &shift(&union, IOU_EPS))?)?;
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(scale(&total.unwrap(), 1.0 / masks.len() as f64))
}

/// Differentiable quantities of one mesh-generator stage that the total
/// loss consumes.
pub struct MeshStageTerms {
    /// Vertices the stage started from (post-subdivision of the previous
    /// stage, or the template).
    pub verts_before: Var,
    /// Refined vertices.
    pub verts: Var,
    pub edges: Vec<[usize; 2]>,
    /// Differentiable surface samples on the refined mesh.
    pub sample_pos: Var,
    /// Unit normals at those samples.
    pub sample_normals: Var,
}

/// Inputs of the gated silhouette term (final stage only).
pub struct IouTerm<'a> {
    pub verts: &'a Var,
    pub faces: &'a [[usize; 3]],
    pub masks: &'a [Mask],
    pub cameras: &'a [Camera],
    pub sigma: f64,
}

/// Eq. 8/9 combination. Returns the scalar loss plus the raw
/// (unweighted) per-term breakdown; terms with zero weight are skipped
/// entirely. The IoU term participates only once `epoch_fraction`
/// reaches the activation fraction.
pub fn total_loss(
    point_pred: &Var,
    gt_points: &Var,
    gt_normals: &Var,
    stages: &[MeshStageTerms],
    iou: Option<IouTerm<'_>>,
    weights: &LossWeights,
    epoch_fraction: f64,
) -> Result<(Var, BTreeMap<String, f64>)> {
    weights.validate()?;
    let mut breakdown = BTreeMap::new();
    let mut total = chamfer(point_pred, gt_points)?;
    breakdown.insert("chamfer_points".to_string(), total.value().item());

    for (i, stage) in stages.iter().enumerate() {
        let m = i + 1;
        let cd = chamfer(&stage.sample_pos, gt_points)?;
        breakdown.insert(format!("chamfer_m{m}"), cd.value().item());
        total = add(&total, &cd)?;
        if weights.lambda_normal > 0.0 {
            let nl = normal_loss(&stage.sample_pos, &stage.sample_normals, gt_points, gt_normals)?;
            breakdown.insert(format!("normal_m{m}"), nl.value().item());
            total = add(&total, &scale(&nl, weights.lambda_normal))?;
        }
        if weights.lambda_edge > 0.0 {
            let el = edge_loss(&stage.verts, &stage.edges)?;
            breakdown.insert(format!("edge_m{m}"), el.value().item());
            total = add(&total, &scale(&el, weights.lambda_edge))?;
        }
        if weights.lambda_move > 0.0 {
            let ml = move_loss(&stage.verts_before, &stage.verts)?;
            breakdown.insert(format!("move_m{m}"), ml.value().item());
            total = add(&total, &scale(&ml, weights.lambda_move))?;
        }
    }

    if weights.lambda_iou > 0.0 && epoch_fraction >= weights.iou_activation_fraction {
        if let Some(iou) = iou {
            let il = silhouette_iou_loss(iou.verts, iou.faces, iou.masks, iou.cameras, iou.sigma)?;
            breakdown.insert("iou".to_string(), il.value().item());
            total = add(&total, &scale(&il, weights.lambda_iou))?;
        }
    }

    breakdown.insert("total".to_string(), total.value().item());
    Ok((total, breakdown))
}
