//! Evaluation metrics: CD, EMD, multi-view silhouette IoU, normal
//! consistency, F-score, and report assembly in the paper's table
//! conventions. Everything here is plain f64 — nothing is differentiated.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{dot, norm, normalize_mesh, sample_surface, sub3, Mesh};
use crate::raster::rasterize_hard;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Largest point count solved by the exact assignment EMD.
pub const EMD_EXACT_LIMIT: usize = 512;

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn min_d2(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)
}

fn nearest_idx(p: [f64; 3], set: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for j in 1..set.len() {
        if d2(p, set[j]) < d2(p, set[best]) {
            best = j;
        }
    }
    best
}

/// Mean-normalized symmetric Chamfer distance:
/// `(1/p) sum_p min_q ||p-q||^2 + (1/q) sum_q min_p ||q-p||^2`.
pub fn cd_metric(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Metrics("cd_metric on an empty point set".into()));
    }
    let a: f64 = p.iter().map(|&x| min_d2(x, q)).sum::<f64>() / p.len() as f64;
    let b: f64 = q.iter().map(|&x| min_d2(x, p)).sum::<f64>() / q.len() as f64;
    Ok(a + b)
}

/// Exact minimum-cost perfect matching on a square cost matrix via the
/// O(n^3) shortest-augmenting-path Hungarian method. Returns per-row
/// assigned columns.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials/links, column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn assignment_cost(p: &[[f64; 3]], q: &[[f64; 3]], assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| d2(p[i], q[j]).sqrt())
        .sum()
}

/// Greedy nearest-unused assignment followed by 2-swap refinement passes.
fn approximate_assignment(p: &[[f64; 3]], q: &[[f64; 3]]) -> Vec<usize> {
    let n = p.len();
    let mut assign = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, &u) in used.iter().enumerate() {
            if !u && d2(p[i], q[j]) < best_d {
                best_d = d2(p[i], q[j]);
                best = j;
            }
        }
        assign[i] = best;
        used[best] = true;
    }
    // 2-swap: exchange two assignments whenever it lowers the cost.
    for _pass in 0..8 {
        let mut improved = false;
        for i in 0..n {
            for k in (i + 1)..n {
                let (ji, jk) = (assign[i], assign[k]);
                let cur = d2(p[i], q[ji]).sqrt() + d2(p[k], q[jk]).sqrt();
                let swapped = d2(p[i], q[jk]).sqrt() + d2(p[k], q[ji]).sqrt();
                if swapped + 1e-15 < cur {
                    assign.swap(i, k);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    assign
}

/// Earth Mover Distance: `(1/n) min_pi sum ||p_i - q_pi(i)||`. Exact
/// (optimal assignment) for n <= 512; otherwise a greedy-plus-2-swap
/// approximation, signalled by the returned flag.
pub fn emd_metric(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<(f64, bool)> {
    if p.len() != q.len() {
        return Err(Error::Metrics(format!(
            "emd_metric needs equal counts, got {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Metrics("emd_metric on an empty point set".into()));
    }
    let n = p.len();
    let (assign, approximate) = if n <= EMD_EXACT_LIMIT {
        let cost: Vec<Vec<f64>> = p
            .iter()
            .map(|&a| q.iter().map(|&b| d2(a, b).sqrt()).collect())
            .collect();
        (hungarian(&cost), false)
    } else {
        (approximate_assignment(p, q), true)
    };
    Ok((assignment_cost(p, q, &assign) / n as f64, approximate))
}

/// F-score at threshold tau (unsquared Euclidean distance): harmonic mean
/// of precision (fraction of P with a Q-neighbor within tau) and recall.
pub fn fscore(p: &[[f64; 3]], q: &[[f64; 3]], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Metrics(format!("fscore needs tau > 0, got {tau}")));
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::Metrics("fscore on an empty point set".into()));
    }
    let t2 = tau * tau;
    let precision =
        p.iter().filter(|&&x| min_d2(x, q) <= t2).count() as f64 / p.len() as f64;
    let recall = q.iter().filter(|&&x| min_d2(x, p) <= t2).count() as f64 / q.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Normal consistency: symmetric mean over nearest-position
/// correspondences of `1 - |n_p . n_q|`. Lower is better; 0 means all
/// corresponding normals are parallel (up to sign).
pub fn normal_consistency(
    p_pos: &[[f64; 3]],
    p_nrm: &[[f64; 3]],
    q_pos: &[[f64; 3]],
    q_nrm: &[[f64; 3]],
) -> Result<f64> {
    if p_pos.len() != p_nrm.len() || q_pos.len() != q_nrm.len() {
        return Err(Error::Metrics(
            "normal_consistency: positions and normals must pair up".into(),
        ));
    }
    if p_pos.is_empty() || q_pos.is_empty() {
        return Err(Error::Metrics("normal_consistency on an empty set".into()));
    }
    for (label, normals) in [("P", p_nrm), ("Q", q_nrm)] {
        if let Some(i) = normals.iter().position(|&n| (norm(n) - 1.0).abs() > 1e-6) {
            return Err(Error::Metrics(format!(
                "normal_consistency: {label} normal {i} is not unit length"
            )));
        }
    }
    let forward: f64 = p_pos
        .iter()
        .enumerate()
        .map(|(i, &x)| 1.0 - dot(p_nrm[i], q_nrm[nearest_idx(x, q_pos)]).abs())
        .sum::<f64>()
        / p_pos.len() as f64;
    let backward: f64 = q_pos
        .iter()
        .enumerate()
        .map(|(j, &x)| 1.0 - dot(q_nrm[j], p_nrm[nearest_idx(x, p_pos)]).abs())
        .sum::<f64>()
        / q_pos.len() as f64;
    Ok(0.5 * (forward + backward))
}

/// Mean hard-silhouette IoU over the rig; a view where both masks are
/// empty counts as 1.
pub fn multiview_iou(pred: &Mesh, gt: &Mesh, rig: &[Camera]) -> Result<f64> {
    if rig.is_empty() {
        return Err(Error::Metrics("multiview_iou needs >= 1 camera".into()));
    }
    let mut total = 0.0;
    for camera in rig {
        let a = rasterize_hard(pred, camera)?;
        let b = rasterize_hard(gt, camera)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&x, &y) in a.data.iter().zip(b.data.iter()) {
            let (x, y) = (x > 0.5, y > 0.5);
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / rig.len() as f64)
}

/// Evaluation protocol knobs.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Surface sample count for CD / F-score / NC (paper: 2500).
    pub samples: usize,
    /// Reduced sample count for the exact EMD solver.
    pub emd_samples: usize,
    /// F-score threshold.
    pub tau: f64,
    pub seed: u64,
    /// Re-normalize both meshes before comparing. Only for predictions
    /// whose frame or scale is not the object frame (viewer-centered
    /// models); normalizing an object-frame prediction rescales it
    /// relative to the ground truth and injects spurious error.
    pub canonical: bool,
    /// Rig rendering parameters.
    pub rig_focal: f64,
    pub rig_resolution: usize,
    pub rig_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            samples: 2500,
            emd_samples: EMD_EXACT_LIMIT,
            tau: 1e-3,
            seed: 0,
            canonical: false,
            rig_focal: 70.0,
            rig_resolution: 64,
            rig_seed: 0,
        }
    }
}

/// One shape's raw metric values.
#[derive(Clone, Debug, Serialize)]
pub struct ShapeEval {
    pub index: usize,
    pub cd: f64,
    pub emd: f64,
    pub emd_approximate: bool,
    pub iou: f64,
    pub nc: f64,
    pub fscore: f64,
}

/// Full report: per-shape raw values plus aggregates, with the paper's
/// display scaling (cd x1e3, emd x1e2, iou x1e2, nc x1e1, fscore x1e2).
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub shapes: Vec<ShapeEval>,
    pub mean_cd: f64,
    pub mean_emd: f64,
    pub mean_iou: f64,
    pub mean_nc: f64,
    pub mean_fscore: f64,
    pub samples: usize,
    pub emd_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Scaled aggregate row in Table-1 conventions:
    /// (CD x1e3, EMD x1e2, IoU x1e2, NC x1e1, F x1e2).
    pub fn scaled(&self) -> [f64; 5] {
        [
            self.mean_cd * 1e3,
            self.mean_emd * 1e2,
            self.mean_iou * 1e2,
            self.mean_nc * 1e1,
            self.mean_fscore * 1e2,
        ]
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "shape", "CD x1e3", "EMD x1e2", "IoU x1e2", "NC x1e1", "F x1e2"
        ));
        for s in &self.shapes {
            out.push_str(&format!(
                "{:>6}  {:>10.4}  {:>10.4}{}  {:>9.4}  {:>10.4}  {:>10.4}\n",
                s.index,
                s.cd * 1e3,
                s.emd * 1e2,
                if s.emd_approximate { "~" } else { " " },
                s.iou * 1e2,
                s.nc * 1e1,
                s.fscore * 1e2,
            ));
        }
        let m = self.scaled();
        out.push_str(&format!(
            "{:>6}  {:>10.4}  {:>10.4}   {:>9.4}  {:>10.4}  {:>10.4}\n",
            "mean", m[0], m[1], m[2], m[3], m[4]
        ));
        out
    }

    /// Line-delimited JSON: one record per shape, then one aggregate.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for s in &self.shapes {
            let line = serde_json::to_string(s)
                .map_err(|e| Error::Metrics(format!("report serialization: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        let agg = serde_json::json!({
            "aggregate": true,
            "mean_cd": self.mean_cd,
            "mean_emd": self.mean_emd,
            "mean_iou": self.mean_iou,
            "mean_nc": self.mean_nc,
            "mean_fscore": self.mean_fscore,
            "samples": self.samples,
            "emd_samples": self.emd_samples,
            "seed": self.seed,
        });
        writeln!(f, "{agg}").map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Evaluate matched prediction/ground-truth mesh lists: sample surfaces
/// with a fixed seed, optionally canonical-normalize, compute all five
/// metrics per shape and aggregate the means.
pub fn evaluate(preds: &[Mesh], gts: &[Mesh], cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Metrics(format!(
            "evaluate: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let rig = crate::camera::view_ring(
        crate::camera::RIG_DISTANCE_RANGE,
        cfg.rig_seed,
        cfg.rig_focal,
        cfg.rig_resolution,
        cfg.rig_resolution,
    )?;
    let mut shapes = Vec::with_capacity(preds.len());
    for (i, (pred, gt)) in preds.iter().zip(gts.iter()).enumerate() {
        let (pred, gt) = if cfg.canonical {
            (normalize_mesh(pred)?, normalize_mesh(gt)?)
        } else {
            (pred.clone(), gt.clone())
        };
        let ps = sample_surface(&pred, cfg.samples, cfg.seed.wrapping_add(2 * i as u64))?;
        let qs = sample_surface(&gt, cfg.samples, cfg.seed.wrapping_add(2 * i as u64 + 1))?;
        let pn = ps.normals.as_ref().expect("sample_surface sets normals");
        let qn = qs.normals.as_ref().expect("sample_surface sets normals");
        let cd = cd_metric(&ps.points, &qs.points)?;
        let n_emd = cfg.emd_samples.min(cfg.samples);
        let (emd, emd_approximate) =
            emd_metric(&ps.points[..n_emd], &qs.points[..n_emd])?;
        let f = fscore(&ps.points, &qs.points, cfg.tau)?;
        let nc = normal_consistency(&ps.points, pn, &qs.points, qn)?;
        let iou = multiview_iou(&pred, &gt, &rig)?;
        shapes.push(ShapeEval {
            index: i,
            cd,
            emd,
            emd_approximate,
            iou,
            nc,
            fscore: f,
        });
    }
    let n = shapes.len().max(1) as f64;
    Ok(EvalReport {
        mean_cd: shapes.iter().map(|s| s.cd).sum::<f64>() / n,
        mean_emd: shapes.iter().map(|s| s.emd).sum::<f64>() / n,
        mean_iou: shapes.iter().map(|s| s.iou).sum::<f64>() / n,
        mean_nc: shapes.iter().map(|s| s.nc).sum::<f64>() / n,
        mean_fscore: shapes.iter().map(|s| s.fscore).sum::<f64>() / n,
        samples: cfg.samples,
        emd_samples: cfg.emd_samples,
        seed: cfg.seed,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::icosphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn cd_basics() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert_eq!(cd_metric(&a, &a).unwrap(), 0.0);
        assert_eq!(cd_metric(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn cd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = rand_points(15, &mut rng);
            let q = rand_points(11, &mut rng);
            let mut want = 0.0;
            for &a in &p {
                let mut m = f64::INFINITY;
                for &b in &q {
                    let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                    if d < m {
                        m = d;
                    }
                }
                want += m / p.len() as f64;
            }
            for &b in &q {
                let mut m = f64::INFINITY;
                for &a in &p {
                    let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                    if d < m {
                        m = d;
                    }
                }
                want += m / q.len() as f64;
            }
            assert!((cd_metric(&p, &q).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_of_permutation_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_points(30, &mut rng);
        let mut q = p.clone();
        q.reverse();
        let (v, approx) = emd_metric(&p, &q).unwrap();
        assert!(!approx);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn emd_avoids_crossing_assignment() {
        let p = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let q = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(emd_metric(&p, &q).unwrap().0.abs() < 1e-12);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for rest in permutations(n - 1) {
            for pos in 0..n {
                let mut p = rest.clone();
                p.insert(pos, n - 1);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn emd_matches_factorial_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let n = rng.gen_range(2..=8);
            let p = rand_points(n, &mut rng);
            let q = rand_points(n, &mut rng);
            let (got, approx) = emd_metric(&p, &q).unwrap();
            assert!(!approx);
            let mut best = f64::INFINITY;
            for perm in permutations(n) {
                let c: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        ((p[i][0] - q[j][0]).powi(2)
                            + (p[i][1] - q[j][1]).powi(2)
                            + (p[i][2] - q[j][2]).powi(2))
                        .sqrt()
                    })
                    .sum();
                best = best.min(c);
            }
            assert!(
                (got - best / n as f64).abs() <= 1e-12,
                "trial {trial}: got {got}, brute {}",
                best / n as f64
            );
        }
    }

    #[test]
    fn emd_is_symmetric_and_triangle_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = rand_points(12, &mut rng);
            let b = rand_points(12, &mut rng);
            let c = rand_points(12, &mut rng);
            let ab = emd_metric(&a, &b).unwrap().0;
            let ba = emd_metric(&b, &a).unwrap().0;
            assert!((ab - ba).abs() < 1e-9);
            let ac = emd_metric(&a, &c).unwrap().0;
            let cb = emd_metric(&c, &b).unwrap().0;
            assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn emd_above_limit_is_flagged_approximate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = rand_points(520, &mut rng);
        let mut q = p.clone();
        q.reverse();
        let (v, approx) = emd_metric(&p, &q).unwrap();
        assert!(approx);
        assert!(v >= 0.0);
    }

    #[test]
    fn emd_rejects_unequal_counts() {
        let p = vec![[0.0; 3]];
        let q = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(emd_metric(&p, &q).is_err());
    }

    #[test]
    fn fscore_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = rand_points(20, &mut rng);
        assert_eq!(fscore(&p, &p, 1e-3).unwrap(), 1.0);
        let far: Vec<[f64; 3]> = p.iter().map(|&x| [x[0] + 1.0, x[1], x[2]]).collect();
        assert_eq!(fscore(&p, &far, 1e-3).unwrap(), 0.0);
        // Exactly 2 tau away in one axis -> miss.
        let q = vec![[2e-3, 0.0, 0.0]];
        assert_eq!(fscore(&[[0.0; 3]], &q, 1e-3).unwrap(), 0.0);
        // Exactly tau away -> hit (<=).
        let q = vec![[1e-3, 0.0, 0.0]];
        assert_eq!(fscore(&[[0.0; 3]], &q, 1e-3).unwrap(), 1.0);
    }

    #[test]
    fn fscore_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = rand_points(50, &mut rng);
        let q = rand_points(50, &mut rng);
        let mut last = 0.0;
        for tau in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let f = fscore(&p, &q, tau).unwrap();
            assert!(f >= last - 1e-12);
            last = f;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn nc_basics() {
        let pos = vec![[0.0; 3]];
        let nz = vec![[0.0, 0.0, 1.0]];
        let nx = vec![[1.0, 0.0, 0.0]];
        let flipped = vec![[0.0, 0.0, -1.0]];
        assert_eq!(normal_consistency(&pos, &nz, &pos, &nz).unwrap(), 0.0);
        assert_eq!(normal_consistency(&pos, &nz, &pos, &nx).unwrap(), 1.0);
        assert_eq!(normal_consistency(&pos, &nz, &pos, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn nc_rejects_non_unit_normals() {
        let pos = vec![[0.0; 3]];
        let bad = vec![[0.0, 0.0, 2.0]];
        let ok = vec![[0.0, 0.0, 1.0]];
        assert!(normal_consistency(&pos, &bad, &pos, &ok).is_err());
    }

    #[test]
    fn multiview_iou_identity_is_one() {
        let mesh = icosphere(1).unwrap();
        let rig = crate::camera::view_ring((1.4, 1.4), 0, 32.0, 32, 32).unwrap();
        let v = multiview_iou(&mesh, &mesh, &rig).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(rig.len(), 24);
    }

    #[test]
    fn multiview_iou_empty_views_count_as_one() {
        // A mesh with no faces never covers a pixel: IoU vs itself = 1.
        let empty = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![]).unwrap();
        let rig = crate::camera::view_ring((1.4, 1.4), 0, 32.0, 16, 16).unwrap();
        assert_eq!(multiview_iou(&empty, &empty, &rig).unwrap(), 1.0);
    }

    #[test]
    fn multiview_iou_matches_hand_counted_fixture() {
        // Two axis-aligned quads (two triangles each) in the x=0 plane,
        // the second shifted so the masks half-overlap horizontally.
        let quad = |x0: f64, x1: f64| -> Mesh {
            Mesh::new(
                vec![
                    [0.0, x0, -0.5],
                    [0.0, x1, -0.5],
                    [0.0, x1, 0.5],
                    [0.0, x0, 0.5],
                ],
                vec![[0, 1, 2], [0, 2, 3]],
            )
            .unwrap()
        };
        let a = quad(-0.4, 0.0);
        let b = quad(-0.2, 0.2);
        let cam = Camera::from_angles(0.0, 0.0, 2.0, 8.0, 8, 8).unwrap();
        let got = multiview_iou(&a, &b, std::slice::from_ref(&cam)).unwrap();
        // Oracle: count pixels in both hard masks directly.
        let ma = rasterize_hard(&a, &cam).unwrap();
        let mb = rasterize_hard(&b, &cam).unwrap();
        let inter = ma
            .data
            .iter()
            .zip(mb.data.iter())
            .filter(|(&x, &y)| x > 0.5 && y > 0.5)
            .count();
        let union = ma
            .data
            .iter()
            .zip(mb.data.iter())
            .filter(|(&x, &y)| x > 0.5 || y > 0.5)
            .count();
        assert!(inter > 0 && union > inter, "fixture degenerate");
        assert_eq!(got, inter as f64 / union as f64);
    }

    #[test]
    fn metrics_invariant_under_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = rand_points(40, &mut rng);
        let q = rand_points(40, &mut rng);
        // Rotation about z by 30 degrees plus a translation.
        let (c, s) = (30.0_f64.to_radians().cos(), 30.0_f64.to_radians().sin());
        let xf = |v: [f64; 3]| [c * v[0] - s * v[1] + 0.3, s * v[0] + c * v[1] - 0.1, v[2] + 0.7];
        let p2: Vec<[f64; 3]> = p.iter().map(|&v| xf(v)).collect();
        let q2: Vec<[f64; 3]> = q.iter().map(|&v| xf(v)).collect();
        assert!((cd_metric(&p, &q).unwrap() - cd_metric(&p2, &q2).unwrap()).abs() < 1e-9);
        assert!(
            (emd_metric(&p, &q).unwrap().0 - emd_metric(&p2, &q2).unwrap().0).abs() < 1e-9
        );
        assert!(
            (fscore(&p, &q, 0.5).unwrap() - fscore(&p2, &q2, 0.5).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn evaluate_identity_lists_score_perfectly() {
        let meshes = vec![icosphere(1).unwrap(), icosphere(2).unwrap()];
        let mut cfg = EvalConfig::default();
        cfg.samples = 400;
        cfg.emd_samples = 64;
        cfg.rig_resolution = 16;
        cfg.rig_focal = 18.0;
        let report = evaluate(&meshes, &meshes, &cfg).unwrap();
        // Same mesh, different sample seeds: CD small but nonzero (the
        // sampling floor scales as area / count); IoU exact; NC small.
        let scaled = report.scaled();
        assert_eq!(scaled[2], 100.0);
        assert!(report.mean_cd < 2e-2, "cd {}", report.mean_cd);
        assert!(report.mean_nc < 0.2, "nc {}", report.mean_nc);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let meshes = vec![icosphere(1).unwrap()];
        let mut cfg = EvalConfig::default();
        cfg.samples = 100;
        cfg.emd_samples = 32;
        cfg.rig_resolution = 16;
        cfg.rig_focal = 18.0;
        let a = evaluate(&meshes, &meshes, &cfg).unwrap();
        let b = evaluate(&meshes, &meshes, &cfg).unwrap();
        assert_eq!(a.mean_cd.to_bits(), b.mean_cd.to_bits());
        assert_eq!(a.mean_emd.to_bits(), b.mean_emd.to_bits());
    }

    #[test]
    fn evaluate_rejects_mismatched_lists() {
        let meshes = vec![icosphere(1).unwrap()];
        assert!(evaluate(&meshes, &[], &EvalConfig::default()).is_err());
    }

    #[test]
    fn report_jsonl_and_table_render() {
        let meshes = vec![icosphere(1).unwrap()];
        let mut cfg = EvalConfig::default();
        cfg.samples = 60;
        cfg.emd_samples = 16;
        cfg.rig_resolution = 16;
        cfg.rig_focal = 18.0;
        let report = evaluate(&meshes, &meshes, &cfg).unwrap();
        let table = report.table();
        assert!(table.contains("CD x1e3"));
        assert!(table.lines().count() >= 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        report.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"aggregate\":true"));
    }
}
