//! Single binary exposing dataset generation, training, reconstruction,
//! evaluation, rendering, the gradient-check suite, and the ablation grid.

use clap::{Args, Parser, Subcommand};
use genmesh::camera::{view_ring, Camera, RIG_DISTANCE_RANGE};
use genmesh::data::{build_dataset, load_example, load_manifest, DatasetConfig, Example, ManifestRecord};
use genmesh::encoders::{encode_image, init_enc2d, sample2d, EncoderMode};
use genmesh::error::{Error, Result};
use genmesh::geometry::{icosphere, read_obj, write_obj, Mesh, PointCloud};
use genmesh::losses::{chamfer, edge_loss, move_loss, normal_loss, silhouette_iou_loss};
use genmesh::metrics::{evaluate, EvalConfig};
use genmesh::pipeline::{
    check_params, init_model, reconstruct, train, CenterMode, ModelConfig, TrainConfig,
};
use genmesh::raster::{rasterize_hard, render_shaded, write_pgm_u8};
use genmesh::tensor::ops::{mul, reduce_sum};
use genmesh::tensor::{finite_diff_check, load_checkpoint, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "genmesh", version, about = "Desk-scale single-view 3D mesh reconstruction")]
struct Cli {
    /// Plain-text key=value config file with [section] headers; explicit
    /// flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker, wall-clock timings omitted from logs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Paper-parity channel counts instead of desk scale.
    #[arg(long)]
    parity: bool,
    /// Drop the point-cloud stage and its 3D features.
    #[arg(long)]
    one_stage: bool,
    /// Replace per-vertex 2D samples with pooled global map features.
    #[arg(long)]
    global_2d: bool,
    /// Replace per-vertex 3D samples with pooled global cloud features.
    #[arg(long)]
    global_3d: bool,
    /// Disable the silhouette IoU loss term.
    #[arg(long)]
    no_iou: bool,
    /// Detach the intermediate cloud from the 3D encoder (no stage-2 ->
    /// stage-1 gradients).
    #[arg(long)]
    detach_cloud: bool,
    /// Viewer-centered frame: project features with the canonical camera.
    #[arg(long)]
    viewer_centered: bool,
    #[arg(long)]
    template_points: Option<usize>,
    #[arg(long)]
    mesh_levels: Option<usize>,
    #[arg(long)]
    template_level: Option<u32>,
    #[arg(long)]
    hidden: Option<usize>,
}

impl ModelFlags {
    fn resolve(&self, file: &FileConfig, seed: u64) -> Result<ModelConfig> {
        let parity = self.parity || file.get("model.parity")?.unwrap_or(false);
        let mut cfg = if parity {
            ModelConfig::parity(seed)
        } else {
            ModelConfig::desk(seed)
        };
        if self.one_stage || file.get("model.one_stage")?.unwrap_or(false) {
            cfg.two_stage = false;
        }
        if self.global_2d || file.get("model.global_2d")?.unwrap_or(false) {
            cfg.local2d = false;
        }
        if self.global_3d || file.get("model.global_3d")?.unwrap_or(false) {
            cfg.local3d = false;
        }
        if self.no_iou || file.get("model.no_iou")?.unwrap_or(false) {
            cfg.iou_loss = false;
        }
        if self.detach_cloud || file.get("model.detach_cloud")?.unwrap_or(false) {
            cfg.attach_cloud = false;
        }
        if self.viewer_centered || file.get("model.viewer_centered")?.unwrap_or(false) {
            cfg.center = CenterMode::Viewer;
        }
        cfg.template_points = self
            .template_points
            .or(file.get("model.template_points")?)
            .unwrap_or(cfg.template_points);
        cfg.mesh_levels = self
            .mesh_levels
            .or(file.get("model.mesh_levels")?)
            .unwrap_or(cfg.mesh_levels);
        cfg.template_level = self
            .template_level
            .or(file.get("model.template_level")?)
            .unwrap_or(cfg.template_level);
        cfg.hidden = self.hidden.or(file.get("model.hidden")?).unwrap_or(cfg.hidden);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    views_per_step: Option<usize>,
    #[arg(long)]
    mesh_samples: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self, file: &FileConfig, seed: u64, deterministic: bool) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            seed,
            deterministic,
            ..TrainConfig::default()
        };
        cfg.epochs = self.epochs.or(file.get("train.epochs")?).unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch.or(file.get("train.batch_size")?).unwrap_or(cfg.batch_size);
        cfg.lr = self.lr.or(file.get("train.lr")?).unwrap_or(cfg.lr);
        cfg.decay = self.decay.or(file.get("train.decay")?).unwrap_or(cfg.decay);
        cfg.views_per_step = self
            .views_per_step
            .or(file.get("train.views_per_step")?)
            .unwrap_or(cfg.views_per_step);
        cfg.mesh_samples = self
            .mesh_samples
            .or(file.get("train.mesh_samples")?)
            .unwrap_or(cfg.mesh_samples);
        cfg.sigma = self.sigma.or(file.get("train.sigma")?).unwrap_or(cfg.sigma);
        cfg.checkpoint_every = self
            .checkpoint_every
            .or(file.get("train.checkpoint_every")?)
            .unwrap_or(cfg.checkpoint_every);
        if let Some(csv) = file.get::<String>("train.milestones")? {
            cfg.milestones = csv
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("train.milestones: {e}")))?;
        }
        let w = &mut cfg.weights;
        w.lambda_normal = file.get("train.lambda_normal")?.unwrap_or(w.lambda_normal);
        w.lambda_iou = file.get("train.lambda_iou")?.unwrap_or(w.lambda_iou);
        w.lambda_edge = file.get("train.lambda_edge")?.unwrap_or(w.lambda_edge);
        w.lambda_move = file.get("train.lambda_move")?.unwrap_or(w.lambda_move);
        w.iou_activation_fraction = file
            .get("train.iou_activation_fraction")?
            .unwrap_or(w.iou_activation_fraction);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural shape corpus.
    GenData {
        /// Dataset root (default: $MESHFORGE_DATA).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        per_family: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        /// Include the genus-1 torus family (failure-mode demos).
        #[arg(long)]
        include_torus: bool,
    },
    /// Train the model on the dataset's train split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the training log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Reconstruct one dataset shape from its image.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shape id from the manifest.
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the intermediate point cloud as OBJ.
        #[arg(long)]
        emit_points: bool,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint on a dataset split with the five metrics.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        emd_samples: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        /// Evaluation rig render resolution.
        #[arg(long)]
        resolution: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Render a mesh to a PGM image.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value = "render.pgm")]
        out: PathBuf,
        /// Lambertian shading instead of a binary silhouette.
        #[arg(long)]
        shaded: bool,
        #[arg(long, default_value_t = 30.0)]
        azimuth: f64,
        #[arg(long, default_value_t = 20.0)]
        elevation: f64,
        #[arg(long, default_value_t = 1.4)]
        distance: f64,
        #[arg(long, default_value_t = 140.0)]
        focal: f64,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Finite-difference checks of every loss and sampler gradient.
    Gradcheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Run the ablation grid and print a Table-3-shaped comparison.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
}

/// Plain-text `key = value` config with `[section]` headers.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        let Some(path) = path else {
            return Ok(FileConfig(map));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            map.insert(key, v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("config key {key} = {raw:?}: {e}"))),
        }
    }
}

fn data_root(flag: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(p) = file.get::<String>("data.root")? {
        return Ok(PathBuf::from(p));
    }
    if let Ok(p) = std::env::var("MESHFORGE_DATA") {
        return Ok(PathBuf::from(p));
    }
    Err(Error::Config(
        "no dataset root: pass --data/--root, set data.root in the config, or export MESHFORGE_DATA"
            .into(),
    ))
}

fn load_split(root: &Path, records: &[ManifestRecord], split: &str) -> Result<Vec<Example>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_example(root, r))
        .collect()
}

fn write_points_obj(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in &cloud.points {
        out.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_and_check(checkpoint: &Path, cfg: &ModelConfig) -> Result<ParamStore> {
    let store = load_checkpoint(checkpoint)?;
    check_params(&store, cfg)?;
    Ok(store)
}

/// Reconstruct every example and evaluate against the ground truths.
fn eval_split(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    examples: &[Example],
    eval_cfg: &EvalConfig,
) -> Result<genmesh::metrics::EvalReport> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut gts = Vec::with_capacity(examples.len());
    for ex in examples {
        let (mesh, _) = reconstruct(params, &ex.image, &ex.camera, model_cfg)?;
        preds.push(mesh);
        gts.push(ex.gt_mesh.clone());
    }
    evaluate(&preds, &gts, eval_cfg)
}

fn run_gradcheck(instances: usize) -> Result<()> {
    let started = std::time::Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, tol: f64, worst: f64| {
        let ok = worst < tol;
        println!(
            "gradcheck {name:<22} max_rel_error {worst:.3e}  (tol {tol:.0e})  {}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures.push(name.to_string());
        }
    };
    let rand_rows = |rng: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-s..s),
                    rng.gen_range(-s..s),
                    rng.gen_range(-s..s),
                ]
            })
            .collect()
    };

    // Chamfer w.r.t. the first point set.
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::from_rows3(&rand_rows(&mut rng, 15, 1.0));
        let p = Tensor::from_rows3(&rand_rows(&mut rng, 12, 1.0));
        let r = finite_diff_check(
            |tape, p| chamfer(p, &tape.constant(q.clone())),
            &p,
            1e-6,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    check("chamfer", 1e-4, worst);

    // Normal loss w.r.t. the predicted normals.
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p_pos = Tensor::from_rows3(&rand_rows(&mut rng, 10, 1.0));
        let q_pos = Tensor::from_rows3(&rand_rows(&mut rng, 13, 1.0));
        let q_nrm = Tensor::from_rows3(&rand_rows(&mut rng, 13, 1.0));
        let p_nrm = Tensor::from_rows3(&rand_rows(&mut rng, 10, 1.0));
        let r = finite_diff_check(
            |tape, n| {
                normal_loss(
                    &tape.constant(p_pos.clone()),
                    n,
                    &tape.constant(q_pos.clone()),
                    &tape.constant(q_nrm.clone()),
                )
            },
            &p_nrm,
            1e-6,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    check("normal_loss", 1e-4, worst);

    // Edge loss w.r.t. the vertices.
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let v = Tensor::from_rows3(&rand_rows(&mut rng, 8, 1.0));
        let edges = vec![[0usize, 1], [1, 2], [2, 3], [4, 5], [6, 7], [0, 7]];
        let r = finite_diff_check(|_, v| edge_loss(v, &edges), &v, 1e-6)?;
        worst = worst.max(r.max_rel_error);
    }
    check("edge_loss", 1e-4, worst);

    // Move loss w.r.t. the refined vertices.
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let before = Tensor::from_rows3(&rand_rows(&mut rng, 9, 1.0));
        let after = Tensor::from_rows3(&rand_rows(&mut rng, 9, 1.0));
        let r = finite_diff_check(
            |tape, a| move_loss(&tape.constant(before.clone()), a),
            &after,
            1e-6,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    check("move_loss", 1e-4, worst);

    // Soft-silhouette IoU loss w.r.t. the vertices.
    let sphere = icosphere(0)?;
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let cams = view_ring(RIG_DISTANCE_RANGE, seed, 18.0, 16, 16)?;
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let verts: Vec<[f64; 3]> = sphere
            .vertices
            .iter()
            .map(|&v| {
                [
                    v[0] * 0.4 + rng.gen_range(-0.05..0.05),
                    v[1] * 0.4 + rng.gen_range(-0.05..0.05),
                    v[2] * 0.4 + rng.gen_range(-0.05..0.05),
                ]
            })
            .collect();
        let gt = Mesh::new(
            sphere.vertices.iter().map(|&v| [v[0] * 0.38, v[1] * 0.38, v[2] * 0.38]).collect(),
            sphere.faces.clone(),
        )?;
        let mask = rasterize_hard(&gt, &cams[0])?;
        let r = finite_diff_check(
            |_, v| silhouette_iou_loss(v, &sphere.faces, &[mask.clone()], &cams[..1], 1e-3),
            &Tensor::from_rows3(&verts),
            1e-6,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    check("silhouette_iou_loss", 1e-3, worst);

    // sample2d w.r.t. the point positions.
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut store = ParamStore::new();
        init_enc2d(&mut store, &mut rng, EncoderMode::Desk);
        let image = genmesh::raster::Mask {
            width: 32,
            height: 32,
            data: (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let cams = view_ring(RIG_DISTANCE_RANGE, 600 + seed, 35.0, 32, 32)?;
        let pts = Tensor::from_rows3(&rand_rows(&mut rng, 10, 0.4));
        let w: Vec<f64> = (0..10 * EncoderMode::Desk.feat2d_width())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let r = finite_diff_check(
            |tape, p| {
                let maps = encode_image(tape, &store, &image, EncoderMode::Desk)?;
                let f = sample2d(p, &maps, &cams[0])?;
                let c = tape.constant(Tensor::new(f.shape(), w.clone())?);
                reduce_sum(&mul(&f, &c)?)
            },
            &pts,
            1e-6,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    check("sample2d_positions", 1e-4, worst);

    println!(
        "gradcheck finished in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("gradcheck failures: {}", failures.join(", "))))
    }
}

fn run_ablate(
    root: &Path,
    out: &Path,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<()> {
    let records = load_manifest(root)?;
    let train_set = load_split(root, &records, "train")?;
    let test_set = load_split(root, &records, "test")?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config(
            "ablation needs non-empty train and test splits".into(),
        ));
    }
    let variants: Vec<(&str, ModelConfig)> = vec![
        ("w/o 2D local", ModelConfig { local2d: false, ..base_model.clone() }),
        ("w/o 3D local", ModelConfig { local3d: false, ..base_model.clone() }),
        ("one-stage", ModelConfig { two_stage: false, ..base_model.clone() }),
        ("w/o IoU loss", ModelConfig { iou_loss: false, ..base_model.clone() }),
        ("Full Model", base_model.clone()),
    ];
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "CDx1e3", "EMDx1e2", "IoUx1e2", "NCx1e1", "Fx1e2"
    );
    let mut rows = Vec::new();
    for (name, cfg) in &variants {
        let slug = name
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect::<String>();
        let dir = out.join(slug);
        let mut params = init_model(cfg)?;
        let log_path = dir.join("train.log.jsonl");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut log = std::fs::File::create(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        train(&mut params, &train_set, &[], cfg, train_cfg, Some(&dir), &mut log)?;
        let report = eval_split(&params, cfg, &test_set, eval_cfg)?;
        report.write_jsonl(&dir.join("report.jsonl"))?;
        let s = report.scaled();
        println!(
            "{name:<14} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            s[0], s[1], s[2], s[3], s[4]
        );
        rows.push((name.to_string(), s));
    }
    let table_path = out.join("ablation.jsonl");
    let mut f = std::fs::File::create(&table_path)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    for (name, s) in &rows {
        let line = serde_json::json!({
            "variant": name, "cd_x1e3": s[0], "emd_x1e2": s[1],
            "iou_x1e2": s[2], "nc_x1e1": s[3], "fscore_x1e2": s[4],
        });
        writeln!(f, "{line}").map_err(|e| Error::io(table_path.display().to_string(), e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.get("seed")?).unwrap_or(0);
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData {
            root,
            per_family,
            image_size,
            val_fraction,
            include_torus,
        } => {
            let root = data_root(root, &file)?;
            let cfg = DatasetConfig {
                per_family: per_family.or(file.get("data.per_family")?).unwrap_or(8),
                image_size: image_size.or(file.get("data.image_size")?).unwrap_or(64),
                focal_px: file.get("data.focal")?.unwrap_or(70.0),
                val_fraction: val_fraction.or(file.get("data.val_fraction")?).unwrap_or(0.25),
                include_torus: include_torus || file.get("data.include_torus")?.unwrap_or(false),
                seed,
            };
            println!("gen-data root={} cfg={cfg:?}", root.display());
            let records = build_dataset(&root, &cfg)?;
            println!("wrote {} records to {}", records.len(), root.display());
        }
        Command::Train { data, out, model, train: tf } => {
            let root = data_root(data, &file)?;
            let model_cfg = model.resolve(&file, seed)?;
            let train_cfg = tf.resolve(&file, seed, cli.deterministic)?;
            println!("train data={} out={}", root.display(), out.display());
            println!("model = {model_cfg:?}");
            println!("train = {train_cfg:?}");
            let records = load_manifest(&root)?;
            let train_set = load_split(&root, &records, "train")?;
            let val_set = load_split(&root, &records, "val")?;
            let mut params = init_model(&model_cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let log_path = out.join("train.log.jsonl");
            let mut log = std::fs::File::create(&log_path)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            let report = train(
                &mut params,
                &train_set,
                &val_set,
                &model_cfg,
                &train_cfg,
                Some(&out),
                &mut log,
            )?;
            println!(
                "trained {} steps; final losses {:?}",
                report.steps, report.final_losses
            );
        }
        Command::Reconstruct {
            data,
            checkpoint,
            id,
            out,
            emit_points,
            model,
        } => {
            let root = data_root(data, &file)?;
            let model_cfg = model.resolve(&file, seed)?;
            println!("reconstruct id={id} checkpoint={}", checkpoint.display());
            println!("model = {model_cfg:?}");
            let records = load_manifest(&root)?;
            let record = records
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Error::Config(format!("no shape {id:?} in the manifest")))?;
            let example = load_example(&root, record)?;
            let params = load_and_check(&checkpoint, &model_cfg)?;
            let (mesh, cloud) = reconstruct(&params, &example.image, &example.camera, &model_cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let mesh_path = out.join(format!("{id}_pred.obj"));
            write_obj(&mesh, &mesh_path)?;
            println!("wrote {}", mesh_path.display());
            if emit_points {
                let pts_path = out.join(format!("{id}_points.obj"));
                write_points_obj(&cloud, &pts_path)?;
                println!("wrote {}", pts_path.display());
            }
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
            samples,
            emd_samples,
            tau,
            resolution,
            model,
        } => {
            let root = data_root(data, &file)?;
            let model_cfg = model.resolve(&file, seed)?;
            let mut eval_cfg = EvalConfig {
                seed,
                ..EvalConfig::default()
            };
            eval_cfg.samples = samples.or(file.get("eval.samples")?).unwrap_or(eval_cfg.samples);
            eval_cfg.emd_samples = emd_samples
                .or(file.get("eval.emd_samples")?)
                .unwrap_or(eval_cfg.emd_samples);
            eval_cfg.tau = tau.or(file.get("eval.tau")?).unwrap_or(eval_cfg.tau);
            eval_cfg.rig_resolution = resolution
                .or(file.get("eval.resolution")?)
                .unwrap_or(eval_cfg.rig_resolution);
            // Viewer-centered predictions live in the canonical camera
            // frame, so both meshes must be re-normalized to compare.
            eval_cfg.canonical = model_cfg.center == CenterMode::Viewer;
            println!("eval split={split} checkpoint={}", checkpoint.display());
            println!("model = {model_cfg:?}");
            println!("eval = {eval_cfg:?}");
            let records = load_manifest(&root)?;
            let examples = load_split(&root, &records, &split)?;
            if examples.is_empty() {
                return Err(Error::Config(format!("split {split:?} is empty")));
            }
            let params = load_and_check(&checkpoint, &model_cfg)?;
            let report = eval_split(&params, &model_cfg, &examples, &eval_cfg)?;
            print!("{}", report.table());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let path = out.join("report.jsonl");
            report.write_jsonl(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Render {
            mesh,
            out,
            shaded,
            azimuth,
            elevation,
            distance,
            focal,
            size,
        } => {
            println!(
                "render mesh={} az={azimuth} el={elevation} d={distance} {}x{size}",
                mesh.display(),
                size
            );
            let m = read_obj(&mesh)?;
            let camera = Camera::from_angles(azimuth, elevation, distance, focal, size, size)?;
            let img = if shaded {
                let light = [-camera.rot[2][0], -camera.rot[2][1], -camera.rot[2][2]];
                render_shaded(&m, &camera, light)?
            } else {
                rasterize_hard(&m, &camera)?
            };
            write_pgm_u8(&img, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { instances } => {
            println!("gradcheck instances={instances} seed={seed}");
            run_gradcheck(instances)?;
        }
        Command::Ablate { data, out, model, train: tf } => {
            let root = data_root(data, &file)?;
            let model_cfg = model.resolve(&file, seed)?;
            let train_cfg = tf.resolve(&file, seed, cli.deterministic)?;
            let eval_cfg = EvalConfig {
                seed,
                ..EvalConfig::default()
            };
            println!("ablate data={} out={}", root.display(), out.display());
            println!("model = {model_cfg:?}");
            println!("train = {train_cfg:?}");
            run_ablate(&root, &out, &model_cfg, &train_cfg, &eval_cfg)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
