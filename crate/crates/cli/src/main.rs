//! `drinet` command line tool.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (including a failed gradient check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drinet::autograd::{Ctx, NodeId, Op};
use drinet::checkpoint::{self, CheckpointMeta};
use drinet::eval::memory::kitti_like_bounds;
use drinet::eval::{bench, supervision_memory, ConfusionMatrix};
use drinet::network::{forward_graph, init_params, predict_probs};
use drinet::pointcloud::{read_labels, read_point_cloud, write_labels, LabelRemap, PointFormat};
use drinet::scene::{generate_scene, lidar_scan_spec, toy_scene_spec};
use drinet::training::gradcheck::{perturb_params, projection_loss};
use drinet::training::{evaluate, grad_check, load_dataset, predict_cloud, GradCheckConfig, TrainConfig, Trainer};
use drinet::voxelizer::{count_voxels, voxelize, VoxelGridConfig};
use drinet::{Error, Label, NetworkConfig, PointCloud, ScaleSet};

#[derive(Parser)]
#[command(name = "drinet", version, about = "Sparse voxel segmentation: train, infer, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a point cloud and report or export the active voxels.
    Voxelize(VoxelizeArgs),
    /// Train from a TOML config; prints one JSON record per epoch.
    Train(TrainArgs),
    /// Predict per-point labels with a checkpoint.
    Infer(InferArgs),
    /// Score predictions: label files, or a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time voxelization plus a forward pass on a synthetic scan.
    Bench(BenchArgs),
    /// Dense versus sparse supervision memory for a scan.
    Memcheck(MemArgs),
    /// Finite-difference check of the network gradient on a small instance.
    Gradcheck(GradArgs),
    /// CSV of voxel/point ratio against voxel size.
    RatioCurve(RatioArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Number of SFE + SGFE blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Comma separated projection scales, e.g. `2,4,8,16`.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<u32>>,
}

impl CommonArgs {
    fn train_config(&self) -> drinet::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.voxel_size {
            cfg.voxel_size = v;
        }
        if let Some(b) = self.blocks {
            cfg.network.num_blocks = b;
        }
        if let Some(s) = &self.scales {
            cfg.network.scales = ScaleSet::new(s.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct VoxelizeArgs {
    input: PathBuf,
    /// `kitti-bin` or `ascii-xyz`; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<PointFormat>,
    #[arg(long, default_value_t = 0.2)]
    voxel_size: f64,
    /// Write `x,y,z,dx,dy,dz,intensity,inv_count` per voxel as CSV.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Where to save the final parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from these parameters instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also append the epoch records to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    format: Option<PointFormat>,
    /// Label file to write (one little-endian u32 per point).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Predicted label file.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground-truth label file.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Class count for label-file scoring; defaults to the config's.
    #[arg(long)]
    classes: Option<usize>,
    /// Raw-to-class remap applied to the ground truth.
    #[arg(long)]
    remap: Option<PathBuf>,
    /// Score a checkpoint on the validation split of the config's dataset
    /// (the training split when there is no validation split).
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Benchmark these parameters instead of a fresh init.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct MemArgs {
    /// Point cloud to measure; a synthetic scan is used when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<PointFormat>,
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    voxel_size: f64,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    value_bytes: u64,
    #[arg(long, default_value_t = 2)]
    label_bytes: u64,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    scales: Vec<u32>,
    /// Upper bound on voxels in the checked instance.
    #[arg(long, default_value_t = 60)]
    voxels: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Per-tensor cap on checked entries.
    #[arg(long)]
    max_entries: Option<usize>,
}

#[derive(Args)]
struct RatioArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<PointFormat>,
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.4,0.8")]
    sizes: Vec<f64>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Format(_) | Error::Shape(_) | Error::Empty(_) | Error::Index(_) => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult = Result<(), Failure>;

fn guess_format(path: &Path, given: Option<PointFormat>) -> PointFormat {
    given.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => PointFormat::KittiBin,
        _ => PointFormat::AsciiXyz,
    })
}

fn load_cloud(path: &Path, format: Option<PointFormat>) -> drinet::Result<PointCloud> {
    read_point_cloud(path, guess_format(path, format))
}

fn cloud_or_scan(input: &Option<PathBuf>, format: Option<PointFormat>, points: usize, seed: u64) -> drinet::Result<PointCloud> {
    match input {
        Some(p) => load_cloud(p, format),
        None => generate_scene(&lidar_scan_spec(seed, points)),
    }
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn cmd_voxelize(a: VoxelizeArgs) -> CliResult {
    let pc = load_cloud(&a.input, a.format)?;
    let (t, _) = voxelize(&pc, &VoxelGridConfig::new(a.voxel_size)?)?;
    if let Some(out) = &a.output {
        let mut text = String::from("x,y,z,dx,dy,dz,intensity,inv_count\n");
        for (c, row) in t.coords().iter().zip(t.feats().outer_iter()) {
            let f: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&format!("{},{},{},{}\n", c.x, c.y, c.z, f.join(",")));
        }
        fs::write(out, text)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "num_points": pc.len(),
            "num_voxels": t.len(),
            "voxel_size": a.voxel_size,
            "ratio": t.len() as f64 / pc.len().max(1) as f64,
        })
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = a.common.train_config()?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let (train, val) = load_dataset(&cfg)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let (meta, store) = checkpoint::load(p)?;
            checkpoint::check_compatible(&meta, &store)?;
            if meta.network != cfg.network {
                return Err(Error::Config("resume checkpoint network differs from the config".into()).into());
            }
            Trainer::with_params(cfg, store)?
        }
        None => Trainer::new(cfg)?,
    };
    let mut log = match &a.log {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut io_err = None;
    let summary = trainer.fit(&train, &val, |rec| {
        let line = json_line(rec);
        println!("{line}");
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(p) = &a.checkpoint {
        let meta = CheckpointMeta {
            voxel_size: trainer.cfg.voxel_size,
            step: trainer.step as u64,
            network: trainer.cfg.network.clone(),
        };
        checkpoint::save(p, &meta, &trainer.store)?;
        log::info!("saved {} after {} steps", p.display(), summary.steps);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> drinet::Result<(CheckpointMeta, drinet::ParameterStore)> {
    let (meta, store) = checkpoint::load(path)?;
    checkpoint::check_compatible(&meta, &store)?;
    Ok((meta, store))
}

fn config_for(meta: &CheckpointMeta, base: TrainConfig) -> TrainConfig {
    TrainConfig { voxel_size: meta.voxel_size, network: meta.network.clone(), ..base }
}

fn cmd_infer(a: InferArgs) -> CliResult {
    let (meta, store) = load_checkpoint(&a.checkpoint)?;
    let cfg = config_for(&meta, TrainConfig::default());
    let pc = load_cloud(&a.input, a.format)?;
    let labels = predict_cloud(&store, &cfg, &pc)?;
    if let Some(out) = &a.output {
        write_labels(&labels, out)?;
    }
    let mut hist = vec![0usize; cfg.network.num_classes];
    for &l in &labels {
        if let Some(h) = hist.get_mut(l as usize) {
            *h += 1;
        }
    }
    println!("{}", serde_json::json!({ "num_points": labels.len(), "class_counts": hist }));
    Ok(())
}

fn print_scores(cm: &ConfusionMatrix) -> CliResult {
    print!("{}", cm.table()?);
    println!("{}", json_line(&cm.scores()?));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let cfg = a.common.train_config()?;
    let ignore = cfg.loss.ignore_label;
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let preds = read_labels(pred, None)?;
        let mut gts = read_labels(gt, Some(preds.len()))?;
        if let Some(r) = &a.remap {
            LabelRemap::parse(&fs::read_to_string(r)?, ignore)?.apply(&mut gts);
        }
        let mut cm = ConfusionMatrix::new(a.classes.unwrap_or(cfg.network.num_classes), ignore);
        cm.accumulate(&preds, &gts)?;
        return print_scores(&cm);
    }
    let Some(ck) = &a.checkpoint else {
        return Err(Error::Config("eval needs --pred/--gt or --checkpoint".into()).into());
    };
    let (meta, store) = load_checkpoint(ck)?;
    let cfg = config_for(&meta, cfg);
    let (train, val) = load_dataset(&cfg)?;
    let clouds = if val.is_empty() { &train } else { &val };
    print_scores(&evaluate(&store, &cfg, clouds)?)
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let mut cfg = a.common.train_config()?;
    let store = match &a.checkpoint {
        Some(p) => {
            let (meta, store) = load_checkpoint(p)?;
            cfg = config_for(&meta, cfg);
            store
        }
        None => init_params(&cfg.network, cfg.seed)?,
    };
    let scan = generate_scene(&lidar_scan_spec(cfg.seed, a.points))?;
    let grid = cfg.grid()?;
    let mut voxels = 0;
    let stats = bench(a.warmup, a.reps.max(1), || {
        let (t0, _) = voxelize(&scan, &grid)?;
        voxels = t0.len();
        predict_probs(&t0, &cfg.network, &store).map(|_| ())
    })?;
    println!(
        "{}",
        serde_json::json!({
            "stage": "voxelize+forward",
            "num_points": scan.len(),
            "num_voxels": voxels,
            "blocks": cfg.network.num_blocks,
            "channels": cfg.network.channels,
            "min_s": stats.min,
            "median_s": stats.median,
            "p95_s": stats.p95,
            "samples_s": stats.samples,
        })
    );
    Ok(())
}

fn cmd_memcheck(a: MemArgs) -> CliResult {
    let pc = cloud_or_scan(&a.input, a.format, a.points, a.seed)?;
    let bounds = kitti_like_bounds();
    let grid = VoxelGridConfig::new(a.voxel_size)?.with_bounds(bounds);
    let (t, _) = voxelize(&pc, &grid)?;
    let r = supervision_memory(&bounds, a.voxel_size, a.classes, t.len() as u64, a.value_bytes, a.label_bytes)?;
    eprintln!("assumptions: {}", r.assumptions());
    println!("{}", json_line(&r));
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> CliResult {
    let net = NetworkConfig {
        num_blocks: a.blocks,
        channels: a.channels,
        scales: ScaleSet::new(a.scales.clone())?,
        num_classes: 3,
        ..Default::default()
    };
    net.validate()?;
    if a.voxels == 0 {
        return Err(Error::Config("--voxels must be positive".into()).into());
    }
    // one point per voxel at most
    let pc = generate_scene(&toy_scene_spec(a.seed, a.voxels))?;
    let (t0, _) = voxelize(&pc, &VoxelGridConfig::new(0.5)?)?;
    let mut store = init_params(&net, a.seed)?;
    perturb_params(&mut store, a.seed);
    let coords = t0.coord_set().clone();
    let labels: std::sync::Arc<Vec<Label>> = std::sync::Arc::new((0..t0.len()).map(|i| (i % 3) as Label).collect());
    let cfg = GradCheckConfig { max_entries: a.max_entries, ..Default::default() };
    let report = grad_check(&store, &[], &cfg, |tp, _| {
        let out = forward_graph(tp, &coords, t0.feats().clone(), &net)?;
        let ce = tp.apply(Op::CrossEntropy { labels: labels.clone(), ignore: 255 }, &[&out.logits])?;
        let lv = tp.apply(Op::Lovasz { labels: labels.clone(), ignore: 255 }, &[&out.probs])?;
        let mut terms: Vec<NodeId> = vec![ce, lv];
        for (k, tap) in out.taps.iter().enumerate() {
            terms.push(projection_loss(tp, &tap.aux_logits, k as u64)?);
        }
        let refs: Vec<&NodeId> = terms.iter().collect();
        tp.apply(Op::WeightedSum { weights: vec![1.0; refs.len()] }, &refs)
    })?;
    let pass = report.passes(a.tol);
    println!(
        "{}",
        serde_json::json!({
            "voxels": t0.len(),
            "checked": report.checked,
            "kinks": report.kinks,
            "max_rel_err": report.max_rel_err,
            "tol": a.tol,
            "worst": report.worst.as_ref().map(|w| format!("{}[{}] analytic {:e} numeric {:e}", w.tensor, w.index, w.analytic, w.numeric)),
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure { code: 3, msg: format!("gradient check failed: max rel err {:e} > {:e}", report.max_rel_err, a.tol) })
    }
}

fn cmd_ratio_curve(a: RatioArgs) -> CliResult {
    let pc = cloud_or_scan(&a.input, a.format, a.points, a.seed)?;
    if pc.is_empty() {
        return Err(Error::Empty("point cloud has no points".into()).into());
    }
    if a.sizes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("voxel sizes must be strictly increasing".into()).into());
    }
    let mut out = String::from("voxel_size,num_voxels,num_points,ratio\n");
    for &s in &a.sizes {
        let m = count_voxels(&pc, s)?;
        out.push_str(&format!("{s},{m},{},{}\n", pc.len(), m as f64 / pc.len() as f64));
    }
    print!("{out}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Memcheck(a) => cmd_memcheck(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::RatioCurve(a) => cmd_ratio_curve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
