//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use crate::archive::{load_checkpoint, save_checkpoint, Dtype, TensorArchive};
use crate::backbone::{count_params, estimate_flops, Backbone};
use crate::config::RunConfig;
use crate::data::{SyntheticDataset, SyntheticSpec, NUM_CLASSES};
use crate::scan2d::ScanMode;
use crate::tensor::{set_precision, Tensor};
use crate::train::{evaluate, train_loop, BatchSource, TrainConfig};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "roadmamba", about = "Dual-scan selective state space image classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic dataset archives
    GenData {
        /// Output directory for train.rdmb and eval.rdmb
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length in pixels
        #[arg(long, default_value_t = 64)]
        side: usize,
        /// Exactly balance classes instead of sampling them uniformly
        #[arg(long)]
        stratified: bool,
    },
    /// Train a model from a run configuration
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset archive
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset archive produced by gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// List the tensors in a checkpoint
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print estimated cost and measured forward latency
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an ablation grid on synthetic data
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["scan", "daf", "aux"])]
        axis: String,
    },
}

/// Dataset archive holding an image tensor and a label tensor.
pub struct ArchiveDataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    side: usize,
}

impl ArchiveDataset {
    pub fn from_archive(ar: &TensorArchive) -> Result<ArchiveDataset, String> {
        let img = ar.get("images").ok_or("archive has no images entry")?;
        let lab = ar.get("labels").ok_or("archive has no labels entry")?;
        if img.shape.len() != 4 || img.shape[3] != 3 {
            return Err(format!("images must be [n,side,side,3], got {:?}", img.shape));
        }
        if lab.shape != vec![img.shape[0]] {
            return Err(format!("labels shape {:?} does not match images", lab.shape));
        }
        Ok(ArchiveDataset {
            images: img.values.clone(),
            labels: lab.values.iter().map(|&v| v as usize).collect(),
            side: img.shape[1],
        })
    }
}

impl BatchSource for ArchiveDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.side * self.side * 3;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(&[indices.len(), self.side, self.side, 3], data), labels)
    }
}

fn dataset_archive(ds: &SyntheticDataset) -> TensorArchive {
    let s = ds.spec.side;
    let mut images = Vec::with_capacity(ds.len() * s * s * 3);
    let mut labels = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        images.extend_from_slice(&ds.render_at(i));
        labels.push(ds.labels[i] as f64);
    }
    let mut ar = TensorArchive::default();
    ar.push("images", Dtype::F32, &[ds.len(), s, s, 3], images);
    ar.push("labels", Dtype::F64, &[ds.len()], labels);
    ar
}

fn load_dataset(path: &PathBuf) -> Result<ArchiveDataset, String> {
    let ar = TensorArchive::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    ArchiveDataset::from_archive(&ar)
}

/// Synthetic splits sized for a training run; eval split uses a disjoint
/// render stream.
fn synthetic_splits(cfg: &RunConfig, n_train: usize, n_eval: usize) -> (SyntheticDataset, SyntheticDataset) {
    let spec = SyntheticSpec { side: cfg.image_side, noise_sigma: 0.05, seed: cfg.seed };
    let train = SyntheticDataset::stratified(spec.clone(), n_train, 0);
    let eval = SyntheticDataset::stratified(spec, n_eval, 1 << 24);
    (train, eval)
}

fn run_training(
    cfg: &RunConfig,
    out: &PathBuf,
    resume: Option<&PathBuf>,
) -> Result<(), String> {
    set_precision(cfg.precision);
    let bcfg = cfg.backbone()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Backbone::new(&bcfg, &mut rng);
    if let Some(path) = resume {
        let ar = TensorArchive::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
        load_checkpoint(&net, &ar).map_err(|e| e.to_string())?;
    }
    let n_train = (cfg.batch_size * cfg.total_steps).clamp(NUM_CLASSES, 2700);
    let (train, eval) = synthetic_splits(cfg, n_train, 540.min(n_train));
    let tcfg = cfg.train();
    let outcome = train_loop(&net, &bcfg, &tcfg, &train, &eval).map_err(|e| e.to_string())?;
    print!("{}", outcome.log_csv);
    save_checkpoint(&net, out).map_err(|e| e.to_string())?;
    eprintln!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        outcome.steps_run,
        outcome.final_loss,
        out.display()
    );
    Ok(())
}

fn run_eval(cfg: &RunConfig, ckpt: &PathBuf, data: &PathBuf) -> Result<(), String> {
    set_precision(cfg.precision);
    let bcfg = cfg.backbone()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Backbone::new(&bcfg, &mut rng);
    let ar = TensorArchive::load(ckpt).map_err(|e| format!("{}: {e}", ckpt.display()))?;
    load_checkpoint(&net, &ar).map_err(|e| e.to_string())?;
    let ds = load_dataset(data)?;
    let m = evaluate(&net, &ds, cfg.batch_size, bcfg.num_classes);
    println!("top1 {:.4}", m.top1);
    println!("meanP {:.4}", m.mean_precision);
    println!("meanR {:.4}", m.mean_recall);
    println!("meanF1 {:.4}", m.mean_f1);
    Ok(())
}

fn run_inspect(ckpt: &PathBuf) -> Result<(), String> {
    let ar = TensorArchive::load(ckpt).map_err(|e| format!("{}: {e}", ckpt.display()))?;
    let mut total = 0usize;
    let mut aux = 0usize;
    for e in &ar.entries {
        let n: usize = e.shape.iter().product();
        println!("{} {:?} {}", e.name, e.shape, n);
        total += n;
        if e.name.contains(".aux.") {
            aux += n;
        }
    }
    println!("total params {total}");
    println!("total params excluding aux heads {}", total - aux);
    Ok(())
}

fn run_bench(cfg: &RunConfig) -> Result<(), String> {
    set_precision(cfg.precision);
    let bcfg = cfg.backbone()?;
    let (flops, parts) = estimate_flops(&bcfg, bcfg.image_side);
    println!("params {}", count_params(&bcfg, false));
    println!("estimated GFLOPs {:.3}", flops / 1e9);
    for (name, f) in &parts {
        println!("  {name} {:.3}G", f / 1e9);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Backbone::new(&bcfg, &mut rng);
    let s = bcfg.image_side;
    let x = Tensor::from_vec(
        &[1, s, s, 3],
        (0..s * s * 3).map(|i| (i % 255) as f64 / 255.0).collect(),
    );
    let t0 = std::time::Instant::now();
    let _ = net.forward(&x, ScanMode::Eval, &mut rng);
    println!("forward latency {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

fn run_ablate(cfg: &RunConfig, axis: &str) -> Result<(), String> {
    set_precision(cfg.precision);
    let grid: Vec<(String, RunConfig)> = match axis {
        "scan" => ["dual", "global_only", "local_only"]
            .iter()
            .map(|v| {
                let mut c = cfg.clone();
                c.scan_variant = v.parse().unwrap();
                (format!("scan={v}"), c)
            })
            .collect(),
        "daf" => ["GCLT", "GLTC", "GTLC"]
            .iter()
            .map(|a| {
                let mut c = cfg.clone();
                c.aggregator_assignment = a.parse().unwrap();
                (format!("daf={a}"), c)
            })
            .collect(),
        "aux" => [0.0, 0.3]
            .iter()
            .map(|&l| {
                let mut c = cfg.clone();
                c.lambda_aux = l;
                (format!("aux_lambda={l}"), c)
            })
            .collect(),
        other => return Err(format!("unknown ablation axis {other}")),
    };
    println!("setting,top1,meanP,meanR,meanF1");
    for (label, rc) in grid {
        let bcfg = rc.backbone()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
        let net = Backbone::new(&bcfg, &mut rng);
        let n_train = (rc.batch_size * rc.total_steps).clamp(NUM_CLASSES, 2700);
        let (train, eval) = synthetic_splits(&rc, n_train, 270.min(n_train));
        let tcfg = TrainConfig { eval_every: 0, log_every: 0, ..rc.train() };
        train_loop(&net, &bcfg, &tcfg, &train, &eval).map_err(|e| e.to_string())?;
        let m = evaluate(&net, &eval, rc.batch_size, bcfg.num_classes);
        println!(
            "{label},{:.4},{:.4},{:.4},{:.4}",
            m.top1, m.mean_precision, m.mean_recall, m.mean_f1
        );
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), String> {
    match cmd {
        Cmd::GenData { out, n_train, n_eval, seed, side, stratified } => {
            std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            let spec = SyntheticSpec { side, noise_sigma: 0.05, seed };
            let make = |len, base| {
                if stratified {
                    SyntheticDataset::stratified(spec.clone(), len, base)
                } else {
                    SyntheticDataset::uniform(spec.clone(), len, base)
                }
            };
            let train = make(n_train, 0);
            let eval = make(n_eval, 1 << 24);
            dataset_archive(&train)
                .save(&out.join("train.rdmb"))
                .map_err(|e| e.to_string())?;
            dataset_archive(&eval).save(&out.join("eval.rdmb")).map_err(|e| e.to_string())?;
            eprintln!("wrote {} train / {} eval samples to {}", n_train, n_eval, out.display());
            Ok(())
        }
        Cmd::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            run_training(&cfg, &out, resume.as_ref())
        }
        Cmd::Eval { config, ckpt, data } => {
            let cfg = RunConfig::load(&config)?;
            run_eval(&cfg, &ckpt, &data)
        }
        Cmd::Inspect { ckpt } => run_inspect(&ckpt),
        Cmd::Bench { config } => {
            let cfg = RunConfig::load(&config)?;
            run_bench(&cfg)
        }
        Cmd::Ablate { config, axis } => {
            let cfg = RunConfig::load(&config)?;
            run_ablate(&cfg, &axis)
        }
    }
}

pub fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                eprintln!("{e}");
                std::process::exit(1);
            }
        },
    };
    if let Err(msg) = dispatch(cli.cmd) {
        eprintln!("error: {msg}");
        std::process::exit(2);
    }
}
