use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use manet_core::data::{build_manifest, generate_synthetic, Split, SyntheticConfig};
use manet_core::eval::{attention_records, evaluate_classification, evaluate_retrieval, write_attention, Metric};
use manet_core::gradcheck::{check_gradients, GradModule};
use manet_core::model::Branch;
use manet_core::train::{pretrain_branch, train_fused, Checkpoint, Dataset, Preset, Stage, TrainConfig};
use manet_core::{Error, MaskMode, Result};

#[derive(Parser)]
#[command(
    name = "manet",
    version,
    about = "Point-view fusion network for 3D shape recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset or index an existing tree.
    PrepareData(PrepareArgs),
    /// Train one branch with a temporary classifier.
    Pretrain(PretrainArgs),
    /// Fused training from two pretrained branches.
    Train(TrainArgs),
    /// Classification accuracy or retrieval mAP of a checkpoint.
    Eval(EvalArgs),
    /// Per-shape view attention weights of a fused checkpoint.
    DumpAttention(DumpArgs),
    /// Finite-difference check of one module's gradients.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    root: PathBuf,
    /// Write synthetic primitives under the root first.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Defaults to four fifths of `per_class`.
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1024)]
    points: usize,
}

/// Flags mirroring the config keys; each one replaces the file's value.
/// Without a file, `--preset desk` starts from the desk defaults.
#[derive(Args, Default)]
struct Overrides {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_fusion: Option<f64>,
    #[arg(long)]
    lr_base: Option<f64>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    lr_step_factor: Option<f64>,
    #[arg(long)]
    lr_step_interval: Option<usize>,
    #[arg(long)]
    freeze_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_mode: Option<MaskMode>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
    };
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None if self.preset == Some(Preset::Desk) => TrainConfig::desk(),
            None => TrainConfig::default(),
        };
        apply!(
            cfg,
            self,
            preset,
            k,
            views,
            batch_size,
            momentum,
            weight_decay,
            lr_fusion,
            lr_base,
            pretrain_lr,
            freeze_epochs,
            epochs,
            pretrain_epochs,
            seed,
            mask_mode
        );
        if let Some(f) = self.lr_step_factor {
            cfg.lr_step.factor = f;
        }
        if let Some(i) = self.lr_step_interval {
            cfg.lr_step.interval = i;
        }
        if self.data_root.is_some() {
            cfg.data_root = self.data_root.clone();
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    branch: Branch,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<out_dir>/<branch>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    point_ckpt: PathBuf,
    #[arg(long)]
    view_ckpt: PathBuf,
    /// Checkpoint directory; defaults to `<out_dir>/fused`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Task {
    Cls,
    Retrieval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "cls")]
    task: Task,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Include the per-shape prediction log.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Also write one annotated view strip per shape.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    module: GradModule,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn data_root(cfg: &TrainConfig) -> Result<&Path> {
    cfg.data_root
        .as_deref()
        .ok_or_else(|| Error::Parameter("no dataset root: pass --data-root or set data_root".into()))
}

fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    let root = data_root(cfg)?;
    let manifest = build_manifest(root)?;
    let model = cfg.model_config(manifest.classes.len())?;
    Dataset::load(&manifest, cfg.load_config(&model))
}

fn output_dir(explicit: &Option<PathBuf>, cfg: &TrainConfig, name: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(name))
}

fn summary(ck: &Checkpoint, dir: &Path) -> Value {
    let last = ck.meta.history.last();
    json!({
        "checkpoint": dir,
        "stage": ck.meta.stage,
        "epoch": ck.meta.epoch,
        "train_loss": last.map(|r| r.train_loss),
        "train_accuracy": last.map(|r| r.train_accuracy),
        "eval_loss": last.map(|r| r.eval_loss),
    })
}

fn checkpoint_data(ck: &Checkpoint, root: &Option<PathBuf>) -> Result<Dataset> {
    let mut cfg = ck.meta.config.clone();
    if root.is_some() {
        cfg.data_root = root.clone();
    }
    let data = load_data(&cfg)?;
    if data.classes != ck.meta.classes {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            ck.meta.classes, data.classes
        )));
    }
    Ok(data)
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::PrepareData(a) => {
            let mut generated = None;
            if a.synthetic {
                let mut sc = SyntheticConfig::new(a.classes, a.per_class);
                if let Some(t) = a.train_per_class {
                    sc.train_per_class = t;
                }
                sc.image_size = a.image_size;
                sc.num_points = a.points;
                generated = Some(generate_synthetic(&a.root, &sc, a.seed)?);
            }
            let manifest = build_manifest(&a.root)?;
            let path = a.root.join("manifest.json");
            manifest.save(&path)?;
            Ok(json!({
                "manifest": path,
                "classes": manifest.classes.len(),
                "train": manifest.count(Split::Train),
                "test": manifest.count(Split::Test),
                "rejected": manifest.rejected.len(),
                "generated": generated,
            }))
        }
        Command::Pretrain(a) => {
            let cfg = a.overrides.resolve()?;
            let data = load_data(&cfg)?;
            let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
            let ck = pretrain_branch(&cfg, &data, a.branch, resume)?;
            let dir = output_dir(&a.out, &cfg, a.branch.as_str());
            ck.save(&dir)?;
            info!("saved {}", dir.display());
            Ok(summary(&ck, &dir))
        }
        Command::Train(a) => {
            let cfg = a.overrides.resolve()?;
            let data = load_data(&cfg)?;
            let point = Checkpoint::load(&a.point_ckpt)?;
            let view = Checkpoint::load(&a.view_ckpt)?;
            let ck = train_fused(&cfg, &data, &point, &view, None)?;
            let dir = output_dir(&a.out, &cfg, "fused");
            ck.save(&dir)?;
            Ok(summary(&ck, &dir))
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let model = ck.model()?;
            let data = checkpoint_data(&ck, &a.data_root)?;
            let shapes = data.split(a.split);
            match a.task {
                Task::Cls => {
                    let mut report = evaluate_classification(&model, &ck.params, ck.meta.stage, shapes, &data.classes)?;
                    if !a.predictions {
                        report.predictions.clear();
                    }
                    Ok(json!({ "split": a.split, "stage": ck.meta.stage, "classification": report }))
                }
                Task::Retrieval => {
                    let report = evaluate_retrieval(&model, &ck.params, ck.meta.stage, shapes, a.metric)?;
                    Ok(json!({ "split": a.split, "stage": ck.meta.stage, "retrieval": report }))
                }
            }
        }
        Command::DumpAttention(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            if ck.meta.stage != Stage::Fused {
                return Err(Error::Parameter("attention weights need a fused checkpoint".into()));
            }
            let model = ck.model()?;
            let data = checkpoint_data(&ck, &a.data_root)?;
            let shapes = data.split(a.split);
            let records = attention_records(&model, &ck.params, shapes, &data.classes)?;
            write_attention(&records, shapes, &a.out, a.png)?;
            Ok(json!({ "records": records.len(), "out": a.out.join("attention.jsonl") }))
        }
        Command::GradCheck(a) => {
            let reports = (0..a.seeds)
                .map(|s| check_gradients(a.module, s, a.tolerance))
                .collect::<Result<Vec<_>>>()?;
            let failing: Vec<String> = reports.iter().flat_map(|r| r.failing()).collect();
            if !failing.is_empty() {
                return Err(Error::GradCheck(failing));
            }
            let worst = reports.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
            Ok(json!({ "module": a.module, "seeds": a.seeds, "max_rel_error": worst, "reports": reports }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
