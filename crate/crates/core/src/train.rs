//! Training configuration, the optimizer, checkpoints and the two training
//! regimes: standalone branch pretraining and fused training with a frozen
//! warm-up.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{build_manifest, load_pair, DatasetManifest, LoadConfig, Split, VIEWS};
use crate::error::{Error, Result};
use crate::fusion::{Dropout, MaskMode};
use crate::model::{Branch, Manet, ModelConfig, Sample};
use crate::params::ParamStore;
use crate::pointcloud::{augment, AugmentConfig, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

/// Multiply every learning rate by `factor` once per `interval` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrStep {
    fn default() -> Self {
        LrStep {
            factor: 0.5,
            interval: 20,
        }
    }
}

impl LrStep {
    /// Rate in force during 1-based `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch.saturating_sub(1) / self.interval) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub views: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_fusion: f64,
    pub lr_base: f64,
    pub pretrain_lr: f64,
    pub lr_step: LrStep,
    pub freeze_epochs: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub augment: AugmentConfig,
    pub preset: Preset,
    /// Replaces the preset's architecture when present.
    pub model: Option<ModelConfig>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 20,
            views: VIEWS,
            batch_size: 20,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_fusion: 0.01,
            lr_base: 0.001,
            pretrain_lr: 0.01,
            lr_step: LrStep::default(),
            freeze_epochs: 10,
            epochs: 60,
            pretrain_epochs: 60,
            seed: 0,
            mask_mode: MaskMode::Softmax,
            augment: AugmentConfig::default(),
            preset: Preset::Full,
            model: None,
            data_root: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Reduced architecture and schedule for single-core runs on the
    /// synthetic set.
    pub fn desk() -> Self {
        TrainConfig {
            k: 12,
            epochs: 30,
            pretrain_epochs: 30,
            preset: Preset::Desk,
            ..TrainConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("views", self.views),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lr_step.interval", self.lr_step.interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("lr_fusion", self.lr_fusion),
            ("lr_base", self.lr_base),
            ("pretrain_lr", self.pretrain_lr),
            ("lr_step.factor", self.lr_step.factor),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "weight_decay {} is negative",
                self.weight_decay
            )));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::Parameter(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        if self.views != VIEWS {
            return Err(Error::Parameter(format!(
                "datasets provide {VIEWS} views, config asks for {}",
                self.views
            )));
        }
        Ok(())
    }

    /// Architecture for a dataset with `num_classes` classes, with `k`, the
    /// view count and the mask mode taken from this config.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        self.validate()?;
        let mut m = self.model.clone().unwrap_or_else(|| match self.preset {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(num_classes),
        });
        m.num_classes = num_classes;
        m.point.k = self.k;
        m.view.views = self.views;
        m.fusion.mask_mode = self.mask_mode;
        m.validate()?;
        Ok(m)
    }

    pub fn load_config(&self, m: &ModelConfig) -> LoadConfig {
        LoadConfig {
            num_points: m.point.num_points,
            image_size: m.view.image_size,
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
///
/// Parameters and velocities are rounded to float32 after every step, so a
/// checkpoint holds the exact training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: ParamStore::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: impl Fn(&str) -> f64) {
        for (name, g) in grads {
            let eta = lr(name);
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let v = self.velocity.get_mut(name).expect("velocity inserted above");
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = (self.momentum * *vi + gi + self.weight_decay * *pi) as f32 as f64;
                *pi = (*pi - eta * *vi) as f32 as f64;
            }
        }
    }
}

/// One shape held in memory: the normalized cloud and its stacked views.
#[derive(Clone, Debug)]
pub struct Shape {
    pub shape_id: String,
    pub label: usize,
    pub cloud: PointCloud,
    pub views: Tensor,
}

impl Shape {
    pub fn sample(&self, k: usize) -> Result<Sample> {
        Sample::from_parts(&self.cloud, self.views.clone(), k)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Shape>,
    pub test: Vec<Shape>,
    /// Entries that failed to load, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, cfg: LoadConfig) -> Result<Self> {
        let mut data = Dataset {
            classes: manifest.classes.clone(),
            ..Dataset::default()
        };
        for e in &manifest.entries {
            let pair = load_pair(manifest, e, cfg).and_then(|(pc, vs)| Ok((pc, vs.to_batch()?)));
            match pair {
                Ok((cloud, views)) => {
                    let shape = Shape {
                        shape_id: e.shape_id.clone(),
                        label: e.class_index,
                        cloud,
                        views,
                    };
                    match e.split {
                        Split::Train => data.train.push(shape),
                        Split::Test => data.test.push(shape),
                    }
                }
                Err(err) => {
                    warn!("skipping {}: {err}", e.shape_id);
                    data.skipped.push((e.shape_id.clone(), err.to_string()));
                }
            }
        }
        if data.train.is_empty() {
            return Err(Error::Dataset("no loadable training shapes".into()));
        }
        Ok(data)
    }

    pub fn from_root(root: &Path, cfg: LoadConfig) -> Result<Self> {
        Dataset::load(&build_manifest(root)?, cfg)
    }

    pub fn split(&self, split: Split) -> &[Shape] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Which forward pass produces the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Point,
    View,
    Fused,
}

impl From<Branch> for Stage {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Point => Stage::Point,
            Branch::View => Stage::View,
        }
    }
}

impl Stage {
    pub fn logits<'t, R: rand::Rng + ?Sized>(
        self,
        model: &Manet,
        tape: &'t Tape,
        store: &ParamStore,
        s: &Sample,
        dropout: Option<Dropout<'_, R>>,
    ) -> Var<'t> {
        match self {
            Stage::Point => model.branch_logits(tape, store, Branch::Point, s, dropout),
            Stage::View => model.branch_logits(tape, store, Branch::View, s, dropout),
            Stage::Fused => model.fused(tape, store, s, dropout).logits,
        }
    }
}

/// Parameters that receive gradients during an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Branch(Branch),
    FusionOnly,
    Fused,
}

impl Scope {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Scope::Branch(b) => Manet::is_branch_param(b, name),
            Scope::FusionOnly => Manet::is_fusion_param(name),
            Scope::Fused => Manet::is_fused_param(name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub branches_frozen: bool,
    pub lr_base: f64,
    pub lr_fusion: f64,
    pub first_batch_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Loss on a fixed evaluation batch, evaluation mode.
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub epoch: usize,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub history: Vec<EpochRecord>,
}

/// Parameters, optimizer state and run metadata. On disk a directory with
/// `manifest.json`, `params.bin` and `optimizer.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub velocity: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join("manifest.json");
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))?;
        self.params.save(&dir.join("params.bin"))?;
        self.velocity.save(&dir.join("optimizer.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("manifest.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path,
            message: e.to_string(),
        })?;
        Ok(Checkpoint {
            meta,
            params: ParamStore::load(&dir.join("params.bin"))?,
            velocity: ParamStore::load(&dir.join("optimizer.bin"))?,
        })
    }

    pub fn model(&self) -> Result<Manet> {
        let model = Manet::new(self.meta.model.clone())?;
        let expected = model.init(0).subset(stage_filter(self.meta.stage));
        let diff = self.params.shape_diff(&expected);
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff.join("; ")));
        }
        Ok(model)
    }
}

fn stage_filter(stage: Stage) -> impl Fn(&str) -> bool {
    move |n: &str| match stage {
        Stage::Point => Manet::is_branch_param(Branch::Point, n),
        Stage::View => Manet::is_branch_param(Branch::View, n),
        Stage::Fused => Manet::is_fused_param(n),
    }
}

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_SAMPLE: u64 = 0x5341_4d50;

/// Independent stream for `(seed, tag, epoch, index)`, so any epoch can be
/// replayed without running the ones before it.
pub fn stream_rng(seed: u64, tag: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(32));
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

struct EpochStats {
    first_batch_loss: f64,
    loss: f64,
    accuracy: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &Manet,
    store: &mut ParamStore,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    stage: Stage,
    scope: Scope,
    lr: &dyn Fn(&str) -> f64,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, TAG_SHUFFLE, epoch, 0));
    let rate = model.cfg.fusion.dropout;
    let mut total_loss = 0.0;
    let mut correct = 0;
    let mut first_batch_loss = f64::NAN;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for (pos, &idx) in batch.iter().enumerate() {
            let shape = &data.train[idx];
            let mut rng = stream_rng(cfg.seed, TAG_SAMPLE, epoch, b * cfg.batch_size + pos);
            let cloud = augment(&shape.cloud, &cfg.augment, &mut rng);
            let sample = Sample::from_parts(&cloud, shape.views.clone(), model.cfg.point.k)?;
            let tape = Tape::with_trainable(move |n| scope.contains(n));
            let logits = stage.logits(model, &tape, store, &sample, Some(Dropout { rate, rng: &mut rng }));
            if crate::fusion::predict_class(logits.value().data()) == shape.label {
                correct += 1;
            }
            let loss = logits.cross_entropy(&[shape.label]);
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            batch_loss += value;
            let grads = tape.backward(loss.scale(1.0 / batch.len() as f64));
            for (name, g) in grads.params() {
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        if b == 0 {
            first_batch_loss = batch_loss / batch.len() as f64;
        }
        total_loss += batch_loss;
        opt.step(store, &acc, lr);
    }
    let n = data.train.len() as f64;
    Ok(EpochStats {
        first_batch_loss,
        loss: total_loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Mean evaluation-mode loss on the first `batch_size` test shapes (training
/// shapes when there is no test split).
fn eval_batch_loss(
    model: &Manet,
    store: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
) -> Result<f64> {
    let pool = if data.test.is_empty() { &data.train } else { &data.test };
    let batch = &pool[..cfg.batch_size.min(pool.len())];
    let mut total = 0.0;
    for shape in batch {
        let sample = shape.sample(model.cfg.point.k)?;
        let tape = Tape::inference();
        let loss = stage
            .logits::<ChaCha8Rng>(model, &tape, store, &sample, None)
            .cross_entropy(&[shape.label]);
        total += loss.value().data()[0];
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Divergence {
            epoch,
            batch: 0,
            loss: mean,
        });
    }
    Ok(mean)
}

/// Trains one branch with its temporary classifier. Continues from `resume`
/// when given, up to `cfg.pretrain_epochs`.
pub fn pretrain_branch(
    cfg: &TrainConfig,
    data: &Dataset,
    branch: Branch,
    resume: Option<Checkpoint>,
) -> Result<Checkpoint> {
    let model_cfg = cfg.model_config(data.classes.len())?;
    let model = Manet::new(model_cfg.clone())?;
    let stage = Stage::from(branch);
    let fresh = model.init(cfg.seed).subset(stage_filter(stage));
    let (mut store, mut opt, mut history, start) = match resume {
        Some(ck) => {
            if ck.meta.stage != stage || ck.meta.model != model_cfg {
                return Err(Error::CheckpointMismatch(format!(
                    "resuming a {:?} checkpoint as {branch} pretraining with a different architecture",
                    ck.meta.stage
                )));
            }
            let diff = ck.params.shape_diff(&fresh);
            if !diff.is_empty() {
                return Err(Error::CheckpointMismatch(diff.join("; ")));
            }
            let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
            opt.velocity = ck.velocity;
            (ck.params, opt, ck.meta.history, ck.meta.epoch)
        }
        None => (fresh, Sgd::new(cfg.momentum, cfg.weight_decay), Vec::new(), 0),
    };
    for epoch in start + 1..=cfg.pretrain_epochs {
        let lr = cfg.lr_step.lr_at(cfg.pretrain_lr, epoch);
        let stats = train_epoch(
            &model,
            &mut store,
            &mut opt,
            data,
            cfg,
            epoch,
            stage,
            Scope::Branch(branch),
            &|_| lr,
        )?;
        let eval_loss = eval_batch_loss(&model, &store, data, cfg, stage, epoch)?;
        info!(
            "pretrain {branch} epoch {epoch}: loss {:.4} acc {:.3} eval loss {eval_loss:.4}",
            stats.loss, stats.accuracy
        );
        history.push(EpochRecord {
            epoch,
            stage,
            branches_frozen: false,
            lr_base: lr,
            lr_fusion: 0.0,
            first_batch_loss: stats.first_batch_loss,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy,
            eval_loss,
        });
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            stage,
            epoch: cfg.pretrain_epochs.max(start),
            config: cfg.clone(),
            model: model_cfg,
            classes: data.classes.clone(),
            history,
        },
        params: store,
        velocity: opt.velocity,
    })
}

fn first_difference(a: &ParamStore, b: &ParamStore) -> Option<String> {
    a.iter()
        .find(|(name, t)| b.get(name) != Some(*t))
        .map(|(name, _)| name.to_string())
}

/// Fused training from two pretrained branches. Branch tensors stay frozen
/// for the first `freeze_epochs` epochs; the contract is checked after every
/// epoch. `observer` sees each epoch's record and parameters.
pub fn train_fused(
    cfg: &TrainConfig,
    data: &Dataset,
    point: &Checkpoint,
    view: &Checkpoint,
    mut observer: Option<&mut dyn FnMut(&EpochRecord, &ParamStore)>,
) -> Result<Checkpoint> {
    let model_cfg = cfg.model_config(data.classes.len())?;
    let model = Manet::new(model_cfg.clone())?;
    let mut store = model.init(cfg.seed).subset(Manet::is_fused_param);
    for (ck, prefix) in [(point, "point."), (view, "view.")] {
        let expected = store.subset(|n| n.starts_with(prefix));
        let diff = ck.params.subset(|n| n.starts_with(prefix)).shape_diff(&expected);
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff.join("; ")));
        }
        store.absorb_prefix(&ck.params, prefix);
    }
    let is_branch = |n: &str| !Manet::is_fusion_param(n);
    let pretrained = store.subset(is_branch);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let frozen = epoch <= cfg.freeze_epochs;
        let scope = if frozen { Scope::FusionOnly } else { Scope::Fused };
        let lr_fusion = cfg.lr_step.lr_at(cfg.lr_fusion, epoch);
        let lr_base = cfg.lr_step.lr_at(cfg.lr_base, epoch);
        let lr = move |n: &str| if Manet::is_fusion_param(n) { lr_fusion } else { lr_base };
        let stats = train_epoch(&model, &mut store, &mut opt, data, cfg, epoch, Stage::Fused, scope, &lr)?;
        let changed = first_difference(&pretrained, &store.subset(is_branch));
        if frozen {
            if let Some(name) = changed {
                return Err(Error::Contract(format!(
                    "branch tensor `{name}` changed in frozen epoch {epoch}"
                )));
            }
        } else if epoch == cfg.freeze_epochs + 1 && changed.is_none() {
            return Err(Error::Contract(format!(
                "no branch tensor changed in epoch {epoch} after unfreezing"
            )));
        }
        let eval_loss = eval_batch_loss(&model, &store, data, cfg, Stage::Fused, epoch)?;
        info!(
            "fused epoch {epoch}{}: loss {:.4} acc {:.3} eval loss {eval_loss:.4}",
            if frozen { " (branches frozen)" } else { "" },
            stats.loss,
            stats.accuracy
        );
        let record = EpochRecord {
            epoch,
            stage: Stage::Fused,
            branches_frozen: frozen,
            lr_base,
            lr_fusion,
            first_batch_loss: stats.first_batch_loss,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy,
            eval_loss,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&record, &store);
        }
        history.push(record);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            stage: Stage::Fused,
            epoch: cfg.epochs,
            config: cfg.clone(),
            model: model_cfg,
            classes: data.classes.clone(),
            history,
        },
        params: store,
        velocity: opt.velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::multiview::ViewBranchConfig;

    #[test]
    fn step_schedule() {
        let s = LrStep::default();
        assert_eq!(s.lr_at(0.01, 1), 0.01);
        assert_eq!(s.lr_at(0.01, 20), 0.01);
        assert_eq!(s.lr_at(0.01, 21), s.lr_at(0.01, 20) * 0.5);
        assert_eq!(s.lr_at(0.01, 41), 0.0025);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.k, c.views, c.batch_size, c.freeze_epochs), (20, 12, 20, 10));
        assert_eq!((c.momentum, c.lr_fusion, c.lr_base), (0.9, 0.01, 0.001));
        c.validate().unwrap();
        let bad = TrainConfig {
            freeze_epochs: 70,
            ..c.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let parsed: TrainConfig = serde_json::from_str(r#"{"k": 16, "mask_mode": "sigmoid"}"#).unwrap();
        assert_eq!(parsed.k, 16);
        assert_eq!(parsed.model_config(40).unwrap().fusion.mask_mode, MaskMode::Sigmoid);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"kk": 1}"#).is_err());
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(&[2], vec![1.0, -2.0]));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(&[2], vec![0.5, 0.25]));
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut store, &grads, |_| 0.1);
        // v = g + λθ; θ -= η v
        let v0 = [0.5 + 0.1, 0.25 - 0.2];
        let p1 = [1.0 - 0.1 * v0[0], -2.0 - 0.1 * v0[1]];
        for i in 0..2 {
            assert!((store.get("a").unwrap().data()[i] - p1[i]).abs() < 1e-6);
        }
        opt.step(&mut store, &grads, |_| 0.1);
        let v1 = [0.9 * v0[0] + 0.5 + 0.1 * p1[0], 0.9 * v0[1] + 0.25 + 0.1 * p1[1]];
        for i in 0..2 {
            let want = p1[i] - 0.1 * v1[i];
            assert!((store.get("a").unwrap().data()[i] - want).abs() < 1e-6);
        }
    }

    fn micro_setup() -> (TrainConfig, Dataset, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = SyntheticConfig::new(2, 5);
        sc.num_points = 48;
        sc.image_size = 8;
        sc.render_points = 600;
        generate_synthetic(dir.path(), &sc, 1).unwrap();
        let mut model = ModelConfig::desk(2);
        model.point.num_points = 48;
        model.view = ViewBranchConfig {
            views: 12,
            ..ViewBranchConfig::thin()
        };
        model.fusion.view_dim = model.view.feature_dim;
        let cfg = TrainConfig {
            k: 6,
            batch_size: 3,
            epochs: 3,
            pretrain_epochs: 2,
            freeze_epochs: 2,
            model: Some(model.clone()),
            ..TrainConfig::desk()
        };
        let m = cfg.model_config(2).unwrap();
        let data = Dataset::from_root(dir.path(), cfg.load_config(&m)).unwrap();
        (cfg, data, dir)
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (cfg, data, dir) = micro_setup();
        let ck = pretrain_branch(&cfg, &data, Branch::Point, None).unwrap();
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let path2 = dir.path().join("ck2");
        loaded.save(&path2).unwrap();
        for f in ["manifest.json", "params.bin", "optimizer.bin"] {
            assert_eq!(fs::read(path.join(f)).unwrap(), fs::read(path2.join(f)).unwrap());
        }

        let longer = TrainConfig {
            pretrain_epochs: 3,
            ..cfg.clone()
        };
        let straight = pretrain_branch(&longer, &data, Branch::Point, None).unwrap();
        let resumed = pretrain_branch(&longer, &data, Branch::Point, Some(loaded)).unwrap();
        assert_eq!(
            resumed.meta.history[2].first_batch_loss,
            straight.meta.history[2].first_batch_loss
        );
        assert_eq!(resumed.params, straight.params);
    }

    #[test]
    fn fused_training_respects_freeze_and_rejects_mismatch() {
        let (cfg, data, _dir) = micro_setup();
        let p = pretrain_branch(&cfg, &data, Branch::Point, None).unwrap();
        let v = pretrain_branch(&cfg, &data, Branch::View, None).unwrap();
        let mut frozen_flags = Vec::new();
        let mut obs = |r: &EpochRecord, _: &ParamStore| frozen_flags.push(r.branches_frozen);
        let fused = train_fused(&cfg, &data, &p, &v, Some(&mut obs)).unwrap();
        assert_eq!(frozen_flags, vec![true, true, false]);
        assert_eq!(fused.meta.history.len(), 3);

        let mut broken = p.clone();
        let name = broken
            .params
            .names()
            .find(|n| n.starts_with("point."))
            .unwrap()
            .to_string();
        broken.params.insert(name, Tensor::zeros(&[1]));
        assert!(matches!(
            train_fused(&cfg, &data, &broken, &v, None),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn nan_loss_aborts() {
        let (cfg, data, _dir) = micro_setup();
        let huge = TrainConfig {
            pretrain_lr: 1e30,
            pretrain_epochs: 4,
            ..cfg
        };
        match pretrain_branch(&huge, &data, Branch::View, None) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|c| c.meta.history)),
        }
    }
}
