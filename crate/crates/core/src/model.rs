//! Whole-network assembly: both branches, their standalone pretraining heads
//! and the fused classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{Classifier, Dropout, FusionBlock, FusionConfig, MaskMode};
use crate::gap::{GraphIndex, PointBackbone, PointBranchConfig};
use crate::multiview::{ViewBranchConfig, ViewCnn, ViewSet};
use crate::params::ParamStore;
use crate::pointcloud::{build_knn_graph, PointCloud};
use crate::tensor::Tensor;

/// Which single branch a pretraining run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Point,
    View,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Point => "point",
            Branch::View => "view",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "point" => Ok(Branch::Point),
            "view" => Ok(Branch::View),
            other => Err(format!("unknown branch `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub point: PointBranchConfig,
    pub view: ViewBranchConfig,
    pub fusion: FusionConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            point: PointBranchConfig::full(),
            view: ViewBranchConfig::full(),
            fusion: FusionConfig::full(),
            num_classes: 40,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            point: PointBranchConfig::desk(),
            view: ViewBranchConfig::desk(),
            fusion: FusionConfig::desk(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        if self.fusion.point_dim != self.point.global_dim {
            return Err(Error::Parameter(format!(
                "fusion expects point features of width {}, branch produces {}",
                self.fusion.point_dim, self.point.global_dim
            )));
        }
        if self.fusion.view_dim != self.view.feature_dim {
            return Err(Error::Parameter(format!(
                "fusion expects view features of width {}, branch produces {}",
                self.fusion.view_dim, self.view.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.fusion.dropout) {
            return Err(Error::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.fusion.dropout
            )));
        }
        Ok(())
    }
}

/// One shape ready for the network: coordinates, their neighbour table and
/// the stacked views.
#[derive(Clone, Debug)]
pub struct Sample {
    pub shape_id: String,
    pub label: usize,
    pub points: Tensor,
    pub graph: GraphIndex,
    pub views: Tensor,
}

impl Sample {
    pub fn new(pc: &PointCloud, views: &ViewSet, k: usize) -> Result<Self> {
        if pc.label != views.label {
            return Err(Error::Consistency(format!(
                "{}: point label {} vs view label {}",
                pc.shape_id, pc.label, views.label
            )));
        }
        Sample::from_parts(pc, views.to_batch()?, k)
    }

    /// Like [`Sample::new`] with the views already stacked as `m × 3 × H × W`.
    pub fn from_parts(pc: &PointCloud, views: Tensor, k: usize) -> Result<Self> {
        let graph = build_knn_graph(pc, k)?;
        Ok(Sample {
            shape_id: pc.shape_id.clone(),
            label: pc.label,
            points: pc.to_tensor(),
            graph: GraphIndex::from(&graph),
            views,
        })
    }
}

pub struct FusedForward<'t> {
    pub logits: Var<'t>,
    pub mask_logits: Var<'t>,
    pub weights: Var<'t>,
    pub descriptor: Var<'t>,
}

/// Parameter prefixes: `point.`, `view.`, `fusion.`, `head.`, and the
/// pretraining heads `pretrain.point.` / `pretrain.view.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manet {
    pub cfg: ModelConfig,
    pub point: PointBackbone,
    pub view: ViewCnn,
    pub fusion: FusionBlock,
    pub head: Classifier,
    pub point_head: Classifier,
    pub view_head: Classifier,
}

impl Manet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let point = PointBackbone::new("point", cfg.point.clone())?;
        let view = ViewCnn::new("view", cfg.view.clone())?;
        let fusion = FusionBlock::new("fusion", &cfg.fusion);
        let widths = &cfg.fusion.classifier;
        let head = Classifier::new("head", cfg.fusion.descriptor_dim(), widths, cfg.num_classes);
        let point_head = Classifier::new("pretrain.point", cfg.point.global_dim, widths, cfg.num_classes);
        let view_head = Classifier::new("pretrain.view", cfg.view.feature_dim, widths, cfg.num_classes);
        Ok(Manet {
            cfg,
            point,
            view,
            fusion,
            head,
            point_head,
            view_head,
        })
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.fusion.mode
    }

    /// Every parameter, initialized from `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.point.init(&mut store, &mut rng);
        self.view.init(&mut store, &mut rng);
        self.fusion.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        self.point_head.init(&mut store, &mut rng);
        self.view_head.init(&mut store, &mut rng);
        store.round_to_f32();
        store
    }

    /// Parameters updated at the fusion learning rate.
    pub fn is_fusion_param(name: &str) -> bool {
        name.starts_with("fusion.") || name.starts_with("head.")
    }

    /// Parameters belonging to one branch, including its pretraining head.
    pub fn is_branch_param(branch: Branch, name: &str) -> bool {
        let b = branch.as_str();
        name.strip_prefix(b).is_some_and(|r| r.starts_with('.'))
            || name
                .strip_prefix("pretrain.")
                .and_then(|r| r.strip_prefix(b))
                .is_some_and(|r| r.starts_with('.'))
    }

    /// Parameters used by the fused forward pass.
    pub fn is_fused_param(name: &str) -> bool {
        !name.starts_with("pretrain.")
    }

    pub fn point_global<'t>(&self, tape: &'t Tape, store: &ParamStore, s: &Sample) -> Var<'t> {
        self.point
            .forward(tape, store, tape.constant(s.points.clone()), &s.graph)
            .global
    }

    pub fn view_features<'t>(&self, tape: &'t Tape, store: &ParamStore, s: &Sample) -> Var<'t> {
        self.view.forward(tape, store, tape.constant(s.views.clone()))
    }

    /// Logits of one branch through its pretraining head. The view branch
    /// is view-pooled before the head.
    pub fn branch_logits<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        branch: Branch,
        s: &Sample,
        dropout: Option<Dropout<'_, R>>,
    ) -> Var<'t> {
        match branch {
            Branch::Point => {
                let g = self.point_global(tape, store, s);
                self.point_head.forward(tape, store, g, dropout)
            }
            Branch::View => {
                let v = self.view_features(tape, store, s).max_rows();
                self.view_head.forward(tape, store, v, dropout)
            }
        }
    }

    pub fn fused<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        s: &Sample,
        dropout: Option<Dropout<'_, R>>,
    ) -> FusedForward<'t> {
        let point = self.point_global(tape, store, s);
        let views = self.view_features(tape, store, s);
        let f = self.fusion.forward(tape, store, point, views);
        let descriptor = self.fusion.descriptor(tape, store, point, f.enhanced);
        let logits = self.head.forward(tape, store, descriptor, dropout);
        FusedForward {
            logits,
            mask_logits: f.logits,
            weights: f.weights,
            descriptor,
        }
    }
}
