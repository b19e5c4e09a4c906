//! Point-guided soft attention over views and the fused classifier.
//!
//! The global point feature is projected into view-feature space and
//! broadcast to every view. A shared two-layer scorer turns each
//! `[p_i ‖ v_i]` pair into a logit, the logits are normalized into the mask
//! `w_1 … w_m`, and every view row is enhanced residually as `v_i · (1 + w_i)`.
//! The enhanced rows are max-pooled, reduced, concatenated after the point
//! feature and classified.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::gap::PointGlobalFeature;
use crate::layers::{Linear, Mlp};
use crate::multiview::ViewFeatureSet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Normalization applied to the per-view logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Weights sum to one across views.
    #[default]
    Softmax,
    /// Each weight independently in `(0, 1)`.
    Sigmoid,
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Softmax => "softmax",
            MaskMode::Sigmoid => "sigmoid",
        })
    }
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(MaskMode::Softmax),
            "sigmoid" => Ok(MaskMode::Sigmoid),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub point_dim: usize,
    pub view_dim: usize,
    pub scorer_hidden: usize,
    pub reduced_dim: usize,
    pub classifier: Vec<usize>,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub projection_activation: Activation,
}

impl FusionConfig {
    pub fn full() -> Self {
        FusionConfig {
            point_dim: 1024,
            view_dim: 1024,
            scorer_hidden: 256,
            reduced_dim: 512,
            classifier: vec![512, 256],
            dropout: 0.5,
            mask_mode: MaskMode::Softmax,
            projection_activation: Activation::Relu,
        }
    }

    pub fn desk() -> Self {
        FusionConfig {
            point_dim: 128,
            view_dim: 128,
            scorer_hidden: 32,
            reduced_dim: 64,
            classifier: vec![64, 32],
            dropout: 0.2,
            mask_mode: MaskMode::Softmax,
            projection_activation: Activation::Relu,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.point_dim + self.reduced_dim
    }
}

/// Projection, scorer and residual reweighting. Parameters under
/// `{prefix}.project` and `{prefix}.score.{0,1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub projection: Linear,
    pub scorer: [Linear; 2],
    pub reducer: Linear,
    pub mode: MaskMode,
    pub projection_activation: Activation,
}

/// `m` copies of the projected point feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPointFeatures {
    pub rows: Tensor,
}

/// Per-view logits and their normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMask {
    pub mode: MaskMode,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `[point ‖ reduced visual]` descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDescriptor {
    pub vector: Vec<f64>,
    pub point_dim: usize,
    pub visual_dim: usize,
}

impl ShapeDescriptor {
    pub fn point_part(&self) -> &[f64] {
        &self.vector[..self.point_dim]
    }

    pub fn visual_part(&self) -> &[f64] {
        &self.vector[self.point_dim..]
    }
}

pub struct FusionForward<'t> {
    pub logits: Var<'t>,
    pub weights: Var<'t>,
    pub enhanced: Var<'t>,
}

impl FusionBlock {
    pub fn new(prefix: &str, cfg: &FusionConfig) -> Self {
        FusionBlock {
            projection: Linear::new(format!("{prefix}.project"), cfg.point_dim, cfg.view_dim),
            scorer: [
                Linear::new(format!("{prefix}.score.0"), 2 * cfg.view_dim, cfg.scorer_hidden),
                Linear::new(format!("{prefix}.score.1"), cfg.scorer_hidden, 1),
            ],
            reducer: Linear::new(format!("{prefix}.reduce"), cfg.view_dim, cfg.reduced_dim),
            mode: cfg.mask_mode,
            projection_activation: cfg.projection_activation,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.projection.init(store, rng);
        self.scorer.iter().for_each(|l| l.init(store, rng));
        self.reducer.init(store, rng);
    }

    /// `1 × D_p → m × D_v`.
    pub fn project<'t>(&self, tape: &'t Tape, store: &ParamStore, point: Var<'t>, m: usize) -> Var<'t> {
        let p = self.projection.forward(tape, store, point);
        let p = match self.projection_activation {
            Activation::Relu => p.relu(),
            Activation::Identity => p,
        };
        p.repeat_rows(m)
    }

    /// `m × 1` logits from `[p_i ‖ v_i]`.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, projected: Var<'t>, views: Var<'t>) -> Var<'t> {
        let pv = Var::concat_cols(&[projected, views]);
        let h = self.scorer[0].forward(tape, store, pv).relu();
        self.scorer[1].forward(tape, store, h)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, point: Var<'t>, views: Var<'t>) -> FusionForward<'t> {
        let m = views.shape()[0];
        let projected = self.project(tape, store, point, m);
        let logits = self.logits(tape, store, projected, views);
        let weights = normalize_var(logits, self.mode);
        let enhanced = views.mul_col(weights.add_scalar(1.0));
        FusionForward {
            logits,
            weights,
            enhanced,
        }
    }

    /// View-pools the enhanced rows, reduces them and appends them after the
    /// point feature: `1 × (D_p + D_v′)`.
    pub fn descriptor<'t>(&self, tape: &'t Tape, store: &ParamStore, point: Var<'t>, enhanced: Var<'t>) -> Var<'t> {
        let visual = self.reducer.forward(tape, store, enhanced.max_rows()).relu();
        Var::concat_cols(&[point, visual])
    }
}

fn normalize_var(logits: Var<'_>, mode: MaskMode) -> Var<'_> {
    match mode {
        MaskMode::Softmax => {
            let m = logits.shape()[0];
            logits.reshape(&[1, m]).softmax_rows().reshape(&[m, 1])
        }
        MaskMode::Sigmoid => logits.sigmoid(),
    }
}

/// Training-time dropout settings for [`Classifier::forward`].
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

/// MLP head `D → hidden… → classes`. Parameters under `{prefix}.mlp.*` and
/// `{prefix}.out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub hidden: Mlp,
    pub out: Linear,
}

impl Classifier {
    pub fn new(prefix: &str, in_dim: usize, widths: &[usize], classes: usize) -> Self {
        let hidden = Mlp::new(&format!("{prefix}.mlp"), in_dim, widths);
        let out = Linear::new(format!("{prefix}.out"), hidden.out_dim().unwrap_or(in_dim), classes);
        Classifier { hidden, out }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    /// Inverted dropout after each hidden layer when `dropout` is given;
    /// deterministic otherwise.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Var<'t> {
        let mut h = x;
        for layer in &self.hidden.layers {
            h = layer.forward(tape, store, h).relu();
            if let Some(d) = dropout.as_mut() {
                let shape = h.shape();
                let keep = 1.0 - d.rate;
                let len: usize = shape.iter().product();
                let mask = (0..len)
                    .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = h.mul_const(Tensor::new(&shape, mask));
            }
        }
        self.out.forward(tape, store, h)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn single_row(v: &[f64]) -> Tensor {
    Tensor::new(&[1, v.len()], v.to_vec())
}

/// Maps the point feature into view space and broadcasts it to `m` rows.
pub fn project_point_feature(
    p: &PointGlobalFeature,
    block: &FusionBlock,
    store: &ParamStore,
    m: usize,
) -> Result<ProjectedPointFeatures> {
    if p.vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("point global feature".into()));
    }
    if p.vector.len() != block.projection.in_dim {
        return Err(Error::Shape(format!(
            "point feature has {} entries, projection expects {}",
            p.vector.len(),
            block.projection.in_dim
        )));
    }
    let tape = Tape::inference();
    let rows = block.project(&tape, store, tape.constant(single_row(&p.vector)), m);
    Ok(ProjectedPointFeatures {
        rows: rows.value().as_ref().clone(),
    })
}

/// One logit per view from the shared scorer.
pub fn fusion_logits(
    projected: &ProjectedPointFeatures,
    views: &ViewFeatureSet,
    block: &FusionBlock,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    if projected.rows.shape() != views.features.shape() {
        return Err(Error::Shape(format!(
            "projected {:?} vs views {:?}",
            projected.rows.shape(),
            views.features.shape()
        )));
    }
    let tape = Tape::inference();
    let l = block.logits(
        &tape,
        store,
        tape.constant(projected.rows.clone()),
        tape.constant(views.features.clone()),
    );
    Ok(l.value().data().to_vec())
}

/// Normalizes logits into view weights.
pub fn view_attention_weights(logits: &[f64], mode: MaskMode) -> Result<FusionMask> {
    if logits.is_empty() {
        return Err(Error::Shape("no view logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("view logits".into()));
    }
    let weights = match mode {
        MaskMode::Softmax => {
            let mut w = logits.to_vec();
            softmax_in_place(&mut w);
            w
        }
        MaskMode::Sigmoid => logits.iter().map(|&l| crate::autograd::sigmoid(l)).collect(),
    };
    Ok(FusionMask {
        mode,
        logits: logits.to_vec(),
        weights,
    })
}

/// Residual reweighting: row `i` becomes `v_i · (1 + w_i)`.
pub fn enhance_views(views: &ViewFeatureSet, mask: &FusionMask) -> Result<ViewFeatureSet> {
    if mask.weights.len() != views.num_views() {
        return Err(Error::Shape(format!(
            "{} weights for {} views",
            mask.weights.len(),
            views.num_views()
        )));
    }
    let tape = Tape::inference();
    let w = tape.constant(Tensor::new(&[mask.weights.len(), 1], mask.weights.clone()));
    let out = tape.constant(views.features.clone()).mul_col(w.add_scalar(1.0));
    Ok(ViewFeatureSet {
        features: out.value().as_ref().clone(),
    })
}

/// Elementwise max over views.
pub fn view_pool(views: &ViewFeatureSet) -> Result<Vec<f64>> {
    if views.num_views() == 0 {
        return Err(Error::Shape("view pooling needs at least one view".into()));
    }
    let tape = Tape::inference();
    Ok(tape.constant(views.features.clone()).max_rows().value().data().to_vec())
}

/// Reduces the pooled visual vector and appends it after the point feature.
pub fn fuse_descriptors(
    point: &PointGlobalFeature,
    visual_pooled: &[f64],
    block: &FusionBlock,
    store: &ParamStore,
) -> Result<ShapeDescriptor> {
    if point.vector.iter().chain(visual_pooled).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("descriptor inputs".into()));
    }
    if visual_pooled.len() != block.reducer.in_dim {
        return Err(Error::Shape(format!(
            "visual vector has {} entries, reducer expects {}",
            visual_pooled.len(),
            block.reducer.in_dim
        )));
    }
    let tape = Tape::inference();
    let visual = block
        .reducer
        .forward(&tape, store, tape.constant(single_row(visual_pooled)))
        .relu();
    let d = Var::concat_cols(&[tape.constant(single_row(&point.vector)), visual]);
    Ok(ShapeDescriptor {
        vector: d.value().data().to_vec(),
        point_dim: point.vector.len(),
        visual_dim: block.reducer.out_dim,
    })
}

/// Class logits for a descriptor; dropout only when `dropout` is given.
pub fn classify<R: Rng + ?Sized>(
    d: &ShapeDescriptor,
    head: &Classifier,
    store: &ParamStore,
    dropout: Option<Dropout<'_, R>>,
) -> Result<Vec<f64>> {
    let in_dim = head.hidden.layers.first().map_or(head.out.in_dim, |l| l.in_dim);
    if d.vector.len() != in_dim {
        return Err(Error::Shape(format!(
            "descriptor has {} entries, classifier expects {in_dim}",
            d.vector.len()
        )));
    }
    let tape = Tape::inference();
    let out = head.forward(&tape, store, tape.constant(single_row(&d.vector)), dropout);
    Ok(out.value().data().to_vec())
}
