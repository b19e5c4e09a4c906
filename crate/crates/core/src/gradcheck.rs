//! Central finite-difference verification of analytic gradients on small
//! instances of each module.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{Activation, Classifier, FusionBlock, FusionConfig, MaskMode};
use crate::gap::{
    vnam_channel_var, vnam_neighbor_var, GapLayer, GapLayerConfig, GraphIndex, SpatialTransform,
    SpatialTransformConfig, VnamConfig,
};
use crate::multiview::{ViewBranchConfig, ViewCnn};
use crate::params::ParamStore;
use crate::pointcloud::{build_knn_graph, PointCloud};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradModule {
    Gap,
    VnamChannel,
    VnamNeighbor,
    SpatialTransform,
    ViewCnn,
    Fusion,
    Classifier,
    /// All-zero fusion block under a loss that does not depend on it.
    Zero,
}

impl GradModule {
    pub const ALL: [GradModule; 8] = [
        GradModule::Gap,
        GradModule::VnamChannel,
        GradModule::VnamNeighbor,
        GradModule::SpatialTransform,
        GradModule::ViewCnn,
        GradModule::Fusion,
        GradModule::Classifier,
        GradModule::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Gap => "gap",
            GradModule::VnamChannel => "vnam-channel",
            GradModule::VnamNeighbor => "vnam-neighbor",
            GradModule::SpatialTransform => "spatial-transform",
            GradModule::ViewCnn => "view-cnn",
            GradModule::Fusion => "fusion",
            GradModule::Classifier => "classifier",
            GradModule::Zero => "zero",
        }
    }
}

impl std::str::FromStr for GradModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown module `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub max_abs_error: f64,
    /// `max_abs_error / max(max_abs_analytic, max_abs_numeric, SCALE_FLOOR)`.
    pub rel_error: f64,
    /// Elements where the loss is not differentiable within `±STEP`; these
    /// are compared against the nearer one-sided difference.
    pub kinks: usize,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: GradModule,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| !(t.rel_error <= self.tolerance))
            .map(|t| t.name.clone())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }
}

type LossFn = Box<dyn for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>>;

struct Problem {
    store: ParamStore,
    loss: LossFn,
}

fn weights_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Adds small noise to every tensor so no bias sits exactly at zero.
fn perturb<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    for (_, t) in store.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.1, rng);
        t.add_assign(&noise);
    }
}

fn random_cloud<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}

fn micro_fusion() -> FusionConfig {
    FusionConfig {
        point_dim: 8,
        view_dim: 8,
        scorer_hidden: 6,
        reduced_dim: 5,
        classifier: vec![6],
        dropout: 0.0,
        mask_mode: MaskMode::Softmax,
        projection_activation: Activation::Relu,
    }
}

fn build(module: GradModule, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let loss: LossFn = match module {
        GradModule::Gap => {
            let layer = GapLayer::new(
                "gap",
                GapLayerConfig {
                    vnam: Some(VnamConfig::default()),
                    ..GapLayerConfig::new(3, 2, 8)
                },
            )?;
            layer.init(&mut store, &mut rng);
            let pc = random_cloud(16, &mut rng);
            let graph = GraphIndex::from(&build_knn_graph(&pc, 4)?);
            let x = pc.to_tensor();
            let out_dim = layer.cfg.out_dim();
            let wa = weights_like(&[16, out_dim], &mut rng);
            let wg = weights_like(&[16 * 4, out_dim], &mut rng);
            Box::new(move |tape, store| {
                let f = layer.forward(tape, store, tape.constant(x.clone()), &graph);
                f.attention
                    .dot_const(wa.clone())
                    .add(f.graph_features.dot_const(wg.clone()))
            })
        }
        GradModule::VnamChannel | GradModule::VnamNeighbor => {
            let (rows, c) = (16 * 4, 8);
            store.insert("vnam.w1", Tensor::randn(&[c, c / 4], 0.5, &mut rng));
            store.insert("vnam.w2", Tensor::randn(&[c / 4, c], 0.5, &mut rng));
            store.insert("vnam.mixer", Tensor::randn(&[2, 1], 0.5, &mut rng));
            let z = Tensor::randn(&[rows, c], 1.0, &mut rng);
            let w = weights_like(&[rows, c], &mut rng);
            let channel = module == GradModule::VnamChannel;
            Box::new(move |tape, store| {
                let z = tape.constant(z.clone());
                let out = if channel {
                    vnam_channel_var(z, tape.param(store, "vnam.w1"), tape.param(store, "vnam.w2")).0
                } else {
                    vnam_neighbor_var(z, tape.param(store, "vnam.mixer")).0
                };
                out.dot_const(w.clone())
            })
        }
        GradModule::SpatialTransform => {
            let cfg = SpatialTransformConfig {
                heads: 1,
                channels: 8,
                mlp: vec![8, 8],
                fc: vec![8],
            };
            let stn = SpatialTransform::new("stn", &cfg, Some(VnamConfig::default()), 0.2)?;
            stn.init(&mut store, &mut rng);
            let pc = random_cloud(16, &mut rng);
            let graph = GraphIndex::from(&build_knn_graph(&pc, 4)?);
            let x = pc.to_tensor();
            let wt = weights_like(&[3, 3], &mut rng);
            let wx = weights_like(&[16, 3], &mut rng);
            Box::new(move |tape, store| {
                let (t, moved) = stn.forward(tape, store, tape.constant(x.clone()), &graph);
                t.dot_const(wt.clone()).add(moved.dot_const(wx.clone()))
            })
        }
        GradModule::ViewCnn => {
            let cnn = ViewCnn::new("view", ViewBranchConfig::thin())?;
            cnn.init(&mut store, &mut rng);
            let s = cnn.cfg.image_size;
            let images = Tensor::uniform(&[cnn.cfg.views, 3, s, s], 0.0, 1.0, &mut rng);
            let w = weights_like(&[cnn.cfg.views, cnn.cfg.feature_dim], &mut rng);
            Box::new(move |tape, store| {
                cnn.forward(tape, store, tape.constant(images.clone()))
                    .dot_const(w.clone())
            })
        }
        GradModule::Fusion => {
            let cfg = micro_fusion();
            let soft = FusionBlock::new("fusion", &cfg);
            let sig = FusionBlock {
                mode: MaskMode::Sigmoid,
                ..soft.clone()
            };
            soft.init(&mut store, &mut rng);
            let point = Tensor::randn(&[1, 8], 1.0, &mut rng);
            let views = Tensor::randn(&[3, 8], 1.0, &mut rng).map(f64::abs);
            let w = weights_like(&[1, cfg.descriptor_dim()], &mut rng);
            Box::new(move |tape, store| {
                let p = tape.constant(point.clone());
                let v = tape.constant(views.clone());
                let a = soft.forward(tape, store, p, v);
                let b = sig.forward(tape, store, p, v);
                soft.descriptor(tape, store, p, a.enhanced)
                    .dot_const(w.clone())
                    .add(sig.descriptor(tape, store, p, b.enhanced).dot_const(w.clone()))
            })
        }
        GradModule::Classifier => {
            let head = Classifier::new("head", 12, &[8, 6], 5);
            head.init(&mut store, &mut rng);
            let x = Tensor::randn(&[1, 12], 1.0, &mut rng);
            let label = rng.random_range(0..5);
            Box::new(move |tape, store| {
                head.forward::<ChaCha8Rng>(tape, store, tape.constant(x.clone()), None)
                    .cross_entropy(&[label])
            })
        }
        GradModule::Zero => {
            let block = FusionBlock::new("fusion", &micro_fusion());
            block.init(&mut store, &mut rng);
            for (_, t) in store.iter_mut() {
                t.data_mut().fill(0.0);
            }
            let point = Tensor::randn(&[1, 8], 1.0, &mut rng);
            let views = Tensor::randn(&[3, 8], 1.0, &mut rng);
            // Softmax weights always sum to one.
            Box::new(move |tape, store| {
                block
                    .forward(tape, store, tape.constant(point.clone()), tape.constant(views.clone()))
                    .weights
                    .sum()
            })
        }
    };
    if module != GradModule::Zero {
        perturb(&mut store, &mut rng);
    }
    Ok(Problem { store, loss })
}

fn evaluate(p: &Problem, store: &ParamStore) -> f64 {
    let tape = Tape::inference();
    (p.loss)(&tape, store).value().data()[0]
}

/// Compares analytic and central-difference gradients for every parameter
/// tensor of `module`.
pub fn check_gradients(module: GradModule, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let p = build(module, seed)?;
    let tape = Tape::new();
    let loss = (p.loss)(&tape, &p.store);
    let analytic: BTreeMap<String, Tensor> = tape.backward(loss).params();
    let base = evaluate(&p, &p.store);
    let mut tensors = Vec::new();
    let mut work = p.store.clone();
    for (name, value) in p.store.iter() {
        let zeros = Tensor::zeros(value.shape());
        let a = analytic.get(name).unwrap_or(&zeros);
        let mut numeric = Vec::with_capacity(value.len());
        let mut one_sided = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig + STEP;
            let up = evaluate(&p, &work);
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig - STEP;
            let down = evaluate(&p, &work);
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
            one_sided.push(((up - base) / STEP, (base - down) / STEP));
        }
        let max_abs_analytic = a.max_abs();
        let max_abs_numeric = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = max_abs_analytic.max(max_abs_numeric).max(SCALE_FLOOR);
        let mut kinks = 0;
        let mut max_abs_error = 0.0f64;
        for ((x, y), (fwd, bwd)) in a.data().iter().zip(&numeric).zip(&one_sided) {
            let central = (x - y).abs();
            // A ReLU or max switch inside ±STEP makes the one-sided slopes
            // disagree; the analytic value must then match one of them.
            let err = if central > tolerance * scale && (fwd - bwd).abs() > 2.0 * tolerance * scale {
                kinks += 1;
                (x - fwd).abs().min((x - bwd).abs())
            } else {
                central
            };
            max_abs_error = max_abs_error.max(err);
        }
        tensors.push(TensorCheck {
            name: name.to_string(),
            max_abs_analytic,
            max_abs_numeric,
            max_abs_error,
            rel_error: max_abs_error / scale,
            kinks,
            elements: value.len(),
        });
    }
    Ok(GradCheckReport {
        module,
        seed,
        tolerance,
        max_rel_error: tensors.iter().fold(0.0f64, |m, t| m.max(t.rel_error)),
        tensors,
    })
}

/// Like [`check_gradients`], failing with the offending tensor names when
/// any relative error exceeds `tolerance`.
pub fn grad_check(module: GradModule, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let report = check_gradients(module, seed, tolerance)?;
    let failing = report.failing();
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(Error::GradCheck(failing))
    }
}
