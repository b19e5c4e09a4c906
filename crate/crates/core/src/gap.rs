//! Graph-attention point branch: vertex/neighbourhood attention gates
//! (VNAM), multi-head GAPLayers, attention pooling, the attention-aware
//! spatial transform and the backbone that yields the global point feature.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::{he_normal, ParamStore};
use crate::pointcloud::{build_knn_graph, EdgeTensor, KnnGraph, PointCloud};
use crate::tensor::Tensor;

/// Channel bottleneck reduction for the VNAM channel gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VnamConfig {
    pub reduction: usize,
}

impl Default for VnamConfig {
    fn default() -> Self {
        VnamConfig { reduction: 4 }
    }
}

/// Standalone VNAM weights for `C` channels.
///
/// `channel_w1: C × C/r`, `channel_w2: C/r × C`, `mixer: 2 × 1` mapping the
/// (channel-mean, channel-max) statistics of each edge to a gate logit.
#[derive(Clone, Debug, PartialEq)]
pub struct VnamParams {
    pub channels: usize,
    pub reduction: usize,
    pub channel_w1: Tensor,
    pub channel_w2: Tensor,
    pub mixer: Tensor,
}

fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Parameter(format!(
            "VNAM reduction {reduction} must divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

impl VnamParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(VnamParams {
            channels,
            reduction,
            channel_w1: Tensor::zeros(&[channels, hidden]),
            channel_w2: Tensor::zeros(&[hidden, channels]),
            mixer: Tensor::zeros(&[2, 1]),
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(VnamParams {
            channels,
            reduction,
            channel_w1: he_normal(&[channels, hidden], channels, rng),
            channel_w2: he_normal(&[hidden, channels], hidden, rng),
            mixer: Tensor::randn(&[2, 1], 0.5, rng),
        })
    }
}

/// Channel gate over a `(N·k) × C` edge tensor. Returns `(gated, gate)` where
/// `gate` is `1 × C`.
pub fn vnam_channel_var<'t>(z: Var<'t>, w1: Var<'t>, w2: Var<'t>) -> (Var<'t>, Var<'t>) {
    let bottleneck = |v: Var<'t>| v.matmul(w1).relu().matmul(w2);
    let gate = bottleneck(z.mean_rows()).add(bottleneck(z.max_rows())).sigmoid();
    (z.mul_row(gate), gate)
}

/// Neighbour gate over a `(N·k) × C` edge tensor. Returns `(gated, gate)`
/// where `gate` is `(N·k) × 1`.
pub fn vnam_neighbor_var<'t>(z: Var<'t>, mixer: Var<'t>) -> (Var<'t>, Var<'t>) {
    let stats = Var::concat_cols(&[z.mean_cols(), z.max_cols()]);
    let gate = stats.matmul(mixer).sigmoid();
    (z.mul_col(gate), gate)
}

/// Scales each channel of `e` by a gate in `(0, 1)` computed from its
/// average and maximum over every (vertex, neighbour) position.
pub fn vnam_channel(e: &EdgeTensor, p: &VnamParams) -> Result<EdgeTensor> {
    check_reduction(e.channels, p.reduction)?;
    check_vnam_shapes(e, p)?;
    let tape = Tape::inference();
    let (out, _) = vnam_channel_var(
        tape.constant(e.to_tensor()),
        tape.constant(p.channel_w1.clone()),
        tape.constant(p.channel_w2.clone()),
    );
    Ok(EdgeTensor::from_tensor(&out.value(), e.n, e.k))
}

/// Scales each (vertex, neighbour) edge of `e` by a gate in `(0, 1)` mixed
/// from its channel mean and channel max.
pub fn vnam_neighbor(e: &EdgeTensor, p: &VnamParams) -> Result<EdgeTensor> {
    if p.mixer.shape() != [2, 1] {
        return Err(Error::Shape(format!("mixer must be 2×1, got {:?}", p.mixer.shape())));
    }
    let tape = Tape::inference();
    let (out, _) = vnam_neighbor_var(tape.constant(e.to_tensor()), tape.constant(p.mixer.clone()));
    Ok(EdgeTensor::from_tensor(&out.value(), e.n, e.k))
}

fn check_vnam_shapes(e: &EdgeTensor, p: &VnamParams) -> Result<()> {
    let hidden = e.channels / p.reduction;
    if p.channel_w1.shape() != [e.channels, hidden] || p.channel_w2.shape() != [hidden, e.channels] {
        return Err(Error::Shape(format!(
            "bottleneck {:?}/{:?} does not fit {} channels",
            p.channel_w1.shape(),
            p.channel_w2.shape(),
            e.channels
        )));
    }
    Ok(())
}

/// Hyperparameters of one GAPLayer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapLayerConfig {
    pub in_dim: usize,
    pub heads: usize,
    pub channels: usize,
    pub vnam: Option<VnamConfig>,
    pub leaky_slope: f64,
}

impl GapLayerConfig {
    pub fn new(in_dim: usize, heads: usize, channels: usize) -> Self {
        GapLayerConfig {
            in_dim,
            heads,
            channels,
            vnam: Some(VnamConfig::default()),
            leaky_slope: 0.2,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.channels
    }
}

/// Multi-head graph attention layer. Parameters live under `{prefix}.h{head}.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct GapLayer {
    pub prefix: String,
    pub cfg: GapLayerConfig,
}

/// Differentiable outputs of [`GapLayer::forward`].
pub struct GapForward<'t> {
    /// `N × (H·F')`.
    pub attention: Var<'t>,
    /// `(N·k) × (H·F')`.
    pub graph_features: Var<'t>,
    /// One `N × k` coefficient matrix per head.
    pub coefficients: Vec<Var<'t>>,
    /// Per head: channel gate `1 × F'` and neighbour gate `(N·k) × 1`.
    pub gates: Vec<(Var<'t>, Var<'t>)>,
}

/// Plain-tensor outputs of [`gap_layer_forward`].
#[derive(Clone, Debug)]
pub struct GapLayerOutput {
    pub attention_features: Tensor,
    pub graph_features: Tensor,
    pub coefficients: Vec<AttentionCoefficients>,
}

/// Softmax-normalized `N × k` coefficients of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCoefficients {
    pub n: usize,
    pub k: usize,
    pub alpha: Vec<f64>,
}

impl AttentionCoefficients {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.k..(i + 1) * self.k]
    }
}

/// Neighbour table shared by every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub k: usize,
    pub neighbors: Rc<[usize]>,
}

impl From<&KnnGraph> for GraphIndex {
    fn from(g: &KnnGraph) -> Self {
        GraphIndex {
            k: g.k,
            neighbors: Rc::from(g.neighbors.as_slice()),
        }
    }
}

impl GapLayer {
    pub fn new(prefix: impl Into<String>, cfg: GapLayerConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.channels == 0 || cfg.in_dim == 0 {
            return Err(Error::Parameter(format!(
                "GAPLayer needs positive heads/channels/input, got {}/{}/{}",
                cfg.heads, cfg.channels, cfg.in_dim
            )));
        }
        if let Some(v) = cfg.vnam {
            check_reduction(cfg.channels, v.reduction)?;
        }
        Ok(GapLayer {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn head(&self, h: usize) -> String {
        format!("{}.h{h}", self.prefix)
    }

    fn edge_encoder(&self, h: usize) -> Linear {
        Linear::new(format!("{}.edge", self.head(h)), self.cfg.in_dim, self.cfg.channels)
    }

    fn self_encoder(&self, h: usize) -> Linear {
        Linear::new(format!("{}.self", self.head(h)), self.cfg.in_dim, self.cfg.channels)
    }

    fn self_scorer(&self, h: usize) -> Linear {
        Linear::new(format!("{}.self_score", self.head(h)), self.cfg.channels, 1)
    }

    fn neighbor_scorer(&self, h: usize) -> Linear {
        Linear::new(format!("{}.nbr_score", self.head(h)), self.cfg.channels, 1).without_bias()
    }

    pub fn vnam_names(&self, h: usize) -> [String; 3] {
        let base = self.head(h);
        [
            format!("{base}.vnam.w1"),
            format!("{base}.vnam.w2"),
            format!("{base}.vnam.mixer"),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.cfg.channels;
        for h in 0..self.cfg.heads {
            self.edge_encoder(h).init(store, rng);
            self.self_encoder(h).init(store, rng);
            self.self_scorer(h).init(store, rng);
            self.neighbor_scorer(h).init(store, rng);
            if let Some(v) = self.cfg.vnam {
                let p = VnamParams::random(c, v.reduction, rng).expect("validated in GapLayer::new");
                self.store_vnam(store, h, p);
            }
        }
    }

    pub fn store_vnam(&self, store: &mut ParamStore, head: usize, p: VnamParams) {
        let [w1, w2, mixer] = self.vnam_names(head);
        store.insert(w1, p.channel_w1);
        store.insert(w2, p.channel_w2);
        store.insert(mixer, p.mixer);
    }

    /// Per head: edges `e = x_i − x_ij` are lifted to `F'` channels, refined
    /// by the channel then neighbour gates, scored against the vertex's own
    /// encoding, and summed under the softmax coefficients.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, graph: &GraphIndex) -> GapForward<'t> {
        let k = graph.k;
        let n = x.shape()[0];
        let edges = x.edge_diff(graph.neighbors.clone(), k);
        let mut attention = Vec::with_capacity(self.cfg.heads);
        let mut encoded = Vec::with_capacity(self.cfg.heads);
        let mut coefficients = Vec::with_capacity(self.cfg.heads);
        let mut gates = Vec::new();
        for h in 0..self.cfg.heads {
            let mut e_hat = self.edge_encoder(h).forward(tape, store, edges).relu();
            if self.cfg.vnam.is_some() {
                let [w1, w2, mixer] = self.vnam_names(h);
                let (gated, cg) = vnam_channel_var(e_hat, tape.param(store, &w1), tape.param(store, &w2));
                let (gated, ng) = vnam_neighbor_var(gated, tape.param(store, &mixer));
                e_hat = gated;
                gates.push((cg, ng));
            }
            let own = self.self_encoder(h).forward(tape, store, x).relu();
            let self_score = self.self_scorer(h).forward(tape, store, own);
            let nbr_score = self.neighbor_scorer(h).forward(tape, store, e_hat);
            let alpha = self_score
                .repeat_each_row(k)
                .add(nbr_score)
                .leaky_relu(self.cfg.leaky_slope)
                .reshape(&[n, k])
                .softmax_rows();
            attention.push(alpha.weighted_group_sum(e_hat));
            encoded.push(e_hat);
            coefficients.push(alpha);
        }
        GapForward {
            attention: Var::concat_cols(&attention),
            graph_features: Var::concat_cols(&encoded),
            coefficients,
            gates,
        }
    }
}

/// Runs one GAPLayer on plain per-point features `x: N × F`.
pub fn gap_layer_forward(x: &Tensor, g: &KnnGraph, layer: &GapLayer, store: &ParamStore) -> Result<GapLayerOutput> {
    if x.shape().len() != 2 || x.cols() != layer.cfg.in_dim {
        return Err(Error::Consistency(format!(
            "features {:?} do not match layer input width {}",
            x.shape(),
            layer.cfg.in_dim
        )));
    }
    if g.k == 0 || g.neighbors.len() != x.rows() * g.k || g.neighbors.iter().any(|&j| j >= x.rows()) {
        return Err(Error::Consistency(format!(
            "graph with k = {} and {} entries does not fit {} points",
            g.k,
            g.neighbors.len(),
            x.rows()
        )));
    }
    let tape = Tape::inference();
    let out = layer.forward(&tape, store, tape.constant(x.clone()), &GraphIndex::from(g));
    Ok(GapLayerOutput {
        attention_features: out.attention.value().as_ref().clone(),
        graph_features: out.graph_features.value().as_ref().clone(),
        coefficients: out
            .coefficients
            .iter()
            .map(|a| AttentionCoefficients {
                n: x.rows(),
                k: g.k,
                alpha: a.value().data().to_vec(),
            })
            .collect(),
    })
}

/// Max over the neighbour axis: `N × k × C → N × C`.
pub fn attention_pooling(graph_features: &EdgeTensor) -> Result<Tensor> {
    if graph_features.k == 0 {
        return Err(Error::Parameter("attention pooling needs k >= 1".into()));
    }
    let tape = Tape::inference();
    let out = tape.constant(graph_features.to_tensor()).group_max(graph_features.k);
    Ok(out.value().as_ref().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransformConfig {
    pub heads: usize,
    pub channels: usize,
    pub mlp: Vec<usize>,
    pub fc: Vec<usize>,
}

/// Regresses a `3 × 3` matrix from attention features and applies it to the
/// points. The final layer starts at zero weights with identity bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTransform {
    pub gap: GapLayer,
    pub mlp: Mlp,
    pub fc: Mlp,
    pub regressor: Linear,
}

const IDENTITY_3: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl SpatialTransform {
    pub fn new(prefix: &str, cfg: &SpatialTransformConfig, vnam: Option<VnamConfig>, leaky_slope: f64) -> Result<Self> {
        let gap = GapLayer::new(
            format!("{prefix}.gap"),
            GapLayerConfig {
                in_dim: 3,
                heads: cfg.heads,
                channels: cfg.channels,
                vnam,
                leaky_slope,
            },
        )?;
        let mlp = Mlp::new(&format!("{prefix}.mlp"), 2 * gap.cfg.out_dim(), &cfg.mlp);
        let pooled = mlp.out_dim().unwrap_or(2 * gap.cfg.out_dim());
        let fc = Mlp::new(&format!("{prefix}.fc"), pooled, &cfg.fc);
        let regressor = Linear::new(format!("{prefix}.regressor"), fc.out_dim().unwrap_or(pooled), 9);
        Ok(SpatialTransform {
            gap,
            mlp,
            fc,
            regressor,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.gap.init(store, rng);
        self.mlp.init(store, rng);
        self.fc.init(store, rng);
        store.insert(self.regressor.weight_name(), Tensor::zeros(&[self.regressor.in_dim, 9]));
        store.insert(self.regressor.bias_name(), Tensor::new(&[9], IDENTITY_3.to_vec()));
    }

    /// Returns `(T, points · T)` with `T: 3 × 3`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        points: Var<'t>,
        graph: &GraphIndex,
    ) -> (Var<'t>, Var<'t>) {
        let g = self.gap.forward(tape, store, points, graph);
        let pooled = g.graph_features.group_max(graph.k);
        let h = Var::concat_cols(&[g.attention, pooled]);
        let h = self.mlp.forward(tape, store, h).max_rows();
        let h = self.fc.forward(tape, store, h);
        let t = self.regressor.forward(tape, store, h).reshape(&[3, 3]);
        (t, points.matmul(t))
    }
}

/// Hyperparameters of the whole point branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointBranchConfig {
    pub num_points: usize,
    pub k: usize,
    pub stn: SpatialTransformConfig,
    pub heads: usize,
    pub channels: usize,
    pub vnam: Option<VnamConfig>,
    pub mlp: Vec<usize>,
    pub global_dim: usize,
    pub leaky_slope: f64,
}

impl PointBranchConfig {
    /// Widths used for full-size runs: 1024 points, `k = 20`,
    /// GAPLayer{1,16} transform, GAPLayer{4,16} backbone, MLP 64-128-1024.
    pub fn full() -> Self {
        PointBranchConfig {
            num_points: 1024,
            k: 20,
            stn: SpatialTransformConfig {
                heads: 1,
                channels: 16,
                mlp: vec![64, 128],
                fc: vec![256],
            },
            heads: 4,
            channels: 16,
            vnam: Some(VnamConfig::default()),
            mlp: vec![64, 128],
            global_dim: 1024,
            leaky_slope: 0.2,
        }
    }

    /// Reduced widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        PointBranchConfig {
            num_points: 128,
            k: 12,
            stn: SpatialTransformConfig {
                heads: 1,
                channels: 16,
                mlp: vec![32, 64],
                fc: vec![32],
            },
            heads: 4,
            channels: 16,
            vnam: Some(VnamConfig::default()),
            mlp: vec![32, 64],
            global_dim: 128,
            leaky_slope: 0.2,
        }
    }
}

/// Point-cloud backbone producing the global point feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBackbone {
    pub cfg: PointBranchConfig,
    pub stn: SpatialTransform,
    pub gap: GapLayer,
    pub mlp: Mlp,
    pub expand: Linear,
}

/// Max-aggregated global feature of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGlobalFeature {
    pub vector: Vec<f64>,
}

pub struct PointForward<'t> {
    pub global: Var<'t>,
    pub transform: Var<'t>,
}

impl PointBackbone {
    pub fn new(prefix: &str, cfg: PointBranchConfig) -> Result<Self> {
        let stn = SpatialTransform::new(&format!("{prefix}.stn"), &cfg.stn, cfg.vnam, cfg.leaky_slope)?;
        let gap = GapLayer::new(
            format!("{prefix}.gap"),
            GapLayerConfig {
                in_dim: 3,
                heads: cfg.heads,
                channels: cfg.channels,
                vnam: cfg.vnam,
                leaky_slope: cfg.leaky_slope,
            },
        )?;
        let base = 2 * gap.cfg.out_dim();
        let mlp = Mlp::new(&format!("{prefix}.mlp"), base, &cfg.mlp);
        let concat = 3 + base + cfg.mlp.iter().sum::<usize>();
        let expand = Linear::new(format!("{prefix}.expand"), concat, cfg.global_dim);
        Ok(PointBackbone {
            cfg,
            stn,
            gap,
            mlp,
            expand,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stn.init(store, rng);
        self.gap.init(store, rng);
        self.mlp.init(store, rng);
        self.expand.init(store, rng);
    }

    /// Transform, GAPLayer, per-point MLPs over `[x' ‖ attention ‖ pooled
    /// graph ‖ intermediates]`, channel expansion, max over points.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        points: Var<'t>,
        graph: &GraphIndex,
    ) -> PointForward<'t> {
        let (transform, x) = self.stn.forward(tape, store, points, graph);
        let g = self.gap.forward(tape, store, x, graph);
        let pooled = g.graph_features.group_max(graph.k);
        let base = Var::concat_cols(&[g.attention, pooled]);
        let mut parts = vec![x, base];
        parts.extend(self.mlp.forward_all(tape, store, base));
        let global = self
            .expand
            .forward(tape, store, Var::concat_cols(&parts))
            .relu()
            .max_rows();
        PointForward { global, transform }
    }

    /// Builds the k-NN graph and evaluates the global feature of `pc`.
    pub fn global_feature(&self, store: &ParamStore, pc: &PointCloud) -> Result<PointGlobalFeature> {
        let graph = build_knn_graph(pc, self.cfg.k)?;
        let tape = Tape::inference();
        let out = self.forward(&tape, store, tape.constant(pc.to_tensor()), &GraphIndex::from(&graph));
        let vector = out.global.value().data().to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("point global feature".into()));
        }
        Ok(PointGlobalFeature { vector })
    }
}

/// Applies the transform network to `pc` and returns `(T, transformed)`.
pub fn spatial_transform(
    pc: &PointCloud,
    stn: &SpatialTransform,
    store: &ParamStore,
    k: usize,
) -> Result<(Tensor, PointCloud)> {
    let graph = build_knn_graph(pc, k)?;
    let tape = Tape::inference();
    let (t, out) = stn.forward(&tape, store, tape.constant(pc.to_tensor()), &GraphIndex::from(&graph));
    let transformed = PointCloud {
        points: PointCloud::from_tensor(&out.value()).points,
        ..pc.clone()
    };
    Ok((t.value().as_ref().clone(), transformed))
}
