//! Classification accuracy, retrieval mAP and attention dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::fusion::{predict_class, MaskMode};
use crate::model::{Manet, Sample};
use crate::multiview::ViewImage;
use crate::params::ParamStore;
use crate::train::{Shape, Stage};

/// Distance used to rank retrieval candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub shape_id: String,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<Prediction>,
}

/// Overall and per-class accuracy of a prediction log. Classes without test
/// shapes report an accuracy of 0 over 0.
pub fn classification_report(predictions: Vec<Prediction>, classes: &[String]) -> ClassificationReport {
    let mut correct = vec![0; classes.len()];
    let mut total = vec![0; classes.len()];
    for p in &predictions {
        if p.label < classes.len() {
            total[p.label] += 1;
            if p.predicted == p.label {
                correct[p.label] += 1;
            }
        }
    }
    let hits = predictions.iter().filter(|p| p.predicted == p.label).count();
    ClassificationReport {
        overall: if predictions.is_empty() {
            0.0
        } else {
            hits as f64 / predictions.len() as f64
        },
        correct: hits,
        total: predictions.len(),
        per_class: classes
            .iter()
            .enumerate()
            .map(|(i, c)| ClassAccuracy {
                class: c.clone(),
                correct: correct[i],
                total: total[i],
                accuracy: if total[i] == 0 {
                    0.0
                } else {
                    correct[i] as f64 / total[i] as f64
                },
            })
            .collect(),
        predictions,
    }
}

/// Per-shape network outputs in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeOutput {
    pub logits: Vec<f64>,
    /// Fused descriptor, global point feature or pooled view feature,
    /// depending on the stage.
    pub descriptor: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

pub fn forward_shape(model: &Manet, store: &ParamStore, stage: Stage, sample: &Sample) -> ShapeOutput {
    let tape = Tape::inference();
    match stage {
        Stage::Fused => {
            let f = model.fused::<ChaCha8Rng>(&tape, store, sample, None);
            ShapeOutput {
                logits: f.logits.value().data().to_vec(),
                descriptor: f.descriptor.value().data().to_vec(),
                weights: Some(f.weights.value().data().to_vec()),
            }
        }
        Stage::Point => {
            let g = model.point_global(&tape, store, sample);
            let logits = model.point_head.forward::<ChaCha8Rng>(&tape, store, g, None);
            ShapeOutput {
                logits: logits.value().data().to_vec(),
                descriptor: g.value().data().to_vec(),
                weights: None,
            }
        }
        Stage::View => {
            let v = model.view_features(&tape, store, sample).max_rows();
            let logits = model.view_head.forward::<ChaCha8Rng>(&tape, store, v, None);
            ShapeOutput {
                logits: logits.value().data().to_vec(),
                descriptor: v.value().data().to_vec(),
                weights: None,
            }
        }
    }
}

pub fn run_shapes(model: &Manet, store: &ParamStore, stage: Stage, shapes: &[Shape]) -> Result<Vec<ShapeOutput>> {
    shapes
        .iter()
        .map(|s| {
            let out = forward_shape(model, store, stage, &s.sample(model.cfg.point.k)?);
            if out.logits.iter().chain(&out.descriptor).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("outputs for {}", s.shape_id)));
            }
            Ok(out)
        })
        .collect()
}

pub fn evaluate_classification(
    model: &Manet,
    store: &ParamStore,
    stage: Stage,
    shapes: &[Shape],
    classes: &[String],
) -> Result<ClassificationReport> {
    let outputs = run_shapes(model, store, stage, shapes)?;
    let predictions = shapes
        .iter()
        .zip(&outputs)
        .map(|(s, o)| Prediction {
            shape_id: s.shape_id.clone(),
            label: s.label,
            predicted: predict_class(&o.logits),
        })
        .collect();
    Ok(classification_report(predictions, classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    pub metric: Metric,
    /// Queries contributing to the mean.
    pub queries: usize,
    /// Queries with no other shape of their class.
    pub skipped: usize,
}

/// Average precision of one ranked list: the mean over relevant ranks `r`
/// of (relevant items at or above `r`) / `r`. `None` without relevant items.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Every descriptor queries all others; relevance is class equality and ties
/// in distance keep index order.
pub fn mean_average_precision(descriptors: &[Vec<f64>], labels: &[usize], metric: Metric) -> RetrievalReport {
    let n = descriptors.len();
    let mut sum = 0.0;
    let mut queries = 0;
    let mut skipped = 0;
    for q in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (metric.distance(&descriptors[q], &descriptors[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = others.iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        match average_precision(&relevance) {
            Some(ap) => {
                sum += ap;
                queries += 1;
            }
            None => skipped += 1,
        }
    }
    RetrievalReport {
        map: if queries == 0 { 0.0 } else { sum / queries as f64 },
        metric,
        queries,
        skipped,
    }
}

pub fn evaluate_retrieval(
    model: &Manet,
    store: &ParamStore,
    stage: Stage,
    shapes: &[Shape],
    metric: Metric,
) -> Result<RetrievalReport> {
    let outputs = run_shapes(model, store, stage, shapes)?;
    let descriptors: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.descriptor).collect();
    let labels: Vec<usize> = shapes.iter().map(|s| s.label).collect();
    Ok(mean_average_precision(&descriptors, &labels, metric))
}

/// One line of an attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub shape_id: String,
    pub mode: MaskMode,
    /// Rounded to six decimal places.
    pub weights: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
    pub predicted_class: String,
    pub true_class: String,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn attention_records(
    model: &Manet,
    store: &ParamStore,
    shapes: &[Shape],
    classes: &[String],
) -> Result<Vec<AttentionRecord>> {
    let outputs = run_shapes(model, store, Stage::Fused, shapes)?;
    let name = |i: usize| classes.get(i).cloned().unwrap_or_default();
    Ok(shapes
        .iter()
        .zip(outputs)
        .map(|(s, o)| {
            let predicted = predict_class(&o.logits);
            AttentionRecord {
                shape_id: s.shape_id.clone(),
                mode: model.mask_mode(),
                weights: o.weights.unwrap_or_default().into_iter().map(round6).collect(),
                predicted,
                label: s.label,
                predicted_class: name(predicted),
                true_class: name(s.label),
            }
        })
        .collect())
}

/// Writes `attention.jsonl` into `out` and, when `annotate` is set, one PNG
/// per shape with the views side by side above bars proportional to their
/// weights.
pub fn write_attention(records: &[AttentionRecord], shapes: &[Shape], out: &Path, annotate: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("attention.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
    }
    if annotate {
        for (r, s) in records.iter().zip(shapes) {
            attention_strip(r, s).save_gray_png(&out.join(format!("{}_attention.png", r.shape_id)))?;
        }
    }
    Ok(())
}

fn attention_strip(r: &AttentionRecord, s: &Shape) -> ViewImage {
    let shape = s.views.shape();
    let (m, h, w) = (shape[0], shape[2], shape[3]);
    let bar = h / 2;
    let top = r.weights.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let (width, height) = (m * w, h + bar);
    let mut gray = vec![0.0f32; width * height];
    let data = s.views.data();
    for v in 0..m {
        for y in 0..h {
            for x in 0..w {
                gray[y * width + v * w + x] = data[((v * 3) * h + y) * w + x] as f32;
            }
        }
        let filled = ((r.weights.get(v).copied().unwrap_or(0.0) / top) * bar as f64).round() as usize;
        for y in height - filled.min(bar)..height {
            for x in v * w + 1..(v + 1) * w - 1 {
                gray[y * width + x] = 1.0;
            }
        }
    }
    ViewImage::from_gray(height, width, &gray)
}
