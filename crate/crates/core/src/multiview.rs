//! Weight-shared convolutional feature extraction over the views of a shape.

use std::path::Path;

use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{he_normal, ParamStore};
use crate::tensor::Tensor;

/// One `height × width × 3` image with values in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ViewImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        ViewImage { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ViewImage::new(height, width, vec![0.0; height * width * 3])
    }

    /// Replicates a grayscale buffer into three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Self {
        assert_eq!(gray.len(), height * width);
        ViewImage::new(height, width, gray.iter().flat_map(|&g| [g, g, g]).collect())
    }

    /// Loads a PNG, expanding grayscale to RGB and resizing to `size × size`.
    pub fn load_png(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rgb = img.to_rgb8();
        if rgb.width() as usize != size || rgb.height() as usize != size {
            rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
        }
        let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Ok(ViewImage::new(size, size, data))
    }

    /// Writes the first channel as an 8-bit grayscale PNG.
    pub fn save_gray_png(&self, path: &Path) -> Result<()> {
        let gray: Vec<u8> = self
            .data
            .chunks(3)
            .map(|px| (px[0].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &gray, self.width as u32, self.height as u32, image::ColorType::L8).map_err(|source| {
            Error::Image {
                path: path.to_path_buf(),
                source,
            }
        })
    }

    /// `3 × H × W` planar copy.
    fn write_chw(&self, dst: &mut [f64]) {
        let hw = self.height * self.width;
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                dst[c * hw + p] = px[c] as f64;
            }
        }
    }
}

/// The ordered views of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub shape_id: String,
    pub label: usize,
    pub images: Vec<ViewImage>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `m × 3 × H × W` batch tensor.
    pub fn to_batch(&self) -> Result<Tensor> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Shape("empty view set".into()))?;
        let (h, w) = (first.height, first.width);
        let per = 3 * h * w;
        let mut data = vec![0.0; self.images.len() * per];
        for (i, img) in self.images.iter().enumerate() {
            if img.height != h || img.width != w {
                return Err(Error::Shape(format!(
                    "view {i} is {}×{}, expected {h}×{w}",
                    img.height, img.width
                )));
            }
            img.write_chw(&mut data[i * per..(i + 1) * per]);
        }
        Ok(Tensor::new(&[self.images.len(), 3, h, w], data))
    }
}

/// Per-view feature rows `v_1 … v_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureSet {
    pub features: Tensor,
}

impl ViewFeatureSet {
    pub fn num_views(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: bool,
}

impl ConvStage {
    const fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize, pool: bool) -> Self {
        ConvStage {
            out_channels,
            kernel,
            stride,
            pad,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewBranchConfig {
    pub views: usize,
    pub image_size: usize,
    pub stages: Vec<ConvStage>,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub feature_dim: usize,
}

impl ViewBranchConfig {
    /// The five AlexNet convolution stages on 224×224 input, reduced to 1024.
    pub fn full() -> Self {
        ViewBranchConfig {
            views: 12,
            image_size: 224,
            stages: vec![
                ConvStage::new(96, 11, 4, 2, true),
                ConvStage::new(256, 5, 1, 2, true),
                ConvStage::new(384, 3, 1, 1, false),
                ConvStage::new(384, 3, 1, 1, false),
                ConvStage::new(256, 3, 1, 1, true),
            ],
            pool_size: 3,
            pool_stride: 2,
            feature_dim: 1024,
        }
    }

    /// Same stage layout on 32×32 input with narrower channels.
    pub fn desk() -> Self {
        ViewBranchConfig {
            views: 12,
            image_size: 32,
            stages: vec![
                ConvStage::new(16, 5, 2, 2, true),
                ConvStage::new(32, 3, 1, 1, true),
                ConvStage::new(48, 3, 1, 1, false),
                ConvStage::new(48, 3, 1, 1, false),
                ConvStage::new(32, 3, 1, 1, true),
            ],
            pool_size: 3,
            pool_stride: 2,
            feature_dim: 128,
        }
    }

    /// Tiny 8×8 variant used by gradient checks.
    pub fn thin() -> Self {
        ViewBranchConfig {
            views: 3,
            image_size: 8,
            stages: vec![
                ConvStage::new(4, 3, 1, 1, true),
                ConvStage::new(6, 3, 1, 1, true),
                ConvStage::new(8, 3, 1, 1, false),
                ConvStage::new(8, 3, 1, 1, false),
                ConvStage::new(6, 3, 1, 1, true),
            ],
            pool_size: 2,
            pool_stride: 2,
            feature_dim: 8,
        }
    }

    /// `(channels, height, width)` after the last stage.
    pub fn output_geometry(&self) -> Result<(usize, usize, usize)> {
        let mut c = 3;
        let mut s = self.image_size;
        for (i, st) in self.stages.iter().enumerate() {
            if s + 2 * st.pad < st.kernel || st.stride == 0 {
                return Err(Error::Parameter(format!("stage {i} kernel does not fit {s}×{s}")));
            }
            s = (s + 2 * st.pad - st.kernel) / st.stride + 1;
            if st.pool {
                if s < self.pool_size {
                    return Err(Error::Parameter(format!("stage {i} pool does not fit {s}×{s}")));
                }
                s = (s - self.pool_size) / self.pool_stride + 1;
            }
            c = st.out_channels;
        }
        Ok((c, s, s))
    }
}

/// Shared convolutional extractor; parameters under `{prefix}.conv{i}` and
/// `{prefix}.fc`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewCnn {
    pub prefix: String,
    pub cfg: ViewBranchConfig,
    pub fc: Linear,
}

impl ViewCnn {
    pub fn new(prefix: &str, cfg: ViewBranchConfig) -> Result<Self> {
        let (c, h, w) = cfg.output_geometry()?;
        let fc = Linear::new(format!("{prefix}.fc"), c * h * w, cfg.feature_dim);
        Ok(ViewCnn {
            prefix: prefix.to_string(),
            cfg,
            fc,
        })
    }

    fn conv_names(&self, i: usize) -> (String, String) {
        (
            format!("{}.conv{i}.w", self.prefix),
            format!("{}.conv{i}.b", self.prefix),
        )
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut in_ch = 3;
        for (i, st) in self.cfg.stages.iter().enumerate() {
            let (w, b) = self.conv_names(i);
            let fan_in = in_ch * st.kernel * st.kernel;
            store.insert(
                w,
                he_normal(&[st.out_channels, in_ch, st.kernel, st.kernel], fan_in, rng),
            );
            store.insert(b, Tensor::zeros(&[st.out_channels]));
            in_ch = st.out_channels;
        }
        self.fc.init(store, rng);
    }

    /// `b × 3 × H × W → b × D_v`; each image is processed independently.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, images: Var<'t>) -> Var<'t> {
        let batch = images.shape()[0];
        let mut h = images;
        for (i, st) in self.cfg.stages.iter().enumerate() {
            let (w, b) = self.conv_names(i);
            h = h
                .conv2d(tape.param(store, &w), tape.param(store, &b), st.stride, st.pad)
                .relu();
            if st.pool {
                h = h.max_pool2d(self.cfg.pool_size, self.cfg.pool_stride);
            }
        }
        let flat: usize = h.shape()[1..].iter().product();
        self.fc.forward(tape, store, h.reshape(&[batch, flat])).relu()
    }

    fn check_image(&self, img: &ViewImage) -> Result<()> {
        let s = self.cfg.image_size;
        if img.height != s || img.width != s {
            return Err(Error::Shape(format!(
                "image is {}×{}, network expects {s}×{s}",
                img.height, img.width
            )));
        }
        Ok(())
    }
}

/// Feature vector of a single view.
pub fn view_cnn_forward(image: &ViewImage, cnn: &ViewCnn, store: &ParamStore) -> Result<Vec<f64>> {
    cnn.check_image(image)?;
    let vs = ViewSet {
        shape_id: String::new(),
        label: 0,
        images: vec![image.clone()],
    };
    let tape = Tape::inference();
    let out = cnn.forward(&tape, store, tape.constant(vs.to_batch()?));
    Ok(out.value().data().to_vec())
}

/// Runs the shared extractor over every view; row `i` is view `i`.
pub fn extract_view_features(vs: &ViewSet, cnn: &ViewCnn, store: &ParamStore) -> Result<ViewFeatureSet> {
    for img in &vs.images {
        cnn.check_image(img)?;
    }
    let tape = Tape::inference();
    let out = cnn.forward(&tape, store, tape.constant(vs.to_batch()?));
    Ok(ViewFeatureSet {
        features: out.value().as_ref().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> ViewImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ViewImage::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect())
    }

    fn cnn(cfg: ViewBranchConfig, seed: u64) -> (ViewCnn, ParamStore) {
        let cnn = ViewCnn::new("view", cfg).unwrap();
        let mut store = ParamStore::new();
        cnn.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (cnn, store)
    }

    #[test]
    fn alexnet_geometry_ends_at_six_by_six() {
        assert_eq!(ViewBranchConfig::full().output_geometry().unwrap(), (256, 6, 6));
        assert_eq!(ViewBranchConfig::desk().output_geometry().unwrap(), (32, 1, 1));
        assert_eq!(ViewBranchConfig::thin().output_geometry().unwrap(), (6, 1, 1));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let (cnn, store) = cnn(ViewBranchConfig::desk(), 1);
        let f = view_cnn_forward(&ViewImage::zeros(32, 32), &cnn, &store).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_identical_features_and_wrong_size_rejected() {
        let (cnn, store) = cnn(ViewBranchConfig::desk(), 2);
        let img = random_image(32, 3);
        assert_eq!(
            view_cnn_forward(&img, &cnn, &store).unwrap(),
            view_cnn_forward(&img.clone(), &cnn, &store).unwrap()
        );
        assert!(matches!(
            view_cnn_forward(&random_image(16, 0), &cnn, &store),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn full_size_output_is_1024() {
        let (cnn, store) = cnn(ViewBranchConfig::full(), 4);
        let f = view_cnn_forward(&random_image(224, 5), &cnn, &store).unwrap();
        assert_eq!(f.len(), 1024);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_extraction_equals_per_view_calls() {
        let (cnn, store) = cnn(ViewBranchConfig::desk(), 6);
        let vs = ViewSet {
            shape_id: "s".into(),
            label: 0,
            images: (0..12).map(|i| random_image(32, 100 + i)).collect(),
        };
        let feats = extract_view_features(&vs, &cnn, &store).unwrap();
        assert_eq!(feats.num_views(), 12);
        for (i, img) in vs.images.iter().enumerate() {
            let single = view_cnn_forward(img, &cnn, &store).unwrap();
            assert_eq!(feats.features.row(i), single.as_slice());
        }
    }

    #[test]
    fn copies_give_identical_rows_and_permutation_permutes_rows() {
        let (cnn, store) = cnn(ViewBranchConfig::desk(), 7);
        let img = random_image(32, 8);
        let copies = ViewSet {
            shape_id: "c".into(),
            label: 0,
            images: vec![img; 12],
        };
        let f = extract_view_features(&copies, &cnn, &store).unwrap();
        for i in 1..12 {
            assert_eq!(f.features.row(i), f.features.row(0));
        }

        let vs = ViewSet {
            shape_id: "p".into(),
            label: 0,
            images: (0..12).map(|i| random_image(32, 20 + i)).collect(),
        };
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let permuted = ViewSet {
            images: perm.iter().map(|&i| vs.images[i].clone()).collect(),
            ..vs.clone()
        };
        let a = extract_view_features(&vs, &cnn, &store).unwrap();
        let b = extract_view_features(&permuted, &cnn, &store).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.features.row(new), a.features.row(old));
        }
    }

    #[test]
    fn perturbing_one_view_leaves_other_rows_unchanged() {
        let (cnn, store) = cnn(ViewBranchConfig::desk(), 9);
        let mut vs = ViewSet {
            shape_id: "q".into(),
            label: 0,
            images: (0..12).map(|i| random_image(32, 40 + i)).collect(),
        };
        let before = extract_view_features(&vs, &cnn, &store).unwrap();
        vs.images[4] = random_image(32, 999);
        let after = extract_view_features(&vs, &cnn, &store).unwrap();
        for i in (0..12).filter(|&i| i != 4) {
            assert_eq!(before.features.row(i), after.features.row(i));
        }
    }

    #[test]
    fn png_round_trip_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x_v00.png");
        let gray: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let img = ViewImage::from_gray(4, 4, &gray);
        img.save_gray_png(&path).unwrap();
        let back = ViewImage::load_png(&path, 4).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(ViewImage::load_png(&path, 8).unwrap().height, 8);
    }
}
