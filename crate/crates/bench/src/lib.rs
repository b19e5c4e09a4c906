//! Fixtures shared by the benchmarks.

use manet_core::data::{render_views, synthesize, Primitive, SyntheticShapeSpec};
use manet_core::model::{Manet, ModelConfig, Sample};
use manet_core::{ParamStore, PointCloud, ViewSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn cloud(n: usize, seed: u64) -> PointCloud {
    let spec = SyntheticShapeSpec::random(Primitive::ALL[seed as usize % Primitive::ALL.len()], 0.2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize(&spec, n, None, &mut rng)
        .expect("synthetic shape")
        .with_identity(format!("bench{seed}"), 0)
}

pub struct Fixture {
    pub model: Manet,
    pub params: ParamStore,
    pub sample: Sample,
}

impl Fixture {
    pub fn desk(seed: u64) -> Self {
        Fixture::with_config(ModelConfig::desk(8), seed)
    }

    pub fn with_config(cfg: ModelConfig, seed: u64) -> Self {
        let pc = cloud(cfg.point.num_points, seed);
        let views = ViewSet {
            shape_id: pc.shape_id.clone(),
            label: pc.label,
            images: render_views(&cloud(4096, seed), cfg.view.image_size),
        };
        let sample = Sample::new(&pc, &views, cfg.point.k).expect("bench sample");
        let model = Manet::new(cfg).expect("valid config");
        let params = model.init(seed);
        Fixture { model, params, sample }
    }
}
