//! Shared fixtures for the benchmarks under `benches/`.

use shed::data::{Dataset, GenConfig, Sample};
use shed::model::{Model, ModelConfig};
use shed::superpixel::Superpixelation;

/// One rendered desk-size sample, its superpixels and a fresh model.
pub struct Fixture {
    pub model: Model<f32>,
    pub sample: Sample,
    pub superpixels: Superpixelation,
}

pub fn desk_fixture() -> Fixture {
    let data = Dataset::generate(&GenConfig {
        scenes: 1,
        frames_per_scene: 1,
        ..GenConfig::default()
    })
    .expect("default scene renders");
    let sample = data.samples.into_iter().next().expect("one sample");
    let model = Model::init(ModelConfig::default(), 0).expect("default config is valid");
    let superpixels = model.superpixels(&sample.image).expect("desk image segments");
    Fixture {
        model,
        sample,
        superpixels,
    }
}
