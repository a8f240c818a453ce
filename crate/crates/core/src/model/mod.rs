//! The segment-hierarchy depth network: configuration, parameters,
//! forward pass, FLOPs accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod network;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Variant};
pub use flops::{estimate_flops, FlopReport, StageFlops};
pub use network::{decode, encode, forward, init_params, spatial_maps, ForwardTrace, LevelState};
pub use params::{Bound, ParamStore};

use crate::backbone::image_array;
use crate::error::{Error, Result};
use crate::hierarchy::SegmentationMap;
use crate::ndcore::{Real, Tape};
use crate::raster::{DepthMap, Image};
use crate::superpixel::{generate_superpixels, Superpixelation};

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Inference outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth: DepthMap,
    /// Pixel partitions for levels `0..=L`.
    pub segmentations: Vec<SegmentationMap>,
    /// Final encoder class token.
    pub embedding: Vec<f32>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Base superpixels for `image` under this model's settings.
    pub fn superpixels(&self, image: &Image) -> Result<Superpixelation> {
        generate_superpixels(image, &self.config.slic())
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.config.height || image.width != self.config.width {
            return Err(Error::Shape(format!(
                "image {}x{} for a {}x{} model",
                image.height, image.width, self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    pub fn predict(&self, image: &Image, sp: &Superpixelation) -> Result<Prediction> {
        self.check_image(image)?;
        let mut t = Tape::new();
        let b = self.params.bind_frozen(&mut t);
        let x = t.constant(image_array(image));
        let (depth, trace) = forward(&mut t, &b, &self.config, x, sp)?;
        let values = t.value(depth).data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(Prediction {
            depth: DepthMap::new(self.config.height, self.config.width, values)?,
            segmentations: trace.segmentations().cloned().collect(),
            embedding: t.value(trace.class_token).data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.to_kv(), self.params.cast())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.model_config()?;
        let expected = init_params::<T>(&config, 0)?;
        let mut params = ParamStore::new();
        for (name, want) in expected.iter() {
            let got = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            params.insert(name, got.cast())?;
        }
        if !params.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests;
