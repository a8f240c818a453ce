//! Optimization loop, resumable training state, evaluation and the
//! variant comparison harness.

pub mod ablation;
pub mod adam;
pub mod eval;

pub use ablation::{run_ablation, AblationReport, AblationRun};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, evaluate_model, EvalProtocols, EvalReport, EvalRow, Predicted};

use std::path::{Path, PathBuf};

use crate::backbone::image_array;
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::loss_metrics::{silog_loss, DEFAULT_LAMBDA};
use crate::model::{forward, Checkpoint, Model, ModelConfig, ParamStore};
use crate::ndcore::{Array, Real, Rng, Tape};
use crate::superpixel::Superpixelation;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            steps: 500,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            checkpoint_every: 0,
            clip_norm: Some(10.0),
            augment: false,
        }
    }
}

const KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "steps",
    "seed",
    "lambda",
    "checkpoint_every",
    "clip_norm",
    "augment",
    "step",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be nonnegative, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if a.eps < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("train.eps must be nonnegative and train.batch_size positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("train.{k}"), v);
        };
        put("lr", self.adam.lr.to_string());
        put("beta1", self.adam.beta1.to_string());
        put("beta2", self.adam.beta2.to_string());
        put("eps", self.adam.eps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        put("seed", self.seed.to_string());
        put("lambda", self.lambda.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string()));
        put("augment", self.augment.to_string());
        m
    }

    pub fn with_kv(&self, map: &KvMap) -> Result<Self> {
        kv::check_known(map, "train.", KEYS)?;
        let mut c = self.clone();
        macro_rules! take {
            ($($field:ident).+, $key:literal) => {
                if let Some(v) = kv::get(map, concat!("train.", $key))? {
                    c.$($field).+ = v;
                }
            };
        }
        take!(adam.lr, "lr");
        take!(adam.beta1, "beta1");
        take!(adam.beta2, "beta2");
        take!(adam.eps, "eps");
        take!(batch_size, "batch_size");
        take!(steps, "steps");
        take!(seed, "seed");
        take!(lambda, "lambda");
        take!(checkpoint_every, "checkpoint_every");
        take!(augment, "augment");
        if let Some(v) = map.get("train.clip_norm") {
            c.clip_norm = match v.as_str() {
                "none" => None,
                s => Some(s.parse().map_err(|_| Error::Config(format!("train.clip_norm: cannot parse {s:?}")))?),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        let adam = AdamState::new(&model.params);
        Self { model, adam }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Model tensors plus optimizer moments under `adam.m/` and `adam.v/`.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.checkpoint();
        ck.config.extend(cfg.to_kv());
        ck.config.insert("train.step".into(), self.adam.step.to_string());
        for (prefix, store) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (n, a) in store.iter() {
                ck.tensors.insert(format!("{prefix}{n}"), a.clone()).expect("names unique");
            }
        }
        ck
    }

    /// Restores a training checkpoint; a plain model checkpoint starts
    /// with fresh moments at step 0.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<TrainConfig>)> {
        let model = Model::<f32>::from_checkpoint(ck)?;
        let Some(step) = kv::get::<u64>(&ck.config, "train.step")? else {
            return Ok((Self::new(model), None));
        };
        let train: KvMap = ck
            .config
            .iter()
            .filter(|(k, _)| k.starts_with("train."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let cfg = TrainConfig::default().with_kv(&train)?;
        let mut adam = AdamState::new(&model.params);
        adam.step = step;
        for (prefix, store) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            let saved = ck.with_prefix(prefix);
            for (n, a) in store.iter_mut() {
                let s = saved
                    .get(n)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{n}")))?;
                if s.shape() != a.shape() {
                    return Err(Error::Format(format!("{prefix}{n} has the wrong shape")));
                }
                *a = s.clone();
            }
        }
        Ok((Self { model, adam }, Some(cfg)))
    }
}

/// Mean batch loss before each update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    /// `(step, loss)` with steps counted from 1.
    pub points: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (k, l) in &self.points {
            s.push_str(&format!("{k},{l:.6}\n"));
        }
        s
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients<T: Real>(
    model: &Model<T>,
    image: &crate::raster::Image,
    sp: &Superpixelation,
    gt: &crate::raster::DepthMap,
    lambda: f64,
) -> Result<(f64, Vec<Array<T>>)> {
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let x = t.constant(image_array(image));
    let (depth, _) = forward(&mut t, &b, &model.config, x, sp)?;
    let loss = silog_loss(&mut t, depth, gt, lambda)?;
    let value = t.value(loss).data()[0].as_f64();
    let mut grads = t.backward(loss);
    Ok((value, model.params.collect_grads(&b, &mut grads)))
}

fn clip_global_norm(grads: &mut [Array<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Runs `trainer` from `state` up to `cfg.steps` total steps.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    superpixels: Vec<Superpixelation>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, model_cfg: &ModelConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        if data.size() != Some((model_cfg.height, model_cfg.width)) {
            return Err(Error::Shape(format!(
                "dataset samples are {:?}, model expects {}x{}",
                data.size(),
                model_cfg.height,
                model_cfg.width
            )));
        }
        let probe = Model::<f32> {
            config: model_cfg.clone(),
            params: ParamStore::new(),
        };
        // augmentation changes the image, so superpixels are then per step
        let superpixels = if cfg.augment {
            Vec::new()
        } else {
            data.samples.iter().map(|s| probe.superpixels(&s.image)).collect::<Result<_>>()?
        };
        Ok(Self {
            cfg,
            data,
            superpixels,
        })
    }

    /// Sample indices for 1-based step `step`; a pure function of seed and step.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let bs = self.cfg.batch_size as u64;
        (0..bs)
            .map(|j| {
                let k = (step - 1) * bs + j;
                self.data.epoch_order(self.cfg.seed, k / n)[(k % n) as usize]
            })
            .collect()
    }

    /// One optimizer update; returns the mean batch loss.
    pub fn step(&self, state: &mut TrainState) -> Result<f64> {
        let step = state.step() + 1;
        let mut total: Option<Vec<Array<f32>>> = None;
        let mut loss = 0.0;
        let idx = self.batch(step);
        for (j, &i) in idx.iter().enumerate() {
            let s = &self.data.samples[i];
            let (l, g) = if self.cfg.augment {
                let mut rng = Rng::new(self.cfg.seed).child_indexed("augment", step).child_indexed("sample", j as u64);
                let a = augment(s, &AugmentConfig::default(), &mut rng)?;
                let sp = state.model.superpixels(&a.image)?;
                sample_gradients(&state.model, &a.image, &sp, &a.depth, self.cfg.lambda)?
            } else {
                sample_gradients(&state.model, &s.image, &self.superpixels[i], &s.depth, self.cfg.lambda)?
            };
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss is {l} at step {step}")));
            }
            loss += l;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = total.expect("batch is nonempty");
        let inv = 1.0 / idx.len() as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut state.model.params, &grads, &mut state.adam, &self.cfg.adam)?;
        if !state.model.params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at step {step}")));
        }
        Ok(loss / idx.len() as f64)
    }

    pub fn run(&self, state: &mut TrainState, out: &TrainOutput, mut log: impl FnMut(u64, f64)) -> Result<LossCurve> {
        let mut curve = LossCurve::default();
        while (state.step() as usize) < self.cfg.steps {
            let l = self.step(state)?;
            let k = state.step();
            curve.points.push((k, l));
            log(k, l);
            if let Some(dir) = &out.dir {
                if self.cfg.checkpoint_every > 0 && k % self.cfg.checkpoint_every as u64 == 0 {
                    state.checkpoint(&self.cfg).save(&checkpoint_path(dir, k))?;
                }
            }
        }
        Ok(curve)
    }
}

/// Fresh model, full run, no checkpoints.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(TrainState, LossCurve)> {
    let trainer = Trainer::new(cfg.clone(), model_cfg, data)?;
    let mut state = TrainState::new(Model::init(model_cfg.clone(), cfg.seed)?);
    let curve = trainer.run(&mut state, &TrainOutput::default(), |_, _| {})?;
    Ok((state, curve))
}

#[cfg(test)]
mod tests;
