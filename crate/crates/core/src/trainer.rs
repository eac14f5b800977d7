//! Training loop, evaluation and batch assembly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use mmcd_autograd::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::leaves_digest;
use crate::error::{Error, IoContext, Result};
use crate::head::{class_weights, loss, predict, ClassWeightMode};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::{clip_factor, global_grad_norm, Adam, AdamConfig};
use crate::pgffm::FusionMode;
use crate::synth::{derive_seed, load_split, ChangeLabelMap, Manifest, Sample, Split};

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const DIVERGENCE_DUMP: &str = "diverged.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    pub fusion_mode: FusionMode,
    pub class_weight_mode: ClassWeightMode,
    pub dataset_root: PathBuf,
    pub train_split: Split,
    /// Split scored during training; `None` disables validation.
    pub val_split: Option<Split>,
    /// Iterations between validation passes; the last iteration is always validated.
    pub val_interval: usize,
    /// Iterations between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub base_channels: usize,
    pub decoder_dim: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 4,
            learning_rate: 5e-4,
            seed: 0,
            variant: Variant::Full,
            fusion_mode: FusionMode::GatedSum,
            class_weight_mode: ClassWeightMode::InverseFrequency,
            dataset_root: PathBuf::from("data"),
            train_split: Split::Train,
            val_split: Some(Split::Val),
            val_interval: 100,
            checkpoint_interval: 0,
            log_interval: 1,
            base_channels: 16,
            decoder_dim: 64,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.base_channels == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("base_channels and decoder_dim must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            fusion_mode: self.fusion_mode,
            decoder_dim: self.decoder_dim,
            ..ModelConfig::with_size(self.variant, image_size, self.base_channels)
        }
    }
}

/// Stacked inputs for one step.
pub struct Batch {
    pub optical: Tensor<f32>,
    pub sar: Tensor<f32>,
    pub labels: Vec<ChangeLabelMap>,
    pub distances: Vec<Tensor<f32>>,
    pub ids: Vec<String>,
}

fn stack(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    if shape.len() == 3 {
        shape.insert(0, parts.len());
    } else {
        shape[0] *= parts.len();
    }
    Tensor::new(shape, data)
}

impl Batch {
    /// `distances[i]` holds sample `i`'s per-scale prior distances (may be empty).
    pub fn assemble(samples: &[&Sample], distances: &[&Vec<Tensor<f32>>]) -> Self {
        let optical = stack(&samples.iter().map(|s| &s.optical).collect::<Vec<_>>());
        let sar = stack(&samples.iter().map(|s| &s.sar).collect::<Vec<_>>());
        let scales = distances.first().map_or(0, |d| d.len());
        let distances = (0..scales).map(|k| stack(&distances.iter().map(|d| &d[k]).collect::<Vec<_>>())).collect();
        Self {
            optical,
            sar,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            distances,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        }
    }
}

/// One optimisation step. Leaves the parameters untouched if the loss is not finite.
pub fn train_step(
    model: &Model<f32>,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    batch: &Batch,
    weights: &[f64],
    grad_clip: Option<f64>,
) -> Result<f64> {
    let (value, grads, buffers) = {
        let mut g = Graph::training(store);
        let o = g.input(batch.optical.clone());
        let s = g.input(batch.sar.clone());
        let dist = (!batch.distances.is_empty()).then_some(batch.distances.as_slice());
        let out = model.forward(&mut g, o, s, dist)?;
        let labels: Vec<&ChangeLabelMap> = batch.labels.iter().collect();
        let l = loss(&mut g, out.logits, &labels, weights)?;
        let value = g.value(l).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: adam.steps() as usize + 1, loss: value, dump: PathBuf::new() });
        }
        (value, g.backward(l), g.take_buffer_updates())
    };
    let scale = clip_factor(global_grad_norm(store, &grads), grad_clip);
    adam.step_scaled(store, &grads, scale);
    for (id, v) in buffers {
        *store.value_mut(id) = v;
    }
    Ok(value)
}

/// Trains on in-memory samples.
pub struct Trainer {
    pub model: Model<f32>,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub weights: Vec<f64>,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    train: Vec<Sample>,
    distances: Vec<Vec<Tensor<f32>>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, train: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let (model, store) = Model::<f32>::build(model_config, config.seed)?;
        let labels: Vec<&ChangeLabelMap> = train.iter().map(|s| &s.label).collect();
        let weights = class_weights(&labels, model_config.num_classes, config.class_weight_mode);
        let distances = prior_cache(&model, &store, &train)?;
        let adam = Adam::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });
        Ok(Self {
            model,
            store,
            adam,
            weights,
            batch_size: config.batch_size.min(train.len()),
            grad_clip: config.grad_clip,
            train,
            distances,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xBA7C4)),
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next batch of a per-epoch seeded shuffle.
    fn next_batch(&mut self) -> Batch {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.train.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let samples: Vec<&Sample> = picked.iter().map(|&i| &self.train[i]).collect();
        let dists: Vec<&Vec<Tensor<f32>>> = picked.iter().map(|&i| &self.distances[i]).collect();
        Batch::assemble(&samples, &dists)
    }

    /// Runs one step and returns `(loss, batch ids)`.
    pub fn step(&mut self) -> Result<(f64, Vec<String>)> {
        let batch = self.next_batch();
        let l = train_step(&self.model, &mut self.store, &mut self.adam, &batch, &self.weights, self.grad_clip)?;
        Ok((l, batch.ids))
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<ConfusionMatrix> {
        evaluate(&self.model, &self.store, samples, self.batch_size.max(1))
    }
}

/// Per-sample prior distances (empty vectors for variants without priors).
pub fn prior_cache(model: &Model<f32>, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<Vec<Tensor<f32>>>> {
    samples
        .iter()
        .map(|s| {
            let o = stack(&[&s.optical]);
            let r = stack(&[&s.sar]);
            model.prior_distances(store, &o, &r)
        })
        .collect()
}

/// Inference-mode predictions for `samples`.
pub fn predict_samples(model: &Model<f32>, store: &ParamStore<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<ChangeLabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let dists = prior_cache(model, store, chunk)?;
        let batch = Batch::assemble(&refs, &dists.iter().collect::<Vec<_>>());
        let mut g = Graph::inference(store);
        let o = g.input(batch.optical);
        let s = g.input(batch.sar);
        let d = (!batch.distances.is_empty()).then_some(batch.distances.as_slice());
        let res = model.forward(&mut g, o, s, d)?;
        out.extend(predict(g.value(res.logits)));
    }
    Ok(out)
}

pub fn evaluate(model: &Model<f32>, store: &ParamStore<f32>, samples: &[Sample], batch_size: usize) -> Result<ConfusionMatrix> {
    let preds = predict_samples(model, store, samples, batch_size)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (p, s) in preds.iter().zip(samples) {
        cm.accumulate(p, &s.label)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub stages: Vec<&'static str>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_val: Option<MetricsReport>,
    /// Digest of every frozen leaf before and after training.
    pub frozen_digest: (String, String),
}

/// Trains from the on-disk dataset, writing the log and checkpoints under `out_dir`.
pub fn fit(config: &TrainConfig, out_dir: &Path) -> Result<FitReport> {
    config.validate()?;
    let manifest = Manifest::read(&config.dataset_root)?;
    let train = load_split(&config.dataset_root, config.train_split)?;
    let val = match config.val_split {
        Some(s) => load_split(&config.dataset_root, s)?,
        None => Vec::new(),
    };
    let model_config = config.model_config(manifest.config.size);
    fit_samples(config, &model_config, train, &val, out_dir)
}

pub fn fit_samples(config: &TrainConfig, model_config: &ModelConfig, train: Vec<Sample>, val: &[Sample], out_dir: &Path) -> Result<FitReport> {
    let mut trainer = Trainer::new(model_config, config, train)?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let file = File::create(&log_path).at(&log_path)?;
    let mut log = BufWriter::new(file);
    let stages = trainer.model.stages();
    let frozen = |s: &ParamStore<f32>| leaves_digest(s, |l| l.frozen);
    let digest_before = frozen(&trainer.store);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut final_val = None;
    for it in 1..=config.iterations {
        let (l, ids) = match trainer.step() {
            Ok(v) => v,
            Err(Error::Diverged { iteration, loss, .. }) => {
                let dump = out_dir.join(DIVERGENCE_DUMP);
                let body = json!({ "iteration": iteration, "loss": loss.to_string(), "losses": losses, "seed": config.seed });
                fs::write(&dump, serde_json::to_string_pretty(&body)?).at(&dump)?;
                return Err(Error::Diverged { iteration, loss, dump });
            }
            Err(e) => return Err(e),
        };
        let _ = ids;
        losses.push(l);
        let last = it == config.iterations;
        let validate = !val.is_empty() && (last || (config.val_interval > 0 && it % config.val_interval == 0));
        let val_miou = if validate {
            let report = trainer.evaluate(val)?.report()?;
            let m = report.miou;
            if last {
                final_val = Some(report);
            }
            Some(m)
        } else {
            None
        };
        if it % config.log_interval == 0 || last || val_miou.is_some() {
            let mut rec = json!({ "iter": it, "loss": l, "lr": config.learning_rate, "wallclock_s": start.elapsed().as_secs_f64() });
            if let Some(m) = val_miou {
                rec["val_miou"] = json!(m);
            }
            if it == 1 {
                rec["stages"] = json!(stages);
            }
            writeln!(log, "{rec}").at(&log_path)?;
        }
        if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 && !last {
            trainer.model.save(&trainer.store, &out_dir.join(format!("model_iter{it}.ckpt")))?;
        }
        if it % 50 == 0 {
            info!("iter {it}: loss {l:.5}");
        }
    }
    log.flush().at(&log_path)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.model.save(&trainer.store, &final_checkpoint)?;
    let digest_after = frozen(&trainer.store);
    Ok(FitReport { losses, stages, final_checkpoint, log_path, final_val, frozen_digest: (digest_before, digest_after) })
}
