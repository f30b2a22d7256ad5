//! Two-stage training: codebook pretraining on normal-light images, then
//! fine-tuning on low/normal pairs with a frozen codebook.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::grad::{Adam, AdamConfig, Ctx, ParamId, ParamKind, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_tensor, to_tensor, Image};
use crate::model::{Model, Stage};
use crate::objectives::discriminator_loss;
use crate::pipeline::augment::augment_pair;
use crate::pipeline::checkpoint::{Checkpoint, OptimizerState, RngState, SamplerState};
use crate::pipeline::config::Config;

/// Training images for one stage.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Normal-light images; pretraining reconstructs them.
    Images(Vec<Image>),
    Pairs {
        low: Vec<Image>,
        high: Vec<Image>,
    },
}

impl TrainData {
    fn len(&self) -> usize {
        match self {
            TrainData::Images(v) => v.len(),
            TrainData::Pairs { low, .. } => low.len(),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    pub usage_entropy: f64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: Config,
    pub stage: Stage,
    pub iteration: u64,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    rng: ChaCha8Rng,
    data: TrainData,
    order: Vec<usize>,
    cursor: usize,
}

const GEN: &str = "generator";
const DISC: &str = "discriminator";

fn adam(cfg: &Config, lr: f64) -> Adam<f32> {
    Adam::new(AdamConfig {
        lr,
        beta1: cfg.adam_betas[0],
        beta2: cfg.adam_betas[1],
        eps: cfg.adam_eps,
    })
}

/// Copy tensors into the store by name. Names outside `prefixes` are
/// ignored; names inside them must exist in the file with matching shape.
pub fn load_params(model: &mut Model<f32>, ckpt: &Checkpoint, prefixes: &[&str]) -> Result<()> {
    for id in model.ids_with_prefixes(prefixes) {
        let name = model.store.name(id).to_string();
        let t = ckpt
            .param(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
        if t.shape() != model.store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        model.store.set(id, t.clone());
    }
    Ok(())
}

/// Build the model a checkpoint describes and load every stored tensor.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut model = Model::new(&ckpt.config.model(), ckpt.config.seed)?;
    load_params(&mut model, ckpt, ckpt.stage.prefixes())?;
    model.codebook.set_usage_counts(&ckpt.codebook_usage)?;
    if ckpt.stage == Stage::Finetune {
        model.set_codebook_frozen(true);
    }
    Ok(model)
}

fn restore_optimizer(model: &Model<f32>, opt: &mut Adam<f32>, state: &OptimizerState) -> Result<()> {
    let mut moments = Vec::with_capacity(state.moments.len());
    for (name, m, v) in &state.moments {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
        moments.push((id, m.clone(), v.clone()));
    }
    opt.restore(state.step, moments);
    Ok(())
}

fn optimizer_state(model: &Model<f32>, opt: &Adam<f32>) -> OptimizerState {
    OptimizerState {
        step: opt.steps(),
        moments: opt
            .moments()
            .map(|(id, m, v)| (model.store.name(id).to_string(), m.clone(), v.clone()))
            .collect(),
    }
}

impl Trainer {
    fn build(config: Config, stage: Stage, data: TrainData, model: Model<f32>) -> Result<Self> {
        config.validate()?;
        if data.len() == 0 {
            return Err(Error::Data {
                path: config.data_dir.clone().unwrap_or_default(),
                msg: "empty training set".into(),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
        Ok(Self {
            gen_opt: adam(&config, config.lr),
            disc_opt: adam(&config, config.disc_lr),
            model,
            config,
            stage,
            iteration: 0,
            rng,
            data,
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn fresh_model(config: &Config) -> Result<Model<f32>> {
        let mut model = Model::new(&config.model(), config.seed)?;
        if let Some(path) = &config.feature_weights {
            let ex = model.extractor.clone();
            ex.load_weights(&mut model.store, path)?;
        }
        Ok(model)
    }

    pub fn pretrain(config: Config, images: Vec<Image>) -> Result<Self> {
        let model = Self::fresh_model(&config)?;
        Self::build(config, Stage::Pretrain, TrainData::Images(images), model)
    }

    /// Fine-tuning from a pretrain checkpoint: encoder, decoder, and codebook
    /// are copied by name; everything else starts from its initializer.
    pub fn finetune(config: Config, low: Vec<Image>, high: Vec<Image>, init: &Checkpoint) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::Shape(format!(
                "{} low vs {} normal images",
                low.len(),
                high.len()
            )));
        }
        let mut model = Self::fresh_model(&config)?;
        load_params(&mut model, init, Stage::Pretrain.prefixes())?;
        model.codebook.set_usage_counts(&init.codebook_usage)?;
        model.set_codebook_frozen(true);
        Self::build(config, Stage::Finetune, TrainData::Pairs { low, high }, model)
    }

    /// Continue from a checkpoint with the given data.
    pub fn resume(ckpt: &Checkpoint, data: TrainData) -> Result<Self> {
        let model = model_from_checkpoint(ckpt)?;
        let mut t = Self::build(ckpt.config.clone(), ckpt.stage, data, model)?;
        t.iteration = ckpt.iteration;
        t.rng = ckpt.rng.restore()?;
        // A different data set starts a fresh epoch.
        let n = t.data.len();
        let s = &ckpt.sampler;
        if s.order.len() == n && s.cursor <= n && s.order.iter().all(|&i| i < n) {
            t.order = s.order.clone();
            t.cursor = s.cursor;
        }
        for (name, state) in &ckpt.optimizers {
            match name.as_str() {
                GEN => restore_optimizer(&t.model, &mut t.gen_opt, state)?,
                DISC => restore_optimizer(&t.model, &mut t.disc_opt, state)?,
                other => return Err(Error::Checkpoint(format!("unknown optimizer {other}"))),
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        Checkpoint {
            stage: self.stage,
            iteration: self.iteration,
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
            codebook_usage: self.model.codebook.usage_counts(),
            sampler: SamplerState {
                order: self.order.clone(),
                cursor: self.cursor,
            },
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
            optimizers: vec![
                (GEN.to_string(), optimizer_state(&self.model, &self.gen_opt)),
                (DISC.to_string(), optimizer_state(&self.model, &self.disc_opt)),
            ],
        }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        (0..self.config.batch)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    fn sample(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let idx = self.next_indices();
        let (crop, hflip) = (self.config.crop, self.config.hflip);
        let mut lows = Vec::with_capacity(idx.len());
        let mut highs = Vec::with_capacity(idx.len());
        for i in idx {
            let (l, h) = match &self.data {
                TrainData::Images(v) => (&v[i], &v[i]),
                TrainData::Pairs { low, high } => (&low[i], &high[i]),
            };
            let (l, h, _) = augment_pair(&mut self.rng, l, h, crop, hflip)?;
            lows.push(l);
            highs.push(h);
        }
        Ok((to_tensor(&lows)?, to_tensor(&highs)?))
    }

    fn numeric_check(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "{what} is {v} at iteration {}",
                self.iteration + 1
            )))
        }
    }

    /// One optimization step of the current stage.
    pub fn step(&mut self) -> Result<StepLog> {
        let (low, high) = self.sample()?;
        self.gen_opt.config.lr = self.config.lr_at(self.stage, self.iteration);
        let mut losses = BTreeMap::new();
        let mut kappa = None;
        match self.stage {
            Stage::Pretrain => {
                let ids = self.model.generator_ids(Stage::Pretrain);
                let (grads, buffers, loss, rec) = {
                    let cx = Ctx::new(&self.model.store, true);
                    let x = cx.input(high);
                    let (loss, rec, _) = self.model.pretrain_loss(&cx, &x)?;
                    let l = loss.scalar();
                    self.numeric_check("vq loss", l)?;
                    let grads = cx.backward(&loss);
                    (filter(cx.param_grads(&grads), &ids), cx.take_buffer_updates(), l, rec)
                };
                apply_buffers(&mut self.model, buffers);
                self.gen_opt.step(&mut self.model.store, &grads);
                losses.insert("vq".into(), loss);
                losses.insert("rec_l1".into(), rec);
            }
            Stage::Finetune => {
                let ids = self.model.generator_ids(Stage::Finetune);
                let (grads, buffers, output, report, fci, ate) = {
                    let cx = Ctx::new(&self.model.store, true);
                    let (lv, gv) = (cx.input(low), cx.input(high.clone()));
                    let fw = self.model.finetune_forward(&cx, &lv, &gv)?;
                    self.numeric_check("total loss", fw.report.total)?;
                    let grads = cx.backward(&fw.total);
                    (
                        filter(cx.param_grads(&grads), &ids),
                        cx.take_buffer_updates(),
                        fw.output.value().clone(),
                        fw.report,
                        fw.fci,
                        fw.ate,
                    )
                };
                apply_buffers(&mut self.model, buffers);
                self.gen_opt.step(&mut self.model.store, &grads);
                let fci_mod = self.model.fci.clone();
                fci_mod.clamp_kappa(&mut self.model.store);
                if self.config.w_adv > 0.0 {
                    let d = self.discriminator_step(&high, &output)?;
                    losses.insert("disc".into(), d);
                }
                for (k, v) in [
                    ("pix", report.pix),
                    ("cp", report.cp),
                    ("per", report.per),
                    ("adv", report.adv),
                    ("pci", report.pci),
                    ("fci_t", report.fci_t),
                    ("fci", fci),
                    ("ate", ate),
                    ("total", report.total),
                ] {
                    losses.insert(k.into(), v);
                }
                kappa = Some(self.model.fci.kappa_value(&self.model.store));
            }
        }
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            stage: self.stage,
            losses,
            kappa,
            usage_entropy: self.model.codebook.usage_entropy(),
        })
    }

    fn discriminator_step(&mut self, gt: &Tensor<f32>, output: &Tensor<f32>) -> Result<f64> {
        let ids = self.model.discriminator_ids();
        let mut last = 0.0;
        for _ in 0..self.config.disc_steps {
            let grads = {
                let cx = Ctx::new(&self.model.store, true);
                let d_gt = self.model.disc.probability(&cx, &cx.input(gt.clone()));
                let d_out = self.model.disc.probability(&cx, &cx.input(output.clone()));
                let loss = discriminator_loss(&d_gt, &d_out);
                last = loss.scalar();
                self.numeric_check("discriminator loss", last)?;
                filter(cx.param_grads(&cx.backward(&loss)), &ids)
            };
            self.disc_opt.step(&mut self.model.store, &grads);
        }
        Ok(last)
    }

    /// Run `iters` steps. With an output directory, appends the JSON-lines
    /// log and writes checkpoints every `checkpoint_every` steps and at the
    /// end. Returns the logs and the final checkpoint path if one was
    /// written.
    pub fn run(&mut self, iters: u64, out: Option<&Path>) -> Result<(Vec<StepLog>, Option<PathBuf>)> {
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(format!("{}_log.jsonl", stage_name(self.stage)));
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                Some((p, f))
            }
            None => None,
        };
        let mut logs = Vec::with_capacity(iters as usize);
        let mut last = None;
        for i in 0..iters {
            let entry = self.step()?;
            if let Some((p, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            if self.iteration.is_multiple_of(50) {
                log::info!("{} iter {} {:?}", stage_name(self.stage), self.iteration, entry.losses);
            }
            logs.push(entry);
            let at_end = i + 1 == iters;
            if let Some(dir) = out {
                if at_end || self.iteration.is_multiple_of(self.config.checkpoint_every) {
                    last = Some(self.save(dir)?);
                }
            }
        }
        Ok((logs, last))
    }

    /// Write `DIR/<stage>-<iteration>.ckpt` and refresh `DIR/<stage>-latest.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let ckpt = self.checkpoint();
        let name = stage_name(self.stage);
        let path = dir.join(format!("{name}-{:08}.ckpt", self.iteration));
        ckpt.save(&path)?;
        ckpt.save(&dir.join(format!("{name}-latest.ckpt")))?;
        Ok(path)
    }
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

fn filter(grads: Vec<(ParamId, Tensor<f32>)>, keep: &[ParamId]) -> Vec<(ParamId, Tensor<f32>)> {
    grads.into_iter().filter(|(id, _)| keep.contains(id)).collect()
}

fn apply_buffers(model: &mut Model<f32>, updates: Vec<(ParamId, Tensor<f32>)>) {
    for (id, t) in updates {
        debug_assert_eq!(model.store.kind(id), ParamKind::Buffer);
        model.store.set(id, t);
    }
}

fn as_rgb(img: &Image) -> Result<Image> {
    match img.colorspace() {
        crate::image::ColorSpace::Rgb => Ok(img.clone()),
        crate::image::ColorSpace::YCrCb => img.to_rgb(),
    }
}

/// Side length after padding `n` up to a multiple of `f`.
pub fn padded_len(n: usize, f: usize) -> usize {
    n.div_ceil(f) * f
}

/// Enhance one image: reflect-pad to the downsampling factor, run the
/// inference path, crop back, clamp to `[0, 1]`.
pub fn enhance_image(model: &Model<f32>, img: &Image) -> Result<Image> {
    let img = as_rgb(img)?;
    let f = model.config.backbone.downsample_factor().max(4);
    let (h, w) = (img.height(), img.width());
    let padded = img.reflect_pad(padded_len(h, f), padded_len(w, f));
    let cx = Ctx::new(&model.store, false);
    let out = cx.no_grad(|| -> Result<Tensor<f32>> {
        let x = cx.input(to_tensor(&[padded])?);
        Ok(model.enhance(&cx, &x)?.value().clone())
    })?;
    let out = from_tensor(&out)?.remove(0);
    if !out.all_finite() {
        return Err(Error::Numeric("non-finite enhanced output".into()));
    }
    Ok(out.crop(0, 0, h, w)?.clamped())
}

/// Encode, quantize, decode without refinement (the pretraining path).
pub fn reconstruct_image(model: &Model<f32>, img: &Image) -> Result<Image> {
    let img = as_rgb(img)?;
    let f = model.config.backbone.downsample_factor().max(4);
    let (h, w) = (img.height(), img.width());
    let padded = img.reflect_pad(padded_len(h, f), padded_len(w, f));
    let cx = Ctx::new(&model.store, false);
    let out = cx.no_grad(|| -> Result<Tensor<f32>> {
        let x = cx.input(to_tensor(&[padded])?);
        Ok(model.reconstruct(&cx, &x)?.0.value().clone())
    })?;
    Ok(from_tensor(&out)?.remove(0).crop(0, 0, h, w)?.clamped())
}
